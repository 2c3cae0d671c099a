//! The consistency-aware attention recommender.
//!
//! A padded prefix of item ids is encoded into a list representation by two
//! attention heads over the real (non-padding) items: a general head whose
//! query is a learned context vector and a current head whose query is a
//! projection of the last item. A two-way softmax gate, fed with the
//! difference between the item centroid and the last item plus a third
//! attention summary, mixes the two heads. The mixture goes through an
//! optional user offset and a two-layer ReLU network, and candidates are scored
//! by a dot product with their item embedding.
//!
//! Gradients are derived by hand in [`ModelParams::backward`].

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::data::{ItemId, PADDING};
use crate::error::{Error, Result};

/// Which list representation feeds the prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Gate-weighted mixture of both heads.
    Car,
    /// Unweighted sum of both heads.
    NoGating,
    /// Current-preference head alone.
    CppmOnly,
    /// General-preference head alone.
    GupmOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Car, Variant::NoGating, Variant::CppmOnly, Variant::GupmOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Car => "car",
            Variant::NoGating => "no-gating",
            Variant::CppmOnly => "cppm",
            Variant::GupmOnly => "gupm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    /// Real catalog size; the item table has one extra (padding) row.
    pub num_items: usize,
    pub num_users: usize,
    /// Prefix capacity n: only the most recent `max_len` items are encoded.
    pub max_len: usize,
    pub use_user_embedding: bool,
    pub variant: Variant,
}

/// Every learnable tensor. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    /// (num_items + 1) x d, row 0 is the padding item and stays zero.
    pub items: Array2<f64>,
    pub users: Array2<f64>,
    pub key: Array2<f64>,
    pub query: Array2<f64>,
    pub context: Array1<f64>,
    pub gate_key: Array2<f64>,
    pub gate_context: Array1<f64>,
    /// 2 x 2d, rows produce the current and general gate logits.
    pub gate: Array2<f64>,
    pub ff1: Array2<f64>,
    pub ff_bias1: Array1<f64>,
    pub ff2: Array2<f64>,
    pub ff_bias2: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 12] = [
    "items",
    "users",
    "key",
    "query",
    "context",
    "gate_key",
    "gate_context",
    "gate",
    "ff1",
    "ff_bias1",
    "ff2",
    "ff_bias2",
];

impl Weights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.dim;
        Weights {
            items: Array2::zeros((config.num_items + 1, d)),
            users: Array2::zeros((config.num_users, d)),
            key: Array2::zeros((d, d)),
            query: Array2::zeros((d, d)),
            context: Array1::zeros(d),
            gate_key: Array2::zeros((d, d)),
            gate_context: Array1::zeros(d),
            gate: Array2::zeros((2, 2 * d)),
            ff1: Array2::zeros((d, d)),
            ff_bias1: Array1::zeros(d),
            ff2: Array2::zeros((d, d)),
            ff_bias2: Array1::zeros(d),
        }
    }

    /// Shapes in [`TENSOR_NAMES`] order; vectors report a single dimension.
    pub fn shapes(&self) -> [Vec<usize>; 12] {
        self.tensors().map(|(name, _)| self.shape_of(name))
    }

    fn shape_of(&self, name: &str) -> Vec<usize> {
        match name {
            "items" => self.items.shape().to_vec(),
            "users" => self.users.shape().to_vec(),
            "key" => self.key.shape().to_vec(),
            "query" => self.query.shape().to_vec(),
            "context" => self.context.shape().to_vec(),
            "gate_key" => self.gate_key.shape().to_vec(),
            "gate_context" => self.gate_context.shape().to_vec(),
            "gate" => self.gate.shape().to_vec(),
            "ff1" => self.ff1.shape().to_vec(),
            "ff_bias1" => self.ff_bias1.shape().to_vec(),
            "ff2" => self.ff2.shape().to_vec(),
            "ff_bias2" => self.ff_bias2.shape().to_vec(),
            _ => unreachable!(),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 12] {
        [
            ("items", self.items.as_slice().unwrap()),
            ("users", self.users.as_slice().unwrap()),
            ("key", self.key.as_slice().unwrap()),
            ("query", self.query.as_slice().unwrap()),
            ("context", self.context.as_slice().unwrap()),
            ("gate_key", self.gate_key.as_slice().unwrap()),
            ("gate_context", self.gate_context.as_slice().unwrap()),
            ("gate", self.gate.as_slice().unwrap()),
            ("ff1", self.ff1.as_slice().unwrap()),
            ("ff_bias1", self.ff_bias1.as_slice().unwrap()),
            ("ff2", self.ff2.as_slice().unwrap()),
            ("ff_bias2", self.ff_bias2.as_slice().unwrap()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 12] {
        [
            ("items", self.items.as_slice_mut().unwrap()),
            ("users", self.users.as_slice_mut().unwrap()),
            ("key", self.key.as_slice_mut().unwrap()),
            ("query", self.query.as_slice_mut().unwrap()),
            ("context", self.context.as_slice_mut().unwrap()),
            ("gate_key", self.gate_key.as_slice_mut().unwrap()),
            ("gate_context", self.gate_context.as_slice_mut().unwrap()),
            ("gate", self.gate.as_slice_mut().unwrap()),
            ("ff1", self.ff1.as_slice_mut().unwrap()),
            ("ff_bias1", self.ff_bias1.as_slice_mut().unwrap()),
            ("ff2", self.ff2.as_slice_mut().unwrap()),
            ("ff_bias2", self.ff_bias2.as_slice_mut().unwrap()),
        ]
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += scale * b);
        }
    }

    pub fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights,
}

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `softplus(x) = ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise ranking loss `-ln sigmoid(pos - neg)`.
pub fn bpr_pair_loss(pos: f64, neg: f64) -> f64 {
    softplus(neg - pos)
}

/// Unmasked attention over rows of `values`/`keys`: returns the pooled vector and its weights.
fn pool(values: ArrayView2<'_, f64>, keys: ArrayView2<'_, f64>, query: ArrayView1<'_, f64>) -> (Array1<f64>, Vec<f64>) {
    let logits: Vec<f64> = keys.outer_iter().map(|k| k.dot(&query)).collect();
    let weights = softmax(&logits);
    let out = Array1::from(weights.clone()).dot(&values);
    (out, weights)
}

/// Gradients of a pooled vector with respect to its inputs.
/// Accumulates into `d_values`/`d_keys`; returns the query gradient.
fn pool_backward(
    values: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    query: ArrayView1<'_, f64>,
    weights: &[f64],
    d_out: ArrayView1<'_, f64>,
    d_values: &mut Array2<f64>,
    d_keys: &mut Array2<f64>,
) -> Array1<f64> {
    let d_weights: Vec<f64> = values.outer_iter().map(|v| v.dot(&d_out)).collect();
    let mean: f64 = weights.iter().zip(&d_weights).map(|(a, g)| a * g).sum();
    let mut d_query = Array1::zeros(query.len());
    for (i, (&a, &g)) in weights.iter().zip(&d_weights).enumerate() {
        let d_logit = a * (g - mean);
        d_values.row_mut(i).scaled_add(a, &d_out);
        d_keys.row_mut(i).scaled_add(d_logit, &query);
        d_query.scaled_add(d_logit, &keys.row(i));
    }
    d_query
}

fn gather(values: ArrayView2<'_, f64>, mask: &[bool]) -> Result<(Array2<f64>, Vec<usize>)> {
    assert_eq!(values.nrows(), mask.len(), "mask length must match sequence length");
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    Ok((values.select(Axis(0), &idx), idx))
}

fn scatter(weights: &[f64], idx: &[usize], len: usize) -> Vec<f64> {
    let mut full = vec![0.0; len];
    for (&w, &i) in weights.iter().zip(idx) {
        full[i] = w;
    }
    full
}

/// Masked attention pooling. `mask[i]` is true for real positions; masked
/// positions get weight exactly zero and do not enter the softmax.
pub fn attention_pool(
    values: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    query: ArrayView1<'_, f64>,
    mask: &[bool],
) -> Result<(Array1<f64>, Vec<f64>)> {
    let (v, idx) = gather(values, mask)?;
    let k = keys.select(Axis(0), &idx);
    let (out, w) = pool(v.view(), k.view(), query);
    Ok((out, scatter(&w, &idx, mask.len())))
}

/// Mean of the real items minus the last real item.
pub fn gate_input_consistency(items: ArrayView2<'_, f64>, mask: &[bool]) -> Result<Array1<f64>> {
    let (x, _) = gather(items, mask)?;
    Ok(consistency_input(x.view()))
}

fn consistency_input(x: ArrayView2<'_, f64>) -> Array1<f64> {
    // Sum of differences from the last item, so identical items give exactly zero.
    let last = x.row(x.nrows() - 1);
    let mut out = Array1::zeros(x.ncols());
    for row in x.outer_iter() {
        out += &(&row - &last);
    }
    out / x.nrows() as f64
}

/// Softmax over the two gate logits: `(current, general)`.
pub fn gate_values(consistency: ArrayView1<'_, f64>, list: ArrayView1<'_, f64>, gate: ArrayView2<'_, f64>) -> [f64; 2] {
    let d = consistency.len();
    let logits = gate.slice(s![.., ..d]).dot(&consistency) + gate.slice(s![.., d..]).dot(&list);
    let g = softmax(&[logits[0], logits[1]]);
    [g[0], g[1]]
}

/// `g_current * current + g_general * general`.
pub fn fuse(current: ArrayView1<'_, f64>, general: ArrayView1<'_, f64>, gate: [f64; 2]) -> Array1<f64> {
    &current * gate[0] + &general * gate[1]
}

/// `ReLU(x W1 + b1) W2 + b2`.
pub fn feed_forward(
    input: ArrayView1<'_, f64>,
    w1: ArrayView2<'_, f64>,
    b1: ArrayView1<'_, f64>,
    w2: ArrayView2<'_, f64>,
    b2: ArrayView1<'_, f64>,
) -> Array1<f64> {
    let hidden = (input.dot(&w1) + b1).mapv(|v| v.max(0.0));
    hidden.dot(&w2) + b2
}

/// Intermediate values of one encoded prefix, laid out over the padded positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub general_weights: Vec<f64>,
    pub current_weights: Vec<f64>,
    pub gate_list_weights: Vec<f64>,
    /// `(g_current, g_general)`; only computed by the gated variant.
    pub gate: Option<[f64; 2]>,
    pub general: Array1<f64>,
    pub current: Array1<f64>,
    pub consistency_input: Array1<f64>,
    pub list_input: Array1<f64>,
    pub list: Array1<f64>,
    pub personalized: Array1<f64>,
    pub output: Array1<f64>,
}

/// Everything backward needs for one encoded prefix.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub ids: Vec<ItemId>,
    pub positions: Vec<usize>,
    pub prefix_len: usize,
    pub user: usize,
    x: Array2<f64>,
    keys: Array2<f64>,
    general_w: Vec<f64>,
    general: Array1<f64>,
    query: Array1<f64>,
    current_w: Vec<f64>,
    current: Array1<f64>,
    gate_keys: Array2<f64>,
    gate_list_w: Vec<f64>,
    consistency: Array1<f64>,
    list_input: Array1<f64>,
    gate: [f64; 2],
    list: Array1<f64>,
    personalized: Array1<f64>,
    pre: Array1<f64>,
    hidden: Array1<f64>,
    /// Final list representation that candidates are scored against.
    pub output: Array1<f64>,
}

impl Encoded {
    pub fn trace(&self) -> ForwardTrace {
        let n = self.prefix_len;
        let gated = !self.gate_list_w.is_empty();
        ForwardTrace {
            general_weights: scatter(&self.general_w, &self.positions, n),
            current_weights: scatter(&self.current_w, &self.positions, n),
            gate_list_weights: scatter(&self.gate_list_w, &self.positions, n),
            gate: gated.then_some(self.gate),
            general: self.general.clone(),
            current: self.current.clone(),
            consistency_input: self.consistency.clone(),
            list_input: self.list_input.clone(),
            list: self.list.clone(),
            personalized: self.personalized.clone(),
            output: self.output.clone(),
        }
    }
}

impl ModelParams {
    /// Xavier-uniform tables and matrices; context vectors and biases at zero.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Self {
        let d = config.dim;
        let mut items = xavier(config.num_items + 1, d, rng);
        items.row_mut(PADDING as usize).fill(0.0);
        let weights = Weights {
            items,
            users: xavier(config.num_users, d, rng),
            key: xavier(d, d, rng),
            query: xavier(d, d, rng),
            context: Array1::zeros(d),
            gate_key: xavier(d, d, rng),
            gate_context: Array1::zeros(d),
            gate: xavier(2, 2 * d, rng),
            ff1: xavier(d, d, rng),
            ff_bias1: Array1::zeros(d),
            ff2: xavier(d, d, rng),
            ff_bias2: Array1::zeros(d),
        };
        ModelParams { config, weights }
    }

    fn check_item(&self, item: ItemId) -> Result<()> {
        if item == PADDING || item as usize > self.config.num_items {
            return Err(Error::InvalidItem(item as usize));
        }
        Ok(())
    }

    /// Item embedding row for a catalog item.
    pub fn item(&self, item: ItemId) -> ArrayView1<'_, f64> {
        self.weights.items.row(item as usize)
    }

    /// Encodes a (possibly padded) prefix. Padding ids are masked out and the
    /// last real position supplies the current-preference query.
    pub fn encode(&self, prefix: &[ItemId], user: usize) -> Result<Encoded> {
        let w = &self.weights;
        let variant = self.config.variant;
        let positions: Vec<usize> = prefix
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != PADDING)
            .map(|(i, _)| i)
            .collect();
        if positions.is_empty() {
            return Err(Error::EmptyPrefix);
        }
        let ids: Vec<ItemId> = positions.iter().map(|&i| prefix[i]).collect();
        for &id in &ids {
            self.check_item(id)?;
        }
        if self.config.use_user_embedding && user >= self.config.num_users {
            return Err(Error::UnknownUser(user.to_string()));
        }
        let x = w.items.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
        let last = x.row(x.nrows() - 1);

        let keys = x.dot(&w.key.t());
        let (general, general_w) = pool(x.view(), keys.view(), w.context.view());
        let query = w.query.dot(&last);
        let (current, current_w) = pool(x.view(), keys.view(), query.view());

        let d = self.config.dim;
        let (gate_keys, gate_list_w, consistency, list_input, gate, list) = match variant {
            Variant::Car => {
                let gate_keys = x.dot(&w.gate_key.t());
                let (list_input, gate_list_w) = pool(x.view(), gate_keys.view(), w.gate_context.view());
                let consistency = consistency_input(x.view());
                let gate = gate_values(consistency.view(), list_input.view(), w.gate.view());
                let list = fuse(current.view(), general.view(), gate);
                (gate_keys, gate_list_w, consistency, list_input, gate, list)
            }
            other => {
                let list = match other {
                    Variant::NoGating => &current + &general,
                    Variant::CppmOnly => current.clone(),
                    _ => general.clone(),
                };
                (Array2::zeros((0, d)), Vec::new(), Array1::zeros(d), Array1::zeros(d), [0.0; 2], list)
            }
        };

        let personalized = if self.config.use_user_embedding {
            &list + &w.users.row(user)
        } else {
            list.clone()
        };
        let pre = personalized.dot(&w.ff1) + &w.ff_bias1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let output = hidden.dot(&w.ff2) + &w.ff_bias2;

        Ok(Encoded {
            ids,
            positions,
            prefix_len: prefix.len(),
            user,
            x,
            keys,
            general_w,
            general,
            query,
            current_w,
            current,
            gate_keys,
            gate_list_w,
            consistency,
            list_input,
            gate,
            list,
            personalized,
            pre,
            hidden,
            output,
        })
    }

    /// Matrix-factorisation score of one catalog item against an encoded list.
    pub fn score(&self, item: ItemId, output: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_item(item)?;
        Ok(self.item(item).dot(&output))
    }

    /// Scores every candidate for a prefix and returns the trace.
    pub fn forward(&self, prefix: &[ItemId], user: usize, candidates: &[ItemId]) -> Result<(Vec<f64>, ForwardTrace)> {
        let enc = self.encode(prefix, user)?;
        let scores = candidates
            .iter()
            .map(|&c| self.score(c, enc.output.view()))
            .collect::<Result<_>>()?;
        Ok((scores, enc.trace()))
    }

    /// Backpropagates `d_output` (gradient w.r.t. the encoded list
    /// representation) into `grads`. Item-table gradients from the scored
    /// candidates are the caller's responsibility.
    pub fn backward(&self, enc: &Encoded, d_output: ArrayView1<'_, f64>, grads: &mut Weights) {
        let w = &self.weights;
        let t = enc.x.nrows();
        let x = enc.x.view();

        // Feed-forward head.
        for (i, &h) in enc.hidden.iter().enumerate() {
            if h != 0.0 {
                grads.ff2.row_mut(i).scaled_add(h, &d_output);
            }
        }
        grads.ff_bias2 += &d_output;
        let d_hidden = w.ff2.dot(&d_output);
        let d_pre = Array1::from_shape_fn(d_hidden.len(), |i| if enc.pre[i] > 0.0 { d_hidden[i] } else { 0.0 });
        for (i, &p) in enc.personalized.iter().enumerate() {
            grads.ff1.row_mut(i).scaled_add(p, &d_pre);
        }
        grads.ff_bias1 += &d_pre;
        let d_list = w.ff1.dot(&d_pre);
        if self.config.use_user_embedding {
            grads.users.row_mut(enc.user).scaled_add(1.0, &d_list);
        }

        let mut dx = Array2::<f64>::zeros(x.raw_dim());
        let (d_general, d_current) = match self.config.variant {
            Variant::Car => {
                let g = enc.gate;
                let dg = [enc.current.dot(&d_list), enc.general.dot(&d_list)];
                let mean = g[0] * dg[0] + g[1] * dg[1];
                let d_logits = Array1::from(vec![g[0] * (dg[0] - mean), g[1] * (dg[1] - mean)]);
                let d = self.config.dim;
                for r in 0..2 {
                    grads.gate.slice_mut(s![r, ..d]).scaled_add(d_logits[r], &enc.consistency);
                    grads.gate.slice_mut(s![r, d..]).scaled_add(d_logits[r], &enc.list_input);
                }
                let dz = w.gate.t().dot(&d_logits);
                let d_consistency = dz.slice(s![..d]);
                let d_list_input = dz.slice(s![d..]);

                // Centroid minus last item.
                for mut row in dx.outer_iter_mut() {
                    row.scaled_add(1.0 / t as f64, &d_consistency);
                }
                dx.row_mut(t - 1).scaled_add(-1.0, &d_consistency);

                let mut d_gate_keys = Array2::zeros(x.raw_dim());
                let d_gate_context = pool_backward(
                    x,
                    enc.gate_keys.view(),
                    w.gate_context.view(),
                    &enc.gate_list_w,
                    d_list_input,
                    &mut dx,
                    &mut d_gate_keys,
                );
                grads.gate_context += &d_gate_context;
                grads.gate_key += &d_gate_keys.t().dot(&x);
                dx += &d_gate_keys.dot(&w.gate_key);

                (Some(&d_list * g[1]), Some(&d_list * g[0]))
            }
            Variant::NoGating => (Some(d_list.clone()), Some(d_list)),
            Variant::CppmOnly => (None, Some(d_list)),
            Variant::GupmOnly => (Some(d_list), None),
        };

        let mut d_keys = Array2::zeros(x.raw_dim());
        if let Some(d_general) = d_general {
            let d_context = pool_backward(
                x,
                enc.keys.view(),
                w.context.view(),
                &enc.general_w,
                d_general.view(),
                &mut dx,
                &mut d_keys,
            );
            grads.context += &d_context;
        }
        if let Some(d_current) = d_current {
            let d_query = pool_backward(
                x,
                enc.keys.view(),
                enc.query.view(),
                &enc.current_w,
                d_current.view(),
                &mut dx,
                &mut d_keys,
            );
            let last = x.row(t - 1);
            for (r, &g) in d_query.iter().enumerate() {
                grads.query.row_mut(r).scaled_add(g, &last);
            }
            dx.row_mut(t - 1).scaled_add(1.0, &w.query.t().dot(&d_query));
        }
        grads.key += &d_keys.t().dot(&x);
        dx += &d_keys.dot(&w.key);

        for (row, &id) in dx.outer_iter().zip(&enc.ids) {
            grads.items.row_mut(id as usize).scaled_add(1.0, &row);
        }
    }

    /// Pairwise loss for one (prefix, positive, negative) triple, with its
    /// gradient accumulated into `grads` scaled by `scale`.
    pub fn pair_loss_and_grad(
        &self,
        prefix: &[ItemId],
        user: usize,
        positive: ItemId,
        negative: ItemId,
        scale: f64,
        grads: &mut Weights,
    ) -> Result<f64> {
        let enc = self.encode(prefix, user)?;
        let f = enc.output.view();
        let pos = self.score(positive, f)?;
        let neg = self.score(negative, f)?;
        let loss = bpr_pair_loss(pos, neg);
        // d loss / d (pos - neg)
        let d_margin = -sigmoid(neg - pos) * scale;
        let d_output = (&self.item(positive) - &self.item(negative)) * d_margin;
        grads.items.row_mut(positive as usize).scaled_add(d_margin, &f);
        grads.items.row_mut(negative as usize).scaled_add(-d_margin, &f);
        self.backward(&enc, d_output.view(), grads);
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(dim: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            dim,
            num_items: 12,
            num_users: 3,
            max_len: 8,
            use_user_embedding: true,
            variant,
        }
    }

    fn random_params(dim: usize, variant: Variant, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::init(config(dim, variant), &mut rng);
        // Non-zero context vectors and biases so every path is exercised.
        for v in [
            &mut p.weights.context,
            &mut p.weights.gate_context,
            &mut p.weights.ff_bias1,
            &mut p.weights.ff_bias2,
        ] {
            v.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        p.weights.items.mapv_inplace(|v| v * 5.0);
        p.weights.items.row_mut(0).fill(0.0);
        p
    }

    #[test]
    fn attention_singleton_and_hand_softmax() {
        let values = arr2(&[[3.0, -1.0], [7.0, 2.0]]);
        let (out, w) = attention_pool(values.view(), values.view(), arr1(&[1.0, 0.0]).view(), &[false, true]).unwrap();
        assert_eq!(w, vec![0.0, 1.0]);
        assert_eq!(out, arr1(&[7.0, 2.0]));

        // Logits (0, ln 3).
        let keys = arr2(&[[0.0, 0.0], [3f64.ln(), 0.0]]);
        let (_, w) = attention_pool(values.view(), keys.view(), arr1(&[1.0, 0.0]).view(), &[true, true]).unwrap();
        assert_abs_diff_eq!(w[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 0.75, epsilon = 1e-15);

        let same = arr2(&[[1.5, 2.5], [1.5, 2.5], [1.5, 2.5]]);
        let keys = arr2(&[[1.0, 0.0], [0.0, 1.0], [4.0, 2.0]]);
        let (out, _) = attention_pool(same.view(), keys.view(), arr1(&[0.3, -2.0]).view(), &[true; 3]).unwrap();
        assert_abs_diff_eq!(out[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 2.5, epsilon = 1e-12);

        assert!(matches!(
            attention_pool(same.view(), keys.view(), arr1(&[0.0, 0.0]).view(), &[false; 3]),
            Err(Error::EmptyPrefix)
        ));
    }

    fn toy_params(dim: usize, variant: Variant) -> ModelParams {
        let cfg = ModelConfig {
            dim,
            num_items: 4,
            num_users: 1,
            max_len: 4,
            use_user_embedding: false,
            variant,
        };
        let mut p = ModelParams {
            config: cfg,
            weights: Weights::zeros(&cfg),
        };
        p.weights.key = Array2::eye(dim);
        p.weights.query = Array2::eye(dim);
        p.weights.ff1 = Array2::eye(dim);
        p.weights.ff2 = Array2::eye(dim);
        p
    }

    #[test]
    fn general_head_hand_values() {
        let mut p = toy_params(2, Variant::GupmOnly);
        p.weights.items = arr2(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [1.0, 1.0], [3.0, 1.0]]);
        // h = 0: plain mean.
        let enc = p.encode(&[0, 1, 2], 0).unwrap();
        assert_eq!(enc.trace().general, arr1(&[1.0, 1.0]));
        assert_eq!(enc.trace().general_weights, vec![0.0, 0.5, 0.5]);
        // Single item.
        let enc = p.encode(&[0, 0, 4], 0).unwrap();
        assert_eq!(enc.trace().general, arr1(&[3.0, 1.0]));
        // W^K = I, h = (1, 0): logits (2, 0).
        p.weights.context = arr1(&[1.0, 0.0]);
        let tr = p.encode(&[1, 2], 0).unwrap().trace();
        let a = 1.0 / (1.0 + (-2f64).exp());
        assert_abs_diff_eq!(tr.general_weights[0], 0.8807970779778823, epsilon = 1e-12);
        assert_abs_diff_eq!(tr.general_weights[0], a, epsilon = 1e-15);
        assert_abs_diff_eq!(tr.general[0], 2.0 * a, epsilon = 1e-12);
        assert_abs_diff_eq!(tr.general[1], 2.0 * (1.0 - a), epsilon = 1e-12);
    }

    #[test]
    fn current_head_prefers_aligned_items() {
        let mut p = toy_params(3, Variant::CppmOnly);
        // Orthogonal items; last item (0, 0, 2) shares direction with item 3.
        p.weights.items = arr2(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 0.5],
            [0.0, 0.0, 2.0],
        ]);
        let tr = p.encode(&[1, 2, 3, 4], 0).unwrap().trace();
        // Logits x_i . x_t = (0, 0, 1, 4).
        let w = &tr.current_weights;
        let expected = softmax(&[0.0, 0.0, 1.0, 4.0]);
        for (a, b) in w.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert!(w[2] > w[0] && w[2] > w[1]);

        let single = p.encode(&[0, 2], 0).unwrap().trace();
        assert_eq!(single.current, arr1(&[0.0, 1.0, 0.0]));
        let same = p.encode(&[3, 3, 3], 0).unwrap().trace();
        assert_eq!(same.current, arr1(&[0.0, 0.0, 0.5]));
    }

    #[test]
    fn consistency_input_cases() {
        let x = arr2(&[[2.0, 0.0], [0.0, 2.0]]);
        assert_eq!(gate_input_consistency(x.view(), &[true, true]).unwrap(), arr1(&[1.0, -1.0]));
        let same = arr2(&[[0.3, 0.7], [0.3, 0.7], [0.3, 0.7], [9.0, 9.0]]);
        assert_eq!(
            gate_input_consistency(same.view(), &[true, true, true, false]).unwrap(),
            arr1(&[0.0, 0.0])
        );
        assert_eq!(gate_input_consistency(x.view(), &[false, true]).unwrap(), arr1(&[0.0, 0.0]));
    }

    #[test]
    fn gate_list_input_cases() {
        let mut p = toy_params(2, Variant::Car);
        p.weights.items = arr2(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [1.0, 1.0], [3.0, 1.0]]);
        p.weights.gate_key = Array2::eye(2);
        let tr = p.encode(&[1, 2, 4], 0).unwrap().trace();
        assert_abs_diff_eq!(tr.list_input[0], 5.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tr.list_input[1], 1.0, epsilon = 1e-12);
        let tr = p.encode(&[0, 3], 0).unwrap().trace();
        assert_eq!(tr.list_input, arr1(&[1.0, 1.0]));
        // Planted logits: h^G = (0, 1) so logits are (0, 2) for items 1, 2.
        p.weights.gate_context = arr1(&[0.0, 1.0]);
        let tr = p.encode(&[1, 2], 0).unwrap().trace();
        let w = softmax(&[0.0, 2.0]);
        assert_abs_diff_eq!(tr.list_input[0], 2.0 * w[0], epsilon = 1e-12);
        assert_abs_diff_eq!(tr.list_input[1], 2.0 * w[1], epsilon = 1e-12);
    }

    #[test]
    fn gate_value_cases() {
        let zc = arr1(&[0.4, -1.0]);
        let zl = arr1(&[2.0, 0.5]);
        assert_eq!(gate_values(zc.view(), zl.view(), Array2::zeros((2, 4)).view()), [0.5, 0.5]);
        // Logits (ln 9, 0) through the first input coordinate.
        let mut wg = Array2::zeros((2, 4));
        wg[[0, 0]] = 9f64.ln();
        let g = gate_values(arr1(&[1.0, 0.0]).view(), arr1(&[0.0, 0.0]).view(), wg.view());
        assert_abs_diff_eq!(g[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.1, epsilon = 1e-15);
        // Shift both logits by the same amount via a shared column.
        let mut shifted = wg.clone();
        shifted[[0, 3]] = 2.5;
        shifted[[1, 3]] = 2.5;
        let h = gate_values(arr1(&[1.0, 0.0]).view(), arr1(&[0.0, 1.0]).view(), shifted.view());
        assert_abs_diff_eq!(g[0], h[0], epsilon = 1e-15);
    }

    #[test]
    fn fuse_cases() {
        let c = arr1(&[1.0, 2.0]);
        let g = arr1(&[-3.0, 5.0]);
        assert_eq!(fuse(c.view(), g.view(), [1.0, 0.0]), c);
        assert_eq!(fuse(c.view(), g.view(), [0.0, 1.0]), g);
        let v = fuse(c.view(), c.view(), [0.3, 0.7]);
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn personalize_cases() {
        let mut p = toy_params(2, Variant::GupmOnly);
        p.weights.items = arr2(&[[0.0, 0.0], [1.0, 2.0], [0.0, 2.0], [1.0, 1.0], [3.0, 1.0]]);
        let off = p.encode(&[1], 0).unwrap();
        assert_eq!(off.trace().personalized, arr1(&[1.0, 2.0]));
        p.config.use_user_embedding = true;
        p.weights.users = arr2(&[[0.0, 0.0]]);
        assert_eq!(p.encode(&[1], 0).unwrap().trace().personalized, arr1(&[1.0, 2.0]));
        p.weights.users = arr2(&[[0.5, -1.0]]);
        assert_eq!(p.encode(&[1], 0).unwrap().trace().personalized, arr1(&[1.5, 1.0]));
        assert!(matches!(p.encode(&[1], 1), Err(Error::UnknownUser(_))));
    }

    #[test]
    fn feed_forward_cases() {
        let eye = Array2::eye(2);
        let zero = Array1::zeros(2);
        let v = arr1(&[0.5, 3.0]);
        assert_eq!(feed_forward(v.view(), eye.view(), zero.view(), eye.view(), zero.view()), v);
        let b2 = arr1(&[0.25, -0.5]);
        let neg = arr1(&[-1.0, -2.0]);
        assert_eq!(feed_forward(neg.view(), eye.view(), zero.view(), eye.view(), b2.view()), b2);
        // W1 = [[1, -1], [2, 0]], b1 = (0, 1), W2 = [[1, 1], [0, 3]], b2 = (1, 0).
        // x = (1, 1): pre = (3, 0), relu = (3, 0), out = (3, 3) + (1, 0).
        let w1 = arr2(&[[1.0, -1.0], [2.0, 0.0]]);
        let b1 = arr1(&[0.0, 1.0]);
        let w2 = arr2(&[[1.0, 1.0], [0.0, 3.0]]);
        let out = feed_forward(arr1(&[1.0, 1.0]).view(), w1.view(), b1.view(), w2.view(), arr1(&[1.0, 0.0]).view());
        assert_eq!(out, arr1(&[4.0, 3.0]));
    }

    #[test]
    fn score_cases() {
        let mut p = toy_params(2, Variant::GupmOnly);
        p.weights.items = arr2(&[[0.0, 0.0], [1.0, 1.0], [1.0, -1.0], [1.0, 1.0], [3.0, 1.0]]);
        let f = arr1(&[1.0, 1.0]);
        assert_eq!(p.score(2, f.view()).unwrap(), 0.0);
        assert_eq!(p.score(1, f.view()).unwrap(), 2.0);
        let f = arr1(&[0.3, -1.7]);
        assert_eq!(p.score(4, (&f * 2.0).view()).unwrap(), 2.0 * p.score(4, f.view()).unwrap());
        assert!(matches!(p.score(PADDING, f.view()), Err(Error::InvalidItem(0))));
        assert!(matches!(p.score(5, f.view()), Err(Error::InvalidItem(5))));
    }

    #[test]
    fn bpr_cases() {
        assert_abs_diff_eq!(bpr_pair_loss(1.3, 1.3), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(bpr_pair_loss(20.0, 0.0) < 1e-8);
        assert_abs_diff_eq!(bpr_pair_loss(0.0, 1.0), 1.3132616875182228, epsilon = 1e-12);
        assert!(bpr_pair_loss(0.0, 1000.0).is_finite());
    }

    #[test]
    fn forward_cases() {
        let p = random_params(4, Variant::Car, 1);
        let mut twin = p.clone();
        let row = twin.weights.items.row(5).to_owned();
        twin.weights.items.row_mut(6).assign(&row);
        let (scores, _) = twin.forward(&[1, 2, 3], 0, &[5, 6]).unwrap();
        assert_eq!(scores[0], scores[1]);

        let (a, _) = p.forward(&[1, 2, 3], 1, &[4, 5, 6, 7]).unwrap();
        let (b, tr) = p.forward(&[0, 0, 0, 1, 2, 3], 1, &[4, 5, 6, 7]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(&tr.general_weights[..3], &[0.0; 3]);

        // Single item: both heads equal x_1, fusion is convex, so the gate is irrelevant.
        let tr = p.encode(&[0, 9], 2).unwrap().trace();
        assert_eq!(tr.general, tr.current);
        assert_eq!(tr.general, p.item(9).to_owned());
        let mut other_gate = p.clone();
        other_gate.weights.gate.mapv_inplace(|v| v * -7.0 + 1.0);
        let (s1, _) = p.forward(&[9], 2, &[1, 2, 3]).unwrap();
        let (s2, tr2) = other_gate.forward(&[9], 2, &[1, 2, 3]).unwrap();
        assert_ne!(tr.gate, tr2.gate);
        for (x, y) in s1.iter().zip(&s2) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_padding_rejected() {
        let p = random_params(4, Variant::Car, 1);
        assert!(matches!(p.encode(&[0, 0], 0), Err(Error::EmptyPrefix)));
        assert!(matches!(p.encode(&[], 0), Err(Error::EmptyPrefix)));
        assert!(matches!(p.encode(&[13], 0), Err(Error::InvalidItem(13))));
    }

    /// Central finite differences of the pair loss, one coordinate at a time.
    fn numeric_grads(p: &ModelParams, prefix: &[ItemId], user: usize, pos: ItemId, neg: ItemId) -> Weights {
        let h = 1e-5;
        let mut out = Weights::zeros(&p.config);
        let loss = |q: &ModelParams| {
            let f = q.encode(prefix, user).unwrap().output;
            bpr_pair_loss(q.score(pos, f.view()).unwrap(), q.score(neg, f.view()).unwrap())
        };
        for (ti, (_, g)) in out.tensors_mut().into_iter().enumerate() {
            for k in 0..g.len() {
                let mut q = p.clone();
                q.weights.tensors_mut()[ti].1[k] += h;
                let up = loss(&q);
                q.weights.tensors_mut()[ti].1[k] -= 2.0 * h;
                let down = loss(&q);
                g[k] = (up - down) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences_all_variants() {
        for (seed, variant) in Variant::ALL.into_iter().enumerate() {
            let p = random_params(3, variant, 40 + seed as u64);
            let prefix = [0, 3, 7, 3, 1];
            let mut analytic = Weights::zeros(&p.config);
            p.pair_loss_and_grad(&prefix, 1, 9, 2, 1.0, &mut analytic).unwrap();
            let numeric = numeric_grads(&p, &prefix, 1, 9, 2);
            for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
                let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
                assert!(diff / scale < 1e-5, "{variant} {name}: {diff} vs {scale}");
            }
            assert!(analytic.items.row(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_item_prefix_gate_gradient_vanishes() {
        let p = random_params(4, Variant::Car, 8);
        let mut g = Weights::zeros(&p.config);
        p.pair_loss_and_grad(&[0, 0, 5], 0, 2, 3, 1.0, &mut g).unwrap();
        assert!(g.gate.iter().all(|&v| v.abs() < 1e-15), "{:?}", g.gate);
    }

    #[test]
    fn relu_head_is_homogeneous_without_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w1 = Array::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let w2 = Array::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let z = Array1::zeros(4);
        let v = arr1(&[0.3, -0.2, 1.1, 0.8]);
        let once = feed_forward(v.view(), w1.view(), z.view(), w2.view(), z.view());
        let twice = feed_forward((&v * 2.0).view(), w1.view(), z.view(), w2.view(), z.view());
        for (a, b) in once.iter().zip(&twice) {
            assert_abs_diff_eq!(2.0 * a, b, epsilon = 1e-12);
        }
    }
}
