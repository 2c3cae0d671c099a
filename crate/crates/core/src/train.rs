//! Mini-batch pairwise training with Adam and early stopping on validation NDCG@5.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ItemId, SplitCorpus, PADDING};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Variant, Weights};

/// Instances per gradient chunk. Fixed so results do not depend on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dim: usize,
    pub max_len: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub use_user_embedding: bool,
    pub variant: Variant,
    pub threads: usize,
    /// Store wall-clock epoch durations in the log. Off by default so logs are reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 0.001,
            dim: 50,
            max_len: 500,
            patience: 10,
            max_epochs: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            use_user_embedding: false,
            variant: Variant::Car,
            threads: 1,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.dim == 0 || self.max_len == 0 {
            return bad("dimension and prefix length must be at least 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("learning rate and epsilon must be positive");
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: Weights,
    pub second: Weights,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: &ModelConfig) -> Self {
        OptimizerState {
            first: Weights::zeros(config),
            second: Weights::zeros(config),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. The padding row is re-zeroed afterwards.
pub fn adam_step(params: &mut ModelParams, grads: &Weights, state: &mut OptimizerState, config: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let tensors = params
        .weights
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut().into_iter().zip(state.second.tensors_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    params.weights.items.row_mut(PADDING as usize).fill(0.0);
}

/// Uniform negative over the catalog, excluding padding, the target and the prefix items.
pub fn sample_negative<R: Rng>(prefix: &[ItemId], target: ItemId, num_items: usize, rng: &mut R) -> Result<ItemId> {
    if num_items == 0 {
        return Err(Error::InsufficientCandidates { needed: 1, available: 0 });
    }
    let excluded = |c: ItemId| c == target || prefix.contains(&c);
    // Cheap rejection first; enumerate the pool only when it is crowded.
    for _ in 0..32 {
        let c = rng.gen_range(1..=num_items as ItemId);
        if !excluded(c) {
            return Ok(c);
        }
    }
    let blocked: HashSet<ItemId> = prefix.iter().copied().chain([target, PADDING]).collect();
    let pool: Vec<ItemId> = (1..=num_items as ItemId).filter(|c| !blocked.contains(c)).collect();
    pool.choose(rng).copied().ok_or(Error::InsufficientCandidates {
        needed: 1,
        available: 0,
    })
}

/// A scored training triple.
#[derive(Clone, Copy, Debug)]
pub struct PairExample<'a> {
    pub prefix: &'a [ItemId],
    pub user: usize,
    pub positive: ItemId,
    pub negative: ItemId,
}

/// Gradients of the mean pairwise loss over `batch`, and that mean loss.
pub fn compute_gradients(params: &ModelParams, batch: &[PairExample<'_>]) -> Result<(Weights, f64)> {
    if batch.is_empty() {
        return Ok((Weights::zeros(&params.config), 0.0));
    }
    let scale = 1.0 / batch.len() as f64;
    let partials: Vec<Result<(Weights, f64)>> = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(chunk, examples)| {
            let mut grads = Weights::zeros(&params.config);
            let mut loss = 0.0;
            for (k, ex) in examples.iter().enumerate() {
                let l = params.pair_loss_and_grad(ex.prefix, ex.user, ex.positive, ex.negative, scale, &mut grads)?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss(chunk * GRAD_CHUNK + k));
                }
                loss += l;
            }
            Ok((grads, loss))
        })
        .collect();

    let mut total = Weights::zeros(&params.config);
    let mut loss = 0.0;
    for part in partials {
        let (g, l) = part?;
        total.add_scaled(&g, 1.0);
        loss += l;
    }
    Ok((total, loss * scale))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationScore {
    pub ndcg5: f64,
    pub hr5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg5: f64,
    pub val_hr5: f64,
    pub seconds: f64,
}

pub fn write_training_log<W: Write>(log: &[EpochLog], mut out: W) -> Result<()> {
    writeln!(out, "epoch,train_loss,val_ndcg5,val_hr5,seconds")?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{:.3}",
            e.epoch, e.train_loss, e.val_ndcg5, e.val_hr5, e.seconds
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the best validation epoch.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub fn model_config(split: &SplitCorpus, config: &TrainConfig) -> ModelConfig {
    ModelConfig {
        dim: config.dim,
        num_items: split.num_items(),
        num_users: split.num_users(),
        max_len: config.max_len,
        use_user_embedding: config.use_user_embedding,
        variant: config.variant,
    }
}

/// Trains from a seeded initialisation. `validate` is called after every
/// epoch; training stops once `patience` epochs pass without a strictly better
/// NDCG@5 and the best epoch's parameters are returned.
pub fn fit<F>(split: &SplitCorpus, config: &TrainConfig, mut validate: F) -> Result<FitResult>
where
    F: FnMut(&ModelParams) -> Result<ValidationScore> + Send,
{
    config.validate()?;
    let instances = split.training_instances();
    if instances.is_empty() {
        return Err(Error::Config("no training instances (every list is too short)".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(model_config(split, config), &mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut state = OptimizerState::new(&params.config);
    let mut order = instances;

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale = 0;
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut examples = Vec::with_capacity(batch.len());
            for &inst in batch {
                let prefix = split.instance_prefix(inst, config.max_len);
                let positive = split.instance_target(inst);
                let negative = sample_negative(prefix, positive, split.num_items(), &mut rng)?;
                examples.push(PairExample {
                    prefix,
                    user: split.lists[inst.list].user,
                    positive,
                    negative,
                });
            }
            let (grads, loss) = pool.install(|| compute_gradients(&params, &examples))?;
            adam_step(&mut params, &grads, &mut state, config);
            loss_sum += loss * batch.len() as f64;
        }
        let score = pool.install(|| validate(&params))?;
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_ndcg5: score.ndcg5,
            val_hr5: score.hr5,
            seconds: if config.record_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });

        if best.as_ref().is_none_or(|(b, _, _)| score.ndcg5 > *b) {
            best = Some((score.ndcg5, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (_, best_epoch, params) = best.ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
    Ok(FitResult {
        params,
        best_epoch,
        log,
    })
}
