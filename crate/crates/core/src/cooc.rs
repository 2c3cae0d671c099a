//! Co-occurrence item embeddings (skip-gram with negative sampling, lists as
//! sentences) and the last-item consistency score built on them.
//!
//! These vectors are only used for list analytics. They are independent of the
//! recommender's own item table.

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 50,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoocEmbeddings {
    items: Vocab,
    vectors: Array2<f64>,
}

impl CoocEmbeddings {
    pub fn from_vectors<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let (names, rows): (Vec<String>, Vec<Vec<f64>>) = entries.into_iter().unzip();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Config("embedding vectors differ in dimension".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let vectors = Array2::from_shape_vec((names.len(), dim), flat)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(CoocEmbeddings {
            items: Vocab::new(names),
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item: &str) -> Option<ArrayView1<'_, f64>> {
        self.items.get(item).map(|i| self.vectors.row(i))
    }

    /// Text format: `count dim` header, then `item v1 .. v_dim` per line.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim())?;
        for (i, name) in self.items.names().iter().enumerate() {
            write!(out, "{name}")?;
            for v in self.vectors.row(i) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines().enumerate();
        let parse_err = |line: usize, message: &str| Error::Parse {
            line,
            message: message.to_string(),
        };
        let header = match lines.next() {
            Some((_, l)) => l?,
            None => return Err(parse_err(1, "missing header")),
        };
        let mut head = header.split_whitespace().map(str::parse::<usize>);
        let (count, dim) = match (head.next(), head.next(), head.next()) {
            (Some(Ok(c)), Some(Ok(d)), None) => (c, d),
            _ => return Err(parse_err(1, "header must be `count dim`")),
        };
        let mut entries = Vec::with_capacity(count);
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let name = fields.next().unwrap().to_string();
            let values: Vec<f64> = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(idx + 1, "invalid number"))?;
            if values.len() != dim {
                return Err(parse_err(idx + 1, "wrong vector dimension"));
            }
            entries.push((name, values));
        }
        if entries.len() != count {
            return Err(parse_err(1, "vector count does not match header"));
        }
        let mut emb = Self::from_vectors(entries)?;
        if count == 0 {
            emb.vectors = Array2::zeros((0, dim));
        }
        Ok(emb)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling over item sequences. Negatives are drawn
/// from the unigram distribution raised to 0.75; the learning rate decays
/// linearly over all processed tokens. Single-threaded and deterministic.
pub fn train_cooc_embeddings(lists: &[Vec<String>], config: &SkipGramConfig) -> Result<CoocEmbeddings> {
    if config.dim == 0 || config.window == 0 || config.negatives == 0 {
        return Err(Error::Config("dim, window and negatives must be at least 1".into()));
    }
    if lists.iter().all(|l| l.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    if lists.iter().all(|l| l.len() < 2) {
        return Err(Error::NoTrainingPairs);
    }

    let mut names: Vec<String> = lists.iter().flatten().cloned().collect();
    names.sort();
    names.dedup();
    let vocab = Vocab::new(names);
    let sentences: Vec<Vec<usize>> = lists
        .iter()
        .map(|l| l.iter().map(|n| vocab.get(n).unwrap()).collect())
        .collect();

    let mut counts = vec![0usize; vocab.len()];
    for &w in sentences.iter().flatten() {
        counts[w] += 1;
    }
    let noise = WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75)))
        .map_err(|e| Error::Config(e.to_string()))?;

    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half = 0.5 / dim as f64;
    let mut input = Array2::from_shape_fn((vocab.len(), dim), |_| rng.gen_range(-half..half));
    let mut output = Array2::<f64>::zeros((vocab.len(), dim));

    let total = (counts.iter().sum::<usize>() * config.epochs) as f64;
    let mut processed = 0usize;
    let mut hidden_grad = vec![0.0; dim];

    for _ in 0..config.epochs {
        for sentence in &sentences {
            for (pos, &center) in sentence.iter().enumerate() {
                let lr = config.learning_rate * (1.0 - processed as f64 / (total + 1.0)).max(1e-4);
                processed += 1;
                let reach = config.window - rng.gen_range(0..config.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(sentence.len() - 1);
                for (ctx_pos, &context) in sentence.iter().enumerate().take(hi + 1).skip(lo) {
                    if ctx_pos == pos {
                        continue;
                    }
                    hidden_grad.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let neg = noise.sample(&mut rng);
                            if neg == context {
                                continue;
                            }
                            (neg, 0.0)
                        };
                        let vin = input.row(center);
                        let mut vout = output.row_mut(target);
                        let g = (label - sigmoid(vin.dot(&vout))) * lr;
                        for d in 0..dim {
                            hidden_grad[d] += g * vout[d];
                            vout[d] += g * vin[d];
                        }
                    }
                    input
                        .row_mut(center)
                        .iter_mut()
                        .zip(&hidden_grad)
                        .for_each(|(v, g)| *v += g);
                }
            }
        }
    }

    Ok(CoocEmbeddings {
        items: vocab,
        vectors: input,
    })
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different dimensions");
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Sum of cosines between the last item and every earlier position, divided by
/// the list length N (not N-1).
pub fn consistency_score<S: AsRef<str>>(list: &[S], emb: &CoocEmbeddings) -> Result<f64> {
    if list.len() < 2 {
        return Err(Error::Config(format!(
            "consistency needs at least 2 items, got {}",
            list.len()
        )));
    }
    let lookup = |item: &str| emb.get(item).ok_or_else(|| Error::MissingEmbedding(item.to_string()));
    let last = lookup(list[list.len() - 1].as_ref())?;
    let mut sum = 0.0;
    for item in &list[..list.len() - 1] {
        sum += cosine(lookup(item.as_ref())?, last);
    }
    Ok(sum / list.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyRecord {
    pub list: String,
    pub score: f64,
}

pub fn consistency_records(corpus: &Corpus, emb: &CoocEmbeddings) -> Result<Vec<ConsistencyRecord>> {
    corpus
        .lists
        .iter()
        .filter(|l| l.items.len() >= 2)
        .map(|l| {
            Ok(ConsistencyRecord {
                list: l.id.clone(),
                score: consistency_score(&l.items, emb)?,
            })
        })
        .collect()
}

pub fn write_consistency_records<W: Write>(records: &[ConsistencyRecord], mut out: W) -> Result<()> {
    writeln!(out, "list,consistency")?;
    for r in records {
        writeln!(out, "{},{}", r.list, r.score)?;
    }
    Ok(())
}

pub fn read_consistency_records<R: BufRead>(source: R) -> Result<Vec<ConsistencyRecord>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let (list, score) = line.rsplit_once(',').ok_or(Error::Parse {
            line: idx + 1,
            message: "expected `list,consistency`".into(),
        })?;
        let score = score.trim().parse().map_err(|_| Error::Parse {
            line: idx + 1,
            message: format!("invalid score {score:?}"),
        })?;
        out.push(ConsistencyRecord {
            list: list.to_string(),
            score,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Lower edge of bin `i` out of `bins` equal-width bins over [-1, 1].
pub fn bin_edge(i: usize, bins: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / bins as f64
}

/// Equal-width histogram over [-1, 1]; bins are half-open except the last,
/// which also holds 1.0. Out-of-range values are clamped into the end bins.
pub fn consistency_histogram(records: &[ConsistencyRecord], bins: usize) -> Vec<HistogramBin> {
    assert!(bins >= 1, "histogram needs at least one bin");
    let mut counts = vec![0usize; bins];
    for r in records {
        let mut idx = (((r.score + 1.0) / 2.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        while idx > 0 && r.score < bin_edge(idx, bins) {
            idx -= 1;
        }
        while idx + 1 < bins && r.score >= bin_edge(idx + 1, bins) {
            idx += 1;
        }
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            low: bin_edge(i, bins),
            high: bin_edge(i + 1, bins),
            count,
        })
        .collect()
}

pub fn write_histogram<W: Write>(hist: &[HistogramBin], mut out: W) -> Result<()> {
    writeln!(out, "bin_low,bin_high,count")?;
    for b in hist {
        writeln!(out, "{},{},{}", b.low, b.high, b.count)?;
    }
    Ok(())
}
