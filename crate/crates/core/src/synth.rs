//! Synthetic list corpora with planted consistency regimes.
//!
//! Items are grouped into clusters. A consistent list draws every item from
//! one cluster; a drift list switches to a different cluster for its final
//! segment.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, ItemList};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub lists: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a list drifts.
    pub drift: f64,
    /// Length of the final segment drawn from another cluster.
    pub segment: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            clusters: 10,
            items_per_cluster: 100,
            lists: 2000,
            min_len: 20,
            max_len: 40,
            drift: 0.5,
            segment: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clusters == 0 || self.items_per_cluster == 0 || self.lists == 0 || self.min_len == 0 {
            return bad("cluster, item, list counts and lengths must be at least 1".into());
        }
        if self.min_len > self.max_len {
            return bad(format!("length range {}..{} is empty", self.min_len, self.max_len));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return bad(format!("drift fraction {} outside [0, 1]", self.drift));
        }
        if self.drift > 0.0 {
            if self.segment == 0 || self.segment >= self.min_len {
                return bad(format!(
                    "drift segment {} must be between 1 and the shortest list length {} minus one",
                    self.segment, self.min_len
                ));
            }
            if self.clusters < 2 {
                return bad("drift needs at least two clusters".into());
            }
        }
        Ok(())
    }

    fn users(&self) -> usize {
        self.lists.div_ceil(4)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub drift_lists: BTreeSet<String>,
}

impl SyntheticCorpus {
    /// `list<TAB>regime` per line, regime `consistent` or `drift`.
    pub fn write_labels<W: Write>(&self, mut out: W) -> Result<()> {
        for l in &self.corpus.lists {
            let regime = if self.drift_lists.contains(&l.id) { "drift" } else { "consistent" };
            writeln!(out, "{}\t{}", l.id, regime)?;
        }
        Ok(())
    }
}

pub fn item_name(cluster: usize, item: usize) -> String {
    format!("c{cluster:02}_i{item:04}")
}

fn draw<R: Rng>(rng: &mut R, cluster: usize, per_cluster: usize, len: usize) -> Vec<String> {
    if len <= per_cluster {
        index::sample(rng, per_cluster, len)
            .into_iter()
            .map(|i| item_name(cluster, i))
            .collect()
    } else {
        (0..len).map(|_| item_name(cluster, rng.gen_range(0..per_cluster))).collect()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let users = spec.users();
    let mut lists = Vec::with_capacity(spec.lists);
    let mut drift_lists = BTreeSet::new();
    for i in 0..spec.lists {
        let id = format!("l{i:06}");
        let owner = format!("u{:05}", rng.gen_range(0..users));
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let home = rng.gen_range(0..spec.clusters);
        let drifts = spec.drift > 0.0 && rng.gen_bool(spec.drift);
        let items = if drifts {
            let other = (home + rng.gen_range(1..spec.clusters)) % spec.clusters;
            let mut items = draw(&mut rng, home, spec.items_per_cluster, len - spec.segment);
            items.extend(draw(&mut rng, other, spec.items_per_cluster, spec.segment));
            drift_lists.insert(id.clone());
            items
        } else {
            draw(&mut rng, home, spec.items_per_cluster, len)
        };
        lists.push(ItemList { id, owner, items });
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::from_lists(lists),
        drift_lists,
    })
}

pub fn cluster_of(item: &str) -> usize {
    item[1..3].parse().expect("synthetic item name")
}
