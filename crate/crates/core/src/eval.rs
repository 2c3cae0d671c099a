//! Sampled-candidate ranking evaluation (ground truth among sampled negatives,
//! HR@K and NDCG@K), the ablation runner and the per-list winner analysis.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cooc::ConsistencyRecord;
use crate::data::{ItemId, SplitCorpus, SplitList, PADDING};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Variant};
use crate::train::{fit, EpochLog, TrainConfig, ValidationScore};

/// Draws `count` distinct negatives uniformly from the catalog, skipping
/// padding, the target and every `excluded` item, then appends the target.
pub fn sample_candidates<R: Rng>(
    excluded: &[ItemId],
    target: ItemId,
    num_items: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<ItemId>> {
    let blocked: HashSet<ItemId> = excluded.iter().copied().chain([target, PADDING]).collect();
    let blocked_real = blocked.iter().filter(|&&c| c != PADDING && (c as usize) <= num_items).count();
    let available = num_items - blocked_real;
    if available < count {
        return Err(Error::InsufficientCandidates {
            needed: count,
            available,
        });
    }

    let mut out = Vec::with_capacity(count + 1);
    if count * 2 <= available {
        let mut seen = HashSet::with_capacity(count);
        while out.len() < count {
            let c = rng.gen_range(1..=num_items as ItemId);
            if !blocked.contains(&c) && seen.insert(c) {
                out.push(c);
            }
        }
    } else {
        let pool: Vec<ItemId> = (1..=num_items as ItemId).filter(|c| !blocked.contains(c)).collect();
        out.extend(index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]));
    }
    out.push(target);
    Ok(out)
}

/// 1-based rank of `scores[target]` by descending score. Ties count against
/// the target: it is placed after every equally scored candidate.
pub fn rank_of_target(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != target && s >= t)
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListRecord {
    pub list: String,
    pub rank: usize,
    pub ndcg5: f64,
    pub hr5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Mean HR@K, aligned with `ks`.
    pub hr: Vec<f64>,
    /// Mean NDCG@K, aligned with `ks`.
    pub ndcg: Vec<f64>,
    pub records: Vec<ListRecord>,
}

impl EvalReport {
    fn from_ranks(ks: &[usize], ids: Vec<String>, ranks: Vec<usize>) -> Self {
        let n = ranks.len().max(1) as f64;
        let mean = |f: fn(usize, usize) -> f64, k: usize| ranks.iter().map(|&r| f(r, k)).sum::<f64>() / n;
        EvalReport {
            ks: ks.to_vec(),
            hr: ks.iter().map(|&k| mean(hr_at_k, k)).collect(),
            ndcg: ks.iter().map(|&k| mean(ndcg_at_k, k)).collect(),
            records: ids
                .into_iter()
                .zip(&ranks)
                .map(|(list, &rank)| ListRecord {
                    list,
                    rank,
                    ndcg5: ndcg_at_k(rank, 5),
                    hr5: hr_at_k(rank, 5),
                })
                .collect(),
        }
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    /// `(name, value)` pairs in the order HR@k, NDCG@k for each cutoff.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        self.ks
            .iter()
            .enumerate()
            .flat_map(|(i, k)| [(format!("HR@{k}"), self.hr[i]), (format!("NDCG@{k}"), self.ndcg[i])])
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "metric,value")?;
        for (name, value) in self.metrics() {
            writeln!(out, "{name},{value}")?;
        }
        Ok(())
    }

    pub fn write_records<W: Write>(&self, out: W) -> Result<()> {
        write_records(&self.records, out)
    }
}

pub fn write_records<W: Write>(records: &[ListRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(source: R) -> Result<Vec<ListRecord>> {
    let mut out = Vec::new();
    for line in source.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Which held-out item is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Input: training items; target: validation item.
    Validation,
    /// Input: training items plus the validation item; target: test item.
    Test,
}

/// Anything that scores candidate items for a list.
pub trait Scorer: Sync {
    fn scores(&self, list: &SplitList, input: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>>;
}

impl Scorer for ModelParams {
    fn scores(&self, list: &SplitList, input: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        let recent = &input[input.len().saturating_sub(self.config.max_len)..];
        Ok(self.forward(recent, list.user, candidates)?.0)
    }
}

/// Ranks each list's held-out item among `negatives` sampled candidates.
/// List `i` draws its candidates from stream `i` of `seed`, so results do not
/// depend on evaluation order or thread count.
pub fn evaluate_with<S: Scorer + ?Sized>(
    scorer: &S,
    split: &SplitCorpus,
    target: Target,
    negatives: usize,
    ks: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    let ranks: Vec<usize> = split
        .lists
        .par_iter()
        .enumerate()
        .map(|(i, list)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (input, truth) = match target {
                Target::Validation => (list.train.clone(), list.validation),
                Target::Test => (list.test_input(), list.test),
            };
            let candidates = sample_candidates(&list.all_items(), truth, split.num_items(), negatives, &mut rng)?;
            let scores = scorer.scores(list, &input, &candidates)?;
            Ok(rank_of_target(&scores, candidates.len() - 1))
        })
        .collect::<Result<_>>()?;
    let ids = split.lists.iter().map(|l| l.id.clone()).collect();
    Ok(EvalReport::from_ranks(ks, ids, ranks))
}

/// Test-set evaluation of a trained model.
pub fn evaluate(params: &ModelParams, split: &SplitCorpus, negatives: usize, ks: &[usize], seed: u64) -> Result<EvalReport> {
    evaluate_with(params, split, Target::Test, negatives, ks, seed)
}

/// Validation NDCG@5 / HR@5 with candidates fixed by `seed`, for early stopping.
pub fn validation_score(params: &ModelParams, split: &SplitCorpus, negatives: usize, seed: u64) -> Result<ValidationScore> {
    let report = evaluate_with(params, split, Target::Validation, negatives, &[5], seed)?;
    Ok(ValidationScore {
        ndcg5: report.ndcg[0],
        hr5: report.hr[0],
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub params: ModelParams,
    pub report: EvalReport,
}

/// Trains and tests every variant with identical seeds and settings.
pub fn run_ablation(
    split: &SplitCorpus,
    config: &TrainConfig,
    negatives: usize,
    ks: &[usize],
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                variant,
                ..config.clone()
            };
            let fitted = fit(split, &cfg, |p| validation_score(p, split, negatives, cfg.seed))?;
            let report = evaluate(&fitted.params, split, negatives, ks, cfg.seed)?;
            Ok(AblationRow {
                variant,
                best_epoch: fitted.best_epoch,
                log: fitted.log,
                params: fitted.params,
                report,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut out: W) -> Result<()> {
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let names: Vec<String> = first.report.metrics().into_iter().map(|(n, _)| n).collect();
    writeln!(out, "variant,{}", names.join(","))?;
    for row in rows {
        let values: Vec<String> = row.report.metrics().into_iter().map(|(_, v)| v.to_string()).collect();
        writeln!(out, "{},{}", row.variant, values.join(","))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Winner {
    Gupm,
    Tie,
    Cppm,
}

impl Winner {
    pub fn name(self) -> &'static str {
        match self {
            Winner::Gupm => "gupm-wins",
            Winner::Tie => "tie",
            Winner::Cppm => "cppm-wins",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub group: Winner,
    pub lists: Vec<String>,
    pub mean_ndcg5_gupm: Option<f64>,
    pub mean_ndcg5_cppm: Option<f64>,
    pub mean_consistency: Option<f64>,
}

/// Splits lists by which single-head model has the higher per-list NDCG@5
/// (exact equality is a tie) and summarises each group.
pub fn winner_consistency_analysis(
    gupm: &[ListRecord],
    cppm: &[ListRecord],
    consistency: &[ConsistencyRecord],
) -> Result<Vec<GroupSummary>> {
    let cppm_by: HashMap<&str, &ListRecord> = cppm.iter().map(|r| (r.list.as_str(), r)).collect();
    let cons_by: HashMap<&str, f64> = consistency.iter().map(|r| (r.list.as_str(), r.score)).collect();
    if cppm_by.len() != gupm.len() || cppm.len() != gupm.len() {
        return Err(Error::MismatchedLists(format!(
            "{} general-head records vs {} current-head records",
            gupm.len(),
            cppm.len()
        )));
    }

    type Member<'a> = (&'a ListRecord, &'a ListRecord, f64);
    let mut groups: Vec<(Winner, Vec<Member>)> =
        vec![(Winner::Gupm, Vec::new()), (Winner::Tie, Vec::new()), (Winner::Cppm, Vec::new())];
    for g in gupm {
        let c = cppm_by
            .get(g.list.as_str())
            .ok_or_else(|| Error::MismatchedLists(format!("list {} missing from current-head report", g.list)))?;
        let score = *cons_by
            .get(g.list.as_str())
            .ok_or_else(|| Error::MismatchedLists(format!("list {} has no consistency score", g.list)))?;
        let slot = if g.ndcg5 > c.ndcg5 {
            0
        } else if g.ndcg5 == c.ndcg5 {
            1
        } else {
            2
        };
        groups[slot].1.push((g, c, score));
    }

    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(groups
        .into_iter()
        .map(|(group, members)| GroupSummary {
            group,
            lists: members.iter().map(|(g, _, _)| g.list.clone()).collect(),
            mean_ndcg5_gupm: mean(members.iter().map(|(g, _, _)| g.ndcg5).collect()),
            mean_ndcg5_cppm: mean(members.iter().map(|(_, c, _)| c.ndcg5).collect()),
            mean_consistency: mean(members.iter().map(|(_, _, s)| *s).collect()),
        })
        .collect())
}

pub fn write_analysis_csv<W: Write>(groups: &[GroupSummary], mut out: W) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(out, "group,lists,mean_ndcg5_gupm,mean_ndcg5_cppm,mean_consistency")?;
    for g in groups {
        writeln!(
            out,
            "{},{},{},{},{}",
            g.group.name(),
            g.lists.len(),
            opt(g.mean_ndcg5_gupm),
            opt(g.mean_ndcg5_cppm),
            opt(g.mean_consistency)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_corpus, Corpus, ItemList};
    use approx::assert_abs_diff_eq;

    #[test]
    fn candidate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let list = [3, 8, 20];
        let c = sample_candidates(&list, 20, 500, 100, &mut rng).unwrap();
        assert_eq!(c.len(), 101);
        assert_eq!(c.iter().filter(|&&x| x == 20).count(), 1);
        assert_eq!(*c.last().unwrap(), 20);
        let distinct: HashSet<_> = c.iter().collect();
        assert_eq!(distinct.len(), 101);
        assert!(c[..100].iter().all(|x| !list.contains(x) && *x != PADDING));

        // Exactly 101 eligible items: 104 minus the three list items.
        let forced = sample_candidates(&list, 20, 104, 101, &mut rng).unwrap();
        let mut got = forced[..101].to_vec();
        got.sort();
        let expected: Vec<ItemId> = (1..=104).filter(|x| !list.contains(x)).collect();
        assert_eq!(got, expected);

        assert!(matches!(
            sample_candidates(&list, 20, 103, 101, &mut rng),
            Err(Error::InsufficientCandidates { needed: 101, available: 100 })
        ));
    }

    #[test]
    fn rank_cases() {
        assert_eq!(rank_of_target(&[0.1, 0.5, 0.9], 2), 1);
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.9], 2), 2);
        assert_eq!(rank_of_target(&[0.9, 0.9, 0.9], 0), 3);
    }

    #[test]
    fn rank_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let n = rng.gen_range(1..40);
            // Coarse values so ties happen.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            let target = rng.gen_range(0..n);
            let mut order: Vec<usize> = (0..n).collect();
            // Descending score; the target sorts last among equals.
            order.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .unwrap()
                    .then_with(|| (a == target).cmp(&(b == target)))
            });
            let oracle = order.iter().position(|&i| i == target).unwrap() + 1;
            assert_eq!(rank_of_target(&scores, target), oracle);
        }
    }

    #[test]
    fn metric_cases() {
        assert_eq!((hr_at_k(1, 5), ndcg_at_k(1, 5)), (1.0, 1.0));
        assert_abs_diff_eq!(ndcg_at_k(2, 5), 1.0 / 3f64.log2(), epsilon = 1e-15);
        assert_abs_diff_eq!(ndcg_at_k(2, 5), 0.6309297535714575, epsilon = 1e-12);
        assert_eq!((hr_at_k(11, 10), ndcg_at_k(11, 10)), (0.0, 0.0));
        assert_eq!(hr_at_k(10, 10), 1.0);
        for rank in 1..30 {
            for k in 1..15 {
                assert!(ndcg_at_k(rank, k) <= hr_at_k(rank, k));
                assert!(ndcg_at_k(rank, k) <= ndcg_at_k(rank, k + 1));
                assert!(hr_at_k(rank, k) <= hr_at_k(rank, k + 1));
            }
        }
    }

    fn synthetic_split(lists: usize, items: usize) -> SplitCorpus {
        let lists = (0..lists)
            .map(|i| ItemList {
                id: format!("l{i:04}"),
                owner: format!("u{}", i % 7),
                items: (0..6).map(|k| format!("i{:04}", (i * 13 + k * 31) % items)).collect(),
            })
            .collect();
        split_corpus(&Corpus::from_lists(lists)).unwrap()
    }

    struct Oracle;
    impl Scorer for Oracle {
        fn scores(&self, list: &SplitList, _: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
            Ok(candidates.iter().map(|&c| if c == list.test { 1.0 } else { 0.0 }).collect())
        }
    }

    struct Random(u64);
    impl Scorer for Random {
        fn scores(&self, list: &SplitList, _: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
            let key = list.id.bytes().fold(self.0, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            Ok(candidates.iter().map(|_| rng.gen()).collect())
        }
    }

    #[test]
    fn planted_oracle_scores_perfectly() {
        let split = synthetic_split(50, 400);
        let r = evaluate_with(&Oracle, &split, Target::Test, 100, &[5, 10], 3).unwrap();
        assert_eq!(r.hr, vec![1.0, 1.0]);
        assert_eq!(r.ndcg, vec![1.0, 1.0]);
        assert_eq!(r.records.len(), 50);
    }

    #[test]
    fn random_scorer_calibration() {
        let split = synthetic_split(3000, 2000);
        let r = evaluate_with(&Random(5), &split, Target::Test, 100, &[5, 10], 11).unwrap();
        let n = 3000.0;
        for (k, hr) in [(5, r.hr[0]), (10, r.hr[1])] {
            let p = k as f64 / 101.0;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!((hr - p).abs() < 3.0 * sigma, "HR@{k} = {hr}");
        }
    }

    #[test]
    fn evaluation_deterministic_across_threads() {
        let split = synthetic_split(200, 400);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| evaluate_with(&Random(1), &split, Target::Test, 100, &[5, 10], 2).unwrap());
        let b = four.install(|| evaluate_with(&Random(1), &split, Target::Test, 100, &[5, 10], 2).unwrap());
        assert_eq!(a, b);
        for rec in &a.records {
            assert!(rec.ndcg5 <= rec.hr5);
        }
        assert!(a.hr[1] >= a.hr[0]);
        assert!(a.ndcg[0] <= a.hr[0] && a.ndcg[1] <= a.hr[1]);
    }

    #[test]
    fn records_round_trip_jsonl() {
        let rec = ListRecord {
            list: "a\"b".into(),
            rank: 3,
            ndcg5: 0.5,
            hr5: 1.0,
        };
        let mut buf = Vec::new();
        write_records(std::slice::from_ref(&rec), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"list\":\"a\\\"b\",\"rank\":3,\"ndcg5\":0.5,\"hr5\":1.0}\n"
        );
        assert_eq!(read_records(buf.as_slice()).unwrap(), vec![rec]);
    }

    fn rec(list: &str, ndcg5: f64) -> ListRecord {
        ListRecord {
            list: list.into(),
            rank: 1,
            ndcg5,
            hr5: 1.0,
        }
    }

    fn cons(list: &str, score: f64) -> ConsistencyRecord {
        ConsistencyRecord {
            list: list.into(),
            score,
        }
    }

    #[test]
    fn identical_reports_all_tie() {
        let g = vec![rec("a", 0.3), rec("b", 1.0)];
        let c = vec![cons("a", 0.1), cons("b", 0.2)];
        let groups = winner_consistency_analysis(&g, &g, &c).unwrap();
        assert_eq!(groups[1].group, Winner::Tie);
        assert_eq!(groups[1].lists.len(), 2);
        assert!(groups[0].lists.is_empty() && groups[2].lists.is_empty());
        assert_eq!(groups[0].mean_consistency, None);
    }

    #[test]
    fn hand_partition_four_lists() {
        let g = vec![rec("w", 1.0), rec("x", 0.0), rec("y", 0.5), rec("z", 0.6309)];
        let c = vec![rec("x", 0.6309), rec("w", 0.5), rec("z", 0.6309), rec("y", 1.0)];
        let s = vec![cons("w", 0.9), cons("x", 0.2), cons("y", 0.4), cons("z", 0.7)];
        let groups = winner_consistency_analysis(&g, &c, &s).unwrap();
        assert_eq!(groups[0].lists, ["w"]);
        assert_eq!(groups[1].lists, ["z"]);
        assert_eq!(groups[2].lists, ["x", "y"]);
        assert_eq!(groups[2].mean_consistency, Some((0.2 + 0.4) / 2.0));
        assert_eq!(groups[2].mean_ndcg5_cppm, Some((0.6309 + 1.0) / 2.0));
        assert_eq!(groups[0].mean_ndcg5_gupm, Some(1.0));
        assert_eq!(groups.iter().map(|g| g.lists.len()).sum::<usize>(), 4);
        let mut csv = Vec::new();
        write_analysis_csv(&groups, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().contains("cppm-wins,2,0.25,0.81545,0.30000000000000004"));
    }

    #[test]
    fn mismatched_lists_rejected() {
        let g = vec![rec("a", 1.0), rec("b", 1.0)];
        let c = vec![rec("a", 1.0), rec("c", 1.0)];
        let s = vec![cons("a", 0.0), cons("b", 0.0), cons("c", 0.0)];
        assert!(matches!(winner_consistency_analysis(&g, &c, &s), Err(Error::MismatchedLists(_))));
        assert!(matches!(
            winner_consistency_analysis(&g, &g[..1], &s),
            Err(Error::MismatchedLists(_))
        ));
        assert!(matches!(
            winner_consistency_analysis(&g, &g, &s[..1]),
            Err(Error::MismatchedLists(_))
        ));
    }
}
