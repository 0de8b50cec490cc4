//! Retrieval quality, detection accuracy and per-epoch aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grid::{partition_batch, rank_scores, routed_loss_value, Partition};
use crate::losses::BatchLossReport;
use crate::model::GridModel;
use crate::tensor::Tensor;

pub const CHI2_EPS: f64 = 1e-10;

/// `½ Σ (a_i − b_i)² / (a_i + b_i + ε)` over non-negative vectors.
pub fn chi2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "chi2_distance",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        if x < 0.0 || y < 0.0 {
            return Err(Error::invalid("chi2_distance requires non-negative entries"));
        }
        let d = x - y;
        s += d * d / (x + y + CHI2_EPS);
    }
    Ok(0.5 * s)
}

/// DCG over the first `k` grades with a `log2(rank + 1)` discount, ranks from 1.
pub fn dcg_at_k(grades: &[f64], k: usize) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// DCG@k of `grades` divided by the DCG@k of the same grades sorted
/// descending. Zero when no grade is positive.
pub fn ndcg_at_k(grades: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("ndcg cutoff must be at least 1"));
    }
    if grades.iter().any(|g| *g < 0.0 || !g.is_finite()) {
        return Err(Error::invalid("relevance grades must be finite and non-negative"));
    }
    let mut ideal = grades.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg_at_k(&ideal, k);
    if best == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg_at_k(grades, k) / best)
}

/// Number of shared labels between two ascending label sets.
pub fn shared_labels(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: usize,
    /// `(archive index, distance)`, ascending distance, ties by index.
    pub ranked: Vec<(usize, f64)>,
    pub grades: Vec<f64>,
}

/// Labelled descriptors for retrieval.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalSet<'a> {
    pub descriptors: &'a Tensor,
    pub labels: &'a [Vec<usize>],
}

/// Ranks the whole archive for every query. With `exclude_self`, archive
/// item `i` is skipped for query `i` (queries and archive must coincide).
pub fn retrieve(query: RetrievalSet, archive: RetrievalSet, exclude_self: bool) -> Result<Vec<RetrievalResult>> {
    let (nq, dq) = query.descriptors.dims2().ok_or_else(|| Error::invalid("query descriptors must be 2-D"))?;
    let (na, da) = archive.descriptors.dims2().ok_or_else(|| Error::invalid("archive descriptors must be 2-D"))?;
    if nq == 0 || na == 0 {
        return Err(Error::invalid("retrieval needs non-empty query and archive sets"));
    }
    if dq != da || query.labels.len() != nq || archive.labels.len() != na {
        return Err(Error::invalid("retrieval sets have inconsistent shapes"));
    }
    if exclude_self && nq != na {
        return Err(Error::invalid("self-exclusion requires the archive to be the query set"));
    }
    (0..nq)
        .into_par_iter()
        .map(|q| {
            let qd = query.descriptors.row(q);
            let mut ranked = Vec::with_capacity(na);
            for a in 0..na {
                if exclude_self && a == q {
                    continue;
                }
                ranked.push((a, chi2_distance(qd, archive.descriptors.row(a))?));
            }
            ranked.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
            let grades = ranked
                .iter()
                .map(|(a, _)| shared_labels(&query.labels[q], &archive.labels[*a]) as f64)
                .collect();
            Ok(RetrievalResult { query: q, ranked, grades })
        })
        .collect()
}

/// Mean NDCG@k over the results, in query order.
pub fn mean_ndcg(results: &[RetrievalResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("no retrieval results"));
    }
    let mut s = 0.0;
    for r in results {
        s += ndcg_at_k(&r.grades, k)?;
    }
    Ok(s / results.len() as f64)
}

/// Mean NDCG@k of backbone descriptors, graded by clean labels. Queries and
/// archive are distinct sets.
pub fn evaluate_retrieval(model: &GridModel, queries: &Dataset, archive: &Dataset, k: usize) -> Result<f64> {
    if queries.is_empty() || archive.is_empty() {
        return Err(Error::invalid("retrieval needs non-empty query and archive sets"));
    }
    let qd = model.descriptors(&queries.all_inputs()?)?;
    let ad = model.descriptors(&archive.all_inputs()?)?;
    let ql = queries.clean_label_sets();
    let al = archive.clean_label_sets();
    let results = retrieve(
        RetrievalSet { descriptors: &qd, labels: &ql },
        RetrievalSet { descriptors: &ad, labels: &al },
        false,
    )?;
    mean_ndcg(&results, k)
}

/// Leave-one-out retrieval within a single set.
pub fn evaluate_self_retrieval(model: &GridModel, set: &Dataset, k: usize) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::invalid("self retrieval needs at least two samples"));
    }
    let d = model.descriptors(&set.all_inputs()?)?;
    let l = set.clean_label_sets();
    let s = RetrievalSet { descriptors: &d, labels: &l };
    mean_ndcg(&retrieve(s, s, true)?, k)
}

/// Fraction of `W` that is truly noisy; `None` when `W` is empty.
pub fn detection_precision(partition: &Partition, flags: &[bool]) -> Option<f64> {
    let (hits, n) = detection_counts(partition, flags);
    (n > 0).then(|| hits as f64 / n as f64)
}

/// `(truly noisy in W, |W|)`.
pub fn detection_counts(partition: &Partition, flags: &[bool]) -> (usize, usize) {
    let hits = partition.noisy.iter().filter(|&&i| flags[i]).count();
    (hits, partition.noisy.len())
}

/// Mean of the true-positive and true-negative rates; `None` unless both
/// noisy and clean samples are present.
pub fn balanced_accuracy(partition: &Partition, flags: &[bool]) -> Option<f64> {
    let c = Confusion::of(partition, flags);
    c.balanced_accuracy()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(partition: &Partition, flags: &[bool]) -> Self {
        let mut c = Confusion::default();
        for &i in &partition.noisy {
            if flags[i] {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for &i in &partition.clean {
            if flags[i] {
                c.fn_ += 1;
            } else {
                c.tn += 1;
            }
        }
        c
    }

    pub fn add(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn precision(&self) -> Option<f64> {
        let n = self.tp + self.fp;
        (n > 0).then(|| self.tp as f64 / n as f64)
    }

    pub fn balanced_accuracy(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        (pos > 0 && neg > 0).then(|| 0.5 * (self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Grid,
    TopKLoss,
    Random,
}

impl Selector {
    pub const ALL: [Selector; 3] = [Selector::Grid, Selector::TopKLoss, Selector::Random];

    pub fn name(self) -> &'static str {
        match self {
            Selector::Grid => "grid",
            Selector::TopKLoss => "top_k_loss",
            Selector::Random => "random",
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Selector::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown selector `{s}`")))
    }
}

/// The `lambda` samples with the largest discriminative task loss.
pub fn top_k_loss(report: &BatchLossReport, lambda: usize) -> Result<Partition> {
    partition_batch(&rank_scores(&report.disc_task), lambda)
}

/// `lambda` samples drawn uniformly without replacement.
pub fn random_selection(batch: usize, lambda: usize, rng: &mut impl Rng) -> Result<Partition> {
    if lambda > batch {
        return Err(Error::invalid(format!("lambda {lambda} exceeds batch size {batch}")));
    }
    let mut noisy = sample(rng, batch, lambda).into_vec();
    noisy.sort_unstable();
    let clean = (0..batch).filter(|i| noisy.binary_search(i).is_err()).collect();
    Ok(Partition { noisy, clean, lambda })
}

/// Both baseline partitions for one batch.
pub fn baseline_selectors(report: &BatchLossReport, lambda: usize, rng: &mut impl Rng) -> Result<[(Selector, Partition); 2]> {
    Ok([
        (Selector::TopKLoss, top_k_loss(report, lambda)?),
        (Selector::Random, random_selection(report.len(), lambda, rng)?),
    ])
}

/// Per-epoch precision for each selector; `None` where nothing was selected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionTrace {
    pub precision: BTreeMap<Selector, Vec<Option<f64>>>,
    pub balanced_accuracy: BTreeMap<Selector, Vec<Option<f64>>>,
}

impl DetectionTrace {
    /// Mean precision over the last `n` epochs with a defined value.
    pub fn tail_mean(&self, selector: Selector, n: usize) -> Option<f64> {
        let v = self.precision.get(&selector)?;
        let tail: Vec<f64> = v.iter().rev().take(n).flatten().copied().collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Running sums for one epoch over every batch.
#[derive(Debug, Clone, Default)]
pub struct EpochAccumulator {
    samples: usize,
    disc: f64,
    gen: f64,
    recon: f64,
    kl: f64,
    routed: f64,
    confusion: BTreeMap<Selector, Confusion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    /// Mean discriminative task loss over all samples.
    pub disc: f64,
    /// Mean generative task loss over all samples.
    pub gen: f64,
    pub recon: f64,
    pub kl: f64,
    /// Mean loss routed through the partition (`W` generative, `C` discriminative).
    pub routed: f64,
}

impl EpochAccumulator {
    pub fn add_batch(&mut self, report: &BatchLossReport, grid: &Partition) {
        let b = report.len();
        self.samples += b;
        self.disc += report.disc_task.iter().sum::<f64>();
        self.gen += report.gen_task.iter().sum::<f64>();
        self.recon += report.recon.iter().sum::<f64>();
        self.kl += report.kl.iter().sum::<f64>();
        self.routed += routed_loss_value(report, grid) * b as f64;
    }

    pub fn add_detection(&mut self, selector: Selector, partition: &Partition, flags: &[bool]) {
        self.confusion
            .entry(selector)
            .or_default()
            .add(Confusion::of(partition, flags));
    }

    pub fn losses(&self) -> EpochLosses {
        let n = self.samples.max(1) as f64;
        EpochLosses {
            disc: self.disc / n,
            gen: self.gen / n,
            recon: self.recon / n,
            kl: self.kl / n,
            routed: self.routed / n,
        }
    }

    /// Micro-averaged over all batches of the epoch.
    pub fn confusion(&self, selector: Selector) -> Confusion {
        self.confusion.get(&selector).copied().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chi2_examples() {
        assert_eq!(chi2_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0 / (1.0 + CHI2_EPS));
        assert!((chi2_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(chi2_distance(&[0.3, 2.0], &[0.3, 2.0]).unwrap(), 0.0);
        assert!(chi2_distance(&[-1.0], &[0.0]).is_err());
        assert!(chi2_distance(&[1.0], &[0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn chi2_symmetric(a in proptest::collection::vec(0.0f64..5.0, 6), b in proptest::collection::vec(0.0f64..5.0, 6)) {
            let x = chi2_distance(&a, &b).unwrap();
            prop_assert_eq!(x, chi2_distance(&b, &a).unwrap());
            prop_assert!(x >= 0.0);
        }

        #[test]
        fn ndcg_bounded(g in proptest::collection::vec(0u8..4, 1..15), k in 1usize..20) {
            let g: Vec<f64> = g.into_iter().map(f64::from).collect();
            let v = ndcg_at_k(&g, k).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            let mut sorted = g.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted[0] > 0.0 {
                prop_assert!((ndcg_at_k(&sorted, k).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[3.0, 2.0, 1.0], 3).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[1.0, 0.0, 0.0], 1).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[0.0, 0.0], 2).unwrap(), 0.0);
        assert!(ndcg_at_k(&[1.0], 0).is_err());
        // Direct arithmetic for [3,2,3,0,1,2]; the ideal is [3,3,2,2,1,0].
        let l = |r: f64| (r + 1.0).log2();
        let dcg = 3.0 / l(1.0) + 2.0 / l(2.0) + 3.0 / l(3.0) + 0.0 + 1.0 / l(5.0) + 2.0 / l(6.0);
        let idcg = 3.0 / l(1.0) + 3.0 / l(2.0) + 2.0 / l(3.0) + 2.0 / l(4.0) + 1.0 / l(5.0);
        let got = ndcg_at_k(&[3.0, 2.0, 3.0, 0.0, 1.0, 2.0], 6).unwrap();
        assert!((got - dcg / idcg).abs() < 1e-14);
    }

    #[test]
    fn shared_label_count() {
        assert_eq!(shared_labels(&[0, 2, 5], &[2, 3, 5]), 2);
        assert_eq!(shared_labels(&[], &[1]), 0);
    }

    #[test]
    fn duplicate_ranks_first() {
        let q = Tensor::from_rows(&[vec![0.5, 1.0, 0.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.5, 1.0, 0.0], vec![0.4, 1.1, 0.0]]).unwrap();
        let ql = vec![vec![1]];
        let al = vec![vec![0], vec![1], vec![1]];
        let r = retrieve(
            RetrievalSet { descriptors: &q, labels: &ql },
            RetrievalSet { descriptors: &a, labels: &al },
            false,
        )
        .unwrap();
        assert_eq!(r[0].ranked[0], (1, 0.0));
        assert!(r[0].ranked.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(r[0].grades, vec![1.0, 1.0, 0.0]);
        let s = RetrievalSet { descriptors: &a, labels: &al };
        let own = retrieve(s, s, true).unwrap();
        assert!(own.iter().all(|r| r.ranked.len() == 2 && r.ranked.iter().all(|(i, _)| *i != r.query)));
        assert!(mean_ndcg(&own, 2).unwrap() <= 1.0);
    }

    #[test]
    fn precision_examples() {
        let p = Partition { noisy: vec![0, 2], clean: vec![1, 3], lambda: 2 };
        assert_eq!(detection_precision(&p, &[true, false, true, false]), Some(1.0));
        assert_eq!(detection_precision(&p, &[false, true, false, true]), Some(0.0));
        assert_eq!(balanced_accuracy(&p, &[true, false, true, false]), Some(1.0));
        let empty = Partition { noisy: vec![], clean: vec![0, 1], lambda: 0 };
        assert_eq!(detection_precision(&empty, &[true, false]), None);
    }

    #[test]
    fn top_k_example_and_random_reproducible() {
        let r = BatchLossReport::new(vec![5.0, 1.0, 4.0, 2.0], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert_eq!(top_k_loss(&r, 2).unwrap().noisy, vec![0, 2]);
        let a = random_selection(50, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = random_selection(50, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.noisy.len() + a.clean.len(), 50);
    }

    #[test]
    fn top_k_equals_grid_when_gen_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..2.0)).collect();
        let r = BatchLossReport::new(d, vec![0.7; 16], vec![0.0; 16], vec![0.0; 16]).unwrap();
        let grid = partition_batch(&crate::grid::rank_loss_differences(&r).unwrap(), 5).unwrap();
        assert_eq!(grid, top_k_loss(&r, 5).unwrap());
    }

    #[test]
    fn random_precision_is_near_noise_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flags: Vec<bool> = (0..1000).map(|i| i % 10 < 3).collect();
        let mut c = Confusion::default();
        for _ in 0..200 {
            let p = random_selection(1000, 300, &mut rng).unwrap();
            c.add(Confusion::of(&p, &flags));
        }
        // 60000 draws; three standard errors of a 0.3 proportion is about 0.006.
        assert!((c.precision().unwrap() - 0.3).abs() < 0.006);
    }

    #[test]
    fn tail_mean_skips_absent_epochs() {
        let mut t = DetectionTrace::default();
        t.precision.insert(Selector::Grid, vec![Some(0.0), None, Some(0.5), Some(1.0)]);
        assert_eq!(t.tail_mean(Selector::Grid, 3), Some(0.75));
        assert_eq!(t.tail_mean(Selector::Random, 3), None);
    }
}
