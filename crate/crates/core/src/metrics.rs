//! Evaluation and analysis metrics.

use std::collections::HashMap;

use crate::data::{Dataset, InteractionId, Order};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Scores and labels of one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::InvalidInput("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidInput("scores contain NaN".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic with tied
/// scores sharing their midrank. Ranks are kept doubled so the sum stays an
/// exact integer; the only rounding is the final division.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let pos = set.labels.iter().filter(|&&y| y == 1).count() as u128;
    let neg = set.labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let s = set.scores[order[start]];
        let mut end = start + 1;
        while end < order.len() && set.scores[order[end]] == s {
            end += 1;
        }
        // ranks start+1 ..= end share the midrank (start + 1 + end) / 2
        let doubled = (start + 1 + end) as u128;
        let group_pos = order[start..end].iter().filter(|&&r| set.labels[r] == 1).count() as u128;
        doubled_rank_sum += doubled * group_pos;
        start = end;
    }
    let doubled_u = doubled_rank_sum - pos * (pos + 1);
    Ok(doubled_u as f64 / (2 * pos * neg) as f64)
}

pub const LOGLOSS_CLIP: f64 = 1e-7;

/// Mean cross-entropy of probabilities clipped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(set: &ScoredSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Metric("log loss of an empty set".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in set.scores.iter().zip(&set.labels) {
        let p = p.clamp(LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP);
        total -= if y == 1 { p.ln() } else { (-p).ln_1p() };
    }
    Ok(total / set.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Metric("correlation needs at least two values".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Metric("correlation of a constant vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// AUC on `test` of scoring each instance by the smoothed training CTR
/// `(clicks + 1) / (impressions + 2)` of its value pair on `id`. Pairs never
/// seen in training score the global training CTR.
pub fn statistics_auc(train: &Dataset, test: &Dataset, id: InteractionId) -> Result<f64> {
    if id.order() != Order::Pair {
        return Err(Error::InvalidInput("statistics AUC is defined for pairs".into()));
    }
    let (i, j) = (id.field(0), id.field(1));
    for data in [train, test] {
        let s = data.schema();
        if j >= s.field_count() {
            return Err(Error::InvalidInput(format!("interaction {id} is out of range")));
        }
        if s.is_multi_hot(i) || s.is_multi_hot(j) {
            return Err(Error::InvalidInput(format!(
                "interaction {id} touches a multi-hot field"
            )));
        }
    }
    if train.is_empty() {
        return Err(Error::Metric("empty training set".into()));
    }
    let mut counts: HashMap<(u32, u32), (u64, u64)> = HashMap::new();
    for inst in train.iter() {
        let e = counts.entry((inst.field(i)[0], inst.field(j)[0])).or_default();
        e.0 += u64::from(inst.label());
        e.1 += 1;
    }
    let global = train.positives() as f64 / train.len() as f64;
    let scores = test
        .iter()
        .map(|inst| match counts.get(&(inst.field(i)[0], inst.field(j)[0])) {
            Some(&(c, n)) => (c as f64 + 1.0) / (n as f64 + 2.0),
            None => global,
        })
        .collect();
    auc(&ScoredSet::new(scores, test.labels().to_vec())?)
}

/// [`statistics_auc`] for each id, computed as independent jobs.
pub fn statistics_auc_all(train: &Dataset, test: &Dataset, ids: &[InteractionId], exec: Execution) -> Result<Vec<f64>> {
    par::map_jobs(exec, ids.to_vec(), |id| statistics_auc(train, test, id))
        .into_iter()
        .collect()
}

/// The `n` ids with the highest score; ties keep their canonical order.
pub fn top_n(ids: &[InteractionId], scores: &[f64], n: usize) -> Vec<InteractionId> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.into_iter().take(n).map(|k| ids[k]).collect()
}

/// Count of exact zeros plus an equal-width histogram of the nonzero values.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub zeros: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let nonzero: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
    let zeros = values.len() - nonzero.len();
    let lo = nonzero.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = nonzero.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    if !nonzero.is_empty() {
        let width = (hi - lo) / bins as f64;
        for v in nonzero {
            let b = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
    }
    Histogram {
        zeros,
        lo: if zeros == values.len() { 0.0 } else { lo },
        hi: if zeros == values.len() { 0.0 } else { hi },
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FieldSchema;
    use crate::rng::{substream, Stream};
    use rand::Rng;

    fn set(s: &[f64], y: &[u8]) -> ScoredSet {
        ScoredSet::new(s.to_vec(), y.to_vec()).unwrap()
    }

    /// Counts concordant pairs over every (positive, negative) pair, ties as
    /// one half, in doubled integer units.
    fn pair_count_auc(s: &[f64], y: &[u8]) -> f64 {
        let mut doubled = 0u128;
        let (mut p, mut n) = (0u128, 0u128);
        for a in 0..s.len() {
            if y[a] == 1 {
                p += 1;
            } else {
                n += 1;
            }
        }
        for a in 0..s.len() {
            for b in 0..s.len() {
                if y[a] == 1 && y[b] == 0 {
                    doubled += match s[a].partial_cmp(&s[b]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        doubled as f64 / (2 * p * n) as f64
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.5; 6], &[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
        assert!(auc(&set(&[0.1, 0.2], &[1, 1])).is_err());
    }

    #[test]
    fn auc_matches_pair_counting_with_ties() {
        let mut rng = substream(21, Stream::Calibration);
        for _ in 0..100 {
            let n = rng.random_range(2..=300);
            let levels = rng.random_range(1..10);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 4.0).collect();
            let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            y[0] = 1;
            y[1] = 0;
            assert_eq!(auc(&set(&s, &y)).unwrap(), pair_count_auc(&s, &y));
        }
    }

    #[test]
    fn logloss_examples() {
        let l = logloss(&set(&[0.5; 4], &[0, 1, 1, 0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = logloss(&set(&[1.0, 0.0], &[1, 0])).unwrap();
        assert!((l - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn logloss_matches_series_oracle() {
        // -ln(p) via the atanh series ln(x) = 2 sum (r^(2k+1))/(2k+1), r = (x-1)/(x+1)
        fn ln_series(x: f64) -> f64 {
            let r = (x - 1.0) / (x + 1.0);
            let (mut term, mut sum, mut k) = (r, 0.0, 0);
            while term.abs() > 1e-20 {
                sum += term / (2 * k + 1) as f64;
                term *= r * r;
                k += 1;
            }
            2.0 * sum
        }
        let p = [0.9, 0.3, 0.62, 0.05, 0.77];
        let y = [1u8, 0, 1, 0, 0];
        let oracle = -p
            .iter()
            .zip(&y)
            .map(|(&p, &y)| if y == 1 { ln_series(p) } else { ln_series(1.0 - p) })
            .sum::<f64>()
            / 5.0;
        assert!((logloss(&set(&p, &y)).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn logloss_constant_minimum_is_base_rate() {
        let y = [1u8, 0, 0, 1, 0, 0, 0, 1, 0, 0];
        let base = 0.3;
        let at = |p: f64| logloss(&set(&[p; 10], &y)).unwrap();
        for k in 1..100 {
            let p = k as f64 / 100.0;
            assert!(at(p) >= at(base) - 1e-15, "{p}");
        }
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 4.0, -1.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&a, &[1.0; 4]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_matches_direct_formula() {
        let mut rng = substream(22, Stream::Calibration);
        let a: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = 15.0;
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let direct = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        assert!((pearson(&a, &b).unwrap() - direct).abs() < 1e-12);
    }

    fn pair_data(seed: u64, rows: usize, label: impl Fn(&[u32], &mut dyn rand::RngCore) -> u8) -> Dataset {
        let schema = FieldSchema::one_hot(vec![4, 3, 5]).unwrap();
        let mut rng = substream(seed, Stream::Data);
        let mut d = Dataset::new(schema);
        for _ in 0..rows {
            let x = [rng.random_range(0..4), rng.random_range(0..3), rng.random_range(0..5)];
            let y = label(&x, &mut rng);
            d.push_one_hot(&x, y).unwrap();
        }
        d
    }

    #[test]
    fn statistics_auc_perfect_predictor() {
        let rule = |x: &[u32], _: &mut dyn rand::RngCore| u8::from(x[0] == 2 && x[2] == 1);
        let train = pair_data(1, 3000, rule);
        let test = pair_data(2, 1000, rule);
        let id = InteractionId::pair(0, 2).unwrap();
        assert_eq!(statistics_auc(&train, &test, id).unwrap(), 1.0);
    }

    #[test]
    fn statistics_auc_independent_labels_near_half() {
        let rule = |_: &[u32], r: &mut dyn rand::RngCore| u8::from(r.random::<bool>());
        let train = pair_data(3, 20_000, rule);
        let test = pair_data(4, 20_000, rule);
        let a = statistics_auc(&train, &test, InteractionId::pair(0, 1).unwrap()).unwrap();
        assert!((a - 0.5).abs() < 0.05, "{a}");
    }

    #[test]
    fn top_n_is_stable() {
        let ids: Vec<InteractionId> = crate::data::enumerate_interactions(3, Order::Pair);
        assert_eq!(top_n(&ids, &[0.5, 0.7, 0.5], 2), vec![ids[1], ids[0]]);
    }

    #[test]
    fn histogram_counts_zeros_separately() {
        let h = histogram(&[0.0, 0.0, 1.0, 2.0, 3.0], 2);
        assert_eq!(h.zeros, 2);
        assert_eq!(h.counts, vec![1, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn auc_invariant_under_monotone_maps(
                pts in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..100),
            ) {
                let (s, mut y): (Vec<f64>, Vec<u8>) = pts.into_iter().unzip();
                y[0] = 1;
                y[1] = 0;
                let base = auc(&set(&s, &y)).unwrap();
                let mapped: Vec<f64> = s.iter().map(|v| (v * 0.7).exp() + 3.0).collect();
                prop_assert_eq!(base, auc(&set(&mapped, &y)).unwrap());
            }

            #[test]
            fn flipped_labels_complement(
                pts in proptest::collection::btree_map(-1000i32..1000, 0u8..2, 2..80),
            ) {
                let (s, mut y): (Vec<f64>, Vec<u8>) = pts.into_iter().map(|(k, v)| (k as f64, v)).unzip();
                y[0] = 1;
                y[1] = 0;
                let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
                let total = auc(&set(&s, &y)).unwrap() + auc(&set(&s, &flipped)).unwrap();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
