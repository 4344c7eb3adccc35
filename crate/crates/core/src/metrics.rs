//! Ranking and regression measures with per-task reports.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Item ids ordered by descending score, ties by ascending id.
pub fn rank_items(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = scores.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(id, _)| id).collect()
}

/// Fraction of `positives` found among the top `n` scored items.
pub fn recall_at_n(scores: &[(usize, f64)], positives: &[usize], n: usize) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Empty("positives"));
    }
    if n == 0 || scores.len() < n {
        return Err(Error::Data(format!(
            "recall@{n} needs at least {n} scored items, got {}",
            scores.len()
        )));
    }
    let top = rank_items(scores);
    let hits = top[..n].iter().filter(|id| positives.contains(id)).count();
    Ok(hits as f64 / positives.len() as f64)
}

fn gain(y: f64) -> f64 {
    libm::exp2(y) - 1.0
}

fn discount(rank: usize) -> f64 {
    // rank is 1-based.
    libm::log2(rank as f64 + 1.0)
}

fn dcg(gains_in_order: impl Iterator<Item = f64>, k: usize) -> f64 {
    gains_in_order
        .take(k)
        .enumerate()
        .map(|(r, g)| g / discount(r + 1))
        .sum()
}

/// NDCG@K with gain `2^y - 1`. `items` holds `(item_id, predicted, true)`.
pub fn ndcg_at_k(items: &[(usize, f64, f64)], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("ndcg cutoff must be positive".into()));
    }
    if items.iter().all(|it| gain(it.2) <= 0.0) {
        return Err(Error::Data(
            "ndcg undefined: no item has positive gain".into(),
        ));
    }
    let truth = |id: usize| items.iter().find(|it| it.0 == id).map_or(0.0, |it| it.2);
    let predicted: Vec<(usize, f64)> = items.iter().map(|it| (it.0, it.1)).collect();
    let actual = dcg(
        rank_items(&predicted).into_iter().map(|id| gain(truth(id))),
        k,
    );
    let mut ideal: Vec<f64> = items.iter().map(|it| gain(it.2)).collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    Ok(actual / dcg(ideal.into_iter(), k))
}

fn check_pair(predictions: &[f64], labels: &[f64]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "metric",
            &[predictions.len()],
            &[labels.len()],
        ));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok(())
}

pub fn mae(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(predictions, labels)?;
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (y - p).abs())
        .sum::<f64>()
        / labels.len() as f64)
}

pub fn mse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(predictions, labels)?;
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (y - p) * (y - p))
        .sum::<f64>()
        / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task_id: u64,
    pub metric: String,
    pub value: f64,
}

/// Per-task metric values; aggregates are unweighted means over tasks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn push(&mut self, task_id: u64, metric: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "task {task_id}: {metric} = {value}"
            )));
        }
        self.rows.push(EvalRow {
            task_id,
            metric: metric.into(),
            value,
        });
        Ok(())
    }

    /// Metric names in first-seen order.
    pub fn metrics(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.metric.as_str()) {
                names.push(&r.metric);
            }
        }
        names
    }

    pub fn task_count(&self, metric: &str) -> usize {
        self.rows.iter().filter(|r| r.metric == metric).count()
    }

    pub fn aggregate(&self, metric: &str) -> Option<f64> {
        let n = self.task_count(metric);
        (n > 0).then(|| {
            self.rows
                .iter()
                .filter(|r| r.metric == metric)
                .map(|r| r.value)
                .sum::<f64>()
                / n as f64
        })
    }

    /// `(metric, mean, tasks)` for every metric.
    pub fn aggregates(&self) -> Vec<(String, f64, usize)> {
        self.metrics()
            .into_iter()
            .map(|m| {
                (
                    m.into(),
                    self.aggregate(m).unwrap_or(0.0),
                    self.task_count(m),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, uniform};
    use alloc::vec;
    use proptest::prelude::*;

    fn scored(values: &[f64]) -> Vec<(usize, f64)> {
        values.iter().copied().enumerate().collect()
    }

    #[test]
    fn recall_basics() {
        let s = scored(&[0.9, 0.1, 0.8, 0.2, 0.7]);
        assert_eq!(recall_at_n(&s, &[0, 2, 4], 3).unwrap(), 1.0);
        assert_eq!(recall_at_n(&s, &[1, 3], 5).unwrap(), 1.0);
        assert_eq!(recall_at_n(&s, &[1, 3], 2).unwrap(), 0.0);
        assert!(recall_at_n(&s, &[], 2).is_err());
        assert!(recall_at_n(&s, &[1], 6).is_err());
        assert!(recall_at_n(&s, &[1], 0).is_err());
    }

    #[test]
    fn ties_break_by_item_id() {
        let s = vec![(7, 1.0), (3, 1.0), (5, 1.0)];
        assert_eq!(rank_items(&s), vec![3, 5, 7]);
        assert_eq!(recall_at_n(&s, &[3], 1).unwrap(), 1.0);
        assert_eq!(recall_at_n(&s, &[7], 1).unwrap(), 0.0);
    }

    #[test]
    fn recall_matches_brute_force_top_n() {
        let mut rng = rng_stream(12, 0);
        for _ in 0..50 {
            // Coarse scores force ties.
            let s: Vec<(usize, f64)> = (0..20)
                .map(|i| (i, libm::floor(uniform(&mut rng, 0.0, 5.0))))
                .collect();
            let positives: Vec<usize> = (0..20)
                .filter(|_| uniform(&mut rng, 0.0, 1.0) < 0.3)
                .collect();
            if positives.is_empty() {
                continue;
            }
            for n in 1..=20 {
                // An item is in the top n iff fewer than n items beat it.
                let beats =
                    |a: &(usize, f64), b: &(usize, f64)| a.1 > b.1 || (a.1 == b.1 && a.0 < b.0);
                let top: Vec<usize> = s
                    .iter()
                    .filter(|x| s.iter().filter(|y| beats(y, x)).count() < n)
                    .map(|x| x.0)
                    .collect();
                let hits = positives.iter().filter(|p| top.contains(p)).count();
                assert_eq!(
                    recall_at_n(&s, &positives, n).unwrap(),
                    hits as f64 / positives.len() as f64
                );
            }
        }
    }

    fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn ndcg_matches_permutation_oracle() {
        let mut rng = rng_stream(4, 0);
        for _ in 0..30 {
            let items: Vec<(usize, f64, f64)> = (0..5)
                .map(|i| {
                    (
                        i,
                        uniform(&mut rng, -1.0, 1.0),
                        libm::floor(uniform(&mut rng, 1.0, 6.0)),
                    )
                })
                .collect();
            for k in 1..=5 {
                let dcg_of = |order: &[usize]| -> f64 {
                    order
                        .iter()
                        .take(k)
                        .enumerate()
                        .map(|(r, &i)| {
                            (libm::pow(2.0, items[i].2) - 1.0) / libm::log2(r as f64 + 2.0)
                        })
                        .sum()
                };
                let ideal = permutations(&[0, 1, 2, 3, 4])
                    .iter()
                    .map(|p| dcg_of(p))
                    .fold(f64::MIN, f64::max);
                let mut predicted: Vec<usize> = (0..5).collect();
                predicted.sort_by(|&a, &b| items[b].1.total_cmp(&items[a].1));
                let expected = dcg_of(&predicted) / ideal;
                assert!((ndcg_at_k(&items, k).unwrap() - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ndcg_basics() {
        let items = vec![(0, 3.0, 5.0), (1, 2.0, 3.0), (2, 1.0, 1.0)];
        assert_eq!(ndcg_at_k(&items, 3).unwrap(), 1.0);
        let best_first = vec![(0, 0.0, 1.0), (1, 9.0, 4.0), (2, 1.0, 2.0)];
        assert_eq!(ndcg_at_k(&best_first, 1).unwrap(), 1.0);
        assert!(ndcg_at_k(&[(0, 1.0, 0.0), (1, 0.0, 0.0)], 2).is_err());
        assert!(ndcg_at_k(&items, 0).is_err());
    }

    #[test]
    fn mae_cases() {
        let y = [1.0, -2.0, 3.5];
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.25).collect();
        assert!((mae(&shifted, &y).unwrap() - 0.25).abs() < 1e-15);
        assert!((mae(&[0.0, 1.0, 1.0], &[1.0, -1.0, 1.5]).unwrap() - 3.5 / 3.0).abs() < 1e-15);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
        assert!((mse(&[0.0, 1.0], &[1.0, 3.0]).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn report_aggregates_are_unweighted_means() {
        let mut r = EvalReport::default();
        r.push(1, "mae", 1.0).unwrap();
        r.push(1, "ndcg@3", 0.5).unwrap();
        r.push(2, "mae", 3.0).unwrap();
        assert_eq!(r.metrics(), vec!["mae", "ndcg@3"]);
        assert_eq!(r.aggregate("mae"), Some(2.0));
        assert_eq!(r.task_count("ndcg@3"), 1);
        assert!(r.push(3, "mae", f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn recall_nondecreasing_in_n(values in prop::collection::vec(-3.0f64..3.0, 2..30), pick in 0usize..1000) {
            let s = scored(&values);
            let positives: Vec<usize> = (0..values.len()).filter(|i| (pick >> (i % 10)) & 1 == 1).collect();
            prop_assume!(!positives.is_empty());
            let mut prev = 0.0;
            for n in 1..=values.len() {
                let r = recall_at_n(&s, &positives, n).unwrap();
                prop_assert!(r >= prev && (0.0..=1.0).contains(&r));
                prev = r;
            }
        }

        #[test]
        fn ndcg_bounded_and_order_only(values in prop::collection::vec((-3.0f64..3.0, 0.0f64..5.0), 1..12), k in 1usize..6) {
            let items: Vec<(usize, f64, f64)> = values.iter().enumerate().map(|(i, &(p, y))| (i, p, libm::floor(y))).collect();
            prop_assume!(items.iter().any(|it| it.2 > 0.0));
            let v = ndcg_at_k(&items, k).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            let warped: Vec<(usize, f64, f64)> = items.iter().map(|&(i, p, y)| (i, libm::exp(p) * 3.0 - 1.0, y)).collect();
            prop_assert_eq!(v, ndcg_at_k(&warped, k).unwrap());
        }

        #[test]
        fn mae_detects_translation(y in prop::collection::vec(-5.0f64..5.0, 1..20), c in -3.0f64..3.0) {
            let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
            prop_assert!((mae(&shifted, &y).unwrap() - c.abs()).abs() < 1e-9);
        }
    }
}
