//! Brute-force baseline: train the plain task network on every k-subset of
//! candidates (plus the condition variables) and rank subsets by holdout
//! error.

use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureScaling};
use crate::error::{Error, Result};
use crate::model::{DEFAULT_DROPOUT, TASK_HIDDEN};
use crate::nn::{self, AdamConfig, AdamState, DenseLayer, Mode, DEFAULT_LEAKY_SLOPE};
use crate::selector::{prepare, write_text, ImportanceReport};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Training epochs per subset.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Share of rows held out for scoring.
    pub holdout_fraction: f64,
    /// Refuse to enumerate more subsets than this.
    pub max_subsets: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub feature_scaling: FeatureScaling,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            holdout_fraction: 0.2,
            max_subsets: 1000,
            dropout: DEFAULT_DROPOUT,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            feature_scaling: FeatureScaling::default(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("oracle epochs and batch size must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::config("oracle learning rate must be positive"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config(format!(
                "holdout fraction must be in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// Holdout score of one candidate subset. Failed trainings keep their error
/// and sort last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub subset: Vec<String>,
    pub val_mse: Option<f64>,
    pub train_mse: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub condition: Vec<String>,
    pub k: usize,
    pub config: OracleConfig,
    /// Ascending by validation MSE.
    pub results: Vec<SubsetResult>,
}

impl OracleTable {
    pub fn best(&self) -> Option<&SubsetResult> {
        self.results.first().filter(|r| r.val_mse.is_some())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `subset,train_mse,val_mse` rows; subset members are joined by `;`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["subset", "train_mse", "val_mse"])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.results {
            w.write_record([r.subset.join(";"), fmt(r.train_mse), fmt(r.val_mse)])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, json: &Path, csv: &Path) -> Result<()> {
        write_text(json, &self.to_json()?)?;
        write_text(csv, &self.to_csv()?)
    }
}

/// `C(n, k)`, or `None` on overflow.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// All k-subsets of `candidates`, in lexicographic order of positions.
pub fn enumerate_subsets(candidates: &[String], k: usize, cap: usize) -> Result<Vec<Vec<String>>> {
    let n = candidates.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("k must be between 1 and {n}, got {k}")));
    }
    match binomial(n, k) {
        Some(count) if count <= cap as u128 => {}
        count => {
            let shown = count.map_or_else(|| "more than 2^128".to_string(), |c| c.to_string());
            return Err(Error::config(format!(
                "C({n}, {k}) = {shown} subsets exceeds the cap of {cap}; raise the cap to run anyway"
            )));
        }
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| candidates[i].clone()).collect());
        // Advance the rightmost index that still has room.
        let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else {
            break;
        };
        idx[pos] += 1;
        for p in pos + 1..k {
            idx[p] = idx[p - 1] + 1;
        }
    }
    Ok(out)
}

/// Trains the task network once per k-subset and returns the table sorted
/// by holdout MSE (ties keep enumeration order).
pub fn exhaustive_search(ds: &Dataset, condition: &[String], k: usize, cfg: &OracleConfig) -> Result<OracleTable> {
    cfg.validate()?;
    let train_cfg = TrainConfig {
        feature_scaling: cfg.feature_scaling,
        ..TrainConfig::default()
    };
    let prepared = prepare(ds, condition, &train_cfg)?;
    let names = prepared.candidate_names();
    let subsets = enumerate_subsets(&names, k, cfg.max_subsets)?;
    let (train_rows, val_rows) = holdout_split(prepared.len(), cfg.holdout_fraction, cfg.seed)?;

    let x_p = prepared.preselected_matrix();
    let spans = prepared.candidate_spans();
    let x_c = prepared.candidate_matrix();
    let y = prepared.target_matrix();

    let mut results = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let cols: Vec<usize> = subset
            .iter()
            .flat_map(|name| spans[names.iter().position(|n| n == name).expect("subset of candidates")].clone())
            .collect();
        let x = concatenate(Axis(1), &[x_p.view(), x_c.select(Axis(1), &cols).view()])
            .expect("row counts agree");
        let xt = x.select(Axis(0), &train_rows);
        let yt = y.select(Axis(0), &train_rows);
        let xv = x.select(Axis(0), &val_rows);
        let yv = y.select(Axis(0), &val_rows);
        let result = match fit_and_score(xt.view(), yt.view(), xv.view(), yv.view(), cfg) {
            Ok((train_mse, val_mse)) => SubsetResult {
                subset,
                val_mse: Some(val_mse),
                train_mse: Some(train_mse),
                seed: cfg.seed,
                error: None,
            },
            Err(e) => {
                log::warn!("subset {subset:?} failed: {e}");
                SubsetResult {
                    subset,
                    val_mse: None,
                    train_mse: None,
                    seed: cfg.seed,
                    error: Some(e.to_string()),
                }
            }
        };
        results.push(result);
    }
    results.sort_by(|a, b| match (a.val_mse, b.val_mse) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(OracleTable {
        condition: condition.to_vec(),
        k,
        config: cfg.clone(),
        results,
    })
}

/// Seeded row split; the holdout gets `round(n · fraction)` rows, at least
/// one, and the training side keeps at least one.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::config(format!("holdout split needs at least 2 rows, got {n}")));
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(n - n_val);
    Ok((order, val))
}

/// Overlap `|top-k ∩ best subset| / k` between a CVS report and the oracle.
pub fn agreement(report: &ImportanceReport, table: &OracleTable, k: usize) -> Result<f64> {
    if report.top_k.len() != k || table.k != k {
        return Err(Error::config(format!(
            "k mismatch: report has {}, oracle has {}, asked for {k}",
            report.top_k.len(),
            table.k
        )));
    }
    if report.condition != table.condition {
        return Err(Error::config("report and oracle were run under different conditions"));
    }
    let best = table
        .best()
        .ok_or_else(|| Error::config("oracle table has no successful subset"))?;
    Ok(overlap(&report.top_k, &best.subset))
}

/// `|a ∩ b| / max(|a|, |b|)`.
pub fn overlap(a: &[String], b: &[String]) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 1.0;
    }
    a.iter().filter(|x| b.contains(x)).count() as f64 / denom as f64
}

/// The task network alone: Dense-128, LReLU, Dense-64, LReLU, Dropout, Dense-1.
struct TaskNetwork {
    layers: [DenseLayer; 3],
    slope: f64,
    dropout: f64,
}

impl TaskNetwork {
    fn init(in_dim: usize, cfg: &OracleConfig, rng: &mut impl Rng) -> Self {
        let [h1, h2] = TASK_HIDDEN;
        Self {
            layers: [
                DenseLayer::glorot(in_dim, h1, rng),
                DenseLayer::glorot(h1, h2, rng),
                DenseLayer::glorot(h2, 1, rng),
            ],
            slope: cfg.leaky_slope,
            dropout: cfg.dropout,
        }
    }

    fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let [l1, l2, l3] = &self.layers;
        let pre1 = l1.forward(x)?;
        let h1 = nn::leaky_relu(&pre1, self.slope);
        let pre2 = l2.forward(h1.view())?;
        let h2 = nn::leaky_relu(&pre2, self.slope);
        let dropped = nn::dropout(&h2, self.dropout, mode, rng)?;
        let pred = l3.forward(dropped.output.view())?;
        let loss = nn::mse(y, pred.view())?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("loss is {loss}")));
        }
        let g = nn::mse_backward(y, pred.view());
        let (g3, gd) = l3.backward(dropped.output.view(), g.view());
        let mut gh2 = match &dropped.scale {
            Some(scale) => gd * scale,
            None => gd,
        };
        nn::leaky_relu_backward(&mut gh2, &pre2, self.slope);
        let (g2, mut gh1) = l2.backward(h1.view(), gh2.view());
        nn::leaky_relu_backward(&mut gh1, &pre1, self.slope);
        let g1 = l1.param_grads(x, gh1.view());
        let flat = [g1, g2, g3]
            .iter()
            .flat_map(|g| g.slices().map(|s| s.to_vec()))
            .collect();
        Ok((loss, flat))
    }

    fn eval_mse(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.loss_and_grads(x, y, Mode::Eval, &mut rng)?.0)
    }
}

fn fit_and_score(
    xt: ArrayView2<'_, f64>,
    yt: ArrayView2<'_, f64>,
    xv: ArrayView2<'_, f64>,
    yv: ArrayView2<'_, f64>,
    cfg: &OracleConfig,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = TaskNetwork::init(xt.ncols(), cfg, &mut rng);
    rng.set_stream(1);
    let sizes: Vec<usize> = net
        .layers
        .iter()
        .flat_map(|l| l.param_slices().map(|s| s.len()))
        .collect();
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), &sizes);
    let mut order: Vec<usize> = (0..xt.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let bx: Array2<f64> = xt.select(Axis(0), rows);
            let by: Array2<f64> = yt.select(Axis(0), rows);
            let (_, grads) = net.loss_and_grads(bx.view(), by.view(), Mode::Train, &mut rng)?;
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut params: Vec<&mut [f64]> = net.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect();
            adam.update(&mut params, &grad_refs)?;
        }
    }
    Ok((net.eval_mse(xt, yt)?, net.eval_mse(xv, yv)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::nn::grad_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn subset_counts() {
        assert_eq!(enumerate_subsets(&names(10), 5, 1000).unwrap().len(), 252);
        assert_eq!(enumerate_subsets(&names(4), 4, 1000).unwrap(), vec![names(4)]);
        let six = enumerate_subsets(&names(4), 2, 1000).unwrap();
        let expect: Vec<Vec<&str>> = vec![
            vec!["c1", "c2"],
            vec!["c1", "c3"],
            vec!["c1", "c4"],
            vec!["c2", "c3"],
            vec!["c2", "c4"],
            vec!["c3", "c4"],
        ];
        assert_eq!(six, expect);
    }

    #[test]
    fn cap_error_reports_the_count() {
        let err = enumerate_subsets(&names(20), 10, 1000).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("184756"), "{err}");
        assert!(enumerate_subsets(&names(3), 0, 10).is_err());
        assert!(enumerate_subsets(&names(3), 4, 10).is_err());
    }

    #[test]
    fn binomial_matches_pascal() {
        let mut row = vec![1u128];
        for n in 1..=40usize {
            let mut next = vec![1u128; n + 1];
            for k in 1..n {
                next[k] = row[k - 1] + row[k];
            }
            row = next;
            for (k, &c) in row.iter().enumerate() {
                assert_eq!(binomial(n, k), Some(c));
            }
        }
    }

    #[test]
    fn overlap_examples() {
        let a = names(3);
        assert_eq!(overlap(&a, &a), 1.0);
        assert_eq!(overlap(&a, &["x".to_string(), "y".into(), "z".into()]), 0.0);
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let (t, v) = holdout_split(100, 0.2, 3).unwrap();
        assert_eq!((t.len(), v.len()), (80, 20));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(holdout_split(100, 0.2, 3).unwrap(), (t, v));
        assert!(holdout_split(1, 0.2, 3).is_err());
    }

    #[test]
    fn task_network_gradients_match_finite_differences() {
        let cfg = OracleConfig {
            dropout: 0.0,
            ..OracleConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = TaskNetwork::init(3, &cfg, &mut rng);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((6, 1), |_| rng.random_range(-1.0..1.0));
        let (_, grads) = net.loss_and_grads(x.view(), y.view(), Mode::Eval, &mut rng).unwrap();
        // Check the first layer's weights, which collect every chain-rule term.
        let mut w = net.layers[0].weight.as_slice().unwrap().to_vec();
        let analytic = grads[0].clone();
        let err = grad_check(&mut w, &analytic, 1e-5, |p| {
            net.layers[0].weight.as_slice_mut().unwrap().copy_from_slice(p);
            net.eval_mse(x.view(), y.view())
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn search_is_deterministic_and_sorted() {
        let ds = gen_synthetic(&SyntheticSpec {
            n_samples: 120,
            n_variables: 6,
            ..SyntheticSpec::with_seed(3)
        })
        .unwrap();
        let cfg = OracleConfig {
            epochs: 3,
            batch_size: 32,
            seed: 1,
            ..OracleConfig::default()
        };
        let cond = vec!["v1".to_string()];
        let t = exhaustive_search(&ds, &cond, 2, &cfg).unwrap();
        assert_eq!(t.results.len(), 10);
        assert!(t.results.windows(2).all(|w| w[0].val_mse <= w[1].val_mse));
        assert!(t.results.iter().all(|r| r.val_mse.unwrap() >= 0.0));
        assert_eq!(exhaustive_search(&ds, &cond, 2, &cfg).unwrap(), t);
        assert_eq!(t.to_csv().unwrap().lines().count(), 11);
    }

    proptest! {
        #[test]
        fn enumeration_is_complete_and_unique(n in 1usize..10, k in 1usize..10) {
            prop_assume!(k <= n);
            let subs = enumerate_subsets(&names(n), k, 1000).unwrap();
            prop_assert_eq!(subs.len() as u128, binomial(n, k).unwrap());
            let mut sorted = subs.clone();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), subs.len());
            let pos = |s: &Vec<String>| s.iter().map(|x| x[1..].parse::<usize>().unwrap()).collect::<Vec<_>>();
            let ordered = subs.windows(2).all(|w| pos(&w[0]) < pos(&w[1]));
            prop_assert!(ordered);
        }

        #[test]
        fn overlap_is_symmetric_and_bounded(a in proptest::collection::btree_set(0u8..8, 0..6), b in proptest::collection::btree_set(0u8..8, 0..6)) {
            let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let b: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            let ab = overlap(&a, &b);
            prop_assert_eq!(ab, overlap(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
