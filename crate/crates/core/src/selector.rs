//! From trained masks to decisions: ranking, top-k selection, redundancy
//! flags, seed aggregation, and the end-to-end selection pipeline.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{scale, Dataset};
use crate::error::{Error, Result};
use crate::model::{CvsModel, MaskVector};
use crate::trainer::{extract_final_mask, train_observed, Control, Progress, TrainConfig, TrainRecord};

/// Trained importance scores for one run, ready for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub run_id: String,
    pub condition: Vec<String>,
    pub candidates: Vec<String>,
    /// Final mask, aligned with `candidates`.
    pub scores: Vec<f64>,
    pub ranking: Vec<String>,
    pub top_k: Vec<String>,
    pub seed: u64,
    pub config: TrainConfig,
    pub converged_at: Option<usize>,
    /// Candidates judged redundant by [`redundancy_probe`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub redundant: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losses_ref: Option<String>,
}

impl ImportanceReport {
    pub fn score(&self, name: &str) -> Option<f64> {
        self.candidates
            .iter()
            .position(|c| c == name)
            .map(|i| self.scores[i])
    }

    /// 0-based position of `name` in the ranking.
    pub fn rank_of(&self, name: &str) -> Option<usize> {
        self.ranking.iter().position(|c| c == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    /// `variable,score,rank,selected` rows in candidate order, for plotting.
    pub fn scores_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variable", "score", "rank", "selected"])?;
        for (name, score) in self.candidates.iter().zip(&self.scores) {
            let rank = self.rank_of(name).map(|r| r + 1).unwrap_or(0);
            let selected = self.top_k.contains(name);
            w.write_record([
                name.clone(),
                format!("{score:?}"),
                rank.to_string(),
                selected.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save_scores_csv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.scores_csv()?)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Candidate names sorted by descending score; equal scores keep their
/// original order.
pub fn rank(mask: &MaskVector, names: &[String]) -> Result<Vec<String>> {
    rank_scores(mask.as_slice(), names)
}

fn rank_scores(scores: &[f64], names: &[String]) -> Result<Vec<String>> {
    if scores.len() != names.len() {
        return Err(Error::dim(format!(
            "{} scores for {} candidate names",
            scores.len(),
            names.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort, so ties stay in ascending index order.
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(idx.into_iter().map(|i| names[i].clone()).collect())
}

pub fn select_top_k(ranking: &[String], k: usize) -> Result<Vec<String>> {
    if k == 0 || k > ranking.len() {
        return Err(Error::config(format!(
            "k must be between 1 and {} (the number of candidates), got {k}",
            ranking.len()
        )));
    }
    Ok(ranking[..k].to_vec())
}

/// Score below which a candidate counts as "extremely small": one decade
/// under the uniform share `1/D_c`.
pub fn redundancy_threshold(num_candidates: usize) -> f64 {
    1.0 / num_candidates as f64 / 10.0
}

/// What a selection run should do, independent of the dataset it runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRequest {
    #[serde(default)]
    pub condition: Vec<String>,
    pub k: usize,
    #[serde(default)]
    pub config: TrainConfig,
}

/// Everything a selection run produces.
#[derive(Debug, Clone)]
pub struct Selection {
    pub report: ImportanceReport,
    pub record: TrainRecord,
    pub model: CvsModel,
}

/// Partitions `ds` by the condition, rescales it, trains, and reports the
/// final mask.
pub fn run_selection(ds: &Dataset, req: &SelectionRequest) -> Result<Selection> {
    run_selection_observed(ds, req, |_| Control::Continue)
}

pub fn run_selection_observed<F>(ds: &Dataset, req: &SelectionRequest, observer: F) -> Result<Selection>
where
    F: FnMut(&Progress<'_>) -> Control,
{
    let prepared = prepare(ds, &req.condition, &req.config)?;
    let names = prepared.candidate_names();
    select_top_k(&names, req.k)?;
    let (model, record) = train_observed(&prepared, &req.config, observer)?;
    let mask = extract_final_mask(&model, &prepared)?;
    let ranking = rank(&mask, &names)?;
    let top_k = select_top_k(&ranking, req.k)?;
    let report = ImportanceReport {
        run_id: run_id(ds, req)?,
        condition: req.condition.clone(),
        candidates: names,
        scores: mask.to_vec(),
        ranking,
        top_k,
        seed: req.config.seed,
        config: req.config.clone(),
        converged_at: record.converged_at,
        redundant: Vec::new(),
        trajectory_ref: None,
        losses_ref: None,
    };
    Ok(Selection { report, record, model })
}

/// The partitioned and rescaled dataset a run trains on.
pub fn prepare(ds: &Dataset, condition: &[String], cfg: &TrainConfig) -> Result<Dataset> {
    let partitioned = ds.partition(condition)?;
    let scaled = scale(&partitioned, cfg.feature_scaling);
    if scaled.candidate_indices().is_empty() {
        return Err(Error::config("no candidate variables left after dropping constant columns"));
    }
    Ok(scaled)
}

/// Content hash of the data and the request; identical inputs give
/// identical ids.
pub fn run_id(ds: &Dataset, req: &SelectionRequest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(req)?);
    for name in ds.variables.iter().map(|v| &v.name) {
        h.update(name.as_bytes());
        h.update([0]);
    }
    for x in ds.features.iter().chain(ds.target.iter()) {
        h.update(x.to_le_bytes());
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

/// Trains and flags redundant members of each `(variable, counterpart)` pair.
///
/// A candidate is flagged when its score is below [`redundancy_threshold`]
/// while its counterpart carries the signal, either as a condition variable
/// or as a candidate scoring at or above the threshold.
pub fn redundancy_probe(ds: &Dataset, req: &SelectionRequest, pairs: &[(String, String)]) -> Result<Selection> {
    for name in pairs.iter().flat_map(|(a, b)| [a, b]) {
        ds.variable_index(name)
            .ok_or_else(|| Error::schema(format!("unknown variable {name:?} in redundancy pair")))?;
    }
    let mut sel = run_selection(ds, req)?;
    sel.report.redundant = redundancy_flags(&sel.report, pairs);
    Ok(sel)
}

/// The flagging rule of [`redundancy_probe`] applied to a finished report.
pub fn redundancy_flags(report: &ImportanceReport, pairs: &[(String, String)]) -> Vec<String> {
    let thr = redundancy_threshold(report.candidates.len());
    let carries = |name: &str| {
        report.condition.iter().any(|c| c == name) || report.score(name).is_some_and(|s| s >= thr)
    };
    let mut flagged = Vec::new();
    for (a, b) in pairs {
        for (x, other) in [(a, b), (b, a)] {
            if report.score(x).is_some_and(|s| s < thr) && carries(other) && !flagged.contains(x) {
                flagged.push(x.clone());
            }
        }
    }
    flagged
}

/// Mask trajectory and loss curve of one run as epoch-indexed arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryExport {
    pub run_id: String,
    pub candidates: Vec<String>,
    pub epochs: Vec<usize>,
    /// `masks[i]` is the mask after `epochs[i]` epochs.
    pub masks: Vec<Vec<f64>>,
    /// `losses[e]` is the training loss of epoch `e + 1`.
    pub losses: Vec<f64>,
    pub converged_at: Option<usize>,
    /// Wall-clock seconds per epoch; all zero for deterministic exports.
    pub epoch_seconds: Vec<f64>,
}

impl TrajectoryExport {
    pub fn new(report: &ImportanceReport, record: &TrainRecord, deterministic: bool) -> Self {
        let epoch_seconds = if deterministic {
            vec![0.0; record.epoch_seconds.len()]
        } else {
            record.epoch_seconds.clone()
        };
        Self {
            run_id: report.run_id.clone(),
            candidates: report.candidates.clone(),
            epochs: record.trajectory.iter().map(|p| p.epoch).collect(),
            masks: record.trajectory.iter().map(|p| p.mask.clone()).collect(),
            losses: record.losses.clone(),
            converged_at: record.converged_at,
            epoch_seconds,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-candidate statistics over reports that share a condition set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub condition: Vec<String>,
    pub candidates: Vec<String>,
    pub seeds: Vec<u64>,
    pub mean: Vec<f64>,
    /// Population standard deviation across reports.
    pub std: Vec<f64>,
    /// Fraction of reports that put the candidate in their top-k.
    pub frequency: Vec<f64>,
    pub reports: Vec<ImportanceReport>,
}

impl AggregateReport {
    pub fn frequency_of(&self, name: &str) -> Option<f64> {
        self.candidates
            .iter()
            .position(|c| c == name)
            .map(|i| self.frequency[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn aggregate(reports: Vec<ImportanceReport>) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::config("cannot aggregate an empty list of reports"))?;
    for r in &reports[1..] {
        if r.candidates != first.candidates {
            return Err(Error::config(format!(
                "run {} has candidates {:?}, expected {:?}",
                r.run_id, r.candidates, first.candidates
            )));
        }
        if r.condition != first.condition {
            return Err(Error::config(format!(
                "run {} has condition {:?}, expected {:?}",
                r.run_id, r.condition, first.condition
            )));
        }
    }
    let n = reports.len() as f64;
    let d = first.candidates.len();
    let mut mean = vec![0.0; d];
    let mut freq = vec![0.0; d];
    for r in &reports {
        for i in 0..d {
            mean[i] += r.scores[i] / n;
            if r.top_k.contains(&r.candidates[i]) {
                freq[i] += 1.0 / n;
            }
        }
    }
    let std = (0..d)
        .map(|i| {
            let var = reports.iter().map(|r| (r.scores[i] - mean[i]).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect();
    Ok(AggregateReport {
        condition: first.condition.clone(),
        candidates: first.candidates.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        mean,
        std,
        frequency: freq,
        reports,
    })
}

/// Runs the same request once per seed and aggregates.
pub fn sweep(ds: &Dataset, req: &SelectionRequest, seeds: &[u64]) -> Result<AggregateReport> {
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut r = req.clone();
        r.config.seed = seed;
        reports.push(run_selection(ds, &r)?.report);
    }
    aggregate(reports)
}
