//! Seeded minibatch training of the full network with mask-trajectory
//! recording and convergence detection.

use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureScaling};
use crate::error::{Error, Result};
use crate::model::{CvsModel, MaskVector, ModelDims};
use crate::nn::{AdamConfig, AdamState, Mode, DEFAULT_LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// FM hidden width; defaults to `2·D_c`.
    pub mask_hidden: Option<usize>,
    /// Preselected encoding width; defaults to `max(8, 2·D_p)`.
    pub preselected_encoding: Option<usize>,
    /// Candidate encoding width; defaults to `max(16, 2·D_c)`.
    pub candidate_encoding: Option<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Trailing window in epochs; defaults to 10% of `max_epochs`.
    pub convergence_window: Option<usize>,
    pub convergence_tol: f64,
    /// Stop as soon as the trajectory has converged.
    pub stop_on_convergence: bool,
    /// Record the mask every `trajectory_stride` epochs.
    pub trajectory_stride: usize,
    /// Input rescaling applied by the selection pipeline before training;
    /// [`train`] itself uses the dataset as given.
    pub feature_scaling: FeatureScaling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 4000,
            seed: 0,
            mask_hidden: None,
            preselected_encoding: None,
            candidate_encoding: None,
            dropout: 0.3,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            convergence_window: None,
            convergence_tol: 1e-3,
            stop_on_convergence: true,
            trajectory_stride: 1,
            feature_scaling: FeatureScaling::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn window(&self) -> usize {
        self.convergence_window
            .unwrap_or((self.max_epochs / 10).max(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        if self.trajectory_stride == 0 {
            return Err(Error::config("trajectory stride must be at least 1"));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol <= 0.0 {
            return Err(Error::config("convergence tolerance must be positive"));
        }
        Ok(())
    }

    /// Network shapes for a partitioned dataset.
    pub fn model_dims(&self, ds: &Dataset) -> ModelDims {
        let mut dims = ModelDims::new(ds.preselected_matrix().ncols(), ds.candidate_spans());
        if let Some(l) = self.mask_hidden {
            dims.mask_hidden = l;
        }
        if let Some(l) = self.preselected_encoding {
            if dims.preselected_width > 0 {
                dims.preselected_encoding = l;
            }
        }
        if let Some(l) = self.candidate_encoding {
            dims.candidate_encoding = l;
        }
        dims
    }
}

/// Mask recorded after `epoch` full passes (epoch 0 is the initial mask).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Sample-weighted mean minibatch loss of each epoch (train mode).
    pub losses: Vec<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub epoch_seconds: Vec<f64>,
    pub converged_at: Option<usize>,
    pub epochs_run: usize,
    pub updates: u64,
    /// Eval-mode loss over the full training set before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Snapshot handed to a training observer after each epoch.
#[derive(Debug, Clone, Copy)]
pub struct Progress<'a> {
    pub epoch: usize,
    pub loss: f64,
    pub mask: &'a [f64],
}

/// What to do after an observer has seen an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Trains on a partitioned dataset with the default (silent) observer.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(CvsModel, TrainRecord)> {
    train_observed(ds, cfg, |_| Control::Continue)
}

/// Trains and calls `observer` after every epoch.
///
/// Each epoch shuffles the rows with a seeded RNG and walks them in
/// minibatches of `batch_size` (the last, shorter batch is kept). Every
/// minibatch computes its own mask, runs the forward pass in train mode, and
/// takes one Adam step on the minibatch MSE.
pub fn train_observed<F>(ds: &Dataset, cfg: &TrainConfig, mut observer: F) -> Result<(CvsModel, TrainRecord)>
where
    F: FnMut(&Progress<'_>) -> Control,
{
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let dims = cfg.model_dims(ds);
    let mut model = CvsModel::init_with(dims, cfg.seed, cfg.leaky_slope, cfg.dropout)?;
    let mut adam = AdamState::new(
        AdamConfig::with_learning_rate(cfg.learning_rate),
        &model.tensor_sizes(),
    );

    let x_p = ds.preselected_matrix();
    let x_c = ds.candidate_matrix();
    let y = ds.target_matrix();
    let n = ds.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let initial_loss = model.eval_loss(x_p.view(), x_c.view(), y.view())?;
    let initial_mask = extract_final_mask(&model, ds)?;
    let mut record = TrainRecord {
        losses: Vec::with_capacity(cfg.max_epochs),
        trajectory: vec![TrajectoryPoint {
            epoch: 0,
            mask: initial_mask.to_vec(),
        }],
        epoch_seconds: Vec::with_capacity(cfg.max_epochs),
        converged_at: None,
        epochs_run: 0,
        updates: 0,
        initial_loss,
        final_loss: initial_loss,
    };
    let window = cfg.window();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let bp = x_p.select(Axis(0), rows);
            let bc = x_c.select(Axis(0), rows);
            let by = y.select(Axis(0), rows);
            let (loss, grads) = model
                .loss_and_grads(bp.view(), bc.view(), by.view(), Mode::Train, &mut rng)
                .map_err(|e| locate(e, epoch, b))?;
            adam.update(&mut model.param_slices_mut(), &grads.slices())?;
            record.updates += 1;
            weighted += loss * rows.len() as f64;
        }
        let epoch_loss = weighted / n as f64;
        record.losses.push(epoch_loss);
        record.epochs_run = epoch;

        let mask = model.compute_mask(x_c.view())?;
        if epoch % cfg.trajectory_stride == 0 || epoch == cfg.max_epochs {
            record.trajectory.push(TrajectoryPoint {
                epoch,
                mask: mask.to_vec(),
            });
            if record.converged_at.is_none() && window_converged(&record.trajectory, window, cfg.convergence_tol) {
                record.converged_at = Some(epoch);
            }
        }
        record.epoch_seconds.push(started.elapsed().as_secs_f64());

        let progress = Progress {
            epoch,
            loss: epoch_loss,
            mask: mask.as_slice(),
        };
        let stop_requested = observer(&progress) == Control::Stop;
        if stop_requested || (cfg.stop_on_convergence && record.converged_at.is_some()) {
            break;
        }
    }

    record.final_loss = model.eval_loss(x_p.view(), x_c.view(), y.view())?;
    Ok((model, record))
}

fn locate(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Numeric { message, .. } => Error::Numeric {
            message,
            epoch: Some(epoch),
            batch: Some(batch),
        },
        other => other,
    }
}

/// Mask over the full training set in eval mode.
pub fn extract_final_mask(model: &CvsModel, ds: &Dataset) -> Result<MaskVector> {
    model.compute_mask(ds.candidate_matrix().view())
}

/// Largest per-entry range of the mask over the points recorded in
/// `[end − window, end]`, or `None` when fewer than two points are covered or
/// the trajectory does not yet span a full window.
fn window_spread(trajectory: &[TrajectoryPoint], end: usize, window: usize) -> Option<f64> {
    let last = &trajectory[end];
    if last.epoch < window {
        return None;
    }
    let start_epoch = last.epoch - window;
    let points: Vec<&TrajectoryPoint> = trajectory[..=end]
        .iter()
        .rev()
        .take_while(|p| p.epoch >= start_epoch)
        .collect();
    if points.len() < 2 {
        return None;
    }
    let d = last.mask.len();
    let mut spread = 0.0_f64;
    for i in 0..d {
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.mask[i]), hi.max(p.mask[i]))
        });
        spread = spread.max(hi - lo);
    }
    Some(spread)
}

fn window_converged(trajectory: &[TrajectoryPoint], window: usize, tol: f64) -> bool {
    !trajectory.is_empty()
        && window_spread(trajectory, trajectory.len() - 1, window).is_some_and(|s| s < tol)
}

/// First recorded epoch `e` such that every mask entry varied by less than
/// `tol` over the trailing window `[e − window, e]`.
pub fn check_convergence(trajectory: &[TrajectoryPoint], window: usize, tol: f64) -> Option<usize> {
    (0..trajectory.len())
        .find(|&end| window_spread(trajectory, end, window).is_some_and(|s| s < tol))
        .map(|end| trajectory[end].epoch)
}
