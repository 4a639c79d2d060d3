//! Two-phase training, early stopping and grid search.
//!
//! Phase 1 trains the encoder, latent blocks and decoder as an autoencoder
//! with the synthesis branch frozen. Phase 2 trains everything jointly on the
//! uncertainty-weighted sum of the soft Dice loss and the local loss.
//!
//! Batches are drawn from a shuffle seeded by `(seed, phase, epoch)`, so an
//! interrupted run resumed from its last checkpoint replays the same batches.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, PairedSample};
use crate::error::{Error, Result};
use crate::losses::{
    append_loss_log, dice_loss_grad, local_loss, mae_loss, mae_loss_grad, read_loss_log,
    uncertainty_weighted_grad, LossReport, DEFAULT_DICE_SMOOTH, DEFAULT_SEG_THRESHOLD,
};
use crate::metrics::dice_score;
use crate::model::{checkpoint_paths, CheckpointMeta, SynthModel};
use crate::optim::Sgd;
use crate::preprocess::make_attention_map;
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStop {
    pub window_epochs: usize,
    pub slope_tol: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            window_epochs: 10,
            slope_tol: 1e-4,
        }
    }
}

/// What supervises the decoder branch in phase 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderObjective {
    /// MAE between the masked reconstruction and the attention map.
    #[default]
    LocalLoss,
    /// Plain MAE against the whole input (the no-mask control).
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub momentum: f64,
    pub dilation_radius: usize,
    pub seg_threshold: f64,
    pub dice_smooth: f64,
    pub early_stop: EarlyStop,
    pub decoder_objective: DecoderObjective,
    /// Train on a random subset of this many slices each epoch.
    pub slices_per_epoch: Option<usize>,
    pub seed: u64,
    pub phase: u8,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            max_epochs: 30,
            momentum: 0.9,
            dilation_radius: 10,
            seg_threshold: DEFAULT_SEG_THRESHOLD,
            dice_smooth: DEFAULT_DICE_SMOOTH,
            early_stop: EarlyStop::default(),
            decoder_objective: DecoderObjective::LocalLoss,
            slices_per_epoch: None,
            seed: 0,
            phase: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.early_stop.window_epochs < 2 {
            return bad("early_stop.window_epochs must be at least 2".into());
        }
        if !(self.phase == 1 || self.phase == 2) {
            return bad(format!("phase {} is not 1 or 2", self.phase));
        }
        if !(0.0..1.0).contains(&self.seg_threshold) {
            return bad(format!("seg_threshold {} outside [0, 1)", self.seg_threshold));
        }
        if self.slices_per_epoch == Some(0) {
            return bad("slices_per_epoch must be positive".into());
        }
        Ok(())
    }
}

/// Least-squares slope of the last `window` values against their index;
/// stop iff the slope exceeds `-tol`. Shorter histories never stop.
pub fn early_stop_check(history: &[f64], window: usize, tol: f64) -> bool {
    if window < 2 || history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    let n = window as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = tail.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in tail.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    sxy / sxx > -tol
}

/// All slices of a set of cases, held in memory as `f32` planes.
#[derive(Clone, Debug)]
pub struct SliceDataset {
    pub h: usize,
    pub w: usize,
    pub t2: Vec<f32>,
    pub seg: Vec<f32>,
    /// Attention-map targets for the configured radius (empty if not built).
    pub attention: Vec<f32>,
    pub radius: Option<usize>,
    /// `(case id, first slice, slice count)` in input order.
    pub cases: Vec<(String, usize, usize)>,
}

impl SliceDataset {
    /// Stacks the slices of `samples`; attention maps are built when
    /// `radius` is given.
    pub fn from_samples(samples: &[PairedSample], radius: Option<usize>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Dataset("no cases in split".into()))?;
        let [_, h, w] = first.t2.shape;
        let mut ds = SliceDataset {
            h,
            w,
            t2: Vec::new(),
            seg: Vec::new(),
            attention: Vec::new(),
            radius,
            cases: Vec::new(),
        };
        for s in samples {
            let [d, sh, sw] = s.t2.shape;
            if (sh, sw) != (h, w) {
                return Err(Error::shape(format!("{h}x{w} slices"), format!("{sh}x{sw} in {}", s.t2.id)));
            }
            let start = ds.cases.iter().map(|c| c.2).sum();
            ds.cases.push((s.t2.id.clone(), start, d));
            ds.t2.extend_from_slice(&s.t2.data);
            ds.seg.extend(s.seg.data.iter().map(|&v| f32::from(v)));
            if let Some(r) = radius {
                ds.attention
                    .extend_from_slice(&make_attention_map(&s.t2, &s.seg, r as i64)?.data);
            }
        }
        Ok(ds)
    }

    pub fn n_slices(&self) -> usize {
        self.t2.len() / (self.h * self.w)
    }

    fn gather(&self, src: &[f32], idx: &[usize]) -> Tensor<f32> {
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(idx.len() * plane);
        for &i in idx {
            data.extend_from_slice(&src[i * plane..(i + 1) * plane]);
        }
        Tensor {
            n: idx.len(),
            c: 1,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn batch_t2(&self, idx: &[usize]) -> Tensor<f32> {
        self.gather(&self.t2, idx)
    }

    pub fn batch_seg(&self, idx: &[usize]) -> Tensor<f32> {
        self.gather(&self.seg, idx)
    }

    pub fn batch_attention(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        if self.attention.is_empty() {
            return Err(Error::Dataset("attention maps were not built for this dataset".into()));
        }
        Ok(self.gather(&self.attention, idx))
    }

    fn case_mask(&self, case: usize) -> BinaryMask {
        let (_, start, d) = &self.cases[case];
        let plane = self.h * self.w;
        BinaryMask {
            data: self.seg[start * plane..(start + d) * plane]
                .iter()
                .map(|&v| u8::from(v > 0.5))
                .collect(),
            shape: [*d, self.h, self.w],
            spacing: [1.0; 3],
        }
    }
}

/// Slice order for one epoch, drawn from `(seed, phase, epoch)`.
pub fn epoch_order(n: usize, seed: u64, phase: u8, epoch: usize, limit: Option<usize>) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, &[0x7EA1, u64::from(phase), epoch as u64]);
    order.shuffle(&mut rng);
    if let Some(k) = limit {
        order.truncate(k);
    }
    order
}

/// Validation measurements for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub phase: u8,
    pub val_recon_mae: f64,
    pub val_dice: Option<f64>,
}

/// Files written by a training run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(RunPaths { dir })
    }
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("training_log.csv")
    }
    pub fn val_log(&self) -> PathBuf {
        self.dir.join("validation_log.csv")
    }
    /// Checkpoint after the last completed epoch of `phase`.
    pub fn last(&self, phase: u8) -> PathBuf {
        self.dir.join(format!("phase{phase}_last"))
    }
    /// Drops log rows of `phase` and later phases so a fresh run of `phase`
    /// does not append to stale epochs.
    pub fn reset_logs(&self, phase: u8) -> Result<()> {
        let loss = self.loss_log();
        if loss.exists() {
            let keep: Vec<LossReport> = read_loss_log(&loss)?.into_iter().filter(|r| r.phase < phase).collect();
            std::fs::remove_file(&loss).map_err(|e| Error::io(&loss, e))?;
            if !keep.is_empty() {
                append_loss_log(&loss, &keep)?;
            }
        }
        let val = self.val_log();
        if val.exists() {
            let keep: Vec<ValRecord> = read_val_log(&val)?.into_iter().filter(|r| r.phase < phase).collect();
            std::fs::remove_file(&val).map_err(|e| Error::io(&val, e))?;
            for r in &keep {
                append_val_log(&val, r)?;
            }
        }
        Ok(())
    }

    /// Final phase-1 weights, or the best-validation-Dice phase-2 weights.
    pub fn best(&self, phase: u8) -> PathBuf {
        self.dir.join(format!("phase{phase}_best"))
    }
}

pub struct TrainState {
    pub model: SynthModel<f32>,
    pub optimizer: Sgd<f32>,
    /// Number of completed epochs in the current phase.
    pub epoch: usize,
    pub phase: u8,
    pub loss_history: Vec<LossReport>,
    pub val_history: Vec<ValRecord>,
    pub best_val_dice: Option<f64>,
    pub stopped_early: bool,
    pub seed: u64,
}

impl TrainState {
    /// Fresh state for `phase`; the optimiser starts with zero momentum.
    pub fn new(model: SynthModel<f32>, cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Sgd::new(&model, cfg.learning_rate, cfg.momentum)?;
        Ok(TrainState {
            model,
            optimizer,
            epoch: 0,
            phase: cfg.phase,
            loss_history: Vec::new(),
            val_history: Vec::new(),
            best_val_dice: None,
            stopped_early: false,
            seed: cfg.seed,
        })
    }

    /// Starts phase 2 from a phase-1 checkpoint.
    pub fn from_phase1(stem: &Path, cfg: &TrainingConfig) -> Result<Self> {
        let (weights, _) = checkpoint_paths(stem);
        if !weights.exists() {
            return Err(Error::Checkpoint(format!(
                "phase-1 checkpoint {} not found",
                weights.display()
            )));
        }
        let (model, meta, _) = SynthModel::load_checkpoint(stem)?;
        if meta.phase != 1 {
            return Err(Error::Checkpoint(format!("{} is a phase-{} checkpoint", stem.display(), meta.phase)));
        }
        let mut cfg = cfg.clone();
        cfg.phase = 2;
        TrainState::new(model, &cfg)
    }

    /// Continues an interrupted phase from its `last` checkpoint and logs.
    pub fn resume(paths: &RunPaths, cfg: &TrainingConfig) -> Result<Self> {
        let stem = paths.last(cfg.phase);
        let (model, meta, rest) = SynthModel::load_checkpoint(&stem)?;
        if meta.phase != cfg.phase {
            return Err(Error::Checkpoint(format!("{} belongs to phase {}", stem.display(), meta.phase)));
        }
        let mut state = TrainState::new(model, cfg)?;
        state.optimizer.load_state(&rest)?;
        state.epoch = meta.epoch;
        state.loss_history = read_loss_log(&paths.loss_log())?
            .into_iter()
            .filter(|r| r.phase == cfg.phase && r.epoch < meta.epoch)
            .collect();
        state.val_history = read_val_log(&paths.val_log())?
            .into_iter()
            .filter(|r| r.phase == cfg.phase && r.epoch < meta.epoch)
            .collect();
        state.best_val_dice = state
            .val_history
            .iter()
            .filter_map(|r| r.val_dice)
            .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.max(d))));
        Ok(state)
    }

    fn meta(&self, val_dice: Option<f64>) -> CheckpointMeta {
        CheckpointMeta {
            architecture: self.model.config.clone(),
            phase: self.phase,
            epoch: self.epoch,
            log_sigma1_sq: f64::from(self.model.log_sigma_sq[0]),
            log_sigma2_sq: f64::from(self.model.log_sigma_sq[1]),
            seed: self.seed,
            val_dice,
        }
    }

    fn save(&self, stem: &Path, val_dice: Option<f64>) -> Result<()> {
        self.model
            .save_checkpoint(stem, &self.meta(val_dice), &self.optimizer.state())
    }
}

fn append_val_log(path: &Path, row: &ValRecord) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_val_log(path: &Path) -> Result<Vec<ValRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

fn ensure_finite(v: f64, what: &str, epoch: usize, batch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} at epoch {epoch}, batch {batch}: {v}")))
    }
}

/// Mean reconstruction MAE over the whole dataset, in fixed batch order.
pub fn recon_mae(model: &SynthModel<f32>, data: &SliceDataset, batch_size: usize) -> Result<f64> {
    let n = data.n_slices();
    let mut total = 0.0;
    for start in (0..n).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let x = data.batch_t2(&idx);
        let cache = model.forward_train(&x, false)?;
        total += mae_loss(&cache.recon, &x)? * idx.len() as f64;
    }
    Ok(total / n.max(1) as f64)
}

/// Mean per-case volumetric Dice and reconstruction MAE.
pub fn validate_cases(
    model: &SynthModel<f32>,
    data: &SliceDataset,
    batch_size: usize,
    threshold: f64,
) -> Result<(f64, f64)> {
    let plane = data.h * data.w;
    let (mut dice_sum, mut mae_sum) = (0.0, 0.0);
    for (c, (_, start, d)) in data.cases.iter().enumerate() {
        let mut pred = Vec::with_capacity(d * plane);
        for s in (*start..start + d).step_by(batch_size) {
            let idx: Vec<usize> = (s..(s + batch_size).min(start + d)).collect();
            let x = data.batch_t2(&idx);
            let (recon, prob) = model.forward(&x)?;
            mae_sum += mae_loss(&recon, &x)? * idx.len() as f64;
            pred.extend(prob.data.iter().map(|&p| u8::from(f64::from(p) > threshold)));
        }
        let pred = BinaryMask {
            data: pred,
            shape: [*d, data.h, data.w],
            spacing: [1.0; 3],
        };
        dice_sum += dice_score(&pred, &data.case_mask(c))?;
    }
    let n_cases = data.cases.len().max(1) as f64;
    Ok((dice_sum / n_cases, mae_sum / data.n_slices().max(1) as f64))
}

/// Phase 1: reconstruction-only training with the synthesis branch and the
/// uncertainty parameters frozen, early-stopped on validation MAE.
pub fn train_phase1(
    mut state: TrainState,
    train: &SliceDataset,
    val: &SliceDataset,
    cfg: &TrainingConfig,
    paths: &RunPaths,
) -> Result<TrainState> {
    cfg.validate()?;
    if train.n_slices() == 0 {
        return Err(Error::Dataset("empty training split".into()));
    }
    state.phase = 1;
    state.model.freeze_synthesis_branch(true);
    state.model.freeze_uncertainty(true);
    let mut val_losses: Vec<f64> = state.val_history.iter().map(|v| v.val_recon_mae).collect();
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let order = epoch_order(train.n_slices(), cfg.seed, 1, epoch, cfg.slices_per_epoch);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = train.batch_t2(idx);
            let cache = state.model.forward_train(&x, false)?;
            let lg = mae_loss_grad(&cache.recon, &x)?;
            sum += ensure_finite(lg.value, "reconstruction loss", epoch, b)? * idx.len() as f64;
            let grad = state.model.backward(&cache, Some(&lg.grad), None);
            state.optimizer.step(&mut state.model, &grad);
        }
        let l_recon = sum / order.len() as f64;
        let val_mae = ensure_finite(recon_mae(&state.model, val, cfg.batch_size)?, "validation loss", epoch, 0)?;
        let log_s = state.model.log_sigma_sq.map(f64::from);
        let report = LossReport {
            epoch,
            phase: 1,
            l_recon,
            l_seg: 0.0,
            l_loc: 0.0,
            combined: crate::losses::uncertainty_weighted_loss(0.0, 0.0, log_s)?,
            sigma1_sq: log_s[0].exp(),
            sigma2_sq: log_s[1].exp(),
        };
        let vrow = ValRecord {
            epoch,
            phase: 1,
            val_recon_mae: val_mae,
            val_dice: None,
        };
        info!("phase 1 epoch {epoch}: train mae {l_recon:.5}, val mae {val_mae:.5}");
        append_loss_log(&paths.loss_log(), std::slice::from_ref(&report))?;
        append_val_log(&paths.val_log(), &vrow)?;
        state.loss_history.push(report);
        state.val_history.push(vrow);
        val_losses.push(val_mae);
        state.epoch += 1;
        state.save(&paths.last(1), None)?;
        if early_stop_check(&val_losses, cfg.early_stop.window_epochs, cfg.early_stop.slope_tol) {
            info!("phase 1 early stop after {} epochs", state.epoch);
            state.stopped_early = true;
            break;
        }
    }
    state.save(&paths.best(1), None)?;
    Ok(state)
}

/// Losses of one phase-2 batch, before weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase2Losses {
    pub l_recon: f64,
    pub l_seg: f64,
    pub l_loc: f64,
}

/// Forward, loss and backward for one phase-2 batch; returns the gradient
/// buffer with the uncertainty entries filled in.
pub fn phase2_gradients(
    model: &SynthModel<f32>,
    data: &SliceDataset,
    idx: &[usize],
    cfg: &TrainingConfig,
) -> Result<(SynthModel<f32>, Phase2Losses)> {
    let x = data.batch_t2(idx);
    let gt = data.batch_seg(idx);
    let cache = model.forward_train(&x, true)?;
    let seg = cache.seg.as_ref().expect("synthesis branch ran");
    let seg_lg = dice_loss_grad(seg, &gt, cfg.dice_smooth)?;
    let l_recon = mae_loss(&cache.recon, &x)?;
    let (l_loc, mut d_recon) = match cfg.decoder_objective {
        DecoderObjective::LocalLoss => {
            let target = data.batch_attention(idx)?;
            let ll = local_loss(&cache.recon, seg, &target, cfg.dilation_radius, cfg.seg_threshold)?;
            (ll.value, ll.grad_recon)
        }
        DecoderObjective::Reconstruction => {
            let lg = mae_loss_grad(&cache.recon, &x)?;
            (lg.value, lg.grad)
        }
    };
    let log_s = model.log_sigma_sq.map(f64::from);
    let uw = uncertainty_weighted_grad(seg_lg.value, l_loc, log_s);
    let mut d_seg = seg_lg.grad;
    d_seg.scale(uw.seg_weight as f32);
    d_recon.scale(uw.loc_weight as f32);
    let mut grad = model.backward(&cache, Some(&d_recon), Some(&d_seg));
    grad.log_sigma_sq = uw.d_log_sigma_sq.map(|v| v as f32);
    Ok((
        grad,
        Phase2Losses {
            l_recon,
            l_seg: seg_lg.value,
            l_loc,
        },
    ))
}

/// Phase 2: joint training on the uncertainty-weighted loss, keeping the
/// checkpoint with the best validation Dice.
pub fn train_phase2(
    mut state: TrainState,
    train: &SliceDataset,
    val: &SliceDataset,
    cfg: &TrainingConfig,
    paths: &RunPaths,
) -> Result<TrainState> {
    cfg.validate()?;
    if train.n_slices() == 0 {
        return Err(Error::Dataset("empty training split".into()));
    }
    if cfg.decoder_objective == DecoderObjective::LocalLoss && train.radius != Some(cfg.dilation_radius) {
        return Err(Error::InvalidConfig(format!(
            "training attention maps use radius {:?}, config asks for {}",
            train.radius, cfg.dilation_radius
        )));
    }
    state.phase = 2;
    state.model.freeze_synthesis_branch(false);
    state.model.freeze_uncertainty(false);
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let order = epoch_order(train.n_slices(), cfg.seed, 2, epoch, cfg.slices_per_epoch);
        let (mut s_recon, mut s_seg, mut s_loc) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (grad, l) = phase2_gradients(&state.model, train, idx, cfg)?;
            let k = idx.len() as f64;
            s_seg += ensure_finite(l.l_seg, "segmentation loss", epoch, b)? * k;
            s_loc += ensure_finite(l.l_loc, "local loss", epoch, b)? * k;
            s_recon += l.l_recon * k;
            state.optimizer.step(&mut state.model, &grad);
            if !state.model.log_sigma_sq.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("log sigma^2 at epoch {epoch}, batch {b}")));
            }
        }
        let n = order.len() as f64;
        let log_s = state.model.log_sigma_sq.map(f64::from);
        let report = LossReport::phase2(epoch, s_recon / n, s_seg / n, s_loc / n, log_s)?;
        let (val_dice, val_mae) = validate_cases(&state.model, val, cfg.batch_size, cfg.seg_threshold)?;
        let vrow = ValRecord {
            epoch,
            phase: 2,
            val_recon_mae: val_mae,
            val_dice: Some(val_dice),
        };
        info!(
            "phase 2 epoch {epoch}: l_seg {:.4}, l_loc {:.5}, sigma^2 ({:.4}, {:.5}), val dice {val_dice:.4}",
            report.l_seg, report.l_loc, report.sigma1_sq, report.sigma2_sq
        );
        append_loss_log(&paths.loss_log(), std::slice::from_ref(&report))?;
        append_val_log(&paths.val_log(), &vrow)?;
        state.loss_history.push(report);
        state.val_history.push(vrow);
        state.epoch += 1;
        if state.best_val_dice.is_none_or(|b| val_dice > b) {
            state.best_val_dice = Some(val_dice);
            state.save(&paths.best(2), Some(val_dice))?;
        }
        state.save(&paths.last(2), Some(val_dice))?;
    }
    Ok(state)
}

/// Hyperparameter values to combine exhaustively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub max_epochs: Vec<usize>,
    pub momentum: Vec<f64>,
}

impl GridSpec {
    /// Points in lexicographic order of `(batch_size, learning_rate,
    /// max_epochs, momentum)` list positions.
    pub fn points(&self, base: &TrainingConfig) -> Result<Vec<TrainingConfig>> {
        if self.batch_size.is_empty()
            || self.learning_rate.is_empty()
            || self.max_epochs.is_empty()
            || self.momentum.is_empty()
        {
            return Err(Error::InvalidConfig("grid has an empty axis".into()));
        }
        let mut out = Vec::new();
        for &b in &self.batch_size {
            for &lr in &self.learning_rate {
                for &e in &self.max_epochs {
                    for &m in &self.momentum {
                        let cfg = TrainingConfig {
                            batch_size: b,
                            learning_rate: lr,
                            max_epochs: e,
                            momentum: m,
                            ..base.clone()
                        };
                        cfg.validate()?;
                        out.push(cfg);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub momentum: f64,
    pub val_dice: f64,
}

/// Evaluates every grid point with `run` (which returns validation Dice)
/// and returns the best configuration and all rows. Ties go to the earlier
/// point.
pub fn grid_search<F>(spec: &GridSpec, base: &TrainingConfig, mut run: F) -> Result<(TrainingConfig, Vec<GridRow>)>
where
    F: FnMut(usize, &TrainingConfig) -> Result<f64>,
{
    let points = spec.points(base)?;
    let mut rows = Vec::with_capacity(points.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let dice = run(i, p)?;
        if !dice.is_finite() {
            return Err(Error::NonFinite(format!("validation Dice of grid point {i}")));
        }
        if best.is_none_or(|(_, b)| dice > b) {
            best = Some((i, dice));
        }
        rows.push(GridRow {
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            max_epochs: p.max_epochs,
            momentum: p.momentum,
            val_dice: dice,
        });
    }
    let (i, _) = best.expect("grid is non-empty");
    Ok((points[i].clone(), rows))
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
