//! Dilation-radius ablation: phase 2 is retrained from one shared phase-1
//! checkpoint for each radius and for a control whose decoder is supervised
//! by plain reconstruction.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, EvalCase, EvalSummary};
use crate::model::SynthModel;
use crate::preprocess::{dilate_mask, mask_coverage};
use crate::training::{train_phase2, DecoderObjective, RunPaths, SliceDataset, TrainState, TrainingConfig};

pub const DEFAULT_RADII: [usize; 5] = [0, 5, 10, 15, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Radius(usize),
    NoMask,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Radius(r) => write!(f, "radius_{r}"),
            Variant::NoMask => write!(f, "no_mask"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `local` or `no_mask`.
    pub mode: String,
    /// Dilation radius; empty for the control.
    pub radius: Option<usize>,
    pub dice: f64,
    pub dice_ci_halfwidth: f64,
    /// Mean fraction of voxels inside the attention mask (1 for the control).
    pub coverage: f64,
    pub best_val_dice: f64,
}

/// Voxel-weighted fraction of `samples` covered by their dilated masks.
pub fn coverage(samples: &[PairedSample], radius: usize) -> Result<f64> {
    let (mut covered, mut total) = (0.0, 0.0);
    for s in samples {
        let m = dilate_mask(&s.seg, radius as i64)?;
        let n = s.seg.data.len() as f64;
        covered += mask_coverage(&m) * n;
        total += n;
    }
    if total == 0.0 {
        return Err(Error::Dataset("no cases for coverage".into()));
    }
    Ok(covered / total)
}

/// Data shared by every variant.
pub struct AblationData<'a> {
    pub train: &'a [PairedSample],
    pub val: &'a [PairedSample],
    pub test: &'a [PairedSample],
}

/// Trains phase 2 for one variant under `out_dir/<variant>` and scores the
/// best-validation checkpoint on the test cases.
pub fn run_variant(
    variant: Variant,
    phase1: &Path,
    data: &AblationData<'_>,
    base: &TrainingConfig,
    out_dir: &Path,
) -> Result<(AblationRow, EvalSummary)> {
    let mut cfg = base.clone();
    cfg.phase = 2;
    let radius = match variant {
        Variant::Radius(r) => {
            cfg.dilation_radius = r;
            cfg.decoder_objective = DecoderObjective::LocalLoss;
            Some(r)
        }
        Variant::NoMask => {
            cfg.decoder_objective = DecoderObjective::Reconstruction;
            None
        }
    };
    let paths = RunPaths::new(out_dir.join(variant.to_string()))?;
    let train = SliceDataset::from_samples(data.train, radius)?;
    let val = SliceDataset::from_samples(data.val, None)?;
    let state = TrainState::from_phase1(phase1, &cfg)?;
    let state = train_phase2(state, &train, &val, &cfg, &paths)?;
    let (best, _, _) = SynthModel::load_checkpoint(&paths.best(2))?;
    score_variant(variant, &best, data, state.best_val_dice.unwrap_or(0.0), cfg.seg_threshold, cfg.batch_size)
}

/// Test-set row for an already trained variant.
pub fn score_variant(
    variant: Variant,
    model: &SynthModel<f32>,
    data: &AblationData<'_>,
    best_val_dice: f64,
    threshold: f64,
    batch_size: usize,
) -> Result<(AblationRow, EvalSummary)> {
    let cases: Vec<EvalCase> = data
        .test
        .iter()
        .map(|s| EvalCase {
            t2: s.t2.clone(),
            seg: s.seg.clone(),
        })
        .collect();
    let (_, summary) = evaluate_model(model, &cases, threshold as f32, batch_size)?;
    let (mode, radius, cov) = match variant {
        Variant::Radius(r) => ("local", Some(r), coverage(data.train, r)?),
        Variant::NoMask => ("no_mask", None, 1.0),
    };
    Ok((
        AblationRow {
            mode: mode.into(),
            radius,
            dice: summary.dice_mean,
            dice_ci_halfwidth: summary.dice_ci_halfwidth,
            coverage: cov,
            best_val_dice,
        },
        summary,
    ))
}

/// Runs every radius (ascending) and, if requested, the control.
pub fn run_ablation(
    radii: &[usize],
    include_control: bool,
    phase1: &Path,
    data: &AblationData<'_>,
    base: &TrainingConfig,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if radii.is_empty() && !include_control {
        return Err(Error::InvalidArgument("empty radius list".into()));
    }
    let mut sorted = radii.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut variants: Vec<Variant> = sorted.into_iter().map(Variant::Radius).collect();
    if include_control {
        variants.push(Variant::NoMask);
    }
    variants
        .into_iter()
        .map(|v| run_variant(v, phase1, data, base, out_dir).map(|(row, _)| row))
        .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
