use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use vessel_synth::ablation::{run_ablation, write_ablation_csv, AblationData, AblationRow};
use vessel_synth::data::{
    build_manifest, load_volume, save_mask, save_volume, BinaryMask, DatasetManifest, PairedSample, Split,
};
use vessel_synth::losses::read_loss_log;
use vessel_synth::metrics::{
    evaluate_model, predict_volume, write_records_csv, write_summary_json, EvalCase, EvalRecord,
};
use vessel_synth::model::SynthModel;
use vessel_synth::phantom::generate_dataset;
use vessel_synth::preprocess::{center_crop, center_crop_mask, make_attention_map, normalize_intensity};
use vessel_synth::training::{
    grid_search, read_val_log, train_phase1, train_phase2, write_grid_csv, DecoderObjective, GridSpec, RunPaths,
    SliceDataset, TrainState, TrainingConfig,
};

use crate::args::*;
use crate::config::{Phase2Overrides, RunConfig};
use crate::plots::{line_plot, montage, Panel, Series};

/// Bad invocation detected after argument parsing (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

/// Loads `--config` and applies flag overrides.
fn resolve(c: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(c.config.as_deref())?;
    let t = &mut cfg.training;
    if let Some(v) = c.seed {
        t.seed = v;
    }
    if let Some(v) = c.lr {
        t.learning_rate = v;
    }
    if let Some(v) = c.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = c.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = c.momentum {
        t.momentum = v;
    }
    if let Some(v) = c.radius {
        t.dilation_radius = v;
    }
    if let Some(v) = c.slices_per_epoch {
        t.slices_per_epoch = Some(v);
    }
    if c.lr_phase2.is_some() {
        cfg.phase2.learning_rate = c.lr_phase2;
    }
    if c.epochs_phase2.is_some() {
        cfg.phase2.max_epochs = c.epochs_phase2;
    }
    if let Some(v) = c.base_channels {
        cfg.architecture.base_channels = v;
    }
    if let Some(m) = &c.manifest {
        cfg.manifest = Some(m.clone());
    }
    cfg.architecture.validate()?;
    cfg.training.validate()?;
    Ok(cfg)
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let Some(path) = &cfg.manifest else {
        return usage("no dataset manifest: pass --manifest or set `manifest` in the config");
    };
    Ok(DatasetManifest::load(path)?)
}

fn load_split(m: &DatasetManifest, split: Split) -> Result<Vec<PairedSample>> {
    let cases = m.load_split(split)?;
    if cases.is_empty() {
        bail!("the {split:?} split of the manifest is empty");
    }
    Ok(cases)
}

fn check_input_size(cfg: &RunConfig, data: &SliceDataset) -> Result<()> {
    if cfg.architecture.input_hw != (data.h, data.w) {
        bail!(
            "slices are {}x{} but the architecture expects {}x{}",
            data.h,
            data.w,
            cfg.architecture.input_hw.0,
            cfg.architecture.input_hw.1
        );
    }
    Ok(())
}

fn load_checkpoint(stem: &Path) -> Result<SynthModel<f32>> {
    let (model, _, _) =
        SynthModel::load_checkpoint(stem).with_context(|| format!("loading checkpoint {}", stem.display()))?;
    Ok(model)
}

pub fn synth_data(a: &SynthDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.phantom.seed = s;
    }
    if let Some(s) = &a.shape {
        let [d, h, w] = s[..] else {
            return usage("--shape takes three values: D,H,W");
        };
        cfg.phantom.shape = [d, h, w];
    }
    cfg.phantom.validate()?;
    let manifest = generate_dataset(&cfg.phantom, a.n, &a.out)?;
    let path = a.out.join("manifest.json");
    cfg.manifest = Some(path.clone());
    cfg.out_dir = Some(a.out.clone());
    cfg.save(&a.out, "config.json")?;
    info!("{} cases written", manifest.cases.len());
    println!("{}", path.display());
    Ok(())
}

fn parse_fracs(v: &[f64]) -> Result<(f64, f64, f64)> {
    match v {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => usage("--split takes three fractions: TRAIN,VAL,TEST"),
    }
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let target = match &a.size {
        Some(s) => match s[..] {
            [h, w] => (h, w),
            _ => return usage("--size takes two values: H,W"),
        },
        None => cfg.architecture.input_hw,
    };
    let fracs = parse_fracs(&a.split)?;
    let source = build_manifest(&a.input, fracs, a.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for entry in &source.cases {
        let case = source.load_case(entry)?;
        let t2 = normalize_intensity(&center_crop(&case.t2, target)?)?;
        let seg = center_crop_mask(&case.seg, target)?;
        save_volume(&t2, &a.out.join(format!("{}_t2.nii.gz", entry.id)))?;
        save_mask(&seg, &a.out.join(format!("{}_seg.nii.gz", entry.id)))?;
        if let Some(r) = a.radius {
            let map = make_attention_map(&t2, &seg, r as i64)?;
            save_volume(&map.to_volume(&entry.id, t2.spacing), &a.out.join(format!("{}_attention.nii.gz", entry.id)))?;
        }
    }
    let manifest = build_manifest(&a.out, fracs, a.seed)?;
    let path = a.out.join("manifest.json");
    manifest.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if a.no_local_mask {
        cfg.training.decoder_objective = DecoderObjective::Reconstruction;
    }
    if let Some(r) = &a.resume {
        cfg.checkpoint = Some(r.clone());
    }
    let phase = a.phase;
    let tcfg = cfg.training_for(phase);
    tcfg.validate()?;
    let m = load_manifest(&cfg)?;
    let paths = RunPaths::new(&a.out)?;
    cfg.out_dir = Some(a.out.clone());
    cfg.save(&a.out, &format!("config_phase{phase}.json"))?;

    let radius = (phase == 2 && tcfg.decoder_objective == DecoderObjective::LocalLoss).then_some(tcfg.dilation_radius);
    let train = SliceDataset::from_samples(&load_split(&m, Split::Train)?, radius)?;
    let val = SliceDataset::from_samples(&load_split(&m, Split::Val)?, None)?;
    check_input_size(&cfg, &train)?;

    let state = if a.continue_run {
        TrainState::resume(&paths, &tcfg)?
    } else {
        paths.reset_logs(phase)?;
        if phase == 1 {
            TrainState::new(SynthModel::build(&cfg.architecture, tcfg.seed)?, &tcfg)?
        } else {
            let stem = cfg.checkpoint.clone().unwrap_or_else(|| paths.best(1));
            TrainState::from_phase1(&stem, &tcfg)?
        }
    };
    if phase == 1 {
        let s = train_phase1(state, &train, &val, &tcfg, &paths)?;
        println!("phase 1: {} epochs, checkpoint {}", s.epoch, paths.best(1).display());
    } else {
        let s = train_phase2(state, &train, &val, &tcfg, &paths)?;
        println!(
            "phase 2: {} epochs, best val Dice {:.4}, checkpoint {}",
            s.epoch,
            s.best_val_dice.unwrap_or(f64::NAN),
            paths.best(2).display()
        );
    }
    Ok(())
}

fn eval_cases(samples: Vec<PairedSample>) -> Vec<EvalCase> {
    samples.into_iter().map(|s| EvalCase { t2: s.t2, seg: s.seg }).collect()
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    let threshold = a.threshold.unwrap_or(cfg.training.seg_threshold);
    let model = load_checkpoint(&a.checkpoint)?;
    let m = load_manifest(&cfg)?;
    let cases = eval_cases(load_split(&m, a.split.into())?);
    let (records, summary) = evaluate_model(&model, &cases, threshold as f32, a.batch_size)?;
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.with_file_name("eval"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_records_csv(&out.join("eval_records.csv"), &records)?;
    write_summary_json(&out.join("eval_summary.json"), &summary)?;
    cfg.checkpoint = Some(a.checkpoint.clone());
    cfg.out_dir = Some(out.clone());
    cfg.training.seg_threshold = threshold;
    cfg.save(&out, "config.json")?;
    println!("{}", summary.table_line());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let t2 = load_volume(&a.input)?;
    let [_, h, w] = t2.shape;
    let (eh, ew) = model.config.input_hw;
    if (h, w) != (eh, ew) {
        bail!("{} has {h}x{w} slices; the checkpoint expects {eh}x{ew}", a.input.display());
    }
    let (_, prob) = predict_volume(&model, &t2, a.batch_size)?;
    let seg = BinaryMask::from_volume(&prob, a.threshold as f32);
    save_mask(&seg, &a.out)?;
    println!("{}", a.out.display());
    if let Some(p) = &a.save_prob {
        save_volume(&prob, p)?;
        println!("{}", p.display());
    }
    Ok(())
}

pub fn ablate_dilation(a: &AblateArgs) -> Result<()> {
    if a.radii.is_empty() {
        return usage("radius list is empty");
    }
    let mut cfg = resolve(&a.common)?;
    let m = load_manifest(&cfg)?;
    let train = load_split(&m, Split::Train)?;
    let val = load_split(&m, Split::Val)?;
    let test = load_split(&m, Split::Test)?;
    cfg.out_dir = Some(a.out.clone());
    let phase1 = match &a.phase1 {
        Some(p) => p.clone(),
        None => {
            let paths = RunPaths::new(a.out.join("phase1"))?;
            let t1 = cfg.training_for(1);
            let tr = SliceDataset::from_samples(&train, None)?;
            check_input_size(&cfg, &tr)?;
            let va = SliceDataset::from_samples(&val, None)?;
            paths.reset_logs(1)?;
            let state = TrainState::new(SynthModel::build(&cfg.architecture, t1.seed)?, &t1)?;
            train_phase1(state, &tr, &va, &t1, &paths)?;
            paths.best(1)
        }
    };
    cfg.checkpoint = Some(phase1.clone());
    cfg.save(&a.out, "config.json")?;
    let data = AblationData {
        train: &train,
        val: &val,
        test: &test,
    };
    let rows = run_ablation(&a.radii, !a.no_control, &phase1, &data, &cfg.training_for(2), &a.out)?;
    write_ablation_csv(&a.out.join("ablation.csv"), &rows)?;
    plot_ablation(&a.out.join("dice_vs_radius.svg"), &rows)?;
    println!("{:>8} {:>16} {:>9}", "radius", "dice", "coverage");
    for r in &rows {
        let radius = r.radius.map_or("no mask".to_string(), |x| x.to_string());
        println!("{radius:>8} {:>9.3} ± {:.3} {:>8.1}%", r.dice, r.dice_ci_halfwidth, 100.0 * r.coverage);
    }
    Ok(())
}

fn plot_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let local: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.radius.map(|x| (x as f64, r.dice))).collect();
    let mut series = vec![Series::new("local loss", local.clone())];
    if let Some(c) = rows.iter().find(|r| r.radius.is_none()) {
        let (lo, hi) = local
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
        series.push(Series::new("no mask", vec![(lo, c.dice), (hi, c.dice)]));
    }
    line_plot(path, "Test Dice by dilation radius", "radius (pixels)", "Dice", &series)
}

fn or_base<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

pub fn grid(a: &GridArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    let base = cfg.training.clone();
    let spec = GridSpec {
        batch_size: or_base(&a.batch_sizes, base.batch_size),
        learning_rate: or_base(&a.learning_rates, base.learning_rate),
        max_epochs: or_base(&a.max_epochs, base.max_epochs),
        momentum: or_base(&a.momenta, base.momentum),
    };
    let m = load_manifest(&cfg)?;
    let train_s = load_split(&m, Split::Train)?;
    let val = SliceDataset::from_samples(&load_split(&m, Split::Val)?, None)?;
    let plain = SliceDataset::from_samples(&train_s, None)?;
    check_input_size(&cfg, &plain)?;
    let masked = SliceDataset::from_samples(&train_s, Some(base.dilation_radius))?;
    cfg.out_dir = Some(a.out.clone());
    cfg.save(&a.out, "config.json")?;
    let arch = cfg.architecture.clone();
    let (best, rows) = grid_search(&spec, &base, |i, point| {
        let paths = RunPaths::new(a.out.join(format!("point_{i:03}")))?;
        paths.reset_logs(1)?;
        let p1 = TrainingConfig { phase: 1, ..point.clone() };
        let state = TrainState::new(SynthModel::build(&arch, p1.seed)?, &p1)?;
        train_phase1(state, &plain, &val, &p1, &paths)?;
        let p2 = TrainingConfig { phase: 2, ..point.clone() };
        let state = TrainState::from_phase1(&paths.best(1), &p2)?;
        let train = if p2.decoder_objective == DecoderObjective::LocalLoss { &masked } else { &plain };
        let s = train_phase2(state, train, &val, &p2, &paths)?;
        let d = s.best_val_dice.unwrap_or(0.0);
        info!("grid point {i}: val Dice {d:.4}");
        Ok(d)
    })?;
    write_grid_csv(&a.out.join("grid.csv"), &rows)?;
    let best_cfg = RunConfig {
        training: TrainingConfig { phase: 1, ..best },
        phase2: Phase2Overrides::default(),
        ..cfg
    };
    let path = best_cfg.save(&a.out, "best_config.json")?;
    println!("{}", path.display());
    Ok(())
}

/// Resolved config of a training run directory, newest phase first.
fn run_config(dir: &Path) -> Option<RunConfig> {
    ["config_phase2.json", "config_phase1.json", "config.json"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .and_then(|p| RunConfig::load(&p).ok())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let paths = RunPaths { dir: a.run.clone() };
    let log = paths.loss_log();
    if !log.exists() {
        bail!("no training log at {}", log.display());
    }
    let rows = read_loss_log(&log)?;
    let vals = if paths.val_log().exists() {
        read_val_log(&paths.val_log())?
    } else {
        Vec::new()
    };
    let out = a.out.clone().unwrap_or_else(|| a.run.join("report"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let epochs = |phase: u8, f: &dyn Fn(&vessel_synth::losses::LossReport) -> f64| -> Vec<(f64, f64)> {
        rows.iter().filter(|r| r.phase == phase).map(|r| (r.epoch as f64, f(r))).collect()
    };

    let p1 = epochs(1, &|r| r.l_recon);
    if p1.is_empty() {
        println!("notice: no phase-1 rows, loss_phase1.svg skipped");
    } else {
        let v1: Vec<(f64, f64)> = vals
            .iter()
            .filter(|v| v.phase == 1)
            .map(|v| (v.epoch as f64, v.val_recon_mae))
            .collect();
        let path = out.join("loss_phase1.svg");
        line_plot(
            &path,
            "Phase 1 reconstruction",
            "epoch",
            "MAE",
            &[Series::new("train", p1), Series::new("validation", v1)],
        )?;
        println!("{}", path.display());
    }

    if rows.iter().any(|r| r.phase == 2) {
        let path = out.join("loss_phase2.svg");
        line_plot(
            &path,
            "Phase 2 losses",
            "epoch",
            "loss",
            &[
                Series::new("segmentation (Dice)", epochs(2, &|r| r.l_seg)),
                Series::new("local", epochs(2, &|r| r.l_loc)),
                Series::new("combined", epochs(2, &|r| r.combined)),
            ],
        )?;
        println!("{}", path.display());
        let path = out.join("sigma.svg");
        line_plot(
            &path,
            "Task uncertainties",
            "epoch",
            "sigma^2",
            &[
                Series::new("sigma1^2 (segmentation)", epochs(2, &|r| r.sigma1_sq)),
                Series::new("sigma2^2 (local)", epochs(2, &|r| r.sigma2_sq)),
            ],
        )?;
        println!("{}", path.display());
    } else {
        println!("notice: no phase-2 rows in {}, loss_phase2.svg and sigma.svg skipped", log.display());
    }

    let run_cfg = run_config(&a.run);
    let manifest = a.manifest.clone().or_else(|| run_cfg.as_ref().and_then(|c| c.manifest.clone()));
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| paths.best(2));
    let radius = a
        .radius
        .or_else(|| run_cfg.as_ref().map(|c| c.training.dilation_radius))
        .unwrap_or(TrainingConfig::default().dilation_radius);
    match manifest {
        Some(m) if checkpoint.with_extension("weights").exists() => {
            let path = out.join("montage.png");
            write_montage(&path, &DatasetManifest::load(&m)?, &checkpoint, radius, a.threshold)?;
            println!("{}", path.display());
        }
        _ => println!("notice: montage skipped (needs a manifest and the checkpoint {})", checkpoint.display()),
    }
    Ok(())
}

/// Rows of (T2, ground truth, prediction, attention map) for the best,
/// median and worst test cases by Dice, each on its slice with most vessel.
fn write_montage(path: &Path, m: &DatasetManifest, checkpoint: &Path, radius: usize, threshold: f64) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let cases = eval_cases(load_split(m, Split::Test)?);
    let (records, _) = evaluate_model(&model, &cases, threshold as f32, 8)?;
    let picks = pick_cases(&records);
    let mut rows = Vec::new();
    for (label, i) in picks {
        let case = &cases[i];
        let (_, prob) = predict_volume(&model, &case.t2, 8)?;
        let pred = BinaryMask::from_volume(&prob, threshold as f32);
        let att = make_attention_map(&case.t2, &pred, radius as i64)?;
        let plane = case.seg.slice_len();
        let z = (0..case.seg.shape[0])
            .max_by_key(|&z| (case.seg.data[z * plane..(z + 1) * plane].iter().filter(|&&v| v > 0).count(), std::cmp::Reverse(z)))
            .unwrap_or(0);
        let [_, h, w] = case.seg.shape;
        let sl = |v: &[f32]| Panel {
            h,
            w,
            data: v[z * plane..(z + 1) * plane].to_vec(),
        };
        let mask = |m: &BinaryMask| Panel {
            h,
            w,
            data: m.data[z * plane..(z + 1) * plane].iter().map(|&v| f32::from(v)).collect(),
        };
        info!("montage {label}: {} (Dice {:.3}), slice {z}", records[i].case_id, records[i].dice);
        rows.push(vec![sl(&case.t2.data), mask(&case.seg), mask(&pred), sl(&att.data)]);
    }
    montage(path, &rows, 2)
}

/// Indices of the best, median and worst records by Dice (ties by order).
pub fn pick_cases(records: &[EvalRecord]) -> Vec<(&'static str, usize)> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].dice.total_cmp(&records[a].dice).then(a.cmp(&b)));
    let n = order.len();
    if n == 0 {
        return Vec::new();
    }
    vec![("best", order[0]), ("median", order[n / 2]), ("worst", order[n - 1])]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(d: f64) -> EvalRecord {
        EvalRecord {
            case_id: String::new(),
            dice: d,
            hd95: None,
        }
    }

    #[test]
    fn picks_best_median_worst() {
        let r = [rec(0.5), rec(0.9), rec(0.1), rec(0.7), rec(0.3)];
        assert_eq!(pick_cases(&r), vec![("best", 1), ("median", 0), ("worst", 2)]);
        assert!(pick_cases(&[]).is_empty());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"training": {"learning_rate": 0.2, "batch_size": 3}}"#).unwrap();
        let args = CommonArgs {
            config: Some(p),
            lr: Some(0.05),
            ..CommonArgs::default()
        };
        let c = resolve(&args).unwrap();
        assert_eq!((c.training.learning_rate, c.training.batch_size), (0.05, 3));
    }
}
