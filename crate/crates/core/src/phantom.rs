//! Synthetic T2-like volumes with dark tubular "flow voids" and their exact
//! vessel masks.
//!
//! Each case holds a tilted ring with feeder vessels entering from the
//! bottom slice and branches rising towards the top, so nearly every slice
//! intersects a vessel. All randomness comes from `(seed, case_index)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    assign_splits, save_mask, save_volume, BinaryMask, CaseEntry, DatasetManifest, PairedSample, Split,
    Volume, DEFAULT_SPLIT_FRACS, SEG_SUFFIX, T2_SUFFIX,
};
use crate::error::{Error, Result};
use crate::par;
use crate::preprocess::normalize_intensity;
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// `(depth, height, width)`
    pub shape: [usize; 3],
    /// Inclusive range for the number of branches leaving the ring.
    pub n_vessels: (usize, usize),
    /// Tube radius range in in-plane voxels.
    pub vessel_radius: (f64, f64),
    /// Fraction by which vessel voxels are darkened.
    pub void_contrast: f64,
    /// Standard deviation of additive Gaussian noise before normalisation.
    pub noise_sigma: f64,
    /// Slice thickness relative to the in-plane voxel size.
    pub slice_thickness: f64,
    /// Width of the bright fluid sheath around each vessel (0 disables).
    pub cistern_width: f64,
    /// Background intensity inside the sheath.
    pub cistern_level: f64,
    /// Inclusive range for the number of dark non-vessel tubes.
    pub n_distractors: (usize, usize),
    /// Give the non-vessel tubes the same bright sheath as vessels, so only
    /// their isolation from the vessel tree tells them apart.
    pub decoy_sheath: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [16, 96, 96],
            n_vessels: (3, 6),
            vessel_radius: (1.5, 2.5),
            void_contrast: 0.6,
            noise_sigma: 0.06,
            slice_thickness: 2.0,
            cistern_width: 2.0,
            cistern_level: 0.9,
            n_distractors: (4, 8),
            decoy_sheath: true,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.shape;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if d == 0 || h == 0 || w == 0 {
            return bad(format!("empty phantom shape {:?}", self.shape));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return bad(format!("phantom slices {h}x{w} must be divisible by 16"));
        }
        if self.n_vessels.0 > self.n_vessels.1 {
            return bad(format!("vessel count range {:?} is reversed", self.n_vessels));
        }
        let (r0, r1) = self.vessel_radius;
        if !(r0.is_finite() && r1.is_finite()) || r0 < 0.0 || r0 > r1 {
            return bad(format!("vessel radius range {:?}", self.vessel_radius));
        }
        if r1 == 0.0 {
            return bad("vessel radius must be positive".into());
        }
        if !(self.void_contrast > 0.0 && self.void_contrast <= 1.0) {
            return bad(format!("void contrast {} outside (0, 1]", self.void_contrast));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        if self.noise_sigma >= self.void_contrast {
            return bad("noise must stay below the void contrast".into());
        }
        if !(self.slice_thickness > 0.0 && self.slice_thickness.is_finite()) {
            return bad(format!("slice thickness {}", self.slice_thickness));
        }
        if !(self.cistern_width >= 0.0 && self.cistern_width.is_finite()) {
            return bad(format!("cistern width {}", self.cistern_width));
        }
        if !(0.0..=1.0).contains(&self.cistern_level) {
            return bad(format!("cistern level {} outside [0, 1]", self.cistern_level));
        }
        if self.n_distractors.0 > self.n_distractors.1 {
            return bad(format!("distractor range {:?} is reversed", self.n_distractors));
        }
        Ok(())
    }

    pub fn spacing(&self) -> [f32; 3] {
        [self.slice_thickness as f32, 1.0, 1.0]
    }
}

/// A sample point of a vessel centreline in physical `(z, y, x)` coordinates.
#[derive(Clone, Copy, Debug)]
struct Node {
    p: [f64; 3],
    r: f64,
}

/// Smooth background in `[0.3, 0.8]` built from random Gaussian blobs and a
/// low-frequency wave.
fn background(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [d, h, w] = cfg.shape;
    let zs = cfg.slice_thickness;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..8)
        .map(|_| {
            let c = [
                rng.random_range(0.0..d as f64) * zs,
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
            ];
            let s = rng.random_range(0.12..0.3) * h as f64;
            let a = rng.random_range(-1.0..1.0);
            (c, s, a)
        })
        .collect();
    let (ky, kx, phase) = (
        rng.random_range(0.5..2.0) * 2.0 * PI / h as f64,
        rng.random_range(0.5..2.0) * 2.0 * PI / w as f64,
        rng.random_range(0.0..2.0 * PI),
    );
    let mut f = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pz = z as f64 * zs;
                let mut v = 0.4 * (ky * y as f64 + kx * x as f64 + phase).sin();
                for (c, s, a) in &blobs {
                    let d2 = (pz - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
                    v += a * (-d2 / (2.0 * s * s)).exp();
                }
                f.push(v);
            }
        }
    }
    let (lo, hi) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    f.iter_mut().for_each(|v| *v = 0.3 + 0.5 * (*v - lo) / span);
    f
}

/// Polyline that wanders from `start` with a slowly turning in-plane
/// heading while its depth moves linearly by `dz` per step.
#[allow(clippy::too_many_arguments)]
fn wander(
    rng: &mut ChaCha8Rng,
    start: [f64; 3],
    heading: f64,
    steps: usize,
    step_len: f64,
    dz: f64,
    r0: f64,
    r1: f64,
) -> Vec<Node> {
    let turn = Normal::new(0.0, 0.12).expect("valid sigma");
    let mut heading = heading;
    let mut p = start;
    let mut out = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 / steps.max(1) as f64;
        out.push(Node {
            p,
            r: r0 + (r1 - r0) * t,
        });
        heading += turn.sample(rng);
        p = [p[0] + dz, p[1] + step_len * heading.sin(), p[2] + step_len * heading.cos()];
    }
    out
}

fn vessel_tree(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Node>> {
    let [d, h, w] = cfg.shape;
    let zs = cfg.slice_thickness;
    let depth = d as f64 * zs;
    let (rmin, rmax) = cfg.vessel_radius;
    let radius = |rng: &mut ChaCha8Rng| if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmax };

    let cy = h as f64 / 2.0 + rng.random_range(-0.06..0.06) * h as f64;
    let cx = w as f64 / 2.0 + rng.random_range(-0.06..0.06) * w as f64;
    let ry = rng.random_range(0.16..0.24) * h as f64;
    let rx = rng.random_range(0.18..0.26) * w as f64;
    let zc = depth * rng.random_range(0.4..0.6);
    let tilt = rng.random_range(0.0..1.5) * zs;
    let (tphase, wphase) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let ring_point = |theta: f64| {
        let wobble = 1.0 + 0.08 * (2.0 * theta + wphase).sin();
        [
            zc + tilt * (theta + tphase).sin(),
            cy + ry * wobble * theta.sin(),
            cx + rx * wobble * theta.cos(),
        ]
    };
    let ring_r = radius(rng);
    let ring: Vec<Node> = (0..=72)
        .map(|k| Node {
            p: ring_point(2.0 * PI * k as f64 / 72.0),
            r: ring_r,
        })
        .collect();
    let mut vessels = vec![ring];

    // feeders run from the ring down through the bottom slice
    let feeder_angles = [PI / 2.0 - 0.5, PI / 2.0 + 0.5, 1.5 * PI];
    for &a in &feeder_angles {
        let theta = a + rng.random_range(-0.25..0.25);
        let start = ring_point(theta);
        let steps = 12;
        let dz = -(start[0] + zs) / steps as f64;
        let r = radius(rng);
        let heading = rng.random_range(0.0..2.0 * PI);
        vessels.push(wander(rng, start, heading, steps, 0.6, dz, r, r));
    }

    // branches leave the ring outwards and rise through the top slice
    let (nmin, nmax) = cfg.n_vessels;
    let n_branches = rng.random_range(nmin..=nmax);
    for _ in 0..n_branches {
        let theta = rng.random_range(0.0..2.0 * PI);
        let start = ring_point(theta);
        let outward = (ry * theta.sin()).atan2(rx * theta.cos()) + rng.random_range(-0.6..0.6);
        let steps = rng.random_range(18..=32);
        let rise = (depth + zs - start[0]) * rng.random_range(0.5..1.1);
        let r = radius(rng);
        vessels.push(wander(rng, start, outward, steps, 2.0, rise / steps as f64, r, 0.75 * r));
    }
    vessels
}

/// Short dark tubes scattered through the tissue, unconnected to the tree.
fn distractors(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Node>> {
    let [d, h, w] = cfg.shape;
    let zs = cfg.slice_thickness;
    let (nmin, nmax) = cfg.n_distractors;
    let (rmin, rmax) = cfg.vessel_radius;
    let count = rng.random_range(nmin..=nmax);
    (0..count)
        .map(|_| {
            let start = [
                rng.random_range(0.0..d as f64) * zs,
                rng.random_range(0.1..0.9) * h as f64,
                rng.random_range(0.1..0.9) * w as f64,
            ];
            let heading = rng.random_range(0.0..2.0 * PI);
            let steps = rng.random_range(8..=20);
            let dz = rng.random_range(-0.5..0.5) * zs;
            let r = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmax };
            wander(rng, start, heading, steps, 2.0, dz, r, r)
        })
        .collect()
}

/// Marks every voxel whose centre lies within `grow` of a tube around the
/// polyline.
fn rasterise(nodes: &[Node], shape: [usize; 3], zs: f64, grow: f64, out: &mut [u8]) {
    let [d, h, w] = shape;
    for seg in nodes.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let rmax = a.r.max(b.r) + grow;
        let lo = |i: usize, s: f64, n: usize| (((a.p[i].min(b.p[i]) - rmax) / s).floor().max(0.0) as usize).min(n);
        let hi = |i: usize, s: f64, n: usize| (((a.p[i].max(b.p[i]) + rmax) / s).ceil() + 1.0).clamp(0.0, n as f64) as usize;
        let ab = [b.p[0] - a.p[0], b.p[1] - a.p[1], b.p[2] - a.p[2]];
        let len2 = ab.iter().map(|v| v * v).sum::<f64>();
        for z in lo(0, zs, d)..hi(0, zs, d) {
            for y in lo(1, 1.0, h)..hi(1, 1.0, h) {
                for x in lo(2, 1.0, w)..hi(2, 1.0, w) {
                    let q = [z as f64 * zs, y as f64, x as f64];
                    let aq = [q[0] - a.p[0], q[1] - a.p[1], q[2] - a.p[2]];
                    let t = if len2 > 0.0 {
                        ((aq[0] * ab[0] + aq[1] * ab[1] + aq[2] * ab[2]) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let dist2 = (0..3).map(|i| (aq[i] - t * ab[i]).powi(2)).sum::<f64>();
                    let r = a.r + t * (b.r - a.r) + grow;
                    if dist2 <= r * r {
                        out[(z * h + y) * w + x] = 1;
                    }
                }
            }
        }
    }
}

/// Generates one case. Split is set to `Train`; dataset generation assigns
/// the real split.
pub fn generate_phantom(cfg: &PhantomConfig, case_index: u64) -> Result<PairedSample> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, &[0xFA4700, case_index]);
    let tissue = background(cfg, &mut rng);
    let zs = cfg.slice_thickness;
    let n = tissue.len();
    let mut seg = vec![0u8; n];
    let mut sheath = vec![0u8; n];
    let mut decoys = vec![0u8; n];
    for v in vessel_tree(cfg, &mut rng) {
        rasterise(&v, cfg.shape, zs, 0.0, &mut seg);
        if cfg.cistern_width > 0.0 {
            rasterise(&v, cfg.shape, zs, cfg.cistern_width, &mut sheath);
        }
    }
    for v in distractors(cfg, &mut rng) {
        rasterise(&v, cfg.shape, zs, 0.0, &mut decoys);
        if cfg.decoy_sheath && cfg.cistern_width > 0.0 {
            rasterise(&v, cfg.shape, zs, cfg.cistern_width, &mut sheath);
        }
    }
    // flow voids darken the underlying tissue signal whether or not they
    // sit inside a sheath, so vessels and decoys share one intensity law
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let data: Vec<f32> = (0..n)
        .map(|i| {
            let v = if seg[i] != 0 || decoys[i] != 0 {
                tissue[i] * (1.0 - cfg.void_contrast)
            } else if sheath[i] != 0 {
                tissue[i].max(cfg.cistern_level)
            } else {
                tissue[i]
            };
            (v + noise.sample(&mut rng)) as f32
        })
        .collect();
    let id = case_name(case_index);
    let raw = Volume::new(id, cfg.shape, cfg.spacing(), data)?;
    let t2 = normalize_intensity(&raw)?;
    let mask = BinaryMask::new(cfg.shape, cfg.spacing(), seg)?;
    PairedSample::new(t2, mask, Split::Train)
}

pub fn case_name(case_index: u64) -> String {
    format!("case{case_index:04}")
}

/// Writes `n_cases` phantoms as `<case>_t2.nii.gz` / `<case>_seg.nii.gz`
/// plus `manifest.json` with the default split fractions.
pub fn generate_dataset(cfg: &PhantomConfig, n_cases: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if n_cases == 0 {
        return Err(Error::InvalidArgument("n_cases must be at least 1".into()));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ids: Vec<String> = (0..n_cases as u64).map(case_name).collect();
    let splits = assign_splits(&ids, DEFAULT_SPLIT_FRACS, cfg.seed)?;
    let written = par::map_range(n_cases, |i| -> Result<CaseEntry> {
        let sample = generate_phantom(cfg, i as u64)?;
        let id = &ids[i];
        let t2 = format!("{id}{T2_SUFFIX}.nii.gz");
        let seg = format!("{id}{SEG_SUFFIX}.nii.gz");
        save_volume(&sample.t2, &out_dir.join(&t2))?;
        save_mask(&sample.seg, &out_dir.join(&seg))?;
        Ok(CaseEntry {
            id: id.clone(),
            t2: t2.into(),
            seg: seg.into(),
            split: splits[i],
        })
    });
    let manifest = DatasetManifest {
        cases: written.into_iter().collect::<Result<Vec<_>>>()?,
        seed: cfg.seed,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Best Dice reachable by the rule `t2 < threshold` with one threshold shared
/// by all cases, searched over `bins` evenly spaced thresholds in `[0, 1]`.
/// Returns `(threshold, dice)`.
pub fn best_threshold_dice(cases: &[(&Volume, &BinaryMask)], bins: usize) -> (f64, f64) {
    let bins = bins.max(2);
    let mut fg = vec![0u64; bins];
    let mut all = vec![0u64; bins];
    let mut n_gt = 0u64;
    for (t2, seg) in cases {
        for (&v, &s) in t2.data.iter().zip(&seg.data) {
            let b = ((f64::from(v).clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            all[b] += 1;
            if s != 0 {
                fg[b] += 1;
                n_gt += 1;
            }
        }
    }
    let (mut best_t, mut best) = (0.0, 0.0);
    let (mut tp, mut pred) = (0u64, 0u64);
    for b in 0..bins {
        tp += fg[b];
        pred += all[b];
        let dice = if pred + n_gt == 0 { 1.0 } else { 2.0 * tp as f64 / (pred + n_gt) as f64 };
        if dice > best {
            best = dice;
            best_t = (b + 1) as f64 / bins as f64;
        }
    }
    (best_t, best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            shape: [8, 32, 32],
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn deterministic_per_case() {
        let cfg = small();
        let a = generate_phantom(&cfg, 3).unwrap();
        let b = generate_phantom(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.t2.data, generate_phantom(&cfg, 4).unwrap().t2.data);
    }

    #[test]
    fn vessels_are_dark_and_sparse() {
        let cfg = PhantomConfig::default();
        for i in 0..4 {
            let s = generate_phantom(&cfg, i).unwrap();
            let n = s.seg.count();
            assert!(n > 0);
            assert!((n as f64) < 0.05 * s.seg.data.len() as f64);
            let (mut fg, mut bg) = ((0.0, 0usize), (0.0, 0usize));
            for (&v, &m) in s.t2.data.iter().zip(&s.seg.data) {
                let acc = if m != 0 { &mut fg } else { &mut bg };
                acc.0 += f64::from(v);
                acc.1 += 1;
            }
            assert!(fg.0 / fg.1 as f64 <= bg.0 / bg.1 as f64);
            assert!(s.t2.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn decoy_sheath_brightens_only_tissue() {
        let cfg = PhantomConfig {
            noise_sigma: 0.0,
            n_distractors: (6, 6),
            ..small()
        };
        let bare = generate_phantom(&PhantomConfig { decoy_sheath: false, ..cfg.clone() }, 1).unwrap();
        let sheathed = generate_phantom(&cfg, 1).unwrap();
        assert_eq!(bare.seg, sheathed.seg);
        // the sheath level is the brightest raw value, so it maps to 1
        let bright = |s: &PairedSample| s.t2.data.iter().filter(|&&v| v == 1.0).count();
        assert!(bright(&sheathed) > bright(&bare));
        for ((&a, &b), &m) in bare.t2.data.iter().zip(&sheathed.t2.data).zip(&sheathed.seg.data) {
            if m != 0 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn most_slices_contain_vessels() {
        let s = generate_phantom(&PhantomConfig::default(), 0).unwrap();
        let plane = s.seg.slice_len();
        let hit = s.seg.data.chunks(plane).filter(|c| c.iter().any(|&v| v != 0)).count();
        assert!(hit * 4 >= s.seg.shape[0] * 3, "{hit} slices with vessels");
    }

    #[test]
    fn invalid_configs() {
        let mut c = small();
        c.shape = [8, 30, 32];
        assert!(c.validate().is_err());
        let mut c = small();
        c.void_contrast = 0.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.vessel_radius = (0.0, 0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn dataset_counts_and_byte_identity() {
        let cfg = PhantomConfig {
            shape: [2, 16, 16],
            ..PhantomConfig::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_dataset(&cfg, 5, a.path()).unwrap();
        generate_dataset(&cfg, 5, b.path()).unwrap();
        assert_eq!(m.cases.len(), 5);
        let files = std::fs::read_dir(a.path()).unwrap().count();
        assert_eq!(files, 11);
        for e in std::fs::read_dir(a.path()).unwrap() {
            let name = e.unwrap().file_name();
            let x = std::fs::read(a.path().join(&name)).unwrap();
            let y = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(x, y, "{name:?} differs");
        }
        let loaded = DatasetManifest::load(&a.path().join("manifest.json")).unwrap();
        let case = loaded.load_case(&loaded.cases[0]).unwrap();
        assert_eq!(case.t2.shape, [2, 16, 16]);
        assert!(generate_dataset(&cfg, 0, a.path()).is_err());
    }

    #[test]
    fn intensity_alone_does_not_separate_vessels() {
        let cfg = PhantomConfig {
            shape: [16, 64, 64],
            ..PhantomConfig::default()
        };
        let cases: Vec<_> = (0..3).map(|i| generate_phantom(&cfg, i).unwrap()).collect();
        let pairs: Vec<_> = cases.iter().map(|c| (&c.t2, &c.seg)).collect();
        let (_, d) = best_threshold_dice(&pairs, 64);
        assert!(d < 0.7, "global threshold reaches Dice {d}");
        let plain = PhantomConfig {
            cistern_width: 0.0,
            n_distractors: (0, 0),
            ..cfg
        };
        let cases: Vec<_> = (0..3).map(|i| generate_phantom(&plain, i).unwrap()).collect();
        let pairs: Vec<_> = cases.iter().map(|c| (&c.t2, &c.seg)).collect();
        assert!(best_threshold_dice(&pairs, 64).1 > d);
    }

    #[test]
    fn threshold_baseline_on_known_data() {
        let t2 = Volume::new("x", [1, 1, 4], [1.0; 3], vec![0.1, 0.2, 0.8, 0.9]).unwrap();
        let seg = BinaryMask::new([1, 1, 4], [1.0; 3], vec![1, 1, 0, 0]).unwrap();
        let (t, d) = best_threshold_dice(&[(&t2, &seg)], 10);
        assert_eq!(d, 1.0);
        assert!(t > 0.2 && t <= 0.8);
    }
}
