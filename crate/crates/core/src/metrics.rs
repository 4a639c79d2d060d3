//! Volumetric Dice and HD95, per-case evaluation and confidence intervals.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Volume};
use crate::error::{Error, Result};
use crate::model::SynthModel;
use crate::par;
use crate::tensor::Tensor;

/// `2 |P & G| / (|P| + |G|)`, or 1 when both masks are empty.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.shape != gt.shape {
        return Err(Error::shape(format!("{:?}", gt.shape), format!("{:?}", pred.shape)));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground voxels with at least one background 6-neighbour; voxels outside
/// the volume count as background.
pub fn boundary(mask: &BinaryMask) -> Vec<bool> {
    let [d, h, w] = mask.shape;
    let at = |z: usize, y: usize, x: usize| mask.data[(z * h + y) * w + x] != 0;
    let mut out = vec![false; mask.data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let interior = z > 0
                    && z + 1 < d
                    && y > 0
                    && y + 1 < h
                    && x > 0
                    && x + 1 < w
                    && at(z - 1, y, x)
                    && at(z + 1, y, x)
                    && at(z, y - 1, x)
                    && at(z, y + 1, x)
                    && at(z, y, x - 1)
                    && at(z, y, x + 1);
                out[(z * h + y) * w + x] = !interior;
            }
        }
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas) along
/// a line with sample spacing `s`. `f` holds squared distances, `INFINITY`
/// where there is no site yet.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = s * s;
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let x = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
            if x <= *z.last().expect("one boundary per site") {
                v.pop();
                z.pop();
                continue;
            }
            v.push(q);
            z.push(x);
            break;
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * s;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site, with
/// per-axis spacing `(depth, height, width)`.
pub fn squared_distance_transform(sites: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut zb) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    let mut out = Vec::new();
    let axes = [(w, 1usize, spacing[2]), (h, w, spacing[1]), (d, h * w, spacing[0])];
    for (len, stride, s) in axes {
        line.resize(len, 0.0);
        out.resize(len, 0.0);
        for start in 0..g.len() {
            // a line starts at each index whose coordinate along the axis is 0
            if (start / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                line[i] = g[start + i * stride];
            }
            edt_line(&line, s, &mut out, &mut v, &mut zb);
            for i in 0..len {
                g[start + i * stride] = out[i];
            }
        }
    }
    g
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

fn directed_distances(from: &[bool], to_sq_dist: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to_sq_dist)
        .filter(|(b, _)| **b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Symmetric 95th-percentile surface distance between two nonempty masks,
/// in the units of `spacing`.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3]) -> Result<f64> {
    if pred.shape != gt.shape {
        return Err(Error::shape(format!("{:?}", gt.shape), format!("{:?}", pred.shape)));
    }
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidArgument("hd95 needs two nonempty masks".into()));
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let dt_p = squared_distance_transform(&bp, pred.shape, spacing);
    let dt_g = squared_distance_transform(&bg, gt.shape, spacing);
    let p95_pg = percentile(&mut directed_distances(&bp, &dt_g), 95.0);
    let p95_gp = percentile(&mut directed_distances(&bg, &dt_p), 95.0);
    Ok(p95_pg.max(p95_gp))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub dice: f64,
    /// Missing when either mask is empty.
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_cases: usize,
    pub dice_mean: f64,
    pub dice_ci_halfwidth: f64,
    pub hd95_mean: Option<f64>,
    pub hd95_ci_halfwidth: Option<f64>,
    /// Cases excluded from the HD95 statistics.
    pub missing_hd95: usize,
}

/// Mean and normal-approximation 95% CI half-width `1.96 sd / sqrt(n)`;
/// the half-width is 0 for a single value.
pub fn mean_ci(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, 1.96 * var.sqrt() / n.sqrt()))
}

impl EvalSummary {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        let dice: Vec<f64> = records.iter().map(|r| r.dice).collect();
        let (dice_mean, dice_ci_halfwidth) =
            mean_ci(&dice).ok_or_else(|| Error::Dataset("no cases to summarise".into()))?;
        let hd: Vec<f64> = records.iter().filter_map(|r| r.hd95).collect();
        let missing_hd95 = records.len() - hd.len();
        if missing_hd95 > 0 {
            warn!("{missing_hd95} case(s) have no hd95 (empty mask) and are excluded from its mean");
        }
        let hd_stats = mean_ci(&hd);
        Ok(EvalSummary {
            n_cases: records.len(),
            dice_mean,
            dice_ci_halfwidth,
            hd95_mean: hd_stats.map(|s| s.0),
            hd95_ci_halfwidth: hd_stats.map(|s| s.1),
            missing_hd95,
        })
    }

    /// `Dice 0.790 ± 0.030, HD95 9.10 ± 0.50`
    pub fn table_line(&self) -> String {
        let hd = match (self.hd95_mean, self.hd95_ci_halfwidth) {
            (Some(m), Some(c)) => format!("{m:.2} ± {c:.2}"),
            _ => "n/a".into(),
        };
        format!("Dice {:.3} ± {:.3}, HD95 {hd}", self.dice_mean, self.dice_ci_halfwidth)
    }
}

/// Scores one case in voxel units.
pub fn evaluate_case(case_id: &str, pred: &BinaryMask, gt: &BinaryMask) -> Result<EvalRecord> {
    let dice = dice_score(pred, gt)?;
    let hd = if pred.is_empty() || gt.is_empty() {
        None
    } else {
        Some(hd95(pred, gt, [1.0; 3])?)
    };
    Ok(EvalRecord {
        case_id: case_id.to_string(),
        dice,
        hd95: hd,
    })
}

/// Runs the model slice by slice and restacks `(recon, seg_prob)` volumes.
pub fn predict_volume(model: &SynthModel<f32>, t2: &Volume, batch_size: usize) -> Result<(Volume, Volume)> {
    let [d, h, w] = t2.shape;
    let plane = h * w;
    let mut recon = Vec::with_capacity(t2.data.len());
    let mut prob = Vec::with_capacity(t2.data.len());
    for start in (0..d).step_by(batch_size.max(1)) {
        let n = batch_size.max(1).min(d - start);
        let x = Tensor::from_vec(n, 1, h, w, t2.data[start * plane..(start + n) * plane].to_vec())?;
        let (r, s) = model.forward(&x)?;
        // only the first modality's reconstruction is restacked
        for i in 0..n {
            recon.extend_from_slice(&r.sample(i)[..plane]);
        }
        prob.extend_from_slice(&s.data);
    }
    let mk = |data| Volume {
        data,
        shape: t2.shape,
        spacing: t2.spacing,
        id: t2.id.clone(),
    };
    Ok((mk(recon), mk(prob)))
}

/// A test case ready for scoring.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub t2: Volume,
    pub seg: BinaryMask,
}

/// Predicts every case, thresholds at `threshold` and scores it. Records are
/// returned sorted by case id.
pub fn evaluate_model(
    model: &SynthModel<f32>,
    cases: &[EvalCase],
    threshold: f32,
    batch_size: usize,
) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    if cases.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let mut records = cases
        .iter()
        .map(|c| {
            let (_, prob) = predict_volume(model, &c.t2, batch_size)?;
            let pred = BinaryMask::from_volume(&prob, threshold);
            evaluate_case(&c.t2.id, &pred, &c.seg)
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let summary = EvalSummary::from_records(&records)?;
    Ok((records, summary))
}

/// Scores precomputed predictions in parallel across cases.
pub fn evaluate_predictions(pairs: &[(String, BinaryMask, BinaryMask)]) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let mut records = par::map_slice(pairs, |(id, p, g)| evaluate_case(id, p, g))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let summary = EvalSummary::from_records(&records)?;
    Ok((records, summary))
}

/// Per-case CSV with columns `case_id,dice,hd95` (empty hd95 when missing).
pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_json(path: &Path, summary: &EvalSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).expect("summary serialises");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(shape: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let mut m = BinaryMask::empty(shape);
        for &[z, y, x] in on {
            m.data[(z * shape[1] + y) * shape[2] + x] = 1;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = mask([1, 1, 4], &[[0, 0, 0], [0, 0, 1]]);
        let b = mask([1, 1, 4], &[[0, 0, 0]]);
        assert!((dice_score(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&b, &mask([1, 1, 4], &[[0, 0, 3]])).unwrap(), 0.0);
        assert_eq!(dice_score(&BinaryMask::empty([1, 2, 2]), &BinaryMask::empty([1, 2, 2])).unwrap(), 1.0);
        assert!(dice_score(&a, &BinaryMask::empty([1, 2, 2])).is_err());
    }

    #[test]
    fn hd95_single_voxels() {
        let a = mask([1, 8, 8], &[[0, 1, 1]]);
        let b = mask([1, 8, 8], &[[0, 4, 5]]);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), 5.0);
        assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), 0.0);
        assert!(hd95(&a, &BinaryMask::empty([1, 8, 8]), [1.0; 3]).is_err());
    }

    #[test]
    fn cube_interior_is_not_boundary() {
        let mut on = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    on.push([z, y, x]);
                }
            }
        }
        let b = boundary(&mask([5, 5, 5], &on));
        assert_eq!(b.iter().filter(|&&v| v).count(), 26);
        assert!(!b[(2 * 5 + 2) * 5 + 2]);
        // a full volume is all boundary on its faces
        let full = BinaryMask::new([1, 2, 2], [1.0; 3], vec![1; 4]).unwrap();
        assert!(boundary(&full).iter().all(|&v| v));
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 50.0), 2.5);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
        assert!((percentile(&mut (0..=20).map(f64::from).collect::<Vec<_>>(), 95.0) - 19.0).abs() < 1e-12);
    }

    #[test]
    fn ci_rules() {
        assert_eq!(mean_ci(&[0.7]), Some((0.7, 0.0)));
        let (m, c) = mean_ci(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((c - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_ci(&[]), None);
    }

    #[test]
    fn perfect_predictions_summary() {
        let m = mask([2, 4, 4], &[[0, 1, 1], [1, 2, 2]]);
        let pairs: Vec<_> = (0..3).map(|i| (format!("c{i}"), m.clone(), m.clone())).collect();
        let (rec, s) = evaluate_predictions(&pairs).unwrap();
        assert_eq!(rec.len(), 3);
        assert_eq!((s.dice_mean, s.dice_ci_halfwidth), (1.0, 0.0));
        assert_eq!((s.hd95_mean, s.hd95_ci_halfwidth), (Some(0.0), Some(0.0)));
        assert_eq!(s.table_line(), "Dice 1.000 ± 0.000, HD95 0.00 ± 0.00");
    }

    #[test]
    fn empty_prediction_is_missing_hd95() {
        let gt = mask([1, 4, 4], &[[0, 1, 1]]);
        let r = evaluate_case("x", &BinaryMask::empty([1, 4, 4]), &gt).unwrap();
        assert_eq!((r.dice, r.hd95), (0.0, None));
        let s = EvalSummary::from_records(&[r]).unwrap();
        assert_eq!((s.missing_hd95, s.hd95_mean), (1, None));
        assert!(EvalSummary::from_records(&[]).is_err());
    }

    #[test]
    fn csv_and_json_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            EvalRecord { case_id: "a".into(), dice: 0.5, hd95: Some(2.0) },
            EvalRecord { case_id: "b".into(), dice: 0.0, hd95: None },
        ];
        let p = dir.path().join("cases.csv");
        write_records_csv(&p, &recs).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "case_id,dice,hd95\na,0.5,2.0\nb,0.0,\n");
        let s = EvalSummary::from_records(&recs).unwrap();
        let j = dir.path().join("summary.json");
        write_summary_json(&j, &s).unwrap();
        let back: EvalSummary = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    fn brute_sq_dt(sites: &[bool], shape: [usize; 3], sp: [f64; 3]) -> Vec<f64> {
        let [_, h, w] = shape;
        let coords = |i: usize| [i / (h * w), (i / w) % h, i % w];
        (0..sites.len())
            .map(|i| {
                let a = coords(i);
                (0..sites.len())
                    .filter(|&j| sites[j])
                    .map(|j| {
                        let b = coords(j);
                        (0..3)
                            .map(|k| ((a[k] as f64 - b[k] as f64) * sp[k]).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn distance_transform_matches_brute_force(
            bits in proptest::collection::vec(prop::bool::weighted(0.1), 3 * 7 * 6),
            sp in (0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0),
        ) {
            let shape = [3, 7, 6];
            let spacing = [sp.0, sp.1, sp.2];
            let fast = squared_distance_transform(&bits, shape, spacing);
            let slow = brute_sq_dt(&bits, shape, spacing);
            for (a, b) in fast.iter().zip(&slow) {
                if b.is_infinite() {
                    prop_assert!(a.is_infinite());
                } else {
                    prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
                }
            }
        }

        #[test]
        fn metric_symmetry(
            a in proptest::collection::vec(prop::bool::weighted(0.2), 2 * 8 * 8),
            b in proptest::collection::vec(prop::bool::weighted(0.2), 2 * 8 * 8),
        ) {
            let to_mask = |v: Vec<bool>| BinaryMask::new([2, 8, 8], [1.0; 3], v.into_iter().map(u8::from).collect()).unwrap();
            let (a, b) = (to_mask(a), to_mask(b));
            let dab = dice_score(&a, &b).unwrap();
            prop_assert_eq!(dab, dice_score(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&dab));
            if !a.is_empty() && !b.is_empty() {
                prop_assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), hd95(&b, &a, [1.0; 3]).unwrap());
            }
        }
    }
}
