//! Volumes, masks, NIfTI-1 I/O and dataset manifests.
//!
//! Volumes are stored slice-major as `[depth, height, width]` with width the
//! fastest axis, which is also the on-disk order of a NIfTI file whose `x`
//! axis is width and `z` axis is depth.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// `depth * height * width` intensities, width fastest.
    pub data: Vec<f32>,
    /// `(depth, height, width)`
    pub shape: [usize; 3],
    /// Voxel size in mm along `(depth, height, width)`.
    pub spacing: [f32; 3],
    pub id: String,
}

impl Volume {
    pub fn new(id: impl Into<String>, shape: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let v = Volume {
            data,
            shape,
            spacing,
            id: id.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(id: impl Into<String>, shape: [usize; 3]) -> Self {
        Volume {
            data: vec![0.0; shape.iter().product()],
            shape,
            spacing: [1.0; 3],
            id: id.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::InvalidArgument(format!("empty volume shape {:?}", self.shape)));
        }
        if self.data.len() != self.shape.iter().product::<usize>() {
            return Err(Error::shape(
                format!("{} voxels for {:?}", self.shape.iter().product::<usize>(), self.shape),
                self.data.len(),
            ));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} of volume {}", self.id)));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.shape[0]
    }

    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let s = self.slice_len();
        &self.data[z * s..(z + 1) * s]
    }
}

/// A `{0, 1}` volume paired with a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub data: Vec<u8>,
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!("{shape:?}"), data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { data, shape, spacing })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        BinaryMask {
            data: vec![0; shape.iter().product()],
            shape,
            spacing: [1.0; 3],
        }
    }

    /// Voxels strictly above `threshold` become foreground.
    pub fn from_volume(v: &Volume, threshold: f32) -> Self {
        BinaryMask {
            data: v.data.iter().map(|&x| u8::from(x > threshold)).collect(),
            shape: v.shape,
            spacing: v.spacing,
        }
    }

    pub fn to_volume(&self, id: impl Into<String>) -> Volume {
        Volume {
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
            shape: self.shape,
            spacing: self.spacing,
            id: id.into(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub t2: Volume,
    pub seg: BinaryMask,
    pub split: Split,
}

impl PairedSample {
    pub fn new(t2: Volume, seg: BinaryMask, split: Split) -> Result<Self> {
        if t2.shape != seg.shape {
            return Err(Error::shape(format!("{:?}", t2.shape), format!("{:?}", seg.shape)));
        }
        if t2.spacing != seg.spacing {
            return Err(Error::InvalidArgument(format!(
                "spacing mismatch for {}: {:?} vs {:?}",
                t2.id, t2.spacing, seg.spacing
            )));
        }
        Ok(PairedSample { t2, seg, split })
    }
}

/// Case identifier from a file name: strips `.nii`/`.nii.gz`.
pub fn case_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name)
        .to_string()
}

/// Reads a 3D NIfTI-1 volume (`.nii` or `.nii.gz`) as `f32`, applying the
/// header's intensity scaling. Trailing singleton dimensions are accepted.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let nifti_err = |e: nifti::NiftiError| Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err)?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    let dims: Vec<u16> = header.dim[1..=ndim.min(7)].to_vec();
    let significant = dims.iter().rposition(|&d| d > 1).map_or(0, |i| i + 1);
    if ndim < 3 || significant > 3 || dims[..3].contains(&0) {
        return Err(Error::NotVolumetric {
            path: path.to_path_buf(),
            dims,
        });
    }
    let (w, h, d) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(nifti_err)?;
    // Logical [x, y, z, ...] indexing; the transposed view iterates z slowest
    // and x fastest, which is the in-memory layout used here.
    let data: Vec<f32> = arr.t().iter().copied().collect();
    let spacing = [header.pixdim[3], header.pixdim[2], header.pixdim[1]]
        .map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
    Volume::new(case_id_from_path(path), [d, h, w], spacing, data)
}

/// Loads a segmentation and binarises it with threshold `> 0.5`.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    Ok(BinaryMask::from_volume(&load_volume(path)?, 0.5))
}

/// Writes a volume as `float32` NIfTI-1; gzip-compressed when the path ends
/// in `.gz`.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    v.validate()?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory missing"),
            ));
        }
    }
    let [d, h, w] = v.shape;
    // Column-major [x, y, z] over the same buffer.
    let arr = Array3::from_shape_vec((w, h, d).f(), v.data.clone())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0, v.spacing[2], v.spacing[1], v.spacing[0], 1.0, 1.0, 1.0, 1.0];
    header.xyzt_units = 2; // mm
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)
        .map_err(|e| match e {
            nifti::NiftiError::Io(io) => Error::io(path, io),
            other => Error::Nifti {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

pub fn save_mask(m: &BinaryMask, path: &Path) -> Result<()> {
    save_volume(&m.to_volume(case_id_from_path(path)), path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    /// Path of the T2 volume, relative to the manifest's directory unless
    /// absolute.
    pub t2: PathBuf,
    pub seg: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
    pub seed: u64,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

/// Default `(train, val, test)` fractions: 150 / 20 / 11 of 181 cases.
pub const DEFAULT_SPLIT_FRACS: (f64, f64, f64) = (150.0 / 181.0, 20.0 / 181.0, 11.0 / 181.0);

pub const T2_SUFFIX: &str = "_t2";
pub const SEG_SUFFIX: &str = "_seg";

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.cases.iter().filter(|c| c.split == split).count()
    }

    /// Manifest restricted to one split, sharing the root.
    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            cases: self.cases.iter().filter(|c| c.split == split).cloned().collect(),
            seed: self.seed,
            root: self.root.clone(),
        }
    }

    pub fn load_case(&self, entry: &CaseEntry) -> Result<PairedSample> {
        let mut t2 = load_volume(&self.resolve(&entry.t2))?;
        t2.id = entry.id.clone();
        let seg = load_mask(&self.resolve(&entry.seg))?;
        PairedSample::new(t2, seg, entry.split)
    }

    /// Loads every case of one split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<PairedSample>> {
        self.split(split).into_iter().map(|e| self.load_case(e)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest and checks that case ids are unique and every
    /// referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.cases {
            if !seen.insert(&c.id) {
                return Err(Error::Dataset(format!("duplicate case id {}", c.id)));
            }
            for p in [&c.t2, &c.seg] {
                let full = self.resolve(p);
                if !full.exists() {
                    return Err(Error::Dataset(format!(
                        "case {}: missing file {}",
                        c.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Split sizes for `n` cases. Train and val are rounded; test takes the rest.
pub fn split_sizes(n: usize, fracs: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fracs;
    if [a, b, c].iter().any(|f| !f.is_finite() || *f < 0.0) || a + b + c <= 0.0 {
        return Err(Error::InvalidArgument(format!("invalid split fractions {fracs:?}")));
    }
    let total = a + b + c;
    let n_train = (((a / total) * n as f64).round() as usize).min(n);
    let n_val = (((b / total) * n as f64).round() as usize).min(n - n_train);
    Ok((n_train, n_val, n - n_train - n_val))
}

/// Assigns splits to sorted case ids with a seeded shuffle.
pub fn assign_splits(ids: &[String], fracs: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let (n_train, n_val, _) = split_sizes(ids.len(), fracs)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut rng = stream_rng(seed, &[0x5B117]);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut splits = vec![Split::Test; ids.len()];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

/// Scans `data_dir` for `<case>_t2.nii[.gz]` / `<case>_seg.nii[.gz]` pairs
/// and assigns a deterministic split.
pub fn build_manifest(data_dir: &Path, split_fracs: (f64, f64, f64), seed: u64) -> Result<DatasetManifest> {
    let rd = std::fs::read_dir(data_dir).map_err(|e| Error::io(data_dir, e))?;
    let mut t2s: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut segs: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(data_dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let stem = case_id_from_path(&path);
        if stem == file_name(&path) {
            continue; // not a NIfTI file
        }
        let rel = PathBuf::from(file_name(&path));
        if let Some(case) = stem.strip_suffix(T2_SUFFIX) {
            t2s.insert(case.to_string(), rel);
        } else if let Some(case) = stem.strip_suffix(SEG_SUFFIX) {
            segs.insert(case.to_string(), rel);
        }
    }
    if t2s.is_empty() && segs.is_empty() {
        return Err(Error::Dataset(format!(
            "no `<case>{T2_SUFFIX}` / `<case>{SEG_SUFFIX}` NIfTI files in {}",
            data_dir.display()
        )));
    }
    if let Some(case) = t2s.keys().find(|k| !segs.contains_key(*k)) {
        return Err(Error::Dataset(format!("case {case}: segmentation file missing")));
    }
    if let Some(case) = segs.keys().find(|k| !t2s.contains_key(*k)) {
        return Err(Error::Dataset(format!("case {case}: T2 file missing")));
    }
    let ids: Vec<String> = t2s.keys().cloned().collect();
    let splits = assign_splits(&ids, split_fracs, seed)?;
    let cases = ids
        .into_iter()
        .zip(splits)
        .map(|(id, split)| CaseEntry {
            t2: t2s[&id].clone(),
            seg: segs[&id].clone(),
            id,
            split,
        })
        .collect();
    Ok(DatasetManifest {
        cases,
        seed,
        root: data_dir.to_path_buf(),
    })
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 3]) -> Volume {
        let n: usize = shape.iter().product();
        Volume::new(
            "ramp",
            shape,
            [2.5, 0.9, 0.8],
            (0..n).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.nii", "b.nii.gz"] {
            let v = ramp([3, 5, 7]);
            let p = dir.path().join(name);
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.shape, v.shape);
            assert_eq!(back.spacing, v.spacing);
            assert_eq!(back.data, v.data);
        }
    }

    #[test]
    fn zero_volume_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.nii.gz");
        save_volume(&Volume::zeros("z", [2, 4, 4]), &p).unwrap();
        assert!(load_volume(&p).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_dimensional_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.nii");
        let arr = Array3::<f32>::zeros((4, 4, 1).f());
        let arr2 = arr.index_axis(ndarray::Axis(2), 0).to_owned();
        WriterOptions::new(&p).write_nifti(&arr2).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(matches!(err, Error::NotVolumetric { .. }), "{err}");
        assert!(err.to_string().contains("non-3D payload"));
    }

    #[test]
    fn missing_file_and_bad_dir_are_io_errors() {
        assert!(matches!(load_volume(Path::new("/nonexistent/x.nii")), Err(Error::Io { .. })));
        let v = ramp([1, 2, 2]);
        assert!(matches!(
            save_volume(&v, Path::new("/nonexistent/dir/x.nii")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn malformed_header_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.nii");
        std::fs::write(&p, b"definitely not nifti").unwrap();
        assert!(load_volume(&p).is_err());
    }

    #[test]
    fn masks_binarise_above_half() {
        let v = Volume::new("m", [1, 1, 4], [1.0; 3], vec![0.0, 0.5, 0.51, 3.0]).unwrap();
        assert_eq!(BinaryMask::from_volume(&v, 0.5).data, vec![0, 0, 1, 1]);
    }

    #[test]
    fn paper_default_split_sizes() {
        assert_eq!(split_sizes(181, DEFAULT_SPLIT_FRACS).unwrap(), (150, 20, 11));
    }

    #[test]
    fn manifest_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp([1, 2, 2]);
        for i in 0..10 {
            save_volume(&v, &dir.path().join(format!("c{i:02}_t2.nii.gz"))).unwrap();
            save_volume(&v, &dir.path().join(format!("c{i:02}_seg.nii.gz"))).unwrap();
        }
        let m = build_manifest(dir.path(), (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(m.cases.len(), 10);
        assert_eq!((m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)), (6, 2, 2));
        assert_eq!(m, build_manifest(dir.path(), (0.6, 0.2, 0.2), 3).unwrap());
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.cases, m.cases);
        let sample = back.load_case(&back.cases[0]).unwrap();
        assert_eq!(sample.t2.id, "c00");

        std::fs::remove_file(dir.path().join("c04_seg.nii.gz")).unwrap();
        let err = build_manifest(dir.path(), (0.6, 0.2, 0.2), 3).unwrap_err().to_string();
        assert!(err.contains("c04"), "{err}");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_manifest(dir.path(), DEFAULT_SPLIT_FRACS, 0).is_err());
    }
}
