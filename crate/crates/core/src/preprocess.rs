//! Cropping, intensity normalisation and local attention map construction.

use crate::data::{BinaryMask, Volume};
use crate::error::{Error, Result};

/// Binary mask obtained by dilating a segmentation slice-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub mask: BinaryMask,
    pub radius: usize,
}

/// Attention mask multiplied voxel-wise with the T2 volume.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub data: Vec<f32>,
    pub shape: [usize; 3],
    pub radius: usize,
}

impl AttentionMap {
    pub fn to_volume(&self, id: impl Into<String>, spacing: [f32; 3]) -> Volume {
        Volume {
            data: self.data.clone(),
            shape: self.shape,
            spacing,
            id: id.into(),
        }
    }
}

/// Row/column offsets of a centred `target` window inside `source`. With an
/// odd margin the extra pixel is dropped from the high-index side.
pub fn crop_offsets(source: (usize, usize), target: (usize, usize)) -> Result<(usize, usize)> {
    if target.0 > source.0 || target.1 > source.1 || target.0 == 0 || target.1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {}x{} to {}x{}",
            source.0, source.1, target.0, target.1
        )));
    }
    Ok(((source.0 - target.0) / 2, (source.1 - target.1) / 2))
}

/// Centre-crops every slice to `target_hw`.
pub fn center_crop(v: &Volume, target_hw: (usize, usize)) -> Result<Volume> {
    let [d, h, w] = v.shape;
    let (oy, ox) = crop_offsets((h, w), target_hw)?;
    let (th, tw) = target_hw;
    let mut data = Vec::with_capacity(d * th * tw);
    for z in 0..d {
        let slice = v.slice(z);
        for y in oy..oy + th {
            data.extend_from_slice(&slice[y * w + ox..y * w + ox + tw]);
        }
    }
    Ok(Volume {
        data,
        shape: [d, th, tw],
        spacing: v.spacing,
        id: v.id.clone(),
    })
}

/// Centre-crops a mask the same way as [`center_crop`].
pub fn center_crop_mask(m: &BinaryMask, target_hw: (usize, usize)) -> Result<BinaryMask> {
    let [d, h, w] = m.shape;
    let (oy, ox) = crop_offsets((h, w), target_hw)?;
    let (th, tw) = target_hw;
    let mut data = Vec::with_capacity(d * th * tw);
    for z in 0..d {
        let slice = &m.data[z * h * w..(z + 1) * h * w];
        for y in oy..oy + th {
            data.extend_from_slice(&slice[y * w + ox..y * w + ox + tw]);
        }
    }
    Ok(BinaryMask {
        data,
        shape: [d, th, tw],
        spacing: m.spacing,
    })
}

/// Per-volume min-max scaling to `[0, 1]`; constant volumes become zero.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("voxel {i} of volume {}", v.id)));
    }
    let (lo, hi) = v
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let data = if range > 0.0 {
        v.data.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Ok(Volume {
        data,
        shape: v.shape,
        spacing: v.spacing,
        id: v.id.clone(),
    })
}

/// One-dimensional binary max filter of half-width `r` over a strided line.
fn dilate_line(src: &[u8], dst: &mut [u8], len: usize, stride: usize, offset: usize, r: usize) {
    // prefix[i] = number of set pixels among the first i samples
    let mut prefix = Vec::with_capacity(len + 1);
    prefix.push(0u32);
    let mut acc = 0u32;
    for i in 0..len {
        acc += u32::from(src[offset + i * stride] != 0);
        prefix.push(acc);
    }
    for i in 0..len {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(len);
        dst[offset + i * stride] = u8::from(prefix[hi] > prefix[lo]);
    }
}

/// Square (Chebyshev) dilation of radius `r` applied to each `h x w` plane of
/// `data` independently.
pub fn dilate_planes(data: &[u8], h: usize, w: usize, r: usize) -> Vec<u8> {
    if r == 0 {
        return data.iter().map(|&v| u8::from(v != 0)).collect();
    }
    let plane = h * w;
    let mut rows = vec![0u8; data.len()];
    let mut out = vec![0u8; data.len()];
    for p in 0..data.len() / plane {
        let base = p * plane;
        for y in 0..h {
            dilate_line(data, &mut rows, w, 1, base + y * w, r);
        }
        for x in 0..w {
            dilate_line(&rows, &mut out, h, w, base + x, r);
        }
    }
    out
}

/// Slice-wise dilation with a `(2r + 1)^2` square structuring element.
pub fn dilate_mask(seg: &BinaryMask, radius: i64) -> Result<AttentionMask> {
    if radius < 0 {
        return Err(Error::InvalidArgument(format!("negative dilation radius {radius}")));
    }
    let [_, h, w] = seg.shape;
    Ok(AttentionMask {
        mask: BinaryMask {
            data: dilate_planes(&seg.data, h, w, radius as usize),
            shape: seg.shape,
            spacing: seg.spacing,
        },
        radius: radius as usize,
    })
}

/// `dilate(seg, radius) * t2` voxel-wise.
pub fn make_attention_map(t2: &Volume, seg: &BinaryMask, radius: i64) -> Result<AttentionMap> {
    if t2.shape != seg.shape {
        return Err(Error::shape(format!("{:?}", t2.shape), format!("{:?}", seg.shape)));
    }
    let mask = dilate_mask(seg, radius)?;
    let data = t2
        .data
        .iter()
        .zip(&mask.mask.data)
        .map(|(&v, &m)| if m != 0 { v } else { 0.0 })
        .collect();
    Ok(AttentionMap {
        data,
        shape: t2.shape,
        radius: mask.radius,
    })
}

/// Fraction of voxels inside the mask.
pub fn mask_coverage(mask: &AttentionMask) -> f64 {
    let total = mask.mask.data.len();
    if total == 0 {
        return 0.0;
    }
    mask.mask.count() as f64 / total as f64
}
