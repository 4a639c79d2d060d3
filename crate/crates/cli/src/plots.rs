//! Static SVG line plots and PNG slice montages.

use std::path::Path;

use anyhow::{anyhow, bail, Result};
use image::{GrayImage, Luma};
use plotters::prelude::*;

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
        }
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Line chart with one line (and markers) per series.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let all = || series.iter().flat_map(|s| s.points.iter());
    if all().next().is_none() {
        bail!("nothing to plot for {}", path.display());
    }
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(s.label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| anyhow!("{e}"))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

/// One grayscale panel with values in `[0, 1]`.
pub struct Panel {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

/// Writes a grid of equally sized panels (`rows[r][c]`), each upscaled by
/// `scale`, separated by 2-pixel gaps.
pub fn montage(path: &Path, rows: &[Vec<Panel>], scale: usize) -> Result<()> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| anyhow!("empty montage"))?;
    let (h, w) = (first.h, first.w);
    let cols = rows[0].len();
    if rows.iter().flatten().any(|p| p.h != h || p.w != w || p.data.len() != h * w) || rows.iter().any(|r| r.len() != cols) {
        bail!("montage panels must share one shape");
    }
    let gap = 2;
    let (ph, pw) = (h * scale, w * scale);
    let width = cols * pw + (cols - 1) * gap;
    let height = rows.len() * ph + (rows.len() - 1) * gap;
    let mut img = GrayImage::from_pixel(width as u32, height as u32, Luma([255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let (oy, ox) = (r * (ph + gap), c * (pw + gap));
            for y in 0..ph {
                for x in 0..pw {
                    let v = panel.data[(y / scale) * w + x / scale].clamp(0.0, 1.0);
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([(v * 255.0).round() as u8]));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn montage_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let panel = || Panel {
            h: 4,
            w: 6,
            data: vec![0.5; 24],
        };
        montage(&p, &[vec![panel(), panel()], vec![panel(), panel()]], 3).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (2 * 18 + 2, 2 * 12 + 2));
        assert!(montage(&p, &[], 1).is_err());
    }

    #[test]
    fn line_plot_writes_svg() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.svg");
        line_plot(&p, "t", "x", "y", &[Series::new("a", vec![(0.0, 1.0), (1.0, 0.5)])]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("<svg"));
        assert!(line_plot(&p, "t", "x", "y", &[]).is_err());
    }
}
