//! Static heatmaps of routing histograms.

use std::path::Path;

use gmoe_core::telemetry::ExpertHistogram;
use image::{Rgb, RgbImage};

pub const CELL: u32 = 24;
pub const GAP: u32 = 8;

/// Piecewise-linear approximation of a perceptually ordered dark-to-light
/// colormap; `t` is clamped to `[0, 1]`.
pub fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// One panel per layer, stacked top to bottom: rows are attributes, columns
/// experts, colour the row-normalized share of that attribute's tokens.
pub fn render_heatmap(hists: &[ExpertHistogram]) -> Option<RgbImage> {
    let width = hists.iter().map(|h| h.experts()).max()? as u32 * CELL;
    let height = hists.iter().map(|h| h.attributes() as u32 * CELL).sum::<u32>() + GAP * (hists.len() as u32).saturating_sub(1);
    if width == 0 || height == 0 {
        return None;
    }
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut top = 0;
    for h in hists {
        for (r, row) in h.counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            for (e, &c) in row.iter().enumerate() {
                let share = if total == 0 { 0.0 } else { c as f64 / total as f64 };
                let color = colormap(share);
                for y in 0..CELL {
                    for x in 0..CELL {
                        img.put_pixel(e as u32 * CELL + x, top + r as u32 * CELL + y, color);
                    }
                }
            }
        }
        top += h.attributes() as u32 * CELL + GAP;
    }
    Some(img)
}

pub fn write_heatmap(hists: &[ExpertHistogram], path: &Path) -> Result<(), PlotError> {
    let img = render_heatmap(hists).ok_or(PlotError::Empty)?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("report holds no histogram cells")]
    Empty,
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
