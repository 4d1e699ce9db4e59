//! Minimal chart rendering straight into PNG buffers: ROC/PR curves and
//! per-stratum bar charts for the evaluation reports.

use cxrgen_core::error::{Error, Result};
use image::{Rgb, RgbImage};
use std::path::Path;

const W: u32 = 480;
const H: u32 = 360;
const MARGIN: u32 = 40;

fn blank() -> RgbImage {
    RgbImage::from_pixel(W, H, Rgb([255, 255, 255]))
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as u32).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn axes(img: &mut RgbImage) {
    let black = Rgb([0, 0, 0]);
    let (m, w, h) = (MARGIN as f64, W as f64, H as f64);
    draw_line(img, m, h - m, w - m, h - m, black);
    draw_line(img, m, m, m, h - m, black);
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    let (m, w, h) = (MARGIN as f64, W as f64, H as f64);
    (m + x * (w - 2.0 * m), h - m - y * (h - 2.0 * m))
}

/// Polyline over unit-square coordinates.
fn curve(img: &mut RgbImage, points: &[(f64, f64)], color: Rgb<u8>) {
    for pair in points.windows(2) {
        let (x0, y0) = to_px(pair[0].0, pair[0].1);
        let (x1, y1) = to_px(pair[1].0, pair[1].1);
        draw_line(img, x0, y0, x1, y1, color);
    }
}

/// ROC curve points from scores/labels (FPR, TPR), threshold-descending.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        pts.push((fp / n_neg, tp / n_pos));
        i = j + 1;
    }
    pts
}

/// Precision-recall points, threshold-descending.
pub fn pr_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut pts = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        pts.push((tp / n_pos, tp / (tp + fp)));
        i = j + 1;
    }
    pts
}

pub fn save_curves(
    path: &Path,
    series: &[(&str, Vec<(f64, f64)>)],
    diagonal: bool,
) -> Result<()> {
    let mut img = blank();
    axes(&mut img);
    if diagonal {
        let (x0, y0) = to_px(0.0, 0.0);
        let (x1, y1) = to_px(1.0, 1.0);
        draw_line(&mut img, x0, y0, x1, y1, Rgb([200, 200, 200]));
    }
    let palette = [
        Rgb([31, 119, 180]),
        Rgb([255, 127, 14]),
        Rgb([44, 160, 44]),
        Rgb([214, 39, 40]),
    ];
    for (i, (_, pts)) in series.iter().enumerate() {
        curve(&mut img, pts, palette[i % palette.len()]);
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Grouped bar chart over strata; values in [0, 1].
pub fn save_stratum_bars(path: &Path, strata: &[String], groups: &[(&str, Vec<Option<f64>>)]) -> Result<()> {
    let mut img = blank();
    axes(&mut img);
    let n = strata.len().max(1);
    let g = groups.len().max(1);
    let palette = [Rgb([31, 119, 180]), Rgb([255, 127, 14]), Rgb([44, 160, 44])];
    let band = 1.0 / n as f64;
    for (si, _) in strata.iter().enumerate() {
        for (gi, (_, values)) in groups.iter().enumerate() {
            let Some(v) = values.get(si).copied().flatten() else {
                continue;
            };
            let x0 = si as f64 * band + (gi as f64 + 0.5) * band / (g as f64 + 1.0);
            let width = band / (g as f64 + 1.0) * 0.8;
            let (px0, py0) = to_px(x0, 0.0);
            let (px1, py1) = to_px(x0 + width, v.clamp(0.0, 1.0));
            for x in px0 as u32..=(px1 as u32).min(W - 1) {
                for y in py1 as u32..=(py0 as u32).min(H - 1) {
                    img.put_pixel(x, y, palette[gi % palette.len()]);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
