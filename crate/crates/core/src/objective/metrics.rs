use crate::data::PointAnnotation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cell index along one axis of length `n` split into `parts`; remainder
/// pixels go to the last cell.
fn cell_of(i: usize, n: usize, parts: usize) -> usize {
    let size = n / parts;
    if size == 0 {
        parts - 1
    } else {
        (i / size).min(parts - 1)
    }
}

fn parts(level: i64) -> Result<usize> {
    if level < 0 {
        return Err(Error::NegativeLevel(level));
    }
    Ok(1usize << level)
}

/// Density mass per cell of the `2^L x 2^L` grid, row-major.
pub fn cell_counts(density: &Tensor, level: i64) -> Result<Vec<f64>> {
    let n = parts(level)?;
    let (_, h, w) = density.chw();
    let mut out = vec![0.0; n * n];
    for y in 0..h {
        let cy = cell_of(y, h, n);
        for x in 0..w {
            out[cy * n + cell_of(x, w, n)] += density.data()[y * w + x];
        }
    }
    Ok(out)
}

/// Number of points per cell, assigning each point to the pixel that contains it.
pub fn point_cell_counts(points: &[PointAnnotation], h: usize, w: usize, level: i64) -> Result<Vec<f64>> {
    let n = parts(level)?;
    let mut out = vec![0.0; n * n];
    for p in points {
        let y = (p.y.max(0.0) as usize).min(h - 1);
        let x = (p.x.max(0.0) as usize).min(w - 1);
        out[cell_of(y, h, n) * n + cell_of(x, w, n)] += 1.0;
    }
    Ok(out)
}

/// `sum over cells |pred - gt|` for one image.
pub fn game_single(density: &Tensor, points: &[PointAnnotation], level: i64) -> Result<f64> {
    let (_, h, w) = density.chw();
    let p = cell_counts(density, level)?;
    let g = point_cell_counts(points, h, w, level)?;
    Ok(p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum())
}

/// Mean over images of [`game_single`].
pub fn game(densities: &[Tensor], points: &[Vec<PointAnnotation>], level: i64) -> Result<f64> {
    if densities.len() != points.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} annotations", densities.len(), points.len())));
    }
    if densities.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut s = 0.0;
    for (d, p) in densities.iter().zip(points) {
        s += game_single(d, p, level)?;
    }
    Ok(s / densities.len() as f64)
}

fn check_counts(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_counts(pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_counts(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}
