//! Soft labels: the ground-truth density map and the per-stage crowd priors.

use serde::{Deserialize, Serialize};

use super::{stage_stride, PointAnnotation, SamplePair, NUM_STAGES};
use crate::tensor::Tensor;

/// Geometry-adaptive kernel width:
/// `sigma_i = clamp(beta * mean distance to the k nearest neighbours)`,
/// with a fixed fallback when there are too few points for `k` neighbours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaPolicy {
    pub beta: f64,
    pub neighbors: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub fallback: f64,
    /// Use this width for every point instead.
    pub fixed: Option<f64>,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        Self { beta: 0.3, neighbors: 3, sigma_min: 2.0, sigma_max: 15.0, fallback: 4.0, fixed: None }
    }
}

impl SigmaPolicy {
    pub fn fixed(sigma: f64) -> Self {
        Self { fixed: Some(sigma), ..Self::default() }
    }

    pub fn sigmas(&self, points: &[PointAnnotation]) -> Vec<f64> {
        if let Some(s) = self.fixed {
            return vec![s; points.len()];
        }
        if points.len() <= self.neighbors {
            return vec![self.fallback; points.len()];
        }
        points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut d: Vec<f64> = points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt())
                    .collect();
                d.sort_by(f64::total_cmp);
                let mean = d[..self.neighbors].iter().sum::<f64>() / self.neighbors as f64;
                (self.beta * mean).clamp(self.sigma_min, self.sigma_max)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelSet {
    /// `[1, H, W]`, one unit of mass per annotated point.
    pub density: Tensor,
    /// Full-resolution crowd mask in `[0, 1]`; the stage priors are its
    /// average-pooled versions.
    pub prior_full: Tensor,
    /// `P~^l` for l = 1..4, each `[1, H/2^(l+1), W/2^(l+1)]`.
    pub stage_priors: Vec<Tensor>,
}

impl SoftLabelSet {
    pub fn stage_prior(&self, l: usize) -> &Tensor {
        &self.stage_priors[l - 1]
    }
}

/// Gaussian weight of pixel `(px, py)` for a kernel centred at `(x, y)`.
fn pixel_gauss(px: usize, py: usize, x: f64, y: f64, sigma: f64) -> f64 {
    let dx = px as f64 + 0.5 - x;
    let dy = py as f64 + 0.5 - y;
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Density map with one normalized Gaussian per point, truncated at 3 sigma
/// and renormalized inside the image.
fn density_map(points: &[PointAnnotation], sigmas: &[f64], h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; h * w];
    let mut kernel = Vec::new();
    for (p, &s) in points.iter().zip(sigmas) {
        let r = (3.0 * s).ceil();
        let y0 = (p.y - r).floor().max(0.0) as usize;
        let y1 = ((p.y + r).ceil() as usize).min(h);
        let x0 = (p.x - r).floor().max(0.0) as usize;
        let x1 = ((p.x + r).ceil() as usize).min(w);
        kernel.clear();
        for y in y0..y1 {
            for x in x0..x1 {
                kernel.push(pixel_gauss(x, y, p.x, p.y, s));
            }
        }
        let total: f64 = kernel.iter().sum();
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                out[y * w + x] += kernel[k] / total;
                k += 1;
            }
        }
    }
    Tensor::from_parts(vec![1, h, w], out)
}

/// Binary disc mask of radius `sigma_i` around each point, blurred with a
/// normalized 3-tap Gaussian and clamped to `[0, 1]`.
fn prior_mask(points: &[PointAnnotation], sigmas: &[f64], h: usize, w: usize) -> Tensor {
    let mut mask = vec![0.0; h * w];
    for (p, &s) in points.iter().zip(sigmas) {
        let y0 = (p.y - s).floor().max(0.0) as usize;
        let y1 = ((p.y + s).ceil() as usize).min(h);
        let x0 = (p.x - s).floor().max(0.0) as usize;
        let x1 = ((p.x + s).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - p.x;
                let dy = y as f64 + 0.5 - p.y;
                if dx * dx + dy * dy <= s * s {
                    mask[y * w + x] = 1.0;
                }
            }
        }
        // the pixel holding the annotation is always crowd
        mask[(p.y as usize).min(h - 1) * w + (p.x as usize).min(w - 1)] = 1.0;
    }
    let side = (-0.5f64).exp();
    let taps = [side, 1.0, side];
    let blur_1d = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &t) in taps.iter().enumerate() {
                    let (yy, xx) = if horizontal {
                        (y as i64, x as i64 + k as i64 - 1)
                    } else {
                        (y as i64 + k as i64 - 1, x as i64)
                    };
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    acc += t * src[yy as usize * w + xx as usize];
                    norm += t;
                }
                dst[y * w + x] = acc / norm;
            }
        }
        dst
    };
    let blurred = blur_1d(&blur_1d(&mask, true), false);
    Tensor::from_parts(vec![1, h, w], blurred.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

fn avg_pool(t: &Tensor, k: usize) -> Tensor {
    let (_, h, w) = t.chw();
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh * k {
        for x in 0..ow * k {
            out[(y / k) * ow + x / k] += t.data()[y * w + x];
        }
    }
    let n = (k * k) as f64;
    Tensor::from_parts(vec![1, oh, ow], out.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect())
}

/// Average-pools a full-resolution prior mask to every stage resolution.
pub fn stage_priors_from_full(prior_full: &Tensor) -> Vec<Tensor> {
    (1..=NUM_STAGES).map(|l| avg_pool(prior_full, stage_stride(l))).collect()
}

pub fn make_soft_labels(pair: &SamplePair, policy: &SigmaPolicy) -> SoftLabelSet {
    let (h, w) = (pair.height(), pair.width());
    let sigmas = policy.sigmas(&pair.points);
    let density = density_map(&pair.points, &sigmas, h, w);
    let prior_full = prior_mask(&pair.points, &sigmas, h, w);
    let stage_priors = stage_priors_from_full(&prior_full);
    SoftLabelSet { density, prior_full, stage_priors }
}

/// One unit at the pixel containing each point.
pub fn dot_map(points: &[PointAnnotation], h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; h * w];
    for p in points {
        out[(p.y as usize).min(h - 1) * w + (p.x as usize).min(w - 1)] += 1.0;
    }
    Tensor::from_parts(vec![1, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_with(points: Vec<PointAnnotation>, h: usize, w: usize) -> SamplePair {
        SamplePair::new("t", Tensor::zeros(&[3, h, w]), Tensor::zeros(&[1, h, w]), points, None).unwrap()
    }

    #[test]
    fn empty_points_give_zero_labels() {
        let l = make_soft_labels(&pair_with(vec![], 64, 64), &SigmaPolicy::default());
        assert_eq!(l.density.sum(), 0.0);
        assert!(l.stage_priors.iter().all(|p| p.max() == 0.0));
        assert_eq!(l.stage_priors[0].shape(), &[1, 16, 16]);
        assert_eq!(l.stage_priors[3].shape(), &[1, 2, 2]);
    }

    #[test]
    fn single_centre_point_has_unit_mass() {
        let l = make_soft_labels(&pair_with(vec![PointAnnotation::new(32.0, 32.0)], 64, 64), &SigmaPolicy::fixed(4.0));
        assert!((l.density.sum() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn corner_point_mass_is_renormalized() {
        let l = make_soft_labels(&pair_with(vec![PointAnnotation::new(0.2, 63.9)], 64, 64), &SigmaPolicy::fixed(6.0));
        assert!((l.density.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adaptive_sigma_uses_neighbours_and_clamps() {
        let pts: Vec<_> = (0..5).map(|i| PointAnnotation::new(10.0 * i as f64 + 1.0, 5.0)).collect();
        let s = SigmaPolicy::default().sigmas(&pts);
        // point 0: neighbours at 10, 20, 30 -> mean 20 -> 6.0
        assert!((s[0] - 6.0).abs() < 1e-12);
        // point 2: neighbours at 10, 10, 20 -> mean 40/3 -> 4.0
        assert!((s[2] - 4.0).abs() < 1e-12);
        let far: Vec<_> = (0..4).map(|i| PointAnnotation::new(100.0 * i as f64, 0.0)).collect();
        assert!(SigmaPolicy::default().sigmas(&far).iter().all(|&v| v == 15.0));
        assert_eq!(SigmaPolicy::default().sigmas(&far[..3]), vec![4.0; 3]);
    }
}
