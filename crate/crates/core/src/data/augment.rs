use rand::Rng;

use super::{stage_priors_from_full, PointAnnotation, SamplePair, SoftLabelSet, ViewTransform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn crop_tensor(t: &Tensor, y0: usize, x0: usize, size: usize, flip: bool) -> Tensor {
    let (c, _, w) = t.chw();
    let src = t.data();
    Tensor::from_fn(&[c, size, size], |i| {
        let ch = i / (size * size);
        let r = i % (size * size);
        let (y, x) = (r / size, r % size);
        let sx = if flip { size - 1 - x } else { x };
        src[(ch * t.shape()[1] + y0 + y) * w + x0 + sx]
    })
}

/// Crops the square window at `(y0, x0)` and optionally mirrors it
/// horizontally, applying the same transform to images, points and labels.
pub fn crop_flip(
    pair: &SamplePair,
    labels: &SoftLabelSet,
    y0: usize,
    x0: usize,
    crop: usize,
    flip: bool,
) -> Result<(SamplePair, SoftLabelSet)> {
    let (h, w) = (pair.height(), pair.width());
    if crop == 0 || crop > h.min(w) || y0 + crop > h || x0 + crop > w {
        return Err(Error::CropTooLarge { crop, height: h, width: w });
    }
    if !crop.is_multiple_of(32) {
        return Err(Error::ShapeViolation(format!("crop {crop} is not a multiple of 32")));
    }
    let size = crop as f64;
    let points = pair
        .points
        .iter()
        .filter(|p| p.x >= x0 as f64 && p.x < (x0 + crop) as f64 && p.y >= y0 as f64 && p.y < (y0 + crop) as f64)
        .map(|p| {
            let x = p.x - x0 as f64;
            let y = p.y - y0 as f64;
            let x = if flip {
                // x -> size - x maps pixel j to size-1-j; keep the half-open range
                let m = size - x;
                if m >= size {
                    size.next_down()
                } else {
                    m
                }
            } else {
                x
            };
            PointAnnotation::new(x, y)
        })
        .collect();
    let meta = pair.meta.clone().map(|mut m| {
        let prev = m.view.unwrap_or(ViewTransform { x0: 0, y0: 0, width: w, flipped: false });
        // compose: new frame -> previous frame -> canvas
        let (nx0, nflip) =
            if prev.flipped { (prev.x0 + (prev.width - x0 - crop), !flip) } else { (prev.x0 + x0, flip) };
        m.view = Some(ViewTransform { x0: nx0, y0: prev.y0 + y0, width: crop, flipped: nflip });
        m
    });
    let out = SamplePair {
        id: pair.id.clone(),
        rgb: crop_tensor(&pair.rgb, y0, x0, crop, flip),
        thermal: crop_tensor(&pair.thermal, y0, x0, crop, flip),
        points,
        meta,
    };
    let prior_full = crop_tensor(&labels.prior_full, y0, x0, crop, flip);
    let out_labels = SoftLabelSet {
        density: crop_tensor(&labels.density, y0, x0, crop, flip),
        stage_priors: stage_priors_from_full(&prior_full),
        prior_full,
    };
    Ok((out, out_labels))
}

/// Uniformly placed square crop plus a horizontal flip with probability `flip_p`.
pub fn random_crop_flip(
    pair: &SamplePair,
    labels: &SoftLabelSet,
    crop: usize,
    flip_p: f64,
    rng: &mut impl Rng,
) -> Result<(SamplePair, SoftLabelSet)> {
    let (h, w) = (pair.height(), pair.width());
    if crop > h.min(w) {
        return Err(Error::CropTooLarge { crop, height: h, width: w });
    }
    let y0 = rng.random_range(0..=h - crop);
    let x0 = rng.random_range(0..=w - crop);
    let flip = rng.random_bool(flip_p.clamp(0.0, 1.0));
    crop_flip(pair, labels, y0, x0, crop, flip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, make_soft_labels, SceneSpec, SigmaPolicy};
    use rand::SeedableRng;

    fn sample() -> (SamplePair, SoftLabelSet) {
        let s = generate_scene(&SceneSpec { seed: 5, ..Default::default() }).unwrap();
        let l = make_soft_labels(&s, &SigmaPolicy::default());
        (s, l)
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let (s, l) = sample();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (s2, l2) = random_crop_flip(&s, &l, 128, 0.0, &mut rng).unwrap();
        assert_eq!(s2.rgb, s.rgb);
        assert_eq!(s2.thermal, s.thermal);
        assert_eq!(s2.points, s.points);
        assert_eq!(l2, l);
    }

    #[test]
    fn double_flip_restores_sample() {
        let (s, l) = sample();
        let (a, la) = crop_flip(&s, &l, 32, 0, 64, true).unwrap();
        let (b, lb) = crop_flip(&a, &la, 0, 0, 64, true).unwrap();
        let (c, lc) = crop_flip(&s, &l, 32, 0, 64, false).unwrap();
        assert_eq!(b.rgb, c.rgb);
        assert_eq!(b.thermal, c.thermal);
        assert_eq!(lb, lc);
        assert_eq!(b.points.len(), c.points.len());
        for (p, q) in b.points.iter().zip(&c.points) {
            assert!((p.x - q.x).abs() < 1e-9 && p.y == q.y);
        }
        let (mb, mc) = (b.meta.unwrap(), c.meta.unwrap());
        assert_eq!(mb.shift_at(10.0, 10.0), mc.shift_at(10.0, 10.0));
    }

    #[test]
    fn crop_errors() {
        let (s, l) = sample();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(random_crop_flip(&s, &l, 160, 0.5, &mut rng), Err(Error::CropTooLarge { .. })));
        assert!(crop_flip(&s, &l, 0, 0, 48, false).is_err());
    }

    #[test]
    fn flipped_view_reports_mirrored_shift() {
        let spec = SceneSpec { seed: 3, fixed_shift: Some([4, -4]), ..Default::default() };
        let s = generate_scene(&spec).unwrap();
        let l = make_soft_labels(&s, &SigmaPolicy::default());
        let (f, _) = crop_flip(&s, &l, 0, 32, 64, true).unwrap();
        assert_eq!(f.meta.unwrap().shift_at(5.0, 5.0), [-4, -4]);
    }
}
