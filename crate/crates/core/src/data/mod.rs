//! Paired RGB-thermal samples: synthesis, soft labels, augmentation and
//! on-disk persistence.

mod augment;
mod io;
mod labels;
mod scene;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{crop_flip, random_crop_flip};
pub use io::{read_dataset, read_sample, write_dataset, write_sample};
pub use labels::{dot_map, make_soft_labels, stage_priors_from_full, SigmaPolicy, SoftLabelSet};
pub use scene::{
    generate_scene, render_layers, ClutterSpec, CorruptionSpec, IlluminationSpec, PersonStyle, SceneLayers, SceneSpec,
};

/// Number of pyramid stages; stage `l` (1-based) has stride `2^(l+1)`.
pub const NUM_STAGES: usize = 4;

/// Stride of stage `l` in `1..=4`.
pub fn stage_stride(l: usize) -> usize {
    1 << (l + 1)
}

/// A point annotation in pixel coordinates; pixel `(j, i)` covers
/// `[j, j+1) x [i, i+1)`. Serialized as `[x, y]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
}

impl PointAnnotation {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }
}

impl From<[f64; 2]> for PointAnnotation {
    fn from(v: [f64; 2]) -> Self {
        Self { x: v[0], y: v[1] }
    }
}

impl From<PointAnnotation> for [f64; 2] {
    fn from(p: PointAnnotation) -> Self {
        [p.x, p.y]
    }
}

/// Crop/flip applied to a synthetic sample after generation, so the
/// recorded shift field can still be queried in the sample's own frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClutterBlob {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Ground truth recorded by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    /// Canvas `[height, width]` the scene was rendered on.
    pub canvas: [usize; 2],
    /// Shift-field grid `[rows, cols]`.
    pub regions: [usize; 2],
    /// Thermal displacement `[dx, dy]` in pixels per region, row-major.
    pub offsets: Vec<[i32; 2]>,
    /// Global RGB attenuation floor, when the illumination corruption is on.
    pub illumination_floor: Option<f64>,
    pub rgb_noise_std: f64,
    pub thermal_noise_std: f64,
    pub clutter: Vec<ClutterBlob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<ViewTransform>,
}

impl SceneMeta {
    pub fn is_dark(&self) -> bool {
        self.illumination_floor.is_some()
    }

    pub fn has_thermal_clutter(&self) -> bool {
        !self.clutter.is_empty() || self.thermal_noise_std > 0.0
    }

    /// Region index of a canvas-frame position.
    pub fn region_of(&self, x: f64, y: f64) -> usize {
        let [h, w] = self.canvas;
        let [rows, cols] = self.regions;
        let r = ((y.max(0.0) * rows as f64 / h as f64) as usize).min(rows - 1);
        let c = ((x.max(0.0) * cols as f64 / w as f64) as usize).min(cols - 1);
        r * cols + c
    }

    /// True thermal displacement `[dx, dy]` at a position in the sample's
    /// current frame (after any recorded crop/flip).
    pub fn shift_at(&self, x: f64, y: f64) -> [i32; 2] {
        let (cx, cy, flipped) = match self.view {
            Some(v) => {
                let fx = if v.flipped { v.width as f64 - x } else { x };
                (fx + v.x0 as f64, y + v.y0 as f64, v.flipped)
            }
            None => (x, y, false),
        };
        let [dx, dy] = self.offsets[self.region_of(cx, cy)];
        if flipped {
            [-dx, dy]
        } else {
            [dx, dy]
        }
    }
}

/// One RGB-thermal training/evaluation unit. Images are `[C, H, W]` with
/// intensities on the 8-bit grid `k / 255`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub rgb: Tensor,
    pub thermal: Tensor,
    pub points: Vec<PointAnnotation>,
    pub meta: Option<SceneMeta>,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        rgb: Tensor,
        thermal: Tensor,
        points: Vec<PointAnnotation>,
        meta: Option<SceneMeta>,
    ) -> Result<Self> {
        let s = Self { id: id.into(), rgb, thermal, points, meta };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.rgb.shape().len() != 3 || self.rgb.shape()[0] != 3 {
            return Err(Error::ShapeViolation(format!("rgb must be [3, H, W], got {:?}", self.rgb.shape())));
        }
        let (h, w) = (self.height(), self.width());
        if self.thermal.shape() != [1, h, w] {
            return Err(Error::ShapeViolation(format!(
                "thermal {:?} does not match rgb {:?}",
                self.thermal.shape(),
                self.rgb.shape()
            )));
        }
        if let Some(p) = self.points.iter().find(|p| !p.in_bounds(h, w)) {
            return Err(Error::ShapeViolation(format!("point {p:?} outside {h}x{w}")));
        }
        Ok(())
    }

    /// Errors unless both sides are multiples of 32.
    pub fn ensure_stage_aligned(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::ShapeViolation(format!("input {h}x{w} is not a multiple of 32")));
        }
        Ok(())
    }
}

/// Quantize to the 8-bit grid used by the PNG format.
pub(crate) fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
