//! Synthetic RGB-thermal crowd scenes.
//!
//! People are anisotropic Gaussian blobs: a coloured ellipse composited over a
//! textured RGB background, and a bright blob over a cool thermal background.
//! The thermal person layer is rendered at the RGB position displaced by a
//! piecewise-constant integer shift field. Annotations live in the RGB frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{quantize, ClutterBlob, PointAnnotation, SamplePair, SceneMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Blobs are truncated at this many standard deviations.
const TRUNCATE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonStyle {
    /// Horizontal blob standard deviation range, pixels.
    pub sigma_range: [f64; 2],
    /// Vertical / horizontal sigma ratio range.
    pub aspect_range: [f64; 2],
    /// Peak opacity of the RGB ellipse.
    pub rgb_alpha: f64,
    /// Peak thermal intensity of a person.
    pub thermal_peak: f64,
    /// Mean thermal background intensity.
    pub thermal_background: f64,
}

impl Default for PersonStyle {
    fn default() -> Self {
        Self {
            sigma_range: [1.6, 2.6],
            aspect_range: [1.0, 1.5],
            rgb_alpha: 0.9,
            thermal_peak: 0.9,
            thermal_background: 0.2,
        }
    }
}

/// Low-light RGB: global attenuation to `floor` (brightening slightly to the
/// right) plus sensor noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlluminationSpec {
    pub floor_range: [f64; 2],
    pub noise_std: f64,
}

impl Default for IlluminationSpec {
    fn default() -> Self {
        Self { floor_range: [0.04, 0.12], noise_std: 0.04 }
    }
}

/// Thermal interference: additive noise plus hot non-person blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClutterSpec {
    pub noise_std: f64,
    pub blob_count: [usize; 2],
    pub blob_sigma: [f64; 2],
    pub blob_amplitude: [f64; 2],
}

impl Default for ClutterSpec {
    fn default() -> Self {
        Self { noise_std: 0.12, blob_count: [6, 12], blob_sigma: [1.6, 3.0], blob_amplitude: [0.5, 0.8] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub illumination: Option<IlluminationSpec>,
    pub thermal: Option<ClutterSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// `[height, width]`.
    pub canvas: [usize; 2],
    /// Inclusive person-count range.
    pub count_range: [usize; 2],
    pub person: PersonStyle,
    /// Minimum distance between person centres (the overlap bound).
    pub min_separation: f64,
    pub placement_attempts: usize,
    /// Shift components are drawn from `[-shift_range, shift_range]`...
    pub shift_range: i32,
    /// ...restricted to multiples of `shift_step`.
    pub shift_step: i32,
    /// Shift-field grid `[rows, cols]`; `[1, 1]` is a uniform shift.
    pub shift_regions: [usize; 2],
    /// Overrides the random field with one uniform `[dx, dy]`.
    pub fixed_shift: Option<[i32; 2]>,
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas: [128, 128],
            count_range: [4, 24],
            person: PersonStyle::default(),
            min_separation: 7.0,
            placement_attempts: 5000,
            shift_range: 4,
            shift_step: 4,
            shift_regions: [1, 1],
            fixed_shift: None,
            corruption: CorruptionSpec::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.canvas[0] == 0 || self.canvas[1] == 0 {
            return bad("canvas must be non-empty");
        }
        if self.count_range[0] > self.count_range[1] {
            return bad("count_range must be [min, max] with min <= max");
        }
        let [s0, s1] = self.person.sigma_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad("person.sigma_range must be positive and ordered");
        }
        let [a0, a1] = self.person.aspect_range;
        if !(a0 > 0.0 && a0 <= a1) {
            return bad("person.aspect_range must be positive and ordered");
        }
        if self.shift_range < 0 || self.shift_step <= 0 {
            return bad("shift_range must be >= 0 and shift_step > 0");
        }
        if self.shift_regions[0] == 0 || self.shift_regions[1] == 0 {
            return bad("shift_regions must be at least [1, 1]");
        }
        if self.min_separation < 0.0 {
            return bad("min_separation must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Person {
    pub x: f64,
    pub y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub color: [f64; 3],
}

/// Per-modality person coverage before compositing, `[1, H, W]` each, plus
/// the placed people. Zero outside the truncated blob support.
#[derive(Clone, Debug)]
pub struct SceneLayers {
    pub rgb_person: Tensor,
    pub thermal_person: Tensor,
    pub persons: Vec<Person>,
    pub offsets: Vec<[i32; 2]>,
}

/// Draws everything that depends on the seed, in a fixed order.
struct Draws {
    persons: Vec<Person>,
    offsets: Vec<[i32; 2]>,
    rng: ChaCha8Rng,
}

fn draw_scene(spec: &SceneSpec) -> Result<Draws> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [h, w] = spec.canvas;
    let [c0, c1] = spec.count_range;
    let count = rng.random_range(c0..=c1);

    let mut persons: Vec<Person> = Vec::with_capacity(count);
    let mut attempts = 0;
    while persons.len() < count {
        if attempts >= spec.placement_attempts {
            return Err(Error::PlacementFailure { requested: count, placed: persons.len() });
        }
        attempts += 1;
        let x = rng.random_range(0.5..w as f64 - 0.5);
        let y = rng.random_range(0.5..h as f64 - 0.5);
        let min_sq = spec.min_separation * spec.min_separation;
        if persons.iter().any(|p| (p.x - x).powi(2) + (p.y - y).powi(2) < min_sq) {
            continue;
        }
        let [s0, s1] = spec.person.sigma_range;
        let [a0, a1] = spec.person.aspect_range;
        let sigma_x = if s0 == s1 { s0 } else { rng.random_range(s0..s1) };
        let aspect = if a0 == a1 { a0 } else { rng.random_range(a0..a1) };
        let hue = rng.random_range(0.0..6.0);
        persons.push(Person { x, y, sigma_x, sigma_y: sigma_x * aspect, color: hue_color(hue) });
    }

    let regions = spec.shift_regions[0] * spec.shift_regions[1];
    let offsets = match spec.fixed_shift {
        Some(s) => vec![s; regions],
        None => {
            let steps = spec.shift_range / spec.shift_step;
            (0..regions)
                .map(|_| {
                    [
                        rng.random_range(-steps..=steps) * spec.shift_step,
                        rng.random_range(-steps..=steps) * spec.shift_step,
                    ]
                })
                .collect()
        }
    };
    Ok(Draws { persons, offsets, rng })
}

fn hue_color(h: f64) -> [f64; 3] {
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    // keep away from pure black/white so people contrast with any background
    [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
}

/// Visits the truncated support of an anisotropic blob centred at `(cx, cy)`,
/// calling `f(index, value)` with value in `(0, 1]`.
fn blob(h: usize, w: usize, cx: f64, cy: f64, sx: f64, sy: f64, mut f: impl FnMut(usize, f64)) {
    let y0 = (cy - TRUNCATE * sy).floor().max(0.0) as usize;
    let y1 = ((cy + TRUNCATE * sy).ceil().max(0.0) as usize).min(h);
    let x0 = (cx - TRUNCATE * sx).floor().max(0.0) as usize;
    let x1 = ((cx + TRUNCATE * sx).ceil().max(0.0) as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = (x as f64 + 0.5 - cx) / sx;
            let dy = (y as f64 + 0.5 - cy) / sy;
            let r2 = dx * dx + dy * dy;
            if r2 <= TRUNCATE * TRUNCATE {
                f(y * w + x, (-0.5 * r2).exp());
            }
        }
    }
}

fn person_layers(spec: &SceneSpec, draws: &Draws, meta: &SceneMeta) -> (Vec<f64>, Vec<f64>) {
    let [h, w] = spec.canvas;
    let mut rgb = vec![0.0; h * w];
    let mut th = vec![0.0; h * w];
    for p in &draws.persons {
        blob(h, w, p.x, p.y, p.sigma_x, p.sigma_y, |i, v| rgb[i] = f64::max(rgb[i], v));
        let [dx, dy] = draws.offsets[meta.region_of(p.x, p.y)];
        blob(h, w, p.x + dx as f64, p.y + dy as f64, p.sigma_x, p.sigma_y, |i, v| th[i] = f64::max(th[i], v));
    }
    (rgb, th)
}

fn base_meta(spec: &SceneSpec, offsets: Vec<[i32; 2]>) -> SceneMeta {
    SceneMeta {
        seed: spec.seed,
        canvas: spec.canvas,
        regions: spec.shift_regions,
        offsets,
        illumination_floor: None,
        rgb_noise_std: 0.0,
        thermal_noise_std: 0.0,
        clutter: Vec::new(),
        view: None,
    }
}

/// The uncomposited person layers of a scene (for geometry checks).
pub fn render_layers(spec: &SceneSpec) -> Result<SceneLayers> {
    let draws = draw_scene(spec)?;
    let meta = base_meta(spec, draws.offsets.clone());
    let (rgb, th) = person_layers(spec, &draws, &meta);
    let [h, w] = spec.canvas;
    Ok(SceneLayers {
        rgb_person: Tensor::from_parts(vec![1, h, w], rgb),
        thermal_person: Tensor::from_parts(vec![1, h, w], th),
        persons: draws.persons,
        offsets: draws.offsets,
    })
}

/// Renders one sample. A pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SamplePair> {
    let mut draws = draw_scene(spec)?;
    let [h, w] = spec.canvas;
    let mut meta = base_meta(spec, draws.offsets.clone());
    let rng = &mut draws.rng;

    // Textured background: base colour plus two oriented low-frequency waves.
    let base: [f64; 3] = [rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let mut rgb = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut v = base[c];
                for (k, &(fx, fy, ph, amp)) in waves.iter().enumerate() {
                    let phase = ph + c as f64 * 0.7 + k as f64;
                    v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                rgb[(c * h + y) * w + x] = v;
            }
        }
    }
    let tb = spec.person.thermal_background;
    let mut thermal = vec![0.0; h * w];
    let tphase = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            thermal[y * w + x] = tb + 0.02 * (0.05 * x as f64 + 0.03 * y as f64 + tphase).sin();
        }
    }

    // People.
    let hw = h * w;
    for p in &draws.persons {
        let alpha = spec.person.rgb_alpha;
        blob(h, w, p.x, p.y, p.sigma_x, p.sigma_y, |i, v| {
            let a = alpha * v;
            for c in 0..3 {
                rgb[c * hw + i] = rgb[c * hw + i] * (1.0 - a) + p.color[c] * a;
            }
        });
        let [dx, dy] = draws.offsets[meta.region_of(p.x, p.y)];
        let peak = spec.person.thermal_peak;
        blob(h, w, p.x + dx as f64, p.y + dy as f64, p.sigma_x, p.sigma_y, |i, v| {
            let target = tb + (peak - tb) * v;
            thermal[i] = thermal[i].max(target);
        });
    }

    // Corruptions.
    if let Some(ill) = &spec.corruption.illumination {
        let [f0, f1] = ill.floor_range;
        let floor = if f0 == f1 { f0 } else { rng.random_range(f0..f1) };
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let gain = (floor * (1.0 + 0.5 * x as f64 / w as f64)).min(1.0);
                    let i = (c * h + y) * w + x;
                    rgb[i] = rgb[i] * gain + ill.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        meta.illumination_floor = Some(floor);
        meta.rgb_noise_std = ill.noise_std;
    }
    if let Some(cl) = &spec.corruption.thermal {
        let n = rng.random_range(cl.blob_count[0]..=cl.blob_count[1]);
        for _ in 0..n {
            let b = ClutterBlob {
                x: rng.random_range(0.0..w as f64),
                y: rng.random_range(0.0..h as f64),
                sigma: rng.random_range(cl.blob_sigma[0]..=cl.blob_sigma[1]),
                amplitude: rng.random_range(cl.blob_amplitude[0]..=cl.blob_amplitude[1]),
            };
            blob(h, w, b.x, b.y, b.sigma, b.sigma, |i, v| {
                thermal[i] = thermal[i].max(tb + (b.amplitude - tb) * v);
            });
            meta.clutter.push(b);
        }
        for v in thermal.iter_mut() {
            *v += cl.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        meta.thermal_noise_std = cl.noise_std;
    }

    let rgb = Tensor::from_parts(vec![3, h, w], rgb.into_iter().map(quantize).collect());
    let thermal = Tensor::from_parts(vec![1, h, w], thermal.into_iter().map(quantize).collect());
    let points = draws.persons.iter().map(|p| PointAnnotation::new(p.x, p.y)).collect();
    SamplePair::new(format!("scene{:06}", spec.seed), rgb, thermal, points, Some(meta))
}
