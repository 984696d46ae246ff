//! Dual-branch four-stage convolutional pyramid and the per-stage 1x1
//! projections into the matching space.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::data::NUM_STAGES;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Thermal,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Thermal];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Thermal => 1,
        }
    }
}

/// conv -> norm -> GELU
#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvUnit {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, groups: usize) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), cin, cout, 3, stride),
            norm: GroupNorm::new(format!("{name}.norm"), cout, groups),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng, 2f64.sqrt(), 0.0);
        self.norm.init(store);
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.norm.forward(g, store, y);
        g.gelu(y)
    }
}

#[derive(Clone, Debug)]
struct Branch {
    /// Per stage: the units applied in order (stage 1 carries an extra stride-2 stem).
    stages: Vec<Vec<ConvUnit>>,
}

impl Branch {
    fn new(m: Modality, channels: &[usize; NUM_STAGES], groups: usize) -> Self {
        let p = format!("backbone.{}", m.tag());
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = m.in_channels();
        for (l, &c) in channels.iter().enumerate() {
            let s = format!("{p}.s{}", l + 1);
            let mut units = Vec::new();
            if l == 0 {
                units.push(ConvUnit::new(&format!("{s}.stem"), cin, c, 2, groups));
                cin = c;
            }
            units.push(ConvUnit::new(&format!("{s}.down"), cin, c, 2, groups));
            units.push(ConvUnit::new(&format!("{s}.body"), c, c, 1, groups));
            stages.push(units);
            cin = c;
        }
        Self { stages }
    }
}

/// Backbone plus projections. `F^l` has `channels[l-1]` channels at stride
/// `2^(l+1)`; `Q^l` has `dims[l-1]`.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub channels: [usize; NUM_STAGES],
    pub dims: [usize; NUM_STAGES],
    branches: [Branch; 2],
    proj: [Vec<Conv2d>; 2],
}

impl Backbone {
    pub fn new(channels: [usize; NUM_STAGES], dims: [usize; NUM_STAGES], groups: usize) -> Self {
        let branches = Modality::BOTH.map(|m| Branch::new(m, &channels, groups));
        let proj = Modality::BOTH.map(|m| {
            (0..NUM_STAGES)
                .map(|l| Conv2d::new(format!("proj.{}.{}", m.tag(), l + 1), channels[l], dims[l], 1, 1).without_bias())
                .collect()
        });
        Self { channels, dims, branches, proj }
    }

    fn idx(m: Modality) -> usize {
        match m {
            Modality::Rgb => 0,
            Modality::Thermal => 1,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for b in &self.branches {
            b.stages.iter().flatten().for_each(|u| u.init(store, rng));
        }
        for p in self.proj.iter().flatten() {
            p.init(store, rng, 1.0, 0.0);
        }
    }

    /// Runs one branch on a `[C, H, W]` image, returning `F^1..F^4`.
    pub fn extract_branch(&self, g: &mut Graph, store: &ParamStore, m: Modality, x: Var) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(x).chw();
        if c != m.in_channels() {
            return Err(Error::ShapeViolation(format!("{} input has {c} channels", m.tag())));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::ShapeViolation(format!("input {h}x{w} is not a multiple of 32")));
        }
        let mut x = x;
        let mut out = Vec::with_capacity(NUM_STAGES);
        for units in &self.branches[Self::idx(m)].stages {
            for u in units {
                x = u.forward(g, store, x);
            }
            out.push(x);
        }
        Ok(out)
    }

    pub fn extract(&self, g: &mut Graph, store: &ParamStore, rgb: Var, thermal: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let fr = self.extract_branch(g, store, Modality::Rgb, rgb)?;
        let ft = self.extract_branch(g, store, Modality::Thermal, thermal)?;
        Ok((fr, ft))
    }

    /// `Q^l = W^l(F^l)` for one modality; `l` is 1-based.
    pub fn project_one(&self, g: &mut Graph, store: &ParamStore, m: Modality, l: usize, f: Var) -> Var {
        self.proj[Self::idx(m)][l - 1].forward(g, store, f)
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, l: usize, fr: Var, ft: Var) -> (Var, Var) {
        (self.project_one(g, store, Modality::Rgb, l, fr), self.project_one(g, store, Modality::Thermal, l, ft))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, rand_tensor};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn tiny() -> (Backbone, ParamStore) {
        let b = Backbone::new([4, 6, 8, 8], [3, 3, 4, 4], 2);
        let mut store = ParamStore::new();
        b.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        (b, store)
    }

    #[test]
    fn stage_shapes_follow_strides() {
        let (b, store) = tiny();
        let mut g = Graph::new();
        let r = g.constant(rand_tensor(&[3, 64, 96], 1));
        let t = g.constant(rand_tensor(&[1, 64, 96], 2));
        let (fr, ft) = b.extract(&mut g, &store, r, t).unwrap();
        let want = [[4, 16, 24], [6, 8, 12], [8, 4, 6], [8, 2, 3]];
        for l in 0..4 {
            assert_eq!(g.shape(fr[l]), want[l]);
            assert_eq!(g.shape(ft[l]), want[l]);
            let (qr, _) = b.project(&mut g, &store, l + 1, fr[l], ft[l]);
            assert_eq!(g.shape(qr)[0], b.dims[l]);
        }
    }

    #[test]
    fn rejects_unaligned_input() {
        let (b, store) = tiny();
        let mut g = Graph::new();
        let r = g.constant(Tensor::zeros(&[3, 48, 64]));
        assert!(matches!(b.extract_branch(&mut g, &store, Modality::Rgb, r), Err(Error::ShapeViolation(_))));
    }

    #[test]
    fn branches_are_independent() {
        let (b, store) = tiny();
        let run = |tseed| {
            let mut g = Graph::new();
            let r = g.constant(rand_tensor(&[3, 32, 32], 7));
            let t = g.constant(rand_tensor(&[1, 32, 32], tseed));
            let (fr, _) = b.extract(&mut g, &store, r, t).unwrap();
            fr.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(2));
        assert!(store.names().iter().all(|n| !n.contains("shared")));
    }

    #[test]
    fn projection_is_local_and_linear() {
        let (b, store) = tiny();
        let proj = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let q = b.project_one(&mut g, &store, Modality::Thermal, 2, v);
            g.value(q).clone()
        };
        let x = rand_tensor(&[6, 5, 5], 3);
        let y = rand_tensor(&[6, 5, 5], 4);
        let mix = x.zip_map(&y, |a, b| 0.3 * a - 1.7 * b);
        let want = proj(&x).zip_map(&proj(&y), |a, b| 0.3 * a - 1.7 * b);
        for (a, b) in proj(&mix).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut x2 = x.clone();
        x2.set3(2, 1, 3, 9.0);
        let (p1, p2) = (proj(&x), proj(&x2));
        for c in 0..3 {
            for yy in 0..5 {
                for xx in 0..5 {
                    if (yy, xx) != (1, 3) {
                        assert_eq!(p1.at3(c, yy, xx), p2.at3(c, yy, xx));
                    }
                }
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let b = Backbone::new([4, 4, 4, 4], [2, 2, 2, 2], 2);
        let mut store = ParamStore::new();
        b.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
        let rgb = rand_tensor(&[3, 32, 32], 8);
        let names: Vec<String> = store
            .names()
            .into_iter()
            .filter(|n| n.starts_with("proj.rgb") || n.starts_with("backbone.rgb.s1"))
            .collect();
        let report = check_params(
            &store,
            &names,
            |g, s| {
                let x = g.constant(rgb.clone());
                let f = b.extract_branch(g, s, Modality::Rgb, x).unwrap();
                let mut total = None;
                for (l, &fl) in f.iter().enumerate() {
                    let q = b.project_one(g, s, Modality::Rgb, l + 1, fl);
                    let q2 = g.mul(q, q);
                    let sl = g.sum(q2);
                    total = Some(match total {
                        None => sl,
                        Some(t) => g.add(t, sl),
                    });
                }
                total.unwrap()
            },
            1e-6,
            4,
        );
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
