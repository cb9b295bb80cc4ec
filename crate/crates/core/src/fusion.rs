//! Domain fusion: per-stage pointwise MLP over the concatenation of
//! FM-enhanced origin features, foreground features and the upsampled
//! previous fusion stage, walked coarse-to-fine, plus the decode head.
//!
//! The same stage machinery also serves the ablation rows: with the
//! foreground domain absent it is a plain hierarchical MLP decoder
//! (the baseline head), and `AddForeground` folds the foreground in by
//! elementwise addition instead of concatenation.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{FeaturePyramid, FocusMap, ForegroundPyramid, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Origin domain only (ablation baseline head).
    OriginOnly,
    /// Foreground added elementwise into the origin features (ablation row
    /// with separation but no domain fusion).
    AddForeground,
    /// Three-way concatenation, the full domain-fusion wiring.
    ConcatFusion,
}

#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// Pyramid channels coarse-to-fine.
    pub channels: [usize; 4],
    pub c_fuse: usize,
    pub mode: FusionMode,
}

impl FusionConfig {
    pub fn new(channels: [usize; 4], mode: FusionMode) -> Self {
        FusionConfig { channels, c_fuse: 128, mode }
    }

    fn stage_in_channels(&self, level: usize) -> usize {
        let base = match self.mode {
            FusionMode::ConcatFusion => 2 * self.channels[level - 1],
            _ => self.channels[level - 1],
        };
        if level > 1 {
            base + self.c_fuse
        } else {
            base
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    prefix: String,
    pub cfg: FusionConfig,
}

impl Fusion {
    pub fn new(prefix: impl Into<String>, cfg: FusionConfig) -> Self {
        Fusion { prefix: prefix.into(), cfg }
    }

    fn mlp_convs(&self, level: usize) -> (Conv2d, Conv2d) {
        let in_c = self.cfg.stage_in_channels(level);
        (
            Conv2d::new(format!("{}.stage{level}.mlp1", self.prefix), in_c, self.cfg.c_fuse, 1, 1),
            Conv2d::new(
                format!("{}.stage{level}.mlp2", self.prefix),
                self.cfg.c_fuse,
                self.cfg.c_fuse,
                1,
                1,
            ),
        )
    }

    fn decode_head(&self) -> Conv2d {
        Conv2d::new(format!("{}.decode", self.prefix), self.cfg.c_fuse, 1, 1, 1)
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for level in 1..=4 {
            let (m1, m2) = self.mlp_convs(level);
            m1.register(store, rng);
            m2.register(store, rng);
        }
        self.decode_head().register(store, rng);
    }

    pub fn register_zeros<F: Real>(&self, store: &mut ParamStore<F>) {
        for level in 1..=4 {
            let (m1, m2) = self.mlp_convs(level);
            m1.register_zeros(store);
            m2.register_zeros(store);
        }
        self.decode_head().register_zeros(store);
    }

    /// FM-guided enhancement of every pyramid level: `F_i + FM_i * F_i` with
    /// FM bilinearly resampled to each level's size.
    pub fn enhance_on_tape<F: Real>(
        tape: &mut Tape<F>,
        pyramid: &[Var; 4],
        fm: Var,
    ) -> [Var; 4] {
        let mut out = *pyramid;
        for (i, &f) in pyramid.iter().enumerate() {
            let (h, w) = (tape.shape(f)[2], tape.shape(f)[3]);
            let fm_i = tape.resize_bilinear(fm, h, w);
            let scaled = tape.mul_bcast_c(fm_i, f);
            out[i] = tape.add(scaled, f);
        }
        out
    }

    /// One fusion stage. `x` is the origin-domain feature, `fg` the
    /// foreground feature (level-matched), `prev` the previous fused map at
    /// half resolution.
    pub fn stage_step<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        level: usize,
        x: Var,
        fg: Option<Var>,
        prev: Option<Var>,
    ) -> Var {
        let mut parts: Vec<Var> = Vec::with_capacity(3);
        match (self.cfg.mode, fg) {
            (FusionMode::ConcatFusion, Some(fg)) => {
                parts.push(x);
                parts.push(fg);
            }
            (FusionMode::AddForeground, Some(fg)) => {
                parts.push(tape.add(x, fg));
            }
            (FusionMode::OriginOnly, _) | (_, None) => parts.push(x),
        }
        if let Some(prev) = prev {
            parts.push(tape.upsample2(prev));
        }
        let cat = if parts.len() == 1 { parts[0] } else { tape.concat_c(&parts) };
        let (m1, m2) = self.mlp_convs(level);
        let h = m1.forward(tape, store, cat);
        let h = tape.silu(h);
        m2.forward(tape, store, h)
    }

    /// Hierarchical merge coarse-to-fine; returns `fused_4` at H/4.
    pub fn fuse_on_tape<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        origin: &[Var; 4],
        foreground: Option<&[Var; 4]>,
    ) -> Var {
        let mut prev: Option<Var> = None;
        for level in 1..=4 {
            let fg = foreground.map(|f| f[level - 1]);
            let fused = self.stage_step(tape, store, level, origin[level - 1], fg, prev);
            prev = Some(fused);
        }
        prev.unwrap()
    }

    /// Decode head: 1x1 conv to one logit channel, bilinear x4 to the image
    /// size, sigmoid. Returns `(logits, probabilities)`.
    pub fn decode_on_tape<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        fused: Var,
    ) -> (Var, Var) {
        let (h4, w4) = (tape.shape(fused)[2], tape.shape(fused)[3]);
        let logit4 = self.decode_head().forward(tape, store, fused);
        let logits = tape.resize_bilinear(logit4, h4 * 4, w4 * 4);
        let probs = tape.sigmoid(logits);
        (logits, probs)
    }
}

/// Final prediction: probabilities and retained pre-sigmoid logits, both
/// `(H, W)`.
#[derive(Debug, Clone)]
pub struct Prediction<F: Real> {
    pub probs: Array2<F>,
    pub logits: Array2<F>,
}

impl<F: Real> Prediction<F> {
    /// Binary mask at `threshold`.
    pub fn binarize(&self, threshold: f64) -> crate::tensor::MaskTensor {
        let t = F::from_f64(threshold);
        crate::tensor::MaskTensor(self.probs.mapv(|p| u8::from(p > t)))
    }
}

/// Learnable fusion parameters for standalone use.
#[derive(Debug, Clone)]
pub struct FusionParameters<F: Real> {
    pub store: ParamStore<F>,
    pub fusion: Fusion,
}

impl<F: Real> FusionParameters<F> {
    pub fn init(cfg: FusionConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let fusion = Fusion::new("fusion", cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fusion.register(&mut store, &mut rng);
        FusionParameters { store, fusion }
    }

    pub fn zeros(cfg: FusionConfig) -> Self {
        let mut store = ParamStore::new();
        let fusion = Fusion::new("fusion", cfg);
        fusion.register_zeros(&mut store);
        FusionParameters { store, fusion }
    }
}

fn to_batch<F: Real>(a: &Array3<F>) -> ndarray::Array4<F> {
    a.clone().insert_axis(Axis(0))
}

/// FM-guided enhancement of a whole pyramid (no learnable parameters).
pub fn enhance_origin<F: Real>(
    pyramid: &FeaturePyramid<F>,
    fm: &FocusMap<F>,
) -> Result<FeaturePyramid<F>> {
    let mut tape = Tape::<F>::new();
    let vars: Vec<Var> = pyramid.levels().iter().map(|l| tape.constant4(to_batch(l))).collect();
    let vars: [Var; 4] = [vars[0], vars[1], vars[2], vars[3]];
    let fm_var = tape.constant4(
        fm.data().clone().insert_axis(Axis(0)).insert_axis(Axis(0)),
    );
    let out = Fusion::enhance_on_tape(&mut tape, &vars, fm_var);
    let levels: Vec<Array3<F>> = out
        .iter()
        .map(|&v| tape.value4(v).index_axis(Axis(0), 0).to_owned())
        .collect();
    FeaturePyramid::new(levels)
}

/// Hierarchical three-way fusion; returns the fused map `(C_fuse, H/4, W/4)`.
pub fn fuse<F: Real>(
    origin: &FeaturePyramid<F>,
    foreground: &ForegroundPyramid<F>,
    params: &FusionParameters<F>,
) -> Result<Array3<F>> {
    for level in 1..=4 {
        let o = origin.level(level);
        let f = &foreground.levels[level - 1];
        if o.shape() != f.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("fuse stage {level}: origin vs foreground"),
                expected: o.shape().to_vec(),
                actual: f.shape().to_vec(),
            });
        }
        let expected_c = params.fusion.cfg.channels[level - 1];
        if o.shape()[0] != expected_c {
            return Err(Error::ShapeMismatch {
                context: format!("fuse stage {level}: channel config"),
                expected: vec![expected_c],
                actual: vec![o.shape()[0]],
            });
        }
    }
    let mut tape = Tape::new();
    let ov: Vec<Var> = origin.levels().iter().map(|l| tape.constant4(to_batch(l))).collect();
    let fv: Vec<Var> = foreground.levels.iter().map(|l| tape.constant4(to_batch(l))).collect();
    let ov: [Var; 4] = [ov[0], ov[1], ov[2], ov[3]];
    let fv: [Var; 4] = [fv[0], fv[1], fv[2], fv[3]];
    let fused = params.fusion.fuse_on_tape(&mut tape, &params.store, &ov, Some(&fv));
    Ok(tape.value4(fused).index_axis(Axis(0), 0).to_owned())
}

/// Decodes a fused map into the full-resolution prediction.
pub fn decode<F: Real>(fused: &Array3<F>, params: &FusionParameters<F>) -> Result<Prediction<F>> {
    if fused.shape()[0] != params.fusion.cfg.c_fuse {
        return Err(Error::ShapeMismatch {
            context: "decode input channels".into(),
            expected: vec![params.fusion.cfg.c_fuse],
            actual: vec![fused.shape()[0]],
        });
    }
    let mut tape = Tape::new();
    let f = tape.constant4(to_batch(fused));
    let (logits, probs) = params.fusion.decode_on_tape(&mut tape, &params.store, f);
    let squeeze = |v: Var, tape: &Tape<F>| -> Array2<F> {
        tape.value4(v).index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned()
    };
    Ok(Prediction { logits: squeeze(logits, &tape), probs: squeeze(probs, &tape) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    const CH: [usize; 4] = [8, 6, 5, 4];

    fn rand_pyramid<F: Real>(base: usize, seed: u64) -> FeaturePyramid<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = (0..4)
            .map(|i| {
                let s = base << i;
                Array3::from_shape_fn((CH[i], s, s), |_| F::from_f64(rng.gen_range(-1.0..1.0)))
            })
            .collect();
        FeaturePyramid::new(levels).unwrap()
    }

    fn fg_like<F: Real>(p: &FeaturePyramid<F>, seed: u64) -> ForegroundPyramid<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ForegroundPyramid {
            levels: p
                .levels()
                .iter()
                .map(|l| Array3::from_shape_fn(l.raw_dim(), |_| F::from_f64(rng.gen_range(0.0..1.0))))
                .collect(),
            gain: F::from_f64(10.0),
        }
    }

    fn cfg(mode: FusionMode) -> FusionConfig {
        FusionConfig { channels: CH, c_fuse: 8, mode }
    }

    #[test]
    fn enhance_limits() {
        let pyr = rand_pyramid::<f64>(2, 1);
        // FM ~ 0: output ~ pyramid.
        let fm = FocusMap::new(Array2::from_elem((4, 4), 1e-8)).unwrap();
        let out = enhance_origin(&pyr, &fm).unwrap();
        for (a, b) in out.levels().iter().zip(pyr.levels().iter()) {
            for (&x, &y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() / y.abs().max(1e-9) < 1e-6);
            }
        }
        // FM = 1: output = 2x pyramid.
        let fm = FocusMap::<f64>::ones(4, 4);
        let out = enhance_origin(&pyr, &fm).unwrap();
        for (a, b) in out.levels().iter().zip(pyr.levels().iter()) {
            for (&x, &y) in a.iter().zip(b.iter()) {
                assert!((x - 2.0 * y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_output_at_quarter_resolution() {
        // 512-equivalent: base 16 -> fused_4 at 128 would be heavy; the scale
        // relation is what matters. Base 2: levels 2,4,8,16; fused at 16.
        let pyr = rand_pyramid::<f32>(2, 3);
        let fg = fg_like(&pyr, 4);
        let params = FusionParameters::<f32>::init(cfg(FusionMode::ConcatFusion), 7);
        let fused = fuse(&pyr, &fg, &params).unwrap();
        assert_eq!(fused.shape(), &[8, 16, 16]);
    }

    #[test]
    fn zero_inputs_zero_bias_mlps_give_zero() {
        let levels: Vec<Array3<f64>> = (0..4)
            .map(|i| Array3::zeros((CH[i], 2 << i, 2 << i)))
            .collect();
        let pyr = FeaturePyramid::new(levels).unwrap();
        let fg = ForegroundPyramid {
            levels: pyr.levels().to_vec(),
            gain: 10.0,
        };
        let params = FusionParameters::<f64>::zeros(cfg(FusionMode::ConcatFusion));
        let fused = fuse(&pyr, &fg, &params).unwrap();
        assert!(fused.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_names_stage() {
        let pyr = rand_pyramid::<f32>(2, 3);
        let mut fg = fg_like(&pyr, 4);
        fg.levels[2] = Array3::zeros((7, 8, 8)); // wrong channel count at stage 3
        let params = FusionParameters::<f32>::init(cfg(FusionMode::ConcatFusion), 7);
        match fuse(&pyr, &fg, &params) {
            Err(Error::ShapeMismatch { context, .. }) => {
                assert!(context.contains("stage 3"), "context was {context}");
            }
            other => panic!("expected stage-3 mismatch, got {other:?}"),
        }
    }

    #[test]
    fn decode_shapes_and_half_at_zero() {
        let params = FusionParameters::<f64>::init(cfg(FusionMode::OriginOnly), 7);
        let fused = Array3::<f64>::zeros((8, 32, 32));
        let zero_params = FusionParameters::<f64>::zeros(cfg(FusionMode::OriginOnly));
        let pred = decode(&fused, &zero_params).unwrap();
        assert_eq!(pred.probs.shape(), &[128, 128]);
        assert!(pred.probs.iter().all(|&v| v == 0.5));
        assert!(pred.logits.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fused = Array3::<f64>::from_shape_fn((8, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let pred = decode(&fused, &params).unwrap();
        assert_eq!(pred.probs.shape(), &[16, 16]);
        assert!(pred.probs.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sigmoid_monotone_in_logits() {
        // Increasing any single pre-sigmoid logit increases that probability.
        let p = |l: f64| 1.0 / (1.0 + (-l).exp());
        for l in [-3.0, -0.5, 0.0, 0.5, 3.0] {
            assert!(p(l + 0.1) > p(l));
        }
    }

    #[test]
    fn previous_stage_dependence() {
        // Zeroing fused_{i-1} changes fused_i for generic parameters.
        let pyr = rand_pyramid::<f64>(2, 9);
        let fg = fg_like(&pyr, 10);
        let params = FusionParameters::<f64>::init(cfg(FusionMode::ConcatFusion), 11);

        let mut tape = Tape::new();
        let ov: Vec<Var> =
            pyr.levels().iter().map(|l| tape.constant4(to_batch(l))).collect();
        let fv: Vec<Var> =
            fg.levels.iter().map(|l| tape.constant4(to_batch(l))).collect();

        let f1 = params
            .fusion
            .stage_step(&mut tape, &params.store, 1, ov[0], Some(fv[0]), None);
        let f2 = params
            .fusion
            .stage_step(&mut tape, &params.store, 2, ov[1], Some(fv[1]), Some(f1));

        let zero_prev = tape.constant(ndarray::ArrayD::zeros(
            ndarray::IxDyn(tape.shape(f1).to_vec().as_slice()),
        ));
        let f2_zeroed = params
            .fusion
            .stage_step(&mut tape, &params.store, 2, ov[1], Some(fv[1]), Some(zero_prev));

        let a = tape.value(f2);
        let b = tape.value(f2_zeroed);
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-9, "previous stage had no effect");
    }

    #[test]
    fn add_foreground_mode_differs_from_origin_only() {
        let pyr = rand_pyramid::<f64>(2, 13);
        let fg = fg_like(&pyr, 14);
        let add = FusionParameters::<f64>::init(cfg(FusionMode::AddForeground), 15);
        let fused_with = fuse(&pyr, &fg, &add).unwrap();

        let zero_fg = ForegroundPyramid {
            levels: fg.levels.iter().map(|l| Array3::zeros(l.raw_dim())).collect(),
            gain: 10.0,
        };
        let fused_without = fuse(&pyr, &zero_fg, &add).unwrap();
        let diff = (&fused_with - &fused_without)
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-9);
    }
}
