//! Four-stage hierarchical feature extractor.
//!
//! A strided stem embeds the image to H/4, then alternating mixing blocks
//! and strided transition convs walk down to H/32. Levels are reported
//! coarse-to-fine: level 1 at H/32 with `channels[0]` channels, level 4 at
//! H/4 with `channels[3]`. The mixing block is a config switch between a
//! residual conv pair and a single-head self-attention block.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{FeaturePyramid, ImageTensor, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingKind {
    Conv,
    Attention,
}

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    /// Channel counts coarse-to-fine: `(C_1, C_2, C_3, C_4)`.
    pub channels: [usize; 4],
    /// Mixing blocks per stage, coarse-to-fine order.
    pub depths: [usize; 4],
    pub mixing: MixingKind,
    pub stem_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [256, 160, 64, 32],
            depths: [1, 1, 1, 1],
            mixing: MixingKind::Conv,
            stem_channels: 16,
        }
    }
}

/// Stateless layer map; parameters live in the store under `<prefix>...`.
#[derive(Debug, Clone)]
pub struct Backbone {
    prefix: String,
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(prefix: impl Into<String>, cfg: BackboneConfig) -> Self {
        Backbone { prefix: prefix.into(), cfg }
    }

    fn stem1(&self) -> Conv2d {
        Conv2d::new(format!("{}.stem.conv1", self.prefix), 3, self.cfg.stem_channels, 3, 2)
    }

    fn stem2(&self) -> Conv2d {
        // Lands at H/4 with the finest stage's channel count.
        Conv2d::new(
            format!("{}.stem.conv2", self.prefix),
            self.cfg.stem_channels,
            self.cfg.channels[3],
            3,
            2,
        )
    }

    /// Strided transition into stage `level` (levels 3, 2, 1).
    fn transition(&self, level: usize) -> Conv2d {
        let from = self.cfg.channels[level]; // channels of level+1 (finer)
        let to = self.cfg.channels[level - 1];
        Conv2d::new(format!("{}.stage{}.embed", self.prefix, level), from, to, 3, 2)
    }

    fn mix_convs(&self, level: usize, block: usize) -> (Conv2d, Conv2d) {
        let c = self.cfg.channels[level - 1];
        let base = format!("{}.stage{}.mix{}", self.prefix, level, block);
        (
            Conv2d::new(format!("{base}.conv1"), c, c, 3, 1),
            Conv2d::new(format!("{base}.conv2"), c, c, 3, 1),
        )
    }

    fn attn_convs(&self, level: usize, block: usize) -> [Conv2d; 4] {
        let c = self.cfg.channels[level - 1];
        let base = format!("{}.stage{}.mix{}", self.prefix, level, block);
        [
            Conv2d::new(format!("{base}.q"), c, c, 1, 1),
            Conv2d::new(format!("{base}.k"), c, c, 1, 1),
            Conv2d::new(format!("{base}.v"), c, c, 1, 1),
            Conv2d::new(format!("{base}.proj"), c, c, 1, 1),
        ]
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.stem1().register(store, rng);
        self.stem2().register(store, rng);
        for level in (1..=3).rev() {
            self.transition(level).register(store, rng);
        }
        for level in 1..=4 {
            for block in 0..self.cfg.depths[level - 1] {
                match self.cfg.mixing {
                    MixingKind::Conv => {
                        let (c1, c2) = self.mix_convs(level, block);
                        c1.register(store, rng);
                        c2.register(store, rng);
                    }
                    MixingKind::Attention => {
                        for conv in self.attn_convs(level, block) {
                            conv.register(store, rng);
                        }
                    }
                }
            }
        }
    }

    fn mix_block<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        level: usize,
        block: usize,
        x: Var,
    ) -> Var {
        match self.cfg.mixing {
            MixingKind::Conv => {
                let (c1, c2) = self.mix_convs(level, block);
                let h = c1.forward(tape, store, x);
                let h = tape.relu(h);
                let h = c2.forward(tape, store, h);
                let s = tape.add(x, h);
                tape.relu(s)
            }
            MixingKind::Attention => {
                let [qc, kc, vc, pc] = self.attn_convs(level, block);
                let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
                let c = tape.shape(x)[1];
                let q = qc.forward(tape, store, x);
                let k = kc.forward(tape, store, x);
                let v = vc.forward(tape, store, x);
                let qt = tape.spatial_to_tokens(q);
                let kt = tape.spatial_to_tokens(k);
                let vt = tape.spatial_to_tokens(v);
                let scores = tape.bat_mat_mul(qt, kt, true);
                let scaled = tape.scale(scores, F::from_f64(1.0 / (c as f64).sqrt()));
                let attn = tape.softmax_last(scaled);
                let mixed = tape.bat_mat_mul(attn, vt, false);
                let spatial = tape.tokens_to_spatial(mixed, h, w);
                let proj = pc.forward(tape, store, spatial);
                tape.add(x, proj)
            }
        }
    }

    /// Forward on a shared tape; input `(B, 3, H, W)`, output coarse-to-fine
    /// `[F_1 .. F_4]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, image: Var) -> [Var; 4] {
        let x = self.stem1().forward(tape, store, image);
        let x = tape.relu(x);
        let x = self.stem2().forward(tape, store, x);
        let mut x = tape.relu(x);

        let mut levels = [x; 4];
        // Finest stage first (level 4 at H/4), then walk coarser.
        for level in (1..=4).rev() {
            if level != 4 {
                let t = self.transition(level).forward(tape, store, x);
                x = tape.relu(t);
            }
            for block in 0..self.cfg.depths[level - 1] {
                x = self.mix_block(tape, store, level, block, x);
            }
            levels[level - 1] = x;
        }
        levels
    }
}

/// Learnable parameter collection for a standalone extractor.
#[derive(Debug, Clone)]
pub struct ExtractorParameters<F: Real> {
    pub store: ParamStore<F>,
    pub backbone: Backbone,
}

impl<F: Real> ExtractorParameters<F> {
    pub fn init(cfg: BackboneConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let backbone = Backbone::new("backbone", cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        backbone.register(&mut store, &mut rng);
        ExtractorParameters { store, backbone }
    }
}

/// Runs the extractor over one image, producing the four-level pyramid.
/// Deterministic: no stochastic ops at inference.
pub fn extract_features<F: Real>(
    image: &ImageTensor<F>,
    params: &ExtractorParameters<F>,
) -> Result<FeaturePyramid<F>> {
    image.check_pyramid_divisible()?;
    let mut tape = Tape::new();
    let input = tape.constant4(image.to_chw_batch());
    let levels = params.backbone.forward(&mut tape, &params.store, input);
    let arrays: Vec<Array3<F>> = levels
        .iter()
        .map(|&v| tape.value4(v).index_axis(ndarray::Axis(0), 0).to_owned())
        .collect();
    FeaturePyramid::new(arrays)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use ndarray::Array3;
    use rand::Rng;

    fn random_image<F: Real>(h: usize, w: usize, seed: u64) -> ImageTensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((h, w, 3), |_| F::from_f64(rng.gen_range(0.0..1.0)));
        ImageTensor::new(data).unwrap()
    }

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            channels: [16, 12, 10, 8],
            depths: [1, 1, 1, 1],
            mixing: MixingKind::Conv,
            stem_channels: 6,
        }
    }

    #[test]
    fn pyramid_shapes_at_64() {
        let params = ExtractorParameters::<f32>::init(small_cfg(), 7);
        let image = random_image::<f32>(64, 64, 1);
        let pyr = extract_features(&image, &params).unwrap();
        let expected = [(16, 2, 2), (12, 4, 4), (10, 8, 8), (8, 16, 16)];
        for (i, (c, h, w)) in expected.iter().enumerate() {
            let lvl = pyr.level(i + 1);
            assert_eq!(lvl.shape(), &[*c, *h, *w], "level {}", i + 1);
        }
    }

    #[test]
    fn rejects_indivisible_dims_naming_axes() {
        let params = ExtractorParameters::<f32>::init(small_cfg(), 7);
        let image = random_image::<f32>(60, 60, 1);
        match extract_features(&image, &params) {
            Err(Error::DimensionNotDivisible { bad_axes, .. }) => {
                assert_eq!(bad_axes, vec!["height", "width"]);
            }
            other => panic!("expected divisibility error, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let params = ExtractorParameters::<f32>::init(small_cfg(), 3);
        let image = random_image::<f32>(64, 64, 2);
        let a = extract_features(&image, &params).unwrap();
        let b = extract_features(&image, &params).unwrap();
        for i in 1..=4 {
            assert_eq!(a.level(i), b.level(i), "level {i} not bit-identical");
        }
    }

    #[test]
    fn parameter_count_deterministic_given_config() {
        let a = ExtractorParameters::<f32>::init(small_cfg(), 1);
        let b = ExtractorParameters::<f32>::init(small_cfg(), 999);
        assert_eq!(a.store.scalar_count(), b.store.scalar_count());
        let names_a: Vec<_> = a.store.names().collect();
        let names_b: Vec<_> = b.store.names().collect();
        assert_eq!(names_a, names_b);
    }

    #[test]
    fn attention_mixing_runs_and_matches_shapes() {
        let cfg = BackboneConfig { mixing: MixingKind::Attention, ..small_cfg() };
        let params = ExtractorParameters::<f32>::init(cfg, 7);
        let image = random_image::<f32>(64, 64, 1);
        let pyr = extract_features(&image, &params).unwrap();
        assert_eq!(pyr.level(1).shape(), &[16, 2, 2]);
        assert_eq!(pyr.level(4).shape(), &[8, 16, 16]);
    }

    /// Every parameter influences the output: analytic gradients of a fixed
    /// projection of the pyramid are nonzero for every parameter tensor, and
    /// a finite-difference perturbation of one element per tensor moves the
    /// output.
    #[test]
    fn gradient_flow_reaches_every_parameter() {
        let params = ExtractorParameters::<f64>::init(small_cfg(), 11);
        let image = random_image::<f64>(64, 64, 5);

        let run = |store: &ParamStore<f64>| -> (Tape<f64>, Var) {
            let mut tape = Tape::new();
            let input = tape.constant4(image.to_chw_batch());
            let levels = params.backbone.forward(&mut tape, store, input);
            let sums: Vec<Var> = levels
                .iter()
                .map(|&v| {
                    let sq = tape.mul(v, v);
                    tape.sum_all(sq)
                })
                .collect();
            let terms: Vec<(Var, f64)> =
                sums.iter().enumerate().map(|(i, &s)| (s, 1.0 + i as f64)).collect();
            let out = tape.weighted_sum(&terms);
            (tape, out)
        };

        let (tape, out) = run(&params.store);
        let grads = tape.backward(out);
        let mut store = params.store.clone();
        store.zero_grads();
        tape.export_param_grads(&grads, &mut store);

        let base = tape.scalar(out);
        for (name, _) in params.store.iter() {
            let g = &store.get(name).grad;
            let max_abs = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_abs > 0.0, "parameter {name} has zero gradient");

            // Finite-difference spot check on the element with largest |grad|.
            let (idx, _) = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .unwrap();
            let mut perturbed = params.store.clone();
            {
                let slice = perturbed.get_mut(name).value.as_slice_mut().unwrap();
                slice[idx] += 1e-5;
            }
            let (tape2, out2) = run(&perturbed);
            let moved = tape2.scalar(out2);
            assert!(
                (moved - base).abs() > 0.0,
                "perturbing {name}[{idx}] did not change the output"
            );
        }
    }
}
