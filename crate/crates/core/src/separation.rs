//! Foreground/background separation via two weight-shared inpainting
//! branches.
//!
//! Branch N embeds `(image, mask)` and branch A embeds `(image, blank)`;
//! both run the same encoder to an H/32 latent and three nearest-upsample
//! decoder blocks. The foreground pyramid is `beta * |F^N - F^A|` per level.
//! Because the branches share every parameter, a zero mask makes them
//! bit-identical and the separation exactly zero.

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Conv2d, ParamStore};
use crate::tensor::{FocusMap, ForegroundPyramid, ImageTensor, Real};

#[derive(Debug, Clone)]
pub struct InpainterConfig {
    /// Embedding ladder H/2..H/16; the encoder conv then lands at H/32 with
    /// `channels[0]`.
    pub embed_channels: [usize; 4],
    /// Pyramid channel mirror coarse-to-fine `(C_1..C_4)`.
    pub channels: [usize; 4],
    /// Gated convolutions in the embedding/decoder stacks.
    pub gated: bool,
}

impl Default for InpainterConfig {
    fn default() -> Self {
        InpainterConfig {
            embed_channels: [16, 24, 32, 48],
            channels: [256, 160, 64, 32],
            gated: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inpainter {
    prefix: String,
    pub cfg: InpainterConfig,
}

impl Inpainter {
    pub fn new(prefix: impl Into<String>, cfg: InpainterConfig) -> Self {
        Inpainter { prefix: prefix.into(), cfg }
    }

    fn conv(&self, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> Conv2d {
        let out = if self.cfg.gated { out_c * 2 } else { out_c };
        Conv2d::new(format!("{}.{name}", self.prefix), in_c, out, k, stride)
    }

    fn embed_layers(&self) -> Vec<Conv2d> {
        let e = self.cfg.embed_channels;
        vec![
            self.conv("embed.conv1", 4, e[0], 3, 2),
            self.conv("embed.conv2", e[0], e[1], 3, 2),
            self.conv("embed.conv3", e[1], e[2], 3, 2),
            self.conv("embed.conv4", e[2], e[3], 3, 2),
        ]
    }

    fn encoder(&self) -> Conv2d {
        // theta_I: the final encode conv to the H/32 latent; not gated so the
        // latent is a plain linear feature.
        Conv2d::new(
            format!("{}.encode", self.prefix),
            self.cfg.embed_channels[3],
            self.cfg.channels[0],
            3,
            2,
        )
    }

    fn decoder_convs(&self, i: usize) -> (Conv2d, Conv2d) {
        // Dec_i maps level i (channels[i-1]) to level i+1 (channels[i]).
        let from = self.cfg.channels[i - 1];
        let to = self.cfg.channels[i];
        (
            self.conv(&format!("dec{i}.conv1"), from, to, 3, 1),
            self.conv(&format!("dec{i}.conv2"), to, to, 3, 1),
        )
    }

    fn image_head(&self) -> Conv2d {
        Conv2d::new(format!("{}.image_head", self.prefix), self.cfg.channels[3], 3, 1, 1)
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        for layer in self.embed_layers() {
            layer.register(store, rng);
        }
        self.encoder().register(store, rng);
        for i in 1..=3 {
            let (c1, c2) = self.decoder_convs(i);
            c1.register(store, rng);
            c2.register(store, rng);
        }
        self.image_head().register(store, rng);
    }

    pub fn register_zeros<F: Real>(&self, store: &mut ParamStore<F>) {
        for layer in self.embed_layers() {
            layer.register_zeros(store);
        }
        self.encoder().register_zeros(store);
        for i in 1..=3 {
            let (c1, c2) = self.decoder_convs(i);
            c1.register_zeros(store);
            c2.register_zeros(store);
        }
        self.image_head().register_zeros(store);
    }

    fn act<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Var {
        if self.cfg.gated {
            tape.glu(x)
        } else {
            tape.relu(x)
        }
    }

    /// `(B,3,H,W) + (B,1,H,W)` to the H/32 latent.
    pub fn encode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        image: Var,
        mask: Var,
    ) -> Var {
        let mut x = tape.concat_c(&[image, mask]);
        for layer in self.embed_layers() {
            let y = layer.forward(tape, store, x);
            x = self.act(tape, y);
        }
        self.encoder().forward(tape, store, x)
    }

    /// Latent to the four pyramid levels (latent included as level 1).
    pub fn decode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        latent: Var,
    ) -> [Var; 4] {
        let mut levels = [latent; 4];
        let mut x = latent;
        for i in 1..=3 {
            let up = tape.nearest_up2(x);
            let (c1, c2) = self.decoder_convs(i);
            let y = c1.forward(tape, store, up);
            let y = self.act(tape, y);
            let y = c2.forward(tape, store, y);
            x = self.act(tape, y);
            levels[i] = x;
        }
        levels
    }

    pub fn branch<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        image: Var,
        mask: Var,
    ) -> [Var; 4] {
        let latent = self.encode(tape, store, image, mask);
        self.decode(tape, store, latent)
    }

    /// Reconstructed image in `(0,1)` from the finest decoded level.
    pub fn reconstruct<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        level4: Var,
        h: usize,
        w: usize,
    ) -> Var {
        let logits = self.image_head().forward(tape, store, level4);
        let up = tape.resize_bilinear(logits, h, w);
        tape.sigmoid(up)
    }

    /// Foreground pyramid vars: `beta * |branch_n - branch_a|` per level.
    pub fn separate_on_tape<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        image: Var,
        mask_full: Var,
        beta: F,
    ) -> [Var; 4] {
        let shape = tape.shape(mask_full).to_vec();
        let blank = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&shape)));
        let n = self.branch(tape, store, image, mask_full);
        let a = self.branch(tape, store, image, blank);
        let mut out = [n[0]; 4];
        for i in 0..4 {
            let d = tape.sub(n[i], a[i]);
            let ad = tape.abs(d);
            out[i] = tape.scale(ad, beta);
        }
        out
    }
}

/// Learnable parameter collection for a standalone separation module. Both
/// branches reference this same store, so weight sharing is structural.
#[derive(Debug, Clone)]
pub struct InpainterParameters<F: Real> {
    pub store: ParamStore<F>,
    pub inpainter: Inpainter,
}

impl<F: Real> InpainterParameters<F> {
    pub fn init(cfg: InpainterConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let inpainter = Inpainter::new("inpainter", cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        inpainter.register(&mut store, &mut rng);
        InpainterParameters { store, inpainter }
    }

    pub fn zeros(cfg: InpainterConfig) -> Self {
        let mut store = ParamStore::new();
        let inpainter = Inpainter::new("inpainter", cfg);
        inpainter.register_zeros(&mut store);
        InpainterParameters { store, inpainter }
    }
}

/// Mask input for [`inpaint_encode`]: a focus map (resampled to the image
/// size) or the all-zeros blank.
pub enum MaskInput<'a, F: Real> {
    Focus(&'a FocusMap<F>),
    Blank,
}

/// Focus map resampled bilinearly to `(h, w)` as a `(1, 1, h, w)` batch.
pub fn mask_to_full_res<F: Real>(fm: &FocusMap<F>, h: usize, w: usize) -> Array4<F> {
    let m = fm
        .data()
        .clone()
        .insert_axis(Axis(0))
        .insert_axis(Axis(0));
    kernels::resize_bilinear_fwd(&m.view(), h, w)
}

/// Embeds and encodes one image+mask to the `(C_1, H/32, W/32)` latent.
pub fn inpaint_encode<F: Real>(
    image: &ImageTensor<F>,
    mask: MaskInput<'_, F>,
    params: &InpainterParameters<F>,
) -> Result<Array3<F>> {
    image.check_pyramid_divisible()?;
    let (h, w) = (image.height(), image.width());
    let mask_full = match mask {
        MaskInput::Focus(fm) => mask_to_full_res(fm, h, w),
        MaskInput::Blank => Array4::zeros((1, 1, h, w)),
    };
    if mask_full.shape()[2] != h || mask_full.shape()[3] != w {
        return Err(Error::ShapeMismatch {
            context: "inpaint_encode mask".into(),
            expected: vec![h, w],
            actual: vec![mask_full.shape()[2], mask_full.shape()[3]],
        });
    }
    let mut tape = Tape::new();
    let img = tape.constant4(image.to_chw_batch());
    let m = tape.constant4(mask_full);
    let latent = params.inpainter.encode(&mut tape, &params.store, img, m);
    Ok(tape.value4(latent).index_axis(Axis(0), 0).to_owned())
}

/// Decodes a latent into the four pyramid levels (latent is level 1).
pub fn inpaint_decode<F: Real>(
    latent: &Array3<F>,
    params: &InpainterParameters<F>,
) -> Result<Vec<Array3<F>>> {
    if latent.shape()[0] != params.inpainter.cfg.channels[0] {
        return Err(Error::ShapeMismatch {
            context: "inpaint_decode latent channels".into(),
            expected: vec![params.inpainter.cfg.channels[0]],
            actual: vec![latent.shape()[0]],
        });
    }
    let mut tape = Tape::new();
    let l = tape.constant4(latent.clone().insert_axis(Axis(0)));
    let levels = params.inpainter.decode(&mut tape, &params.store, l);
    Ok(levels
        .iter()
        .map(|&v| tape.value4(v).index_axis(Axis(0), 0).to_owned())
        .collect())
}

/// Pure combiner behind Eq.-7-style separation: `beta * |n - a|`.
pub fn foreground_from_branches<F: Real>(n: &Array3<F>, a: &Array3<F>, beta: F) -> Array3<F> {
    let mut out = n - a;
    out.mapv_inplace(|v| v.abs() * beta);
    out
}

/// Runs both weight-shared branches and returns the foreground pyramid.
pub fn separate<F: Real>(
    image: &ImageTensor<F>,
    fm: &FocusMap<F>,
    params: &InpainterParameters<F>,
    beta: F,
) -> Result<ForegroundPyramid<F>> {
    if beta <= F::zero() {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    image.check_pyramid_divisible()?;
    let (h, w) = (image.height(), image.width());
    let mut tape = Tape::new();
    let img = tape.constant4(image.to_chw_batch());
    let mask = tape.constant4(mask_to_full_res(fm, h, w));
    let ff = params
        .inpainter
        .separate_on_tape(&mut tape, &params.store, img, mask, beta);
    let levels: Vec<Array3<F>> = ff
        .iter()
        .map(|&v| tape.value4(v).index_axis(Axis(0), 0).to_owned())
        .collect();
    Ok(ForegroundPyramid { levels, gain: beta })
}

/// One training sample for the inpainter: image, conditioning mask and the
/// ground-truth smoke-free background, all `(H, W)`-aligned.
#[derive(Debug, Clone)]
pub struct InpaintSample<F: Real> {
    /// `(3, H, W)`.
    pub image: Array3<F>,
    /// `(1, H, W)` in `[0, 1]`.
    pub mask: Array3<F>,
    /// `(3, H, W)`.
    pub background: Array3<F>,
}

#[derive(Debug, Clone)]
pub struct InpaintTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of samples trained with a blank mask so the identity branch
    /// is explicitly covered.
    pub blank_fraction: f64,
}

impl Default for InpaintTrainConfig {
    fn default() -> Self {
        InpaintTrainConfig {
            steps: 800,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            blank_fraction: 0.125,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct InpaintTrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// Reconstruction target: background inside the mask, the observed image
/// outside. Minimizing this teaches the net to fill masked regions with
/// background while passing unmasked content through.
fn composite_target<F: Real>(sample: &InpaintSample<F>, blank: bool) -> Array3<F> {
    if blank {
        return sample.image.clone();
    }
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let mut target = sample.image.clone();
    for y in 0..h {
        for x in 0..w {
            let m = sample.mask[[0, y, x]];
            for c in 0..3 {
                let i = sample.image[[c, y, x]];
                let b = sample.background[[c, y, x]];
                target[[c, y, x]] = i + m * (b - i);
            }
        }
    }
    target
}

/// Masked-region reconstruction error of the current parameters over a
/// sample set (the before/after oracle for training).
pub fn masked_reconstruction_error<F: Real>(
    samples: &[InpaintSample<F>],
    params: &InpainterParameters<F>,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        let mut tape = Tape::new();
        let img = tape.constant4(s.image.clone().insert_axis(Axis(0)));
        let m = tape.constant4(s.mask.clone().insert_axis(Axis(0)));
        let levels = params.inpainter.branch(&mut tape, &params.store, img, m);
        let recon = params
            .inpainter
            .reconstruct(&mut tape, &params.store, levels[3], h, w);
        let rv = tape.value4(recon);
        for y in 0..h {
            for x in 0..w {
                if s.mask[[0, y, x]].as_f64() > 0.5 {
                    for c in 0..3 {
                        let d = rv[[0, c, y, x]].as_f64() - s.background[[c, y, x]].as_f64();
                        total += d * d;
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Trains the inpainter on synthetic `(I, mask, B)` triples; deterministic
/// per seed. Returns the per-step loss curve.
pub fn train_inpainter<F: Real>(
    samples: &[InpaintSample<F>],
    params: &mut InpainterParameters<F>,
    cfg: &InpaintTrainConfig,
) -> Result<Vec<InpaintTrainRecord>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset { root: "<in-memory inpainter set>".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        // Batch assembly: sample indices, then the blank-mask coin per item.
        let picks: Vec<(usize, bool)> = (0..cfg.batch_size)
            .map(|_| {
                let idx = rng.gen_range(0..samples.len());
                let blank = rng.gen_bool(cfg.blank_fraction);
                (idx, blank)
            })
            .collect();

        let (h, w) = {
            let s = &samples[picks[0].0];
            (s.image.shape()[1], s.image.shape()[2])
        };
        let b = picks.len();
        let mut images = Array4::<F>::zeros((b, 3, h, w));
        let mut masks = Array4::<F>::zeros((b, 1, h, w));
        let mut targets = Array4::<F>::zeros((b, 3, h, w));
        for (bi, &(idx, blank)) in picks.iter().enumerate() {
            let s = &samples[idx];
            images.index_axis_mut(Axis(0), bi).assign(&s.image);
            if !blank {
                masks.index_axis_mut(Axis(0), bi).assign(&s.mask);
            }
            targets
                .index_axis_mut(Axis(0), bi)
                .assign(&composite_target(s, blank));
        }

        let mut tape = Tape::new();
        let img = tape.constant4(images);
        let m = tape.constant4(masks);
        let tgt = tape.constant4(targets);
        let levels = params.inpainter.branch(&mut tape, &params.store, img, m);
        let recon = params
            .inpainter
            .reconstruct(&mut tape, &params.store, levels[3], h, w);
        let loss = tape.mse_mean(recon, tgt);
        let loss_val = tape.scalar(loss).as_f64();
        if !loss_val.is_finite() {
            return Err(Error::Divergence { step, loss: loss_val });
        }

        let grads = tape.backward(loss);
        params.store.zero_grads();
        tape.export_param_grads(&grads, &mut params.store);
        opt.step(&mut params.store);

        curve.push(InpaintTrainRecord { step, loss: loss_val });
    }
    Ok(curve)
}

/// RGB background reconstruction `(H, W, 3)` from the masked branch.
pub fn reconstruct_rgb<F: Real>(
    image: &ImageTensor<F>,
    fm: &FocusMap<F>,
    params: &InpainterParameters<F>,
) -> Result<Array3<F>> {
    image.check_pyramid_divisible()?;
    let (h, w) = (image.height(), image.width());
    let mut tape = Tape::new();
    let img = tape.constant4(image.to_chw_batch());
    let m = tape.constant4(mask_to_full_res(fm, h, w));
    let levels = params.inpainter.branch(&mut tape, &params.store, img, m);
    let recon = params
        .inpainter
        .reconstruct(&mut tape, &params.store, levels[3], h, w);
    let rv = tape.value4(recon);
    let mut out = Array3::<F>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[y, x, c]] = rv[[0, c, y, x]];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn cfg() -> InpainterConfig {
        InpainterConfig {
            embed_channels: [6, 8, 10, 12],
            channels: [16, 12, 10, 8],
            gated: false,
        }
    }

    fn random_image<F: Real>(h: usize, w: usize, seed: u64) -> ImageTensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((h, w, 3), |_| {
            F::from_f64(rng.gen_range(0.0..1.0))
        }))
        .unwrap()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let params = InpainterParameters::<f32>::init(cfg(), 5);
        let image = random_image::<f32>(64, 64, 1);
        let a = inpaint_encode(&image, MaskInput::Blank, &params).unwrap();
        assert_eq!(a.shape(), &[16, 2, 2]);
        let b = inpaint_encode(&image, MaskInput::Blank, &params).unwrap();
        assert_eq!(a, b, "blank encodings must be bit-identical");

        // FM == 0 is indistinguishable from blank.
        let fm = FocusMap::<f32>::zeros(4, 4);
        let c = inpaint_encode(&image, MaskInput::Focus(&fm), &params).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn decode_scale_ladder() {
        let params = InpainterParameters::<f32>::init(cfg(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let latent = Array3::from_shape_fn((16, 2, 2), |_| rng.gen_range(-1.0..1.0f32));
        let levels = inpaint_decode(&latent, &params).unwrap();
        assert_eq!(levels[0].shape(), &[16, 2, 2]);
        assert_eq!(levels[1].shape(), &[12, 4, 4]);
        assert_eq!(levels[2].shape(), &[10, 8, 8]);
        assert_eq!(levels[3].shape(), &[8, 16, 16]);
    }

    #[test]
    fn zero_latent_zero_bias_decoders_give_zero() {
        let params = InpainterParameters::<f32>::zeros(cfg());
        let latent = Array3::<f32>::zeros((16, 2, 2));
        let levels = inpaint_decode(&latent, &params).unwrap();
        for l in &levels {
            assert!(l.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn null_separation_is_exactly_zero() {
        for seed in [1u64, 2, 3] {
            let params = InpainterParameters::<f32>::init(cfg(), seed);
            let image = random_image::<f32>(64, 64, seed + 10);
            let fm = FocusMap::<f32>::zeros(4, 4);
            let ff = separate(&image, &fm, &params, 10.0).unwrap();
            for (i, level) in ff.levels.iter().enumerate() {
                assert!(
                    level.iter().all(|&v| v == 0.0),
                    "level {} not exactly zero for seed {seed}",
                    i + 1
                );
            }
        }
    }

    #[test]
    fn gain_linearity_exact() {
        let params = InpainterParameters::<f32>::init(cfg(), 3);
        let image = random_image::<f32>(64, 64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let fm = FocusMap::new(ndarray::Array2::from_shape_fn((4, 4), |_| {
            rng.gen_range(0.0..1.0f32)
        }))
        .unwrap();
        let a = separate(&image, &fm, &params, 10.0).unwrap();
        let b = separate(&image, &fm, &params, 20.0).unwrap();
        for (la, lb) in a.levels.iter().zip(b.levels.iter()) {
            for (&x, &y) in la.iter().zip(lb.iter()) {
                assert_eq!(x * 2.0, y);
            }
        }
    }

    #[test]
    fn rejects_non_positive_beta() {
        let params = InpainterParameters::<f32>::init(cfg(), 3);
        let image = random_image::<f32>(64, 64, 4);
        let fm = FocusMap::<f32>::zeros(4, 4);
        assert!(separate(&image, &fm, &params, 0.0).is_err());
        assert!(separate(&image, &fm, &params, -1.0).is_err());
    }

    #[test]
    fn foreground_combiner_single_element() {
        let mut n = Array3::<f64>::zeros((1, 2, 2));
        let a = Array3::<f64>::zeros((1, 2, 2));
        n[[0, 0, 1]] = 0.3;
        let ff = foreground_from_branches(&n, &a, 10.0);
        assert_eq!(ff[[0, 0, 1]], 3.0);
        assert_eq!(ff[[0, 0, 0]], 0.0);
        // Sign does not matter.
        n[[0, 0, 1]] = -0.3;
        let ff = foreground_from_branches(&n, &a, 10.0);
        assert_eq!(ff[[0, 0, 1]], 3.0);
    }

    #[test]
    fn foreground_non_negative_and_shape_mirrored() {
        let params = InpainterParameters::<f32>::init(cfg(), 8);
        let image = random_image::<f32>(64, 64, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fm = FocusMap::new(ndarray::Array2::from_shape_fn((4, 4), |_| {
            rng.gen_range(0.0..1.0f32)
        }))
        .unwrap();
        let ff = separate(&image, &fm, &params, 10.0).unwrap();
        let expected = [[16, 2, 2], [12, 4, 4], [10, 8, 8], [8, 16, 16]];
        for (level, exp) in ff.levels.iter().zip(expected.iter()) {
            assert_eq!(level.shape(), exp);
            assert!(level.iter().all(|&v| v >= 0.0));
        }
    }

    fn tiny_samples(n: usize, size: usize, seed: u64) -> Vec<InpaintSample<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let bg_val: f32 = rng.gen_range(0.2..0.5);
                let background = Array3::from_elem((3, size, size), bg_val);
                let mut image = background.clone();
                let mut mask = Array3::<f32>::zeros((1, size, size));
                // Square smoke patch of bright values.
                let half = size / 2;
                let y0 = rng.gen_range(0..half);
                let x0 = rng.gen_range(0..half);
                for y in y0..y0 + half / 2 {
                    for x in x0..x0 + half / 2 {
                        mask[[0, y, x]] = 1.0;
                        for c in 0..3 {
                            image[[c, y, x]] = 0.9;
                        }
                    }
                }
                InpaintSample { image, mask, background }
            })
            .collect()
    }

    #[test]
    fn zero_steps_leaves_parameters_bit_exact() {
        let mut params = InpainterParameters::<f32>::init(cfg(), 2);
        let before = params.store.clone();
        let samples = tiny_samples(4, 32, 1);
        let cfg_t = InpaintTrainConfig { steps: 0, ..Default::default() };
        let curve = train_inpainter(&samples, &mut params, &cfg_t).unwrap();
        assert!(curve.is_empty());
        assert!(params.store.values_equal(&before));
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut params = InpainterParameters::<f32>::init(cfg(), 2);
        let cfg_t = InpaintTrainConfig::default();
        assert!(matches!(
            train_inpainter::<f32>(&[], &mut params, &cfg_t),
            Err(Error::EmptyDataset { .. })
        ));
    }

    #[test]
    fn training_reduces_masked_reconstruction_error_and_is_deterministic() {
        let samples = tiny_samples(24, 32, 3);
        let held_out = tiny_samples(8, 32, 99);
        let cfg_t = InpaintTrainConfig {
            steps: 60,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 5,
            ..Default::default()
        };

        let mut params = InpainterParameters::<f32>::init(cfg(), 2);
        let before = masked_reconstruction_error(&held_out, &params);
        let curve = train_inpainter(&samples, &mut params, &cfg_t).unwrap();
        let after = masked_reconstruction_error(&held_out, &params);
        assert!(
            after < before,
            "masked reconstruction error did not improve: {before} -> {after}"
        );

        let mut params2 = InpainterParameters::<f32>::init(cfg(), 2);
        let curve2 = train_inpainter(&samples, &mut params2, &cfg_t).unwrap();
        assert_eq!(curve.last().unwrap().loss, curve2.last().unwrap().loss);
    }

    #[test]
    fn gated_variant_runs() {
        let gated_cfg = InpainterConfig { gated: true, ..cfg() };
        let params = InpainterParameters::<f32>::init(gated_cfg, 5);
        let image = random_image::<f32>(64, 64, 1);
        let fm = FocusMap::<f32>::zeros(4, 4);
        let ff = separate(&image, &fm, &params, 10.0).unwrap();
        assert!(ff.levels.iter().all(|l| l.iter().all(|&v| v == 0.0)));
    }
}
