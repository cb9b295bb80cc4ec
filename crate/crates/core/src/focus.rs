//! Bidirectional cascade generator: guides the coarsest (smoke-body) and
//! finest (smoke-edge) pyramid levels toward mid resolution and fuses the
//! two mid-resolution logits into the focus map.
//!
//! Low-mid cascade: `G_2 = Conv(Cat(U(sigmoid(G_1) * F_1 + F_1), F_2))` with
//! `G_1` from a 3x3 logits head on `F_1` and `U` bilinear 2x upsampling.
//! High-mid cascade mirrors it with 2x average-pool downsampling. The focus
//! map is `sigmoid(Conv1x1(Cat(G_2, resize(G_3))))`, kept at H/16.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{FeaturePyramid, FocusMap, LogitsMap, Real, ScaleTag};

#[derive(Debug, Clone)]
pub struct BcgConfig {
    /// Pyramid channel counts coarse-to-fine, matching the backbone.
    pub channels: [usize; 4],
}

/// Layer map for the cascade generator.
#[derive(Debug, Clone)]
pub struct Bcg {
    prefix: String,
    pub cfg: BcgConfig,
}

pub struct FocusVars {
    /// Focus map probabilities, `(B, 1, H/16, W/16)`.
    pub fm: Var,
    /// Pre-sigmoid logits `[G_1..G_4]` coarse-to-fine.
    pub logits: [Var; 4],
}

impl Bcg {
    pub fn new(prefix: impl Into<String>, cfg: BcgConfig) -> Self {
        Bcg { prefix: prefix.into(), cfg }
    }

    fn head1(&self) -> Conv2d {
        Conv2d::new(format!("{}.head1", self.prefix), self.cfg.channels[0], 1, 3, 1)
    }
    fn head4(&self) -> Conv2d {
        Conv2d::new(format!("{}.head4", self.prefix), self.cfg.channels[3], 1, 3, 1)
    }
    fn theta2(&self) -> Conv2d {
        let in_c = self.cfg.channels[0] + self.cfg.channels[1];
        Conv2d::new(format!("{}.theta2", self.prefix), in_c, 1, 3, 1)
    }
    fn theta3(&self) -> Conv2d {
        let in_c = self.cfg.channels[3] + self.cfg.channels[2];
        Conv2d::new(format!("{}.theta3", self.prefix), in_c, 1, 3, 1)
    }
    fn theta_m(&self) -> Conv2d {
        Conv2d::new(format!("{}.theta_m", self.prefix), 2, 1, 1, 1)
    }

    pub fn register<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.head1().register(store, rng);
        self.head4().register(store, rng);
        self.theta2().register(store, rng);
        self.theta3().register(store, rng);
        // Zero bias so the untrained focus map sits at 0.5.
        self.theta_m().register_with(store, rng, true);
    }

    pub fn register_zeros<F: Real>(&self, store: &mut ParamStore<F>) {
        self.head1().register_zeros(store);
        self.head4().register_zeros(store);
        self.theta2().register_zeros(store);
        self.theta3().register_zeros(store);
        self.theta_m().register_zeros(store);
    }

    /// `sigmoid(logits) * feature + feature`, logits broadcast over channels.
    pub fn query_guide_on_tape<F: Real>(tape: &mut Tape<F>, feature: Var, logits: Var) -> Var {
        let q = tape.sigmoid(logits);
        let qf = tape.mul_bcast_c(q, feature);
        tape.add(qf, feature)
    }

    /// Low-mid cascade on the tape: `(G_1, G_2)` from `F_1`, `F_2`.
    pub fn lmc_on_tape<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        f1: Var,
        f2: Var,
    ) -> (Var, Var) {
        let g1 = self.head1().forward(tape, store, f1);
        let guided = Self::query_guide_on_tape(tape, f1, g1);
        let up = tape.upsample2(guided);
        let cat = tape.concat_c(&[up, f2]);
        let g2 = self.theta2().forward(tape, store, cat);
        (g1, g2)
    }

    /// High-mid cascade: `(G_4, G_3)` from `F_4`, `F_3`; downsampling arm.
    pub fn hmc_on_tape<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        f4: Var,
        f3: Var,
    ) -> (Var, Var) {
        let g4 = self.head4().forward(tape, store, f4);
        let guided = Self::query_guide_on_tape(tape, f4, g4);
        let down = tape.avg_pool2(guided);
        let cat = tape.concat_c(&[down, f3]);
        let g3 = self.theta3().forward(tape, store, cat);
        (g4, g3)
    }

    /// Focus map from the two mid-resolution logits; `g3` (H/8) is
    /// bilinearly downsampled to H/16 before the 1x1 fusion conv.
    pub fn focus_map_on_tape<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        g2: Var,
        g3: Var,
    ) -> Var {
        let (h16, w16) = (tape.shape(g2)[2], tape.shape(g2)[3]);
        let g3_down = tape.resize_bilinear(g3, h16, w16);
        let cat = tape.concat_c(&[g2, g3_down]);
        let fused = self.theta_m().forward(tape, store, cat);
        tape.sigmoid(fused)
    }

    /// Full cascade over pyramid vars `[F_1..F_4]`.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        pyramid: &[Var; 4],
    ) -> FocusVars {
        let (g1, g2) = self.lmc_on_tape(tape, store, pyramid[0], pyramid[1]);
        let (g4, g3) = self.hmc_on_tape(tape, store, pyramid[3], pyramid[2]);
        let fm = self.focus_map_on_tape(tape, store, g2, g3);
        FocusVars { fm, logits: [g1, g2, g3, g4] }
    }
}

/// Learnable parameters of the cascade generator (standalone use).
#[derive(Debug, Clone)]
pub struct BcgParameters<F: Real> {
    pub store: ParamStore<F>,
    pub bcg: Bcg,
}

impl<F: Real> BcgParameters<F> {
    pub fn init(cfg: BcgConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let bcg = Bcg::new("bcg", cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        bcg.register(&mut store, &mut rng);
        BcgParameters { store, bcg }
    }

    /// All-zero parameters (contract tests for the zero-conv cases).
    pub fn zeros(cfg: BcgConfig) -> Self {
        let mut store = ParamStore::new();
        let bcg = Bcg::new("bcg", cfg);
        bcg.register_zeros(&mut store);
        BcgParameters { store, bcg }
    }
}

fn to_batch<F: Real>(a: &Array3<F>) -> ndarray::Array4<F> {
    a.clone().insert_axis(ndarray::Axis(0))
}

fn logits_from_var<F: Real>(tape: &Tape<F>, v: Var, scale: ScaleTag) -> LogitsMap<F> {
    let arr = tape.value4(v);
    let data: Array2<F> = arr
        .index_axis(ndarray::Axis(0), 0)
        .index_axis(ndarray::Axis(0), 0)
        .to_owned();
    LogitsMap { data, scale }
}

/// Query-guide enhancement of a single feature map `(C, h, w)` by logits
/// `(h, w)`: `sigmoid(logits) * F + F`.
pub fn query_guide<F: Real>(feature: &Array3<F>, logits: &LogitsMap<F>) -> Result<Array3<F>> {
    let (h, w) = (feature.shape()[1], feature.shape()[2]);
    if logits.data.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            context: "query_guide".into(),
            expected: vec![h, w],
            actual: logits.data.shape().to_vec(),
        });
    }
    let mut tape = Tape::<F>::new();
    let f = tape.constant4(to_batch(feature));
    let l = tape.constant4(
        logits
            .data
            .clone()
            .insert_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0)),
    );
    let out = Bcg::query_guide_on_tape(&mut tape, f, l);
    Ok(tape.value4(out).index_axis(ndarray::Axis(0), 0).to_owned())
}

fn check_scale_pair<F: Real>(
    coarse: &Array3<F>,
    fine: &Array3<F>,
    context: &str,
) -> Result<()> {
    if fine.shape()[1] != coarse.shape()[1] * 2 || fine.shape()[2] != coarse.shape()[2] * 2 {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: vec![coarse.shape()[1] * 2, coarse.shape()[2] * 2],
            actual: vec![fine.shape()[1], fine.shape()[2]],
        });
    }
    Ok(())
}

/// Standalone low-mid cascade: `(G_1 at H/32, G_2 at H/16)`.
pub fn low_mid_cascade<F: Real>(
    f1: &Array3<F>,
    f2: &Array3<F>,
    params: &BcgParameters<F>,
) -> Result<(LogitsMap<F>, LogitsMap<F>)> {
    check_scale_pair(f1, f2, "low_mid_cascade: F_2 must be 2x F_1")?;
    let mut tape = Tape::new();
    let f1v = tape.constant4(to_batch(f1));
    let f2v = tape.constant4(to_batch(f2));
    let (g1, g2) = params.bcg.lmc_on_tape(&mut tape, &params.store, f1v, f2v);
    Ok((
        logits_from_var(&tape, g1, ScaleTag::S32),
        logits_from_var(&tape, g2, ScaleTag::S16),
    ))
}

/// Standalone high-mid cascade: `(G_4 at H/4, G_3 at H/8)`.
pub fn high_mid_cascade<F: Real>(
    f4: &Array3<F>,
    f3: &Array3<F>,
    params: &BcgParameters<F>,
) -> Result<(LogitsMap<F>, LogitsMap<F>)> {
    check_scale_pair(f3, f4, "high_mid_cascade: F_4 must be 2x F_3")?;
    let mut tape = Tape::new();
    let f4v = tape.constant4(to_batch(f4));
    let f3v = tape.constant4(to_batch(f3));
    let (g4, g3) = params.bcg.hmc_on_tape(&mut tape, &params.store, f4v, f3v);
    Ok((
        logits_from_var(&tape, g4, ScaleTag::S4),
        logits_from_var(&tape, g3, ScaleTag::S8),
    ))
}

/// Fuses the two mid-resolution logits into the focus map at H/16.
pub fn make_focus_map<F: Real>(
    g2: &LogitsMap<F>,
    g3: &LogitsMap<F>,
    params: &BcgParameters<F>,
) -> Result<FocusMap<F>> {
    if g2.scale != ScaleTag::S16 || g3.scale != ScaleTag::S8 {
        return Err(Error::InvalidParameter(format!(
            "make_focus_map expects (1/16, 1/8) scale tags, got ({:?}, {:?})",
            g2.scale, g3.scale
        )));
    }
    if g2.data.iter().chain(g3.data.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "make_focus_map logits".into() });
    }
    let mut tape = Tape::new();
    let g2v = tape.constant4(
        g2.data.clone().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)),
    );
    let g3v = tape.constant4(
        g3.data.clone().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)),
    );
    let fm = params.bcg.focus_map_on_tape(&mut tape, &params.store, g2v, g3v);
    let data: Array2<F> = tape
        .value4(fm)
        .index_axis(ndarray::Axis(0), 0)
        .index_axis(ndarray::Axis(0), 0)
        .to_owned();
    FocusMap::new(data)
}

/// Full focus pass: `(FM, [G_1..G_4])` from a pyramid.
pub fn focus_forward<F: Real>(
    pyramid: &FeaturePyramid<F>,
    params: &BcgParameters<F>,
) -> Result<(FocusMap<F>, [LogitsMap<F>; 4])> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = pyramid.levels().iter().map(|l| tape.constant4(to_batch(l))).collect();
    let vars: [Var; 4] = [vars[0], vars[1], vars[2], vars[3]];
    let out = params.bcg.forward(&mut tape, &params.store, &vars);
    let fm_data: Array2<F> = tape
        .value4(out.fm)
        .index_axis(ndarray::Axis(0), 0)
        .index_axis(ndarray::Axis(0), 0)
        .to_owned();
    let fm = FocusMap::new(fm_data)?;
    let tags = [ScaleTag::S32, ScaleTag::S16, ScaleTag::S8, ScaleTag::S4];
    let logits: Vec<LogitsMap<F>> = out
        .logits
        .iter()
        .zip(tags.iter())
        .map(|(&v, &tag)| logits_from_var(&tape, v, tag))
        .collect();
    Ok((fm, logits.try_into().map_err(|_| Error::InvalidParameter("logits arity".into())).unwrap()))
}
