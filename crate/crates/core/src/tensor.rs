//! Domain tensor types shared across the pipeline, and the scalar trait the
//! numeric core is generic over.

use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};

/// Scalar type the network, losses and compositor are generic over.
///
/// `f32` is the training dtype; `f64` is used by the gradient-check and
/// compositor oracles. Both hit the same code paths.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Append the little-endian byte representation of `values` to `out`.
    fn write_le(values: &[Self], out: &mut Vec<u8>);
    /// Decode values previously written by [`Real::write_le`].
    fn read_le(bytes: &[u8]) -> Result<Vec<Self>>;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le(bytes: &[u8]) -> Result<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return Err(Error::CheckpointFormat("f32 payload not a multiple of 4 bytes".into()));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le(bytes: &[u8]) -> Result<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return Err(Error::CheckpointFormat("f64 payload not a multiple of 8 bytes".into()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }
}

/// Stride of the coarsest pyramid level relative to the input image.
pub const PYRAMID_STRIDE: usize = 32;

/// An RGB image with values in `[0, 1]`, stored `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F: Real>(Array3<F>);

impl<F: Real> ImageTensor<F> {
    /// Validates range, finiteness and channel count. Does NOT require
    /// pyramid divisibility; that is checked where the pyramid needs it.
    pub fn new(data: Array3<F>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::ShapeMismatch {
                context: "ImageTensor".into(),
                expected: vec![data.shape()[0], data.shape()[1], 3],
                actual: data.shape().to_vec(),
            });
        }
        let zero = F::zero();
        let one = F::one();
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "ImageTensor".into() });
            }
            if v < zero || v > one {
                return Err(Error::InvalidParameter(format!(
                    "image value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self(data))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }
    pub fn data(&self) -> &Array3<F> {
        &self.0
    }
    pub fn into_inner(self) -> Array3<F> {
        self.0
    }

    /// Ensures both spatial dims divide the pyramid stride, naming every
    /// offending axis.
    pub fn check_pyramid_divisible(&self) -> Result<()> {
        check_divisible(self.height(), self.width(), PYRAMID_STRIDE)
    }

    /// `(H, W, 3)` to a batch-of-one `(1, 3, H, W)` layout for the network.
    pub fn to_chw_batch(&self) -> Array4<F> {
        let (h, w) = (self.height(), self.width());
        let mut out = Array4::zeros((1, 3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[0, c, y, x]] = self.0[[y, x, c]];
                }
            }
        }
        out
    }
}

pub fn check_divisible(height: usize, width: usize, divisor: usize) -> Result<()> {
    let mut bad = Vec::new();
    if height % divisor != 0 {
        bad.push("height");
    }
    if width % divisor != 0 {
        bad.push("width");
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::DimensionNotDivisible { height, width, divisor, bad_axes: bad })
    }
}

/// Scale of a logits map relative to the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleTag {
    /// H/32 — coarsest.
    S32,
    /// H/16 — mid (low-mid cascade output, focus-map resolution).
    S16,
    /// H/8 — mid (high-mid cascade output).
    S8,
    /// H/4 — finest.
    S4,
}

impl ScaleTag {
    pub fn divisor(self) -> usize {
        match self {
            ScaleTag::S32 => 32,
            ScaleTag::S16 => 16,
            ScaleTag::S8 => 8,
            ScaleTag::S4 => 4,
        }
    }

    /// Tag for pyramid level `i` in 1..=4 (1 coarsest).
    pub fn for_level(i: usize) -> ScaleTag {
        match i {
            1 => ScaleTag::S32,
            2 => ScaleTag::S16,
            3 => ScaleTag::S8,
            4 => ScaleTag::S4,
            _ => panic!("pyramid level out of range: {i}"),
        }
    }
}

/// Single-channel pre-sigmoid logits at one pyramid scale.
#[derive(Debug, Clone)]
pub struct LogitsMap<F: Real> {
    pub data: Array2<F>,
    pub scale: ScaleTag,
}

impl<F: Real> LogitsMap<F> {
    pub fn new(data: Array2<F>, scale: ScaleTag) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "LogitsMap".into() });
        }
        Ok(Self { data, scale })
    }
}

/// The focus map: an `(H/16) x (W/16)` soft prior over the smoke extent.
///
/// Maps produced by the cascade generator are sigmoid outputs and lie
/// strictly inside `(0, 1)`; the type itself admits the closed interval so
/// that all-zero masks (the blank case) and all-ones masks (the
/// focus-module-off fallback) can be represented.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusMap<F: Real>(Array2<F>);

impl<F: Real> FocusMap<F> {
    pub fn new(data: Array2<F>) -> Result<Self> {
        let zero = F::zero();
        let one = F::one();
        for &v in data.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "FocusMap".into() });
            }
            if v < zero || v > one {
                return Err(Error::InvalidParameter(format!(
                    "focus map value {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self(data))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Array2::zeros((h, w)))
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self(Array2::from_elem((h, w), F::one()))
    }

    pub fn data(&self) -> &Array2<F> {
        &self.0
    }
    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Ordered four-level feature pyramid, level 1 coarsest (H/32), level 4
/// finest (H/4). Each level is `(C_i, H_i, W_i)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<F: Real> {
    levels: Vec<Array3<F>>,
}

impl<F: Real> FeaturePyramid<F> {
    pub fn new(levels: Vec<Array3<F>>) -> Result<Self> {
        if levels.len() != 4 {
            return Err(Error::InvalidParameter(format!(
                "feature pyramid must have exactly 4 levels, got {}",
                levels.len()
            )));
        }
        for (i, level) in levels.iter().enumerate() {
            if level.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: format!("pyramid level {}", i + 1) });
            }
        }
        for i in 0..3 {
            let (c, f) = (&levels[i], &levels[i + 1]);
            if f.shape()[1] != c.shape()[1] * 2 || f.shape()[2] != c.shape()[2] * 2 {
                return Err(Error::ShapeMismatch {
                    context: format!("pyramid scale ladder between levels {} and {}", i + 1, i + 2),
                    expected: vec![c.shape()[1] * 2, c.shape()[2] * 2],
                    actual: vec![f.shape()[1], f.shape()[2]],
                });
            }
        }
        Ok(Self { levels })
    }

    /// Level `i` in 1..=4.
    pub fn level(&self, i: usize) -> &Array3<F> {
        &self.levels[i - 1]
    }

    pub fn levels(&self) -> &[Array3<F>] {
        &self.levels
    }

    pub fn channel_config(&self) -> [usize; 4] {
        [
            self.levels[0].shape()[0],
            self.levels[1].shape()[0],
            self.levels[2].shape()[0],
            self.levels[3].shape()[0],
        ]
    }
}

/// Smoke-foreground feature pyramid: `beta * |F^N - F^A|` per level.
#[derive(Debug, Clone)]
pub struct ForegroundPyramid<F: Real> {
    pub levels: Vec<Array3<F>>,
    pub gain: F,
}

/// Binary ground-truth or thresholded prediction mask, `(H, W)`, values 0/1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor(pub Array2<u8>);

impl MaskTensor {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParameter("mask values must be 0 or 1".into()));
        }
        Ok(Self(data))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }
    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    /// Fraction of positive pixels (the smoke pixel ratio).
    pub fn delta(&self) -> f64 {
        let pos: usize = self.0.iter().map(|&v| v as usize).sum();
        pos as f64 / (self.height() * self.width()) as f64
    }

    /// Horizontal flip (used by paired augmentation).
    pub fn fliplr(&self) -> MaskTensor {
        let mut out = self.0.clone();
        out.invert_axis(Axis(1));
        MaskTensor(out)
    }
}
