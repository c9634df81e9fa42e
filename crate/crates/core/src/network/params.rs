use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ConvShape, PoolShape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Formulation {
    Static,
    Aw,
    At,
    Moe,
}

impl Formulation {
    pub const ALL: [Formulation; 4] = [Self::Static, Self::Aw, Self::At, Self::Moe];

    pub fn uses_context(self) -> bool {
        self != Formulation::Static
    }

    pub fn name(self) -> &'static str {
        match self {
            Formulation::Static => "STATIC",
            Formulation::Aw => "AW",
            Formulation::At => "AT",
            Formulation::Moe => "MOE",
        }
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "STATIC" => Ok(Self::Static),
            "AW" => Ok(Self::Aw),
            "AT" => Ok(Self::At),
            "MOE" => Ok(Self::Moe),
            other => Err(Error::InvalidArgument(format!("unknown formulation {other:?}"))),
        }
    }
}

/// Patch and layer sizes of the two-branch network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub frames: usize,
    pub bands: usize,
    pub channels: [usize; 3],
    pub kernel: [usize; 2],
    pub pool: [usize; 2],
    pub hidden: usize,
    pub context_quantiles: usize,
    pub context_bands: usize,
    pub aux_kernels: usize,
    pub experts: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self::full()
    }
}

impl Geometry {
    /// 104 × 128 patches, 24/24/48 kernels of 5×5, 4×2 pooling.
    pub fn full() -> Self {
        Self {
            frames: 104,
            bands: 128,
            channels: [24, 24, 48],
            kernel: [5, 5],
            pool: [4, 2],
            hidden: 64,
            context_quantiles: 9,
            context_bands: 32,
            aux_kernels: 8,
            experts: 4,
        }
    }

    /// 52 × 64 patches with half-width layers. Pooling is 2×2 because two
    /// 4×2 poolings leave fewer than five frames for the third convolution.
    pub fn desk() -> Self {
        Self {
            frames: 52,
            bands: 64,
            channels: [12, 12, 24],
            pool: [2, 2],
            ..Self::full()
        }
    }

    pub fn conv_shapes(&self) -> [ConvShape; 3] {
        let [kh, kw] = self.kernel;
        let c1 = ConvShape { in_channels: 1, out_channels: self.channels[0], in_h: self.frames, in_w: self.bands, kh, kw };
        let p1 = self.pool_shapes_from(&c1);
        let c2 = ConvShape { in_channels: self.channels[0], out_channels: self.channels[1], in_h: p1.out_h(), in_w: p1.out_w(), kh, kw };
        let p2 = self.pool_shapes_from(&c2);
        let c3 = ConvShape { in_channels: self.channels[1], out_channels: self.channels[2], in_h: p2.out_h(), in_w: p2.out_w(), kh, kw };
        [c1, c2, c3]
    }

    fn pool_shapes_from(&self, c: &ConvShape) -> PoolShape {
        PoolShape { channels: c.out_channels, in_h: c.out_h(), in_w: c.out_w(), ph: self.pool[0], pw: self.pool[1] }
    }

    pub fn pool_shapes(&self) -> [PoolShape; 2] {
        let [c1, c2, _] = self.conv_shapes();
        [self.pool_shapes_from(&c1), self.pool_shapes_from(&c2)]
    }

    pub fn flatten_len(&self) -> usize {
        let c3 = self.conv_shapes()[2];
        c3.out_channels * c3.positions()
    }

    pub fn aux_flatten_len(&self) -> usize {
        self.context_quantiles * self.aux_kernels
    }

    /// Size M of each expert's mixture.
    pub fn mixture(&self) -> usize {
        self.hidden / self.experts
    }

    pub fn validate(&self) -> Result<()> {
        let [kh, kw] = self.kernel;
        let fits = |h: usize, w: usize| h >= kh && w >= kw;
        if !fits(self.frames, self.bands) {
            return Err(Error::Config(format!("patch {}x{} smaller than kernel", self.frames, self.bands)));
        }
        if self.pool[0] == 0 || self.pool[1] == 0 || self.kernel.contains(&0) || self.channels.contains(&0) {
            return Err(Error::Config("kernel, pool and channel sizes must be positive".into()));
        }
        let [c1, c2, c3] = self.conv_shapes();
        let p = self.pool_shapes();
        let _ = (c1, p[0]);
        if !fits(c2.in_h, c2.in_w) || !fits(c3.in_h, c3.in_w) {
            return Err(Error::Config(format!(
                "geometry {self:?} leaves no room for valid convolutions"
            )));
        }
        if self.experts == 0 || self.hidden % self.experts != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} experts",
                self.hidden, self.experts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn empty() -> Self {
        Self { shape: vec![0], data: Vec::new() }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::mismatch(shape, data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(-limit..limit)).collect() }
    }
}

pub const PARAM_NAMES: [&str; 17] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "dense_w", "dense_b",
    "aux_conv_w", "aux_conv_b", "aux_dense_w", "aux_dense_b",
    "merge_w", "merge_b", "merge_w_aux", "moe_w_aux", "moe_b_aux",
];

/// Every learnable tensor. Tensors a formulation does not use are empty.
/// Gradients and optimizer moments share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
    pub aux_conv_w: Tensor,
    pub aux_conv_b: Tensor,
    pub aux_dense_w: Tensor,
    pub aux_dense_b: Tensor,
    /// Static output weights (STATIC, AT, MOE).
    pub merge_w: Tensor,
    /// Output bias (STATIC, AW, MOE).
    pub merge_b: Tensor,
    /// Projection of the auxiliary representation (AT).
    pub merge_w_aux: Tensor,
    /// Gate weights, `M × K` row-major (MOE).
    pub moe_w_aux: Tensor,
    /// Gate biases, `K` (MOE).
    pub moe_b_aux: Tensor,
}

impl Weights {
    pub fn tensors(&self) -> [&Tensor; 17] {
        [
            &self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b, &self.conv3_w,
            &self.conv3_b, &self.dense_w, &self.dense_b, &self.aux_conv_w, &self.aux_conv_b,
            &self.aux_dense_w, &self.aux_dense_b, &self.merge_w, &self.merge_b,
            &self.merge_w_aux, &self.moe_w_aux, &self.moe_b_aux,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 17] {
        [
            &mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b,
            &mut self.conv3_w, &mut self.conv3_b, &mut self.dense_w, &mut self.dense_b,
            &mut self.aux_conv_w, &mut self.aux_conv_b, &mut self.aux_dense_w,
            &mut self.aux_dense_b, &mut self.merge_w, &mut self.merge_b, &mut self.merge_w_aux,
            &mut self.moe_w_aux, &mut self.moe_b_aux,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shapes(&self, other: &Weights) -> Result<()> {
        for ((name, a), b) in self.named().zip(other.tensors()) {
            if a.shape != b.shape || a.data.len() != b.data.len() {
                return Err(Error::DimensionMismatch {
                    expected: format!("{name} {:?}", a.shape),
                    actual: format!("{name} {:?}", b.shape),
                });
            }
        }
        Ok(())
    }

    /// Expected tensor shapes for a geometry and formulation.
    pub fn shapes(g: &Geometry, f: Formulation) -> [Vec<usize>; 17] {
        let [c1, c2, c3] = g.conv_shapes();
        let [kh, kw] = g.kernel;
        let ctx = f.uses_context();
        let pick = |on: bool, s: Vec<usize>| if on { s } else { vec![0] };
        [
            vec![c1.out_channels, 1, kh, kw],
            vec![c1.out_channels],
            vec![c2.out_channels, c2.in_channels, kh, kw],
            vec![c2.out_channels],
            vec![c3.out_channels, c3.in_channels, kh, kw],
            vec![c3.out_channels],
            vec![g.hidden, g.flatten_len()],
            vec![g.hidden],
            pick(ctx, vec![g.aux_kernels, g.context_bands]),
            pick(ctx, vec![g.aux_kernels]),
            pick(ctx, vec![g.hidden, g.aux_flatten_len()]),
            pick(ctx, vec![g.hidden]),
            pick(f != Formulation::Aw, vec![g.hidden]),
            pick(f != Formulation::At, vec![1]),
            pick(f == Formulation::At, vec![g.hidden]),
            pick(f == Formulation::Moe, vec![g.mixture(), g.experts]),
            pick(f == Formulation::Moe, vec![g.experts]),
        ]
    }

    pub fn zeros(g: &Geometry, f: Formulation) -> Self {
        let s = Self::shapes(g, f);
        let t = |i: usize| if s[i] == [0] { Tensor::empty() } else { Tensor::zeros(&s[i]) };
        Self {
            conv1_w: t(0), conv1_b: t(1), conv2_w: t(2), conv2_b: t(3), conv3_w: t(4),
            conv3_b: t(5), dense_w: t(6), dense_b: t(7), aux_conv_w: t(8), aux_conv_b: t(9),
            aux_dense_w: t(10), aux_dense_b: t(11), merge_w: t(12), merge_b: t(13),
            merge_w_aux: t(14), moe_w_aux: t(15), moe_b_aux: t(16),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(g: &Geometry, f: Formulation, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Self::zeros(g, f);
        let [c1, c2, c3] = g.conv_shapes();
        let k = g.kernel[0] * g.kernel[1];
        w.conv1_w = Tensor::glorot(&w.conv1_w.shape.clone(), k, c1.out_channels * k, rng);
        w.conv2_w = Tensor::glorot(&w.conv2_w.shape.clone(), c2.in_channels * k, c2.out_channels * k, rng);
        w.conv3_w = Tensor::glorot(&w.conv3_w.shape.clone(), c3.in_channels * k, c3.out_channels * k, rng);
        w.dense_w = Tensor::glorot(&w.dense_w.shape.clone(), g.flatten_len(), g.hidden, rng);
        if f.uses_context() {
            w.aux_conv_w = Tensor::glorot(&w.aux_conv_w.shape.clone(), g.context_bands, g.aux_kernels * g.context_bands, rng);
            w.aux_dense_w = Tensor::glorot(&w.aux_dense_w.shape.clone(), g.aux_flatten_len(), g.hidden, rng);
        }
        if !w.merge_w.is_empty() {
            w.merge_w = Tensor::glorot(&[g.hidden], g.hidden, 1, rng);
        }
        if !w.merge_w_aux.is_empty() {
            w.merge_w_aux = Tensor::glorot(&[g.hidden], g.hidden, 1, rng);
        }
        if !w.moe_w_aux.is_empty() {
            w.moe_w_aux = Tensor::glorot(&[g.mixture(), g.experts], g.mixture(), g.experts, rng);
        }
        w
    }
}

/// Fixed affine map applied to patch and context values before the
/// network: `(x - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub shift: f64,
    pub scale: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self { shift: 0.0, scale: 1.0 }
    }
}

impl InputNorm {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }
}

/// A complete detector: geometry, formulation and learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub geometry: Geometry,
    pub formulation: Formulation,
    pub input_norm: InputNorm,
    pub weights: Weights,
}

impl DetectorParams {
    pub fn init(geometry: Geometry, formulation: Formulation, rng: &mut ChaCha8Rng) -> Result<Self> {
        geometry.validate()?;
        Ok(Self {
            weights: Weights::init(&geometry, formulation, rng),
            geometry,
            formulation,
            input_norm: InputNorm::default(),
        })
    }

    pub fn zeros(geometry: Geometry, formulation: Formulation) -> Result<Self> {
        geometry.validate()?;
        Ok(Self {
            weights: Weights::zeros(&geometry, formulation),
            geometry,
            formulation,
            input_norm: InputNorm::default(),
        })
    }

    /// Checks every tensor against the shapes implied by geometry and
    /// formulation.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let expected = Weights::shapes(&self.geometry, self.formulation);
        for ((name, t), shape) in self.weights.named().zip(expected) {
            let ok = if shape == [0] { t.is_empty() } else { t.shape == shape && t.len() == shape.iter().product::<usize>() };
            if !ok {
                return Err(Error::DimensionMismatch {
                    expected: format!("{name} {shape:?} for {} {:?}", self.formulation.name(), self.geometry),
                    actual: format!("{name} {:?}", t.shape),
                });
            }
        }
        Ok(())
    }
}
