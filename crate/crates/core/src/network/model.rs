//! Forward and backward passes of the two-branch detector.

use super::layers::{
    conv_relu_backward, conv_relu_forward, dense_relu_backward, dense_relu_forward,
    maxpool_backward, maxpool_forward,
};
use super::merge::{dot, moe_terms, sigmoid, MoeTerms};
use super::params::{DetectorParams, Formulation, Weights};
use crate::context::ContextSlice;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the loss.
pub const CLAMP: f64 = 1e-7;
pub const DEFAULT_L2: f64 = 1e-3;

/// A fixed-size clip of the time–frequency representation, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPatch {
    pub values: Vec<f64>,
    pub frames: usize,
    pub bands: usize,
}

impl ClipPatch {
    pub fn new(values: Vec<f64>, frames: usize, bands: usize) -> Result<Self> {
        if values.len() != frames * bands {
            return Err(Error::mismatch(frames * bands, values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { values, frames, bands })
    }

    pub fn constant(v: f64, frames: usize, bands: usize) -> Self {
        Self { values: vec![v; frames * bands], frames, bands }
    }
}

/// A labelled training clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub patch: ClipPatch,
    pub context: ContextSlice,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct MainActivations {
    input: Vec<f64>,
    col1: Vec<f64>,
    a1: Vec<f64>,
    idx1: Vec<usize>,
    p1: Vec<f64>,
    col2: Vec<f64>,
    a2: Vec<f64>,
    idx2: Vec<usize>,
    p2: Vec<f64>,
    col3: Vec<f64>,
    a3: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AuxActivations {
    mu: Vec<f64>,
    h: Vec<f64>,
    pub z_aux: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub main: MainActivations,
    pub aux: Option<AuxActivations>,
    moe: Option<MoeTerms>,
    pub logit: f64,
    pub y: f64,
}

impl Forward {
    /// ReLU on/off states, max-pooling choices and clamp state. The loss is
    /// a smooth function of the weights wherever this pattern stays fixed.
    pub fn pattern(&self) -> Vec<u32> {
        let m = &self.main;
        let mut p: Vec<u32> = [&m.a1, &m.a2, &m.a3, &m.z]
            .iter()
            .flat_map(|v| v.iter().map(|&x| (x > 0.0) as u32))
            .collect();
        p.extend(m.idx1.iter().chain(&m.idx2).map(|&i| i as u32));
        if let Some(a) = &self.aux {
            p.extend(a.h.iter().chain(&a.z_aux).map(|&x| (x > 0.0) as u32));
        }
        p.push((self.y <= CLAMP || self.y >= 1.0 - CLAMP) as u32);
        p
    }
}

pub fn forward_main(x: &ClipPatch, params: &DetectorParams) -> Result<MainActivations> {
    let g = &params.geometry;
    if (x.frames, x.bands) != (g.frames, g.bands) {
        return Err(Error::mismatch((g.frames, g.bands), (x.frames, x.bands)));
    }
    let w = &params.weights;
    let [s1, s2, s3] = g.conv_shapes();
    let [q1, q2] = g.pool_shapes();
    let input: Vec<f64> = x.values.iter().map(|&v| params.input_norm.apply(v)).collect();
    let mut col1 = Vec::new();
    let a1 = conv_relu_forward(&s1, &input, &w.conv1_w.data, &w.conv1_b.data, &mut col1);
    let (p1, idx1) = maxpool_forward(&q1, &a1);
    let mut col2 = Vec::new();
    let a2 = conv_relu_forward(&s2, &p1, &w.conv2_w.data, &w.conv2_b.data, &mut col2);
    let (p2, idx2) = maxpool_forward(&q2, &a2);
    let mut col3 = Vec::new();
    let a3 = conv_relu_forward(&s3, &p2, &w.conv3_w.data, &w.conv3_b.data, &mut col3);
    let z = dense_relu_forward(&w.dense_w.data, &w.dense_b.data, &a3);
    Ok(MainActivations { input, col1, a1, idx1, p1, col2, a2, idx2, p2, col3, a3, z })
}

pub fn forward_aux(c: &ContextSlice, params: &DetectorParams) -> Result<AuxActivations> {
    let g = &params.geometry;
    if (c.n_quantiles, c.n_bands) != (g.context_quantiles, g.context_bands) {
        return Err(Error::mismatch(
            (g.context_quantiles, g.context_bands),
            (c.n_quantiles, c.n_bands),
        ));
    }
    let w = &params.weights;
    if w.aux_conv_w.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters have no auxiliary branch",
            params.formulation.name()
        )));
    }
    let mu: Vec<f64> = c.values.iter().map(|&v| params.input_norm.apply(v)).collect();
    let nk = g.aux_kernels;
    let mut h = Vec::with_capacity(g.aux_flatten_len());
    for row in mu.chunks(g.context_bands) {
        for (kernel, b) in w.aux_conv_w.data.chunks(g.context_bands).zip(&w.aux_conv_b.data) {
            h.push((b + dot(kernel, row)).max(0.0));
        }
    }
    debug_assert_eq!(h.len(), g.context_quantiles * nk);
    let z_aux = dense_relu_forward(&w.aux_dense_w.data, &w.aux_dense_b.data, &h);
    Ok(AuxActivations { mu, h, z_aux })
}

pub fn forward(x: &ClipPatch, c: &ContextSlice, params: &DetectorParams) -> Result<Forward> {
    let main = forward_main(x, params)?;
    let w = &params.weights;
    let z = &main.z;
    let (aux, moe, logit) = match params.formulation {
        Formulation::Static => (None, None, w.merge_b.data[0] + dot(&w.merge_w.data, z)),
        Formulation::Aw => {
            let aux = forward_aux(c, params)?;
            let a = w.merge_b.data[0] + dot(&aux.z_aux, z);
            (Some(aux), None, a)
        }
        Formulation::At => {
            let aux = forward_aux(c, params)?;
            let a = dot(&w.merge_w_aux.data, &aux.z_aux) + dot(&w.merge_w.data, z);
            (Some(aux), None, a)
        }
        Formulation::Moe => {
            let aux = forward_aux(c, params)?;
            let t = moe_terms(
                z,
                &aux.z_aux,
                &w.merge_w.data,
                w.merge_b.data[0],
                &w.moe_w_aux.data,
                &w.moe_b_aux.data,
            )?;
            let a = t.logit;
            (Some(aux), Some(t), a)
        }
    };
    Ok(Forward { main, aux, moe, logit, y: sigmoid(logit) })
}

/// Probability of presence for one clip.
pub fn predict(x: &ClipPatch, c: &ContextSlice, params: &DetectorParams) -> Result<f64> {
    Ok(forward(x, c, params)?.y)
}

/// Binary cross-entropy on the clamped probability.
pub fn bce(y: f64, label: bool) -> f64 {
    let y = y.clamp(CLAMP, 1.0 - CLAMP);
    if label {
        -y.ln()
    } else {
        -(1.0 - y).ln()
    }
}

pub fn l2_penalty(weights: &Weights, l2: f64) -> f64 {
    l2 * weights.dense_w.data.iter().map(|v| v * v).sum::<f64>()
}

/// Single-clip loss: cross-entropy plus the L2 penalty on the main dense layer.
pub fn bce_loss(y: f64, label: bool, weights: &Weights, l2: f64) -> f64 {
    bce(y, label) + l2_penalty(weights, l2)
}

/// Accumulates `scale · ∂bce/∂θ` for one forward pass into `grads`.
pub fn backward(fwd: &Forward, label: bool, params: &DetectorParams, scale: f64, grads: &mut Weights) {
    let y = fwd.y;
    if !(CLAMP..=1.0 - CLAMP).contains(&y) {
        return;
    }
    let t = if label { 1.0 } else { 0.0 };
    let dlogit = scale * (y - t);
    let w = &params.weights;
    let z = &fwd.main.z;
    let n = z.len();
    let mut dz = vec![0.0; n];
    let mut dz_aux: Option<Vec<f64>> = None;
    match params.formulation {
        Formulation::Static => {
            grads.merge_b.data[0] += dlogit;
            for i in 0..n {
                grads.merge_w.data[i] += dlogit * z[i];
                dz[i] = dlogit * w.merge_w.data[i];
            }
        }
        Formulation::Aw => {
            let za = &fwd.aux.as_ref().unwrap().z_aux;
            grads.merge_b.data[0] += dlogit;
            dz_aux = Some(z.iter().map(|v| dlogit * v).collect());
            for i in 0..n {
                dz[i] = dlogit * za[i];
            }
        }
        Formulation::At => {
            let za = &fwd.aux.as_ref().unwrap().z_aux;
            let mut dza = vec![0.0; n];
            for i in 0..n {
                grads.merge_w.data[i] += dlogit * z[i];
                grads.merge_w_aux.data[i] += dlogit * za[i];
                dz[i] = dlogit * w.merge_w.data[i];
                dza[i] = dlogit * w.merge_w_aux.data[i];
            }
            dz_aux = Some(dza);
        }
        Formulation::Moe => {
            let za = &fwd.aux.as_ref().unwrap().z_aux;
            let terms = fwd.moe.as_ref().unwrap();
            let k = terms.gates.len();
            let m = n / k;
            grads.merge_b.data[0] += dlogit;
            let mean: f64 = dot(&terms.gates, &terms.experts);
            let dalpha: Vec<f64> = (0..k)
                .map(|j| dlogit * terms.gates[j] * (terms.experts[j] - mean))
                .collect();
            let mut dza = vec![0.0; n];
            for mi in 0..m {
                for ki in 0..k {
                    let idx = k * mi + ki;
                    let g = terms.gates[ki];
                    grads.merge_w.data[idx] += dlogit * g * z[idx];
                    dz[idx] = dlogit * g * w.merge_w.data[idx];
                    grads.moe_w_aux.data[mi * k + ki] += dalpha[ki] * za[idx];
                    dza[idx] = dalpha[ki] * w.moe_w_aux.data[mi * k + ki];
                }
            }
            for (gb, d) in grads.moe_b_aux.data.iter_mut().zip(&dalpha) {
                *gb += d;
            }
            dz_aux = Some(dza);
        }
    }
    backward_main(&fwd.main, params, &mut dz, grads);
    if let (Some(mut dza), Some(aux)) = (dz_aux, fwd.aux.as_ref()) {
        backward_aux(aux, params, &mut dza, grads);
    }
}

fn backward_main(a: &MainActivations, params: &DetectorParams, dz: &mut [f64], grads: &mut Weights) {
    let g = &params.geometry;
    let w = &params.weights;
    let [s1, s2, s3] = g.conv_shapes();
    let mut da3 = vec![0.0; a.a3.len()];
    dense_relu_backward(
        &w.dense_w.data,
        &a.a3,
        &a.z,
        dz,
        &mut grads.dense_w.data,
        &mut grads.dense_b.data,
        Some(&mut da3),
    );
    let mut dp2 = vec![0.0; a.p2.len()];
    conv_relu_backward(
        &s3, &a.a3, &mut da3, &a.col3, &w.conv3_w.data,
        &mut grads.conv3_w.data, &mut grads.conv3_b.data, Some(&mut dp2),
    );
    let mut da2 = vec![0.0; a.a2.len()];
    maxpool_backward(&dp2, &a.idx2, &mut da2);
    let mut dp1 = vec![0.0; a.p1.len()];
    conv_relu_backward(
        &s2, &a.a2, &mut da2, &a.col2, &w.conv2_w.data,
        &mut grads.conv2_w.data, &mut grads.conv2_b.data, Some(&mut dp1),
    );
    let mut da1 = vec![0.0; a.a1.len()];
    maxpool_backward(&dp1, &a.idx1, &mut da1);
    debug_assert_eq!(a.input.len(), s1.in_h * s1.in_w);
    conv_relu_backward(
        &s1, &a.a1, &mut da1, &a.col1, &w.conv1_w.data,
        &mut grads.conv1_w.data, &mut grads.conv1_b.data, None,
    );
}

fn backward_aux(a: &AuxActivations, params: &DetectorParams, dz_aux: &mut [f64], grads: &mut Weights) {
    let g = &params.geometry;
    let w = &params.weights;
    let mut dh = vec![0.0; a.h.len()];
    dense_relu_backward(
        &w.aux_dense_w.data,
        &a.h,
        &a.z_aux,
        dz_aux,
        &mut grads.aux_dense_w.data,
        &mut grads.aux_dense_b.data,
        Some(&mut dh),
    );
    let nk = g.aux_kernels;
    let nb = g.context_bands;
    for (q, row) in a.mu.chunks(nb).enumerate() {
        for k in 0..nk {
            let i = q * nk + k;
            if a.h[i] <= 0.0 {
                continue;
            }
            let d = dh[i];
            grads.aux_conv_b.data[k] += d;
            for (gw, &m) in grads.aux_conv_w.data[k * nb..(k + 1) * nb].iter_mut().zip(row) {
                *gw += d * m;
            }
        }
    }
}

/// Adds the gradient of the L2 penalty.
pub fn add_l2_grad(weights: &Weights, l2: f64, grads: &mut Weights) {
    for (g, w) in grads.dense_w.data.iter_mut().zip(&weights.dense_w.data) {
        *g += 2.0 * l2 * w;
    }
}

/// Mean cross-entropy over the batch plus the L2 penalty.
pub fn batch_loss(batch: &[Example], params: &DetectorParams, l2: f64) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        total += bce(predict(&ex.patch, &ex.context, params)?, ex.label);
    }
    Ok(total / batch.len() as f64 + l2_penalty(&params.weights, l2))
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
    pub grads: Weights,
}

/// Loss, accuracy count and exact gradients of [`batch_loss`].
pub fn batch_gradients(batch: &[Example], params: &DetectorParams, l2: f64) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grads = params.weights.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    for ex in batch {
        let fwd = forward(&ex.patch, &ex.context, params)?;
        loss += bce(fwd.y, ex.label);
        if is_correct(fwd.y, ex.label) {
            correct += 1;
        }
        backward(&fwd, ex.label, params, scale, &mut grads);
    }
    add_l2_grad(&params.weights, l2, &mut grads);
    Ok(BatchResult {
        loss: loss * scale + l2_penalty(&params.weights, l2),
        correct,
        grads,
    })
}

/// A clip counts as correct when `|y - y_true| < 0.5`.
pub fn is_correct(y: f64, label: bool) -> bool {
    let t = if label { 1.0 } else { 0.0 };
    (y - t).abs() < 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Geometry {
        Geometry {
            frames: 18,
            bands: 19,
            channels: [2, 3, 2],
            kernel: [3, 3],
            pool: [2, 2],
            hidden: 8,
            context_quantiles: 3,
            context_bands: 4,
            aux_kernels: 2,
            experts: 2,
        }
    }

    fn random_example(g: &Geometry, rng: &mut ChaCha8Rng) -> Example {
        ClipPatch::new((0..g.frames * g.bands).map(|_| rng.random_range(-1.0..1.0)).collect(), g.frames, g.bands)
            .map(|patch| Example {
                patch,
                context: ContextSlice {
                    values: (0..g.context_quantiles * g.context_bands).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    n_quantiles: g.context_quantiles,
                    n_bands: g.context_bands,
                },
                label: rng.random_bool(0.5),
            })
            .unwrap()
    }

    fn randomize(p: &mut DetectorParams, rng: &mut ChaCha8Rng) {
        for t in p.weights.tensors_mut() {
            for v in &mut t.data {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_z_and_half_probability() {
        let g = Geometry::desk();
        let p = DetectorParams::zeros(g, Formulation::Static).unwrap();
        let x = ClipPatch::constant(0.3, g.frames, g.bands);
        let m = forward_main(&x, &p).unwrap();
        assert_eq!(m.z.len(), 64);
        assert!(m.z.iter().all(|&v| v == 0.0));
        assert_eq!(predict(&x, &ContextSlice::zeros(9, 32), &p).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let g = Geometry::desk();
        let p = DetectorParams::zeros(g, Formulation::At).unwrap();
        let x = ClipPatch::constant(0.0, 10, 10);
        assert!(forward_main(&x, &p).is_err());
        let x = ClipPatch::constant(0.0, g.frames, g.bands);
        assert!(forward(&x, &ContextSlice::zeros(9, 31), &p).is_err());
    }

    #[test]
    fn aux_indicator_kernel_reproduces_quantiles() {
        let g = Geometry::desk();
        let mut p = DetectorParams::zeros(g, Formulation::Aw).unwrap();
        let f0 = 7;
        p.weights.aux_conv_w.data[f0] = 1.0; // kernel 0 picks band f0
        // Output node q copies activation (q, kernel 0) = flat index q * 8.
        for q in 0..9 {
            p.weights.aux_dense_w.data[q * 72 + q * 8] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = ContextSlice {
            values: (0..9 * 32).map(|_| rng.random_range(-1.0..1.0)).collect(),
            n_quantiles: 9,
            n_bands: 32,
        };
        p.weights.aux_dense_b.data[0] = 0.25;
        let a = forward_aux(&c, &p).unwrap();
        assert_eq!(a.z_aux[0], c.get(0, f0).max(0.0) + 0.25);
        for q in 1..9 {
            assert_eq!(a.z_aux[q], c.get(q, f0).max(0.0));
        }
        assert!(a.z_aux[9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aux_matches_naive_matrix_products() {
        let g = Geometry::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = DetectorParams::zeros(g, Formulation::Moe).unwrap();
        randomize(&mut p, &mut rng);
        let c = ContextSlice {
            values: (0..9 * 32).map(|_| rng.random_range(-1.0..1.0)).collect(),
            n_quantiles: 9,
            n_bands: 32,
        };
        let a = forward_aux(&c, &p).unwrap();
        let w = &p.weights;
        let mut h = vec![0.0; 72];
        for q in 0..9 {
            for k in 0..8 {
                let mut s = w.aux_conv_b.data[k];
                for f in 0..32 {
                    s += w.aux_conv_w.data[k * 32 + f] * c.get(q, f);
                }
                h[q * 8 + k] = s.max(0.0);
            }
        }
        for n in 0..64 {
            let mut s = w.aux_dense_b.data[n];
            for i in 0..72 {
                s += w.aux_dense_w.data[n * 72 + i] * h[i];
            }
            let want: f64 = s.max(0.0);
            assert!((a.z_aux[n] - want).abs() <= 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn loss_examples() {
        let w = Weights::zeros(&Geometry::desk(), Formulation::Static);
        assert!((bce_loss(1.0, true, &w, DEFAULT_L2) - 1e-7).abs() < 1e-12);
        assert!((bce_loss(0.5, false, &w, DEFAULT_L2) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(0.5, true, &w, DEFAULT_L2) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(0.9, false, &w, 0.0) - 10f64.ln()).abs() < 1e-12);
        let mut w2 = w.clone();
        w2.dense_w.data[0] = 2.0;
        assert!((bce_loss(0.9, false, &w2, DEFAULT_L2) - 10f64.ln() - 4e-3).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences_on_tiny_network() {
        let g = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for f in Formulation::ALL {
            let mut p = DetectorParams::zeros(g, f).unwrap();
            randomize(&mut p, &mut rng);
            let batch: Vec<Example> = (0..3).map(|_| random_example(&g, &mut rng)).collect();
            let analytic = batch_gradients(&batch, &p, 0.01).unwrap().grads;
            let h = 1e-5;
            for (ti, t) in analytic.tensors().iter().enumerate() {
                for i in 0..t.len() {
                    let mut plus = p.clone();
                    plus.weights.tensors_mut()[ti].data[i] += h;
                    let mut minus = p.clone();
                    minus.weights.tensors_mut()[ti].data[i] -= h;
                    let fd = (batch_loss(&batch, &plus, 0.01).unwrap()
                        - batch_loss(&batch, &minus, 0.01).unwrap())
                        / (2.0 * h);
                    let a = t.data[i];
                    let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(err < 1e-5, "{:?} tensor {ti} idx {i}: {a} vs {fd}", f);
                }
            }
        }
    }

    #[test]
    fn saturated_prediction_has_near_zero_gradient() {
        let g = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = DetectorParams::zeros(g, Formulation::Static).unwrap();
        randomize(&mut p, &mut rng);
        p.weights.merge_b.data[0] = 40.0;
        let mut ex = random_example(&g, &mut rng);
        ex.label = true;
        let r = batch_gradients(&[ex], &p, 0.0).unwrap();
        for t in r.grads.tensors() {
            assert!(t.data.iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn dead_dense_unit_has_zero_incoming_gradient() {
        let g = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = DetectorParams::zeros(g, Formulation::Static).unwrap();
        randomize(&mut p, &mut rng);
        p.weights.dense_b.data[2] = -1e6;
        let batch: Vec<Example> = (0..4).map(|_| random_example(&g, &mut rng)).collect();
        let r = batch_gradients(&batch, &p, 0.0).unwrap();
        let n_in = g.flatten_len();
        assert!(r.grads.dense_w.data[2 * n_in..3 * n_in].iter().all(|&v| v == 0.0));
        assert_eq!(r.grads.dense_b.data[2], 0.0);
    }
}
