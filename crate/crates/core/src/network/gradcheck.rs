//! Central finite-difference check of the analytic gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::model::{batch_gradients, batch_loss, forward, ClipPatch, Example};
use super::params::{DetectorParams, Formulation, Geometry, PARAM_NAMES};
use crate::context::ContextSlice;
use crate::error::Result;

/// Denominator floor of the relative error, for near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose ±h probes crossed a ReLU kink or switched a
    /// pooling winner; central differences are not valid there.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// (tensor, index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(&'static str, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if self.worst.is_none() || other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn patterns(batch: &[Example], params: &DetectorParams) -> Result<Vec<Vec<u32>>> {
    batch.iter().map(|ex| Ok(forward(&ex.patch, &ex.context, params)?.pattern())).collect()
}

/// Random parameters (Glorot weights, small random biases) and a batch of
/// random clips with mixed labels.
pub fn random_instance(
    geometry: Geometry,
    formulation: Formulation,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(DetectorParams, Vec<Example>)> {
    let mut params = DetectorParams::init(geometry, formulation, rng)?;
    let w = &mut params.weights;
    for b in [&mut w.conv1_b, &mut w.conv2_b, &mut w.conv3_b, &mut w.dense_b, &mut w.aux_conv_b, &mut w.aux_dense_b, &mut w.merge_b, &mut w.moe_b_aux] {
        b.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let g = geometry;
    let examples = (0..batch)
        .map(|i| {
            let patch = ClipPatch::new(
                (0..g.frames * g.bands).map(|_| rng.random_range(-1.0..1.0)).collect(),
                g.frames,
                g.bands,
            )?;
            let context = ContextSlice {
                values: (0..g.context_quantiles * g.context_bands).map(|_| rng.random_range(-1.0..1.0)).collect(),
                n_quantiles: g.context_quantiles,
                n_bands: g.context_bands,
            };
            Ok(Example { patch, context, label: i % 2 == 0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((params, examples))
}

/// Compares analytic gradients of the mean batch loss with central
/// differences of step `h` on up to `per_tensor` randomly chosen
/// coordinates of every non-empty tensor.
pub fn check_gradients(
    batch: &[Example],
    params: &DetectorParams,
    l2: f64,
    h: f64,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let analytic = batch_gradients(batch, params, l2)?.grads;
    let base = patterns(batch, params)?;
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (ti, t) in analytic.tensors().iter().enumerate() {
        if t.is_empty() {
            continue;
        }
        let picks: Vec<usize> = if t.len() <= per_tensor {
            (0..t.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..t.len())).collect()
        };
        for i in picks {
            let orig = probe.weights.tensors()[ti].data[i];
            probe.weights.tensors_mut()[ti].data[i] = orig + h;
            let up = batch_loss(batch, &probe, l2)?;
            let smooth_up = patterns(batch, &probe)? == base;
            probe.weights.tensors_mut()[ti].data[i] = orig - h;
            let down = batch_loss(batch, &probe, l2)?;
            let smooth_down = patterns(batch, &probe)? == base;
            probe.weights.tensors_mut()[ti].data[i] = orig;
            if !(smooth_up && smooth_down) {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(t.data[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((PARAM_NAMES[ti], i, t.data[i], numeric));
            }
        }
    }
    Ok(report)
}
