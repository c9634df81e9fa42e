//! Convolution, pooling and dense primitives with explicit backward passes.
//!
//! Feature maps are channel-major `[c][h][w]`. Convolutions are valid
//! (no padding), stride one, computed as im2col followed by a GEMM.

/// `c = a (m×k) · b (k×n) + beta · c`, all row-major.
#[inline]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += a (m×k) · bᵀ` where `b` is stored row-major as `n×k`.
#[inline]
fn gemm_bt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = aᵀ · b` where `a` is stored row-major as `k×m` and `b` is `k×n`.
#[inline]
fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        self.in_h + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 1 - self.kw
    }

    /// Rows of the im2col matrix (`in_channels * kh * kw`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }
}

pub fn im2col(s: &ConvShape, input: &[f64], col: &mut Vec<f64>) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let p = oh * ow;
    col.clear();
    col.resize(s.patch_len() * p, 0.0);
    for c in 0..s.in_channels {
        let plane = &input[c * s.in_h * s.in_w..(c + 1) * s.in_h * s.in_w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let row = ((c * s.kh + i) * s.kw + j) * p;
                let dst = &mut col[row..row + p];
                for y in 0..oh {
                    let src = &plane[(y + i) * s.in_w + j..(y + i) * s.in_w + j + ow];
                    dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im(s: &ConvShape, col: &[f64], grad_in: &mut [f64]) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let p = oh * ow;
    grad_in.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..s.in_channels {
        let plane = &mut grad_in[c * s.in_h * s.in_w..(c + 1) * s.in_h * s.in_w];
        for i in 0..s.kh {
            for j in 0..s.kw {
                let row = ((c * s.kh + i) * s.kw + j) * p;
                let src = &col[row..row + p];
                for y in 0..oh {
                    let dst = &mut plane[(y + i) * s.in_w + j..(y + i) * s.in_w + j + ow];
                    for (d, v) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Valid convolution followed by ReLU. Returns the post-activation map
/// `[out_channels][out_h][out_w]`; `col` receives the im2col matrix.
pub fn conv_relu_forward(
    s: &ConvShape,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    col: &mut Vec<f64>,
) -> Vec<f64> {
    im2col(s, input, col);
    let p = s.positions();
    let mut out = vec![0.0; s.out_channels * p];
    for (o, b) in out.chunks_mut(p).zip(bias) {
        o.iter_mut().for_each(|v| *v = *b);
    }
    gemm(s.out_channels, s.patch_len(), p, weight, col, 1.0, &mut out);
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Backward pass of [`conv_relu_forward`]. `grad_out` is the gradient with
/// respect to the post-activation output and is masked in place.
/// Accumulates into `grad_w`/`grad_b`; writes the input gradient when
/// `grad_in` is given.
#[allow(clippy::too_many_arguments)]
pub fn conv_relu_backward(
    s: &ConvShape,
    output: &[f64],
    grad_out: &mut [f64],
    col: &[f64],
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let p = s.positions();
    for (g, &o) in grad_out.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    for (gb, g) in grad_b.iter_mut().zip(grad_out.chunks(p)) {
        *gb += g.iter().sum::<f64>();
    }
    gemm_bt_acc(s.out_channels, p, s.patch_len(), grad_out, col, grad_w);
    if let Some(grad_in) = grad_in {
        let mut dcol = vec![0.0; s.patch_len() * p];
        gemm_at(s.patch_len(), s.out_channels, p, weight, grad_out, &mut dcol);
        col2im(s, &dcol, grad_in);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolShape {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PoolShape {
    pub fn out_h(&self) -> usize {
        self.in_h / self.ph
    }

    pub fn out_w(&self) -> usize {
        self.in_w / self.pw
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.out_h() * self.out_w()
    }
}

/// Max pooling with stride equal to the window; trailing rows/columns that
/// do not fill a window are dropped. Returns outputs and argmax indices.
pub fn maxpool_forward(s: &PoolShape, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let mut out = Vec::with_capacity(s.out_len());
    let mut idx = Vec::with_capacity(s.out_len());
    for c in 0..s.channels {
        let base = c * s.in_h * s.in_w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (y * s.ph) * s.in_w + x * s.pw;
                for i in 0..s.ph {
                    for j in 0..s.pw {
                        let k = base + (y * s.ph + i) * s.in_w + x * s.pw + j;
                        if input[k] > input[best] {
                            best = k;
                        }
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

pub fn maxpool_backward(grad_out: &[f64], idx: &[usize], grad_in: &mut [f64]) {
    grad_in.iter_mut().for_each(|v| *v = 0.0);
    for (&g, &i) in grad_out.iter().zip(idx) {
        grad_in[i] += g;
    }
}

/// `relu(W x + b)` with `W` row-major `out × in`.
pub fn dense_relu_forward(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    weight
        .chunks(n_in)
        .zip(bias)
        .map(|(row, b)| (b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).max(0.0))
        .collect()
}

/// Backward of [`dense_relu_forward`]; `grad_out` is masked in place.
pub fn dense_relu_backward(
    weight: &[f64],
    x: &[f64],
    output: &[f64],
    grad_out: &mut [f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (g, &o) in grad_out.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    for ((gw, gb), &g) in grad_w.chunks_mut(n_in).zip(grad_b.iter_mut()).zip(grad_out.iter()) {
        if g == 0.0 {
            continue;
        }
        *gb += g;
        for (w, v) in gw.iter_mut().zip(x) {
            *w += g * v;
        }
    }
    if let Some(grad_in) = grad_in {
        grad_in.iter_mut().for_each(|v| *v = 0.0);
        for (row, &g) in weight.chunks(n_in).zip(grad_out.iter()) {
            if g == 0.0 {
                continue;
            }
            for (gi, w) in grad_in.iter_mut().zip(row) {
                *gi += g * w;
            }
        }
    }
}
