//! Brute-force reference implementations used to verify the tape-based
//! layers. These are deliberately written as plain nested loops over flat
//! slices, independent of the graph code paths they check. They back both
//! the test suites and the `verify-oracles` CLI command.

use crate::tensor::{Result, Tensor, TensorError};

/// Plain triple-loop matrix product, j-major on purpose (the graph kernel
/// is k-major).
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch("naive_matmul".into()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out)
}

/// `x @ w + bias` per time step.
pub fn naive_linear(x: &Tensor, w: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let mut y = naive_matmul(x, w)?;
    if let Some(b) = bias {
        let cols = y.shape()[1];
        if b.len() != cols {
            return Err(TensorError::ShapeMismatch("naive_linear bias".into()));
        }
        for r in 0..y.shape()[0] {
            for c in 0..cols {
                y.data_mut()[r * cols + c] += b[c];
            }
        }
    }
    Ok(y)
}

/// Direct per-row evaluation of the normalization formula.
pub fn naive_layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let row = &x.data()[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let denom = (var + eps).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mu) / denom * gamma[j] + beta[j];
        }
    }
    Tensor::from_op(vec![t, d], out)
}

/// Per-channel zero-padded 1-D convolution, output position by output
/// position.
pub fn naive_depthwise_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let (k, dk) = (kernel.shape()[0], kernel.shape()[1]);
    if dk != d {
        return Err(TensorError::ShapeMismatch("naive_depthwise channels".into()));
    }
    if k % 2 == 0 {
        return Err(TensorError::EvenKernel(k));
    }
    let half = (k / 2) as isize;
    let mut out = vec![0.0; t * d];
    for c in 0..d {
        for ot in 0..t {
            let mut s = 0.0;
            for tap in 0..k {
                let it = ot as isize + tap as isize - half;
                if it >= 0 && (it as usize) < t {
                    s += x.data()[it as usize * d + c] * kernel.data()[tap * d + c];
                }
            }
            out[ot * d + c] = s;
        }
    }
    Ok(Tensor::from_op(vec![t, d], out))
}

/// Multi-channel strided 2-D convolution with zero padding, evaluated one
/// output pixel at a time. `x` is (h*w, c_in) row-major over pixels,
/// `kernel` is indexed [co][ci][kh][kw].
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &Tensor,
    h: usize,
    w: usize,
    c_in: usize,
    kernel: &[f64],
    bias: &[f64],
    c_out: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let h_out = (h + 2 * pad - ksize) / stride + 1;
    let w_out = (w + 2 * pad - ksize) / stride + 1;
    let mut out = vec![0.0; h_out * w_out * c_out];
    for oh in 0..h_out {
        for ow in 0..w_out {
            for co in 0..c_out {
                let mut s = bias[co];
                for ci in 0..c_in {
                    for kh in 0..ksize {
                        for kw in 0..ksize {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                let xi = (ih as usize * w + iw as usize) * c_in + ci;
                                let ki = ((co * c_in + ci) * ksize + kh) * ksize + kw;
                                s += x.data()[xi] * kernel[ki];
                            }
                        }
                    }
                }
                out[(oh * w_out + ow) * c_out + co] = s;
            }
        }
    }
    Tensor::from_op(vec![h_out * w_out, c_out], out)
}

/// Direct exp-normalization along rows (no max subtraction; inputs are
/// expected to be of moderate magnitude).
pub fn naive_softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let sum: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..c {
            out[i * c + j] = row[j].exp() / sum;
        }
    }
    Tensor::from_op(vec![r, c], out)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-element evaluation of the K-branch piecewise-linear activation with
/// coefficients conditioned on the time-pooled global feature.
#[allow(clippy::too_many_arguments)]
pub fn naive_dynamic_relu(
    x: &Tensor,
    g_feat: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    k: usize,
    base_slopes: &[f64],
    base_intercepts: &[f64],
    lambda_slope: f64,
    lambda_intercept: f64,
) -> Result<Tensor> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    // pooled = mean over time of G
    let mut pooled = vec![0.0; d];
    for i in 0..t {
        for j in 0..d {
            pooled[j] += g_feat.data()[i * d + j];
        }
    }
    for v in &mut pooled {
        *v /= t as f64;
    }
    // hidden = relu(pooled @ w1)
    let hidden_dim = w1.shape()[1];
    let mut hidden = vec![0.0; hidden_dim];
    for j in 0..hidden_dim {
        let mut s = 0.0;
        for i in 0..d {
            s += pooled[i] * w1.data()[i * hidden_dim + j];
        }
        hidden[j] = s.max(0.0);
    }
    // theta = 2*sigmoid(hidden @ w2) - 1, laid out [slopes (k*d), intercepts (k*d)]
    let out_dim = w2.shape()[1];
    if out_dim != 2 * k * d {
        return Err(TensorError::ShapeMismatch("naive_dynamic_relu w2".into()));
    }
    let mut theta = vec![0.0; out_dim];
    for j in 0..out_dim {
        let mut s = 0.0;
        for i in 0..hidden_dim {
            s += hidden[i] * w2.data()[i * out_dim + j];
        }
        theta[j] = 2.0 * sigmoid(s) - 1.0;
    }
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        for c in 0..d {
            let xv = x.data()[i * d + c];
            let mut best = f64::NEG_INFINITY;
            for branch in 0..k {
                let a = base_slopes[branch] + lambda_slope * theta[branch * d + c];
                let b = base_intercepts[branch]
                    + lambda_intercept * theta[k * d + branch * d + c];
                best = best.max(a * xv + b);
            }
            out[i * d + c] = best;
        }
    }
    Ok(Tensor::from_op(vec![t, d], out))
}

/// Direct evaluation of channel attention: sigmoid-gated bottleneck over the
/// time-pooled features, gates scaling every time step.
pub fn naive_squeeze_excitation(x: &Tensor, w_down: &Tensor, w_up: &Tensor) -> Tensor {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let hidden_dim = w_down.shape()[1];
    let mut pooled = vec![0.0; d];
    for i in 0..t {
        for j in 0..d {
            pooled[j] += x.data()[i * d + j];
        }
    }
    for v in &mut pooled {
        *v /= t as f64;
    }
    let mut hidden = vec![0.0; hidden_dim];
    for j in 0..hidden_dim {
        let mut s = 0.0;
        for i in 0..d {
            s += pooled[i] * w_down.data()[i * hidden_dim + j];
        }
        hidden[j] = s.max(0.0);
    }
    let mut gates = vec![0.0; d];
    for j in 0..d {
        let mut s = 0.0;
        for i in 0..hidden_dim {
            s += hidden[i] * w_up.data()[i * d + j];
        }
        gates[j] = sigmoid(s);
    }
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        for j in 0..d {
            out[i * d + j] = x.data()[i * d + j] * gates[j];
        }
    }
    Tensor::from_op(vec![t, d], out)
}

/// Sinusoidal relative-offset table evaluated directly from the formula,
/// interleaved [sin, cos] per frequency; rows cover offsets T-1 down to
/// -(T-1).
pub fn naive_relative_table(t: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; (2 * t - 1) * d];
    for row in 0..2 * t - 1 {
        let offset = (t as i64 - 1 - row as i64) as f64;
        for f in 0..d / 2 {
            let rate = 10000f64.powf(-2.0 * f as f64 / d as f64);
            out[row * d + 2 * f] = (offset * rate).sin();
            out[row * d + 2 * f + 1] = (offset * rate).cos();
        }
    }
    Tensor::from_op(vec![2 * t - 1, d], out)
}

/// Per-pair relative-position attention: every score computed with scalar
/// dot products, one (i, j) at a time.
#[allow(clippy::too_many_arguments)]
pub fn naive_relative_mhsa(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    wpos: &Tensor,
    u: &[f64],
    v: &[f64],
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    if d % heads != 0 {
        return Err(TensorError::ShapeMismatch("heads must divide dim".into()));
    }
    let dh = d / heads;
    let q = naive_matmul(x, wq)?;
    let k = naive_matmul(x, wk)?;
    let val = naive_matmul(x, wv)?;
    let table = naive_relative_table(t, d);
    let rproj = naive_matmul(&table, wpos)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut merged = vec![0.0; t * d];
    for h in 0..heads {
        let base = h * dh;
        for i in 0..t {
            // raw scores against every key
            let mut scores = vec![0.0; t];
            for j in 0..t {
                let mut content = 0.0;
                let mut position = 0.0;
                let row = t - 1 + j - i; // table row for offset i-j
                for e in 0..dh {
                    let qd = q.data()[i * d + base + e];
                    content += (qd + u[base + e]) * k.data()[j * d + base + e];
                    position += (qd + v[base + e]) * rproj.data()[row * d + base + e];
                }
                scores[j] = (content + position) * scale;
                if let Some(m) = mask {
                    if !m[j] {
                        scores[j] = -1e30;
                    }
                }
            }
            // softmax over keys
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights = vec![0.0; t];
            let mut sum = 0.0;
            for j in 0..t {
                weights[j] = (scores[j] - m).exp();
                sum += weights[j];
            }
            for wgt in &mut weights {
                *wgt /= sum;
            }
            for e in 0..dh {
                let mut s = 0.0;
                for j in 0..t {
                    s += weights[j] * val.data()[j * d + base + e];
                }
                merged[i * d + base + e] = s;
            }
        }
    }
    naive_matmul(&Tensor::from_op(vec![t, d], merged), wo)
}

/// Standard scaled-dot-product attention without any positional term; used
/// to confirm the relative path degenerates correctly when the positional
/// projection and biases vanish.
pub fn naive_plain_mhsa(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    let q = naive_matmul(x, wq)?;
    let k = naive_matmul(x, wk)?;
    let val = naive_matmul(x, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged = vec![0.0; t * d];
    for h in 0..heads {
        let base = h * dh;
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for e in 0..dh {
                    s += q.data()[i * d + base + e] * k.data()[j * d + base + e];
                }
                scores[j] = s * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let sum: f64 = weights.iter().sum();
            for wgt in &mut weights {
                *wgt /= sum;
            }
            for e in 0..dh {
                let mut s = 0.0;
                for j in 0..t {
                    s += weights[j] * val.data()[j * d + base + e];
                }
                merged[i * d + base + e] = s;
            }
        }
    }
    naive_matmul(&Tensor::from_op(vec![t, d], merged), wo)
}

/// Gated interaction evaluated directly: `(x @ w + b) * sigmoid(gate_src)`
/// elementwise, with the gate source supplied already projected.
pub fn naive_gated_projection(
    x: &Tensor,
    w: &Tensor,
    b: &[f64],
    gate_source: &Tensor,
) -> Result<Tensor> {
    let proj = naive_linear(x, w, Some(b))?;
    let (t, d) = (proj.shape()[0], proj.shape()[1]);
    let mut out = vec![0.0; t * d];
    for i in 0..t * d {
        out[i] = proj.data()[i] * sigmoid(gate_source.data()[i]);
    }
    Ok(Tensor::from_op(vec![t, d], out))
}

/// Step-by-step selective fusion: concat, time-mean, bottleneck, per-channel
/// pairwise softmax, branch-weighted sum, then channel attention.
pub fn naive_sfm(
    l: &Tensor,
    g: &Tensor,
    w_f: &Tensor,
    w_u1: &Tensor,
    w_u2: &Tensor,
    se_down: &Tensor,
    se_up: &Tensor,
) -> Result<Tensor> {
    let (t, d) = (l.shape()[0], l.shape()[1]);
    let c = w_f.shape()[1];
    // concat along features: (t, 2d)
    let mut xcat = vec![0.0; t * 2 * d];
    for i in 0..t {
        for j in 0..d {
            xcat[i * 2 * d + j] = l.data()[i * d + j];
            xcat[i * 2 * d + d + j] = g.data()[i * d + j];
        }
    }
    // time mean: (2d)
    let mut pooled = vec![0.0; 2 * d];
    for i in 0..t {
        for j in 0..2 * d {
            pooled[j] += xcat[i * 2 * d + j];
        }
    }
    for v in &mut pooled {
        *v /= t as f64;
    }
    // bottleneck: relu(pooled @ w_f) -> (c)
    let mut hidden = vec![0.0; c];
    for j in 0..c {
        let mut s = 0.0;
        for i in 0..2 * d {
            s += pooled[i] * w_f.data()[i * c + j];
        }
        hidden[j] = s.max(0.0);
    }
    // branch logits: (d) each
    let mut x1 = vec![0.0; d];
    let mut x2 = vec![0.0; d];
    for j in 0..d {
        for i in 0..c {
            x1[j] += hidden[i] * w_u1.data()[i * d + j];
            x2[j] += hidden[i] * w_u2.data()[i * d + j];
        }
    }
    // per-channel pairwise softmax
    let mut alpha = vec![0.0; d];
    for j in 0..d {
        let m = x1[j].max(x2[j]);
        let e1 = (x1[j] - m).exp();
        let e2 = (x2[j] - m).exp();
        alpha[j] = e1 / (e1 + e2);
    }
    // weighted branch sum
    let mut fused = vec![0.0; t * d];
    for i in 0..t {
        for j in 0..d {
            fused[i * d + j] =
                alpha[j] * l.data()[i * d + j] + (1.0 - alpha[j]) * g.data()[i * d + j];
        }
    }
    Ok(naive_squeeze_excitation(
        &Tensor::from_op(vec![t, d], fused),
        se_down,
        se_up,
    ))
}

/// Max absolute elementwise difference between two equally-shaped tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "oracle shape disagreement");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
