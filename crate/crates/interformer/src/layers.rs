//! Neural building blocks shared by both encoder branches. All functions
//! record onto a [`Graph`] and return the output node.

use crate::graph::{Graph, NodeId};
use crate::rng::StreamRng;
use crate::tensor::{Result, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// `y = x @ w + bias`, bias broadcast over time.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    match bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Per-time-step normalization over the feature axis.
pub fn layer_norm(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> Result<NodeId> {
    if eps <= 0.0 {
        return Err(TensorError::Invalid(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let t = g.shape(x)[0];
    let mu = g.reduce_mean(x, 1)?;
    let mu = g.reshape(mu, &[t, 1])?;
    let centered = g.sub(x, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.reduce_mean(sq, 1)?;
    let var = g.reshape(var, &[t, 1])?;
    let shifted = g.add_scalar(var, eps)?;
    let root = g.sqrt(shifted)?;
    let inv = g.recip(root)?;
    let normed = g.mul(centered, inv)?;
    let scaled = g.mul(normed, gamma)?;
    g.add(scaled, beta)
}

/// Running statistics for one batch-norm instance. Stats are per feature
/// channel, pooled over the time axis of each sequence (batch-of-one
/// semantics), updated with momentum `BATCH_NORM_MOMENTUM` and the biased
/// variance.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub updates: u64,
}

impl BnState {
    pub fn new(d: usize) -> Self {
        Self {
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            updates: 0,
        }
    }
}

/// Batch normalization over the time axis per channel. Train mode normalizes
/// by the current statistics (differentiable) and updates the running stats
/// as a side effect outside the tape; eval mode uses the running stats as
/// constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    state: &mut BnState,
    train: bool,
    momentum: f64,
    eps: f64,
) -> Result<NodeId> {
    let outs = batch_norm_joint(g, &[x], gamma, beta, state, train, momentum, eps)?;
    Ok(outs[0])
}

/// Batch normalization with statistics pooled over the time axes of every
/// sequence in the minibatch. A batch of one is exactly the per-sequence
/// case; training still builds per-sequence graphs everywhere else, so this
/// is the one layer that couples them.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_joint(
    g: &mut Graph,
    xs: &[NodeId],
    gamma: NodeId,
    beta: NodeId,
    state: &mut BnState,
    train: bool,
    momentum: f64,
    eps: f64,
) -> Result<Vec<NodeId>> {
    if xs.is_empty() {
        return Err(TensorError::ShapeMismatch("batch_norm of nothing".into()));
    }
    let d = g.shape(xs[0])[1];
    if state.running_mean.len() != d {
        return Err(TensorError::ShapeMismatch(format!(
            "batch_norm state width {} vs input {d}",
            state.running_mean.len()
        )));
    }
    for &x in xs {
        if g.shape(x).len() != 2 || g.shape(x)[1] != d {
            return Err(TensorError::ShapeMismatch(
                "batch_norm inputs must share the channel width".into(),
            ));
        }
    }
    if train {
        let lens: Vec<usize> = xs.iter().map(|&x| g.shape(x)[0]).collect();
        let cat = if xs.len() == 1 { xs[0] } else { g.concat(0, xs)? };
        let mu = g.reduce_mean(cat, 0)?;
        let centered = g.sub(cat, mu)?;
        let sq = g.mul(centered, centered)?;
        let var = g.reduce_mean(sq, 0)?;
        let mu_val = g.data(mu).to_vec();
        let var_val = g.data(var).to_vec();
        let shifted = g.add_scalar(var, eps)?;
        let root = g.sqrt(shifted)?;
        let inv = g.recip(root)?;
        let normed = g.mul(centered, inv)?;
        let scaled = g.mul(normed, gamma)?;
        let out = g.add(scaled, beta)?;
        for j in 0..d {
            state.running_mean[j] = (1.0 - momentum) * state.running_mean[j] + momentum * mu_val[j];
            state.running_var[j] = (1.0 - momentum) * state.running_var[j] + momentum * var_val[j];
        }
        state.updates += 1;
        if xs.len() == 1 {
            Ok(vec![out])
        } else {
            let mut parts = Vec::with_capacity(xs.len());
            let mut at = 0;
            for len in lens {
                parts.push(g.narrow(out, 0, at, len)?);
                at += len;
            }
            Ok(parts)
        }
    } else {
        if state.updates == 0 {
            return Err(TensorError::UninitializedStats);
        }
        let inv: Vec<f64> = state
            .running_var
            .iter()
            .map(|&v| 1.0 / (v + eps).sqrt())
            .collect();
        let mut outs = Vec::with_capacity(xs.len());
        for &x in xs {
            let mean = g.constant(&[d], state.running_mean.clone())?;
            let invn = g.constant(&[d], inv.clone())?;
            let centered = g.sub(x, mean)?;
            let normed = g.mul(centered, invn)?;
            let scaled = g.mul(normed, gamma)?;
            outs.push(g.add(scaled, beta)?);
        }
        Ok(outs)
    }
}

/// Kernel-size-1 convolution: a per-time-step linear map across channels.
pub fn pointwise_conv(g: &mut Graph, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
    linear(g, x, w, bias)
}

/// Per-channel zero-padded 1-D convolution with odd kernel length; output
/// length equals input length and channels never mix. Built from shifted
/// row gathers so gradients flow through the existing primitives.
pub fn depthwise_conv1d(g: &mut Graph, x: NodeId, kernel: NodeId) -> Result<NodeId> {
    let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
    let ksh = g.shape(kernel).to_vec();
    if ksh.len() != 2 || ksh[1] != d {
        return Err(TensorError::ShapeMismatch(format!(
            "depthwise kernel {ksh:?} vs input width {d}"
        )));
    }
    let k = ksh[0];
    if k % 2 == 0 {
        return Err(TensorError::EvenKernel(k));
    }
    let half = (k / 2) as i64;
    let mut acc: Option<NodeId> = None;
    for tap in 0..k {
        let offset = tap as i64 - half;
        let idx: Vec<i64> = (0..t as i64)
            .map(|i| {
                let src = i + offset;
                if src < 0 || src >= t as i64 {
                    -1
                } else {
                    src
                }
            })
            .collect();
        let shifted = g.gather_rows(x, &idx)?;
        let krow = g.narrow(kernel, 0, tap, 1)?;
        let term = g.mul(shifted, krow)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("kernel has at least one tap"))
}

/// `x * sigmoid(x)`.
pub fn swish(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.sigmoid(x)?;
    g.mul(x, s)
}

/// Coefficient layout for the piecewise-linear activation whose slopes and
/// intercepts are predicted per channel from a conditioning feature. The
/// defaults give K=2 branches around (slope, intercept) bases (1,0)/(0,0),
/// so a zero conditioner reproduces plain ReLU exactly.
#[derive(Debug, Clone)]
pub struct DyReluSpec {
    pub k: usize,
    pub base_slopes: Vec<f64>,
    pub base_intercepts: Vec<f64>,
    pub lambda_slope: f64,
    pub lambda_intercept: f64,
}

impl Default for DyReluSpec {
    fn default() -> Self {
        Self {
            k: 2,
            base_slopes: vec![1.0, 0.0],
            base_intercepts: vec![0.0, 0.0],
            lambda_slope: 1.0,
            lambda_intercept: 0.5,
        }
    }
}

/// Dynamic ReLU conditioned on a global feature sequence: the conditioner is
/// pooled over time, passed through a two-layer bottleneck, and squashed to
/// theta in [-1, 1]; each channel then takes the max over K affine branches.
/// Theta layout: [slope residuals (K*d), intercept residuals (K*d)].
pub fn dynamic_relu(
    g: &mut Graph,
    x: NodeId,
    g_feat: NodeId,
    w1: NodeId,
    w2: NodeId,
    spec: &DyReluSpec,
) -> Result<NodeId> {
    let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
    if g.shape(g_feat) != [t, d] {
        return Err(TensorError::ShapeMismatch(format!(
            "dynamic_relu conditioner {:?} vs input [{t}, {d}]",
            g.shape(g_feat)
        )));
    }
    let k = spec.k;
    if g.shape(w2)[1] != 2 * k * d {
        return Err(TensorError::ShapeMismatch(format!(
            "dynamic_relu w2 width {} != 2*K*d = {}",
            g.shape(w2)[1],
            2 * k * d
        )));
    }
    let pooled = g.reduce_mean(g_feat, 0)?;
    let pooled = g.reshape(pooled, &[1, d])?;
    let hidden = g.matmul(pooled, w1)?;
    let hidden = g.relu(hidden)?;
    let raw = g.matmul(hidden, w2)?;
    let sig = g.sigmoid(raw)?;
    let doubled = g.scale(sig, 2.0)?;
    let theta = g.add_scalar(doubled, -1.0)?;

    let mut out: Option<NodeId> = None;
    for branch in 0..k {
        let da = g.narrow(theta, 1, branch * d, d)?;
        let db = g.narrow(theta, 1, k * d + branch * d, d)?;
        let slope_resid = g.scale(da, spec.lambda_slope)?;
        let slope = g.add_scalar(slope_resid, spec.base_slopes[branch])?;
        let inter_resid = g.scale(db, spec.lambda_intercept)?;
        let intercept = g.add_scalar(inter_resid, spec.base_intercepts[branch])?;
        let scaled = g.mul(x, slope)?;
        let affine = g.add(scaled, intercept)?;
        out = Some(match out {
            Some(best) => g.maximum(best, affine)?,
            None => affine,
        });
    }
    Ok(out.expect("at least one branch"))
}

/// Channel attention: time-pooled bottleneck produces sigmoid gates that
/// scale every channel.
pub fn squeeze_excitation(
    g: &mut Graph,
    x: NodeId,
    w_down: NodeId,
    w_up: NodeId,
) -> Result<NodeId> {
    let d = g.shape(x)[1];
    if g.shape(w_down)[0] != d || g.shape(w_up)[1] != d {
        return Err(TensorError::ShapeMismatch(format!(
            "squeeze_excitation weights {:?}/{:?} vs width {d}",
            g.shape(w_down),
            g.shape(w_up)
        )));
    }
    let pooled = g.reduce_mean(x, 0)?;
    let pooled = g.reshape(pooled, &[1, d])?;
    let hidden = g.matmul(pooled, w_down)?;
    let hidden = g.relu(hidden)?;
    let raw = g.matmul(hidden, w_up)?;
    let gates = g.sigmoid(raw)?;
    g.mul(x, gates)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax(g: &mut Graph, x: NodeId, axis: usize) -> Result<NodeId> {
    g.softmax(x, axis)
}

/// Inverted dropout: train mode zeroes elements with probability `p` and
/// scales survivors by 1/(1-p); eval mode is the identity (same node).
pub fn dropout(
    g: &mut Graph,
    x: NodeId,
    p: f64,
    train: bool,
    rng: &mut StreamRng,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Invalid(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !train || p == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let keep_scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..g.value(x).numel())
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep_scale })
        .collect();
    let mask = g.constant(&shape, mask)?;
    g.mul(x, mask)
}
