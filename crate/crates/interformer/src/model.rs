//! The two-branch encoder block and its stack: parallel convolution and
//! self-attention branches coupled by gated bidirectional interactions and
//! merged by a selective fusion module, wrapped in macaron feed-forward
//! half-steps. Also the strided 2-D convolution front-end and the parameter
//! accounting for the whole encoder.

use crate::attention::{relative_mhsa, MhsaNodes};
use crate::graph::{Graph, NodeId};
use crate::layers::{
    self, batch_norm, depthwise_conv1d, dynamic_relu, layer_norm, linear, pointwise_conv,
    squeeze_excitation, swish, BnState, DyReluSpec, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
    LAYER_NORM_EPS,
};
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::{Result, TensorError};

// ── configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Add,
    Concat,
    Sfm,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Add => "add",
            FusionMode::Concat => "concat",
            FusionMode::Sfm => "sfm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            "sfm" => Ok(FusionMode::Sfm),
            other => Err(TensorError::Invalid(format!(
                "unknown fusion mode '{other}' (expected add|concat|sfm)"
            ))),
        }
    }
}

/// Architectural hyperparameters for one block and the stack height.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub kernel: usize,
    pub ffn_expansion: usize,
    pub fusion: FusionMode,
    pub l2g: bool,
    pub g2l: bool,
    pub dyrelu: bool,
    pub dropout_p: f64,
    pub n_blocks: usize,
    /// Bottleneck width c of the selective fusion module.
    pub sfm_bottleneck: usize,
    pub se_ratio: usize,
    pub dyrelu_ratio: usize,
}

impl BlockConfig {
    /// Desk-scale defaults: d=32, 4 heads, kernel 3, 2 blocks, selective
    /// fusion with both interactions on.
    pub fn desk_default() -> Self {
        Self::with_dims(32, 4)
    }

    pub fn with_dims(d: usize, heads: usize) -> Self {
        Self {
            d,
            heads,
            kernel: 3,
            ffn_expansion: 4,
            fusion: FusionMode::Sfm,
            l2g: true,
            g2l: true,
            dyrelu: true,
            dropout_p: 0.1,
            n_blocks: 2,
            sfm_bottleneck: (d / 2).max(1),
            se_ratio: 4,
            dyrelu_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(TensorError::Invalid(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(TensorError::EvenKernel(self.kernel));
        }
        if self.ffn_expansion == 0 {
            return Err(TensorError::Invalid("ffn_expansion must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TensorError::Invalid(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.sfm_bottleneck == 0 {
            return Err(TensorError::Invalid("sfm_bottleneck must be >= 1".into()));
        }
        if self.d / self.se_ratio == 0 || self.d / self.dyrelu_ratio == 0 {
            return Err(TensorError::Invalid(format!(
                "bottleneck ratios {}x/{}x collapse dim {} to zero",
                self.se_ratio, self.dyrelu_ratio, self.d
            )));
        }
        Ok(())
    }
}

// ── parameter layout ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub ln: LayerNormParams,
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

#[derive(Debug, Clone, Copy)]
pub struct MhsaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub wpos: ParamId,
    pub u: ParamId,
    pub v: ParamId,
}

/// Norm + pointwise projection applied to the gating source of the
/// convolution-branch interaction.
#[derive(Debug, Clone, Copy)]
pub struct GateSource {
    pub ln: LayerNormParams,
    pub pw: ParamId,
}

/// Convolution-branch interaction weights: the input projection always
/// exists (it is the branch's entry pointwise conv); the gate source only
/// when the global-to-local interaction is enabled.
#[derive(Debug, Clone, Copy)]
pub struct ConvBfim {
    pub pw_in: LinearParams,
    pub gate: Option<GateSource>,
}

/// Transformer-branch interaction weights: the attention output is always
/// normed and projected; the sigmoid gate by local features carries no
/// weights of its own.
#[derive(Debug, Clone, Copy)]
pub struct TransBfim {
    pub pw_in: LinearParams,
    pub ln: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct DyReluParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub spec: DyReluSpec,
}

#[derive(Debug, Clone, Copy)]
pub struct SeParams {
    pub w_down: ParamId,
    pub w_up: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct SfmParams {
    pub w_f: ParamId,
    pub w_u1: ParamId,
    pub w_u2: ParamId,
    pub se: SeParams,
}

#[derive(Debug, Clone)]
pub enum FusionParams {
    Add,
    Concat { w_fuse: ParamId },
    Sfm(SfmParams),
}

#[derive(Debug, Clone)]
pub struct ConvBranchParams {
    pub bfim: ConvBfim,
    pub kernel: ParamId,
    pub bn: LayerNormParams,
    pub dyrelu: Option<DyReluParams>,
    pub pw_out: LinearParams,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ffn1: FfnParams,
    pub ln_attn: LayerNormParams,
    pub mhsa: MhsaParams,
    pub bfim_trans: TransBfim,
    pub conv: ConvBranchParams,
    pub fusion: FusionParams,
    pub ffn2: FfnParams,
    pub ln_out: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct SubsampleParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub proj: LinearParams,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub subsample: SubsampleParams,
    pub blocks: Vec<BlockParams>,
}

fn register_linear(
    store: &mut ParamStore,
    rng: &mut StreamRng,
    name: &str,
    rows: usize,
    cols: usize,
    bias: bool,
) -> LinearParams {
    let w = store.register_matrix(&format!("{name}.w"), rows, cols, rows, rng);
    let b = bias.then(|| store.register_zeros(&format!("{name}.b"), &[cols]));
    LinearParams { w, b }
}

fn register_ln(store: &mut ParamStore, name: &str, d: usize) -> LayerNormParams {
    LayerNormParams {
        gamma: store.register_ones(&format!("{name}.gamma"), &[d]),
        beta: store.register_zeros(&format!("{name}.beta"), &[d]),
    }
}

fn register_ffn(
    store: &mut ParamStore,
    rng: &mut StreamRng,
    name: &str,
    d: usize,
    expansion: usize,
) -> FfnParams {
    FfnParams {
        ln: register_ln(store, &format!("{name}.ln"), d),
        lin1: register_linear(store, rng, &format!("{name}.lin1"), d, d * expansion, true),
        lin2: register_linear(store, rng, &format!("{name}.lin2"), d * expansion, d, true),
    }
}

impl BlockParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        cfg: &BlockConfig,
        prefix: &str,
    ) -> Self {
        let d = cfg.d;
        let ffn1 = register_ffn(store, rng, &format!("{prefix}.ffn1"), d, cfg.ffn_expansion);
        let ln_attn = register_ln(store, &format!("{prefix}.attn.ln"), d);
        let mhsa = MhsaParams {
            wq: store.register_matrix(&format!("{prefix}.attn.wq"), d, d, d, rng),
            wk: store.register_matrix(&format!("{prefix}.attn.wk"), d, d, d, rng),
            wv: store.register_matrix(&format!("{prefix}.attn.wv"), d, d, d, rng),
            wo: store.register_matrix(&format!("{prefix}.attn.wo"), d, d, d, rng),
            wpos: store.register_matrix(&format!("{prefix}.attn.wpos"), d, d, d, rng),
            u: store.register_zeros(&format!("{prefix}.attn.u"), &[d]),
            v: store.register_zeros(&format!("{prefix}.attn.v"), &[d]),
        };
        let bfim_trans = TransBfim {
            pw_in: register_linear(store, rng, &format!("{prefix}.bfim_t.pw_in"), d, d, true),
            ln: register_ln(store, &format!("{prefix}.bfim_t.ln"), d),
        };
        let conv_bfim = ConvBfim {
            pw_in: register_linear(store, rng, &format!("{prefix}.conv.pw_in"), d, d, true),
            gate: cfg.g2l.then(|| GateSource {
                ln: register_ln(store, &format!("{prefix}.conv.gate.ln"), d),
                pw: store.register_matrix(&format!("{prefix}.conv.gate.pw"), d, d, d, rng),
            }),
        };
        let kernel = {
            let bound = (1.0 / cfg.kernel as f64).sqrt();
            let t = rng.tensor(&[cfg.kernel, d], -bound, bound);
            store.register(&format!("{prefix}.conv.dw"), t)
        };
        let bn = LayerNormParams {
            gamma: store.register_ones(&format!("{prefix}.conv.bn.gamma"), &[d]),
            beta: store.register_zeros(&format!("{prefix}.conv.bn.beta"), &[d]),
        };
        let dyrelu = cfg.dyrelu.then(|| {
            let hidden = d / cfg.dyrelu_ratio;
            let spec = DyReluSpec::default();
            DyReluParams {
                w1: store.register_matrix(&format!("{prefix}.conv.dy.w1"), d, hidden, d, rng),
                w2: store.register_matrix(
                    &format!("{prefix}.conv.dy.w2"),
                    hidden,
                    2 * spec.k * d,
                    hidden,
                    rng,
                ),
                spec,
            }
        });
        let pw_out = register_linear(store, rng, &format!("{prefix}.conv.pw_out"), d, d, true);
        let fusion = match cfg.fusion {
            FusionMode::Add => FusionParams::Add,
            FusionMode::Concat => FusionParams::Concat {
                w_fuse: store.register_matrix(&format!("{prefix}.fuse.w"), 2 * d, d, 2 * d, rng),
            },
            FusionMode::Sfm => {
                let c = cfg.sfm_bottleneck;
                let se_hidden = d / cfg.se_ratio;
                FusionParams::Sfm(SfmParams {
                    w_f: store.register_matrix(&format!("{prefix}.fuse.wf"), 2 * d, c, 2 * d, rng),
                    w_u1: store.register_matrix(&format!("{prefix}.fuse.wu1"), c, d, c, rng),
                    w_u2: store.register_matrix(&format!("{prefix}.fuse.wu2"), c, d, c, rng),
                    se: SeParams {
                        w_down: store.register_matrix(
                            &format!("{prefix}.fuse.se_down"),
                            d,
                            se_hidden,
                            d,
                            rng,
                        ),
                        w_up: store.register_matrix(
                            &format!("{prefix}.fuse.se_up"),
                            se_hidden,
                            d,
                            se_hidden,
                            rng,
                        ),
                    },
                })
            }
        };
        let ffn2 = register_ffn(store, rng, &format!("{prefix}.ffn2"), d, cfg.ffn_expansion);
        let ln_out = register_ln(store, &format!("{prefix}.ln_out"), d);
        Self {
            ffn1,
            ln_attn,
            mhsa,
            bfim_trans,
            conv: ConvBranchParams {
                bfim: conv_bfim,
                kernel,
                bn,
                dyrelu,
                pw_out,
            },
            fusion,
            ffn2,
            ln_out,
        }
    }
}

// ── forward context ──────────────────────────────────────────────────────

/// Per-forward-pass state: the tape, the parameter store with its binder,
/// the batch-norm mode, and the optional dropout stream (absent means
/// dropout is inactive, as in gradient checks and eval).
pub struct Fwd<'a, 'g> {
    pub g: &'g mut Graph,
    pub store: &'a ParamStore,
    pub binder: Binder,
    pub train: bool,
    pub dropout_rng: Option<&'a mut StreamRng>,
}

impl<'a, 'g> Fwd<'a, 'g> {
    pub fn new(
        g: &'g mut Graph,
        store: &'a ParamStore,
        train: bool,
        dropout_rng: Option<&'a mut StreamRng>,
    ) -> Self {
        Self {
            g,
            store,
            binder: Binder::for_store(store),
            train,
            dropout_rng,
        }
    }

    /// Context wired to pre-made leaves (one per store entry, in order);
    /// used by gradient checks that treat parameters as explicit inputs.
    pub fn for_leaves(g: &'g mut Graph, store: &'a ParamStore, leaves: &[NodeId]) -> Self {
        Self {
            g,
            store,
            binder: Binder::from_leaves(leaves),
            train: true,
            dropout_rng: None,
        }
    }

    pub fn p(&mut self, id: ParamId) -> NodeId {
        self.binder.node(self.g, self.store, id)
    }

    pub fn lin(&mut self, x: NodeId, p: &LinearParams) -> Result<NodeId> {
        let w = self.p(p.w);
        let b = p.b.map(|b| self.p(b));
        linear(self.g, x, w, b)
    }

    pub fn ln(&mut self, x: NodeId, p: &LayerNormParams) -> Result<NodeId> {
        let gamma = self.p(p.gamma);
        let beta = self.p(p.beta);
        layer_norm(self.g, x, gamma, beta, LAYER_NORM_EPS)
    }

    fn maybe_dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        match (&mut self.dropout_rng, self.train) {
            (Some(rng), true) => layers::dropout(self.g, x, p, true, rng),
            _ => Ok(x),
        }
    }
}

// ── interactions ─────────────────────────────────────────────────────────

/// Global-to-local interaction at the convolution branch entry:
/// `(pw_in(x) + b) * sigmoid(pw_src(ln(G_raw)))`.
pub fn g2l_interaction(f: &mut Fwd, x: NodeId, g_raw: NodeId, p: &ConvBfim) -> Result<NodeId> {
    let gate_p = p.gate.as_ref().ok_or_else(|| {
        TensorError::Invalid("g2l_interaction called without gate-source weights".into())
    })?;
    if f.g.shape(x) != f.g.shape(g_raw) {
        return Err(TensorError::ShapeMismatch(
            "g2l operands must share shape".into(),
        ));
    }
    let src = f.ln(g_raw, &gate_p.ln)?;
    let pw = f.p(gate_p.pw);
    let src = pointwise_conv(f.g, src, pw, None)?;
    let gate = f.g.sigmoid(src)?;
    let proj = f.lin(x, &p.pw_in)?;
    f.g.mul(proj, gate)
}

/// Convolution-branch entry projection without the gate (interaction off).
pub fn conv_entry_projection(f: &mut Fwd, x: NodeId, p: &ConvBfim) -> Result<NodeId> {
    f.lin(x, &p.pw_in)
}

/// Local-to-global interaction on the attention output:
/// `(pw_in(ln(G_raw)) + b) * sigmoid(L)`. The local features gate directly;
/// only the projected stream carries weights.
pub fn l2g_interaction(f: &mut Fwd, g_raw: NodeId, l: NodeId, p: &TransBfim) -> Result<NodeId> {
    if f.g.shape(g_raw) != f.g.shape(l) {
        return Err(TensorError::ShapeMismatch(
            "l2g operands must share shape".into(),
        ));
    }
    let proj = trans_projection(f, g_raw, p)?;
    let gate = f.g.sigmoid(l)?;
    f.g.mul(proj, gate)
}

/// Transformer-branch post-attention projection `pw_in(ln(G_raw)) + b`,
/// applied whether or not the gate is active.
pub fn trans_projection(f: &mut Fwd, g_raw: NodeId, p: &TransBfim) -> Result<NodeId> {
    let normed = f.ln(g_raw, &p.ln)?;
    f.lin(normed, &p.pw_in)
}

// ── branches ─────────────────────────────────────────────────────────────

/// Convolution-branch stage before normalization: gated entry projection
/// plus depthwise conv.
fn conv_branch_pre_norm(
    f: &mut Fwd,
    x: NodeId,
    g_raw: NodeId,
    p: &ConvBranchParams,
    cfg: &BlockConfig,
) -> Result<NodeId> {
    let h = if cfg.g2l {
        g2l_interaction(f, x, g_raw, &p.bfim)?
    } else {
        conv_entry_projection(f, x, &p.bfim)?
    };
    let kernel = f.p(p.kernel);
    depthwise_conv1d(f.g, h, kernel)
}

/// Convolution-branch stage after normalization: dynamic ReLU (or swish)
/// and the closing pointwise conv.
fn conv_branch_post_norm(
    f: &mut Fwd,
    h: NodeId,
    g_raw: NodeId,
    p: &ConvBranchParams,
    cfg: &BlockConfig,
) -> Result<NodeId> {
    let h = match (cfg.dyrelu, &p.dyrelu) {
        (true, Some(dy)) => {
            let w1 = f.p(dy.w1);
            let w2 = f.p(dy.w2);
            dynamic_relu(f.g, h, g_raw, w1, w2, &dy.spec)?
        }
        (false, _) => swish(f.g, h)?,
        (true, None) => {
            return Err(TensorError::Invalid(
                "config enables dynamic relu but weights are absent".into(),
            ))
        }
    };
    f.lin(h, &p.pw_out)
}

/// Convolution branch: gated entry projection, depthwise conv, batch norm,
/// dynamic ReLU (or swish), closing pointwise conv.
pub fn conv_branch(
    f: &mut Fwd,
    x: NodeId,
    g_raw: NodeId,
    p: &ConvBranchParams,
    bn_state: &mut BnState,
    cfg: &BlockConfig,
) -> Result<NodeId> {
    let h = conv_branch_pre_norm(f, x, g_raw, p, cfg)?;
    let gamma = f.p(p.bn.gamma);
    let beta = f.p(p.bn.beta);
    let h = batch_norm(
        f.g,
        h,
        gamma,
        beta,
        bn_state,
        f.train,
        BATCH_NORM_MOMENTUM,
        BATCH_NORM_EPS,
    )?;
    conv_branch_post_norm(f, h, g_raw, p, cfg)
}

/// Transformer branch core: layer norm then relative-position attention.
/// Its interaction stage runs later, once the local features exist.
pub fn transformer_branch(
    f: &mut Fwd,
    x: NodeId,
    ln: &LayerNormParams,
    mhsa: &MhsaParams,
    heads: usize,
) -> Result<NodeId> {
    let normed = f.ln(x, ln)?;
    let nodes = MhsaNodes {
        wq: f.p(mhsa.wq),
        wk: f.p(mhsa.wk),
        wv: f.p(mhsa.wv),
        wo: f.p(mhsa.wo),
        wpos: f.p(mhsa.wpos),
        u: f.p(mhsa.u),
        v: f.p(mhsa.v),
        heads,
    };
    relative_mhsa(f.g, normed, &nodes, None)
}

// ── fusion ───────────────────────────────────────────────────────────────

/// Elementwise sum of the branch outputs.
pub fn add_fuse(g: &mut Graph, l: NodeId, gl: NodeId) -> Result<NodeId> {
    if g.shape(l) != g.shape(gl) {
        return Err(TensorError::ShapeMismatch(
            "fusion operands must share shape".into(),
        ));
    }
    g.add(l, gl)
}

/// Feature-axis concatenation followed by a projection back to width d.
pub fn concat_fuse(f: &mut Fwd, l: NodeId, gl: NodeId, w_fuse: ParamId) -> Result<NodeId> {
    if f.g.shape(l) != f.g.shape(gl) {
        return Err(TensorError::ShapeMismatch(
            "fusion operands must share shape".into(),
        ));
    }
    let cat = f.g.concat(1, &[l, gl])?;
    let w = f.p(w_fuse);
    linear(f.g, cat, w, None)
}

/// Per-channel branch-selection weights of the selective fusion module:
/// concat, pool over time, bottleneck, then a pairwise softmax per channel.
/// Returns `(alpha, 1-alpha)` as two `1 x d` nodes.
pub fn sfm_branch_weights(
    f: &mut Fwd,
    l: NodeId,
    gl: NodeId,
    p: &SfmParams,
) -> Result<(NodeId, NodeId)> {
    let d = f.g.shape(l)[1];
    let cat = f.g.concat(1, &[l, gl])?;
    let pooled = f.g.reduce_mean(cat, 0)?;
    let pooled = f.g.reshape(pooled, &[1, 2 * d])?;
    let wf = f.p(p.w_f);
    let hidden = f.g.matmul(pooled, wf)?;
    let hidden = f.g.relu(hidden)?;
    let wu1 = f.p(p.w_u1);
    let wu2 = f.p(p.w_u2);
    let x1 = f.g.matmul(hidden, wu1)?;
    let x2 = f.g.matmul(hidden, wu2)?;
    let stacked = f.g.concat(0, &[x1, x2])?; // 2 x d
    let weights = f.g.softmax(stacked, 0)?; // pairwise per channel
    let alpha = f.g.narrow(weights, 0, 0, 1)?;
    let beta = f.g.narrow(weights, 0, 1, 1)?;
    Ok((alpha, beta))
}

/// Selective fusion: softmax-weighted sum of the branches followed by
/// channel attention.
pub fn sfm_fuse(f: &mut Fwd, l: NodeId, gl: NodeId, p: &SfmParams) -> Result<NodeId> {
    if f.g.shape(l) != f.g.shape(gl) {
        return Err(TensorError::ShapeMismatch(
            "fusion operands must share shape".into(),
        ));
    }
    let (alpha, beta) = sfm_branch_weights(f, l, gl, p)?;
    let wl = f.g.mul(l, alpha)?;
    let wg = f.g.mul(gl, beta)?;
    let summed = f.g.add(wl, wg)?;
    let w_down = f.p(p.se.w_down);
    let w_up = f.p(p.se.w_up);
    squeeze_excitation(f.g, summed, w_down, w_up)
}

// ── block / encoder ──────────────────────────────────────────────────────

fn ffn(f: &mut Fwd, x: NodeId, p: &FfnParams, dropout_p: f64) -> Result<NodeId> {
    let h = f.ln(x, &p.ln)?;
    let h = f.lin(h, &p.lin1)?;
    let h = swish(f.g, h)?;
    let h = f.maybe_dropout(h, dropout_p)?;
    f.lin(h, &p.lin2)
}

/// One encoder block. Evaluation order: first macaron FFN half-step, the
/// attention branch, the convolution branch (gated by the raw attention
/// output), the transformer-side interaction (gated by the conv output),
/// fusion, residual, second FFN half-step, closing layer norm.
pub fn block_forward(
    f: &mut Fwd,
    x: NodeId,
    p: &BlockParams,
    bn_state: &mut BnState,
    cfg: &BlockConfig,
) -> Result<NodeId> {
    let outs = block_forward_batch(f, &[x], p, bn_state, cfg)?;
    Ok(outs[0])
}

/// Block forward over a minibatch of sequences. Every stage is
/// per-sequence except batch norm, whose statistics pool over the whole
/// batch; a batch of one is bit-identical to the single-sequence path.
pub fn block_forward_batch(
    f: &mut Fwd,
    xs: &[NodeId],
    p: &BlockParams,
    bn_state: &mut BnState,
    cfg: &BlockConfig,
) -> Result<Vec<NodeId>> {
    for &x in xs {
        if f.g.shape(x).len() != 2 || f.g.shape(x)[1] != cfg.d {
            return Err(TensorError::ShapeMismatch(format!(
                "block input {:?} vs model dim {}",
                f.g.shape(x),
                cfg.d
            )));
        }
    }
    let mut x1s = Vec::with_capacity(xs.len());
    for &x in xs {
        let h = ffn(f, x, &p.ffn1, cfg.dropout_p)?;
        let h = f.g.scale(h, 0.5)?;
        x1s.push(f.g.add(x, h)?);
    }
    let mut g_raws = Vec::with_capacity(xs.len());
    for &x1 in &x1s {
        g_raws.push(transformer_branch(f, x1, &p.ln_attn, &p.mhsa, cfg.heads)?);
    }
    let mut pre_norm = Vec::with_capacity(xs.len());
    for (&x1, &g_raw) in x1s.iter().zip(&g_raws) {
        pre_norm.push(conv_branch_pre_norm(f, x1, g_raw, &p.conv, cfg)?);
    }
    let gamma = f.p(p.conv.bn.gamma);
    let beta = f.p(p.conv.bn.beta);
    let normed = crate::layers::batch_norm_joint(
        f.g,
        &pre_norm,
        gamma,
        beta,
        bn_state,
        f.train,
        BATCH_NORM_MOMENTUM,
        BATCH_NORM_EPS,
    )?;

    let mut outs = Vec::with_capacity(xs.len());
    for ((&x1, &g_raw), &h) in x1s.iter().zip(&g_raws).zip(&normed) {
        let l = conv_branch_post_norm(f, h, g_raw, &p.conv, cfg)?;
        let gl = if cfg.l2g {
            l2g_interaction(f, g_raw, l, &p.bfim_trans)?
        } else {
            trans_projection(f, g_raw, &p.bfim_trans)?
        };
        let fused = match (&p.fusion, cfg.fusion) {
            (FusionParams::Add, FusionMode::Add) => add_fuse(f.g, l, gl)?,
            (FusionParams::Concat { w_fuse }, FusionMode::Concat) => {
                concat_fuse(f, l, gl, *w_fuse)?
            }
            (FusionParams::Sfm(sfm), FusionMode::Sfm) => sfm_fuse(f, l, gl, sfm)?,
            _ => {
                return Err(TensorError::Invalid(
                    "fusion weights do not match the configured fusion mode".into(),
                ))
            }
        };
        let fused = f.maybe_dropout(fused, cfg.dropout_p)?;
        let x2 = f.g.add(x1, fused)?;
        let h2 = ffn(f, x2, &p.ffn2, cfg.dropout_p)?;
        let h2 = f.g.scale(h2, 0.5)?;
        let pre = f.g.add(x2, h2)?;
        outs.push(f.ln(pre, &p.ln_out)?);
    }
    Ok(outs)
}

/// Output length of one stride-2 pad-1 kernel-3 convolution.
pub fn halved(n: usize) -> usize {
    n.div_ceil(2)
}

/// Sequence length after the two-stage front-end.
pub fn subsampled_len(t: usize) -> usize {
    halved(halved(t))
}

/// Flattened width entering the projection after the front-end, for input
/// feature dim `f` and `channels` conv filters.
pub fn subsample_flat_width(f_dim: usize, channels: usize) -> usize {
    halved(halved(f_dim)) * channels
}

/// Indices implementing one 3x3 stride-2 pad-1 gather: for each output
/// pixel and kernel tap, the flat source pixel or -1 for padding.
fn conv2d_tap_indices(h: usize, w: usize, tap_r: usize, tap_c: usize) -> Vec<i64> {
    let (h_out, w_out) = (halved(h), halved(w));
    let mut idx = Vec::with_capacity(h_out * w_out);
    for oh in 0..h_out {
        for ow in 0..w_out {
            let ih = (oh * 2 + tap_r) as i64 - 1;
            let iw = (ow * 2 + tap_c) as i64 - 1;
            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                idx.push(ih * w as i64 + iw);
            } else {
                idx.push(-1);
            }
        }
    }
    idx
}

/// One 3x3 stride-2 pad-1 convolution stage over a (h*w, c_in) pixel map,
/// built from nine shifted gathers concatenated into an im2col matrix.
fn conv2d_stage(
    f: &mut Fwd,
    x: NodeId,
    h: usize,
    w: usize,
    weight: ParamId,
    bias: ParamId,
) -> Result<NodeId> {
    let mut taps = Vec::with_capacity(9);
    for tap_r in 0..3 {
        for tap_c in 0..3 {
            let idx = conv2d_tap_indices(h, w, tap_r, tap_c);
            taps.push(f.g.gather_rows(x, &idx)?);
        }
    }
    let cols = f.g.concat(1, &taps)?;
    let w_node = f.p(weight);
    let b_node = f.p(bias);
    let y = linear(f.g, cols, w_node, Some(b_node))?;
    f.g.relu(y)
}

impl SubsampleParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        prefix: &str,
        input_dim: usize,
        channels: usize,
        d: usize,
    ) -> Self {
        let w1 = store.register_matrix(&format!("{prefix}.conv1.w"), 9, channels, 9, rng);
        let b1 = store.register_zeros(&format!("{prefix}.conv1.b"), &[channels]);
        let w2 = store.register_matrix(
            &format!("{prefix}.conv2.w"),
            9 * channels,
            channels,
            9 * channels,
            rng,
        );
        let b2 = store.register_zeros(&format!("{prefix}.conv2.b"), &[channels]);
        let flat = subsample_flat_width(input_dim, channels);
        let proj = register_linear(store, rng, &format!("{prefix}.proj"), flat, d, true);
        Self { w1, b1, w2, b2, proj }
    }
}

/// Front-end: two strided 3x3 convolutions with relu (4x time reduction),
/// flatten, linear projection to the model dim, dropout.
pub fn subsample(
    f: &mut Fwd,
    feats: NodeId,
    p: &SubsampleParams,
    channels: usize,
    dropout_p: f64,
) -> Result<NodeId> {
    let sh = f.g.shape(feats).to_vec();
    if sh.len() != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "front-end expects a T x F feature matrix, got {sh:?}"
        )));
    }
    let (t, fd) = (sh[0], sh[1]);
    if t < 4 {
        return Err(TensorError::InputTooShort { min: 4, got: t });
    }
    let x = f.g.reshape(feats, &[t * fd, 1])?;
    let y1 = conv2d_stage(f, x, t, fd, p.w1, p.b1)?;
    let (t1, f1) = (halved(t), halved(fd));
    let y2 = conv2d_stage(f, y1, t1, f1, p.w2, p.b2)?;
    let (t2, f2) = (halved(t1), halved(f1));
    let flat = f.g.reshape(y2, &[t2, f2 * channels])?;
    let projected = f.lin(flat, &p.proj)?;
    f.maybe_dropout(projected, dropout_p)
}

/// Full encoder: front-end subsampling then N identical blocks.
pub fn encoder_forward(
    f: &mut Fwd,
    feats: NodeId,
    layout: &EncoderParams,
    bn: &mut [BnState],
    cfg: &BlockConfig,
    channels: usize,
) -> Result<NodeId> {
    let outs = encoder_forward_batch(f, &[feats], layout, bn, cfg, channels)?;
    Ok(outs[0])
}

/// Encoder forward over a minibatch; batch norm pools statistics across the
/// batch, everything else runs per sequence.
pub fn encoder_forward_batch(
    f: &mut Fwd,
    feats: &[NodeId],
    layout: &EncoderParams,
    bn: &mut [BnState],
    cfg: &BlockConfig,
    channels: usize,
) -> Result<Vec<NodeId>> {
    let mut hs = Vec::with_capacity(feats.len());
    for &x in feats {
        hs.push(subsample(f, x, &layout.subsample, channels, cfg.dropout_p)?);
    }
    for (p, state) in layout.blocks.iter().zip(bn.iter_mut()) {
        hs = block_forward_batch(f, &hs, p, state, cfg)?;
    }
    Ok(hs)
}

/// Encoder parameters plus per-block batch-norm state.
#[derive(Debug)]
pub struct Encoder {
    pub cfg: BlockConfig,
    pub input_dim: usize,
    pub channels: usize,
    pub layout: EncoderParams,
    pub bn: Vec<BnState>,
}

impl Encoder {
    pub fn register(
        store: &mut ParamStore,
        cfg: &BlockConfig,
        input_dim: usize,
        channels: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 || channels == 0 {
            return Err(TensorError::Invalid(
                "input_dim and channels must be positive".into(),
            ));
        }
        let subsample =
            SubsampleParams::register(store, rng, "enc.sub", input_dim, channels, cfg.d);
        let blocks = (0..cfg.n_blocks)
            .map(|i| BlockParams::register(store, rng, cfg, &format!("enc.b{i}")))
            .collect();
        let bn = (0..cfg.n_blocks).map(|_| BnState::new(cfg.d)).collect();
        Ok(Self {
            cfg: cfg.clone(),
            input_dim,
            channels,
            layout: EncoderParams { subsample, blocks },
            bn,
        })
    }
}

// ── parameter accounting ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub per_block: usize,
    pub encoder: usize,
}

/// Exact learnable-scalar count, derived arithmetically from the config.
/// Cross-checked in tests against the store's actual allocation.
pub fn count_parameters(cfg: &BlockConfig, input_dim: usize, channels: usize) -> ParamCount {
    let d = cfg.d;
    let e = cfg.ffn_expansion;
    let ffn = 2 * d + (d * e * d + e * d) + (e * d * d + d);
    let attn = 2 * d + 5 * d * d + 2 * d;
    let bfim_trans = (d * d + d) + 2 * d;
    let mut conv = d * d + d; // entry pointwise
    if cfg.g2l {
        conv += 2 * d + d * d; // gate source: ln + pointwise
    }
    conv += cfg.kernel * d; // depthwise kernel
    conv += 2 * d; // batch norm affine
    if cfg.dyrelu {
        let hidden = d / cfg.dyrelu_ratio;
        let spec_k = 2;
        conv += d * hidden + hidden * 2 * spec_k * d;
    }
    conv += d * d + d; // closing pointwise
    let fusion = match cfg.fusion {
        FusionMode::Add => 0,
        FusionMode::Concat => 2 * d * d,
        FusionMode::Sfm => {
            let c = cfg.sfm_bottleneck;
            let se_hidden = d / cfg.se_ratio;
            2 * d * c + 2 * (c * d) + (d * se_hidden + se_hidden * d)
        }
    };
    let per_block = 2 * ffn + attn + bfim_trans + conv + fusion + 2 * d;
    let sub = (9 * channels + channels)
        + (9 * channels * channels + channels)
        + (subsample_flat_width(input_dim, channels) * d + d);
    ParamCount {
        per_block,
        encoder: sub + cfg.n_blocks * per_block,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::tensor::Tensor;

    fn rand_t(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
        rng.tensor(shape, -1.0, 1.0)
    }

    /// Register one block and hand back the store plus layout.
    fn setup_block(cfg: &BlockConfig, seed: u64) -> (ParamStore, BlockParams) {
        let mut store = ParamStore::new();
        let mut rng = StreamRng::new(seed, "init");
        let p = BlockParams::register(&mut store, &mut rng, cfg, "b");
        (store, p)
    }

    fn set_param(store: &mut ParamStore, id: ParamId, data: &[f64]) {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }

    fn identity(d: usize) -> Vec<f64> {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        m
    }

    #[test]
    fn g2l_zero_gate_weights_halve_projection() {
        let cfg = BlockConfig::with_dims(4, 2);
        let (mut store, p) = setup_block(&cfg, 1);
        let gate = p.conv.bfim.gate.unwrap();
        set_param(&mut store, gate.pw, &vec![0.0; 16]);
        let mut rng = StreamRng::new(2, "data");
        let x = rand_t(&mut rng, &[3, 4]);
        let g_raw = rand_t(&mut rng, &[3, 4]);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let gn = g.leaf(g_raw.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let out = g2l_interaction(&mut f, xn, gn, &p.conv.bfim).unwrap();
        let proj = conv_entry_projection(&mut f, xn, &p.conv.bfim).unwrap();
        for (o, pr) in g.data(out).iter().zip(g.data(proj)) {
            assert!((o - 0.5 * pr).abs() < 1e-15);
        }
    }

    #[test]
    fn g2l_analytic_three_quarter_gate() {
        let d = 3;
        let cfg = BlockConfig::with_dims(3, 1);
        let (mut store, p) = setup_block(&cfg, 3);
        let gate = p.conv.bfim.gate.unwrap();
        // freeze the gate-source norm to a constant e1 row, then project it
        // to ln(3) per element: sigmoid(ln 3) = 0.75
        set_param(&mut store, gate.ln.gamma, &vec![0.0; d]);
        let mut beta = vec![0.0; d];
        beta[0] = 1.0;
        set_param(&mut store, gate.ln.beta, &beta);
        let mut w_src = vec![0.0; d * d];
        for j in 0..d {
            w_src[j] = 3f64.ln(); // row 0 only
        }
        set_param(&mut store, gate.pw, &w_src);
        set_param(&mut store, p.conv.bfim.pw_in.w, &identity(d));
        set_param(&mut store, p.conv.bfim.pw_in.b.unwrap(), &vec![0.0; d]);

        let mut rng = StreamRng::new(4, "data");
        let x = rand_t(&mut rng, &[5, d]);
        let g_raw = rand_t(&mut rng, &[5, d]);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let gn = g.leaf(g_raw);
        let mut f = Fwd::new(&mut g, &store, false, None);
        let out = g2l_interaction(&mut f, xn, gn, &p.conv.bfim).unwrap();
        for (o, inp) in g.data(out).iter().zip(x.data()) {
            assert!((o - 0.75 * inp).abs() < 1e-12);
        }
    }

    #[test]
    fn g2l_matches_direct_formula() {
        let cfg = BlockConfig::with_dims(4, 2);
        let (store, p) = setup_block(&cfg, 5);
        let mut rng = StreamRng::new(6, "data");
        let x = rand_t(&mut rng, &[6, 4]);
        let g_raw = rand_t(&mut rng, &[6, 4]);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let gn = g.leaf(g_raw.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let out = g2l_interaction(&mut f, xn, gn, &p.conv.bfim).unwrap();

        let gate = p.conv.bfim.gate.unwrap();
        let normed = oracles::naive_layer_norm(
            &g_raw,
            store.get(gate.ln.gamma).data(),
            store.get(gate.ln.beta).data(),
            LAYER_NORM_EPS,
        );
        let gate_src = oracles::naive_matmul(&normed, store.get(gate.pw)).unwrap();
        let expect = oracles::naive_gated_projection(
            &x,
            store.get(p.conv.bfim.pw_in.w),
            store.get(p.conv.bfim.pw_in.b.unwrap()).data(),
            &gate_src,
        )
        .unwrap();
        assert!(oracles::max_abs_diff(g.value(out), &expect) < 1e-12);
    }

    #[test]
    fn l2g_zero_local_features_halve_projection() {
        let cfg = BlockConfig::with_dims(4, 2);
        let (store, p) = setup_block(&cfg, 7);
        let mut rng = StreamRng::new(8, "data");
        let g_raw = rand_t(&mut rng, &[4, 4]);
        let mut g = Graph::new();
        let gn = g.leaf(g_raw);
        let zero = g.constant(&[4, 4], vec![0.0; 16]).unwrap();
        let mut f = Fwd::new(&mut g, &store, false, None);
        let out = l2g_interaction(&mut f, gn, zero, &p.bfim_trans).unwrap();
        let proj = trans_projection(&mut f, gn, &p.bfim_trans).unwrap();
        for (o, pr) in g.data(out).iter().zip(g.data(proj)) {
            assert!((o - 0.5 * pr).abs() < 1e-15);
        }
    }

    #[test]
    fn l2g_saturated_gate_passes_projection() {
        let cfg = BlockConfig::with_dims(4, 2);
        let (store, p) = setup_block(&cfg, 9);
        let mut rng = StreamRng::new(10, "data");
        let g_raw = rand_t(&mut rng, &[4, 4]);
        let mut g = Graph::new();
        let gn = g.leaf(g_raw);
        let ten = g.constant(&[4, 4], vec![10.0; 16]).unwrap();
        let mut f = Fwd::new(&mut g, &store, false, None);
        let out = l2g_interaction(&mut f, gn, ten, &p.bfim_trans).unwrap();
        let proj = trans_projection(&mut f, gn, &p.bfim_trans).unwrap();
        let sig10 = 1.0 / (1.0 + (-10f64).exp());
        assert!((sig10 - 0.9999546).abs() < 1e-7);
        for (o, pr) in g.data(out).iter().zip(g.data(proj)) {
            assert!((o - pr * sig10).abs() < 1e-15);
            assert!((o - pr).abs() <= pr.abs() * 5e-5 + 1e-15);
        }
    }

    #[test]
    fn l2g_matches_direct_formula_and_is_bounded() {
        let cfg = BlockConfig::with_dims(4, 2);
        let (store, p) = setup_block(&cfg, 11);
        let mut rng = StreamRng::new(12, "data");
        let g_raw = rand_t(&mut rng, &[6, 4]);
        let l = rand_t(&mut rng, &[6, 4]);
        let mut g = Graph::new();
        let gn = g.leaf(g_raw.clone());
        let ln_ = g.leaf(l.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let out = l2g_interaction(&mut f, gn, ln_, &p.bfim_trans).unwrap();

        let normed = oracles::naive_layer_norm(
            &g_raw,
            store.get(p.bfim_trans.ln.gamma).data(),
            store.get(p.bfim_trans.ln.beta).data(),
            LAYER_NORM_EPS,
        );
        let expect = oracles::naive_gated_projection(
            &normed,
            store.get(p.bfim_trans.pw_in.w),
            store.get(p.bfim_trans.pw_in.b.unwrap()).data(),
            &l,
        )
        .unwrap();
        assert!(oracles::max_abs_diff(f.g.value(out), &expect) < 1e-12);

        // sigmoid gates shrink magnitudes
        let proj = trans_projection(&mut f, gn, &p.bfim_trans).unwrap();
        for (o, pr) in f.g.data(out).iter().zip(f.g.data(proj)) {
            assert!(o.abs() <= pr.abs());
        }
    }

    #[test]
    fn add_fuse_identities() {
        let mut rng = StreamRng::new(13, "data");
        let l = rand_t(&mut rng, &[4, 3]);
        let mut g = Graph::new();
        let ln_ = g.leaf(l.clone());
        let zero = g.constant(&[4, 3], vec![0.0; 12]).unwrap();
        let y = add_fuse(&mut g, ln_, zero).unwrap();
        assert_eq!(g.data(y), l.data());

        let neg = g.neg(ln_).unwrap();
        let y = add_fuse(&mut g, ln_, neg).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));

        let r = rand_t(&mut rng, &[4, 3]);
        let rn = g.leaf(r.clone());
        let y = add_fuse(&mut g, ln_, rn).unwrap();
        for (o, (a, b)) in g.data(y).iter().zip(l.data().iter().zip(r.data())) {
            assert_eq!(*o, a + b);
        }
    }

    #[test]
    fn concat_fuse_selector_and_add_reduction() {
        let d = 3;
        let cfg = BlockConfig {
            fusion: FusionMode::Concat,
            ..BlockConfig::with_dims(d, 1)
        };
        let (mut store, p) = setup_block(&cfg, 14);
        let FusionParams::Concat { w_fuse } = p.fusion else {
            panic!("expected concat weights");
        };
        let mut rng = StreamRng::new(15, "data");
        let l = rand_t(&mut rng, &[5, d]);
        let r = rand_t(&mut rng, &[5, d]);

        // [I; 0] recovers the first operand exactly
        let mut sel = vec![0.0; 2 * d * d];
        for i in 0..d {
            sel[i * d + i] = 1.0;
        }
        set_param(&mut store, w_fuse, &sel);
        let mut g = Graph::new();
        let ln_ = g.leaf(l.clone());
        let rn = g.leaf(r.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let y = concat_fuse(&mut f, ln_, rn, w_fuse).unwrap();
        assert_eq!(g.data(y), l.data());

        // [I; I] equals elementwise addition exactly
        let mut both = vec![0.0; 2 * d * d];
        for i in 0..d {
            both[i * d + i] = 1.0;
            both[(d + i) * d + i] = 1.0;
        }
        set_param(&mut store, w_fuse, &both);
        let mut g = Graph::new();
        let ln_ = g.leaf(l.clone());
        let rn = g.leaf(r.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let y = concat_fuse(&mut f, ln_, rn, w_fuse).unwrap();
        let a = add_fuse(f.g, ln_, rn).unwrap();
        assert!(g
            .data(y)
            .iter()
            .zip(g.data(a))
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn concat_fuse_matches_explicit_composition() {
        let d = 4;
        let cfg = BlockConfig {
            fusion: FusionMode::Concat,
            ..BlockConfig::with_dims(d, 2)
        };
        let (store, p) = setup_block(&cfg, 16);
        let FusionParams::Concat { w_fuse } = p.fusion else {
            panic!()
        };
        let mut rng = StreamRng::new(17, "data");
        let l = rand_t(&mut rng, &[6, d]);
        let r = rand_t(&mut rng, &[6, d]);
        let mut g = Graph::new();
        let ln_ = g.leaf(l.clone());
        let rn = g.leaf(r.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let y = concat_fuse(&mut f, ln_, rn, w_fuse).unwrap();

        let mut cat = Vec::new();
        for i in 0..6 {
            cat.extend_from_slice(&l.data()[i * d..(i + 1) * d]);
            cat.extend_from_slice(&r.data()[i * d..(i + 1) * d]);
        }
        let cat = Tensor::new(&[6, 2 * d], cat).unwrap();
        let expect = oracles::naive_matmul(&cat, store.get(w_fuse)).unwrap();
        assert!(oracles::max_abs_diff(g.value(y), &expect) < 1e-12);
    }

    fn sfm_of(cfg: &BlockConfig, p: &BlockParams) -> SfmParams {
        match &p.fusion {
            FusionParams::Sfm(s) => *s,
            _ => panic!("expected sfm weights for {:?}", cfg.fusion),
        }
    }

    #[test]
    fn sfm_equal_branch_heads_give_half_weights() {
        let d = 4;
        let cfg = BlockConfig::with_dims(d, 2);
        let (mut store, p) = setup_block(&cfg, 18);
        let sfm = sfm_of(&cfg, &p);
        let wu1 = store.get(sfm.w_u1).data().to_vec();
        set_param(&mut store, sfm.w_u2, &wu1);
        let mut rng = StreamRng::new(19, "data");
        let l = rand_t(&mut rng, &[5, d]);
        let r = rand_t(&mut rng, &[5, d]);
        let mut g = Graph::new();
        let ln_ = g.leaf(l.clone());
        let rn = g.leaf(r.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let (alpha, beta) = sfm_branch_weights(&mut f, ln_, rn, &sfm).unwrap();
        for (&a, &b) in g.data(alpha).iter().zip(g.data(beta)) {
            assert!((a - 0.5).abs() < 1e-12);
            assert!((a + b - 1.0).abs() < 1e-12);
        }
        // weighted sum is the plain average
        let half_l = g.mul(ln_, alpha).unwrap();
        let half_r = g.mul(rn, beta).unwrap();
        let y = g.add(half_l, half_r).unwrap();
        for (o, (a, b)) in g.data(y).iter().zip(l.data().iter().zip(r.data())) {
            assert!((o - 0.5 * (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn sfm_saturated_logits_select_first_branch() {
        let d = 4;
        let cfg = BlockConfig {
            sfm_bottleneck: 1,
            ..BlockConfig::with_dims(d, 2)
        };
        let (mut store, p) = setup_block(&cfg, 20);
        let sfm = sfm_of(&cfg, &p);
        // L = +1, G = -1 rows; pick w_f so the bottleneck activation is
        // exactly 1, then push the branch-1 logit 20 above branch 2.
        let mut wf = vec![0.0; 2 * d];
        for i in 0..d {
            wf[i] = 1.0 / d as f64;
        }
        set_param(&mut store, sfm.w_f, &wf);
        set_param(&mut store, sfm.w_u1, &vec![20.0; d]);
        set_param(&mut store, sfm.w_u2, &vec![0.0; d]);
        let l = Tensor::filled(&[3, d], 1.0);
        let r = Tensor::filled(&[3, d], -1.0);
        let mut g = Graph::new();
        let ln_ = g.leaf(l.clone());
        let rn = g.leaf(r);
        let mut f = Fwd::new(&mut g, &store, false, None);
        let (alpha, beta) = sfm_branch_weights(&mut f, ln_, rn, &sfm).unwrap();
        let expect = 1.0 / (1.0 + (-20f64).exp());
        for &a in g.data(alpha) {
            assert!((a - expect).abs() < 1e-12);
            assert!(a > 1.0 - 3e-9);
        }
        let wl = g.mul(ln_, alpha).unwrap();
        let wr = g.mul(rn, beta).unwrap();
        let y = g.add(wl, wr).unwrap();
        for (o, s) in g.data(y).iter().zip(l.data()) {
            assert!((o - s).abs() < 1e-8);
        }
    }

    #[test]
    fn sfm_matches_stepwise_oracle() {
        let d = 6;
        let cfg = BlockConfig::with_dims(d, 2);
        let (store, p) = setup_block(&cfg, 21);
        let sfm = sfm_of(&cfg, &p);
        let mut rng = StreamRng::new(22, "data");
        let l = rand_t(&mut rng, &[7, d]);
        let r = rand_t(&mut rng, &[7, d]);
        let mut g = Graph::new();
        let ln_ = g.leaf(l.clone());
        let rn = g.leaf(r.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let y = sfm_fuse(&mut f, ln_, rn, &sfm).unwrap();
        let expect = oracles::naive_sfm(
            &l,
            &r,
            store.get(sfm.w_f),
            store.get(sfm.w_u1),
            store.get(sfm.w_u2),
            store.get(sfm.se.w_down),
            store.get(sfm.se.w_up),
        )
        .unwrap();
        assert!(oracles::max_abs_diff(g.value(y), &expect) < 1e-12);
    }

    #[test]
    fn sfm_weights_invariant_under_joint_time_permutation() {
        let d = 4;
        let cfg = BlockConfig::with_dims(d, 2);
        let (store, p) = setup_block(&cfg, 23);
        let sfm = sfm_of(&cfg, &p);
        let mut rng = StreamRng::new(24, "data");
        let t = 6;
        let l = rand_t(&mut rng, &[t, d]);
        let r = rand_t(&mut rng, &[t, d]);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |x: &Tensor| {
            let mut p = Tensor::zeros(&[t, d]);
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..d {
                    p.data_mut()[dst * d + c] = x.data()[src * d + c];
                }
            }
            p
        };
        let alpha_of = |l: &Tensor, r: &Tensor| {
            let mut g = Graph::new();
            let ln_ = g.leaf(l.clone());
            let rn = g.leaf(r.clone());
            let mut f = Fwd::new(&mut g, &store, false, None);
            let (alpha, _) = sfm_branch_weights(&mut f, ln_, rn, &sfm).unwrap();
            g.data(alpha).to_vec()
        };
        let a1 = alpha_of(&l, &r);
        let a2 = alpha_of(&permute(&l), &permute(&r));
        for (x, y) in a1.iter().zip(&a2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sfm_argmax_invariant_under_positive_logit_scaling() {
        let d = 5;
        let cfg = BlockConfig::with_dims(d, 1);
        let (mut store, p) = setup_block(&cfg, 25);
        let sfm = sfm_of(&cfg, &p);
        let mut rng = StreamRng::new(26, "data");
        let l = rand_t(&mut rng, &[6, d]);
        let r = rand_t(&mut rng, &[6, d]);
        let alpha_of = |store: &ParamStore| {
            let mut g = Graph::new();
            let ln_ = g.leaf(l.clone());
            let rn = g.leaf(r.clone());
            let mut f = Fwd::new(&mut g, store, false, None);
            let (alpha, _) = sfm_branch_weights(&mut f, ln_, rn, &sfm).unwrap();
            g.data(alpha).to_vec()
        };
        let base = alpha_of(&store);
        let wu1 = store.get(sfm.w_u1).data().to_vec();
        let wu2 = store.get(sfm.w_u2).data().to_vec();
        for scale in [0.25, 3.0, 40.0] {
            // move both logit heads apart around their mean: X1-X2 scales by
            // `scale`, X1+X2 unchanged
            let scaled1: Vec<f64> = wu1
                .iter()
                .zip(&wu2)
                .map(|(a, b)| (a + b) / 2.0 + scale * (a - b) / 2.0)
                .collect();
            let scaled2: Vec<f64> = wu1
                .iter()
                .zip(&wu2)
                .map(|(a, b)| (a + b) / 2.0 - scale * (a - b) / 2.0)
                .collect();
            set_param(&mut store, sfm.w_u1, &scaled1);
            set_param(&mut store, sfm.w_u2, &scaled2);
            let scaled = alpha_of(&store);
            for (b, s) in base.iter().zip(&scaled) {
                assert_eq!(*b > 0.5, *s > 0.5, "branch choice flipped at scale {scale}");
            }
            set_param(&mut store, sfm.w_u1, &wu1);
            set_param(&mut store, sfm.w_u2, &wu2);
        }
    }

    fn switch_grid() -> Vec<(bool, bool, bool)> {
        vec![
            (false, false, false),
            (true, false, false),
            (false, true, true),
            (true, true, true),
        ]
    }

    #[test]
    fn block_preserves_shape_for_all_modes_and_switches() {
        for fusion in [FusionMode::Add, FusionMode::Concat, FusionMode::Sfm] {
            for (l2g, g2l, dyrelu) in switch_grid() {
                let cfg = BlockConfig {
                    fusion,
                    l2g,
                    g2l,
                    dyrelu,
                    ..BlockConfig::with_dims(8, 2)
                };
                let (store, p) = setup_block(&cfg, 27);
                let mut rng = StreamRng::new(28, "data");
                let x = rand_t(&mut rng, &[5, 8]);
                let mut g = Graph::new();
                let xn = g.leaf(x);
                let mut f = Fwd::new(&mut g, &store, true, None);
                let mut bn = BnState::new(8);
                let y = block_forward(&mut f, xn, &p, &mut bn, &cfg).unwrap();
                assert_eq!(g.shape(y), &[5, 8]);
            }
        }
    }

    #[test]
    fn block_equals_manual_stage_composition() {
        // plain parallel composition: no interactions, additive fusion
        let cfg = BlockConfig {
            fusion: FusionMode::Add,
            l2g: false,
            g2l: false,
            dyrelu: false,
            dropout_p: 0.0,
            ..BlockConfig::with_dims(8, 2)
        };
        let (store, p) = setup_block(&cfg, 29);
        let mut rng = StreamRng::new(30, "data");
        let x = rand_t(&mut rng, &[6, 8]);

        let auto = {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let mut f = Fwd::new(&mut g, &store, true, None);
            let mut bn = BnState::new(8);
            let y = block_forward(&mut f, xn, &p, &mut bn, &cfg).unwrap();
            g.data(y).to_vec()
        };

        let manual = {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let mut f = Fwd::new(&mut g, &store, true, None);
            let mut bn = BnState::new(8);
            // macaron half step
            let h = ffn(&mut f, xn, &p.ffn1, 0.0).unwrap();
            let h = f.g.scale(h, 0.5).unwrap();
            let x1 = f.g.add(xn, h).unwrap();
            // branches
            let g_raw = transformer_branch(&mut f, x1, &p.ln_attn, &p.mhsa, cfg.heads).unwrap();
            let mut l = conv_entry_projection(&mut f, x1, &p.conv.bfim).unwrap();
            let kn = f.p(p.conv.kernel);
            l = depthwise_conv1d(f.g, l, kn).unwrap();
            let gamma = f.p(p.conv.bn.gamma);
            let beta = f.p(p.conv.bn.beta);
            l = batch_norm(
                f.g, l, gamma, beta, &mut bn, true, BATCH_NORM_MOMENTUM, BATCH_NORM_EPS,
            )
            .unwrap();
            l = swish(f.g, l).unwrap();
            l = f.lin(l, &p.conv.pw_out).unwrap();
            let gl = trans_projection(&mut f, g_raw, &p.bfim_trans).unwrap();
            let fused = add_fuse(f.g, l, gl).unwrap();
            let x2 = f.g.add(x1, fused).unwrap();
            let h2 = ffn(&mut f, x2, &p.ffn2, 0.0).unwrap();
            let h2 = f.g.scale(h2, 0.5).unwrap();
            let pre = f.g.add(x2, h2).unwrap();
            let y = f.ln(pre, &p.ln_out).unwrap();
            g.data(y).to_vec()
        };

        assert_eq!(auto.len(), manual.len());
        for (a, m) in auto.iter().zip(&manual) {
            assert_eq!(a.to_bits(), m.to_bits(), "staged composition must be bit-identical");
        }
    }

    #[test]
    fn conv_branch_channel_locality_with_frozen_gates() {
        let d = 4;
        let cfg = BlockConfig {
            dyrelu: false,
            ..BlockConfig::with_dims(d, 2)
        };
        let (mut store, p) = setup_block(&cfg, 31);
        // freeze gates at 0.5 and make both pointwise convs the identity
        let gate = p.conv.bfim.gate.unwrap();
        set_param(&mut store, gate.pw, &vec![0.0; d * d]);
        set_param(&mut store, p.conv.bfim.pw_in.w, &identity(d));
        set_param(&mut store, p.conv.bfim.pw_in.b.unwrap(), &vec![0.0; d]);
        set_param(&mut store, p.conv.pw_out.w, &identity(d));
        set_param(&mut store, p.conv.pw_out.b.unwrap(), &vec![0.0; d]);

        let mut rng = StreamRng::new(32, "data");
        let mut x = rand_t(&mut rng, &[6, d]);
        let g_raw = rand_t(&mut rng, &[6, d]);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let gn = g.leaf(g_raw.clone());
            let mut f = Fwd::new(&mut g, &store, true, None);
            let mut bn = BnState::new(d);
            let y = conv_branch(&mut f, xn, gn, &p.conv, &mut bn, &cfg).unwrap();
            g.data(y).to_vec()
        };
        let before = run(&x);
        x.data_mut()[2 * d] += 1.0; // channel 0 at t=2
        let after = run(&x);
        for t in 0..6 {
            for c in 1..d {
                assert_eq!(
                    before[t * d + c].to_bits(),
                    after[t * d + c].to_bits(),
                    "channel {c} moved"
                );
            }
        }
        assert_ne!(before[2 * d], after[2 * d]);
    }

    fn encoder_setup(
        cfg: &BlockConfig,
        input_dim: usize,
        channels: usize,
        seed: u64,
    ) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = StreamRng::new(seed, "init");
        let enc = Encoder::register(&mut store, cfg, input_dim, channels, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn subsample_length_arithmetic() {
        assert_eq!(subsampled_len(100), 25);
        assert_eq!(subsampled_len(7), 2);
        assert_eq!(subsampled_len(4), 1);
    }

    #[test]
    fn subsample_shapes_and_short_input() {
        let cfg = BlockConfig::with_dims(8, 2);
        let (store, enc) = encoder_setup(&cfg, 6, 4, 33);
        let mut rng = StreamRng::new(34, "data");
        let feats = rand_t(&mut rng, &[7, 6]);
        let mut g = Graph::new();
        let fn_ = g.leaf(feats);
        let mut f = Fwd::new(&mut g, &store, false, None);
        let y = subsample(&mut f, fn_, &enc.layout.subsample, 4, 0.0).unwrap();
        assert_eq!(g.shape(y), &[2, 8]);

        let short = g.constant(&[3, 6], vec![0.0; 18]).unwrap();
        let mut f = Fwd::new(&mut g, &store, false, None);
        assert!(matches!(
            subsample(&mut f, short, &enc.layout.subsample, 4, 0.0),
            Err(TensorError::InputTooShort { min: 4, got: 3 })
        ));
    }

    #[test]
    fn subsample_matches_naive_2d_convolutions() {
        let cfg = BlockConfig::with_dims(8, 2);
        let channels = 3;
        let (store, enc) = encoder_setup(&cfg, 4, channels, 35);
        let mut rng = StreamRng::new(36, "data");
        let (t, fd) = (8, 4);
        let feats = rand_t(&mut rng, &[t, fd]);
        let mut g = Graph::new();
        let fn_ = g.leaf(feats.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let y = subsample(&mut f, fn_, &enc.layout.subsample, channels, 0.0).unwrap();

        // naive: conv(3x3, stride 2, pad 1) + relu, twice, flatten, project
        let sub = &enc.layout.subsample;
        // store layout is (tap*c_in + ci) x c_out; naive wants [co][ci][kh][kw]
        let repack = |w: &Tensor, c_in: usize, c_out: usize| -> Vec<f64> {
            let mut k = vec![0.0; c_out * c_in * 9];
            for tap in 0..9 {
                for ci in 0..c_in {
                    for co in 0..c_out {
                        k[(co * c_in + ci) * 9 + tap] = w.data()[(tap * c_in + ci) * c_out + co];
                    }
                }
            }
            k
        };
        let k1 = repack(store.get(sub.w1), 1, channels);
        let mut s1 = oracles::naive_conv2d(
            &feats.clone(),
            t,
            fd,
            1,
            &k1,
            store.get(sub.b1).data(),
            channels,
            3,
            2,
            1,
        );
        for v in s1.data_mut() {
            *v = v.max(0.0);
        }
        let k2 = repack(store.get(sub.w2), channels, channels);
        let mut s2 = oracles::naive_conv2d(
            &s1,
            halved(t),
            halved(fd),
            channels,
            &k2,
            store.get(sub.b2).data(),
            channels,
            3,
            2,
            1,
        );
        for v in s2.data_mut() {
            *v = v.max(0.0);
        }
        let flat = Tensor::new(
            &[subsampled_len(t), halved(halved(fd)) * channels],
            s2.data().to_vec(),
        )
        .unwrap();
        let expect = oracles::naive_linear(
            &flat,
            store.get(sub.proj.w),
            Some(store.get(sub.proj.b.unwrap()).data()),
        )
        .unwrap();
        assert!(oracles::max_abs_diff(g.value(y), &expect) < 1e-12);
    }

    #[test]
    fn encoder_zero_blocks_is_subsample_passthrough() {
        let cfg = BlockConfig {
            n_blocks: 0,
            ..BlockConfig::with_dims(8, 2)
        };
        let (store, mut enc) = encoder_setup(&cfg, 6, 4, 37);
        let mut rng = StreamRng::new(38, "data");
        let feats = rand_t(&mut rng, &[9, 6]);
        let mut g = Graph::new();
        let fn_ = g.leaf(feats.clone());
        let mut f = Fwd::new(&mut g, &store, false, None);
        let y = encoder_forward(&mut f, fn_, &enc.layout, &mut enc.bn, &cfg, 4).unwrap();
        let fn2 = g.leaf(feats);
        let mut f = Fwd::new(&mut g, &store, false, None);
        let s = subsample(&mut f, fn2, &enc.layout.subsample, 4, cfg.dropout_p).unwrap();
        assert!(g
            .data(y)
            .iter()
            .zip(g.data(s))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn encoder_single_block_composes() {
        let cfg = BlockConfig {
            n_blocks: 1,
            ..BlockConfig::with_dims(8, 2)
        };
        let (store, mut enc) = encoder_setup(&cfg, 6, 4, 39);
        let mut rng = StreamRng::new(40, "data");
        let feats = rand_t(&mut rng, &[10, 6]);
        let run_stacked = {
            let mut g = Graph::new();
            let fn_ = g.leaf(feats.clone());
            let mut f = Fwd::new(&mut g, &store, true, None);
            let y = encoder_forward(&mut f, fn_, &enc.layout, &mut enc.bn, &cfg, 4).unwrap();
            g.data(y).to_vec()
        };
        let run_manual = {
            let mut g = Graph::new();
            let fn_ = g.leaf(feats);
            let mut f = Fwd::new(&mut g, &store, true, None);
            let s = subsample(&mut f, fn_, &enc.layout.subsample, 4, cfg.dropout_p).unwrap();
            let mut bn = BnState::new(8);
            let y = block_forward(&mut f, s, &enc.layout.blocks[0], &mut bn, &cfg).unwrap();
            g.data(y).to_vec()
        };
        assert!(run_stacked
            .iter()
            .zip(&run_manual)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn encoder_shape_at_desk_scale() {
        let cfg = BlockConfig::desk_default();
        let (store, mut enc) = encoder_setup(&cfg, 16, 16, 41);
        let mut rng = StreamRng::new(42, "data");
        let feats = rand_t(&mut rng, &[100, 16]);
        let mut g = Graph::new();
        let fn_ = g.leaf(feats);
        let mut f = Fwd::new(&mut g, &store, true, None);
        let y = encoder_forward(&mut f, fn_, &enc.layout, &mut enc.bn, &cfg, 16).unwrap();
        assert_eq!(g.shape(y), &[25, 32]);
    }

    #[test]
    fn linear_param_contribution() {
        let mut store = ParamStore::new();
        let mut rng = StreamRng::new(43, "init");
        register_linear(&mut store, &mut rng, "l", 4, 4, true);
        assert_eq!(store.scalar_count(), 20);
    }

    #[test]
    fn count_matches_store_over_config_grid() {
        for fusion in [FusionMode::Add, FusionMode::Concat, FusionMode::Sfm] {
            for (l2g, g2l, dyrelu) in switch_grid() {
                let cfg = BlockConfig {
                    fusion,
                    l2g,
                    g2l,
                    dyrelu,
                    ..BlockConfig::with_dims(8, 2)
                };
                let (store, _) = setup_block(&cfg, 44);
                let formula = count_parameters(&cfg, 16, 8);
                assert_eq!(
                    store.scalar_count(),
                    formula.per_block,
                    "block count mismatch for {fusion:?} l2g={l2g} g2l={g2l} dy={dyrelu}"
                );

                let (estore, _) = encoder_setup(&cfg, 16, 8, 45);
                assert_eq!(estore.scalar_count(), formula.encoder);
            }
        }
    }

    #[test]
    fn count_hand_tally_reference_config() {
        // d=8, heads=2, kernel=3, expansion=4, c=4, ratios 4, K=2,
        // input_dim=16, channels=8, two blocks -- tallied layer by layer
        let cfg = BlockConfig {
            sfm_bottleneck: 4,
            ..BlockConfig::with_dims(8, 2)
        };
        let ffn = 16 + (8 * 32 + 32) + (32 * 8 + 8); // ln + in + out = 568
        let attn = 16 + 5 * 64 + 16; // ln + five d*d mats + u,v = 352
        let bfim_t = (64 + 8) + 16; // pointwise + ln = 88
        let conv = (64 + 8) + (16 + 64) + 24 + 16 + (8 * 2 + 2 * 32) + (64 + 8); // 344
        let sfm = 2 * 8 * 4 + 2 * (4 * 8) + (8 * 2 + 2 * 8); // 160
        let per_block = 2 * ffn + attn + bfim_t + conv + sfm + 16;
        assert_eq!(per_block, 2096);
        let sub = (9 * 8 + 8) + (9 * 8 * 8 + 8) + (4 * 8 * 8 + 8); // 928
        let encoder = sub + 2 * per_block;
        assert_eq!(encoder, 5120);

        let counted = count_parameters(&cfg, 16, 8);
        assert_eq!(counted.per_block, per_block);
        assert_eq!(counted.encoder, encoder);
    }

    #[test]
    fn sfm_counts_exceed_add_counts() {
        for d in [4usize, 8, 16, 32] {
            let base = BlockConfig::with_dims(d, 2);
            let add = count_parameters(
                &BlockConfig { fusion: FusionMode::Add, ..base.clone() },
                16,
                8,
            );
            let sfm = count_parameters(
                &BlockConfig { fusion: FusionMode::Sfm, ..base.clone() },
                16,
                8,
            );
            assert!(sfm.per_block > add.per_block);
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = BlockConfig::with_dims(8, 3);
        assert!(cfg.validate().is_err()); // 8 % 3 != 0
        cfg = BlockConfig::with_dims(8, 2);
        cfg.kernel = 4;
        assert!(matches!(cfg.validate(), Err(TensorError::EvenKernel(4))));
        cfg = BlockConfig::with_dims(8, 2);
        cfg.dropout_p = 1.0;
        assert!(cfg.validate().is_err());
        cfg = BlockConfig::with_dims(2, 2);
        cfg.se_ratio = 4;
        assert!(cfg.validate().is_err()); // bottleneck collapses to zero
    }
}
