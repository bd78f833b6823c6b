//! Runnable verification suites: finite-difference gradient checks for every
//! primitive, layer, and assembled block; brute-force oracle equivalences;
//! and exact reduction identities. Shared by the CLI commands and the
//! acceptance tests.

use crate::attention::{relative_mhsa, relative_mhsa_with_weights, MhsaNodes};
use crate::check::{finite_diff_check, CheckReport, COMPOSITE_EPSILON, DEFAULT_EPSILON};
use crate::graph::{Graph, NodeId};
use crate::layers::{
    batch_norm, depthwise_conv1d, dynamic_relu, layer_norm, linear, pointwise_conv,
    squeeze_excitation, swish, BnState, DyReluSpec, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
    LAYER_NORM_EPS,
};
use crate::model::{
    add_fuse, block_forward, concat_fuse, conv_branch, g2l_interaction, l2g_interaction,
    sfm_branch_weights, sfm_fuse, subsample, BlockConfig, BlockParams, ConvBfim, FusionMode, Fwd,
    GateSource, LayerNormParams, LinearParams, SeParams, SfmParams, TransBfim,
};
use crate::oracles;
use crate::params::ParamStore;
use crate::rng::StreamRng;
use crate::tensor::{Result, Tensor};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const LAYER_TOL: f64 = 1e-5;

/// Outcome of one oracle-equivalence or identity check.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: String,
    pub instances: usize,
    pub max_abs_err: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl OracleReport {
    fn new(name: &str, instances: usize, max_abs_err: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            instances,
            max_abs_err,
            threshold,
            passed: max_abs_err <= threshold,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} instances={} max_abs_err={:.3e} threshold={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_abs_err,
            self.threshold
        )
    }
}

fn rng_for(seed: u64, label: &str) -> StreamRng {
    StreamRng::new(seed, label)
}

/// Close a check over `mean(output * W)` for a fixed random W. Plain
/// sum-reduction has an identically zero input gradient for sum-invariant
/// ops (softmax lanes, batch-norm channels), leaving only float noise to
/// compare; the projection also pins the check scale near O(1) so the
/// noise floor of f64 central differences stays far below tolerance.
fn project(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let mut r = StreamRng::new(seed, "check-projection");
    let mut w = r.tensor(&shape, 0.4, 1.6);
    for v in w.data_mut() {
        if r.bernoulli(0.5) {
            *v = -*v;
        }
    }
    let wn = g.leaf(w);
    let m = g.mul(y, wn)?;
    g.mean_all(m)
}

/// Uniform tensor bounded away from relu/max kinks so central differences
/// never straddle one.
fn kink_safe(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let mut t = rng.tensor(shape, -2.0, 2.0);
    for v in t.data_mut() {
        if v.abs() < 1e-3 {
            *v += v.signum().max(0.5) * 1e-2;
        }
    }
    t
}

fn positive(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    rng.tensor(shape, 0.5, 2.0)
}

/// Magnitudes in [0.3, 1.5] with random sign: keeps elementwise-product
/// gradients comfortably above the relative-error floor.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let mut t = rng.tensor(shape, 0.3, 1.5);
    for v in t.data_mut() {
        if rng.bernoulli(0.5) {
            *v = -*v;
        }
    }
    t
}

// ── primitive gradient checks ────────────────────────────────────────────

/// Gradient-check every graph primitive over two shapes per op.
pub fn primitive_gradient_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let shapes: [&[usize]; 2] = [&[3, 4], &[5, 2]];
    let mut reports = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &crate::check::TensorFn| -> Result<()> {
        reports.push(finite_diff_check(
            name,
            &|g, ids| {
                let y = f(g, ids)?;
                project(g, y, seed)
            },
            &inputs,
            DEFAULT_EPSILON,
            PRIMITIVE_TOL,
            seed,
        )?);
        Ok(())
    };

    for (si, &shape) in shapes.iter().enumerate() {
        let tag = format!("s{si}");
        let mut r = rng_for(seed, &format!("prim-{tag}"));
        let a = away_from_zero(&mut r, shape);
        let b = away_from_zero(&mut r, shape);
        let row = away_from_zero(&mut r, &[shape[1]]);
        run(&format!("add/{tag}"), vec![a.clone(), b.clone()], &|g, ids| {
            g.add(ids[0], ids[1])
        })?;
        run(&format!("add_broadcast/{tag}"), vec![a.clone(), row.clone()], &|g, ids| {
            g.add(ids[0], ids[1])
        })?;
        run(&format!("sub/{tag}"), vec![a.clone(), b.clone()], &|g, ids| {
            g.sub(ids[0], ids[1])
        })?;
        run(&format!("mul/{tag}"), vec![a.clone(), b.clone()], &|g, ids| {
            g.mul(ids[0], ids[1])
        })?;
        run(&format!("mul_broadcast/{tag}"), vec![a.clone(), row.clone()], &|g, ids| {
            g.mul(ids[0], ids[1])
        })?;
        let am = kink_safe(&mut r, shape);
        let mut bm = kink_safe(&mut r, shape);
        for (x, y) in bm.data_mut().iter_mut().zip(am.data()) {
            if (*x - y).abs() < 1e-3 {
                *x += 2e-2;
            }
        }
        run(&format!("maximum/{tag}"), vec![am, bm], &|g, ids| {
            g.maximum(ids[0], ids[1])
        })?;

        let m = r.tensor(&[shape[0], 3], -1.0, 1.0);
        let n = r.tensor(&[3, shape[1]], -1.0, 1.0);
        run(&format!("matmul/{tag}"), vec![m, n], &|g, ids| {
            g.matmul(ids[0], ids[1])
        })?;
        run(&format!("transpose/{tag}"), vec![a.clone()], &|g, ids| {
            g.transpose(ids[0])
        })?;
        run(&format!("concat_axis0/{tag}"), vec![a.clone(), b.clone()], &|g, ids| {
            g.concat(0, &[ids[0], ids[1]])
        })?;
        run(&format!("concat_axis1/{tag}"), vec![a.clone(), b.clone()], &|g, ids| {
            g.concat(1, &[ids[0], ids[1]])
        })?;
        let cols = shape[1];
        run(&format!("narrow/{tag}"), vec![a.clone()], &move |g, ids| {
            g.narrow(ids[0], 1, 0, cols.max(2) - 1)
        })?;
        run(&format!("split/{tag}"), vec![a.clone()], &|g, ids| {
            let parts = g.split(ids[0], 0, 1)?;
            Ok(parts[0])
        })?;
        let numel = shape.iter().product::<usize>();
        run(&format!("reshape/{tag}"), vec![a.clone()], &move |g, ids| {
            g.reshape(ids[0], &[numel])
        })?;
        let target = [2, shape[0], shape[1]];
        run(&format!("broadcast_to/{tag}"), vec![a.clone()], &move |g, ids| {
            g.broadcast_to(ids[0], &target)
        })?;
        let rows = shape[0] as i64;
        let idx: Vec<i64> = (0..rows).rev().chain([-1, 0]).collect();
        run(&format!("gather_rows/{tag}"), vec![a.clone()], &move |g, ids| {
            g.gather_rows(ids[0], &idx)
        })?;

        for axis in [0usize, 1] {
            run(&format!("reduce_mean{axis}/{tag}"), vec![a.clone()], &move |g, ids| {
                g.reduce_mean(ids[0], axis)
            })?;
            run(&format!("reduce_sum{axis}/{tag}"), vec![a.clone()], &move |g, ids| {
                g.reduce_sum(ids[0], axis)
            })?;
            run(&format!("softmax{axis}/{tag}"), vec![a.clone()], &move |g, ids| {
                g.softmax(ids[0], axis)
            })?;
        }
        run(&format!("sum_all/{tag}"), vec![a.clone()], &|g, ids| g.sum_all(ids[0]))?;

        run(&format!("exp/{tag}"), vec![a.clone()], &|g, ids| g.exp(ids[0]))?;
        let p = positive(&mut r, shape);
        run(&format!("log/{tag}"), vec![p.clone()], &|g, ids| g.log(ids[0]))?;
        run(&format!("sqrt/{tag}"), vec![p.clone()], &|g, ids| g.sqrt(ids[0]))?;
        run(&format!("recip/{tag}"), vec![p], &|g, ids| g.recip(ids[0]))?;
        run(&format!("neg/{tag}"), vec![a.clone()], &|g, ids| g.neg(ids[0]))?;
        let k = kink_safe(&mut r, shape);
        run(&format!("relu/{tag}"), vec![k], &|g, ids| g.relu(ids[0]))?;
        run(&format!("sigmoid/{tag}"), vec![a.clone()], &|g, ids| g.sigmoid(ids[0]))?;
        run(&format!("scale/{tag}"), vec![a.clone()], &|g, ids| g.scale(ids[0], -1.75))?;
        run(&format!("add_scalar/{tag}"), vec![a.clone()], &|g, ids| {
            g.add_scalar(ids[0], 0.625)
        })?;
    }
    Ok(reports)
}

// ── layer gradient checks ────────────────────────────────────────────────

pub fn layer_gradient_checks(seed: u64, t: usize, d: usize) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let mut r = rng_for(seed, &format!("layer-{t}x{d}"));
    let tag = format!("T{t}d{d}");
    let mut run = |name: String, inputs: Vec<Tensor>, f: &crate::check::TensorFn| -> Result<()> {
        reports.push(finite_diff_check(
            &name,
            &|g, ids| {
                let y = f(g, ids)?;
                project(g, y, seed)
            },
            &inputs,
            COMPOSITE_EPSILON,
            LAYER_TOL,
            seed,
        )?);
        Ok(())
    };

    let x = r.tensor(&[t, d], -1.5, 1.5);
    let w = r.tensor(&[d, d], -0.7, 0.7);
    let bias = r.tensor(&[d], -0.5, 0.5);
    run(format!("linear/{tag}"), vec![x.clone(), w.clone(), bias.clone()], &|g, ids| {
        linear(g, ids[0], ids[1], Some(ids[2]))
    })?;
    run(format!("pointwise_conv/{tag}"), vec![x.clone(), w.clone(), bias.clone()], &|g, ids| {
        pointwise_conv(g, ids[0], ids[1], Some(ids[2]))
    })?;

    let gamma = r.tensor(&[d], 0.5, 1.5);
    let beta = r.tensor(&[d], -0.5, 0.5);
    run(format!("layer_norm/{tag}"), vec![x.clone(), gamma.clone(), beta.clone()], &|g, ids| {
        layer_norm(g, ids[0], ids[1], ids[2], LAYER_NORM_EPS)
    })?;
    run(format!("batch_norm_train/{tag}"), vec![x.clone(), gamma.clone(), beta.clone()], &|g, ids| {
        let mut state = BnState::new(g.shape(ids[0])[1]);
        batch_norm(
            g,
            ids[0],
            ids[1],
            ids[2],
            &mut state,
            true,
            BATCH_NORM_MOMENTUM,
            BATCH_NORM_EPS,
        )
    })?;

    let kernel = r.tensor(&[3, d], -0.8, 0.8);
    run(format!("depthwise_conv1d/{tag}"), vec![x.clone(), kernel], &|g, ids| {
        depthwise_conv1d(g, ids[0], ids[1])
    })?;

    run(format!("swish/{tag}"), vec![x.clone()], &|g, ids| swish(g, ids[0]))?;
    run(format!("softmax_layer/{tag}"), vec![x.clone()], &|g, ids| {
        crate::layers::softmax(g, ids[0], 1)
    })?;
    // dropout contributes only in eval mode to checks, where it is the identity
    run(format!("dropout_eval/{tag}"), vec![x.clone()], &|g, ids| {
        let mut rng = StreamRng::new(0, "unused");
        crate::layers::dropout(g, ids[0], 0.5, false, &mut rng)
    })?;

    let spec = DyReluSpec::default();
    let hidden = (d / 4).max(1);
    let gfeat = r.tensor(&[t, d], -1.5, 1.5);
    let w1 = r.tensor(&[d, hidden], -0.7, 0.7);
    let w2 = r.tensor(&[hidden, 2 * spec.k * d], -0.7, 0.7);
    run(
        format!("dynamic_relu/{tag}"),
        vec![x.clone(), gfeat, w1, w2],
        &move |g, ids| dynamic_relu(g, ids[0], ids[1], ids[2], ids[3], &spec),
    )?;

    let w_down = r.tensor(&[d, hidden], -0.7, 0.7);
    let w_up = r.tensor(&[hidden, d], -0.7, 0.7);
    run(
        format!("squeeze_excitation/{tag}"),
        vec![x.clone(), w_down, w_up],
        &|g, ids| squeeze_excitation(g, ids[0], ids[1], ids[2]),
    )?;

    // attention with all parameters as inputs
    let heads = if d % 2 == 0 { 2 } else { 1 };
    let inputs = vec![
        x.clone(),
        r.tensor(&[d, d], -0.5, 0.5),
        r.tensor(&[d, d], -0.5, 0.5),
        r.tensor(&[d, d], -0.5, 0.5),
        r.tensor(&[d, d], -0.5, 0.5),
        r.tensor(&[d, d], -0.5, 0.5),
        r.tensor(&[d], -0.5, 0.5),
        r.tensor(&[d], -0.5, 0.5),
    ];
    run(format!("relative_mhsa/{tag}"), inputs, &move |g, ids| {
        let p = MhsaNodes {
            wq: ids[1],
            wk: ids[2],
            wv: ids[3],
            wo: ids[4],
            wpos: ids[5],
            u: ids[6],
            v: ids[7],
            heads,
        };
        relative_mhsa(g, ids[0], &p, None)
    })?;

    Ok(reports)
}

// ── interaction / fusion gradient checks ─────────────────────────────────

/// Store-backed check: registers exactly the weights one operation needs,
/// treats them (plus the activations) as explicit inputs.
fn check_with_store(
    name: &str,
    store: ParamStore,
    activations: Vec<Tensor>,
    f: impl Fn(&mut Fwd, &[NodeId]) -> Result<NodeId>,
    seed: u64,
) -> Result<CheckReport> {
    let mut inputs = activations.clone();
    inputs.extend(store.iter().map(|(_, e)| {
        let mut t = e.tensor.clone();
        t.requires_grad = false;
        t
    }));
    let n_act = activations.len();
    finite_diff_check(
        name,
        &|g, ids| {
            let mut fwd = Fwd::for_leaves(g, &store, &ids[n_act..]);
            let y = f(&mut fwd, &ids[..n_act])?;
            project(g, y, seed)
        },
        &inputs,
        COMPOSITE_EPSILON,
        LAYER_TOL,
        seed,
    )
}

fn mini_conv_bfim(store: &mut ParamStore, rng: &mut StreamRng, d: usize) -> ConvBfim {
    ConvBfim {
        pw_in: LinearParams {
            w: store.register_matrix("pw_in.w", d, d, d, rng),
            b: Some(store.register_zeros("pw_in.b", &[d])),
        },
        gate: Some(GateSource {
            ln: LayerNormParams {
                gamma: store.register_ones("gate.ln.gamma", &[d]),
                beta: store.register_zeros("gate.ln.beta", &[d]),
            },
            pw: store.register_matrix("gate.pw", d, d, d, rng),
        }),
    }
}

pub fn interaction_gradient_checks(seed: u64, t: usize, d: usize) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let tag = format!("T{t}d{d}");
    let mut r = rng_for(seed, &format!("inter-{tag}"));

    {
        let mut store = ParamStore::new();
        let p = mini_conv_bfim(&mut store, &mut r, d);
        let x = r.tensor(&[t, d], -1.5, 1.5);
        let graw = r.tensor(&[t, d], -1.5, 1.5);
        reports.push(check_with_store(
            &format!("g2l_interaction/{tag}"),
            store,
            vec![x, graw],
            move |f, acts| g2l_interaction(f, acts[0], acts[1], &p),
            seed,
        )?);
    }
    {
        let mut store = ParamStore::new();
        let p = TransBfim {
            pw_in: LinearParams {
                w: store.register_matrix("pw_in.w", d, d, d, &mut r),
                b: Some(store.register_zeros("pw_in.b", &[d])),
            },
            ln: LayerNormParams {
                gamma: store.register_ones("ln.gamma", &[d]),
                beta: store.register_zeros("ln.beta", &[d]),
            },
        };
        let graw = r.tensor(&[t, d], -1.5, 1.5);
        let l = r.tensor(&[t, d], -1.5, 1.5);
        reports.push(check_with_store(
            &format!("l2g_interaction/{tag}"),
            store,
            vec![graw, l],
            move |f, acts| l2g_interaction(f, acts[0], acts[1], &p),
            seed,
        )?);
    }
    {
        let l = r.tensor(&[t, d], -1.5, 1.5);
        let gl = r.tensor(&[t, d], -1.5, 1.5);
        reports.push(finite_diff_check(
            &format!("add_fuse/{tag}"),
            &|g, ids| {
                let y = add_fuse(g, ids[0], ids[1])?;
                project(g, y, seed)
            },
            &[l, gl],
            DEFAULT_EPSILON,
            LAYER_TOL,
            seed,
        )?);
    }
    {
        let mut store = ParamStore::new();
        let w_fuse = store.register_matrix("fuse.w", 2 * d, d, 2 * d, &mut r);
        let l = r.tensor(&[t, d], -1.5, 1.5);
        let gl = r.tensor(&[t, d], -1.5, 1.5);
        reports.push(check_with_store(
            &format!("concat_fuse/{tag}"),
            store,
            vec![l, gl],
            move |f, acts| concat_fuse(f, acts[0], acts[1], w_fuse),
            seed,
        )?);
    }
    {
        let c = (d / 2).max(1);
        let se_hidden = (d / 4).max(1);
        let mut store = ParamStore::new();
        let p = SfmParams {
            w_f: store.register_matrix("wf", 2 * d, c, 2 * d, &mut r),
            w_u1: store.register_matrix("wu1", c, d, c, &mut r),
            w_u2: store.register_matrix("wu2", c, d, c, &mut r),
            se: SeParams {
                w_down: store.register_matrix("se.down", d, se_hidden, d, &mut r),
                w_up: store.register_matrix("se.up", se_hidden, d, se_hidden, &mut r),
            },
        };
        let l = r.tensor(&[t, d], -1.5, 1.5);
        let gl = r.tensor(&[t, d], -1.5, 1.5);
        reports.push(check_with_store(
            &format!("sfm_fuse/{tag}"),
            store,
            vec![l, gl],
            move |f, acts| sfm_fuse(f, acts[0], acts[1], &p),
            seed,
        )?);
    }
    Ok(reports)
}

// ── block / subsample gradient checks ────────────────────────────────────

/// The four interaction-switch settings checked per fusion mode; the
/// dynamic-relu switch follows the global-to-local gate it belongs to.
pub fn switch_combos() -> [(bool, bool, bool); 4] {
    [
        (false, false, false),
        (true, false, false),
        (false, true, true),
        (true, true, true),
    ]
}

pub fn block_config(d: usize, fusion: FusionMode, combo: (bool, bool, bool)) -> BlockConfig {
    BlockConfig {
        fusion,
        l2g: combo.0,
        g2l: combo.1,
        dyrelu: combo.2,
        dropout_p: 0.0,
        heads: 2,
        ..BlockConfig::with_dims(d, 2)
    }
}

/// Gradient-check one assembled block over input plus every parameter.
pub fn block_gradient_check(cfg: &BlockConfig, t: usize, seed: u64) -> Result<CheckReport> {
    let mut store = ParamStore::new();
    let mut rng = StreamRng::new(seed, "block-check");
    let p = BlockParams::register(&mut store, &mut rng, cfg, "b");
    let x = rng.tensor(&[t, cfg.d], -1.5, 1.5);
    let name = format!(
        "block/{}-l2g{}-g2l{}-dy{}/T{}d{}",
        cfg.fusion.as_str(),
        cfg.l2g as u8,
        cfg.g2l as u8,
        cfg.dyrelu as u8,
        t,
        cfg.d
    );
    let cfg = cfg.clone();
    check_with_store(
        &name,
        store,
        vec![x],
        move |f, acts| {
            let mut bn = BnState::new(cfg.d);
            block_forward(f, acts[0], &p, &mut bn, &cfg)
        },
        seed,
    )
}

pub fn subsample_gradient_check(seed: u64, t: usize, f_dim: usize) -> Result<CheckReport> {
    let mut store = ParamStore::new();
    let mut rng = StreamRng::new(seed, "sub-check");
    let channels = 2;
    let d = 4;
    let p = crate::model::SubsampleParams::register(&mut store, &mut rng, "sub", f_dim, channels, d);
    let feats = rng.tensor(&[t, f_dim], -1.5, 1.5);
    check_with_store(
        &format!("subsample/T{t}f{f_dim}"),
        store,
        vec![feats],
        move |f, acts| subsample(f, acts[0], &p, channels, 0.0),
        seed,
    )
}

/// The full gradient suite. `full_block_grid` sweeps every
/// (fusion, switches, T, d) cross for the assembled block; otherwise T and d
/// cycle across the combinations (every value still covered).
pub fn gradient_suite(seeds: &[u64], full_block_grid: bool) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for &seed in seeds {
        reports.extend(primitive_gradient_checks(seed)?);
        for (t, d) in [(5, 4), (7, 8)] {
            reports.extend(layer_gradient_checks(seed, t, d)?);
            reports.extend(interaction_gradient_checks(seed, t, d)?);
        }
        reports.push(subsample_gradient_check(seed, 6, 4)?);
    }
    let fusions = [FusionMode::Add, FusionMode::Concat, FusionMode::Sfm];
    if full_block_grid {
        for &seed in seeds {
            for fusion in fusions {
                for combo in switch_combos() {
                    for t in 5..=9 {
                        for d in [4, 8] {
                            let cfg = block_config(d, fusion, combo);
                            reports.push(block_gradient_check(&cfg, t, seed)?);
                        }
                    }
                }
            }
        }
    } else {
        let mut t_cycle = (5..=9).cycle();
        for &seed in seeds {
            for (i, fusion) in fusions.into_iter().enumerate() {
                for (j, combo) in switch_combos().into_iter().enumerate() {
                    let t = t_cycle.next().unwrap();
                    let d = if (i + j) % 2 == 0 { 4 } else { 8 };
                    let cfg = block_config(d, fusion, combo);
                    reports.push(block_gradient_check(&cfg, t, seed)?);
                }
            }
        }
    }
    Ok(reports)
}

// ── oracle equivalence suite ─────────────────────────────────────────────

pub fn oracle_suite(seed: u64, instances: usize) -> Result<Vec<OracleReport>> {
    let mut reports = Vec::new();

    // depthwise conv vs direct loops
    {
        let mut r = rng_for(seed, "oracle-dw");
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let t = 3 + r.below(8);
            let d = 1 + r.below(6);
            let k = if r.bernoulli(0.5) { 3 } else { 5 };
            let x = r.tensor(&[t, d], -2.0, 2.0);
            let kernel = r.tensor(&[k, d], -2.0, 2.0);
            let expect = oracles::naive_depthwise_conv1d(&x, &kernel)?;
            let mut g = Graph::new();
            let xn = g.leaf(x);
            let kn = g.leaf(kernel);
            let y = depthwise_conv1d(&mut g, xn, kn)?;
            worst = worst.max(oracles::max_abs_diff(g.value(y), &expect));
        }
        reports.push(OracleReport::new("depthwise_conv1d_vs_naive", instances, worst, 1e-12));
    }

    // relative attention vs per-pair loops
    {
        let mut r = rng_for(seed, "oracle-attn");
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let t = 2 + r.below(6);
            let d = if r.bernoulli(0.5) { 4 } else { 8 };
            let heads = if r.bernoulli(0.5) { 2 } else { d / 2 };
            let x = r.tensor(&[t, d], -1.5, 1.5);
            let mats: Vec<Tensor> = (0..5).map(|_| r.tensor(&[d, d], -0.7, 0.7)).collect();
            let u = r.tensor(&[d], -0.7, 0.7);
            let v = r.tensor(&[d], -0.7, 0.7);
            let expect = oracles::naive_relative_mhsa(
                &x, &mats[0], &mats[1], &mats[2], &mats[3], &mats[4],
                u.data(), v.data(), heads, None,
            )?;
            let mut g = Graph::new();
            let ids: Vec<NodeId> = mats.iter().map(|t| g.leaf(t.clone())).collect();
            let un = g.leaf(u);
            let vn = g.leaf(v);
            let xn = g.leaf(x);
            let p = MhsaNodes {
                wq: ids[0], wk: ids[1], wv: ids[2], wo: ids[3], wpos: ids[4],
                u: un, v: vn, heads,
            };
            let y = relative_mhsa(&mut g, xn, &p, None)?;
            worst = worst.max(oracles::max_abs_diff(g.value(y), &expect));
        }
        reports.push(OracleReport::new("relative_mhsa_vs_naive", instances, worst, 1e-10));
    }

    // selective fusion vs explicit stepwise loops
    {
        let mut r = rng_for(seed, "oracle-sfm");
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let t = 2 + r.below(7);
            let d = 2 + r.below(9);
            let c = 1 + r.below(d);
            let se_hidden = 1 + r.below(d);
            let mut store = ParamStore::new();
            let p = SfmParams {
                w_f: store.register_matrix("wf", 2 * d, c, 2 * d, &mut r),
                w_u1: store.register_matrix("wu1", c, d, c, &mut r),
                w_u2: store.register_matrix("wu2", c, d, c, &mut r),
                se: SeParams {
                    w_down: store.register_matrix("sd", d, se_hidden, d, &mut r),
                    w_up: store.register_matrix("su", se_hidden, d, se_hidden, &mut r),
                },
            };
            let l = r.tensor(&[t, d], -2.0, 2.0);
            let gl = r.tensor(&[t, d], -2.0, 2.0);
            let expect = oracles::naive_sfm(
                &l,
                &gl,
                store.get(p.w_f),
                store.get(p.w_u1),
                store.get(p.w_u2),
                store.get(p.se.w_down),
                store.get(p.se.w_up),
            )?;
            let mut g = Graph::new();
            let ln_ = g.leaf(l);
            let gn = g.leaf(gl);
            let mut f = Fwd::new(&mut g, &store, false, None);
            let y = sfm_fuse(&mut f, ln_, gn, &p)?;
            worst = worst.max(oracles::max_abs_diff(g.value(y), &expect));
        }
        reports.push(OracleReport::new("sfm_fuse_vs_stepwise", instances, worst, 1e-12));
    }

    // front-end vs direct 2-D convolution loops
    {
        let mut r = rng_for(seed, "oracle-sub");
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let t = 4 + r.below(9);
            let f_dim = 2 + r.below(7);
            let channels = 1 + r.below(4);
            let d = 4;
            let mut store = ParamStore::new();
            let p = crate::model::SubsampleParams::register(
                &mut store, &mut r, "sub", f_dim, channels, d,
            );
            let feats = r.tensor(&[t, f_dim], -2.0, 2.0);
            let mut g = Graph::new();
            let fn_ = g.leaf(feats.clone());
            let mut f = Fwd::new(&mut g, &store, false, None);
            let y = subsample(&mut f, fn_, &p, channels, 0.0)?;

            let repack = |w: &Tensor, c_in: usize, c_out: usize| -> Vec<f64> {
                let mut k = vec![0.0; c_out * c_in * 9];
                for tap in 0..9 {
                    for ci in 0..c_in {
                        for co in 0..c_out {
                            k[(co * c_in + ci) * 9 + tap] =
                                w.data()[(tap * c_in + ci) * c_out + co];
                        }
                    }
                }
                k
            };
            let relu_all = |t: &mut Tensor| {
                for v in t.data_mut() {
                    *v = v.max(0.0);
                }
            };
            let k1 = repack(store.get(p.w1), 1, channels);
            let mut s1 = oracles::naive_conv2d(
                &feats, t, f_dim, 1, &k1, store.get(p.b1).data(), channels, 3, 2, 1,
            );
            relu_all(&mut s1);
            let (t1, f1) = (crate::model::halved(t), crate::model::halved(f_dim));
            let k2 = repack(store.get(p.w2), channels, channels);
            let mut s2 = oracles::naive_conv2d(
                &s1, t1, f1, channels, &k2, store.get(p.b2).data(), channels, 3, 2, 1,
            );
            relu_all(&mut s2);
            let flat = Tensor::new(
                &[crate::model::halved(t1), crate::model::halved(f1) * channels],
                s2.data().to_vec(),
            )?;
            let expect = oracles::naive_linear(
                &flat,
                store.get(p.proj.w),
                Some(store.get(p.proj.b.unwrap()).data()),
            )?;
            worst = worst.max(oracles::max_abs_diff(g.value(y), &expect));
        }
        reports.push(OracleReport::new("subsample_vs_naive_conv2d", instances, worst, 1e-12));
    }

    // linear vs triple loop
    {
        let mut r = rng_for(seed, "oracle-lin");
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (m, k, n) = (1 + r.below(6), 1 + r.below(6), 1 + r.below(6));
            let x = r.tensor(&[m, k], -2.0, 2.0);
            let w = r.tensor(&[k, n], -2.0, 2.0);
            let b = r.tensor(&[n], -2.0, 2.0);
            let expect = oracles::naive_linear(&x, &w, Some(b.data()))?;
            let mut g = Graph::new();
            let ids: Vec<NodeId> = [&x, &w, &b].iter().map(|t| g.leaf((*t).clone())).collect();
            let y = linear(&mut g, ids[0], ids[1], Some(ids[2]))?;
            worst = worst.max(oracles::max_abs_diff(g.value(y), &expect));
        }
        reports.push(OracleReport::new("linear_vs_triple_loop", instances, worst, 1e-12));
    }

    // layer norm vs direct formula
    {
        let mut r = rng_for(seed, "oracle-ln");
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (t, d) = (1 + r.below(6), 2 + r.below(6));
            let x = r.tensor(&[t, d], -2.0, 2.0);
            let gamma = r.tensor(&[d], 0.5, 1.5);
            let beta = r.tensor(&[d], -0.5, 0.5);
            let expect = oracles::naive_layer_norm(&x, gamma.data(), beta.data(), LAYER_NORM_EPS);
            let mut g = Graph::new();
            let ids: Vec<NodeId> =
                [&x, &gamma, &beta].iter().map(|t| g.leaf((*t).clone())).collect();
            let y = layer_norm(&mut g, ids[0], ids[1], ids[2], LAYER_NORM_EPS)?;
            worst = worst.max(oracles::max_abs_diff(g.value(y), &expect));
        }
        reports.push(OracleReport::new("layer_norm_vs_formula", instances, worst, 1e-12));
    }

    // plain-attention reduction: zero position path matches standard MHSA
    {
        let mut r = rng_for(seed, "oracle-plain");
        let mut worst: f64 = 0.0;
        let n = instances.min(20);
        for _ in 0..n {
            let t = 2 + r.below(5);
            let d = 4;
            let x = r.tensor(&[t, d], -1.5, 1.5);
            let mats: Vec<Tensor> = (0..4).map(|_| r.tensor(&[d, d], -0.7, 0.7)).collect();
            let expect =
                oracles::naive_plain_mhsa(&x, &mats[0], &mats[1], &mats[2], &mats[3], 2)?;
            let mut g = Graph::new();
            let ids: Vec<NodeId> = mats.iter().map(|t| g.leaf(t.clone())).collect();
            let zero_m = g.constant(&[d, d], vec![0.0; d * d])?;
            let zero_v = g.constant(&[d], vec![0.0; d])?;
            let xn = g.leaf(x);
            let p = MhsaNodes {
                wq: ids[0], wk: ids[1], wv: ids[2], wo: ids[3],
                wpos: zero_m, u: zero_v, v: zero_v, heads: 2,
            };
            let y = relative_mhsa(&mut g, xn, &p, None)?;
            worst = worst.max(oracles::max_abs_diff(g.value(y), &expect));
        }
        reports.push(OracleReport::new("relative_mhsa_plain_reduction", n, worst, 1e-10));
    }

    Ok(reports)
}

// ── reduction identities and selection properties ────────────────────────

pub fn identity_suite(seed: u64) -> Result<Vec<OracleReport>> {
    let mut reports = Vec::new();

    // zero conditioner turns dynamic relu into plain relu, exactly
    {
        let mut r = rng_for(seed, "id-dyrelu");
        let (t, d) = (6, 5);
        let x = r.tensor(&[t, d], -2.0, 2.0);
        let gfeat = r.tensor(&[t, d], -2.0, 2.0);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let gn = g.leaf(gfeat);
        let w1 = g.constant(&[d, 2], vec![0.0; d * 2])?;
        let w2 = g.constant(&[2, 4 * d], vec![0.0; 8 * d])?;
        let y = dynamic_relu(&mut g, xn, gn, w1, w2, &DyReluSpec::default())?;
        let worst = g
            .data(y)
            .iter()
            .zip(x.data())
            .map(|(o, &i)| (o - i.max(0.0)).abs())
            .fold(0.0, f64::max);
        reports.push(OracleReport::new("dyrelu_zero_conditioner_is_relu", 1, worst, 0.0));
    }

    // stacked-identity fusion matrix reduces concat to addition, exactly
    {
        let mut r = rng_for(seed, "id-concat");
        let d = 4;
        let mut store = ParamStore::new();
        let w_fuse = store.register_matrix("w", 2 * d, d, 2 * d, &mut r);
        let mut both = vec![0.0; 2 * d * d];
        for i in 0..d {
            both[i * d + i] = 1.0;
            both[(d + i) * d + i] = 1.0;
        }
        store.get_mut(w_fuse).data_mut().copy_from_slice(&both);
        let l = r.tensor(&[5, d], -2.0, 2.0);
        let gl = r.tensor(&[5, d], -2.0, 2.0);
        let mut g = Graph::new();
        let ln_ = g.leaf(l);
        let gn = g.leaf(gl);
        let mut f = Fwd::new(&mut g, &store, false, None);
        let y = concat_fuse(&mut f, ln_, gn, w_fuse)?;
        let a = add_fuse(f.g, ln_, gn)?;
        let worst = g
            .data(y)
            .iter()
            .zip(g.data(a))
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        reports.push(OracleReport::new("concat_identity_equals_add", 1, worst, 0.0));
    }

    // equal selection heads give exactly balanced branch weights
    {
        let mut r = rng_for(seed, "id-sfm-half");
        let d = 6;
        let c = 3;
        let mut store = ParamStore::new();
        let shared = r.tensor(&[c, d], -1.0, 1.0);
        let p = SfmParams {
            w_f: store.register_matrix("wf", 2 * d, c, 2 * d, &mut r),
            w_u1: store.register("wu1", shared.clone()),
            w_u2: store.register("wu2", shared),
            se: SeParams {
                w_down: store.register_matrix("sd", d, 2, d, &mut r),
                w_up: store.register_matrix("su", 2, d, 2, &mut r),
            },
        };
        let l = r.tensor(&[4, d], -2.0, 2.0);
        let gl = r.tensor(&[4, d], -2.0, 2.0);
        let mut g = Graph::new();
        let ln_ = g.leaf(l);
        let gn = g.leaf(gl);
        let mut f = Fwd::new(&mut g, &store, false, None);
        let (alpha, beta) = sfm_branch_weights(&mut f, ln_, gn, &p)?;
        let worst_half = g
            .data(alpha)
            .iter()
            .map(|a| (a - 0.5).abs())
            .fold(0.0, f64::max);
        reports.push(OracleReport::new("sfm_equal_heads_half_weights", 1, worst_half, 1e-12));
        let worst_sum = g
            .data(alpha)
            .iter()
            .zip(g.data(beta))
            .map(|(a, b)| (a + b - 1.0).abs())
            .fold(0.0, f64::max);
        reports.push(OracleReport::new("sfm_weights_sum_to_one", 1, worst_sum, 1e-12));
    }

    // random-weight selection invariants: sum, scaling, permutation
    {
        let mut r = rng_for(seed, "id-sfm-props");
        let d = 5;
        let c = 2;
        let t = 6;
        let mut store = ParamStore::new();
        let p = SfmParams {
            w_f: store.register_matrix("wf", 2 * d, c, 2 * d, &mut r),
            w_u1: store.register_matrix("wu1", c, d, c, &mut r),
            w_u2: store.register_matrix("wu2", c, d, c, &mut r),
            se: SeParams {
                w_down: store.register_matrix("sd", d, 2, d, &mut r),
                w_up: store.register_matrix("su", 2, d, 2, &mut r),
            },
        };
        let l = r.tensor(&[t, d], -2.0, 2.0);
        let gl = r.tensor(&[t, d], -2.0, 2.0);
        let weights = |store: &ParamStore, l: &Tensor, gl: &Tensor| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut g = Graph::new();
            let ln_ = g.leaf(l.clone());
            let gn = g.leaf(gl.clone());
            let mut f = Fwd::new(&mut g, store, false, None);
            let (alpha, beta) = sfm_branch_weights(&mut f, ln_, gn, &p)?;
            Ok((g.data(alpha).to_vec(), g.data(beta).to_vec()))
        };
        let (alpha, beta) = weights(&store, &l, &gl)?;
        let worst_sum = alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a + b - 1.0).abs())
            .fold(0.0, f64::max);
        reports.push(OracleReport::new("sfm_random_weights_sum_to_one", 1, worst_sum, 1e-12));

        // scale (X1 - X2) by moving the heads apart around their mean
        let wu1 = store.get(p.w_u1).data().to_vec();
        let wu2 = store.get(p.w_u2).data().to_vec();
        let mut flips = 0usize;
        for scale in [0.2, 5.0, 50.0] {
            let s1: Vec<f64> = wu1
                .iter()
                .zip(&wu2)
                .map(|(a, b)| (a + b) / 2.0 + scale * (a - b) / 2.0)
                .collect();
            let s2: Vec<f64> = wu1
                .iter()
                .zip(&wu2)
                .map(|(a, b)| (a + b) / 2.0 - scale * (a - b) / 2.0)
                .collect();
            store.get_mut(p.w_u1).data_mut().copy_from_slice(&s1);
            store.get_mut(p.w_u2).data_mut().copy_from_slice(&s2);
            let (scaled, _) = weights(&store, &l, &gl)?;
            flips += alpha
                .iter()
                .zip(&scaled)
                .filter(|(a, s)| (**a > 0.5) != (**s > 0.5))
                .count();
            store.get_mut(p.w_u1).data_mut().copy_from_slice(&wu1);
            store.get_mut(p.w_u2).data_mut().copy_from_slice(&wu2);
        }
        reports.push(OracleReport::new(
            "sfm_argmax_scale_invariant",
            3,
            flips as f64,
            0.0,
        ));

        // joint time permutation leaves the weights alone
        let perm: Vec<usize> = vec![4, 1, 5, 0, 2, 3];
        let permute = |x: &Tensor| {
            let mut out = Tensor::zeros(&[t, d]);
            for (dst, &src) in perm.iter().enumerate() {
                for ch in 0..d {
                    out.data_mut()[dst * d + ch] = x.data()[src * d + ch];
                }
            }
            out
        };
        let (palpha, _) = weights(&store, &permute(&l), &permute(&gl))?;
        let worst_perm = alpha
            .iter()
            .zip(&palpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        reports.push(OracleReport::new(
            "sfm_weights_permutation_invariant",
            1,
            worst_perm,
            1e-12,
        ));
    }

    // attention weight rows sum to one over valid keys
    {
        let mut r = rng_for(seed, "id-attn-rows");
        let (t, d, heads) = (6, 8, 4);
        let mats: Vec<Tensor> = (0..5).map(|_| r.tensor(&[d, d], -0.7, 0.7)).collect();
        let u = r.tensor(&[d], -0.7, 0.7);
        let v = r.tensor(&[d], -0.7, 0.7);
        let x = r.tensor(&[t, d], -1.5, 1.5);
        let mut g = Graph::new();
        let ids: Vec<NodeId> = mats.iter().map(|t| g.leaf(t.clone())).collect();
        let un = g.leaf(u);
        let vn = g.leaf(v);
        let xn = g.leaf(x);
        let p = MhsaNodes {
            wq: ids[0], wk: ids[1], wv: ids[2], wo: ids[3], wpos: ids[4],
            u: un, v: vn, heads,
        };
        let (_, weights) = relative_mhsa_with_weights(&mut g, xn, &p, None)?;
        let mut worst: f64 = 0.0;
        for w in weights {
            for row in g.data(w).chunks(t) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        reports.push(OracleReport::new("attention_rows_sum_to_one", heads, worst, 1e-12));
    }

    // gated-interaction outputs never exceed the ungated projection
    {
        let mut r = rng_for(seed, "id-gate-bound");
        let d = 5;
        let t = 6;
        let mut store = ParamStore::new();
        let p = TransBfim {
            pw_in: LinearParams {
                w: store.register_matrix("w", d, d, d, &mut r),
                b: Some(store.register_zeros("b", &[d])),
            },
            ln: LayerNormParams {
                gamma: store.register_ones("g", &[d]),
                beta: store.register_zeros("be", &[d]),
            },
        };
        let graw = r.tensor(&[t, d], -2.0, 2.0);
        let l = r.tensor(&[t, d], -2.0, 2.0);
        let mut g = Graph::new();
        let gn = g.leaf(graw);
        let ln_ = g.leaf(l);
        let mut f = Fwd::new(&mut g, &store, false, None);
        let gated = l2g_interaction(&mut f, gn, ln_, &p)?;
        let proj = crate::model::trans_projection(&mut f, gn, &p)?;
        let violations = g
            .data(gated)
            .iter()
            .zip(g.data(proj))
            .filter(|(o, p)| o.abs() > p.abs())
            .count();
        reports.push(OracleReport::new(
            "gating_boundedness",
            t * d,
            violations as f64,
            0.0,
        ));
    }

    // parallel block with no interactions == staged composition, bitwise
    {
        let cfg = block_config(8, FusionMode::Add, (false, false, false));
        let mut store = ParamStore::new();
        let mut rng = StreamRng::new(seed, "id-block");
        let p = BlockParams::register(&mut store, &mut rng, &cfg, "b");
        let x = rng.tensor(&[6, 8], -1.5, 1.5);
        let auto = {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let mut f = Fwd::new(&mut g, &store, true, None);
            let mut bn = BnState::new(8);
            let y = block_forward(&mut f, xn, &p, &mut bn, &cfg)?;
            g.data(y).to_vec()
        };
        let manual = {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let mut f = Fwd::new(&mut g, &store, true, None);
            let mut bn = BnState::new(8);
            let h = {
                let h = f.ln(xn, &p.ffn1.ln)?;
                let h = f.lin(h, &p.ffn1.lin1)?;
                let h = swish(f.g, h)?;
                f.lin(h, &p.ffn1.lin2)?
            };
            let h = f.g.scale(h, 0.5)?;
            let x1 = f.g.add(xn, h)?;
            let g_raw =
                crate::model::transformer_branch(&mut f, x1, &p.ln_attn, &p.mhsa, cfg.heads)?;
            let l = conv_branch(&mut f, x1, g_raw, &p.conv, &mut bn, &cfg)?;
            let gl = crate::model::trans_projection(&mut f, g_raw, &p.bfim_trans)?;
            let fused = add_fuse(f.g, l, gl)?;
            let x2 = f.g.add(x1, fused)?;
            let h2 = {
                let h = f.ln(x2, &p.ffn2.ln)?;
                let h = f.lin(h, &p.ffn2.lin1)?;
                let h = swish(f.g, h)?;
                f.lin(h, &p.ffn2.lin2)?
            };
            let h2 = f.g.scale(h2, 0.5)?;
            let pre = f.g.add(x2, h2)?;
            let y = f.ln(pre, &p.ln_out)?;
            g.data(y).to_vec()
        };
        let worst = auto
            .iter()
            .zip(&manual)
            .map(|(a, m)| (a - m).abs())
            .fold(0.0, f64::max);
        reports.push(OracleReport::new(
            "parallel_block_staged_composition",
            1,
            worst,
            0.0,
        ));
    }

    Ok(reports)
}
