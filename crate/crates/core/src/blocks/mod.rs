//! Non-local attention blocks over a single `C×H×W` feature map.
//!
//! All blocks add `γ · context` to their input. Attention maps are stored in
//! the producer/consumer layout `A[i, j]`, where `i` is the aggregated
//! (producer) index and the softmax normalizes over it, and contexts are
//! formed as `Σ_i A[i, j] · V_i`. For Channel NL and FLA the producer axis is
//! the channel axis; for Spatial NL each row of the `HW×HW` map is a query
//! position and the softmax runs over key positions.

mod checkpoint;
mod mixing;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE};
pub use mixing::{mixing_structure, MixingReport, ProbeKind, MOVE_THRESHOLD};
pub use params::{
    default_reduction, BlockKind, BlockParams, ChannelParams, FlaParams, SpatialParams,
    DEFAULT_REDUCTION,
};

use crate::autograd::{grad_check, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How FLA batches its row and column slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MergeMode {
    /// One merged `(H+W)`-batch when `H == W`, two groups otherwise.
    #[default]
    Auto,
    /// Always one merged batch; non-square inputs are rejected.
    Merged,
    /// Always two separate groups.
    Grouped,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub merge: MergeMode,
    /// Fault injection for the verification harness: normalizes every
    /// attention map over the wrong axis while still reporting the declared
    /// one.
    #[doc(hidden)]
    pub corrupt_softmax_axis: bool,
}

/// One attention map and the axis its softmax normalizes over.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub label: &'static str,
    pub tensor: Tensor,
    pub softmax_axis: usize,
}

impl AttentionMap {
    /// Largest `|Σ − 1|` over all slices along the softmax axis.
    pub fn max_stochasticity_error(&self) -> f64 {
        let shape = self.tensor.shape();
        let axis = self.softmax_axis;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let d = self.tensor.data();
        let mut worst: f64 = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let s = (0..len).fold(0.0, |a, k| a + d[(o * len + k) * inner + i]);
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Row-slice and column-slice halves of an FLA operand. `rows` holds the `H`
/// slices cut along H, `cols` the `W` slices cut along W.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceGroups {
    pub rows: Tensor,
    pub cols: Tensor,
}

impl SliceGroups {
    /// The merged `(H+W)`-batch; fails for non-square inputs.
    pub fn merged(&self) -> Result<Tensor> {
        crate::tensor::concat(&[&self.rows, &self.cols], 0)
    }
}

/// Named intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub kind: BlockKind,
    /// Row-pooled, linearly mapped prior, `C×1×W`.
    pub q_hat_w: Option<Tensor>,
    /// Column-pooled, linearly mapped prior, `C×H×1`.
    pub q_hat_h: Option<Tensor>,
    /// Per-slice priors, `C×S` each.
    pub q: Option<SliceGroups>,
    /// Per-slice keys, `S×C` each.
    pub k: Option<SliceGroups>,
    /// Per-slice values, `C×S` each.
    pub v: Option<SliceGroups>,
    pub attention: Vec<AttentionMap>,
    pub output: Tensor,
}

/// Tensors feeding the three roles of a block. A plain forward uses the same
/// tensor for all of them; Jacobian probes split them to isolate pathways.
#[derive(Clone, Copy, Debug)]
pub struct Sources<'a> {
    /// Input to the pooled-prior construction (FLA only).
    pub prior: &'a Tensor,
    /// Input to the affinity keys (and, outside FLA, queries).
    pub key: &'a Tensor,
    /// Input to the aggregated values and the residual path.
    pub value: &'a Tensor,
}

impl<'a> Sources<'a> {
    pub fn uniform(x: &'a Tensor) -> Self {
        Self {
            prior: x,
            key: x,
            value: x,
        }
    }
}

#[derive(Clone, Copy)]
struct VarSources {
    prior: Var,
    key: Var,
    value: Var,
}

impl VarSources {
    fn uniform(x: Var) -> Self {
        Self {
            prior: x,
            key: x,
            value: x,
        }
    }
}

struct RecordedAttention {
    label: &'static str,
    var: Var,
    shape: Vec<usize>,
    softmax_axis: usize,
}

#[derive(Default)]
struct RecordedFla {
    q_hat_w: Option<Var>,
    q_hat_h: Option<Var>,
    q: Option<(Var, Var)>,
    k: Option<(Var, Var)>,
    v: Option<(Var, Var)>,
}

struct Recorded {
    output: Var,
    attention: Vec<RecordedAttention>,
    fla: RecordedFla,
}

fn check_input(params: &BlockParams, x: &Tensor) -> Result<()> {
    if x.rank() != 3 {
        return Err(Error::dim(
            "block forward",
            format!("expected a C×H×W input, got shape {:?}", x.shape()),
        ));
    }
    if x.shape()[0] != params.channels() {
        return Err(Error::dim(
            "block forward",
            format!(
                "input has {} channels, {} block expects {}",
                x.shape()[0],
                params.kind(),
                params.channels()
            ),
        ));
    }
    params.validate()
}

/// Leaves for every parameter tensor, in `named_tensors` order.
pub fn param_leaves(tape: &mut Tape, params: &BlockParams) -> Result<Vec<Var>> {
    Ok(params
        .named_tensors()?
        .into_iter()
        .map(|(_, t)| tape.leaf(t))
        .collect())
}

fn softmax_axis(declared: usize, opts: &ForwardOptions) -> usize {
    if opts.corrupt_softmax_axis {
        if declared == 1 {
            2
        } else {
            1
        }
    } else {
        declared
    }
}

/// Channel NL context: `ctx_j = Σ_i softmax_i(F_i · F_j) F_i` on the
/// flattened `C×HW` features.
fn record_channel_ctx(
    tape: &mut Tape,
    src: VarSources,
    opts: &ForwardOptions,
) -> Result<(Var, RecordedAttention)> {
    let shape = tape.value(src.value).shape().to_vec();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let keys = tape.reshape(src.key, &[1, c, n])?;
    let keys_t = tape.transpose(keys)?;
    let logits = tape.matmul(keys, keys_t)?;
    let attn = tape.softmax(logits, softmax_axis(1, opts))?;
    let attn_t = tape.transpose(attn)?;
    let values = tape.reshape(src.value, &[1, c, n])?;
    let ctx = tape.matmul(attn_t, values)?;
    let ctx = tape.reshape(ctx, &shape)?;
    Ok((
        ctx,
        RecordedAttention {
            label: "channel",
            var: attn,
            shape: vec![c, c],
            softmax_axis: 0,
        },
    ))
}

/// Spatial NL context: `ctx[:, p] = Σ_q softmax_q(Q_p · K_q) V[:, q]`.
fn record_spatial_ctx(
    tape: &mut Tape,
    pv: &[Var],
    src: VarSources,
    opts: &ForwardOptions,
) -> Result<(Var, RecordedAttention)> {
    let shape = tape.value(src.value).shape().to_vec();
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let q = tape.linear_channels(src.key, pv[0], pv[1])?;
    let reduced = tape.value(q).shape()[0];
    let no_bias = tape.leaf(Tensor::zeros(&[reduced])?);
    let k = tape.linear_channels(src.key, pv[2], no_bias)?;
    let v = tape.linear_channels(src.value, pv[3], pv[4])?;
    let q = tape.reshape(q, &[1, reduced, n])?;
    let k = tape.reshape(k, &[1, reduced, n])?;
    let v = tape.reshape(v, &[1, c, n])?;
    let q_t = tape.transpose(q)?;
    let logits = tape.matmul(q_t, k)?;
    let attn = tape.softmax(logits, softmax_axis(2, opts))?;
    let attn_t = tape.transpose(attn)?;
    let ctx = tape.matmul(v, attn_t)?;
    let ctx = tape.reshape(ctx, &shape)?;
    Ok((
        ctx,
        RecordedAttention {
            label: "spatial",
            var: attn,
            shape: vec![n, n],
            softmax_axis: 1,
        },
    ))
}

/// One group of FLA slices: `A = softmax_i(Q · K)`, `ctx = Aᵀ · V`.
fn fla_group(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    opts: &ForwardOptions,
) -> Result<(Var, Var)> {
    let logits = tape.matmul(q, k)?;
    let attn = tape.softmax(logits, softmax_axis(1, opts))?;
    let attn_t = tape.transpose(attn)?;
    let ctx = tape.matmul(attn_t, v)?;
    Ok((attn, ctx))
}

fn record_fla(
    tape: &mut Tape,
    pv: &[Var],
    src: VarSources,
    opts: &ForwardOptions,
) -> Result<Recorded> {
    let shape = tape.value(src.value).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let merged = match opts.merge {
        MergeMode::Auto => h == w,
        MergeMode::Grouped => false,
        MergeMode::Merged if h == w => true,
        MergeMode::Merged => {
            return Err(Error::dim(
                "fla_forward",
                format!("merged mode needs H == W, got H={h}, W={w}"),
            ))
        }
    };

    // Construction: pooled priors through independent linear layers.
    let pooled_w = tape.avg_pool_rows(src.prior)?;
    let q_hat_w = tape.linear_channels(pooled_w, pv[0], pv[1])?;
    let pooled_h = tape.avg_pool_cols(src.prior)?;
    let q_hat_h = tape.linear_channels(pooled_h, pv[2], pv[3])?;

    // Every row slice shares the C×W prior, every column slice the C×H one.
    let qw = tape.reshape(q_hat_w, &[c, w])?;
    let q_rows = tape.repeat_leading(qw, h)?;
    let qh = tape.reshape(q_hat_h, &[c, h])?;
    let q_cols = tape.repeat_leading(qh, w)?;

    let v_rows = tape.slice_stack_h(src.value)?;
    let v_cols = tape.slice_stack_w(src.value)?;
    let (k_rows, k_cols) = if src.key == src.value {
        (tape.transpose(v_rows)?, tape.transpose(v_cols)?)
    } else {
        let kr = tape.slice_stack_h(src.key)?;
        let kc = tape.slice_stack_w(src.key)?;
        (tape.transpose(kr)?, tape.transpose(kc)?)
    };

    let (attn, ctx_rows, ctx_cols) = if merged {
        let q = tape.concat(&[q_rows, q_cols], 0)?;
        let k = tape.concat(&[k_rows, k_cols], 0)?;
        let v = tape.concat(&[v_rows, v_cols], 0)?;
        let (attn, ctx) = fla_group(tape, q, k, v, opts)?;
        let ctx_rows = tape.narrow(ctx, 0, 0, h)?;
        let ctx_cols = tape.narrow(ctx, 0, h, w)?;
        (attn, ctx_rows, ctx_cols)
    } else {
        let (attn_rows, ctx_rows) = fla_group(tape, q_rows, k_rows, v_rows, opts)?;
        let (attn_cols, ctx_cols) = fla_group(tape, q_cols, k_cols, v_cols, opts)?;
        let attn = tape.concat(&[attn_rows, attn_cols], 0)?;
        (attn, ctx_rows, ctx_cols)
    };

    let from_rows = tape.unstack_h(ctx_rows)?;
    let from_cols = tape.unstack_w(ctx_cols)?;
    let ctx = tape.add(from_rows, from_cols)?;
    let output = tape.residual(src.value, ctx, pv[4])?;
    Ok(Recorded {
        output,
        attention: vec![RecordedAttention {
            label: "fla",
            var: attn,
            shape: vec![h + w, c, c],
            softmax_axis: 1,
        }],
        fla: RecordedFla {
            q_hat_w: Some(q_hat_w),
            q_hat_h: Some(q_hat_h),
            q: Some((q_rows, q_cols)),
            k: Some((k_rows, k_cols)),
            v: Some((v_rows, v_cols)),
        },
    })
}

fn record(
    tape: &mut Tape,
    params: &BlockParams,
    pv: &[Var],
    src: VarSources,
    opts: &ForwardOptions,
) -> Result<Recorded> {
    let plain = |output, attention| Recorded {
        output,
        attention,
        fla: RecordedFla::default(),
    };
    match params {
        BlockParams::Channel(_) => {
            let (ctx, attn) = record_channel_ctx(tape, src, opts)?;
            let out = tape.residual(src.value, ctx, pv[0])?;
            Ok(plain(out, vec![attn]))
        }
        BlockParams::Spatial(_) => {
            let (ctx, attn) = record_spatial_ctx(tape, pv, src, opts)?;
            let out = tape.residual(src.value, ctx, pv[5])?;
            Ok(plain(out, vec![attn]))
        }
        BlockParams::Fla(_) => record_fla(tape, pv, src, opts),
        BlockParams::Dual { .. } => {
            // x + γc·ctx_c + γs·ctx_s: both branches share one residual.
            let (ctx_c, attn_c) = record_channel_ctx(tape, src, opts)?;
            let (ctx_s, attn_s) = record_spatial_ctx(tape, &pv[1..], src, opts)?;
            let partial = tape.residual(src.value, ctx_c, pv[0])?;
            let out = tape.residual(partial, ctx_s, pv[6])?;
            Ok(plain(out, vec![attn_c, attn_s]))
        }
        BlockParams::Cs { .. } => {
            let (ctx_c, attn_c) = record_channel_ctx(tape, src, opts)?;
            let mid = tape.residual(src.value, ctx_c, pv[0])?;
            // The spatial stage sees the channel stage's output. When the
            // sources are split, its keys come from the channel stage run
            // purely on the key source.
            let mid_key = if src.key == src.value {
                mid
            } else {
                let key_only = VarSources::uniform(src.key);
                let (ctx_k, _) = record_channel_ctx(tape, key_only, opts)?;
                tape.residual(src.key, ctx_k, pv[0])?
            };
            let stage = VarSources {
                prior: mid_key,
                key: mid_key,
                value: mid,
            };
            let (ctx_s, attn_s) = record_spatial_ctx(tape, &pv[1..], stage, opts)?;
            let out = tape.residual(mid, ctx_s, pv[6])?;
            Ok(plain(out, vec![attn_c, attn_s]))
        }
    }
}

/// Records the forward of `params` on `tape` with existing parameter and
/// input leaves, returning the output node.
pub fn record_forward(tape: &mut Tape, params: &BlockParams, param_vars: &[Var], input: Var) -> Result<Var> {
    check_input(params, tape.value(input))?;
    Ok(record(tape, params, param_vars, VarSources::uniform(input), &ForwardOptions::default())?.output)
}

fn groups(tape: &Tape, pair: Option<(Var, Var)>) -> Option<SliceGroups> {
    pair.map(|(rows, cols)| SliceGroups {
        rows: tape.value(rows).clone(),
        cols: tape.value(cols).clone(),
    })
}

/// Full forward with options, returning every named intermediate.
pub fn forward_with(params: &BlockParams, input: &Tensor, opts: &ForwardOptions) -> Result<ForwardTrace> {
    check_input(params, input)?;
    let mut tape = Tape::new();
    let pv = param_leaves(&mut tape, params)?;
    let x = tape.leaf(input.clone());
    let rec = record(&mut tape, params, &pv, VarSources::uniform(x), opts)?;
    let attention = rec
        .attention
        .iter()
        .map(|a| {
            Ok(AttentionMap {
                label: a.label,
                tensor: tape.value(a.var).reshape(&a.shape)?,
                softmax_axis: a.softmax_axis,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardTrace {
        kind: params.kind(),
        q_hat_w: rec.fla.q_hat_w.map(|v| tape.value(v).clone()),
        q_hat_h: rec.fla.q_hat_h.map(|v| tape.value(v).clone()),
        q: groups(&tape, rec.fla.q),
        k: groups(&tape, rec.fla.k),
        v: groups(&tape, rec.fla.v),
        attention,
        output: tape.value(rec.output).clone(),
    })
}

/// Forward of any block kind.
pub fn forward(params: &BlockParams, input: &Tensor) -> Result<ForwardTrace> {
    forward_with(params, input, &ForwardOptions::default())
}

/// Output of a forward whose roles read different tensors. All sources must
/// share one shape.
pub fn forward_split(params: &BlockParams, sources: Sources<'_>) -> Result<Tensor> {
    for t in [sources.prior, sources.key] {
        if t.shape() != sources.value.shape() {
            return Err(Error::dim(
                "forward_split",
                format!("source shapes {:?} and {:?} differ", t.shape(), sources.value.shape()),
            ));
        }
    }
    check_input(params, sources.value)?;
    let mut tape = Tape::new();
    let pv = param_leaves(&mut tape, params)?;
    let value = tape.leaf(sources.value.clone());
    let key = tape.leaf(sources.key.clone());
    let prior = tape.leaf(sources.prior.clone());
    let src = VarSources { prior, key, value };
    let rec = record(&mut tape, params, &pv, src, &ForwardOptions::default())?;
    Ok(tape.value(rec.output).clone())
}

fn expect_kind(params: &BlockParams, kind: BlockKind) -> Result<()> {
    if params.kind() != kind {
        return Err(Error::Config(format!(
            "{kind} forward called with {} parameters",
            params.kind()
        )));
    }
    Ok(())
}

pub fn channel_nl_forward(params: &BlockParams, input: &Tensor) -> Result<ForwardTrace> {
    expect_kind(params, BlockKind::ChannelNl)?;
    forward(params, input)
}

pub fn spatial_nl_forward(params: &BlockParams, input: &Tensor) -> Result<ForwardTrace> {
    expect_kind(params, BlockKind::SpatialNl)?;
    forward(params, input)
}

pub fn fla_forward(params: &BlockParams, input: &Tensor) -> Result<ForwardTrace> {
    expect_kind(params, BlockKind::Fla)?;
    forward(params, input)
}

pub fn dual_nl_forward(params: &BlockParams, input: &Tensor) -> Result<ForwardTrace> {
    expect_kind(params, BlockKind::DualNl)?;
    forward(params, input)
}

pub fn cs_nl_forward(params: &BlockParams, input: &Tensor) -> Result<ForwardTrace> {
    expect_kind(params, BlockKind::CsNl)?;
    forward(params, input)
}

/// Checks tape gradients of `Σ output²` against central differences for every
/// parameter tensor and the input.
pub fn grad_check_block(params: &BlockParams, input: &Tensor, h: f64) -> Result<GradCheckReport> {
    check_input(params, input)?;
    let mut named = params.named_tensors()?;
    named.push(("input".to_string(), input.clone()));
    let n_params = named.len() - 1;
    grad_check(&named, h, |tape, vars| {
        let out = record_forward(tape, params, &vars[..n_params], vars[n_params])?;
        tape.sum_squares(out)
    })
}
