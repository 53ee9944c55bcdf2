//! Naive reference implementations of every block.
//!
//! Everything here is explicit index loops over raw slices with compensated
//! summation. Nothing in this file calls the block code or the tensor
//! primitives; it reads parameters and builds result tensors, nothing more.
//! It is slow on purpose and refuses inputs above [`ORACLE_LIMIT`] scalars.

use crate::blocks::{BlockParams, ChannelParams, FlaParams, SpatialParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ORACLE_LIMIT: usize = 10_000;

/// Neumaier-compensated sum.
fn csum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Softmax of `logits[i]` over `i`.
fn softmax_over(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total = csum(exps.iter().copied());
    exps.iter().map(|e| e / total).collect()
}

/// Plain `C×H×W` array view.
struct Map<'a> {
    c: usize,
    h: usize,
    w: usize,
    d: &'a [f64],
}

impl<'a> Map<'a> {
    fn new(t: &'a Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::dim("oracle", format!("expected C×H×W, got {:?}", t.shape())));
        }
        if t.data().len() > ORACLE_LIMIT {
            return Err(Error::OracleTooLarge {
                scalars: t.data().len(),
                limit: ORACLE_LIMIT,
            });
        }
        Ok(Self {
            c: t.shape()[0],
            h: t.shape()[1],
            w: t.shape()[2],
            d: t.data(),
        })
    }

    fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.d[(c * self.h + h) * self.w + w]
    }

    /// Flattened spatial index `p = h·W + w`.
    fn at(&self, c: usize, p: usize) -> f64 {
        self.d[c * self.h * self.w + p]
    }
}

fn finish(value: &Map<'_>, gamma: f64, ctx: &[f64]) -> Result<Tensor> {
    let data = value.d.iter().zip(ctx).map(|(x, c)| x + gamma * c).collect();
    Tensor::new(vec![value.c, value.h, value.w], data)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "oracle",
            format!("source shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn channel_context(key: &Map<'_>, value: &Map<'_>) -> Vec<f64> {
    let (c, n) = (key.c, key.h * key.w);
    // gram[i][j] = <F_i, F_j> over all positions
    let mut gram = vec![vec![0.0; c]; c];
    for (i, row) in gram.iter_mut().enumerate() {
        for (j, g) in row.iter_mut().enumerate() {
            *g = csum((0..n).map(|p| key.at(i, p) * key.at(j, p)));
        }
    }
    let mut ctx = vec![0.0; c * n];
    for j in 0..c {
        let column: Vec<f64> = (0..c).map(|i| gram[i][j]).collect();
        let a = softmax_over(&column);
        for p in 0..n {
            ctx[j * n + p] = csum((0..c).map(|i| a[i] * value.at(i, p)));
        }
    }
    ctx
}

fn project(weight: &Tensor, bias: Option<&Tensor>, src: &Map<'_>) -> Vec<Vec<f64>> {
    let (out_c, in_c) = (weight.shape()[0], weight.shape()[1]);
    let n = src.h * src.w;
    (0..out_c)
        .map(|o| {
            (0..n)
                .map(|p| {
                    bias.map_or(0.0, |b| b.data()[o]) + csum((0..in_c).map(|k| weight.data()[o * in_c + k] * src.at(k, p)))
                })
                .collect()
        })
        .collect()
}

fn spatial_context(p: &SpatialParams, key: &Map<'_>, value: &Map<'_>) -> Vec<f64> {
    let (c, n) = (value.c, value.h * value.w);
    let q = project(&p.query_weight, Some(&p.query_bias), key);
    let k = project(&p.key_weight, None, key);
    let v = project(&p.value_weight, Some(&p.value_bias), value);
    let reduced = q.len();
    let mut ctx = vec![0.0; c * n];
    for query in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|kp| csum((0..reduced).map(|o| q[o][query] * k[o][kp])))
            .collect();
        let a = softmax_over(&logits);
        for ch in 0..c {
            ctx[ch * n + query] = csum((0..n).map(|kp| a[kp] * v[ch][kp]));
        }
    }
    ctx
}

fn fla_context(p: &FlaParams, prior: &Map<'_>, key: &Map<'_>, value: &Map<'_>) -> Vec<f64> {
    let (c, h, w) = (value.c, value.h, value.w);
    let lin = |weight: &Tensor, bias: &Tensor, pooled: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..c)
            .map(|i| {
                (0..pooled[0].len())
                    .map(|s| bias.data()[i] + csum((0..c).map(|k| weight.data()[i * c + k] * pooled[k][s])))
                    .collect()
            })
            .collect()
    };
    // Column means (pooling over H) give one prior per column w.
    let pooled_w: Vec<Vec<f64>> = (0..c)
        .map(|k| (0..w).map(|wi| csum((0..h).map(|hi| prior.get(k, hi, wi))) / h as f64).collect())
        .collect();
    // Row means (pooling over W) give one prior per row h.
    let pooled_h: Vec<Vec<f64>> = (0..c)
        .map(|k| (0..h).map(|hi| csum((0..w).map(|wi| prior.get(k, hi, wi))) / w as f64).collect())
        .collect();
    let qw = lin(&p.linear_w_weight, &p.linear_w_bias, &pooled_w);
    let qh = lin(&p.linear_h_weight, &p.linear_h_bias, &pooled_h);

    let mut ctx_rows = vec![0.0; c * h * w];
    let mut ctx_cols = vec![0.0; c * h * w];
    // Row slices: the prior at (h, w) is the column prior qw[·][w].
    for hi in 0..h {
        for j in 0..c {
            let logits: Vec<f64> = (0..c)
                .map(|i| csum((0..w).map(|wi| qw[i][wi] * key.get(j, hi, wi))))
                .collect();
            let a = softmax_over(&logits);
            for wi in 0..w {
                ctx_rows[(j * h + hi) * w + wi] = csum((0..c).map(|i| a[i] * value.get(i, hi, wi)));
            }
        }
    }
    // Column slices: the prior at (h, w) is the row prior qh[·][h].
    for wi in 0..w {
        for j in 0..c {
            let logits: Vec<f64> = (0..c)
                .map(|i| csum((0..h).map(|hi| qh[i][hi] * key.get(j, hi, wi))))
                .collect();
            let a = softmax_over(&logits);
            for hi in 0..h {
                ctx_cols[(j * h + hi) * w + wi] = csum((0..c).map(|i| a[i] * value.get(i, hi, wi)));
            }
        }
    }
    ctx_rows.iter().zip(&ctx_cols).map(|(a, b)| a + b).collect()
}

fn channel_split(p: &ChannelParams, key: &Tensor, value: &Tensor) -> Result<Tensor> {
    let (k, v) = (Map::new(key)?, Map::new(value)?);
    if v.c != p.channels {
        return Err(Error::dim("oracle_channel_nl", "channel count mismatch"));
    }
    finish(&v, p.gamma, &channel_context(&k, &v))
}

fn spatial_split(p: &SpatialParams, key: &Tensor, value: &Tensor) -> Result<Tensor> {
    let (k, v) = (Map::new(key)?, Map::new(value)?);
    if v.c != p.channels {
        return Err(Error::dim("oracle_spatial_nl", "channel count mismatch"));
    }
    finish(&v, p.gamma, &spatial_context(p, &k, &v))
}

/// Reference forward with the prior, key and value roles fed separately.
pub fn oracle_forward_split(params: &BlockParams, prior: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
    same_shape(prior, value)?;
    same_shape(key, value)?;
    match params {
        BlockParams::Channel(p) => channel_split(p, key, value),
        BlockParams::Spatial(p) => spatial_split(p, key, value),
        BlockParams::Fla(p) => {
            let (pr, k, v) = (Map::new(prior)?, Map::new(key)?, Map::new(value)?);
            if v.c != p.channels {
                return Err(Error::dim("oracle_fla", "channel count mismatch"));
            }
            finish(&v, p.gamma, &fla_context(p, &pr, &k, &v))
        }
        BlockParams::Dual { channel, spatial } => {
            let a = channel_split(channel, key, value)?;
            let b = spatial_split(spatial, key, value)?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .zip(value.data())
                .map(|((a, b), x)| a + b - x)
                .collect();
            Tensor::new(value.shape().to_vec(), data)
        }
        BlockParams::Cs { channel, spatial } => {
            let mid_value = channel_split(channel, key, value)?;
            let mid_key = channel_split(channel, key, key)?;
            spatial_split(spatial, &mid_key, &mid_value)
        }
    }
}

pub fn oracle_forward(params: &BlockParams, input: &Tensor) -> Result<Tensor> {
    oracle_forward_split(params, input, input, input)
}

fn expect(params: &BlockParams, ok: bool, name: &str) -> Result<()> {
    if !ok {
        return Err(Error::Config(format!("{name} called with {} parameters", params.kind())));
    }
    Ok(())
}

pub fn oracle_channel_nl(params: &BlockParams, input: &Tensor) -> Result<Tensor> {
    expect(params, matches!(params, BlockParams::Channel(_)), "oracle_channel_nl")?;
    oracle_forward(params, input)
}

pub fn oracle_spatial_nl(params: &BlockParams, input: &Tensor) -> Result<Tensor> {
    expect(params, matches!(params, BlockParams::Spatial(_)), "oracle_spatial_nl")?;
    oracle_forward(params, input)
}

pub fn oracle_fla(params: &BlockParams, input: &Tensor) -> Result<Tensor> {
    expect(params, matches!(params, BlockParams::Fla(_)), "oracle_fla")?;
    oracle_forward(params, input)
}

pub fn oracle_dual(params: &BlockParams, input: &Tensor) -> Result<Tensor> {
    expect(params, matches!(params, BlockParams::Dual { .. }), "oracle_dual")?;
    oracle_forward(params, input)
}

pub fn oracle_cs(params: &BlockParams, input: &Tensor) -> Result<Tensor> {
    expect(params, matches!(params, BlockParams::Cs { .. }), "oracle_cs")?;
    oracle_forward(params, input)
}

/// Reference FLA attention maps, `(H+W)×C×C` in `[slice][i][j]` layout with
/// the softmax over `i`.
pub fn oracle_fla_attention(params: &FlaParams, input: &Tensor) -> Result<Tensor> {
    let x = Map::new(input)?;
    let (c, h, w) = (x.c, x.h, x.w);
    let mean = |k: usize, over_rows: bool, at: usize| {
        if over_rows {
            csum((0..h).map(|hi| x.get(k, hi, at))) / h as f64
        } else {
            csum((0..w).map(|wi| x.get(k, at, wi))) / w as f64
        }
    };
    let prior = |weight: &Tensor, bias: &Tensor, i: usize, over_rows: bool, at: usize| {
        bias.data()[i] + csum((0..c).map(|k| weight.data()[i * c + k] * mean(k, over_rows, at)))
    };
    let mut out = Vec::with_capacity((h + w) * c * c);
    for slice in 0..h + w {
        let mut block = vec![0.0; c * c];
        for j in 0..c {
            let logits: Vec<f64> = (0..c)
                .map(|i| {
                    if slice < h {
                        csum((0..w).map(|wi| prior(&params.linear_w_weight, &params.linear_w_bias, i, true, wi) * x.get(j, slice, wi)))
                    } else {
                        let wi = slice - h;
                        csum((0..h).map(|hi| prior(&params.linear_h_weight, &params.linear_h_bias, i, false, hi) * x.get(j, hi, wi)))
                    }
                })
                .collect();
            for (i, a) in softmax_over(&logits).into_iter().enumerate() {
                block[i * c + j] = a;
            }
        }
        out.extend(block);
    }
    Tensor::new(vec![h + w, c, c], out)
}

/// `H×W` map of the largest output change over channels when coordinate
/// `(c, h, w)` of every role listed in `perturb` moves by `epsilon`.
pub fn oracle_probe(
    params: &BlockParams,
    input: &Tensor,
    coordinate: (usize, usize, usize),
    epsilon: f64,
    perturb: ProbeRoles,
) -> Result<Tensor> {
    let (c0, h0, w0) = coordinate;
    let x = Map::new(input)?;
    let flat = (c0 * x.h + h0) * x.w + w0;
    let mut moved = input.data().to_vec();
    moved[flat] += epsilon;
    let moved = Tensor::new(input.shape().to_vec(), moved)?;
    let pick = |yes: bool| if yes { &moved } else { input };
    let base = oracle_forward(params, input)?;
    let out = oracle_forward_split(params, pick(perturb.prior), pick(perturb.key), pick(perturb.value))?;
    let n = x.h * x.w;
    let mut change = vec![0.0f64; n];
    for ch in 0..x.c {
        for (p, slot) in change.iter_mut().enumerate() {
            *slot = slot.max((out.data()[ch * n + p] - base.data()[ch * n + p]).abs());
        }
    }
    Tensor::new(vec![x.h, x.w], change)
}

/// Which roles see the perturbation in [`oracle_probe`].
#[derive(Clone, Copy, Debug)]
pub struct ProbeRoles {
    pub prior: bool,
    pub key: bool,
    pub value: bool,
}

impl ProbeRoles {
    pub const FULL: Self = Self { prior: true, key: true, value: true };
    pub const FROZEN_ATTENTION: Self = Self { prior: false, key: false, value: true };
    pub const PRIOR_ONLY: Self = Self { prior: true, key: false, value: false };
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockKind;
    use crate::tensor::Rng;

    #[test]
    fn zero_gamma_is_identity() {
        let mut rng = Rng::new(31);
        for kind in BlockKind::ALL {
            let p = BlockParams::random(kind, 4, 2, &mut rng).unwrap().with_all_gammas(0.0);
            let x = rng.uniform_tensor(&[4, 3, 2], -1.0, 1.0).unwrap();
            assert_eq!(oracle_forward(&p, &x).unwrap(), x, "{kind}");
        }
    }

    #[test]
    fn constant_input_attention_is_uniform() {
        let BlockParams::Fla(p) = BlockParams::init(BlockKind::Fla, 3, 1, &mut Rng::new(0)).unwrap() else {
            unreachable!()
        };
        let a = oracle_fla_attention(&p, &Tensor::full(&[3, 2, 2], -1.3).unwrap()).unwrap();
        assert!(a.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn refuses_large_inputs() {
        let p = BlockParams::init(BlockKind::ChannelNl, 4, 1, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[4, 60, 60]).unwrap();
        assert!(matches!(oracle_forward(&p, &x), Err(Error::OracleTooLarge { .. })));
    }

    #[test]
    fn kind_checked_entry_points() {
        let p = BlockParams::init(BlockKind::Fla, 2, 1, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[2, 2, 2]).unwrap();
        assert!(oracle_fla(&p, &x).is_ok());
        assert!(oracle_channel_nl(&p, &x).is_err());
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(csum(v), 2.0);
    }

    #[test]
    fn source_is_loop_only() {
        let src = include_str!("oracle.rs");
        let body = src.split("#[cfg(test)]").next().unwrap();
        for banned in ["matmul", "blocks::forward", "tensor::ops", "softmax(", "linear_channels", "record_"] {
            assert!(!body.contains(banned), "oracle must not use `{banned}`");
        }
    }
}
