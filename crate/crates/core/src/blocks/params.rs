use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Reduction ratio of the query/key projections in the spatial block.
pub const DEFAULT_REDUCTION: usize = 8;

/// Largest divisor of `channels` not above [`DEFAULT_REDUCTION`].
pub fn default_reduction(channels: usize) -> usize {
    (1..=DEFAULT_REDUCTION.min(channels.max(1)))
        .rev()
        .find(|&r| channels.is_multiple_of(r))
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKind {
    ChannelNl,
    SpatialNl,
    DualNl,
    CsNl,
    Fla,
}

impl BlockKind {
    /// Every kind, in the row order used by reports.
    pub const ALL: [BlockKind; 5] = [
        BlockKind::ChannelNl,
        BlockKind::SpatialNl,
        BlockKind::DualNl,
        BlockKind::CsNl,
        BlockKind::Fla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::ChannelNl => "channel_nl",
            BlockKind::SpatialNl => "spatial_nl",
            BlockKind::DualNl => "dual_nl",
            BlockKind::CsNl => "cs_nl",
            BlockKind::Fla => "fla",
        }
    }

    pub fn uses_spatial_projections(self) -> bool {
        matches!(self, BlockKind::SpatialNl | BlockKind::DualNl | BlockKind::CsNl)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "channel_nl" | "channel" => BlockKind::ChannelNl,
            "spatial_nl" | "spatial" => BlockKind::SpatialNl,
            "dual_nl" | "dual" => BlockKind::DualNl,
            "cs_nl" | "cs" => BlockKind::CsNl,
            "fla" => BlockKind::Fla,
            other => return Err(Error::Config(format!("unknown block kind `{other}`"))),
        })
    }
}

/// Channel NL has no projections; its only parameter is the residual scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelParams {
    pub channels: usize,
    pub gamma: f64,
}

/// 1×1 query/key projections to `C / reduction` channels and a full
/// `C → C` value projection. The key map has no bias: it would add the same
/// `q · b` to every logit of a query row, which the softmax over keys
/// cancels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialParams {
    pub channels: usize,
    pub reduction: usize,
    pub query_weight: Tensor,
    pub query_bias: Tensor,
    pub key_weight: Tensor,
    pub value_weight: Tensor,
    pub value_bias: Tensor,
    pub gamma: f64,
}

/// Independent linear layers after the row pooling (`linear_w`, producing
/// the per-column prior) and the column pooling (`linear_h`, producing the
/// per-row prior).
#[derive(Clone, Debug, PartialEq)]
pub struct FlaParams {
    pub channels: usize,
    pub linear_w_weight: Tensor,
    pub linear_w_bias: Tensor,
    pub linear_h_weight: Tensor,
    pub linear_h_bias: Tensor,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockParams {
    Channel(ChannelParams),
    Spatial(SpatialParams),
    Fla(FlaParams),
    Dual {
        channel: ChannelParams,
        spatial: SpatialParams,
    },
    Cs {
        channel: ChannelParams,
        spatial: SpatialParams,
    },
}

fn check_reduction(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Config(format!(
            "reduction ratio {reduction} does not divide channel count {channels}"
        )));
    }
    Ok(())
}

impl ChannelParams {
    pub fn new(channels: usize, gamma: f64) -> Self {
        Self { channels, gamma }
    }
}

impl SpatialParams {
    /// Uniform `±1/√C` projection weights, zero biases, zero scale.
    pub fn init(channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let reduced = channels / reduction;
        let bound = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            channels,
            reduction,
            query_weight: rng.uniform_tensor(&[reduced, channels], -bound, bound)?,
            query_bias: Tensor::zeros(&[reduced])?,
            key_weight: rng.uniform_tensor(&[reduced, channels], -bound, bound)?,
            value_weight: rng.uniform_tensor(&[channels, channels], -bound, bound)?,
            value_bias: Tensor::zeros(&[channels])?,
            gamma: 0.0,
        })
    }

    pub fn reduced_channels(&self) -> usize {
        self.channels / self.reduction
    }

    fn validate(&self) -> Result<()> {
        check_reduction(self.channels, self.reduction)?;
        let (c, r) = (self.channels, self.reduced_channels());
        let expect = [
            ("query.weight", &self.query_weight, vec![r, c]),
            ("query.bias", &self.query_bias, vec![r]),
            ("key.weight", &self.key_weight, vec![r, c]),
            ("value.weight", &self.value_weight, vec![c, c]),
            ("value.bias", &self.value_bias, vec![c]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "spatial_nl.{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

impl FlaParams {
    /// Identity linear layers with zero bias and zero scale, so the priors of
    /// an untrained block are the raw pooled means.
    pub fn init(channels: usize) -> Result<Self> {
        Ok(Self {
            channels,
            linear_w_weight: Tensor::eye(channels)?,
            linear_w_bias: Tensor::zeros(&[channels])?,
            linear_h_weight: Tensor::eye(channels)?,
            linear_h_bias: Tensor::zeros(&[channels])?,
            gamma: 0.0,
        })
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels;
        for (name, t, shape) in [
            ("linear_w.weight", &self.linear_w_weight, vec![c, c]),
            ("linear_w.bias", &self.linear_w_bias, vec![c]),
            ("linear_h.weight", &self.linear_h_weight, vec![c, c]),
            ("linear_h.bias", &self.linear_h_bias, vec![c]),
        ] {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "fla.{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn perturb(t: &Tensor, rng: &mut Rng, spread: f64) -> Result<Tensor> {
    let data = t.data().iter().map(|v| v + rng.uniform(-spread, spread)).collect();
    Tensor::new(t.shape().to_vec(), data)
}

impl BlockParams {
    /// Untrained parameters: every scale is zero, so the block is the identity.
    /// `reduction` only matters for kinds with a spatial branch.
    pub fn init(kind: BlockKind, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("channel count must be positive".into()));
        }
        let channel = || ChannelParams::new(channels, 0.0);
        Ok(match kind {
            BlockKind::ChannelNl => BlockParams::Channel(channel()),
            BlockKind::SpatialNl => BlockParams::Spatial(SpatialParams::init(channels, reduction, rng)?),
            BlockKind::Fla => BlockParams::Fla(FlaParams::init(channels)?),
            BlockKind::DualNl => BlockParams::Dual {
                channel: channel(),
                spatial: SpatialParams::init(channels, reduction, rng)?,
            },
            BlockKind::CsNl => BlockParams::Cs {
                channel: channel(),
                spatial: SpatialParams::init(channels, reduction, rng)?,
            },
        })
    }

    /// Parameters away from the initial point: scales in `[0.5, 1.5)`, linear
    /// layers jittered around their initial values, non-zero biases.
    pub fn random(kind: BlockKind, channels: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        let base = Self::init(kind, channels, reduction, rng)?;
        let tensors = base
            .named_tensors()?
            .into_iter()
            .map(|(name, t)| {
                if name.ends_with("gamma") {
                    Tensor::scalar(rng.uniform(0.5, 1.5))
                } else if name.ends_with("bias") {
                    perturb(&t, rng, 0.2)
                } else {
                    perturb(&t, rng, 0.3)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        base.with_tensors(&tensors)
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            BlockParams::Channel(_) => BlockKind::ChannelNl,
            BlockParams::Spatial(_) => BlockKind::SpatialNl,
            BlockParams::Fla(_) => BlockKind::Fla,
            BlockParams::Dual { .. } => BlockKind::DualNl,
            BlockParams::Cs { .. } => BlockKind::CsNl,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            BlockParams::Channel(p) => p.channels,
            BlockParams::Spatial(p) => p.channels,
            BlockParams::Fla(p) => p.channels,
            BlockParams::Dual { channel, .. } | BlockParams::Cs { channel, .. } => channel.channels,
        }
    }

    pub fn reduction(&self) -> Option<usize> {
        match self {
            BlockParams::Spatial(p)
            | BlockParams::Dual { spatial: p, .. }
            | BlockParams::Cs { spatial: p, .. } => Some(p.reduction),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in self.gammas() {
            if !g.is_finite() {
                return Err(Error::Config("gamma must be finite".into()));
            }
        }
        match self {
            BlockParams::Channel(_) => Ok(()),
            BlockParams::Spatial(p) => p.validate(),
            BlockParams::Fla(p) => p.validate(),
            BlockParams::Dual { channel, spatial } | BlockParams::Cs { channel, spatial } => {
                if channel.channels != spatial.channels {
                    return Err(Error::Config(format!(
                        "branch channel counts differ: {} vs {}",
                        channel.channels, spatial.channels
                    )));
                }
                spatial.validate()
            }
        }
    }

    /// One scale per attention map, in [`named_tensors`](Self::named_tensors) order.
    pub fn gammas(&self) -> Vec<f64> {
        match self {
            BlockParams::Channel(p) => vec![p.gamma],
            BlockParams::Spatial(p) => vec![p.gamma],
            BlockParams::Fla(p) => vec![p.gamma],
            BlockParams::Dual { channel, spatial } | BlockParams::Cs { channel, spatial } => {
                vec![channel.gamma, spatial.gamma]
            }
        }
    }

    /// Copy with every scale set to `gamma`.
    pub fn with_all_gammas(&self, gamma: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            BlockParams::Channel(p) => p.gamma = gamma,
            BlockParams::Spatial(p) => p.gamma = gamma,
            BlockParams::Fla(p) => p.gamma = gamma,
            BlockParams::Dual { channel, spatial } | BlockParams::Cs { channel, spatial } => {
                channel.gamma = gamma;
                spatial.gamma = gamma;
            }
        }
        out
    }

    /// Every learnable tensor under its stable checkpoint name. Scales are
    /// one-element tensors.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        fn channel(p: &ChannelParams, out: &mut Vec<(String, Tensor)>) -> Result<()> {
            out.push(("channel_nl.gamma".into(), Tensor::scalar(p.gamma)?));
            Ok(())
        }
        fn spatial(p: &SpatialParams, out: &mut Vec<(String, Tensor)>) -> Result<()> {
            for (name, t) in [
                ("query.weight", &p.query_weight),
                ("query.bias", &p.query_bias),
                ("key.weight", &p.key_weight),
                ("value.weight", &p.value_weight),
                ("value.bias", &p.value_bias),
            ] {
                out.push((format!("spatial_nl.{name}"), t.clone()));
            }
            out.push(("spatial_nl.gamma".into(), Tensor::scalar(p.gamma)?));
            Ok(())
        }
        let mut out = Vec::new();
        match self {
            BlockParams::Channel(p) => channel(p, &mut out)?,
            BlockParams::Spatial(p) => spatial(p, &mut out)?,
            BlockParams::Fla(p) => {
                for (name, t) in [
                    ("fla.linear_w.weight", &p.linear_w_weight),
                    ("fla.linear_w.bias", &p.linear_w_bias),
                    ("fla.linear_h.weight", &p.linear_h_weight),
                    ("fla.linear_h.bias", &p.linear_h_bias),
                ] {
                    out.push((name.to_string(), t.clone()));
                }
                out.push(("fla.gamma".into(), Tensor::scalar(p.gamma)?));
            }
            BlockParams::Dual { channel: c, spatial: s } | BlockParams::Cs { channel: c, spatial: s } => {
                channel(c, &mut out)?;
                spatial(s, &mut out)?;
            }
        }
        Ok(out)
    }

    /// Rebuilds parameters of the same kind from tensors in
    /// [`named_tensors`](Self::named_tensors) order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        let expected = self.named_tensors()?.len();
        if tensors.len() != expected {
            return Err(Error::Config(format!(
                "{} expects {expected} tensors, got {}",
                self.kind(),
                tensors.len()
            )));
        }
        let scalar = |t: &Tensor| {
            t.item()
                .ok_or_else(|| Error::Config(format!("gamma must be a single scalar, got {:?}", t.shape())))
        };
        let spatial_from = |base: &SpatialParams, t: &[Tensor]| -> Result<SpatialParams> {
            Ok(SpatialParams {
                channels: base.channels,
                reduction: base.reduction,
                query_weight: t[0].clone(),
                query_bias: t[1].clone(),
                key_weight: t[2].clone(),
                value_weight: t[3].clone(),
                value_bias: t[4].clone(),
                gamma: scalar(&t[5])?,
            })
        };
        let out = match self {
            BlockParams::Channel(p) => BlockParams::Channel(ChannelParams::new(p.channels, scalar(&tensors[0])?)),
            BlockParams::Spatial(p) => BlockParams::Spatial(spatial_from(p, tensors)?),
            BlockParams::Fla(p) => BlockParams::Fla(FlaParams {
                channels: p.channels,
                linear_w_weight: tensors[0].clone(),
                linear_w_bias: tensors[1].clone(),
                linear_h_weight: tensors[2].clone(),
                linear_h_bias: tensors[3].clone(),
                gamma: scalar(&tensors[4])?,
            }),
            BlockParams::Dual { channel, spatial } => BlockParams::Dual {
                channel: ChannelParams::new(channel.channels, scalar(&tensors[0])?),
                spatial: spatial_from(spatial, &tensors[1..])?,
            },
            BlockParams::Cs { channel, spatial } => BlockParams::Cs {
                channel: ChannelParams::new(channel.channels, scalar(&tensors[0])?),
                spatial: spatial_from(spatial, &tensors[1..])?,
            },
        };
        out.validate()?;
        Ok(out)
    }
}
