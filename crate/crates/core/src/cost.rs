//! Analytic FLOPs and activation-memory model for each block kind.
//!
//! Conventions: one multiply-accumulate is `flops_per_mac` FLOPs (2 by
//! default), softmax 3 operations per attention element (exp, share of the
//! sum, divide), average
//! pooling one operation per input element per pooling path. The FLA prior
//! construction (pooling plus the two linear layers) and the Spatial NL
//! projections are counted only with `include_projections`; softmax only with
//! `include_softmax`.
//!
//! Memory is the peak over a forward schedule of the sum of live
//! intermediate tensors (block input and weights excluded), each tensor freed
//! right after its last consumer runs.

use std::fmt::Write as _;

use crate::blocks::{BlockKind, DEFAULT_REDUCTION};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "kind,C,H,W,r,flops_total,flops_affinity,flops_aggregation,flops_projections,flops_other,attn_elements,activation_bytes_peak";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostConfig {
    pub channels: u64,
    pub height: u64,
    pub width: u64,
    /// Query/key reduction ratio of Spatial NL.
    pub reduction: u64,
    pub flops_per_mac: u64,
    pub bytes_per_scalar: u64,
    pub include_projections: bool,
    pub include_softmax: bool,
}

impl CostConfig {
    pub fn new(channels: u64, height: u64, width: u64) -> Self {
        Self {
            channels,
            height,
            width,
            reduction: DEFAULT_REDUCTION as u64,
            flops_per_mac: 2,
            bytes_per_scalar: 4,
            include_projections: true,
            include_softmax: true,
        }
    }

    /// 512 channels on a 96×96 map: a 768×768 image at output stride 8.
    pub fn anchor() -> Self {
        Self::new(512, 96, 96)
    }

    /// Only the two attention matrix products.
    pub fn matmuls_only(mut self) -> Self {
        self.include_projections = false;
        self.include_softmax = false;
        self
    }

    pub fn with_shape(mut self, channels: u64, height: u64, width: u64) -> Self {
        self.channels = channels;
        self.height = height;
        self.width = width;
        self
    }

    /// Per-slice extent after the FLA merge; defined for square maps.
    pub fn merged_extent(&self) -> Option<u64> {
        (self.height == self.width).then_some(self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "extents must be positive, got C={} H={} W={}",
                self.channels, self.height, self.width
            )));
        }
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "reduction ratio {} does not divide C={}",
                self.reduction, self.channels
            )));
        }
        if self.flops_per_mac == 0 || self.bytes_per_scalar == 0 {
            return Err(Error::Config("flops_per_mac and bytes_per_scalar must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub affinity: u128,
    pub aggregation: u128,
    pub projections: u128,
    pub pooling: u128,
    pub softmax: u128,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u128 {
        self.affinity + self.aggregation + self.projections + self.pooling + self.softmax
    }

    pub fn matmul(&self) -> u128 {
        self.affinity + self.aggregation
    }

    pub fn other(&self) -> u128 {
        self.pooling + self.softmax
    }

    fn plus(self, o: Self) -> Result<Self> {
        let add = |a: u128, b: u128| a.checked_add(b).ok_or(Error::Overflow("composite flops"));
        Ok(Self {
            affinity: add(self.affinity, o.affinity)?,
            aggregation: add(self.aggregation, o.aggregation)?,
            projections: add(self.projections, o.projections)?,
            pooling: add(self.pooling, o.pooling)?,
            softmax: add(self.softmax, o.softmax)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub kind: BlockKind,
    pub config: CostConfig,
    pub flops: FlopsBreakdown,
    pub flops_total: u128,
    pub activation_bytes_peak: u128,
    pub attention_map_elements: u128,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.flops_total as f64 / 1e9
    }

    pub fn activation_megabytes(&self) -> f64 {
        self.activation_bytes_peak as f64 / 1e6
    }

    pub fn csv_row(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.kind,
            c.channels,
            c.height,
            c.width,
            c.reduction,
            self.flops_total,
            self.flops.affinity,
            self.flops.aggregation,
            self.flops.projections,
            self.flops.other(),
            self.attention_map_elements,
            self.activation_bytes_peak
        )
    }
}

/// Checked product of small factors.
fn prod(what: &'static str, factors: &[u64]) -> Result<u128> {
    factors
        .iter()
        .try_fold(1u128, |acc, &f| acc.checked_mul(u128::from(f)))
        .ok_or(Error::Overflow(what))
}

/// Forward schedule for the liveness model.
#[derive(Default)]
struct Schedule {
    sizes: Vec<u128>,
    last_use: Vec<usize>,
}

impl Schedule {
    /// Allocates a tensor produced from `inputs`; returns its id.
    fn alloc(&mut self, elems: u128, inputs: &[usize]) -> usize {
        let id = self.sizes.len();
        for &i in inputs {
            self.last_use[i] = id;
        }
        self.sizes.push(elems);
        self.last_use.push(id);
        id
    }

    /// Keeps `id` alive to the end of the schedule.
    fn retain(&mut self, id: usize) {
        self.last_use[id] = usize::MAX;
    }

    fn peak(&self) -> u128 {
        (0..self.sizes.len())
            .map(|step| {
                (0..=step)
                    .filter(|&t| self.last_use[t] >= step)
                    .map(|t| self.sizes[t])
                    .sum::<u128>()
            })
            .max()
            .unwrap_or(0)
    }
}

/// Branch input handle: `None` is the block input, which is never counted.
type Src = Option<usize>;

fn ids(srcs: &[Src]) -> Vec<usize> {
    srcs.iter().flatten().copied().collect()
}

fn channel_schedule(s: &mut Schedule, cfg: &CostConfig, x: Src) -> Result<usize> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let cc = prod("channel memory", &[c, c])?;
    let cn = prod("channel memory", &[c, h, w])?;
    let logits = s.alloc(cc, &ids(&[x]));
    let attn = s.alloc(cc, &[logits]);
    let ctx = s.alloc(cn, &ids(&[Some(attn), x]));
    Ok(s.alloc(cn, &ids(&[Some(ctx), x])))
}

fn spatial_schedule(s: &mut Schedule, cfg: &CostConfig, x: Src) -> Result<usize> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let reduced = c / cfg.reduction;
    let q = s.alloc(prod("spatial memory", &[reduced, h, w])?, &ids(&[x]));
    let k = s.alloc(prod("spatial memory", &[reduced, h, w])?, &ids(&[x]));
    let v = s.alloc(prod("spatial memory", &[c, h, w])?, &ids(&[x]));
    let logits = s.alloc(prod("spatial memory", &[h, w, h, w])?, &[q, k]);
    let attn = s.alloc(prod("spatial memory", &[h, w, h, w])?, &[logits]);
    let ctx = s.alloc(prod("spatial memory", &[c, h, w])?, &[attn, v]);
    Ok(s.alloc(prod("spatial memory", &[c, h, w])?, &ids(&[Some(ctx), x])))
}

/// Pool, linear, repeat to `C×H×W`, cut and merge, then the batched
/// affinity and aggregation, inverse merge and sum.
fn fla_schedule(s: &mut Schedule, cfg: &CostConfig, x: Src) -> Result<usize> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let chw = prod("fla memory", &[c, h, w])?;
    let merged = prod("fla memory", &[2, c, h, w])?;
    let attn_elems = prod("fla memory", &[h + w, c, c])?;
    let pooled_w = s.alloc(prod("fla memory", &[c, w])?, &ids(&[x]));
    let prior_w = s.alloc(prod("fla memory", &[c, w])?, &[pooled_w]);
    let pooled_h = s.alloc(prod("fla memory", &[c, h])?, &ids(&[x]));
    let prior_h = s.alloc(prod("fla memory", &[c, h])?, &[pooled_h]);
    let rep_w = s.alloc(chw, &[prior_w]);
    let rep_h = s.alloc(chw, &[prior_h]);
    let q = s.alloc(merged, &[rep_w, rep_h]);
    let k = s.alloc(merged, &ids(&[x]));
    let v = s.alloc(merged, &ids(&[x]));
    let logits = s.alloc(attn_elems, &[q, k]);
    let attn = s.alloc(attn_elems, &[logits]);
    let ctx = s.alloc(merged, &[attn, v]);
    let from_rows = s.alloc(chw, &[ctx]);
    let from_cols = s.alloc(chw, &[ctx]);
    let sum = s.alloc(chw, &[from_rows, from_cols]);
    Ok(s.alloc(chw, &ids(&[Some(sum), x])))
}

fn peak_elements(kind: BlockKind, cfg: &CostConfig) -> Result<u128> {
    let mut s = Schedule::default();
    let cn = prod("memory", &[cfg.channels, cfg.height, cfg.width])?;
    let out = match kind {
        BlockKind::ChannelNl => channel_schedule(&mut s, cfg, None)?,
        BlockKind::SpatialNl => spatial_schedule(&mut s, cfg, None)?,
        BlockKind::Fla => fla_schedule(&mut s, cfg, None)?,
        BlockKind::DualNl => {
            // Both branch outputs live until they are fused.
            let a = channel_schedule(&mut s, cfg, None)?;
            let b = spatial_schedule(&mut s, cfg, None)?;
            s.alloc(cn, &[a, b])
        }
        BlockKind::CsNl => {
            let mid = channel_schedule(&mut s, cfg, None)?;
            spatial_schedule(&mut s, cfg, Some(mid))?
        }
    };
    s.retain(out);
    Ok(s.peak())
}

fn channel_flops(cfg: &CostConfig) -> Result<FlopsBreakdown> {
    let (c, h, w, mac) = (cfg.channels, cfg.height, cfg.width, cfg.flops_per_mac);
    Ok(FlopsBreakdown {
        affinity: prod("channel affinity", &[mac, c, c, h, w])?,
        aggregation: prod("channel aggregation", &[mac, c, c, h, w])?,
        projections: 0,
        pooling: 0,
        softmax: if cfg.include_softmax { prod("channel softmax", &[3, c, c])? } else { 0 },
    })
}

fn spatial_flops(cfg: &CostConfig) -> Result<FlopsBreakdown> {
    let (c, h, w, mac) = (cfg.channels, cfg.height, cfg.width, cfg.flops_per_mac);
    let reduced = c / cfg.reduction;
    Ok(FlopsBreakdown {
        affinity: prod("spatial affinity", &[mac, h, w, h, w, reduced])?,
        aggregation: prod("spatial aggregation", &[mac, h, w, h, w, c])?,
        projections: if cfg.include_projections {
            prod("spatial projections", &[mac, h, w, c, 2 * reduced + c])?
        } else {
            0
        },
        pooling: 0,
        softmax: if cfg.include_softmax { prod("spatial softmax", &[3, h, w, h, w])? } else { 0 },
    })
}

fn fla_flops(cfg: &CostConfig) -> Result<FlopsBreakdown> {
    let (c, h, w, mac) = (cfg.channels, cfg.height, cfg.width, cfg.flops_per_mac);
    // H row slices of (C×W)(W×C) plus W column slices of (C×H)(H×C).
    let per_group = prod("fla affinity", &[mac, c, c, h, w])?;
    let matmul = per_group.checked_mul(2).ok_or(Error::Overflow("fla affinity"))?;
    Ok(FlopsBreakdown {
        affinity: matmul,
        aggregation: matmul,
        projections: if cfg.include_projections {
            prod("fla linear", &[mac, c, c, h + w])?
        } else {
            0
        },
        pooling: if cfg.include_projections { prod("fla pooling", &[2, c, h, w])? } else { 0 },
        softmax: if cfg.include_softmax { prod("fla softmax", &[3, h + w, c, c])? } else { 0 },
    })
}

fn attention_elements(kind: BlockKind, cfg: &CostConfig) -> Result<u128> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    Ok(match kind {
        BlockKind::ChannelNl => prod("attention", &[c, c])?,
        BlockKind::SpatialNl => prod("attention", &[h, w, h, w])?,
        BlockKind::Fla => prod("attention", &[h + w, c, c])?,
        BlockKind::DualNl | BlockKind::CsNl => prod("attention", &[c, c])?
            .checked_add(prod("attention", &[h, w, h, w])?)
            .ok_or(Error::Overflow("attention"))?,
    })
}

pub fn estimate(kind: BlockKind, cfg: &CostConfig) -> Result<CostReport> {
    cfg.validate()?;
    let flops = match kind {
        BlockKind::ChannelNl => channel_flops(cfg)?,
        BlockKind::SpatialNl => spatial_flops(cfg)?,
        BlockKind::Fla => fla_flops(cfg)?,
        BlockKind::DualNl | BlockKind::CsNl => channel_flops(cfg)?.plus(spatial_flops(cfg)?)?,
    };
    let peak = peak_elements(kind, cfg)?;
    Ok(CostReport {
        kind,
        config: *cfg,
        flops,
        flops_total: flops.total(),
        activation_bytes_peak: peak
            .checked_mul(u128::from(cfg.bytes_per_scalar))
            .ok_or(Error::Overflow("activation bytes"))?,
        attention_map_elements: attention_elements(kind, cfg)?,
    })
}

/// Estimates every `(kind, shape)` pair, ordered by kind (report order) and
/// then lexicographically by `(C, H, W)`. Cells are spread over up to
/// `threads` workers; the result order does not depend on scheduling.
pub fn sweep(
    kinds: &[BlockKind],
    shapes: &[(u64, u64, u64)],
    base: &CostConfig,
    threads: usize,
) -> Result<Vec<CostReport>> {
    if shapes.is_empty() {
        return Err(Error::Config("cost sweep needs at least one shape".into()));
    }
    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    let mut shapes = shapes.to_vec();
    shapes.sort();
    let cells: Vec<(BlockKind, CostConfig)> = kinds
        .iter()
        .flat_map(|&k| shapes.iter().map(move |&(c, h, w)| (k, base.with_shape(c, h, w))))
        .collect();
    let threads = threads.clamp(1, cells.len().max(1));
    let chunk = cells.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<CostReport>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cells
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|(k, cfg)| estimate(*k, cfg)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("cost worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(cells.len());
    for part in results {
        out.extend(part?);
    }
    Ok(out)
}

/// Header plus one LF-terminated row per report.
pub fn to_csv(reports: &[CostReport]) -> String {
    let mut s = String::with_capacity(64 * (reports.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}
