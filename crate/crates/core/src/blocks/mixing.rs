//! Jacobian probes exposing which spatial positions a block mixes.
//!
//! A probe perturbs one input coordinate and records, per output position,
//! the largest change over channels. Three probes are run:
//!
//! * `Full`: the plain forward.
//! * `FrozenAttention`: attention (and FLA priors) computed from the
//!   unperturbed input, values and residual from the perturbed one.
//! * `PriorOnly` (FLA): only the pooled-prior construction sees the
//!   perturbation.
//!
//! For Channel NL any cross-position movement must disappear once attention
//! is frozen, because each position is recombined from its own features
//! only. FLA additionally carries the perturbation through its row/column
//! priors.

use super::{forward_split, BlockKind, BlockParams, Sources};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An output position "moves" when some channel changes by more than this.
pub const MOVE_THRESHOLD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Full,
    FrozenAttention,
    PriorOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub probe: ProbeKind,
    /// `H×W` map of the largest absolute output change over channels.
    pub change: Tensor,
}

impl ProbeResult {
    pub fn moved(&self, h: usize, w: usize) -> bool {
        self.change.at(&[h, w]) > MOVE_THRESHOLD
    }

    /// Every moved position, row-major.
    pub fn moved_positions(&self) -> Vec<(usize, usize)> {
        let (hh, ww) = (self.change.shape()[0], self.change.shape()[1]);
        (0..hh)
            .flat_map(|h| (0..ww).map(move |w| (h, w)))
            .filter(|&(h, w)| self.moved(h, w))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixingReport {
    pub kind: BlockKind,
    /// Perturbed input coordinate `(c, h, w)`.
    pub coordinate: (usize, usize, usize),
    pub epsilon: f64,
    pub full: ProbeResult,
    pub frozen_attention: ProbeResult,
    /// Only for FLA, which is the only kind with a prior pathway.
    pub prior_only: Option<ProbeResult>,
}

impl MixingReport {
    fn others_moved(&self, probe: &ProbeResult) -> Vec<(usize, usize)> {
        let (_, h0, w0) = self.coordinate;
        probe
            .moved_positions()
            .into_iter()
            .filter(|&p| p != (h0, w0))
            .collect()
    }

    /// The plain forward moves some position other than the probed one.
    pub fn cross_spatial(&self) -> bool {
        !self.others_moved(&self.full).is_empty()
    }

    /// With attention frozen, no position other than the probed one moves.
    pub fn frozen_is_local(&self) -> bool {
        self.others_moved(&self.frozen_attention).is_empty()
    }

    /// The prior pathway alone reaches another position in the probed row
    /// and another in the probed column.
    pub fn prior_reaches_row_and_column(&self) -> bool {
        let Some(prior) = &self.prior_only else {
            return false;
        };
        let (_, h0, w0) = self.coordinate;
        let others = self.others_moved(prior);
        others.iter().any(|&(h, _)| h == h0) && others.iter().any(|&(_, w)| w == w0)
    }
}

fn change_map(base: &Tensor, moved: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (base.shape()[0], base.shape()[1], base.shape()[2]);
    let mut out = vec![0.0; h * w];
    for ci in 0..c {
        let range = ci * h * w..(ci + 1) * h * w;
        for ((o, m), b) in out.iter_mut().zip(&moved.data()[range.clone()]).zip(&base.data()[range]) {
            *o = f64::max(*o, (m - b).abs());
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Runs the probes for `params` at `input`, perturbing `coordinate` by
/// `epsilon`.
pub fn mixing_structure(
    params: &BlockParams,
    input: &Tensor,
    coordinate: (usize, usize, usize),
    epsilon: f64,
) -> Result<MixingReport> {
    let (c, h, w) = coordinate;
    if input.rank() != 3 || c >= input.shape()[0] || h >= input.shape()[1] || w >= input.shape()[2] {
        return Err(Error::dim(
            "mixing_structure",
            format!("coordinate {coordinate:?} outside input of shape {:?}", input.shape()),
        ));
    }
    let flat = input.offset(&[c, h, w]);
    let perturbed = input.with_value(flat, input.data()[flat] + epsilon)?;
    let base = forward_split(params, Sources::uniform(input))?;

    let probe = |probe: ProbeKind, sources: Sources<'_>| -> Result<ProbeResult> {
        let out = forward_split(params, sources)?;
        Ok(ProbeResult {
            probe,
            change: change_map(&base, &out)?,
        })
    };
    let full = probe(ProbeKind::Full, Sources::uniform(&perturbed))?;
    let frozen_attention = probe(
        ProbeKind::FrozenAttention,
        Sources {
            prior: input,
            key: input,
            value: &perturbed,
        },
    )?;
    let prior_only = if params.kind() == BlockKind::Fla {
        Some(probe(
            ProbeKind::PriorOnly,
            Sources {
                prior: &perturbed,
                key: input,
                value: input,
            },
        )?)
    } else {
        None
    };
    Ok(MixingReport {
        kind: params.kind(),
        coordinate,
        epsilon,
        full,
        frozen_attention,
        prior_only,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn fla_reaches_row_and_column() {
        let mut rng = Rng::new(21);
        let p = BlockParams::random(BlockKind::Fla, 2, 1, &mut rng).unwrap();
        let x = rng.uniform_tensor(&[2, 3, 3], -1.0, 1.0).unwrap();
        let r = mixing_structure(&p, &x, (0, 0, 0), 1e-3).unwrap();
        assert!(r.full.moved(0, 2) && r.full.moved(2, 0));
        assert!(r.prior_reaches_row_and_column());
        let prior = r.prior_only.as_ref().unwrap();
        assert!(prior.moved(0, 2) && prior.moved(2, 0));
        assert!(r.frozen_is_local());
    }

    #[test]
    fn channel_nl_mixing_is_only_through_the_gram_matrix() {
        let mut rng = Rng::new(22);
        let p = BlockParams::random(BlockKind::ChannelNl, 2, 1, &mut rng).unwrap();
        let x = rng.uniform_tensor(&[2, 3, 3], -1.0, 1.0).unwrap();
        let r = mixing_structure(&p, &x, (0, 0, 0), 1e-3).unwrap();
        assert!(r.full.moved(0, 2));
        assert!(r.frozen_is_local());
        assert_eq!(r.frozen_attention.moved_positions(), vec![(0, 0)]);
        assert!(r.prior_only.is_none());
        assert!(!r.prior_reaches_row_and_column());
    }

    #[test]
    fn zero_input_only_moves_probed_position() {
        let mut rng = Rng::new(23);
        for kind in [BlockKind::ChannelNl, BlockKind::Fla] {
            let p = BlockParams::random(kind, 2, 1, &mut rng).unwrap();
            let x = Tensor::zeros(&[2, 3, 3]).unwrap();
            let r = mixing_structure(&p, &x, (1, 1, 2), 1e-3).unwrap();
            assert_eq!(r.full.moved_positions(), vec![(1, 2)], "{kind}");
        }
    }

    #[test]
    fn rejects_out_of_range_coordinate() {
        let p = BlockParams::init(BlockKind::Fla, 2, 1, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[2, 3, 3]).unwrap();
        assert!(mixing_structure(&p, &x, (2, 0, 0), 1e-3).is_err());
    }
}
