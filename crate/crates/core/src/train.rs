//! Synthetic regression tasks trained with plain SGD on mean-squared error.
//!
//! Targets come from a hidden, randomly initialised block of the matching
//! kind applied to a small fixed batch of uniform inputs, so the matching
//! block can always fit its task exactly.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::autograd::Tape;
use crate::blocks::{default_reduction, forward, param_leaves, record_forward, BlockKind, BlockParams};
use crate::error::{Error, Result};
use crate::tensor::{self, Rng, Tensor};

/// Loss above which a run is aborted.
pub const DIVERGENCE_LOSS: f64 = 1e6;
pub const DEFAULT_LR: f64 = 0.5;
pub const DEFAULT_BATCH: usize = 4;

const TARGET_STREAM: u64 = 1;
const INPUT_STREAM: u64 = 2;
const MODEL_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ChannelMix,
    SpatialMix,
    FullMix,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::ChannelMix, TaskKind::SpatialMix, TaskKind::FullMix];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ChannelMix => "channel_mix",
            TaskKind::SpatialMix => "spatial_mix",
            TaskKind::FullMix => "full_mix",
        }
    }

    /// Kind of the hidden block that produces targets.
    pub fn target_kind(self) -> BlockKind {
        match self {
            TaskKind::ChannelMix => BlockKind::ChannelNl,
            TaskKind::SpatialMix => BlockKind::SpatialNl,
            TaskKind::FullMix => BlockKind::Fla,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "channel_mix" => Ok(TaskKind::ChannelMix),
            "spatial_mix" => Ok(TaskKind::SpatialMix),
            "full_mix" => Ok(TaskKind::FullMix),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, channels: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            kind,
            channels,
            height,
            width,
            seed,
            steps: 500,
            lr: DEFAULT_LR,
            batch: DEFAULT_BATCH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "task shape must be positive, got {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must hold at least one sample".into()));
        }
        Ok(())
    }

    pub fn reduction(&self) -> usize {
        default_reduction(self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Loss before every update, then the loss after the last one.
    pub losses: Vec<f64>,
    /// Final over initial loss; 1 when the initial loss is zero.
    pub ratio: f64,
    pub steps: usize,
}

impl TrainReport {
    fn from_losses(losses: Vec<f64>) -> Self {
        let first = losses.first().copied().unwrap_or(0.0);
        let last = losses.last().copied().unwrap_or(0.0);
        Self {
            ratio: if first == 0.0 { 1.0 } else { last / first },
            steps: losses.len().saturating_sub(1),
            losses,
        }
    }

    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(0.0)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(0.0)
    }

    /// `step,loss` rows; reals use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:?}");
        }
        s
    }
}

/// Fixed inputs and their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl TaskData {
    pub fn new(inputs: Vec<Tensor>, targets: Vec<Tensor>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Config(format!(
                "need matching non-empty inputs and targets, got {} and {}",
                inputs.len(),
                targets.len()
            )));
        }
        for (x, y) in inputs.iter().zip(&targets) {
            if x.shape() != y.shape() {
                return Err(Error::dim(
                    "task data",
                    format!("input {:?} vs target {:?}", x.shape(), y.shape()),
                ));
            }
        }
        Ok(Self { inputs, targets })
    }
}

pub fn task_data(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut target_rng = root.fork(TARGET_STREAM);
    let hidden = BlockParams::random(spec.kind.target_kind(), spec.channels, spec.reduction(), &mut target_rng)?;
    let mut input_rng = root.fork(INPUT_STREAM);
    let shape = [spec.channels, spec.height, spec.width];
    let inputs = (0..spec.batch)
        .map(|_| input_rng.uniform_tensor(&shape, -1.0, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let targets = inputs
        .iter()
        .map(|x| Ok(forward(&hidden, x)?.output))
        .collect::<Result<Vec<_>>>()?;
    TaskData::new(inputs, targets)
}

/// Trainable starting point for `kind` on this task (γ = 0).
pub fn initial_params(spec: &TaskSpec, kind: BlockKind) -> Result<BlockParams> {
    spec.validate()?;
    BlockParams::init(kind, spec.channels, spec.reduction(), &mut Rng::new(spec.seed).fork(MODEL_STREAM))
}

/// Batch-mean MSE and its gradient for every parameter tensor.
pub fn loss_and_grads(params: &BlockParams, data: &TaskData) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let pv = param_leaves(&mut tape, params)?;
    let mut total = None;
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let out = record_forward(&mut tape, params, &pv, xv)?;
        let l = tape.mse(out, yv)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / data.inputs.len() as f64)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, pv.iter().map(|v| grads[v].clone()).collect()))
}

pub fn batch_loss(params: &BlockParams, data: &TaskData) -> Result<f64> {
    Ok(loss_and_grads(params, data)?.0)
}

fn sgd_step(params: &BlockParams, grads: &[Tensor], lr: f64) -> Result<BlockParams> {
    let updated = params
        .named_tensors()?
        .into_iter()
        .zip(grads)
        .map(|((_, p), g)| tensor::sub(&p, &tensor::scale(g, lr)?))
        .collect::<Result<Vec<_>>>()?;
    params.with_tensors(&updated)
}

fn diverged(step: usize, loss: f64, losses: Vec<f64>) -> Error {
    Error::Diverged {
        step,
        loss,
        report: Box::new(TrainReport::from_losses(losses)),
    }
}

/// Runs `steps` SGD updates from `params`, returning the trained parameters.
/// A loss above [`DIVERGENCE_LOSS`], or any non-finite value, aborts with
/// the curve so far.
pub fn train(params: BlockParams, data: &TaskData, steps: usize, lr: f64) -> Result<(BlockParams, TrainReport)> {
    let mut params = params;
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grads) = match loss_and_grads(&params, data) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(diverged(step, f64::INFINITY, losses)),
            Err(e) => return Err(e),
        };
        if loss.is_nan() || loss > DIVERGENCE_LOSS {
            return Err(diverged(step, loss, losses));
        }
        losses.push(loss);
        if step == steps {
            break;
        }
        params = match sgd_step(&params, &grads, lr) {
            Ok(p) => p,
            Err(Error::NonFinite { .. }) => return Err(diverged(step + 1, f64::INFINITY, losses)),
            Err(e) => return Err(e),
        };
    }
    Ok((params, TrainReport::from_losses(losses)))
}

/// Trains a fresh `kind` block (γ = 0 start) on the task described by `spec`.
pub fn run_task(spec: &TaskSpec, kind: BlockKind) -> Result<TrainReport> {
    let data = task_data(spec)?;
    let params = initial_params(spec, kind)?;
    Ok(train(params, &data, spec.steps, spec.lr)?.1)
}

/// Runs independent tasks on up to `threads` workers; results keep the
/// order of `specs`.
pub fn run_many(specs: &[TaskSpec], kind: BlockKind, threads: usize) -> Vec<Result<TrainReport>> {
    if specs.is_empty() {
        return Vec::new();
    }
    let chunk = specs.len().div_ceil(threads.clamp(1, specs.len()));
    std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| run_task(s, kind)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("training worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: TaskKind, seed: u64) -> TaskSpec {
        TaskSpec {
            steps: 20,
            ..TaskSpec::new(kind, 4, 3, 3, seed)
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let spec = small(TaskKind::FullMix, 5);
        let a = run_task(&spec, BlockKind::Fla).unwrap();
        let b = run_task(&spec, BlockKind::Fla).unwrap();
        assert_eq!(a.losses.len(), 21);
        assert!(a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn identity_task_is_a_no_op() {
        let spec = small(TaskKind::FullMix, 1);
        let inputs = task_data(&spec).unwrap().inputs;
        let data = TaskData::new(inputs.clone(), inputs).unwrap();
        for kind in BlockKind::ALL {
            let p = initial_params(&spec, kind).unwrap();
            let (trained, report) = train(p.clone(), &data, 5, 0.5).unwrap();
            assert_eq!(report.initial_loss(), 0.0, "{kind}");
            assert!(report.losses.iter().all(|&l| l == 0.0));
            assert_eq!(report.ratio, 1.0);
            assert_eq!(trained, p);
        }
    }

    #[test]
    fn first_step_decreases_loss() {
        for task in TaskKind::ALL {
            let spec = small(task, 9);
            let data = task_data(&spec).unwrap();
            for kind in BlockKind::ALL {
                let p = initial_params(&spec, kind).unwrap();
                let before = batch_loss(&p, &data).unwrap();
                let mut lr = 1.0;
                let mut decreased = false;
                for _ in 0..=10 {
                    let after = train(p.clone(), &data, 1, lr).map(|r| r.1.final_loss());
                    if matches!(after, Ok(a) if a < before) {
                        decreased = true;
                        break;
                    }
                    lr /= 2.0;
                }
                assert!(decreased, "{task} {kind}");
            }
        }
    }

    #[test]
    fn divergence_returns_partial_report() {
        let spec = TaskSpec {
            lr: 1e9,
            ..small(TaskKind::SpatialMix, 3)
        };
        match run_task(&spec, BlockKind::SpatialNl) {
            Err(Error::Diverged { step, report, .. }) => {
                assert!(step >= 1);
                assert_eq!(report.losses.len(), step);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let r = TrainReport::from_losses(vec![2.0, 0.5]);
        assert_eq!(r.to_csv(), "step,loss\n0,2.0\n1,0.5\n");
        assert_eq!(r.ratio, 0.25);
        assert_eq!(r.steps, 1);
    }

    #[test]
    fn run_many_keeps_order() {
        let specs: Vec<_> = (0..3).map(|s| small(TaskKind::ChannelMix, s)).collect();
        let many = run_many(&specs, BlockKind::ChannelNl, 2);
        for (spec, r) in specs.iter().zip(many) {
            assert_eq!(r.unwrap(), run_task(spec, BlockKind::ChannelNl).unwrap());
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = small(TaskKind::FullMix, 0);
        spec.lr = 0.0;
        assert!(run_task(&spec, BlockKind::Fla).is_err());
        assert!("mix".parse::<TaskKind>().is_err());
        assert_eq!("full_mix".parse::<TaskKind>().unwrap(), TaskKind::FullMix);
    }
}
