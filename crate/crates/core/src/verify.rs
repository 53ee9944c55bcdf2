//! Seeded verification suites with one summary line each.
//!
//! ```text
//! suite=oracle status=pass cases=500 max_err=8.881784197001252e-16 tol=1e-10
//! ```
//!
//! The report depends only on the seed and the configuration.

use std::fmt::Write as _;

use crate::blocks::{
    default_reduction, forward_with, grad_check_block, BlockKind, BlockParams, ForwardOptions, MergeMode,
};
use crate::error::Result;
use crate::oracle::oracle_forward;
use crate::tensor::{Rng, Tensor};

pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const STOCHASTICITY_TOLERANCE: f64 = 1e-9;
pub const UNIFORM_TOLERANCE: f64 = 1e-12;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const GRADCHECK_STEP: f64 = 1e-4;
pub const DEFAULT_CASES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Normalize attention over the wrong axis.
    CorruptSoftmaxAxis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random cases per block kind for the randomized suites.
    pub cases_per_kind: usize,
    pub fault: Fault,
}

impl VerifyConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            cases_per_kind: DEFAULT_CASES,
            fault: Fault::None,
        }
    }

    fn options(&self) -> ForwardOptions {
        ForwardOptions {
            corrupt_softmax_axis: self.fault == Fault::CorruptSoftmaxAxis,
            ..ForwardOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error; `0` for bitwise suites that passed.
    pub max_err: f64,
    pub tolerance: f64,
    /// First failing case, if any.
    pub failure: Option<String>,
}

impl SuiteResult {
    pub fn summary_line(&self) -> String {
        let mut s = format!(
            "suite={} status={} cases={} max_err={:?} tol={:?}",
            self.name,
            if self.passed { "pass" } else { "fail" },
            self.cases,
            self.max_err,
            self.tolerance
        );
        if let Some(f) = &self.failure {
            let _ = write!(s, " first_failure=\"{f}\"");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }

    /// Summary lines plus a closing overall line, LF-terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for suite in &self.suites {
            s.push_str(&suite.summary_line());
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "overall status={} seed={} suites={}",
            if self.passed() { "pass" } else { "fail" },
            self.seed,
            self.suites.len()
        );
        s
    }
}

/// Random small case: shape with `C ≤ 6`, `H, W ≤ 5`, a reduction that
/// divides `C`, random parameters with nonzero γ and a uniform input.
pub fn random_case(kind: BlockKind, rng: &mut Rng) -> Result<(BlockParams, Tensor)> {
    let c = rng.range(1, 6);
    let h = rng.range(1, 5);
    let w = rng.range(1, 5);
    let divisors: Vec<usize> = (1..=c).filter(|&r| c.is_multiple_of(r)).collect();
    let r = divisors[rng.range(0, divisors.len() - 1)];
    let params = BlockParams::random(kind, c, r, rng)?;
    let x = rng.uniform_tensor(&[c, h, w], -1.0, 1.0)?;
    Ok((params, x))
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    max_err: f64,
    failure: Option<String>,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            max_err: 0.0,
            failure: None,
        }
    }

    /// Records one case; `ok` decides pass/fail, `err` feeds the maximum.
    fn record(&mut self, ok: bool, err: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if err.is_nan() {
            self.max_err = f64::NAN;
        } else if !self.max_err.is_nan() {
            self.max_err = self.max_err.max(err);
        }
        if !ok && self.failure.is_none() {
            self.failure = Some(what());
        }
    }

    fn fail(&mut self, what: String) {
        self.record(false, f64::NAN, || what);
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            passed: self.failure.is_none(),
            cases: self.cases,
            max_err: self.max_err,
            tolerance: self.tolerance,
            failure: self.failure,
        }
    }
}

fn describe(kind: BlockKind, case: usize, x: &Tensor) -> String {
    format!("{kind} case {case} shape {:?}", x.shape())
}

fn oracle_suite(cfg: &VerifyConfig, rng: &mut Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("oracle", ORACLE_TOLERANCE);
    for kind in BlockKind::ALL {
        for case in 0..cfg.cases_per_kind {
            let (p, x) = random_case(kind, rng)?;
            let fast = forward_with(&p, &x, &cfg.options())?.output;
            let slow = oracle_forward(&p, &x)?;
            let err = fast.max_abs_diff(&slow).unwrap_or(f64::NAN);
            t.record(err <= ORACLE_TOLERANCE, err, || describe(kind, case, &x));
        }
    }
    Ok(t.finish())
}

fn stochasticity_suite(cfg: &VerifyConfig, rng: &mut Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("stochasticity", STOCHASTICITY_TOLERANCE);
    for kind in BlockKind::ALL {
        for case in 0..cfg.cases_per_kind {
            let (p, x) = random_case(kind, rng)?;
            let trace = forward_with(&p, &x, &cfg.options())?;
            let err = trace
                .attention
                .iter()
                .map(|a| a.max_stochasticity_error())
                .fold(0.0, f64::max);
            t.record(err <= STOCHASTICITY_TOLERANCE, err, || describe(kind, case, &x));
        }
    }
    Ok(t.finish())
}

/// With identity linear layers a constant input makes every FLA logit
/// equal, so the attention is exactly uniform.
fn uniform_suite(cfg: &VerifyConfig, rng: &mut Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("uniform_attention", UNIFORM_TOLERANCE);
    for case in 0..cfg.cases_per_kind {
        let (p, x) = random_case(BlockKind::Fla, rng)?;
        let p = BlockParams::init(BlockKind::Fla, p.channels(), 1, rng)?.with_all_gammas(rng.uniform(0.5, 1.5));
        let value = rng.uniform(-1.0, 1.0);
        let x = Tensor::full(x.shape(), value)?;
        let c = p.channels() as f64;
        let trace = forward_with(&p, &x, &cfg.options())?;
        let err = trace
            .attention
            .iter()
            .flat_map(|a| a.tensor.data().iter())
            .map(|&a| (a - 1.0 / c).abs())
            .fold(0.0, f64::max);
        t.record(err <= UNIFORM_TOLERANCE, err, || describe(BlockKind::Fla, case, &x));
    }
    Ok(t.finish())
}

fn identity_suite(cfg: &VerifyConfig, rng: &mut Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("identity", 0.0);
    for kind in BlockKind::ALL {
        for case in 0..cfg.cases_per_kind {
            let (p, x) = random_case(kind, rng)?;
            let out = forward_with(&p.with_all_gammas(0.0), &x, &cfg.options())?.output;
            let ok = out.bit_eq(&x);
            let err = out.max_abs_diff(&x).unwrap_or(f64::NAN);
            t.record(ok, err, || describe(kind, case, &x));
        }
    }
    Ok(t.finish())
}

/// Square FLA inputs through the merged batch and the two-group path.
fn merge_suite(cfg: &VerifyConfig, rng: &mut Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("merge", 0.0);
    for case in 0..cfg.cases_per_kind {
        let (p, x) = random_case(BlockKind::Fla, rng)?;
        let s = x.shape()[1];
        let x = rng.uniform_tensor(&[p.channels(), s, s], -1.0, 1.0)?;
        let run = |merge| {
            forward_with(
                &p,
                &x,
                &ForwardOptions {
                    merge,
                    ..cfg.options()
                },
            )
        };
        let merged = run(MergeMode::Merged)?.output;
        let grouped = run(MergeMode::Grouped)?.output;
        let err = merged.max_abs_diff(&grouped).unwrap_or(f64::NAN);
        t.record(merged.bit_eq(&grouped), err, || describe(BlockKind::Fla, case, &x));
    }
    Ok(t.finish())
}

fn gradcheck_suite(rng: &mut Rng) -> Result<SuiteResult> {
    let mut t = Tally::new("gradcheck", GRADCHECK_TOLERANCE);
    let c = 4;
    for kind in BlockKind::ALL {
        let p = BlockParams::random(kind, c, default_reduction(c), rng)?;
        let x = rng.uniform_tensor(&[c, 3, 3], -1.0, 1.0)?;
        match grad_check_block(&p, &x, GRADCHECK_STEP) {
            Ok(report) => {
                let err = report.max_rel_err();
                t.record(report.passed(GRADCHECK_TOLERANCE), err, || {
                    let worst = report.worst().map(|w| w.name.as_str()).unwrap_or("-");
                    format!("{kind} worst parameter {worst}")
                });
            }
            Err(e) => t.fail(format!("{kind}: {e}")),
        }
    }
    Ok(t.finish())
}

/// Runs every suite; each draws from its own stream of the seed.
pub fn run_verify(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let root = Rng::new(cfg.seed);
    let suites = vec![
        oracle_suite(cfg, &mut root.fork(1))?,
        stochasticity_suite(cfg, &mut root.fork(2))?,
        uniform_suite(cfg, &mut root.fork(3))?,
        identity_suite(cfg, &mut root.fork(4))?,
        merge_suite(cfg, &mut root.fork(5))?,
        gradcheck_suite(&mut root.fork(6))?,
    ];
    Ok(VerifyReport { seed: cfg.seed, suites })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64) -> VerifyConfig {
        VerifyConfig {
            cases_per_kind: 8,
            ..VerifyConfig::new(seed)
        }
    }

    #[test]
    fn clean_build_passes() {
        let r = run_verify(&quick(1)).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert_eq!(r.suites.len(), 6);
        assert!(r.to_text().ends_with("overall status=pass seed=1 suites=6\n"));
    }

    #[test]
    fn corrupted_softmax_axis_fails_stochasticity() {
        let cfg = VerifyConfig {
            fault: Fault::CorruptSoftmaxAxis,
            ..quick(2)
        };
        let r = run_verify(&cfg).unwrap();
        assert!(!r.passed());
        let s = r.suite("stochasticity").unwrap();
        assert!(!s.passed);
        assert!(s.summary_line().contains("status=fail"));
    }

    #[test]
    fn report_is_deterministic() {
        assert_eq!(run_verify(&quick(7)).unwrap().to_text(), run_verify(&quick(7)).unwrap().to_text());
    }

    #[test]
    fn random_cases_respect_bounds() {
        let mut rng = Rng::new(0);
        for _ in 0..200 {
            let (p, x) = random_case(BlockKind::SpatialNl, &mut rng).unwrap();
            let s = x.shape();
            assert!((1..=6).contains(&s[0]) && (1..=5).contains(&s[1]) && (1..=5).contains(&s[2]));
            assert_eq!(s[0] % p.reduction().unwrap(), 0);
        }
    }
}
