use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Discrepancy summary for one checked tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub h: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max)
    }

    /// Entry holding the overall worst relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

fn eval_loss<F>(values: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item().ok_or_else(|| {
        Error::Backward(format!(
            "loss must be a scalar, got shape {:?}",
            tape.value(loss).shape()
        ))
    })?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check probe",
            index: 0,
        });
    }
    Ok(value)
}

/// Compares tape gradients of `f` against central differences for every
/// coordinate of every named input.
///
/// `f` receives the leaves in the order of `inputs` and must return a scalar.
pub fn grad_check<F>(inputs: &[(String, Tensor)], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let analytic = tape.backward(loss)?;

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut params = Vec::with_capacity(inputs.len());
    for (slot, ((name, original), var)) in inputs.iter().zip(&vars).enumerate() {
        let grad = &analytic[var];
        let mut check = ParamCheck {
            name: name.clone(),
            coords: original.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..original.len() {
            let x0 = original.data()[i];
            let numeric = central_difference(
                |x| {
                    let mut probe = values.clone();
                    probe[slot] = original.with_value(i, x)?;
                    eval_loss(&probe, &f)
                },
                x0,
                h,
            )?;
            let a = grad.data()[i];
            let rel = rel_err(a, numeric);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        values[slot] = original.clone();
        params.push(check);
    }
    Ok(GradCheckReport { h, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn rel_err_guards_zero() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_step() {
        let x = ("x".to_string(), Tensor::zeros(&[1]).unwrap());
        assert!(grad_check(std::slice::from_ref(&x), 0.0, |t, v| t.sum(v[0])).is_err());
        assert!(grad_check(&[x], f64::NAN, |t, v| t.sum(v[0])).is_err());
    }

    #[test]
    fn every_registered_op_passes() {
        let mut rng = Rng::new(77);
        let mut u = |shape: &[usize]| rng.uniform_tensor(shape, -1.0, 1.0).unwrap();
        type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);
        let cases: Vec<Case> = vec![
            ("matmul", vec![u(&[2, 3, 4]), u(&[2, 4, 2])], Box::new(|t, v| {
                let m = t.matmul(v[0], v[1])?;
                t.sum_squares(m)
            })),
            ("transpose", vec![u(&[2, 3, 4]), u(&[2, 4, 3])], Box::new(|t, v| {
                let tr = t.transpose(v[0])?;
                let p = t.mul(tr, v[1])?;
                t.sum_squares(p)
            })),
            ("softmax", vec![u(&[2, 3, 4]), u(&[2, 3, 4])], Box::new(|t, v| {
                let s = t.softmax(v[0], 1)?;
                let p = t.mul(s, v[1])?;
                t.sum_squares(p)
            })),
            ("pooling", vec![u(&[2, 3, 4])], Box::new(|t, v| {
                let r = t.avg_pool_rows(v[0])?;
                let c = t.avg_pool_cols(v[0])?;
                let a = t.sum_squares(r)?;
                let b = t.sum_squares(c)?;
                t.add(a, b)
            })),
            ("linear", vec![u(&[3, 2, 2]), u(&[2, 3]), u(&[2])], Box::new(|t, v| {
                let y = t.linear_channels(v[0], v[1], v[2])?;
                t.sum_squares(y)
            })),
            ("stack", vec![u(&[2, 3, 4]), u(&[3, 2, 4]), u(&[4, 2, 3])], Box::new(|t, v| {
                let h = t.slice_stack_h(v[0])?;
                let w = t.slice_stack_w(v[0])?;
                let ph = t.mul(h, v[1])?;
                let pw = t.mul(w, v[2])?;
                let uh = t.unstack_h(ph)?;
                let uw = t.unstack_w(pw)?;
                let s = t.add(uh, uw)?;
                t.sum_squares(s)
            })),
            ("concat_narrow", vec![u(&[2, 2, 3]), u(&[1, 2, 3]), u(&[2, 2, 3])], Box::new(|t, v| {
                let c = t.concat(&[v[0], v[1]], 0)?;
                let n = t.narrow(c, 0, 1, 2)?;
                let m = t.mul(n, v[2])?;
                t.sum_squares(m)
            })),
            ("repeat_reshape", vec![u(&[2, 3]), u(&[3, 2, 3])], Box::new(|t, v| {
                let r = t.repeat_leading(v[0], 3)?;
                let p = t.mul(r, v[1])?;
                let f = t.reshape(p, &[18])?;
                t.sum_squares(f)
            })),
            ("residual_sub_scale", vec![u(&[2, 3]), u(&[2, 3]), u(&[1])], Box::new(|t, v| {
                let r = t.residual(v[0], v[1], v[2])?;
                let d = t.sub(r, v[1])?;
                let s = t.scale(d, 0.7)?;
                let q = t.mul(s, s)?;
                t.sum(q)
            })),
            ("mse", vec![u(&[3, 2]), u(&[3, 2])], Box::new(|t, v| t.mse(v[0], v[1]))),
        ];
        for (name, tensors, f) in cases {
            let named: Vec<(String, Tensor)> = tensors
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("{name}.{i}"), t))
                .collect();
            let report = grad_check(&named, 1e-4, f).unwrap();
            assert_eq!(report.params.len(), named.len());
            assert!(report.passed(1e-5), "{name}: {report:?}");
        }
    }

    #[test]
    fn branch_gradients_add() {
        let mut rng = Rng::new(3);
        let xv = rng.uniform_tensor(&[2, 3], -1.0, 1.0).unwrap();
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let a = t.sum_squares(x).unwrap();
            let s = t.softmax(x, 1).unwrap();
            let s = t.mul(s, x).unwrap();
            let b = t.sum(s).unwrap();
            let loss = match which {
                0 => a,
                1 => b,
                _ => t.add(a, b).unwrap(),
            };
            t.backward(loss).unwrap()[&x].clone()
        };
        let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            assert!((ga.data()[i] + gb.data()[i] - gs.data()[i]).abs() < 1e-14);
        }
    }
}
