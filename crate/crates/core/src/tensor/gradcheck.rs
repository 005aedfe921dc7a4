use super::{Graph, Result, Tensor, TensorError, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, if any was checked.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree (a kink such as relu at 0).
    pub excluded: Vec<usize>,
}

impl GradCheckReport {
    pub fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            excluded: Vec::new(),
        }
    }

    /// Folds in one coordinate; `None` marks it as excluded.
    pub fn record(&mut self, index: usize, rel: Option<f64>) {
        match rel {
            None => self.excluded.push(index),
            Some(rel) => {
                self.checked += 1;
                if rel > self.max_rel_error || self.worst_index.is_none() {
                    self.max_rel_error = self.max_rel_error.max(rel);
                    self.worst_index = Some(index);
                }
            }
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self::new()
    }
}

/// Relative error of one coordinate:
/// `|analytic − central| / max(|analytic|, |central|, 1e-8)`.
/// Returns `None` when the one-sided slopes differ by more than 10%,
/// which marks a nondifferentiable point.
pub fn compare(analytic: f64, f0: f64, fp: f64, fm: f64, eps: f64) -> Option<f64> {
    let forward = (fp - f0) / eps;
    let backward = (f0 - fm) / eps;
    let jump = (forward - backward).abs();
    if jump > 1e-7 && jump > 0.1 * forward.abs().max(backward.abs()) {
        return None;
    }
    let central = (fp - fm) / (2.0 * eps);
    Some((analytic - central).abs() / analytic.abs().max(central.abs()).max(1e-8))
}

/// Max relative error between backward() and central differences of `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_report(f, x, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::invalid("grad_check", format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let loss = f(&mut g, xv)?;
    let analytic = g.backward(loss)?.wrt(xv);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.input(t)?;
        let out = f(&mut g, v)?;
        let val = g.value(out).item();
        if !val.is_finite() {
            return Err(TensorError::NonFinite {
                op: "grad_check",
                index: 0,
            });
        }
        Ok(val)
    };

    let f0 = eval(x.clone())?;
    let mut report = GradCheckReport::new();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        report.record(i, compare(analytic.data()[i], f0, fp, fm, eps));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let err = grad_check(|g, v| g.mul(v, v).and_then(|y| g.sum_all(y)), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::from_f64(&[3], &[0.0, 1.5, -2.0]).unwrap();
        let r = grad_check_report(|g, v| g.relu(v).and_then(|y| g.sum_all(y)), &x, 1e-5).unwrap();
        assert_eq!(r.excluded, vec![0]);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        // exp(x) forward with a detached copy: analytic gradient is missing.
        let x = Tensor::from_f64(&[2], &[0.3, -0.2]).unwrap();
        let err = grad_check(
            |g, v| {
                let detached = g.constant(g.value(v).clone())?;
                let e = g.exp(detached)?;
                let y = g.add(e, v)?;
                g.sum_all(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check(|g, v| g.sum_all(v), &x, 0.0).is_err());
    }
}
