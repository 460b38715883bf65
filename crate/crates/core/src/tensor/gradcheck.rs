//! Central finite-difference gradient checking in 64-bit precision.

use serde::Serialize;

use super::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h^2).
    #[default]
    Central,
    /// Four-point central difference, truncation error O(h^4). Allows a
    /// larger step and so far less round-off on deep compositions.
    Central4,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub stencil: Stencil,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
    /// so entries whose true gradient is zero do not divide by zero.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            stencil: Stencil::Central,
            floor: 1e-6,
        }
    }
}

impl GradCheckOptions {
    /// Four-point stencil at step 1e-3.
    pub fn high_order() -> Self {
        GradCheckOptions {
            step: 1e-3,
            stencil: Stencil::Central4,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub value: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Compare tape gradients of the scalar `f` against central differences for
/// every non-frozen parameter in `params`.
///
/// `f` receives one var per parameter, in set order. Each evaluation builds a
/// fresh tape with owned copies of the (possibly perturbed) parameters, so the
/// closure may borrow anything that outlives `'c`.
pub fn check_gradients<'c, F>(f: F, params: &ParamSet<f64>, opts: GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape<'c, f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], track: bool| -> Result<(f64, Option<Vec<Option<Vec<f64>>>>)> {
        let mut tape: Tape<'c, f64> = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .zip(params.iter())
            .map(|(t, p)| tape.leaf(t.clone(), track && !p.frozen))
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::contract(format!(
                "gradient check needs a scalar-valued function, got shape {:?}",
                tape.shape(out)
            )));
        }
        let value = tape.scalar(out);
        if !track {
            return Ok((value, None));
        }
        let mut g = tape.backward(out)?;
        Ok((value, Some(vars.iter().map(|&v| g.take(v)).collect())))
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|p| p.tensor.clone()).collect();
    let (value, analytic) = eval(&values, true)?;
    let analytic = analytic.expect("tracked evaluation returns gradients");

    let mut report = GradReport {
        value,
        params: Vec::new(),
    };
    for (pi, p) in params.iter().enumerate() {
        if p.frozen {
            continue;
        }
        let n = p.tensor.numel();
        let zeros = vec![0.0; n];
        let grad = analytic[pi].as_deref().unwrap_or(&zeros);
        let mut check = ParamCheck {
            name: p.name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            entries: n,
        };
        for i in 0..n {
            let orig = values[pi].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                values[pi].data_mut()[i] = orig + offset;
                let (v, _) = eval(&values, false)?;
                values[pi].data_mut()[i] = orig;
                Ok(v)
            };
            let h = opts.step;
            let numeric = match opts.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::Central4 => (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h),
            };
            let abs = (grad[i] - numeric).abs();
            let rel = abs / grad[i].abs().max(numeric.abs()).max(opts.floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor<f64>) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert(name, t).unwrap();
        ps
    }

    #[test]
    fn sum_of_squares() {
        let ps = single("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let r = check_gradients(|t, v| t.sum_squares(v[0]), &ps, GradCheckOptions::default()).unwrap();
        assert!((r.value - 5.0).abs() < 1e-12);
        assert!(r.max_rel_error() < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let ps = single("x", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let r = check_gradients(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &ps,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let ps = single("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let r = check_gradients(|_, v| Ok(v[0]), &ps, GradCheckOptions::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let ps = single("x", Tensor::from_f64(&[2], &[0.3, -0.8]).unwrap());
        let r = check_gradients(
            |t, v| {
                let x = v[0];
                // The value depends on x but the tape only sees a detached copy.
                let c = t.constant(t.value(x).clone());
                let s = t.sum(c);
                let z = t.scale(x, 0.0);
                let zs = t.sum(z);
                t.add(s, zs)
            },
            &ps,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error() > 0.5);
    }
}
