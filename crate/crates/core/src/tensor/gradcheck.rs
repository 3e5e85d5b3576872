use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor], requires_grad: bool) -> Result<(Tape<'static>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<'static>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), requires_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NotScalar(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

/// Finite-difference formula used by [`grad_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h^2).
    #[default]
    Central2,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, truncation error O(h^4).
    /// Permits a larger `h`, which lowers round-off noise on gradients
    /// that are exactly zero.
    Central4,
}

/// Checks every element of every input with the two-point central stencil.
/// `f` must be deterministic and scalar-valued (seed any dropout inside `f`
/// identically on each call).
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'static>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, eps, Stencil::Central2)
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor], eps: f64, stencil: Stencil) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'static>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut perturbed = inputs.to_vec();
    let at = |perturbed: &mut Vec<Tensor>, which: usize, k: usize, x: f64| -> Result<f64> {
        perturbed[which].data_mut()[k] = x;
        let (t, _, o) = evaluate(&f, perturbed, false)?;
        Ok(t.value(o).data()[0])
    };
    for (which, grads) in analytic.iter().enumerate() {
        for (k, &grad) in grads.iter().enumerate() {
            let orig = perturbed[which].data()[k];
            let numeric = match stencil {
                Stencil::Central2 => {
                    let plus = at(&mut perturbed, which, k, orig + eps)?;
                    let minus = at(&mut perturbed, which, k, orig - eps)?;
                    (plus - minus) / (2.0 * eps)
                }
                Stencil::Central4 => {
                    let p1 = at(&mut perturbed, which, k, orig + eps)?;
                    let m1 = at(&mut perturbed, which, k, orig - eps)?;
                    let p2 = at(&mut perturbed, which, k, orig + 2.0 * eps)?;
                    let m2 = at(&mut perturbed, which, k, orig - 2.0 * eps)?;
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
                }
            };
            perturbed[which].data_mut()[k] = orig;

            let err = relative_error(grad, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, k, grad, numeric));
            }
        }
    }
    Ok(report)
}
