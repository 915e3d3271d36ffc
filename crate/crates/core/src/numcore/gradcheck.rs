use super::{NumError, Tape, Tensor, Var};

/// Outcome of a central-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Runs `f` on a fresh tape with `params` registered as trainable leaves and
/// returns the loss value with its analytic gradients.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>), NumError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NumError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let value = loss.item()?;
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|v| grads.wrt(*v)).collect()))
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, NumError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NumError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let v = f(&tape, &vars)?.item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumError::NonFinite {
            op: "grad_check",
            index: 0,
        })
    }
}

/// Max over all parameter entries of
/// `|analytic − cd| / max(|analytic|, |cd|, 1e-8)` where
/// `cd = (f(θ+eps) − f(θ−eps)) / (2·eps)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, NumError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, NumError>,
{
    if !(eps > 0.0) {
        return Err(NumError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (_, analytic) = analytic_gradients(&f, params)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut shifted = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.len() {
            shifted[pi] = param.perturbed(ei, eps);
            let plus = evaluate(&f, &shifted)?;
            shifted[pi] = param.perturbed(ei, -eps);
            let minus = evaluate(&f, &shifted)?;
            shifted[pi] = param.clone();

            let cd = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::vector(&[0.3, -1.7, 2.2, 0.05]).unwrap();
        let r = grad_check(|_, p| p[0].mul(p[0])?.sum(), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::vector(&[1.0]).unwrap();
        assert!(grad_check(|_, p| p[0].sum(), &[x], 0.0).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::vector(&[700.0]).unwrap();
        // exp(700 ± eps) is finite, exp(exp(700)) is not
        let res = grad_check(|_, p| p[0].exp()?.exp()?.sum(), &[x], 1e-5);
        assert!(matches!(res, Err(NumError::NonFinite { .. })));
    }
}
