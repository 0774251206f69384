use super::tape::{backward, Tape, Var};
use super::tensor::Tensor;
use crate::error::{MariError, Result};

/// Largest relative gap between tape gradients and central differences.
///
/// For each coordinate the relative error is
/// `|analytic − numeric| / max(1, |numeric|)`. `f` receives the parameters as
/// trainable leaves on a fresh tape and must return a scalar node.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(params)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(MariError::NonFinite(
            "function value at the unperturbed point".into(),
        ));
    }
    let grads = backward(&tape, out)?;
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("trainable gradient");
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let (t1, _, o1) = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let (t2, _, o2) = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let (fp, fm) = (t1.value(o1).item(), t2.value(o2).item());
            if !fp.is_finite() || !fm.is_finite() {
                return Err(MariError::NonFinite(format!(
                    "parameter {pi} coordinate {ci}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * step);
            let rel = (analytic.data()[ci] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        let a = Tensor::matrix(3, 3, vec![2., 0.5, 0., 0.5, 1., 0.3, 0., 0.3, 4.]).unwrap();
        let x = Tensor::matrix(3, 1, vec![0.2, -1.0, 0.7]).unwrap();
        let err = grad_check(
            |t, p| {
                let a = t.constant(a.clone());
                let ax = t.matmul(a, p[0]);
                let xt = t.transpose(p[0]);
                let q = t.matmul(xt, ax);
                Ok(t.sum(q))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(4.0))),
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nonfinite_names_the_coordinate() {
        let err = grad_check(
            |t, p| {
                let s = t.sqrt(p[0]);
                Ok(t.sum(s))
            },
            &[Tensor::vector(vec![1.0, 0.0])],
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }
}
