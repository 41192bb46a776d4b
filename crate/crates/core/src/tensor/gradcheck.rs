//! Central finite-difference gradient checks (always run in 64-bit mode).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{with_precision, Graph, ParamStore, Precision, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Largest absolute analytic gradient seen; zero means the check was vacuous.
    pub max_abs_grad: f64,
}

/// Denominator floor for parameter probes. Some parameters have a gradient
/// that is identically zero (key biases under softmax shift invariance), and
/// central differences report ~1e-10 of roundoff there.
const PARAM_FLOOR: f64 = 1e-5;

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape(format!("grad_check needs a scalar output, got {} values", v.len())));
    }
    if !v[0].is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(v[0])
}

/// Max relative error between the analytic gradient of `f` at `input` and
/// central differences with the given `step`.
pub fn grad_check<F>(f: F, input: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(&ParamStore::new(), f, input, step)
}

/// [`grad_check`] for a function that also reads model parameters (held fixed).
pub fn grad_check_with<F>(store: &ParamStore, f: F, input: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    with_precision(Precision::F64, || {
        let mut g = Graph::with_params(store);
        let x = g.input(input);
        let out = f(&mut g, x)?;
        eval_scalar(&g, out)?;
        let grads = g.backward(out);
        let analytic = grads.get(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);

        let eval_at = |t: &Tensor| -> Result<f64> {
            let mut g = Graph::with_params(store);
            let x = g.input(t);
            let out = f(&mut g, x)?;
            eval_scalar(&g, out)
        };
        let mut worst = 0.0f64;
        let mut probe = input.clone();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = eval_at(&probe)?;
            probe.data_mut()[i] = orig - step;
            let minus = eval_at(&probe)?;
            probe.data_mut()[i] = orig;
            worst = worst.max(rel_error(a, (plus - minus) / (2.0 * step), 1e-8));
        }
        Ok(worst)
    })
}

/// Gradient check of a scalar function of model parameters.
///
/// At most `max_entries` scalar parameters are probed; when the model has
/// more, a seeded random subset is used.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    with_precision(Precision::F64, || {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        eval_scalar(&g, out)?;
        let grads = g.backward(out);
        let mut gs = super::GradStore::zeros_like(store);
        g.accumulate_param_grads(&grads, &mut gs, 1.0);
        drop(g);

        let mut coords: Vec<(super::ParamId, usize)> = store
            .ids()
            .flat_map(|id| (0..store.get(id).len()).map(move |j| (id, j)))
            .collect();
        if coords.len() > max_entries {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), max_entries).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }

        let mut probe = store.clone();
        let mut worst = 0.0f64;
        let mut max_abs = 0.0f64;
        for &(id, j) in &coords {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + step;
            let plus = {
                let mut g = Graph::with_params(&probe);
                let out = f(&mut g)?;
                eval_scalar(&g, out)?
            };
            probe.get_mut(id).data_mut()[j] = orig - step;
            let minus = {
                let mut g = Graph::with_params(&probe);
                let out = f(&mut g)?;
                eval_scalar(&g, out)?
            };
            probe.get_mut(id).data_mut()[j] = orig;
            let a = gs.get(id)[j];
            max_abs = max_abs.max(a.abs());
            worst = worst.max(rel_error(a, (plus - minus) / (2.0 * step), PARAM_FLOOR));
        }
        Ok(GradCheckReport { max_rel_error: worst, checked: coords.len(), max_abs_grad: max_abs })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(
            |g, x| {
                let y = g.scale(x, 3.0);
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        );
        assert!(err.unwrap() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(vec![0.5, -0.5]);
        let err = grad_check(
            |g, _x| Ok(g.constant(&Tensor::scalar(4.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let x = Tensor::from_vec(vec![1.0]);
        let err = grad_check(|g, x| Ok(g.scale(x, f64::INFINITY)), &x, 1e-5);
        assert!(matches!(err, Err(Error::NonFinite)));
    }
}
