use crate::scalar::Scalar;

use super::{AutodiffError, Graph, Mode, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh exact-mode graph and one input node per entry of
/// `point`, and must return a scalar node. The result is the maximum over all
/// input coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<S, F>(f: F, point: &[Tensor<S>], epsilon: S) -> Result<S, AutodiffError>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::with_mode(Mode::Exact);
    let inputs: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &inputs)?;
    let grads = g.backward(out)?;

    let mut worst = S::zero();
    for (slot, t) in point.iter().enumerate() {
        let analytic = grads.get(inputs[slot]);
        for j in 0..t.len() {
            let numeric = central_difference(&f, point, slot, j, epsilon)?;
            let a = analytic.data()[j];
            let denom = S::one().max(a.abs()).max(numeric.abs());
            let err = (a - numeric).abs() / denom;
            if !err.is_finite() {
                return Err(AutodiffError::NonFiniteCheck);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// `(f(x + e) - f(x - e)) / 2e` along one coordinate.
pub fn central_difference<S, F>(f: &F, point: &[Tensor<S>], slot: usize, index: usize, epsilon: S) -> Result<S, AutodiffError>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |delta: S| -> Result<S, AutodiffError> {
        let mut g = Graph::with_mode(Mode::Exact);
        let inputs: Vec<Var> = point
            .iter()
            .enumerate()
            .map(|(s, t)| {
                let mut t = t.clone();
                if s == slot {
                    t.data_mut()[index] += delta;
                }
                g.input(t)
            })
            .collect();
        let out = f(&mut g, &inputs).map_err(|_| AutodiffError::NonFiniteCheck)?;
        let v = g.item(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFiniteCheck)
        }
    };
    let two = S::one() + S::one();
    Ok((eval(epsilon)? - eval(-epsilon)?) / (two * epsilon))
}
