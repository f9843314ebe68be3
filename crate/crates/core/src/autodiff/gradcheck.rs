//! Central finite differences against the tape's reverse pass.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    Ok(v)
}

/// Max relative error over every coordinate of every input.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        if !analytic.is_finite() {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
        for j in 0..inputs[k].len() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + h;
            let fp = eval(&f, &probe)?;
            probe[k].data_mut()[j] = x0 - h;
            let fm = eval(&f, &probe)?;
            probe[k].data_mut()[j] = x0;
            worst = worst.max(rel_err((fp - fm) / (2.0 * h), analytic.data()[j]));
        }
    }
    Ok(worst)
}

/// Max relative error over the given `(parameter, flat index)` coordinates of
/// a loss built from `store`.
pub fn gradient_check_params<F>(store: &mut ParamStore, f: F, coords: &[(ParamId, usize)], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?.for_params(&tape, store);
    let mut worst = 0.0f64;
    let objective = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::no_grad();
        let o = f(&mut t, store)?;
        let v = t.value(o).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("gradient check objective".into()))
        }
    };
    for &(id, j) in coords {
        let x0 = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = x0 + h;
        let fp = objective(store)?;
        store.value_mut(id).data_mut()[j] = x0 - h;
        let fm = objective(store)?;
        store.value_mut(id).data_mut()[j] = x0;
        let a = grads[id.0].as_ref().map_or(0.0, |g| g.data()[j]);
        worst = worst.max(rel_err((fp - fm) / (2.0 * h), a));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.0, 5.5, -0.7]).unwrap();
        let err = gradient_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[4], 2.0), true);
        let c = tape.constant(Tensor::scalar(7.0));
        let z = tape.scale(x, 0.0);
        let s = tape.sum(z);
        let out = tape.add(s, c).unwrap();
        let g = tape.backward(out).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_rejected() {
        let x = Tensor::full(&[1], 0.0);
        let r = gradient_check(|t, v| Ok(t.scale(v[0], f64::INFINITY)), &[x], DEFAULT_STEP);
        assert!(r.is_err());
    }
}
