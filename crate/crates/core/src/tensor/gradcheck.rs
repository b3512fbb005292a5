//! Finite-difference gradient oracle.
//!
//! `grad_check` compares the tape's analytic gradient of a scalar-valued map
//! against central differences, coordinate by coordinate. The numeric side
//! never touches the backward pass, so it stays independent of the code it
//! checks. Maps that draw randomness (dropout) must reseed themselves inside
//! the closure, otherwise the two perturbed evaluations see different noise.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Max over coordinates of |analytic - numeric| / max(1, |analytic|).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function at `x` with step `h`, restricted
/// to `coords` (all coordinates when `coords` is `None`).
pub fn central_difference<F>(
    mut f: F,
    x: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

fn analytic_grad<F>(f: &mut F, x: &Tensor) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut leaf = x.clone();
    leaf = leaf.with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&leaf);
    let loss = f(&mut tape, xv)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Dimension(format!(
            "grad_check needs a scalar-valued map, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    Ok(tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]))
}

fn forward_value<F>(f: &mut F, x: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let loss = f(&mut tape, xv)?;
    Ok(tape.value(loss)[0])
}

/// Compare the tape gradient of `f` at `x` against central differences over
/// every coordinate; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    grad_check_sampled(f, x, h, None)
}

/// As `grad_check` but restricted to a coordinate subset — the practical form
/// for large parameter tensors where probing every coordinate would be
/// quadratic in model size.
pub fn grad_check_sampled<F>(
    mut f: F,
    x: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&mut f, x)?;
    let numeric = central_difference(|probe| forward_value(&mut f, probe), x, h, coords)?;
    let picked: Vec<f64> = match coords {
        Some(c) => c.iter().map(|&i| analytic[i]).collect(),
        None => analytic,
    };
    Ok(max_rel_err(&picked, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng as _;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 4.0]).unwrap();
        let err = grad_check(|tape, xv| Ok(tape.sum_all(xv)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "rel err {err}");
    }

    #[test]
    fn quadratic_matches() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, xv| {
                let sq = tape.mul(xv, xv)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn sign_flip_is_detected() {
        // negative control: a wrong backward rule must be flagged
        let mut rng = rng_for(21, "gradcheck-negctl", &[]);
        let x = Tensor::new(vec![4], (0..4).map(|_| rng.gen::<f64>() + 0.5).collect()).unwrap();
        let f = |t: &Tensor| -> Result<f64> { Ok(t.data().iter().map(|v| v * v).sum()) };
        let numeric = central_difference(f, &x, 1e-5, None).unwrap();
        let wrong: Vec<f64> = x.data().iter().map(|v| -2.0 * v).collect();
        assert!(max_rel_err(&wrong, &numeric) > 1e-2);
        let right: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert!(max_rel_err(&right, &numeric) < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|tape, xv| Ok(tape.sum_all(xv)), &x, 0.0).is_err());
    }

    #[test]
    fn sampled_subset_matches_full() {
        let x = Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let full = grad_check(
            |tape, xv| {
                let sq = tape.mul(xv, xv)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        let sub = grad_check_sampled(
            |tape, xv| {
                let sq = tape.mul(xv, xv)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-5,
            Some(&[0, 4]),
        )
        .unwrap();
        assert!(sub <= full + 1e-15);
    }
}
