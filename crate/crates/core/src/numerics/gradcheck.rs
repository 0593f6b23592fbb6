//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Maximum over components of `|analytic − central difference| / (|central difference| + 1e-8)`.
///
/// `f` must build a scalar from its input var. Inputs should avoid kinks (ties in max,
/// ReLU at zero, ...) where the two derivatives legitimately disagree.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_components(f, x, step, None)
}

/// Like [`grad_check`] but only probes `max_components` randomly chosen entries of `x`.
pub fn grad_check_sampled<F>(
    f: F,
    x: &Tensor,
    step: f64,
    max_components: usize,
    seed: u64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.len();
    let idx = if max_components >= n {
        (0..n).collect()
    } else {
        let mut v = sample(&mut rng, n, max_components).into_vec();
        v.sort_unstable();
        v
    };
    grad_check_components(f, x, step, Some(idx))
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::no_grad();
    let y = f(&tape, tape.constant(x.clone()))?;
    if y.len() != 1 {
        return Err(Error::NotScalar(y.shape()));
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check probe".into()));
    }
    Ok(v)
}

fn grad_check_components<F>(f: F, x: &Tensor, step: f64, which: Option<Vec<usize>>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return invalid(format!("finite-difference step must be > 0, got {step}"));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("grad_check input".into()));
    }
    let analytic = {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let y = f(&tape, v)?;
        tape.backward(y)?.wrt(v)
    };
    let which = which.unwrap_or_else(|| (0..x.len()).collect());
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in which {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let rel = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
