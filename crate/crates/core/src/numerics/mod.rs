//! Dense tensors, reverse-mode differentiation and a few stable scalar helpers.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::{log_sigmoid, sigmoid};

use crate::error::{Error, Result};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `log Σ exp(v)` with max-shift. All `-inf` inputs give `-inf`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("logsumexp"));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// Two-argument `logsumexp` for hot loops.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Seeded deterministic random source.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and `salt`.
    pub fn fork(&self, salt: u64) -> Rng {
        Rng::new(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| self.normal() * std).collect())
    }
}

/// Compares reverse-mode gradients of the scalar function `f` at `point`
/// against central finite differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(t);
        let y = f(&mut g, x)?;
        let v = g.value(y);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite("grad_check evaluation".into()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    if !g.value(y).item().is_finite() {
        return Err(Error::NonFinite("grad_check evaluation".into()));
    }
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_examples() {
        let half = 0.5f64.ln();
        assert!(logsumexp(&[half, half]).unwrap().abs() < 1e-15);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!((logsumexp(&[0.0, 0.0, 0.0]).unwrap() - 3f64.ln()).abs() < 1e-15);
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn log_add_agrees_with_logsumexp() {
        for &(a, b) in &[(0.3, -2.0), (-1e3, -1e3), (f64::NEG_INFINITY, 1.0), (5.0, 5.0)] {
            let x = log_add(a, b);
            let y = logsumexp(&[a, b]).unwrap();
            assert!((x - y).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn rng_is_deterministic() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        let xs: Vec<f64> = (0..16).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.normal()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut rng = Rng::new(1);
        let p = rng.normal_tensor(&[3, 4], 1.0);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &p, 0.1).is_err());
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let p = Tensor::scalar(1000.0);
        let r = grad_check(
            |g, x| {
                let e = g.exp(x);
                let e = g.exp(e);
                Ok(g.sum(e))
            },
            &p,
            1e-4,
        );
        assert!(r.is_err());
    }
}
