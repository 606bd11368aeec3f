//! Central-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rtol: 1e-2, atol: 1e-9 }
    }
}

impl Tolerance {
    /// `|a − n| ≤ rtol · max(|a|, |n|) + atol`.
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.rtol * analytic.abs().max(numeric.abs()) + self.atol
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub ok: bool,
}

/// `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`.
pub fn central_difference(f: &mut impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, index: usize, h: f64) -> Result<f64> {
    let mut xp = x.clone();
    xp.data_mut()[index] += h;
    let mut xm = x.clone();
    xm.data_mut()[index] -= h;
    Ok((f(&xp)? - f(&xm)?) / (2.0 * h))
}

/// Distinct coordinates drawn reproducibly from `seed`.
pub fn pick_coordinates(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, count.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares `analytic` against central differences of `f` at `indices`.
pub fn check_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &Tensor,
    indices: &[usize],
    h: f64,
    tol: Tolerance,
) -> Result<Vec<Comparison>> {
    indices
        .iter()
        .map(|&index| {
            let numeric = central_difference(&mut f, x, index, h)?;
            let a = analytic.data()[index];
            Ok(Comparison {
                index,
                analytic: a,
                numeric,
                ok: tol.accepts(a, numeric),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = |t: &Tensor| Ok(t.data().iter().map(|v| v * v * v).sum::<f64>());
        let grad = x.map(|v| 3.0 * v * v);
        let res = check_gradient(f, &x, &grad, &[0, 1, 2], 1e-5, Tolerance::default()).unwrap();
        assert!(res.iter().all(|c| c.ok));
        let wrong = x.map(|v| 2.0 * v);
        let res = check_gradient(f, &x, &wrong, &[2], 1e-5, Tolerance::default()).unwrap();
        assert!(!res[0].ok);
    }

    #[test]
    fn coordinates_are_distinct_and_reproducible() {
        let a = pick_coordinates(256, 20, 3);
        assert_eq!(a.len(), 20);
        assert_eq!(a, pick_coordinates(256, 20, 3));
        let mut d = a.clone();
        d.dedup();
        assert_eq!(d, a);
    }
}
