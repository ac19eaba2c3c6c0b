//! Target functions `f: [0,1]^(d x n) -> R^(d x n)` with declared Hölder data.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KstError, Result};
use crate::matrix::Matrix;

type TargetFn = dyn Fn(&Matrix<f64>) -> Result<Matrix<f64>> + Send + Sync;

fn check_holder(beta: f64, q: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(KstError::OutOfDomain(format!("Hölder exponent {beta} outside (0, 1]")));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(KstError::OutOfDomain(format!("Hölder constant {q} must be positive")));
    }
    Ok(())
}

/// `beta` and `q` are declared by the caller; they are spot-checked, never proven.
#[derive(Clone)]
pub struct TargetOracle {
    name: String,
    d: usize,
    n: usize,
    beta: f64,
    q: f64,
    func: Arc<TargetFn>,
}

impl fmt::Debug for TargetOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TargetOracle")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("n", &self.n)
            .field("beta", &self.beta)
            .field("q", &self.q)
            .finish()
    }
}

impl TargetOracle {
    pub fn new(
        name: impl Into<String>,
        d: usize,
        n: usize,
        beta: f64,
        q: f64,
        func: impl Fn(&Matrix<f64>) -> Result<Matrix<f64>> + Send + Sync + 'static,
    ) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(KstError::ShapeMismatch("targets need d, n >= 1".into()));
        }
        check_holder(beta, q)?;
        Ok(TargetOracle { name: name.into(), d, n, beta, q, func: Arc::new(func) })
    }

    /// Target whose every output entry is the same scalar function.
    pub fn broadcast(
        name: impl Into<String>,
        d: usize,
        n: usize,
        beta: f64,
        q: f64,
        func: impl Fn(&Matrix<f64>) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        TargetOracle::new(name, d, n, beta, q, move |x| {
            let v = func(x);
            Ok(Matrix::filled(x.rows(), x.cols(), v))
        })
    }

    pub fn constant(d: usize, n: usize, c: f64) -> Result<Self> {
        TargetOracle::broadcast(format!("const({c})"), d, n, 1.0, 1.0, move |_| c)
    }

    /// `x_pq` with 1-based indices.
    pub fn projection(d: usize, n: usize, p: usize, q: usize) -> Result<Self> {
        if p == 0 || q == 0 || p > d || q > n {
            return Err(KstError::OutOfDomain(format!("x[{p},{q}] is not an entry of a {d}x{n} input")));
        }
        TargetOracle::broadcast(format!("x[{p},{q}]"), d, n, 1.0, 1.0, move |x| *x.get(p - 1, q - 1))
    }

    pub fn mean(d: usize, n: usize) -> Result<Self> {
        TargetOracle::broadcast("mean", d, n, 1.0, 1.0, |x| x.iter().sum::<f64>() / (x.rows() * x.cols()) as f64)
    }

    /// `f_rs` is the mean of row `r`.
    pub fn row_mean(d: usize, n: usize) -> Result<Self> {
        TargetOracle::new("row_mean", d, n, 1.0, 1.0, |x| {
            Ok(Matrix::from_fn(x.rows(), x.cols(), |r, _| x.row(r).iter().sum::<f64>() / x.cols() as f64))
        })
    }

    /// `f_rs` is the mean of column `s`.
    pub fn column_mean(d: usize, n: usize) -> Result<Self> {
        TargetOracle::new("column_mean", d, n, 1.0, 1.0, |x| {
            let means: Vec<f64> = (0..x.cols()).map(|c| x.column(c).iter().sum::<f64>() / x.rows() as f64).collect();
            Ok(Matrix::from_fn(x.rows(), x.cols(), |_, c| means[c]))
        })
    }

    pub fn min(d: usize, n: usize) -> Result<Self> {
        TargetOracle::broadcast("min", d, n, 1.0, 1.0, |x| x.iter().copied().fold(f64::INFINITY, f64::min))
    }

    pub fn max(d: usize, n: usize) -> Result<Self> {
        TargetOracle::broadcast("max", d, n, 1.0, 1.0, |x| x.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// Same function with different declared Hölder data.
    pub fn with_holder(mut self, beta: f64, q: f64) -> Result<Self> {
        check_holder(beta, q)?;
        self.beta = beta;
        self.q = q;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d, self.n)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn evaluate(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        if x.shape() != (self.d, self.n) {
            return Err(KstError::ShapeMismatch(format!(
                "target expects {}x{}, got {}x{}",
                self.d,
                self.n,
                x.rows(),
                x.cols()
            )));
        }
        let out = (self.func)(x)?;
        if out.shape() != (self.d, self.n) {
            return Err(KstError::Oracle(format!("{} returned a {}x{} matrix", self.name, out.rows(), out.cols())));
        }
        if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
            return Err(KstError::Oracle(format!("{} returned non-finite value {bad}", self.name)));
        }
        Ok(out)
    }

    /// Largest observed `|f(x) - f(y)| / |x - y|_inf^beta` over random pairs,
    /// including near pairs. Compare against `q` to catch bad declarations.
    pub fn holder_spot_check(&self, pairs: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for i in 0..pairs {
            let x = Matrix::from_fn(self.d, self.n, |_, _| rng.gen::<f64>());
            let radius = 0.5f64.powi((i % 12) as i32);
            let y = x.map(|v| (v + rng.gen_range(-radius..=radius)).clamp(0.0, 1.0));
            let dist = x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if dist == 0.0 {
                continue;
            }
            let fx = self.evaluate(&x)?;
            let fy = self.evaluate(&y)?;
            let diff = fx.iter().zip(fy.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff / dist.powf(self.beta));
        }
        Ok(worst)
    }
}
