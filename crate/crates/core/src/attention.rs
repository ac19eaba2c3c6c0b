//! One-head softmax self-attention with residual connection.

use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::error::{KstError, Result};
use crate::matrix::Matrix;
use crate::scalar::{Arith, Mode, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub w_o: Matrix<Scalar>,
    pub w_v: Matrix<Scalar>,
    pub w_k: Matrix<Scalar>,
    pub w_q: Matrix<Scalar>,
}

impl AttentionLayer {
    pub fn new(w_o: Matrix<Scalar>, w_v: Matrix<Scalar>, w_k: Matrix<Scalar>, w_q: Matrix<Scalar>) -> Result<Self> {
        let d_model = w_v.cols();
        let s = w_v.rows();
        if w_o.shape() != (d_model, s) || w_k.shape() != (s, d_model) || w_q.shape() != (s, d_model) {
            return Err(KstError::ShapeMismatch(format!(
                "attention weights do not chain: W_O {}x{}, W_V {}x{}, W_K {}x{}, W_Q {}x{}",
                w_o.rows(),
                w_o.cols(),
                w_v.rows(),
                w_v.cols(),
                w_k.rows(),
                w_k.cols(),
                w_q.rows(),
                w_q.cols()
            )));
        }
        Ok(AttentionLayer { w_o, w_v, w_k, w_q })
    }

    pub fn d_model(&self) -> usize {
        self.w_v.cols()
    }

    pub fn head_size(&self) -> usize {
        self.w_v.rows()
    }

    /// Scores vanish identically, so softmax is uniform and exact evaluation works.
    pub fn has_zero_scores(&self) -> bool {
        self.w_k.is_all_zero() || self.w_q.is_all_zero()
    }

    pub fn lower<T: Arith>(&self) -> Result<LoweredAttention<T>> {
        if T::MODE == Mode::Exact && !self.has_zero_scores() {
            return Err(KstError::ModeUnsupported(
                "softmax of a nonzero score matrix is irrational".into(),
            ));
        }
        Ok(LoweredAttention {
            ov: self.w_o.lower::<T>()?.matmul(&self.w_v.lower::<T>()?)?,
            w_k: self.w_k.lower()?,
            w_q: self.w_q.lower()?,
            zero_scores: self.has_zero_scores(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct LoweredAttention<T> {
    ov: Matrix<T>,
    w_k: Matrix<T>,
    w_q: Matrix<T>,
    zero_scores: bool,
}

impl<T: Arith> LoweredAttention<T> {
    pub fn eval(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.rows() != self.ov.cols() {
            return Err(KstError::ShapeMismatch(format!(
                "attention expects {} rows, got {}",
                self.ov.cols(),
                x.rows()
            )));
        }
        let n = x.cols();
        let weights = if self.zero_scores {
            Matrix::filled(n, n, T::from_ratio(1, n as i64))
        } else {
            let keys = self.w_k.matmul(x)?;
            let queries = self.w_q.matmul(x)?;
            let scores = keys.transpose().matmul(&queries)?;
            let soft = softmax_columns(&scores.map(|v| v.clone().into_scalar().to_f64()));
            soft.try_map(|&v| T::lower(&Scalar::Float(v)))?
        };
        x.add(&self.ov.matmul(x)?.matmul(&weights)?)
    }
}

/// Column-wise softmax, shifted by each column's maximum for stability.
pub fn softmax_columns(m: &Matrix<f64>) -> Matrix<f64> {
    let mut out = m.clone();
    for c in 0..m.cols() {
        let column = m.column(c);
        let peak = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = column.iter().map(|v| (v - peak).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (r, e) in exps.into_iter().enumerate() {
            out.set(r, c, e / total);
        }
    }
    out
}

pub fn eval_attention(layer: &AttentionLayer, x: &Matrix<Scalar>, mode: Mode) -> Result<Matrix<Scalar>> {
    match mode {
        Mode::Exact => Ok(layer.lower::<BigRational>()?.eval(&x.read()?)?.into_scalars()),
        Mode::Float => Ok(layer.lower::<f64>()?.eval(&x.read()?)?.into_scalars()),
    }
}

/// Attention that writes the sum over columns of the top `d` rows into the
/// bottom `d` rows. The uniform softmax averages, so the output block
/// carries a factor `n` to turn the average into a sum.
pub fn make_column_sum_attention(d: usize, n: usize) -> AttentionLayer {
    let w_o = Matrix::from_fn(2 * d, 2 * d, |r, c| {
        if r >= d && c + d == r {
            Scalar::int(n as i64)
        } else {
            Scalar::int(0)
        }
    });
    AttentionLayer::new(
        w_o,
        Matrix::identity(2 * d),
        Matrix::exact_zeros(2 * d, 2 * d),
        Matrix::exact_zeros(2 * d, 2 * d),
    )
    .expect("column-sum attention is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ints(rows: Vec<Vec<i64>>) -> Matrix<Scalar> {
        Matrix::from_rows(rows.into_iter().map(|r| r.into_iter().map(Scalar::int).collect()).collect()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let uniform = softmax_columns(&Matrix::filled(3, 3, 0.0));
        assert!(uniform.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let m = Matrix::from_rows(vec![vec![0.0], vec![2f64.ln()], vec![3f64.ln()]]).unwrap();
        let s = softmax_columns(&m);
        for (r, want) in [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0].into_iter().enumerate() {
            assert!((s.get(r, 0) - want).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = Matrix::from_fn(5, 4, |_, _| rng.gen_range(-800.0..800.0));
        let s = softmax_columns(&big);
        for c in 0..4 {
            let total: f64 = s.column(c).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(s.column(c).iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn zero_output_weights_leave_input() {
        let layer = AttentionLayer::new(
            Matrix::exact_zeros(2, 2),
            Matrix::identity(2),
            Matrix::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap(),
            Matrix::identity(2),
        )
        .unwrap();
        let x = Matrix::from_f64(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(eval_attention(&layer, &x, Mode::Float).unwrap(), x);
        assert!(matches!(
            eval_attention(&layer, &x.convert(Mode::Exact).unwrap(), Mode::Exact),
            Err(KstError::ModeUnsupported(_))
        ));
    }

    #[test]
    fn identity_output_adds_column_average() {
        let layer = AttentionLayer::new(
            Matrix::identity(1),
            Matrix::identity(1),
            Matrix::exact_zeros(1, 1),
            Matrix::exact_zeros(1, 1),
        )
        .unwrap();
        let x = ints(vec![vec![1, 2, 6]]);
        let out = eval_attention(&layer, &x, Mode::Exact).unwrap();
        assert_eq!(out, ints(vec![vec![4, 5, 9]]));
    }

    #[test]
    fn column_sum_examples() {
        let layer = make_column_sum_attention(2, 2);
        let x = ints(vec![vec![1, 2], vec![3, 4], vec![0, 0], vec![0, 0]]);
        let out = eval_attention(&layer, &x, Mode::Exact).unwrap();
        assert_eq!(out, ints(vec![vec![1, 2], vec![3, 4], vec![3, 3], vec![7, 7]]));

        let single = make_column_sum_attention(1, 1);
        let x = Matrix::from_rows(vec![vec![Scalar::ratio(2, 9)], vec![Scalar::int(0)]]).unwrap();
        let out = eval_attention(&single, &x, Mode::Exact).unwrap();
        assert_eq!(out.get(1, 0), &Scalar::ratio(2, 9));

        let zero = Matrix::exact_zeros(4, 3);
        assert_eq!(eval_attention(&make_column_sum_attention(2, 3), &zero, Mode::Exact).unwrap(), zero);
    }

    #[test]
    fn column_sum_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let d = rng.gen_range(1..4);
            let n = rng.gen_range(1..5);
            let x = Matrix::from_fn(2 * d, n, |r, _| {
                if r < d {
                    Scalar::ratio(rng.gen_range(-1000..1000), rng.gen_range(1..50))
                } else {
                    Scalar::int(0)
                }
            });
            let out = eval_attention(&make_column_sum_attention(d, n), &x, Mode::Exact).unwrap();
            for r in 0..d {
                let mut total = Scalar::int(0);
                for c in 0..n {
                    total = total.try_add(x.get(r, c)).unwrap();
                }
                for c in 0..n {
                    assert_eq!(out.get(r, c), x.get(r, c));
                    assert_eq!(out.get(d + r, c), &total);
                }
            }
        }
    }

    #[test]
    fn float_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer = make_column_sum_attention(2, 3);
        for _ in 0..50 {
            let x = Matrix::from_fn(4, 3, |r, _| {
                if r < 2 {
                    Scalar::ratio(rng.gen_range(-1_000_000..1_000_000), rng.gen_range(1..8))
                } else {
                    Scalar::int(0)
                }
            });
            let exact = eval_attention(&layer, &x, Mode::Exact).unwrap().to_f64();
            let float = eval_attention(&layer, &x.convert(Mode::Float).unwrap(), Mode::Float).unwrap().to_f64();
            for (a, b) in exact.iter().zip(float.iter()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let layer = make_column_sum_attention(2, 3);
        let back: AttentionLayer = serde_json::from_str(&serde_json::to_string(&layer).unwrap()).unwrap();
        assert_eq!(back, layer);
    }
}
