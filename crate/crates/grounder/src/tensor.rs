//! Dense row-major 2-D tensors in f64.
//!
//! Everything in the model is a matrix; vectors are 1xC. Keeping a single
//! precision for training and verification lets the finite-difference check
//! exercise the exact code path used by the optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        let cols = data.len();
        Tensor { rows: 1, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// C = A x B, ikj loop order so the inner loop runs over contiguous rows.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| gauss(rng) * std).collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Xavier-uniform over fan_in = cols, fan_out = rows (for a 1xC token the
    /// bound degenerates to sqrt(6 / (C + 1))).
    pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Kaiming-normal with fan_in = rows (weights are used as x·W).
    pub fn kaiming_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let std = (2.0 / rows as f64).sqrt();
        Tensor::randn(rows, cols, std, rng)
    }
}

/// Box-Muller; two uniforms per sample keeps the stream layout simple.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn matmul_matches_hand_product() {
        // 2x3 times 3x2
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(3, 5, 1.0, &mut rng);
        assert_eq!(a.transpose().transpose(), a);
    }
}
