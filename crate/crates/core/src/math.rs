//! Dense f64 linear algebra and the two-layer ReLU feed-forward block.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`; inputs are treated as row
//! vectors, so a layer computes `x · W + b` with `W` stored row-major as
//! `(in_dim × out_dim)`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub type Vector = Vec<f64>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn random_uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let dist = Uniform::new(-bound, bound).expect("bound must be positive");
        Self::from_fn(rows, cols, |_, _| dist.sample(rng))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Row vector times matrix: `x · self`.
    pub fn vec_mul(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.rows {
            return shape_err(format!(
                "vector of length {} times {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            axpy(xr, self.row(r), &mut out);
        }
        Ok(out)
    }

    /// Matrix times column vector: `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return shape_err(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `self += alpha · uᵀv` (outer product accumulate).
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let a = alpha * ur;
            if a == 0.0 {
                continue;
            }
            let cols = self.cols;
            axpy(a, v, &mut self.data[r * cols..(r + 1) * cols]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity; defined as 0 when either side is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn relu(v: &[f64]) -> Vector {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vector {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn mean_squared_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Parameters of one feed-forward block `F(x) = relu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnWeights {
    pub d_model: usize,
    pub d_ff: usize,
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

impl FfnWeights {
    pub fn new(w1: Matrix, b1: Vector, w2: Matrix, b2: Vector) -> Result<Self> {
        let d_model = w1.rows();
        let d_ff = w1.cols();
        if d_ff == 0 {
            return shape_err("d_ff must be at least 1");
        }
        if b1.len() != d_ff {
            return shape_err(format!("b1 has length {}, expected {d_ff}", b1.len()));
        }
        if w2.rows() != d_ff || w2.cols() != d_model {
            return shape_err(format!(
                "w2 is {}x{}, expected {d_ff}x{d_model}",
                w2.rows(),
                w2.cols()
            ));
        }
        if b2.len() != d_model {
            return shape_err(format!("b2 has length {}, expected {d_model}", b2.len()));
        }
        Ok(Self {
            d_model,
            d_ff,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        Self {
            d_model,
            d_ff,
            w1: Matrix::zeros(d_model, d_ff),
            b1: vec![0.0; d_ff],
            w2: Matrix::zeros(d_ff, d_model),
            b2: vec![0.0; d_model],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random<R: Rng>(d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_model + d_ff) as f64).sqrt();
        let w1 = Matrix::random_uniform(d_model, d_ff, bound, rng);
        let w2 = Matrix::random_uniform(d_ff, d_model, bound, rng);
        Self {
            d_model,
            d_ff,
            w1,
            b1: vec![0.0; d_ff],
            w2,
            b2: vec![0.0; d_model],
        }
    }

    /// Like [`FfnWeights::random`] but with random biases as well.
    pub fn random_with_bias<R: Rng>(d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        let mut w = Self::random(d_model, d_ff, rng);
        let dist = Uniform::new(-0.5, 0.5).unwrap();
        w.b1.iter_mut().for_each(|b| *b = dist.sample(rng));
        w.b2.iter_mut().for_each(|b| *b = dist.sample(rng));
        w
    }

    pub fn param_count(&self) -> usize {
        2 * self.d_model * self.d_ff + self.d_ff + self.d_model
    }

    /// `h = x·W1 + b1`
    pub fn preactivation(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.d_model {
            return shape_err(format!(
                "input has dim {}, model expects {}",
                x.len(),
                self.d_model
            ));
        }
        let mut h = self.w1.vec_mul(x)?;
        axpy(1.0, &self.b1, &mut h);
        Ok(h)
    }

    /// `F(x) = relu(h)·W2 + b2`
    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        let a = relu(&self.preactivation(x)?);
        let mut y = self.w2.vec_mul(&a)?;
        axpy(1.0, &self.b2, &mut y);
        Ok(y)
    }

    /// Concatenation `w1 ‖ b1 ‖ w2 ‖ b2`, the same order as the model file.
    pub fn to_flat(&self) -> Vector {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn from_flat(d_model: usize, d_ff: usize, flat: &[f64]) -> Result<Self> {
        let n1 = d_model * d_ff;
        let expected = 2 * n1 + d_ff + d_model;
        if flat.len() != expected {
            return shape_err(format!(
                "flat parameter vector has length {}, expected {expected}",
                flat.len()
            ));
        }
        let (w1, rest) = flat.split_at(n1);
        let (b1, rest) = rest.split_at(d_ff);
        let (w2, b2) = rest.split_at(n1);
        Self::new(
            Matrix::new(d_model, d_ff, w1.to_vec())?,
            b1.to_vec(),
            Matrix::new(d_ff, d_model, w2.to_vec())?,
            b2.to_vec(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }
}

/// Mean squared error of the FFN over a batch and its gradient with
/// respect to every parameter. The loss averages over samples and output
/// coordinates.
pub fn ffn_mse_loss_and_grad(
    w: &FfnWeights,
    inputs: &[&[f64]],
    targets: &[&[f64]],
) -> Result<(f64, FfnWeights)> {
    if inputs.len() != targets.len() {
        return shape_err("inputs and targets differ in length");
    }
    if inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / (inputs.len() * w.d_model) as f64;
    let mut grad = FfnWeights::zeros(w.d_model, w.d_ff);
    let mut loss = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        if t.len() != w.d_model {
            return shape_err(format!(
                "target has dim {}, model output is {}",
                t.len(),
                w.d_model
            ));
        }
        let h = w.preactivation(x)?;
        let a = relu(&h);
        let mut y = w.w2.vec_mul(&a)?;
        axpy(1.0, &w.b2, &mut y);

        let dy: Vector = y.iter().zip(t.iter()).map(|(yi, ti)| yi - ti).collect();
        loss += dot(&dy, &dy) * scale;
        let dy: Vector = dy.iter().map(|d| 2.0 * scale * d).collect();

        grad.w2.add_outer(1.0, &a, &dy);
        axpy(1.0, &dy, &mut grad.b2);

        let mut dh = w.w2.mul_vec(&dy)?;
        for (d, &hv) in dh.iter_mut().zip(&h) {
            if hv <= 0.0 {
                *d = 0.0;
            }
        }
        grad.w1.add_outer(1.0, x, &dh);
        axpy(1.0, &dh, &mut grad.b1);
    }
    Ok((loss, grad))
}

/// Compare an analytic gradient with central differences.
///
/// `f` returns the loss and its analytic gradient at a point. The result is
/// the largest per-coordinate relative error
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vector),
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "eps must be in (0, 1e-2], got {eps}"
        )));
    }
    let (_, analytic) = f(point);
    if analytic.len() != point.len() {
        return shape_err(format!(
            "gradient has length {}, point has {}",
            analytic.len(),
            point.len()
        ));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "analytic gradient[{i}] is not finite"
        )));
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (fp, _) = f(&probe);
        probe[i] = orig - eps;
        let (fm, _) = f(&probe);
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::Numeric(format!(
                "numeric gradient[{i}] is not finite"
            )));
        }
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Adam over a flat parameter slice.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vector,
    v: Vector,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[allow(clippy::needless_range_loop)]
    fn naive_forward(w: &FfnWeights, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = vec![0.0; w.d_ff];
        for j in 0..w.d_ff {
            let mut s = w.b1[j];
            for i in 0..w.d_model {
                s += x[i] * w.w1.data()[i * w.d_ff + j];
            }
            h[j] = s;
        }
        let mut y = vec![0.0; w.d_model];
        for c in 0..w.d_model {
            let mut s = w.b2[c];
            for j in 0..w.d_ff {
                let a = if h[j] > 0.0 { h[j] } else { 0.0 };
                s += a * w.w2.data()[j * w.d_model + c];
            }
            y[c] = s;
        }
        (h, y)
    }

    #[test]
    fn preactivation_hand_example() {
        let w1 = Matrix::new(2, 4, vec![1., 0., 2., 0., 0., 3., 0., 1.]).unwrap();
        let w = FfnWeights::new(w1, vec![0.0; 4], Matrix::zeros(4, 2), vec![0.0; 2]).unwrap();
        let h = w.preactivation(&[1.0, 1.0]).unwrap();
        assert_eq!(h, vec![1.0, 3.0, 2.0, 1.0]);
        assert_eq!(naive_forward(&w, &[1.0, 1.0]).0, h);
        assert_eq!(w.preactivation(&[0.0, 0.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn preactivation_rejects_bad_dim() {
        let w = FfnWeights::zeros(2, 4);
        assert!(matches!(w.preactivation(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(w.forward(&[1.0, 2.0, 3.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_drops_negative_neurons() {
        // h = [1,-1,2,-3] via identity-like W1 on a 4-dim input
        let w1 = Matrix::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        let w2 = Matrix::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 });
        let w = FfnWeights::new(w1, vec![0.0; 4], w2, vec![0.0; 4]).unwrap();
        let y = w.forward(&[1.0, -1.0, 2.0, -3.0]).unwrap();
        assert_eq!(y, vec![1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn forward_with_zero_w2_is_b2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = FfnWeights::random_with_bias(3, 5, &mut rng);
        w.w2 = Matrix::zeros(5, 3);
        let y = w.forward(&[0.3, -2.0, 1.0]).unwrap();
        assert_eq!(y, w.b2);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = FfnWeights::random_with_bias(4, 8, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = w.forward(&x).unwrap();
            let (_, y_ref) = naive_forward(&w, &x);
            for (a, b) in y.iter().zip(&y_ref) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&[1.0, -1.0, 0.0]), vec![1.0, 0.0, 0.0]);
        assert_eq!(relu(&[-1.0, -2.0]), vec![0.0, 0.0]);
        assert_eq!(relu(&[0.5, 2.0]), vec![0.5, 2.0]);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grad_check_quadratic() {
        let f = |p: &[f64]| (dot(p, p), p.iter().map(|v| 2.0 * v).collect());
        let err = grad_check(f, &[1.0, 2.0], 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps_and_nan() {
        let f = |p: &[f64]| (dot(p, p), p.to_vec());
        assert!(matches!(grad_check(f, &[1.0], 0.1), Err(Error::Config(_))));
        let g = |_: &[f64]| (0.0, vec![f64::NAN]);
        assert!(matches!(
            grad_check(g, &[1.0], 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn ffn_loss_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let w = FfnWeights::random_with_bias(3, 6, &mut rng);
            let xs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let ts: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let xr: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
            let tr: Vec<&[f64]> = ts.iter().map(|v| v.as_slice()).collect();
            let f = |p: &[f64]| {
                let w = FfnWeights::from_flat(3, 6, p).unwrap();
                let (l, g) = ffn_mse_loss_and_grad(&w, &xr, &tr).unwrap();
                (l, g.to_flat())
            };
            let err = grad_check(f, &w.to_flat(), 1e-6).unwrap();
            assert!(err < 1e-5, "err = {err}");
        }
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 0..32)) {
            let once = relu(&v);
            prop_assert_eq!(relu(&once), once);
        }

        #[test]
        fn forward_equals_naive(seed in any::<u64>(), d_model in 1usize..6, d_ff in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = FfnWeights::random_with_bias(d_model, d_ff, &mut rng);
            let x: Vec<f64> = (0..d_model).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (_, y_ref) = naive_forward(&w, &x);
            let y = w.forward(&x).unwrap();
            for (a, b) in y.iter().zip(&y_ref) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
