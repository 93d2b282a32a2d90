//! Dense layers with hand-written backward passes.
//!
//! Every layer keeps whatever it needs from the forward pass in an explicit
//! cache value, and backward functions accumulate parameter gradients into a
//! gradient container of the same type as the parameters.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type Mat = Array2<f64>;
pub type Vector = Array1<f64>;

pub const LN_EPS: f64 = 1e-5;

/// Named flat views over every trainable tensor of a module. Ordering is
/// stable and defines the checkpoint layout.
pub trait Params {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// Hex SHA-256 over tensor names and little-endian values.
    fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            h.update((t.len() as u64).to_le_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn slice_of(a: &Mat) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice_of_mut(a: &mut Mat) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Collects `(prefix.name, tensor)` pairs from a child module.
pub(crate) fn nest<'a>(prefix: &str, inner: Vec<(String, &'a [f64])>) -> Vec<(String, &'a [f64])> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub(crate) fn nest_mut<'a>(prefix: &str, inner: Vec<(String, &'a mut [f64])>) -> Vec<(String, &'a mut [f64])> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// `params -= lr * grads`. Both must have identical layouts.
pub fn sgd_step<P: Params>(params: &mut P, grads: &P, lr: f64) {
    let g = grads.tensors();
    for ((name, p), (gname, gt)) in params.tensors_mut().into_iter().zip(g) {
        debug_assert_eq!(name, gname);
        for (pv, gv) in p.iter_mut().zip(gt) {
            *pv -= lr * gv;
        }
    }
}

/// `acc += scale * other`.
pub fn accumulate<P: Params>(acc: &mut P, other: &P, scale: f64) {
    let o = other.tensors();
    for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(o) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += scale * y;
        }
    }
}

pub(crate) fn normal_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let n = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in, out)`
    pub weight: Mat,
    pub bias: Vector,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((input, output)), bias: Array1::zeros(output) }
    }

    pub fn init(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Self { weight: normal_mat(rng, input, output, std), bias: Array1::zeros(output) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { weight: Array2::eye(dim), bias: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns `dL/dx`.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: Option<&mut Linear>) -> Mat {
        if let Some(g) = grad {
            self.backward_params(x, dy, g);
        }
        dy.dot(&self.weight.t())
    }

    pub fn backward_params(&self, x: &Mat, dy: &Mat, grad: &mut Linear) {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl Params for Linear {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("weight".into(), slice_of(&self.weight)),
            ("bias".into(), self.bias.as_slice().expect("contiguous")),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("weight".into(), slice_of_mut(&mut self.weight)),
            ("bias".into(), self.bias.as_slice_mut().expect("contiguous")),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vector,
    pub beta: Vector,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Mat,
    inv_std: Vector,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std[i] = is;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Mat, grad: Option<&mut LayerNorm>) -> Mat {
        if let Some(grad) = grad {
            grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
            grad.beta += &dy.sum_axis(Axis(0));
        }
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let is = cache.inv_std[i];
            let mut out = dx.row_mut(i);
            for j in 0..g.len() {
                out[j] = is * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("gamma".into(), self.gamma.as_slice().expect("contiguous")),
            ("beta".into(), self.beta.as_slice().expect("contiguous")),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("gamma".into(), self.gamma.as_slice_mut().expect("contiguous")),
            ("beta".into(), self.beta.as_slice_mut().expect("contiguous")),
        ]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: &Mat) -> Mat {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows_inplace(a: &mut Mat) {
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Softmax attention probabilities per head, kept for backward.
#[derive(Debug, Clone)]
pub struct AttnCache {
    probs: Vec<Mat>,
}

impl AttnCache {
    pub fn probs(&self) -> &[Mat] {
        &self.probs
    }
}

/// Multi-head scaled dot-product attention over already-projected `q`, `k`,
/// `v`. Heads split the feature axes evenly; `v` may be wider than `q`/`k`.
pub fn mha_forward(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, AttnCache) {
    let dh = q.ncols() / heads;
    let dv = v.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qk = s![.., h * dh..(h + 1) * dh];
        let vc = s![.., h * dv..(h + 1) * dv];
        let mut a = q.slice(qk).dot(&k.slice(qk).t()) * scale;
        softmax_rows_inplace(&mut a);
        out.slice_mut(vc).assign(&a.dot(&v.slice(vc)));
        probs.push(a);
    }
    (out, AttnCache { probs })
}

/// Returns `(dq, dk, dv)`.
pub fn mha_backward(q: &Mat, k: &Mat, v: &Mat, cache: &AttnCache, dout: &Mat, heads: usize) -> (Mat, Mat, Mat) {
    let dh = q.ncols() / heads;
    let dvw = v.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for h in 0..heads {
        let qk = s![.., h * dh..(h + 1) * dh];
        let vc = s![.., h * dvw..(h + 1) * dvw];
        let a = &cache.probs[h];
        let dout_h = dout.slice(vc);
        dv.slice_mut(vc).assign(&a.t().dot(&dout_h));
        let da = dout_h.dot(&v.slice(vc).t());
        let ds = softmax_backward(a, &da) * scale;
        dq.slice_mut(qk).assign(&ds.dot(&k.slice(qk)));
        dk.slice_mut(qk).assign(&ds.t().dot(&q.slice(qk)));
    }
    (dq, dk, dv)
}

/// Gradient through a row-wise softmax with output `a`.
pub fn softmax_backward(a: &Mat, da: &Mat) -> Mat {
    let mut ds = a * da;
    let row_dot = ds.sum_axis(Axis(1));
    for (mut r, (arow, rd)) in ds.rows_mut().into_iter().zip(a.rows().into_iter().zip(row_dot.iter())) {
        r.zip_mut_with(&arow, |x, &p| *x -= p * rd);
    }
    ds
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central-difference gradient oracle shared by module tests.
    use super::*;

    pub const FD_EPS: f64 = 1e-5;

    /// Relative error with an absolute floor so near-zero gradients do not blow up.
    /// The floor sits above central-difference roundoff (about 1e-10 for O(10)
    /// losses at eps 1e-5), which structurally zero gradients such as attention
    /// key biases would otherwise be compared against.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-5)
    }

    /// Compares `analytic` against central differences of `loss` on every
    /// element (or every `stride`-th element) of every tensor of `params`.
    pub fn check_params<P: Params + Clone>(
        params: &P,
        analytic: &P,
        stride: usize,
        loss: impl Fn(&P) -> f64,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        let grads: Vec<(String, Vec<f64>)> =
            analytic.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
        let n_tensors = params.tensors().len();
        for ti in 0..n_tensors {
            let len = params.tensors()[ti].1.len();
            let mut j = ti % stride.max(1);
            while j < len {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].1[j] += FD_EPS;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].1[j] -= FD_EPS;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_EPS);
                let an = grads[ti].1[j];
                let e = rel_err(an, fd);
                if e > worst {
                    worst = e;
                }
                assert!(e < 1e-4, "{}[{j}]: analytic {an} vs fd {fd}", grads[ti].0);
                j += stride.max(1);
            }
        }
        worst
    }

    pub fn check_input(x: &Mat, analytic: &Mat, loss: impl Fn(&Mat) -> f64) -> f64 {
        let mut worst: f64 = 0.0;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[[r, c]] += FD_EPS;
            let mut m = x.clone();
            m[[r, c]] -= FD_EPS;
            let fd = (loss(&p) - loss(&m)) / (2.0 * FD_EPS);
            let e = rel_err(analytic[[r, c]], fd);
            worst = worst.max(e);
            assert!(e < 1e-4, "input[{r},{c}]: analytic {} vs fd {fd}", analytic[[r, c]]);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe(y: &Mat, w: &Mat) -> f64 {
        (y * w).sum()
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::init(&mut rng, 5, 3);
        let x = normal_mat(&mut rng, 4, 5, 1.0);
        let w = normal_mat(&mut rng, 4, 3, 1.0);
        let mut g = Linear::zeros(5, 3);
        let dx = lin.backward(&x, &w, Some(&mut g));
        check_params(&lin, &g, 1, |p| probe(&p.forward(&x), &w));
        check_input(&x, &dx, |xi| probe(&lin.forward(xi), &w));
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::new(6);
        ln.gamma = normal_mat(&mut rng, 1, 6, 1.0).row(0).to_owned();
        ln.beta = normal_mat(&mut rng, 1, 6, 1.0).row(0).to_owned();
        let x = normal_mat(&mut rng, 3, 6, 2.0);
        let w = normal_mat(&mut rng, 3, 6, 1.0);
        let (_, cache) = ln.forward(&x);
        let mut g = LayerNorm::new(6);
        g.zero();
        let dx = ln.backward(&cache, &w, Some(&mut g));
        check_params(&ln, &g, 1, |p| probe(&p.forward(&x).0, &w));
        check_input(&x, &dx, |xi| probe(&ln.forward(xi).0, &w));
    }

    #[test]
    fn gelu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal_mat(&mut rng, 3, 4, 2.0);
        let w = normal_mat(&mut rng, 3, 4, 1.0);
        let dx = gelu_backward(&x, &w);
        check_input(&x, &dx, |xi| probe(&gelu(xi), &w));
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = normal_mat(&mut rng, 3, 8, 1.0);
        let k = normal_mat(&mut rng, 5, 8, 1.0);
        let v = normal_mat(&mut rng, 5, 8, 1.0);
        let w = normal_mat(&mut rng, 3, 8, 1.0);
        let (_, cache) = mha_forward(&q, &k, &v, 2);
        let (dq, dk, dv) = mha_backward(&q, &k, &v, &cache, &w, 2);
        check_input(&q, &dq, |x| probe(&mha_forward(x, &k, &v, 2).0, &w));
        check_input(&k, &dk, |x| probe(&mha_forward(&q, x, &v, 2).0, &w));
        check_input(&v, &dv, |x| probe(&mha_forward(&q, &k, x, 2).0, &w));
    }

    #[test]
    fn attention_with_wide_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = normal_mat(&mut rng, 3, 4, 1.0);
        let k = normal_mat(&mut rng, 6, 4, 1.0);
        let v = normal_mat(&mut rng, 6, 10, 1.0);
        let w = normal_mat(&mut rng, 3, 10, 1.0);
        let (_, cache) = mha_forward(&q, &k, &v, 1);
        let (dq, dk, dv) = mha_backward(&q, &k, &v, &cache, &w, 1);
        check_input(&q, &dq, |x| probe(&mha_forward(x, &k, &v, 1).0, &w));
        check_input(&k, &dk, |x| probe(&mha_forward(&q, x, &v, 1).0, &w));
        check_input(&v, &dv, |x| probe(&mha_forward(&q, &k, x, 1).0, &w));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = normal_mat(&mut rng, 3, 4, 3.0);
        let k = normal_mat(&mut rng, 6, 4, 3.0);
        let (_, cache) = mha_forward(&q, &k, &k, 1);
        for row in cache.probs()[0].rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Linear::identity(2);
        let mut g = Linear::zeros(2, 2);
        g.weight[[0, 0]] = 1.0;
        g.bias[1] = -2.0;
        sgd_step(&mut p, &g, 0.5);
        assert_eq!(p.weight[[0, 0]], 0.5);
        assert_eq!(p.bias[1], 1.0);
    }
}
