use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, RngExt};

use super::{Grads, ParamId, ParamStore, Real};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        let w = ps.add_random(format!("{name}.w"), d_in, d_out, std, rng);
        let b = ps.add_const(format!("{name}.b"), 1, d_out, 0.0);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Array2<T>) -> Array2<T> {
        x.dot(ps.get(self.w)) + ps.get(self.b)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, x: &Array2<T>, dy: &Array2<T>, g: &mut Grads<T>) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), g.get_mut(self.w));
        *g.get_mut(self.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&ps.get(self.w).t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self { gain: ps.add_const(format!("{name}.g"), 1, d, 1.0), bias: ps.add_const(format!("{name}.b"), 1, d, 0.0) }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::of(x.ncols() as f64);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(T::zero(), |a, &v| a + v * v) / d;
            *r = T::one() / (var + T::of(LN_EPS)).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let y = &xhat * ps.get(self.gain) + ps.get(self.bias);
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &LayerNormCache<T>, dy: &Array2<T>, g: &mut Grads<T>) -> Array2<T> {
        *g.get_mut(self.gain) += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *g.get_mut(self.bias) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * ps.get(self.gain);
        let d = T::of(dy.ncols() as f64);
        let mut dx = dxhat.clone();
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let xh = cache.xhat.row(i);
            let mean_dxhat = row.sum() / d;
            let mean_dot = row.iter().zip(xh.iter()).fold(T::zero(), |a, (&u, &v)| a + u * v) / d;
            let rs = cache.rstd[i];
            for (v, &x) in row.iter_mut().zip(xh.iter()) {
                *v = rs * (*v - mean_dxhat - x * mean_dot);
            }
        }
        dx
    }
}

/// Token embedding table `[vocab, d]`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, vocab: usize, d: usize, std: f64, rng: &mut R) -> Self {
        Self { table: ps.add_random(name, vocab, d, std, rng) }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, ids: &[usize]) -> Array2<T> {
        let table = ps.get(self.table);
        let mut out = Array2::zeros((ids.len(), table.ncols()));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&table.row(id));
        }
        out
    }

    pub fn backward<T: Real>(&self, ids: &[usize], dy: &Array2<T>, g: &mut Grads<T>) {
        let gt = g.get_mut(self.table);
        for (row, &id) in dy.rows().into_iter().zip(ids) {
            let mut target = gt.row_mut(id);
            target += &row;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let x2 = x * x;
    let inner = c * (x + T::of(0.044715) * x2 * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0 * 0.044715) * x2);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

/// Inverted dropout. `mask` is `None` when inactive.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    mask: Option<Array2<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn apply<R: Rng>(x: &mut Array2<T>, rate: f64, rng: Option<&mut R>) -> Self {
        let Some(rng) = rng.filter(|_| rate > 0.0) else {
            return Self { mask: None };
        };
        let scale = T::of(1.0 / (1.0 - rate));
        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if rng.random_bool(rate) { T::zero() } else { scale });
        *x *= &mask;
        Self { mask: Some(mask) }
    }

    pub fn backward(&self, dy: &mut Array2<T>) {
        if let Some(mask) = &self.mask {
            *dy *= mask;
        }
    }
}
