use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{softmax_in_place, Grads, Linear, ParamStore, Real};

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs (self-attention passes the same tensor twice).
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    xq: Array2<T>,
    xkv: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    concat: Array2<T>,
}

/// Keys and values for incremental decoding. For self-attention rows are
/// appended one step at a time; for cross-attention they are filled once.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    k: Array2<T>,
    v: Array2<T>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn with_capacity(cap: usize, d: usize) -> Self {
        Self { k: Array2::zeros((cap, d)), v: Array2::zeros((cap, d)), len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Attention {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, d: usize, heads: usize, std: f64, rng: &mut R) -> Self {
        assert_eq!(d % heads, 0, "model width must divide evenly into heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), d, d, std, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, std, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, std, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, std, rng),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, xq: &Array2<T>, xkv: &Array2<T>, causal: bool) -> (Array2<T>, AttentionCache<T>) {
        let q = self.q.forward(ps, xq);
        let k = self.k.forward(ps, xkv);
        let v = self.v.forward(ps, xkv);
        let (concat, probs) = attend(q.view(), k.view(), v.view(), self.heads, causal.then_some(0));
        let y = self.o.forward(ps, &concat);
        (y, AttentionCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, probs, concat })
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, c: &AttentionCache<T>, dy: &Array2<T>, g: &mut Grads<T>) -> (Array2<T>, Array2<T>) {
        let dconcat = self.o.backward(ps, &c.concat, dy, g);
        let d = c.q.ncols();
        let dh = d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.probs[h];
            let dctx = dconcat.slice(cols);
            let vh = c.v.slice(cols);
            let mut dp = dctx.dot(&vh.t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                let dot = drow.iter().zip(prow.iter()).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (dx, &px) in drow.iter_mut().zip(prow.iter()) {
                    *dx = px * (*dx - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&dp.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&dp.t().dot(&c.q.slice(cols)));
        }
        let dxq = self.q.backward(ps, &c.xq, &dq, g);
        let mut dxkv = self.k.backward(ps, &c.xkv, &dk, g);
        dxkv += &self.v.backward(ps, &c.xkv, &dv, g);
        (dxq, dxkv)
    }

    /// Projects a fixed memory (encoder output) into a cross-attention cache.
    pub fn memory_cache<T: Real>(&self, ps: &ParamStore<T>, memory: &Array2<T>) -> KvCache<T> {
        let k = self.k.forward(ps, memory);
        let v = self.v.forward(ps, memory);
        let len = k.nrows();
        KvCache { k, v, len }
    }

    /// One decoding step of causal self-attention: appends the new key and
    /// value then attends over everything cached so far.
    pub fn step_self<T: Real>(&self, ps: &ParamStore<T>, x: &Array2<T>, cache: &mut KvCache<T>) -> Array2<T> {
        assert!(cache.len < cache.k.nrows(), "decoder cache is full");
        let q = self.q.forward(ps, x);
        cache.k.row_mut(cache.len).assign(&self.k.forward(ps, x).row(0));
        cache.v.row_mut(cache.len).assign(&self.v.forward(ps, x).row(0));
        cache.len += 1;
        let n = cache.len;
        let (ctx, _) = attend(q.view(), cache.k.slice(s![..n, ..]), cache.v.slice(s![..n, ..]), self.heads, None);
        self.o.forward(ps, &ctx)
    }

    /// One decoding step of cross-attention over a prepared memory cache.
    pub fn step_cross<T: Real>(&self, ps: &ParamStore<T>, x: &Array2<T>, cache: &KvCache<T>) -> Array2<T> {
        let q = self.q.forward(ps, x);
        let (ctx, _) = attend(q.view(), cache.k.view(), cache.v.view(), self.heads, None);
        self.o.forward(ps, &ctx)
    }
}

/// Per-head attention. With `causal_offset = Some(o)`, query row `i` may see
/// key rows `0..=i + o`.
fn attend<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    heads: usize,
    causal_offset: Option<usize>,
) -> (Array2<T>, Vec<Array2<T>>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut concat = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
            if let Some(off) = causal_offset {
                for x in row.iter_mut().skip(i + off + 1) {
                    *x = T::neg_infinity();
                }
            }
            row.mapv_inplace(|x| x * scale);
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (concat, probs)
}
