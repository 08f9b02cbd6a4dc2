//! Pre-norm transformer encoder and decoder stacks with explicit backward
//! passes and cached incremental decoding.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use super::ModelConfig;
use crate::nn::{
    gelu, gelu_grad, Attention, AttentionCache, Dropout, Embedding, Grads, KvCache, LayerNorm, LayerNormCache, Linear,
    ParamId, ParamStore, Real,
};

/// Dropout rate plus the RNG that drives it; `rng: None` means inference.
pub struct Train<'a, R> {
    pub dropout: f64,
    pub rng: Option<&'a mut R>,
}

impl<R: Rng> Train<'_, R> {
    fn drop<T: Real>(&mut self, x: &mut Array2<T>) -> Dropout<T> {
        Dropout::apply(x, self.dropout, self.rng.as_deref_mut())
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

struct FeedForwardCache<T> {
    input: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl FeedForward {
    fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), cfg.d_model, cfg.d_ff, cfg.init_std, rng),
            down: Linear::new(ps, &format!("{name}.down"), cfg.d_ff, cfg.d_model, cfg.init_std, rng),
        }
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Array2<T>) -> (Array2<T>, FeedForwardCache<T>) {
        let pre = self.up.forward(ps, x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(ps, &act);
        (y, FeedForwardCache { input: x.clone(), pre, act })
    }

    fn backward<T: Real>(&self, ps: &ParamStore<T>, c: &FeedForwardCache<T>, dy: &Array2<T>, g: &mut Grads<T>) -> Array2<T> {
        let mut dact = self.down.backward(ps, &c.act, dy, g);
        dact.zip_mut_with(&c.pre, |d, &x| *d *= gelu_grad(x));
        self.up.backward(ps, &c.input, &dact, g)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

struct EncoderLayerCache<T> {
    ln_attn: LayerNormCache<T>,
    attn: AttentionCache<T>,
    drop_attn: Dropout<T>,
    ln_ff: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
    drop_ff: Dropout<T>,
}

impl EncoderLayer {
    fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), cfg.d_model),
            attn: Attention::new(ps, &format!("{name}.attn"), cfg.d_model, cfg.heads, cfg.init_std, rng),
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), cfg.d_model),
            ff: FeedForward::new(ps, &format!("{name}.ff"), cfg, rng),
        }
    }

    fn forward<T: Real, R: Rng>(&self, ps: &ParamStore<T>, x: &Array2<T>, tr: &mut Train<R>) -> (Array2<T>, EncoderLayerCache<T>) {
        let (h, ln_attn) = self.ln_attn.forward(ps, x);
        let (mut a, attn) = self.attn.forward(ps, &h, &h, false);
        let drop_attn = tr.drop(&mut a);
        let x1 = x + &a;
        let (h2, ln_ff) = self.ln_ff.forward(ps, &x1);
        let (mut f, ff) = self.ff.forward(ps, &h2);
        let drop_ff = tr.drop(&mut f);
        (x1 + &f, EncoderLayerCache { ln_attn, attn, drop_attn, ln_ff, ff, drop_ff })
    }

    fn backward<T: Real>(&self, ps: &ParamStore<T>, c: &EncoderLayerCache<T>, dy: &Array2<T>, g: &mut Grads<T>) -> Array2<T> {
        let mut df = dy.clone();
        c.drop_ff.backward(&mut df);
        let dh2 = self.ff.backward(ps, &c.ff, &df, g);
        let dx1 = dy + &self.ln_ff.backward(ps, &c.ln_ff, &dh2, g);
        let mut da = dx1.clone();
        c.drop_attn.backward(&mut da);
        let (dq, dkv) = self.attn.backward(ps, &c.attn, &da, g);
        dx1 + &self.ln_attn.backward(ps, &c.ln_attn, &(dq + &dkv), g)
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

struct DecoderLayerCache<T> {
    ln_self: LayerNormCache<T>,
    self_attn: AttentionCache<T>,
    drop_self: Dropout<T>,
    ln_cross: LayerNormCache<T>,
    cross_attn: AttentionCache<T>,
    drop_cross: Dropout<T>,
    ln_ff: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
    drop_ff: Dropout<T>,
}

impl DecoderLayer {
    fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), cfg.d_model),
            self_attn: Attention::new(ps, &format!("{name}.self_attn"), cfg.d_model, cfg.heads, cfg.init_std, rng),
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), cfg.d_model),
            cross_attn: Attention::new(ps, &format!("{name}.cross_attn"), cfg.d_model, cfg.heads, cfg.init_std, rng),
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), cfg.d_model),
            ff: FeedForward::new(ps, &format!("{name}.ff"), cfg, rng),
        }
    }

    fn forward<T: Real, R: Rng>(
        &self,
        ps: &ParamStore<T>,
        x: &Array2<T>,
        memory: &Array2<T>,
        tr: &mut Train<R>,
    ) -> (Array2<T>, DecoderLayerCache<T>) {
        let (h, ln_self) = self.ln_self.forward(ps, x);
        let (mut a, self_attn) = self.self_attn.forward(ps, &h, &h, true);
        let drop_self = tr.drop(&mut a);
        let x1 = x + &a;
        let (h, ln_cross) = self.ln_cross.forward(ps, &x1);
        let (mut c, cross_attn) = self.cross_attn.forward(ps, &h, memory, false);
        let drop_cross = tr.drop(&mut c);
        let x2 = x1 + &c;
        let (h, ln_ff) = self.ln_ff.forward(ps, &x2);
        let (mut f, ff) = self.ff.forward(ps, &h);
        let drop_ff = tr.drop(&mut f);
        let cache = DecoderLayerCache { ln_self, self_attn, drop_self, ln_cross, cross_attn, drop_cross, ln_ff, ff, drop_ff };
        (x2 + &f, cache)
    }

    /// Returns `dL/dx` and adds this layer's memory gradient into `dmemory`.
    fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        c: &DecoderLayerCache<T>,
        dy: &Array2<T>,
        dmemory: &mut Array2<T>,
        g: &mut Grads<T>,
    ) -> Array2<T> {
        let mut df = dy.clone();
        c.drop_ff.backward(&mut df);
        let dh = self.ff.backward(ps, &c.ff, &df, g);
        let dx2 = dy + &self.ln_ff.backward(ps, &c.ln_ff, &dh, g);
        let mut dc = dx2.clone();
        c.drop_cross.backward(&mut dc);
        let (dq, dmem) = self.cross_attn.backward(ps, &c.cross_attn, &dc, g);
        *dmemory += &dmem;
        let dx1 = dx2 + &self.ln_cross.backward(ps, &c.ln_cross, &dq, g);
        let mut da = dx1.clone();
        c.drop_self.backward(&mut da);
        let (dq, dkv) = self.self_attn.backward(ps, &c.self_attn, &da, g);
        dx1 + &self.ln_self.backward(ps, &c.ln_self, &(dq + &dkv), g)
    }

    fn step<T: Real>(&self, ps: &ParamStore<T>, x: &Array2<T>, self_cache: &mut KvCache<T>, cross: &KvCache<T>) -> Array2<T> {
        let (h, _) = self.ln_self.forward(ps, x);
        let x1 = x + &self.self_attn.step_self(ps, &h, self_cache);
        let (h, _) = self.ln_cross.forward(ps, &x1);
        let x2 = &x1 + &self.cross_attn.step_cross(ps, &h, cross);
        let (h, _) = self.ln_ff.forward(ps, &x2);
        let (f, _) = self.ff.forward(ps, &h);
        x2 + &f
    }
}

/// Token embedding plus learned absolute positions feeding a layer stack.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
}

pub struct EncoderCache<T> {
    ids: Vec<usize>,
    layers: Vec<EncoderLayerCache<T>>,
    ln_out: LayerNormCache<T>,
}

impl EncoderStack {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            pos: ps.add_random(format!("{name}.pos"), cfg.max_encoder_len, cfg.d_model, cfg.init_std, rng),
            layers: (0..cfg.encoder_layers)
                .map(|i| EncoderLayer::new(ps, &format!("{name}.layer{i}"), cfg, rng))
                .collect(),
            ln_out: LayerNorm::new(ps, &format!("{name}.ln_out"), cfg.d_model),
        }
    }

    pub fn forward<T: Real, R: Rng>(
        &self,
        ps: &ParamStore<T>,
        embed: &Embedding,
        ids: &[usize],
        tr: &mut Train<R>,
    ) -> (Array2<T>, EncoderCache<T>) {
        let mut x = embed.forward(ps, ids) + &ps.get(self.pos).slice(s![..ids.len(), ..]);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(ps, &x, tr);
            caches.push(c);
            x = y;
        }
        let (out, ln_out) = self.ln_out.forward(ps, &x);
        (out, EncoderCache { ids: ids.to_vec(), layers: caches, ln_out })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, embed: &Embedding, c: &EncoderCache<T>, dout: &Array2<T>, g: &mut Grads<T>) {
        let mut dx = self.ln_out.backward(ps, &c.ln_out, dout, g);
        for (layer, cache) in self.layers.iter().zip(&c.layers).rev() {
            dx = layer.backward(ps, cache, &dx, g);
        }
        let n = c.ids.len();
        let mut dpos = g.get_mut(self.pos).slice_mut(s![..n, ..]);
        dpos += &dx;
        embed.backward(&c.ids, &dx, g);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStack {
    pos: ParamId,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    head: Linear,
}

pub struct DecoderCache<T> {
    ids: Vec<usize>,
    layers: Vec<DecoderLayerCache<T>>,
    ln_out: LayerNormCache<T>,
    hidden: Array2<T>,
}

/// Incremental decoding state for one sequence.
pub struct DecodeState<T> {
    self_caches: Vec<KvCache<T>>,
    cross: Vec<KvCache<T>>,
    position: usize,
}

impl<T> DecodeState<T> {
    pub fn position(&self) -> usize {
        self.position
    }
}

impl DecoderStack {
    pub fn new<T: Real, R: Rng>(ps: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            pos: ps.add_random(format!("{name}.pos"), cfg.max_decoder_len, cfg.d_model, cfg.init_std, rng),
            layers: (0..cfg.decoder_layers)
                .map(|i| DecoderLayer::new(ps, &format!("{name}.layer{i}"), cfg, rng))
                .collect(),
            ln_out: LayerNorm::new(ps, &format!("{name}.ln_out"), cfg.d_model),
            head: Linear::new(ps, &format!("{name}.head"), cfg.d_model, cfg.vocab_size, cfg.init_std, rng),
        }
    }

    /// Teacher-forced logits `[len(ids), vocab]`.
    pub fn forward<T: Real, R: Rng>(
        &self,
        ps: &ParamStore<T>,
        embed: &Embedding,
        ids: &[usize],
        memory: &Array2<T>,
        tr: &mut Train<R>,
    ) -> (Array2<T>, DecoderCache<T>) {
        let mut x = embed.forward(ps, ids) + &ps.get(self.pos).slice(s![..ids.len(), ..]);
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(ps, &x, memory, tr);
            caches.push(c);
            x = y;
        }
        let (hidden, ln_out) = self.ln_out.forward(ps, &x);
        let logits = self.head.forward(ps, &hidden);
        (logits, DecoderCache { ids: ids.to_vec(), layers: caches, ln_out, hidden })
    }

    /// Backpropagates `dlogits`; returns the gradient with respect to memory.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        embed: &Embedding,
        c: &DecoderCache<T>,
        dlogits: &Array2<T>,
        memory_shape: (usize, usize),
        g: &mut Grads<T>,
    ) -> Array2<T> {
        let dh = self.head.backward(ps, &c.hidden, dlogits, g);
        let mut dx = self.ln_out.backward(ps, &c.ln_out, &dh, g);
        let mut dmemory = Array2::zeros(memory_shape);
        for (layer, cache) in self.layers.iter().zip(&c.layers).rev() {
            dx = layer.backward(ps, cache, &dx, &mut dmemory, g);
        }
        let n = c.ids.len();
        let mut dpos = g.get_mut(self.pos).slice_mut(s![..n, ..]);
        dpos += &dx;
        embed.backward(&c.ids, &dx, g);
        dmemory
    }

    pub fn start<T: Real>(&self, ps: &ParamStore<T>, memory: &Array2<T>, capacity: usize) -> DecodeState<T> {
        let d = memory.ncols();
        DecodeState {
            self_caches: self.layers.iter().map(|_| KvCache::with_capacity(capacity, d)).collect(),
            cross: self.layers.iter().map(|l| l.cross_attn.memory_cache(ps, memory)).collect(),
            position: 0,
        }
    }

    /// Feeds one token and returns next-token logits.
    pub fn step<T: Real>(&self, ps: &ParamStore<T>, embed: &Embedding, state: &mut DecodeState<T>, id: usize) -> Array1<T> {
        let p = state.position;
        let mut x = embed.forward(ps, &[id]) + &ps.get(self.pos).slice(s![p..p + 1, ..]);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.step(ps, &x, &mut state.self_caches[i], &state.cross[i]);
        }
        state.position += 1;
        let (h, _) = self.ln_out.forward(ps, &x);
        self.head.forward(ps, &h).index_axis_move(Axis(0), 0)
    }
}
