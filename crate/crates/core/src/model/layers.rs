use rand::Rng;

use crate::tensor::{attention, Graph, LayerNorm, Linear, ParamId, ParamStore, Real, Rope, Tensor, TensorError, Var};

/// 2-D convolution with bias over `[cin, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self {
            w: store.normal(&format!("{name}.w"), &[cout, cin, k, k], std, rng),
            b: store.zeros(&format!("{name}.b"), &[cout, 1, 1]),
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add(y, b)
    }
}

/// Multi-head attention with separate projections.
#[derive(Debug, Clone, Copy)]
pub struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attn {
    pub fn init<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::init(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::init(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::init(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::init(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
        rope: Option<Rope<'_, T>>,
    ) -> Result<Var, TensorError> {
        let q = self.q.forward(g, store, q)?;
        let k = self.k.forward(g, store, k)?;
        let v = self.v.forward(g, store, v)?;
        let a = attention(g, q, k, v, self.heads, rope)?;
        self.o.forward(g, store, a)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::init(store, &format!("{name}.fc1"), inp, hidden, true, rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, out, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm self-attention + MLP block.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attn,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn init<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim),
            attn: Attn::init(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::init(store, &format!("{name}.mlp"), dim, hidden, dim, rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        rope: Option<Rope<'_, T>>,
    ) -> Result<Var, TensorError> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, h, rope)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

/// `[t, c]` token rows to a `[c, side, side]` map.
pub fn tokens_to_map<T: Real>(g: &mut Graph<T>, x: Var, side: usize) -> Result<Var, TensorError> {
    let c = g.shape(x)[1];
    let t = g.transpose(x)?;
    g.reshape(t, &[c, side, side])
}

/// `[c, h, w]` map to `[h*w, c]` token rows.
pub fn map_to_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(r)
}

/// Fixed sinusoidal encoding of a pixel position in a square image of side `extent`.
///
/// Periods range geometrically from twice the image side down to 4 pixels,
/// `dim / 2` features per axis.
pub fn sinusoid_2d(x: f64, y: f64, dim: usize, extent: f64) -> Vec<f64> {
    let quarter = dim / 4;
    let top = (extent / 4.0).max(1.0);
    let mut out = Vec::with_capacity(dim);
    for p in [x, y] {
        let u = (p + 0.5) / extent;
        let freq = |i: usize| std::f64::consts::PI * top.powf(i as f64 / (quarter.max(2) - 1) as f64);
        out.extend((0..quarter).map(|i| (u * freq(i)).sin()));
        out.extend((0..quarter).map(|i| (u * freq(i)).cos()));
    }
    out
}

/// `[side*side, dim]` table of `sinusoid_2d` over grid cell centres, in pixel units of `scale`.
pub fn sinusoid_grid<T: Real>(side: usize, dim: usize, scale: f64) -> Tensor<T> {
    let extent = side as f64 * scale;
    let mut data = Vec::with_capacity(side * side * dim);
    for r in 0..side {
        for c in 0..side {
            let x = (c as f64 + 0.5) * scale - 0.5;
            let y = (r as f64 + 0.5) * scale - 0.5;
            data.extend(sinusoid_2d(x, y, dim, extent).into_iter().map(T::from_f64c));
        }
    }
    Tensor::new(vec![side * side, dim], data).expect("grid table")
}

/// Signed scalar encoding broadcast over `dim` channels.
pub fn sinusoid_1d(p: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        out.push((p * freq).sin());
    }
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        out.push((p * freq).cos());
    }
    out
}
