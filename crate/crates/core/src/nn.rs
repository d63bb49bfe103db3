//! Transformer building blocks over [`Graph`]. Each layer owns parameter ids
//! in a shared [`ParamStore`]; `forward` binds them on the graph it is given.

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Gaussian init with std `1/sqrt(din)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let std = 1.0 / (din as f64).sqrt();
        Self::with_std(store, name, din, dout, bias, std, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::randn([din, dout], std, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros([dout]))?)
        } else {
            None
        };
        Ok(Self { w, b, din, dout })
    }

    /// `x[.., din] -> [.., dout]`
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        g.layer_norm(x, Some(gamma), Some(beta), LN_EPS)
    }
}

/// Parameter-free layer norm (used under adaptive modulation).
pub fn plain_norm(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    g.layer_norm(x, None, None, LN_EPS)
}

/// Multi-head attention over `[B, L, d]` inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid("attention", format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// `[B, L, d] -> [B*H, L, dh]`
    fn split(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, l, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, l, dh])
    }

    /// `xq[B, Lq, d]` attends over `xkv[B, Lk, kv_dim]`. `mask`, when given,
    /// is added to the `[B*H, Lq, Lk]` scores.
    pub fn forward(&self, g: &mut Graph<'_>, xq: Var, xkv: Var, mask: Option<&Tensor>) -> Result<Var> {
        let sq = g.shape(xq).to_vec();
        let (b, lq) = (sq[0], sq[1]);
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let q = self.split(g, q)?;
        let k = self.split(g, k)?;
        let v = self.split(g, v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            let m = g.constant(m.clone());
            scores = g.add(scores, m)?;
        }
        let att = g.softmax(scores);
        let out = g.matmul(att, v)?;
        let out = g.reshape(out, &[b, self.heads, lq, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, lq, self.dim])?;
        self.o.forward(g, out)
    }
}

/// Additive causal mask of shape `[n, l, l]`.
pub fn causal_mask(n: usize, l: usize) -> Tensor {
    let mut data = vec![0.0; n * l * l];
    for b in 0..n {
        for i in 0..l {
            for j in i + 1..l {
                data[b * l * l + i * l + j] = -1e9;
            }
        }
    }
    Tensor::new([n, l, l], data).expect("mask shape")
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Broadcasts a `[L, d]` parameter to `[B, L, d]`.
pub fn expand_batch(g: &mut Graph<'_>, x: Var, batch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let mut shape = vec![1];
    shape.extend_from_slice(&s);
    let x = g.reshape(x, &shape)?;
    if batch == 1 {
        Ok(x)
    } else {
        g.repeat(x, 0, batch)
    }
}

/// Adds a `[L, d]` table to every batch element of `x[B, L, d]`.
pub fn add_positional(g: &mut Graph<'_>, x: Var, pos: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let p = g.reshape(pos, &[s[1] * s[2]])?;
    let y = g.add_row(flat, p)?;
    g.reshape(y, &s)
}

/// `[B, H, W, 3]` images to `[B, (H/p)*(W/p), p*p*3]` patch rows.
pub fn patchify(g: &mut Graph<'_>, img: Var, patch: usize) -> Result<Var> {
    let s = g.shape(img).to_vec();
    if s.len() != 4 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(invalid("patchify", format!("image shape {s:?} not divisible by patch {patch}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let x = g.reshape(img, &[b, gh, patch, gw, patch, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, &[b, gh * gw, patch * patch * c])
}

/// Fixed 2-D sinusoidal codes for a `rows x cols` grid, `[rows*cols, dim]`.
pub fn grid_codes(rows: usize, cols: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut data = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut data[(r * cols + c) * dim..(r * cols + c + 1) * dim];
            for i in 0..quarter {
                let f = 1.0 / 100f64.powf(i as f64 / quarter.max(1) as f64);
                row[4 * i] = (r as f64 * f).sin();
                row[4 * i + 1] = (r as f64 * f).cos();
                row[4 * i + 2] = (c as f64 * f).sin();
                row[4 * i + 3] = (c as f64 * f).cos();
            }
        }
    }
    Tensor::new([rows * cols, dim], data).expect("grid shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn attention_shapes_and_causality() {
        let mut store = ParamStore::new();
        let mut r = rng(0);
        let att = Attention::new(&mut store, "att", 8, 8, 2, &mut r).unwrap();
        let x = Tensor::randn([2, 5, 8], 1.0, &mut r);
        let mask = causal_mask(4, 5);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let y = att.forward(&mut g, xv, xv, Some(&mask)).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 8]);
        let first = g.data(y)[..8].to_vec();
        // changing a later token leaves the first output untouched
        let mut x2 = x.clone();
        x2.data_mut()[4 * 8] += 1.0;
        let mut g2 = Graph::with_params(&store);
        let xv2 = g2.constant(x2);
        let y2 = att.forward(&mut g2, xv2, xv2, Some(&mask)).unwrap();
        assert_eq!(&g2.data(y2)[..8], &first[..]);
        assert_ne!(g2.data(y2)[4 * 8..5 * 8], g.data(y)[4 * 8..5 * 8]);
    }

    #[test]
    fn patchify_layout() {
        let data: Vec<f64> = (0..4 * 4 * 3).map(f64::from).collect();
        let img = Tensor::new([1, 4, 4, 3], data).unwrap();
        let mut g = Graph::new();
        let v = g.constant(img);
        let p = patchify(&mut g, v, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 4, 12]);
        // first patch: pixels (0,0),(0,1),(1,0),(1,1)
        assert_eq!(&g.data(p)[..6], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(&g.data(p)[6..9], &[12.0, 13.0, 14.0]);
    }

    #[test]
    fn mismatched_heads_rejected() {
        let mut store = ParamStore::new();
        assert!(Attention::new(&mut store, "a", 10, 10, 4, &mut rng(0)).is_err());
    }
}
