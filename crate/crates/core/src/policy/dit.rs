use crate::error::{invalid, Result};
use crate::nn::{add_positional, plain_norm, Attention, FeedForward, LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use super::ModelConfig;

pub const PREFIX: &str = "dit.";

#[derive(Debug, Clone)]
struct Block {
    /// `c -> [shift, scale, gate]` for self-attention and the feed-forward.
    ada: Linear,
    self_attn: Attention,
    cross_ln: LayerNorm,
    cross: Attention,
    ff: FeedForward,
}

/// Velocity network over `T` action tokens with timestep-modulated norms and
/// cross-attention to a context of `[z]` or `[z; conditions]`.
#[derive(Debug, Clone)]
pub struct Dit {
    in_proj: Linear,
    pos: ParamId,
    t_fc1: Linear,
    t_fc2: Linear,
    cond_proj: Linear,
    blocks: Vec<Block>,
    final_ada: Linear,
    out: Linear,
    dim: usize,
    horizon: usize,
    action_dim: usize,
}

fn slice_mod(g: &mut Graph<'_>, m: Var, i: usize, d: usize) -> Result<Var> {
    g.slice(m, 2, i * d, (i + 1) * d)
}

impl Dit {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.dim;
        let mut blocks = Vec::new();
        for b in 0..cfg.dit_depth {
            let p = format!("{PREFIX}block{b}");
            blocks.push(Block {
                ada: Linear::with_std(store, &format!("{p}.ada"), d, 6 * d, true, 0.0, rng)?,
                self_attn: Attention::new(store, &format!("{p}.self"), d, d, cfg.heads, rng)?,
                cross_ln: LayerNorm::new(store, &format!("{p}.cross_ln"), d)?,
                cross: Attention::new(store, &format!("{p}.cross"), d, d, cfg.heads, rng)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, d * cfg.ffn_mult, rng)?,
            });
        }
        Ok(Self {
            in_proj: Linear::new(store, &format!("{PREFIX}in"), cfg.action_dim, d, true, rng)?,
            pos: store.add(format!("{PREFIX}pos"), Tensor::randn([cfg.horizon, d], 0.1, rng))?,
            t_fc1: Linear::new(store, &format!("{PREFIX}t_fc1"), d, d, true, rng)?,
            t_fc2: Linear::new(store, &format!("{PREFIX}t_fc2"), d, d, true, rng)?,
            cond_proj: Linear::new(store, &format!("{PREFIX}cond_proj"), cfg.cond_dim, d, true, rng)?,
            blocks,
            final_ada: Linear::with_std(store, &format!("{PREFIX}final_ada"), d, 2 * d, true, 0.0, rng)?,
            out: Linear::new(store, &format!("{PREFIX}out"), d, cfg.action_dim, true, rng)?,
            dim: d,
            horizon: cfg.horizon,
            action_dim: cfg.action_dim,
        })
    }

    /// Cross-attention context `[B, 1 (+N_q), d]`.
    pub fn context(&self, g: &mut Graph<'_>, z: Var, cond: Option<Var>) -> Result<Var> {
        let b = g.shape(z)[0];
        let z3 = g.reshape(z, &[b, 1, self.dim])?;
        match cond {
            None => Ok(z3),
            Some(c) => {
                let c = self.cond_proj.forward(g, c)?;
                g.concat(&[z3, c], 1)
            }
        }
    }

    /// `v(a_tau, tau, z, cond)` with `a_tau[B, T, A]`, `tau[B]`, `z[B, d]`
    /// and optional `cond[B, N_q, D]`.
    pub fn velocity(&self, g: &mut Graph<'_>, a_tau: Var, tau: Var, z: Var, cond: Option<Var>) -> Result<Var> {
        let s = g.shape(a_tau).to_vec();
        if s.len() != 3 || s[1] != self.horizon || s[2] != self.action_dim {
            return Err(crate::Error::ShapeMismatch {
                op: "velocity",
                lhs: vec![s.first().copied().unwrap_or(0), self.horizon, self.action_dim],
                rhs: s,
            });
        }
        if g.data(tau).iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid("velocity", "tau outside [0, 1]"));
        }
        let (b, t, d) = (s[0], s[1], self.dim);
        let ctx = self.context(g, z, cond)?;

        let emb = g.timestep_embedding(tau, d)?;
        let c = self.t_fc1.forward(g, emb)?;
        let c = g.silu(c);
        let c = self.t_fc2.forward(g, c)?;
        let c_act = g.silu(c);

        let x = self.in_proj.forward(g, a_tau)?;
        let pos = g.param(self.pos)?;
        let mut x = add_positional(g, x, pos)?;
        for blk in &self.blocks {
            let m = blk.ada.forward(g, c_act)?;
            let m = g.reshape(m, &[b, 1, 6 * d])?;
            let m = g.repeat(m, 1, t)?;
            let (sh1, sc1, ga1) = (slice_mod(g, m, 0, d)?, slice_mod(g, m, 1, d)?, slice_mod(g, m, 2, d)?);
            let (sh2, sc2, ga2) = (slice_mod(g, m, 3, d)?, slice_mod(g, m, 4, d)?, slice_mod(g, m, 5, d)?);

            let n = modulate(g, x, sh1, sc1)?;
            let a = blk.self_attn.forward(g, n, n, None)?;
            let a = g.mul(a, ga1)?;
            x = g.add(x, a)?;

            let n = blk.cross_ln.forward(g, x)?;
            let a = blk.cross.forward(g, n, ctx, None)?;
            x = g.add(x, a)?;

            let n = modulate(g, x, sh2, sc2)?;
            let f = blk.ff.forward(g, n)?;
            let f = g.mul(f, ga2)?;
            x = g.add(x, f)?;
        }
        let m = self.final_ada.forward(g, c_act)?;
        let m = g.reshape(m, &[b, 1, 2 * d])?;
        let m = g.repeat(m, 1, t)?;
        let (sh, sc) = (slice_mod(g, m, 0, d)?, slice_mod(g, m, 1, d)?);
        let x = modulate(g, x, sh, sc)?;
        self.out.forward(g, x)
    }
}

/// `norm(x) * (1 + scale) + shift`
fn modulate(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = plain_norm(g, x)?;
    let s = g.add_scalar(scale, 1.0);
    let y = g.mul(n, s)?;
    g.add(y, shift)
}
