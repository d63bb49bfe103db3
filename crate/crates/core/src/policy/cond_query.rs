use crate::error::{invalid, Result};
use crate::nn::{expand_batch, Attention, FeedForward, LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use super::ModelConfig;

pub const PREFIX: &str = "condq.";

/// Learnable queries reading the trailing hidden states of the backbone and
/// projecting into the condition space.
#[derive(Debug, Clone)]
pub struct CondQuery {
    queries: ParamId,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
    proj: Linear,
    window: usize,
}

impl CondQuery {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            queries: store.add(format!("{PREFIX}queries"), Tensor::randn([cfg.n_queries, d], 1.0, rng))?,
            ln_q: LayerNorm::new(store, &format!("{PREFIX}ln_q"), d)?,
            ln_kv: LayerNorm::new(store, &format!("{PREFIX}ln_kv"), d)?,
            attn: Attention::new(store, &format!("{PREFIX}attn"), d, d, cfg.heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{PREFIX}ln_ff"), d)?,
            ff: FeedForward::new(store, &format!("{PREFIX}ff"), d, d * cfg.ffn_mult, rng)?,
            proj: Linear::new(store, &format!("{PREFIX}proj"), d, cfg.cond_dim, true, rng)?,
            window: cfg.align_window,
        })
    }

    /// `h[B, S, d] -> [B, N_q, D]`, reading only rows `S - window..S`.
    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[1] < self.window {
            return Err(invalid(
                "predict_conditions",
                format!("hidden states {s:?} have fewer than {} rows", self.window),
            ));
        }
        let (b, seq) = (s[0], s[1]);
        let kv = g.slice(h, 1, seq - self.window, seq)?;
        let kv = self.ln_kv.forward(g, kv)?;
        let q = g.param(self.queries)?;
        let q = expand_batch(g, q, b)?;
        let qn = self.ln_q.forward(g, q)?;
        let a = self.attn.forward(g, qn, kv, None)?;
        let q = g.add(q, a)?;
        let qn = self.ln_ff.forward(g, q)?;
        let f = self.ff.forward(g, qn)?;
        let q = g.add(q, f)?;
        self.proj.forward(g, q)
    }
}
