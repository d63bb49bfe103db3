//! Query-based compressor from frozen future features to the
//! condition tokens (`n_queries x cond_dim`).

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::nn::{expand_batch, Attention, FeedForward, LayerNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Name prefix of every future-encoder parameter.
pub const PREFIX: &str = "future.";

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
}

pub fn call_count() -> u64 {
    CALLS.with(Cell::get)
}

pub fn reset_call_count() {
    CALLS.with(|c| c.set(0));
}

#[derive(Debug, Clone)]
struct Block {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct FutureEncoder {
    unify: Vec<Linear>,
    head_embed: Vec<ParamId>,
    queries: ParamId,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    out: Linear,
    pub n_queries: usize,
    pub hidden: usize,
    pub cond_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FutureEncoderDims {
    pub heads_in: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub n_queries: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    pub attn_heads: usize,
    pub ffn_mult: usize,
}

impl FutureEncoder {
    pub fn new(store: &mut ParamStore, d: FutureEncoderDims, rng: &mut Rng) -> Result<Self> {
        let mut unify = Vec::new();
        let mut head_embed = Vec::new();
        for i in 0..d.heads_in {
            unify.push(Linear::new(store, &format!("{PREFIX}unify{i}"), d.embed_dim, d.hidden, true, rng)?);
            head_embed.push(store.add(format!("{PREFIX}head{i}"), Tensor::randn([d.hidden], 0.02, rng))?);
        }
        let queries = store.add(format!("{PREFIX}queries"), Tensor::randn([d.n_queries, d.hidden], 1.0, rng))?;
        let mut blocks = Vec::new();
        for b in 0..d.blocks {
            let p = format!("{PREFIX}block{b}");
            blocks.push(Block {
                ln_q: LayerNorm::new(store, &format!("{p}.ln_q"), d.hidden)?,
                ln_kv: LayerNorm::new(store, &format!("{p}.ln_kv"), d.hidden)?,
                attn: Attention::new(store, &format!("{p}.attn"), d.hidden, d.hidden, d.attn_heads, rng)?,
                ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d.hidden)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d.hidden, d.hidden * d.ffn_mult, rng)?,
            });
        }
        Ok(Self {
            unify,
            head_embed,
            queries,
            blocks,
            out_norm: LayerNorm::new(store, &format!("{PREFIX}out_norm"), d.hidden)?,
            out: Linear::new(store, &format!("{PREFIX}out"), d.hidden, d.cond_dim, true, rng)?,
            n_queries: d.n_queries,
            hidden: d.hidden,
            cond_dim: d.cond_dim,
        })
    }

    /// Encodes `[B, P_i, embed_dim]` feature grids into `[B, n_queries, cond_dim]`.
    pub fn forward(&self, g: &mut Graph<'_>, heads: &[Var]) -> Result<Var> {
        CALLS.with(|c| c.set(c.get() + 1));
        if heads.is_empty() || heads.len() != self.unify.len() {
            return Err(crate::error::invalid(
                "encode_conditions",
                format!("expected {} feature heads, got {}", self.unify.len(), heads.len()),
            ));
        }
        let batch = g.shape(heads[0])[0];
        let mut ctx = Vec::with_capacity(heads.len());
        for ((h, lin), emb) in heads.iter().zip(&self.unify).zip(&self.head_embed) {
            let s = g.shape(*h).to_vec();
            if s.len() != 3 || s[0] != batch || s[2] != lin.din {
                return Err(Error::ShapeMismatch {
                    op: "encode_conditions",
                    lhs: vec![batch, 0, lin.din],
                    rhs: s,
                });
            }
            let u = lin.forward(g, *h)?;
            let e = g.param(*emb)?;
            ctx.push(g.add_row(u, e)?);
        }
        let ctx = g.concat(&ctx, 1)?;
        let q = g.param(self.queries)?;
        let mut q = expand_batch(g, q, batch)?;
        for b in &self.blocks {
            let kv = b.ln_kv.forward(g, ctx)?;
            let qn = b.ln_q.forward(g, q)?;
            let a = b.attn.forward(g, qn, kv, None)?;
            q = g.add(q, a)?;
            let qn = b.ln_ff.forward(g, q)?;
            let f = b.ff.forward(g, qn)?;
            q = g.add(q, f)?;
        }
        let q = self.out_norm.forward(g, q)?;
        self.out.forward(g, q)
    }
}

/// Freezes every future-encoder parameter and returns their checksum.
/// Calling it again is a no-op.
pub fn freeze(store: &mut ParamStore) -> String {
    store.set_frozen(PREFIX, true);
    store.checksum(PREFIX)
}

pub fn is_frozen(store: &ParamStore) -> bool {
    store.is_frozen(PREFIX)
}

pub fn checksum(store: &ParamStore) -> String {
    store.checksum(PREFIX)
}
