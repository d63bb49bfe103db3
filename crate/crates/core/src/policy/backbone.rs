use crate::error::{invalid, Result};
use crate::nn::{add_positional, causal_mask, expand_batch, patchify, Attention, FeedForward, LayerNorm, Linear};
use crate::rng::Rng;
use crate::sim::TOKEN_PAD;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use super::ModelConfig;

pub const PREFIX: &str = "backbone.";

/// Spatial-softmax channels in the visual stem.
pub const KEYPOINTS: usize = 16;
/// Large so each channel's softmax starts peaked on a colour blob.
const KP_INIT_STD: f64 = 8.0;

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

/// Causal transformer over `[patches; instruction; action token]`. Every patch
/// token also receives a spatial-softmax keypoint summary of the whole image.
#[derive(Debug, Clone)]
pub struct Backbone {
    patch_embed: Linear,
    /// `[K, 3]` colour filters; a bias would cancel inside the softmax.
    kp_filters: ParamId,
    kp_embed: Linear,
    tokens: ParamId,
    action_token: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    patch: usize,
    vocab: usize,
    max_instruction: usize,
    dim: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.dim;
        let seq = cfg.sequence_len();
        let mut blocks = Vec::new();
        for b in 0..cfg.backbone_depth {
            let p = format!("{PREFIX}block{b}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                attn: Attention::new(store, &format!("{p}.attn"), d, d, cfg.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, d * cfg.ffn_mult, rng)?,
            });
        }
        Ok(Self {
            patch_embed: Linear::new(store, &format!("{PREFIX}patch"), cfg.patch * cfg.patch * 3, d, true, rng)?,
            kp_filters: store.add(format!("{PREFIX}kp_filters"), Tensor::randn([KEYPOINTS, 3], KP_INIT_STD, rng))?,
            kp_embed: Linear::new(store, &format!("{PREFIX}kp_embed"), 2 * KEYPOINTS, d, true, rng)?,
            tokens: store.add(format!("{PREFIX}tokens"), Tensor::randn([cfg.vocab, d], 1.0, rng))?,
            action_token: store.add(format!("{PREFIX}action_token"), Tensor::randn([1, d], 1.0, rng))?,
            pos: store.add(format!("{PREFIX}pos"), Tensor::randn([seq, d], 0.1, rng))?,
            blocks,
            ln_f: LayerNorm::new(store, &format!("{PREFIX}ln_f"), d)?,
            patch: cfg.patch,
            vocab: cfg.vocab,
            max_instruction: cfg.max_instruction,
            dim: d,
        })
    }

    /// Returns `(z[B, d], h[B, S, d])`; `z` is the final row of `h`.
    pub fn forward(&self, g: &mut Graph<'_>, obs: Var, instructions: &[Vec<u32>]) -> Result<(Var, Var)> {
        let batch = g.shape(obs)[0];
        if instructions.len() != batch {
            return Err(invalid("encode_context", "one instruction per observation required"));
        }
        let mut ids = Vec::with_capacity(batch * self.max_instruction);
        for ins in instructions {
            if ins.len() > self.max_instruction {
                return Err(invalid(
                    "encode_context",
                    format!("instruction length {} exceeds {}", ins.len(), self.max_instruction),
                ));
            }
            for &t in ins {
                if t as usize >= self.vocab {
                    return Err(invalid("encode_context", format!("unknown token id {t}")));
                }
                ids.push(t as usize);
            }
            ids.extend(std::iter::repeat_n(TOKEN_PAD as usize, self.max_instruction - ins.len()));
        }
        let patches = patchify(g, obs, self.patch)?;
        let img = self.patch_embed.forward(g, patches)?;
        let kp = self.keypoints(g, obs)?;
        let kp = g.reshape(kp, &[batch, 1, self.dim])?;
        let n_patches = g.shape(img)[1];
        let kp = if n_patches == 1 { kp } else { g.repeat(kp, 1, n_patches)? };
        let img = g.add(img, kp)?;
        let table = g.param(self.tokens)?;
        let words = g.gather_rows(table, &ids)?;
        let words = g.reshape(words, &[batch, self.max_instruction, self.dim])?;
        let act = g.param(self.action_token)?;
        let act = expand_batch(g, act, batch)?;
        let x = g.concat(&[img, words, act], 1)?;
        let pos = g.param(self.pos)?;
        let mut x = add_positional(g, x, pos)?;
        let seq = g.shape(x)[1];
        let heads = self.blocks.first().map_or(1, |b| b.attn.heads);
        let mask = causal_mask(batch * heads, seq);
        for b in &self.blocks {
            let n = b.ln1.forward(g, x)?;
            let a = b.attn.forward(g, n, n, Some(&mask))?;
            x = g.add(x, a)?;
            let n = b.ln2.forward(g, x)?;
            let f = b.ff.forward(g, n)?;
            x = g.add(x, f)?;
        }
        let h = self.ln_f.forward(g, x)?;
        let z = g.slice(h, 1, seq - 1, seq)?;
        let z = g.reshape(z, &[batch, self.dim])?;
        Ok((z, h))
    }

    /// Expected pixel coordinates of each softmax channel, embedded to `[B, d]`.
    fn keypoints(&self, g: &mut Graph<'_>, obs: Var) -> Result<Var> {
        let s = g.shape(obs).to_vec();
        let (b, h, w) = (s[0], s[1], s[2]);
        let px = g.reshape(obs, &[b, h * w, 3])?;
        let px = g.transpose(px)?;
        let f = g.param(self.kp_filters)?;
        let f = expand_batch(g, f, b)?;
        let logits = g.matmul(f, px)?;
        let attn = g.softmax(logits);
        let mut coords = Vec::with_capacity(h * w * 2);
        for r in 0..h {
            for c in 0..w {
                coords.push(2.0 * (c as f64 + 0.5) / w as f64 - 1.0);
                coords.push(2.0 * (r as f64 + 0.5) / h as f64 - 1.0);
            }
        }
        let coords = g.constant(Tensor::new([h * w, 2], coords)?);
        let kp = g.matmul(attn, coords)?;
        let kp = g.reshape(kp, &[b, 2 * KEYPOINTS])?;
        self.kp_embed.forward(g, kp)
    }
}
