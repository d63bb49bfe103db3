//! Frozen stand-in vision encoders and the quarter-rate future-frame sampler.
//!
//! The encoders are random networks drawn from a fixed seed and never
//! trained. They keep their own [`ParamStore`] with every entry frozen, so
//! the optimizer of the policy never sees them.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{grid_codes, patchify, Linear};
use crate::rng::derived_rng;
use crate::sim::{Episode, Image};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of encoder invocations on this thread since the last reset.
pub fn call_count() -> u64 {
    CALLS.with(Cell::get)
}

pub fn reset_call_count() {
    CALLS.with(|c| c.set(0));
}

fn bump() {
    CALLS.with(|c| c.set(c.get() + 1));
}

/// Which frozen heads feed the future encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderConfig {
    Sem,
    SemContrastive,
    #[default]
    SemDyn,
}

impl EncoderConfig {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderConfig::Sem => "sem",
            EncoderConfig::SemContrastive => "sem_contrastive",
            EncoderConfig::SemDyn => "sem_dyn",
        }
    }

    pub fn head_count(self) -> usize {
        match self {
            EncoderConfig::Sem => 1,
            _ => 2,
        }
    }
}

impl std::str::FromStr for EncoderConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sem" => Ok(EncoderConfig::Sem),
            "sem_contrastive" | "sem+contrastive" => Ok(EncoderConfig::SemContrastive),
            "sem_dyn" | "sem+dyn" => Ok(EncoderConfig::SemDyn),
            _ => Err(invalid("encoder_config", format!("unknown encoder configuration {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub encoders: EncoderConfig,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    /// Future frames per sample.
    pub window: usize,
    pub downsample: usize,
    pub seed: u64,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            encoders: EncoderConfig::SemDyn,
            height: 32,
            width: 32,
            patch: 8,
            embed_dim: 48,
            window: 4,
            downsample: 4,
            seed: 17,
        }
    }
}

impl VisionConfig {
    pub fn semantic_tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn dynamic_tokens(&self) -> usize {
        (self.height / self.downsample) * (self.width / self.downsample)
    }

    /// Token count of each head, in the order [`VisionFeatures::heads`] uses.
    pub fn head_tokens(&self) -> Vec<usize> {
        match self.encoders {
            EncoderConfig::Sem => vec![self.semantic_tokens()],
            EncoderConfig::SemContrastive => vec![self.semantic_tokens(); 2],
            EncoderConfig::SemDyn => vec![self.semantic_tokens(), self.dynamic_tokens()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |field: &str, msg: String| Error::Config {
            field: field.into(),
            msg,
        };
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(cfg_err("vision.patch", format!("{} does not tile {}x{}", self.patch, self.height, self.width)));
        }
        if self.downsample == 0 || self.height % self.downsample != 0 || self.width % self.downsample != 0 {
            return Err(cfg_err("vision.downsample", format!("{} does not tile the image", self.downsample)));
        }
        if self.embed_dim < 4 || self.embed_dim % 4 != 0 {
            return Err(cfg_err("vision.embed_dim", "must be a positive multiple of 4".into()));
        }
        if self.window == 0 {
            return Err(cfg_err("vision.window", "must be positive".into()));
        }
        Ok(())
    }
}

/// Future frames at a uniform quarter-rate grid after `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureFrameSample {
    pub frames: Vec<Image>,
    pub offsets: Vec<usize>,
}

/// Frames at offsets `T/4, 2T/4, 3T/4, T` after `t`; indices past the end of
/// the episode repeat its final frame.
pub fn sample_future_frames(episode: &Episode, t: usize, horizon: usize) -> Result<FutureFrameSample> {
    if horizon == 0 || horizon % 4 != 0 {
        return Err(invalid("sample_future_frames", format!("T must be divisible by 4, got {horizon}")));
    }
    let last = episode
        .frames
        .len()
        .checked_sub(1)
        .ok_or_else(|| invalid("sample_future_frames", "episode has no frames"))?;
    if t > last {
        return Err(invalid("sample_future_frames", format!("t={t} beyond last frame {last}")));
    }
    let stride = horizon / 4;
    let offsets: Vec<usize> = (1..=4).map(|k| k * stride).collect();
    let frames = offsets
        .iter()
        .map(|&o| episode.frames[(t + o).min(last)].clone())
        .collect();
    Ok(FutureFrameSample { frames, offsets })
}

/// Stacks images into a `[B, H, W, 3]` tensor.
pub fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid("stack_images", "no images"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for im in images {
        if im.height != h || im.width != w {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                lhs: vec![h, w, 3],
                rhs: vec![im.height, im.width, 3],
            });
        }
        data.extend(im.data.iter().map(|&v| f64::from(v)));
    }
    Tensor::new([images.len(), h, w, 3], data)
}

/// Frozen per-sample features, one `[B, tokens, embed_dim]` tensor per head.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionFeatures {
    pub heads: Vec<Tensor>,
}

impl VisionFeatures {
    pub fn batch(&self) -> usize {
        self.heads[0].shape()[0]
    }

    pub fn numel_per_sample(&self) -> usize {
        self.heads.iter().map(|h| h.numel() / h.shape()[0]).sum()
    }
}

struct PatchHead {
    proj: Linear,
    /// Token-mixing layer over the patch axis.
    mix: Linear,
}

pub struct VisionEncoders {
    cfg: VisionConfig,
    store: ParamStore,
    sem: PatchHead,
    contrastive: Option<PatchHead>,
    dynamic: Option<Linear>,
    sem_pos: Tensor,
    dyn_pos: Tensor,
}

impl VisionEncoders {
    pub fn new(cfg: &VisionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = derived_rng(cfg.seed, "vision", 0);
        let p = cfg.semantic_tokens();
        let patch_in = cfg.patch * cfg.patch * 3;
        let e = cfg.embed_dim;
        let mut head = |store: &mut ParamStore, name: &str| -> Result<PatchHead> {
            Ok(PatchHead {
                proj: Linear::new(store, &format!("{name}.proj"), patch_in, e, true, &mut rng)?,
                mix: Linear::new(store, &format!("{name}.mix"), p, p, true, &mut rng)?,
            })
        };
        let sem = head(&mut store, "sem")?;
        let contrastive = match cfg.encoders {
            EncoderConfig::SemContrastive => Some(head(&mut store, "con")?),
            _ => None,
        };
        let dynamic = match cfg.encoders {
            EncoderConfig::SemDyn => {
                let din = cfg.downsample * cfg.downsample * 3 * (cfg.window + 1);
                Some(Linear::new(&mut store, "dyn.proj", din, e, true, &mut rng)?)
            }
            _ => None,
        };
        store.set_frozen("", true);
        Ok(Self {
            sem_pos: grid_codes(cfg.height / cfg.patch, cfg.width / cfg.patch, e),
            dyn_pos: grid_codes(cfg.height / cfg.downsample, cfg.width / cfg.downsample, e),
            cfg: cfg.clone(),
            store,
            sem,
            contrastive,
            dynamic,
        })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    /// The frozen parameters; graphs passed to the `*_var` methods must be
    /// built on this store.
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> String {
        self.store.checksum("")
    }

    fn check_images(&self, g: &Graph<'_>, img: Var) -> Result<()> {
        let s = g.shape(img);
        if s.len() != 4 || s[1] != self.cfg.height || s[2] != self.cfg.width || s[3] != 3 {
            return Err(Error::ShapeMismatch {
                op: "encode_semantic",
                lhs: vec![0, self.cfg.height, self.cfg.width, 3],
                rhs: s.to_vec(),
            });
        }
        Ok(())
    }

    fn patch_head(&self, g: &mut Graph<'_>, head: &PatchHead, img: Var) -> Result<Var> {
        let patches = patchify(g, img, self.cfg.patch)?;
        let x = head.proj.forward(g, patches)?;
        let pos = g.constant(self.sem_pos.clone());
        let x = crate::nn::add_positional(g, x, pos)?;
        // residual token mixing: x + gelu(M x) along the patch axis
        let xt = g.permute(x, &[0, 2, 1])?;
        let m = head.mix.forward(g, xt)?;
        let m = g.gelu(m);
        let m = g.permute(m, &[0, 2, 1])?;
        g.add(x, m)
    }

    /// `[B, H, W, 3] -> [B, P, embed_dim]`. Gradients reach `img` if it
    /// requires grad; the encoder weights are constants.
    pub fn encode_semantic_var(&self, g: &mut Graph<'_>, img: Var) -> Result<Var> {
        bump();
        self.check_images(g, img)?;
        self.patch_head(g, &self.sem, img)
    }

    pub fn encode_semantic(&self, images: &[&Image]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.constant(stack_images(images)?);
        let y = self.encode_semantic_var(&mut g, x)?;
        Ok(g.value(y))
    }

    fn encode_contrastive(&self, g: &mut Graph<'_>, img: Var) -> Result<Var> {
        bump();
        let head = self.contrastive.as_ref().ok_or_else(|| invalid("encode", "no contrastive head configured"))?;
        let x = self.patch_head(g, head, img)?;
        // unit-scale tokens, as produced by a contrastive embedding head
        let x = g.layer_norm(x, None, None, 1e-5)?;
        Ok(g.scale(x, 1.0 / (self.cfg.embed_dim as f64).sqrt()))
    }

    /// Stacks the current frame and `window` future frames on the channel
    /// axis, folds 4x4 blocks into channels and projects each block.
    pub fn encode_dynamic(&self, current: &[&Image], future: &[&FutureFrameSample]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let y = self.encode_dynamic_var(&mut g, current, future)?;
        Ok(g.value(y))
    }

    fn encode_dynamic_var(&self, g: &mut Graph<'_>, current: &[&Image], future: &[&FutureFrameSample]) -> Result<Var> {
        bump();
        let proj = self.dynamic.as_ref().ok_or_else(|| invalid("encode_dynamic", "no dynamic head configured"))?;
        if current.len() != future.len() || current.is_empty() {
            return Err(invalid("encode_dynamic", "current/future batch sizes differ"));
        }
        let (h, w, k) = (self.cfg.height, self.cfg.width, self.cfg.window);
        let c = 3 * (k + 1);
        let mut data = Vec::with_capacity(current.len() * h * w * c);
        for (cur, fut) in current.iter().zip(future) {
            if fut.frames.len() != k {
                return Err(invalid(
                    "encode_dynamic",
                    format!("window holds {} frames, encoder expects {k}", fut.frames.len()),
                ));
            }
            let frames: Vec<&Image> = std::iter::once(*cur).chain(fut.frames.iter()).collect();
            for f in &frames {
                if f.height != h || f.width != w {
                    return Err(Error::ShapeMismatch {
                        op: "encode_dynamic",
                        lhs: vec![h, w, 3],
                        rhs: vec![f.height, f.width, 3],
                    });
                }
            }
            for px in 0..h * w {
                for f in &frames {
                    data.extend(f.data[px * 3..px * 3 + 3].iter().map(|&v| f64::from(v)));
                }
            }
        }
        let x = g.constant(Tensor::new([current.len(), h, w, c], data)?);
        let blocks = patchify(g, x, self.cfg.downsample)?;
        let y = proj.forward(g, blocks)?;
        let y = g.gelu(y);
        let pos = g.constant(self.dyn_pos.clone());
        crate::nn::add_positional(g, y, pos)
    }

    /// All configured heads for a batch. The semantic heads see the last
    /// future frame; the dynamic head sees the whole window.
    pub fn features(&self, current: &[&Image], future: &[&FutureFrameSample]) -> Result<VisionFeatures> {
        let mut g = Graph::inference(&self.store);
        let last: Vec<&Image> = future
            .iter()
            .map(|f| f.frames.last().ok_or_else(|| invalid("features", "empty future sample")))
            .collect::<Result<_>>()?;
        let img = g.constant(stack_images(&last)?);
        let mut heads = vec![self.encode_semantic_var(&mut g, img)?];
        match self.cfg.encoders {
            EncoderConfig::Sem => {}
            EncoderConfig::SemContrastive => heads.push(self.encode_contrastive(&mut g, img)?),
            EncoderConfig::SemDyn => heads.push(self.encode_dynamic_var(&mut g, current, future)?),
        }
        Ok(VisionFeatures {
            heads: heads.into_iter().map(|v| g.value(v)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_demos, RenderConfig, SourceTag, Task};

    fn episode() -> Episode {
        generate_demos(Task::PickPlace, 1, 0, &RenderConfig::default(), SourceTag::Robot, 1.0)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn offsets_follow_quarter_grid() {
        let ep = episode();
        assert_eq!(sample_future_frames(&ep, 0, 16).unwrap().offsets, vec![4, 8, 12, 16]);
        assert_eq!(sample_future_frames(&ep, 0, 8).unwrap().offsets, vec![2, 4, 6, 8]);
        assert!(sample_future_frames(&ep, 0, 10).is_err());
        assert!(sample_future_frames(&ep, ep.frames.len(), 16).is_err());
    }

    #[test]
    fn tail_repeats_final_frame() {
        let ep = episode();
        let last = ep.frames.len() - 1;
        let s = sample_future_frames(&ep, last - 3, 16).unwrap();
        for f in &s.frames[1..] {
            assert_eq!(f, &ep.frames[last]);
        }
    }

    #[test]
    fn token_shapes() {
        let ep = episode();
        let enc = VisionEncoders::new(&VisionConfig::default()).unwrap();
        let fut = sample_future_frames(&ep, 0, 16).unwrap();
        let sem = enc.encode_semantic(&[&ep.frames[0]]).unwrap();
        assert_eq!(sem.shape(), &[1, 16, 48]);
        let dynamic = enc.encode_dynamic(&[&ep.frames[0]], &[&fut]).unwrap();
        assert_eq!(dynamic.shape(), &[1, 64, 48]);
        assert_eq!(sem, enc.encode_semantic(&[&ep.frames[0]]).unwrap());
    }

    #[test]
    fn window_mismatch_rejected() {
        let ep = episode();
        let enc = VisionEncoders::new(&VisionConfig::default()).unwrap();
        let mut fut = sample_future_frames(&ep, 0, 16).unwrap();
        fut.frames.pop();
        assert!(enc.encode_dynamic(&[&ep.frames[0]], &[&fut]).is_err());
    }

    #[test]
    fn counter_tracks_calls() {
        let ep = episode();
        let enc = VisionEncoders::new(&VisionConfig::default()).unwrap();
        reset_call_count();
        enc.encode_semantic(&[&ep.frames[0]]).unwrap();
        assert_eq!(call_count(), 1);
        reset_call_count();
        assert_eq!(call_count(), 0);
    }
}
