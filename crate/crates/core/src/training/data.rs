use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::sim::{Episode, Image, SourceTag, ACTION_DIM};
use crate::tensor::Tensor;
use crate::vision::{sample_future_frames, stack_images, FutureFrameSample};

/// Rectified-flow training triple for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTarget {
    pub a_tau: Tensor,
    pub tau: f64,
    pub v_star: Tensor,
}

/// `a_tau = (1 - tau) a0 + tau a1`, `v* = a1 - a0`.
pub fn flow_target_from(a1: &Tensor, a0: &Tensor, tau: f64) -> Result<FlowTarget> {
    if a1.shape() != a0.shape() {
        return Err(Error::ShapeMismatch {
            op: "make_flow_target",
            lhs: a1.shape().to_vec(),
            rhs: a0.shape().to_vec(),
        });
    }
    let a_tau = a0.data().iter().zip(a1.data()).map(|(x0, x1)| (1.0 - tau) * x0 + tau * x1).collect();
    let v_star = a0.data().iter().zip(a1.data()).map(|(x0, x1)| x1 - x0).collect();
    Ok(FlowTarget {
        a_tau: Tensor::new(a1.shape(), a_tau)?,
        tau,
        v_star: Tensor::new(a1.shape(), v_star)?,
    })
}

/// Draws `a0 ~ N(0, I)` and `tau ~ U[0, 1]`.
pub fn make_flow_target(a1: &Tensor, rng: &mut Rng) -> Result<FlowTarget> {
    let a0 = Tensor::randn(a1.shape(), 1.0, rng);
    let tau = rng.random_range(0.0..=1.0);
    flow_target_from(a1, &a0, tau)
}

/// Per-dimension affine map of raw actions onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNorm {
    pub lo: [f64; ACTION_DIM],
    pub hi: [f64; ACTION_DIM],
}

impl Default for ActionNorm {
    fn default() -> Self {
        Self {
            lo: [-1.0; ACTION_DIM],
            hi: [1.0; ACTION_DIM],
        }
    }
}

impl ActionNorm {
    /// Range of the labeled actions; degenerate dimensions keep `[-1, 1]`.
    pub fn fit<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Self {
        let mut lo = [f64::INFINITY; ACTION_DIM];
        let mut hi = [f64::NEG_INFINITY; ACTION_DIM];
        for e in episodes.into_iter().filter(|e| e.has_action_labels) {
            for a in &e.actions {
                for d in 0..ACTION_DIM {
                    lo[d] = lo[d].min(a[d]);
                    hi[d] = hi[d].max(a[d]);
                }
            }
        }
        for d in 0..ACTION_DIM {
            if !(hi[d] - lo[d] > 1e-6) {
                lo[d] = -1.0;
                hi[d] = 1.0;
            }
        }
        Self { lo, hi }
    }

    pub fn normalize(&self, a: [f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|d| (2.0 * (a[d] - self.lo[d]) / (self.hi[d] - self.lo[d]) - 1.0).clamp(-1.0, 1.0))
    }

    pub fn denormalize(&self, a: [f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        std::array::from_fn(|d| self.lo[d] + (a[d] + 1.0) * 0.5 * (self.hi[d] - self.lo[d]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub source_tag: SourceTag,
    pub weight: f64,
}

/// Sampling weights over data sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub sources: Vec<MixEntry>,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self::single(SourceTag::Robot)
    }
}

impl MixSpec {
    pub fn single(tag: SourceTag) -> Self {
        Self {
            sources: vec![MixEntry {
                source_tag: tag,
                weight: 1.0,
            }],
        }
    }

    pub fn new(entries: &[(SourceTag, f64)]) -> Result<Self> {
        let spec = Self {
            sources: entries
                .iter()
                .map(|&(source_tag, weight)| MixEntry { source_tag, weight })
                .collect(),
        };
        spec.normalized()
    }

    /// Validated copy with weights summing to one.
    pub fn normalized(&self) -> Result<Self> {
        if self.sources.iter().any(|e| !(e.weight >= 0.0) || !e.weight.is_finite()) {
            return Err(invalid("mix", "weights must be finite and nonnegative"));
        }
        let total: f64 = self.sources.iter().map(|e| e.weight).sum();
        if !(total > 0.0) {
            return Err(invalid("mix", "at least one source needs positive weight"));
        }
        Ok(Self {
            sources: self
                .sources
                .iter()
                .map(|e| MixEntry {
                    source_tag: e.source_tag,
                    weight: e.weight / total,
                })
                .collect(),
        })
    }

    pub fn weight(&self, tag: SourceTag) -> f64 {
        self.sources.iter().filter(|e| e.source_tag == tag).map(|e| e.weight).sum()
    }

    fn sample(&self, rng: &mut Rng) -> SourceTag {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for e in &self.sources {
            acc += e.weight;
            if u < acc {
                return e.source_tag;
            }
        }
        self.sources.iter().rev().find(|e| e.weight > 0.0).expect("validated").source_tag
    }
}

/// Episodes grouped by source for mixed sampling.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Self {
        Self { episodes }
    }

    pub fn labeled(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().filter(|e| e.has_action_labels)
    }

    fn indices(&self, tag: SourceTag, labeled_only: bool) -> Vec<usize> {
        self.episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.source_tag == tag && (!labeled_only || e.has_action_labels) && !e.is_empty())
            .map(|(i, _)| i)
            .collect()
    }

    /// Draws `n` `(episode, t)` pairs. Sources without usable episodes are
    /// dropped from the mix.
    pub fn sample(&self, mix: &MixSpec, n: usize, labeled_only: bool, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
        let mix = mix.normalized()?;
        let pools: Vec<(SourceTag, Vec<usize>)> = mix
            .sources
            .iter()
            .map(|e| (e.source_tag, self.indices(e.source_tag, labeled_only)))
            .collect();
        let usable = MixSpec {
            sources: mix
                .sources
                .iter()
                .zip(&pools)
                .map(|(e, (_, p))| MixEntry {
                    source_tag: e.source_tag,
                    weight: if p.is_empty() { 0.0 } else { e.weight },
                })
                .collect(),
        }
        .normalized()
        .map_err(|_| invalid("sample", "no episodes for any source in the mix"))?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let tag = usable.sample(rng);
            let pool = &pools.iter().find(|(t, _)| *t == tag).expect("source present").1;
            let ep = pool[rng.random_range(0..pool.len())];
            let t = rng.random_range(0..self.episodes[ep].len());
            out.push((ep, t));
        }
        Ok(out)
    }
}

/// One training batch. Actions are normalized; padded steps are marked
/// invalid in `action_valid`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Tensor,
    pub current: Vec<Image>,
    pub instructions: Vec<Vec<u32>>,
    pub future: Vec<FutureFrameSample>,
    /// `[B, T, A]`
    pub target_actions: Tensor,
    pub action_valid: Vec<Vec<bool>>,
    pub has_action_labels: Vec<bool>,
    pub source_tag: Vec<SourceTag>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn from_samples(episodes: &[Episode], samples: &[(usize, usize)], horizon: usize, norm: &ActionNorm) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("batch", "empty batch"));
        }
        let mut current = Vec::with_capacity(samples.len());
        let mut instructions = Vec::new();
        let mut future = Vec::new();
        let mut actions = Vec::with_capacity(samples.len() * horizon * ACTION_DIM);
        let mut valid = Vec::new();
        let mut labels = Vec::new();
        let mut tags = Vec::new();
        for &(ei, t) in samples {
            let ep = episodes.get(ei).ok_or_else(|| invalid("batch", format!("episode {ei} out of range")))?;
            current.push(ep.frames[t].clone());
            instructions.push(ep.instruction.clone());
            future.push(sample_future_frames(ep, t, horizon)?);
            let mut v = Vec::with_capacity(horizon);
            for k in 0..horizon {
                match ep.actions.get(t + k) {
                    Some(a) if ep.has_action_labels => {
                        actions.extend(norm.normalize(*a));
                        v.push(true);
                    }
                    Some(_) => {
                        actions.extend([0.0; ACTION_DIM]);
                        v.push(true);
                    }
                    None => {
                        actions.extend([0.0; ACTION_DIM]);
                        v.push(false);
                    }
                }
            }
            valid.push(v);
            labels.push(ep.has_action_labels);
            tags.push(ep.source_tag);
        }
        let refs: Vec<&Image> = current.iter().collect();
        Ok(Self {
            obs: stack_images(&refs)?,
            current,
            instructions,
            future,
            target_actions: Tensor::new([samples.len(), horizon, ACTION_DIM], actions)?,
            action_valid: valid,
            has_action_labels: labels,
            source_tag: tags,
        })
    }

    /// Flow targets for every sample, concatenated to `[B, T, A]`, plus `tau[B]`.
    pub fn flow_targets(&self, rng: &mut Rng) -> Result<(Tensor, Tensor, Tensor)> {
        let shape = self.target_actions.shape().to_vec();
        let per = shape[1] * shape[2];
        let mut a_tau = Vec::with_capacity(self.target_actions.numel());
        let mut v_star = Vec::with_capacity(self.target_actions.numel());
        let mut taus = Vec::with_capacity(shape[0]);
        for i in 0..shape[0] {
            let a1 = Tensor::new([shape[1], shape[2]], self.target_actions.data()[i * per..(i + 1) * per].to_vec())?;
            let ft = make_flow_target(&a1, rng)?;
            a_tau.extend_from_slice(ft.a_tau.data());
            v_star.extend_from_slice(ft.v_star.data());
            taus.push(ft.tau);
        }
        Ok((
            Tensor::new(shape.clone(), a_tau)?,
            Tensor::new([shape[0]], taus)?,
            Tensor::new(shape, v_star)?,
        ))
    }

    /// `[B, T, A]` mask of entries that supervise the flow term.
    pub fn flow_mask(&self) -> Tensor {
        let shape = self.target_actions.shape();
        let mut m = Vec::with_capacity(self.target_actions.numel());
        for (valid, &lab) in self.action_valid.iter().zip(&self.has_action_labels) {
            for &v in valid {
                let on = if v && lab { 1.0 } else { 0.0 };
                m.extend([on; ACTION_DIM]);
            }
        }
        Tensor::new(shape, m).expect("mask shape")
    }
}
