//! The trainable policy: backbone, flow-matching action head, condition
//! query head and the future encoder, all in one [`ParamStore`].

mod backbone;
mod cond_query;
mod dit;

pub use backbone::Backbone;
pub use cond_query::CondQuery;
pub use dit::Dit;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::future_encoder::{FutureEncoder, FutureEncoderDims};
use crate::rng::{derived_rng, rng};
use crate::sim::{ACTION_DIM, INSTRUCTION_LEN, VOCAB_SIZE};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::vision::VisionConfig;

pub const BACKBONE: &str = backbone::PREFIX;
pub const DIT: &str = dit::PREFIX;
pub const COND_QUERY: &str = cond_query::PREFIX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub backbone_depth: usize,
    pub dit_depth: usize,
    pub ffn_mult: usize,
    pub n_queries: usize,
    pub cond_dim: usize,
    pub future_hidden: usize,
    pub future_blocks: usize,
    pub future_heads: usize,
    /// Trailing hidden states read by the condition query head.
    pub align_window: usize,
    /// Action chunk length `T`.
    pub horizon: usize,
    pub action_dim: usize,
    pub max_instruction: usize,
    pub vocab: usize,
    pub patch: usize,
    pub image: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            backbone_depth: 3,
            dit_depth: 3,
            ffn_mult: 4,
            n_queries: 16,
            cond_dim: 32,
            future_hidden: 64,
            future_blocks: 2,
            future_heads: 4,
            align_window: 4,
            horizon: 16,
            action_dim: ACTION_DIM,
            max_instruction: INSTRUCTION_LEN,
            vocab: VOCAB_SIZE,
            patch: 8,
            image: 32,
        }
    }
}

impl ModelConfig {
    /// Very small dimensions for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            dim: 16,
            heads: 2,
            backbone_depth: 1,
            dit_depth: 1,
            ffn_mult: 2,
            n_queries: 4,
            cond_dim: 8,
            future_hidden: 16,
            future_blocks: 1,
            future_heads: 2,
            ..Self::default()
        }
    }

    /// Backbone sequence length: patches, instruction tokens, action token.
    pub fn sequence_len(&self) -> usize {
        (self.image / self.patch).pow(2) + self.max_instruction + 1
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| {
            Err(Error::Config {
                field: field.into(),
                msg,
            })
        };
        if self.horizon == 0 || self.horizon % 4 != 0 {
            return err("horizon", "T must be divisible by 4".into());
        }
        for (name, dim, heads) in [
            ("dim", self.dim, self.heads),
            ("future_hidden", self.future_hidden, self.future_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return err(name, format!("{dim} not divisible by {heads} heads"));
            }
        }
        if self.dim % 2 != 0 {
            return err("dim", "must be even for the timestep embedding".into());
        }
        if self.patch == 0 || self.image % self.patch != 0 {
            return err("patch", format!("{} does not tile {}", self.patch, self.image));
        }
        if self.align_window == 0 || self.align_window > self.sequence_len() {
            return err("align_window", format!("must lie in 1..={}", self.sequence_len()));
        }
        if self.action_dim != ACTION_DIM {
            return err("action_dim", format!("the simulator uses {ACTION_DIM}-d actions"));
        }
        if self.vocab < VOCAB_SIZE {
            return err("vocab", format!("must cover the {VOCAB_SIZE} instruction tokens"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub dit: Dit,
    pub condq: CondQuery,
    pub future: FutureEncoder,
}

impl Policy {
    /// Fresh parameters drawn from `seed`. The future encoder is sized for the
    /// heads of `vision`.
    pub fn new(cfg: &ModelConfig, vision: &VisionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vision.height != cfg.image || vision.width != cfg.image {
            return Err(invalid("policy", "vision and model image sizes differ"));
        }
        let mut store = ParamStore::new();
        let mut r = derived_rng(seed, "policy", 0);
        let backbone = Backbone::new(&mut store, cfg, &mut r)?;
        let dit = Dit::new(&mut store, cfg, &mut r)?;
        let condq = CondQuery::new(&mut store, cfg, &mut r)?;
        let future = FutureEncoder::new(
            &mut store,
            FutureEncoderDims {
                heads_in: vision.encoders.head_count(),
                embed_dim: vision.embed_dim,
                hidden: cfg.future_hidden,
                n_queries: cfg.n_queries,
                cond_dim: cfg.cond_dim,
                blocks: cfg.future_blocks,
                attn_heads: cfg.future_heads,
                ffn_mult: cfg.ffn_mult,
            },
            &mut r,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            dit,
            condq,
            future,
        })
    }

    /// `(z, h)` for `obs[B, H, W, 3]`.
    pub fn encode_context(&self, g: &mut Graph<'_>, obs: Var, instructions: &[Vec<u32>]) -> Result<(Var, Var)> {
        self.backbone.forward(g, obs, instructions)
    }

    pub fn predict_conditions(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        self.condq.forward(g, h)
    }

    pub fn encode_conditions(&self, g: &mut Graph<'_>, heads: &[Var]) -> Result<Var> {
        self.future.forward(g, heads)
    }

    pub fn velocity(&self, g: &mut Graph<'_>, a_tau: Var, tau: Var, z: Var, cond: Option<Var>) -> Result<Var> {
        self.dit.velocity(g, a_tau, tau, z, cond)
    }

    /// Inference-only context encoding; never touches vision or future code.
    pub fn infer_context(&self, obs: &Tensor, instructions: &[Vec<u32>]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let o = g.constant(obs.clone());
        let (z, _) = self.encode_context(&mut g, o, instructions)?;
        Ok(g.value(z))
    }

    /// Euler integration of the learned velocity from `noise[B, T, A]`:
    /// `A <- A + v(A, k/n) / n` for `k = 0..n`.
    pub fn sample_actions(&self, z: &Tensor, cond: Option<&Tensor>, n_steps: usize, noise: Tensor) -> Result<Tensor> {
        if n_steps == 0 {
            return Err(invalid("sample_actions", "n_steps must be at least 1"));
        }
        let batch = z.shape()[0];
        if noise.shape() != [batch, self.cfg.horizon, self.cfg.action_dim] {
            return Err(Error::ShapeMismatch {
                op: "sample_actions",
                lhs: vec![batch, self.cfg.horizon, self.cfg.action_dim],
                rhs: noise.shape().to_vec(),
            });
        }
        let mut a = noise;
        let dt = 1.0 / n_steps as f64;
        for k in 0..n_steps {
            let mut g = Graph::inference(&self.store);
            let av = g.constant(a.clone());
            let tau = g.constant(Tensor::full([batch], k as f64 * dt));
            let zv = g.constant(z.clone());
            let cv = cond.map(|c| g.constant(c.clone()));
            let v = self.velocity(&mut g, av, tau, zv, cv)?;
            for (x, dv) in a.data_mut().iter_mut().zip(g.data(v)) {
                *x += dt * dv;
            }
        }
        Ok(a)
    }

    /// Standard-normal starting chunks, one independent stream per seed.
    pub fn initial_noise(&self, seeds: &[u64]) -> Tensor {
        let (t, d) = (self.cfg.horizon, self.cfg.action_dim);
        let mut data = Vec::with_capacity(seeds.len() * t * d);
        for &s in seeds {
            data.extend(Tensor::randn([t, d], 1.0, &mut rng(s)).into_data());
        }
        Tensor::new([seeds.len(), t, d], data).expect("noise shape")
    }

    /// `sample_actions` with noise drawn from `noise_seed`.
    pub fn sample_actions_seeded(&self, z: &Tensor, cond: Option<&Tensor>, n_steps: usize, noise_seed: u64) -> Result<Tensor> {
        let seeds: Vec<u64> = (0..z.shape()[0] as u64)
            .map(|i| crate::rng::derive(noise_seed, "noise", i))
            .collect();
        self.sample_actions(z, cond, n_steps, self.initial_noise(&seeds))
    }
}
