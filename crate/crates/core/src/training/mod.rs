//! Two-stage curriculum: losses, batches and trainers.

mod data;
mod loss;

pub use data::{flow_target_from, make_flow_target, ActionNorm, Batch, Dataset, FlowTarget, MixEntry, MixSpec};
pub use loss::{align_term, loss, loss_stage1, loss_stage2, LossBreakdown, LossInputs, Objective};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{Error, Result};
use crate::future_encoder;
use crate::policy::{ModelConfig, Policy, BACKBONE, COND_QUERY, DIT};
use crate::rng::derived_rng;
use crate::sim::SourceTag;
use crate::tensor::{Adam, Graph};
use crate::vision::{VisionConfig, VisionEncoders};

/// Budget and optimizer settings of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Emit a metric record every this many steps (and on the last step).
    pub log_every: usize,
    /// Weight of the alignment term in stage II and finetuning.
    pub align_weight: f64,
    /// Attach per-sample flow terms to each record.
    pub log_per_sample: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            log_every: 50,
            align_weight: 1.0,
            log_per_sample: false,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| {
            Err(Error::Config {
                field: field.into(),
                msg: msg.into(),
            })
        };
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return err("lr", "must be finite and nonnegative");
        }
        if self.log_every == 0 {
            return err("log_every", "must be positive");
        }
        if !(self.align_weight >= 0.0) || !self.align_weight.is_finite() {
            return err("align_weight", "must be finite and nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub episode: usize,
    pub t: usize,
    pub source_tag: SourceTag,
    pub has_action_labels: bool,
    pub flow: f64,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: String,
    pub variant: String,
    pub flow_term: f64,
    pub align_term: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleRecord>>,
}

impl MetricRecord {
    /// JSON with the wall-clock field removed, for reproducibility checks.
    pub fn timing_free_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("metric record serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_ms");
        }
        v.to_string()
    }
}

pub fn metrics_jsonl(records: &[MetricRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("metric record serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
}

/// Variant labels written into checkpoints and metrics.
pub mod variant {
    pub const WOG_FULL: &str = "wog_full";
    pub const WOG_WO_COTRAIN: &str = "wog_wo_cotrain";
    pub const VANILLA: &str = "vanilla";
}

struct Run<'a> {
    data: &'a Dataset,
    mix: &'a MixSpec,
    cfg: &'a StageConfig,
    stage: Stage,
    variant: &'a str,
    objective: Objective,
    labeled_only: bool,
    vision_cfg: &'a VisionConfig,
    norm: &'a ActionNorm,
}

impl Run<'_> {
    fn needs_vision(&self) -> bool {
        self.objective.conditions || self.objective.align.is_some()
    }

    fn execute(&self, policy: &mut Policy) -> Result<Vec<MetricRecord>> {
        self.cfg.validate()?;
        let vision = if self.needs_vision() {
            Some(VisionEncoders::new(self.vision_cfg)?)
        } else {
            None
        };
        let vision_sum = vision.as_ref().map(|v| v.checksum());
        let mut rng = derived_rng(self.cfg.seed, &format!("train-{}-{}", self.stage.as_str(), self.variant), 0);
        let mut opt = Adam::new(self.cfg.lr);
        let start = Instant::now();
        let mut metrics = Vec::new();
        policy.store.zero_grads();
        for step in 1..=self.cfg.steps {
            let samples = self.data.sample(self.mix, self.cfg.batch_size, self.labeled_only, &mut rng)?;
            let batch = Batch::from_samples(&self.data.episodes, &samples, policy.cfg.horizon, self.norm)?;
            let inputs = LossInputs::from_batch(&batch, vision.as_ref(), &mut rng)?;
            let mut g = Graph::with_params(&policy.store);
            let (l, br) = loss(&mut g, policy, &inputs, self.objective)?;
            if !br.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    flow: br.flow_term,
                    align: br.align_term,
                });
            }
            g.backward(l)?;
            let grads = g.param_grads();
            drop(g);
            policy.store.accumulate_grads(&grads)?;
            opt.step(&mut policy.store);

            if step % self.cfg.log_every == 0 || step == self.cfg.steps {
                let per_sample = self.cfg.log_per_sample.then(|| {
                    samples
                        .iter()
                        .zip(&br.per_sample_flow)
                        .enumerate()
                        .map(|(i, (&(episode, t), &flow))| SampleRecord {
                            episode,
                            t,
                            source_tag: batch.source_tag[i],
                            has_action_labels: batch.has_action_labels[i],
                            flow,
                        })
                        .collect()
                });
                metrics.push(MetricRecord {
                    step,
                    stage: self.stage.as_str().to_string(),
                    variant: self.variant.to_string(),
                    flow_term: br.flow_term,
                    align_term: br.align_term,
                    total: br.total,
                    lr: self.cfg.lr,
                    wall_ms: start.elapsed().as_millis() as u64,
                    per_sample,
                });
            }
        }
        if let (Some(v), Some(before)) = (&vision, vision_sum) {
            if v.checksum() != before {
                return Err(Error::Contract("vision encoder parameters changed during training".into()));
            }
        }
        Ok(metrics)
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::json!({
            "stage": self.stage.as_str(),
            "variant": self.variant,
            "train": self.cfg,
            "mix": self.mix,
        })
    }
}

/// Stage I: the backbone, future encoder and action head learn jointly with
/// future conditions injected. Only labeled episodes are sampled.
pub fn train_stage1(
    data: &Dataset,
    mix: &MixSpec,
    model: &ModelConfig,
    vision: &VisionConfig,
    cfg: &StageConfig,
) -> Result<TrainOutput> {
    let mut policy = Policy::new(model, vision, cfg.seed)?;
    policy.store.set_frozen(COND_QUERY, true);
    let norm = ActionNorm::fit(data.labeled());
    let run = Run {
        data,
        mix,
        cfg,
        stage: Stage::One,
        variant: variant::WOG_FULL,
        objective: Objective::STAGE1,
        labeled_only: true,
        vision_cfg: vision,
        norm: &norm,
    };
    let metrics = run.execute(&mut policy)?;
    let checkpoint = Checkpoint::from_policy(&policy, Stage::One, variant::WOG_FULL, vision, cfg.seed, &norm, run.echo());
    Ok(TrainOutput { checkpoint, metrics })
}

fn second_stage(
    data: &Dataset,
    mix: &MixSpec,
    cfg: &StageConfig,
    init: &Checkpoint,
    stage: Stage,
    variant: &str,
    objective: Objective,
) -> Result<TrainOutput> {
    let mut policy = init.to_policy()?;
    let frozen_sum = future_encoder::freeze(&mut policy.store);
    for prefix in [BACKBONE, DIT, COND_QUERY] {
        policy.store.set_frozen(prefix, false);
    }
    let run = Run {
        data,
        mix,
        cfg,
        stage,
        variant,
        objective,
        labeled_only: objective.align.is_none(),
        vision_cfg: &init.vision,
        norm: &init.action_norm,
    };
    let metrics = run.execute(&mut policy)?;
    let after = future_encoder::checksum(&policy.store);
    if after != frozen_sum {
        return Err(Error::Contract("future encoder changed while frozen".into()));
    }
    let mut echo = run.echo();
    echo["init_variant"] = serde_json::Value::String(init.variant.clone());
    let checkpoint = Checkpoint::from_policy(&policy, stage, variant, &init.vision, init.seed, &init.action_norm, echo);
    Ok(TrainOutput { checkpoint, metrics })
}

/// Stage II: the future encoder is frozen, the backbone learns to predict its
/// conditions, and the action head drops them. Unlabeled episodes supervise
/// only the alignment term.
pub fn train_stage2(data: &Dataset, mix: &MixSpec, cfg: &StageConfig, init: &Checkpoint) -> Result<TrainOutput> {
    init.require_stage("train_stage2", "requires stage-I init", &[Stage::One])?;
    let objective = Objective {
        conditions: false,
        align: Some(cfg.align_weight),
    };
    second_stage(data, mix, cfg, init, Stage::Two, variant::WOG_FULL, objective)
}

/// Stage II without condition supervision: flow term only, labeled data only.
pub fn train_stage2_wo_cotrain(data: &Dataset, mix: &MixSpec, cfg: &StageConfig, init: &Checkpoint) -> Result<TrainOutput> {
    init.require_stage("train_stage2", "requires stage-I init", &[Stage::One])?;
    second_stage(data, mix, cfg, init, Stage::Two, variant::WOG_WO_COTRAIN, Objective::FLOW_ONLY)
}

/// Downstream finetuning with the stage-II objective.
pub fn finetune(data: &Dataset, mix: &MixSpec, cfg: &StageConfig, init: &Checkpoint) -> Result<TrainOutput> {
    init.require_stage("finetune", "requires stage-II init", &[Stage::Two, Stage::Finetune])?;
    let objective = if init.variant == variant::WOG_FULL {
        Objective {
            conditions: false,
            align: Some(cfg.align_weight),
        }
    } else {
        Objective::FLOW_ONLY
    };
    let v = init.variant.clone();
    second_stage(data, mix, cfg, init, Stage::Finetune, &v, objective)
}

/// Flow-only policy trained from scratch without any future information. The
/// result is tagged stage II so it can be evaluated and finetuned like the
/// other variants.
pub fn train_vanilla(
    data: &Dataset,
    mix: &MixSpec,
    model: &ModelConfig,
    vision: &VisionConfig,
    cfg: &StageConfig,
) -> Result<TrainOutput> {
    let mut policy = Policy::new(model, vision, cfg.seed)?;
    policy.store.set_frozen(COND_QUERY, true);
    let frozen_sum = future_encoder::freeze(&mut policy.store);
    let norm = ActionNorm::fit(data.labeled());
    let run = Run {
        data,
        mix,
        cfg,
        stage: Stage::Two,
        variant: variant::VANILLA,
        objective: Objective::FLOW_ONLY,
        labeled_only: true,
        vision_cfg: vision,
        norm: &norm,
    };
    let metrics = run.execute(&mut policy)?;
    if future_encoder::checksum(&policy.store) != frozen_sum {
        return Err(Error::Contract("future encoder changed while frozen".into()));
    }
    let checkpoint = Checkpoint::from_policy(&policy, Stage::Two, variant::VANILLA, vision, cfg.seed, &norm, run.echo());
    Ok(TrainOutput { checkpoint, metrics })
}

/// Finite-difference check of the composed stage-I loss on one fixed batch
/// drawn from `data`.
pub fn stage1_loss_grad_check(
    data: &Dataset,
    model: &ModelConfig,
    vision: &VisionConfig,
    batch_size: usize,
    seed: u64,
    eps: f64,
    max_per_param: Option<usize>,
) -> Result<crate::tensor::GradCheckReport> {
    let mut policy = Policy::new(model, vision, seed)?;
    policy.store.set_frozen(COND_QUERY, true);
    let enc = VisionEncoders::new(vision)?;
    let norm = ActionNorm::fit(data.labeled());
    let mut rng = derived_rng(seed, "gradcheck", 0);
    let mix = MixSpec {
        sources: SourceTag::ALL
            .iter()
            .map(|&source_tag| MixEntry { source_tag, weight: 1.0 })
            .collect(),
    };
    let samples = data.sample(&mix, batch_size, true, &mut rng)?;
    let batch = Batch::from_samples(&data.episodes, &samples, model.horizon, &norm)?;
    let inputs = LossInputs::from_batch(&batch, Some(&enc), &mut rng)?;
    crate::tensor::grad_check_params(&policy.store, |g| Ok(loss_stage1(g, &policy, &inputs)?.0), eps, max_per_param)
}
