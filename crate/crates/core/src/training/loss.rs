use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::future_encoder;
use crate::policy::Policy;
use crate::tensor::{Graph, Tensor, Var};
use crate::vision::VisionFeatures;

/// Scalar terms of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow_term: f64,
    pub align_term: Option<f64>,
    pub total: f64,
    /// Each sample's masked squared error divided by `T * A`; the batch flow
    /// term is the mean of these over all `B` samples.
    pub per_sample_flow: Vec<f64>,
}

/// Everything a loss needs besides the parameters. All tensors are batched.
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub obs: Tensor,
    pub instructions: Vec<Vec<u32>>,
    /// Frozen future features; required when conditions or alignment are used.
    pub features: Option<VisionFeatures>,
    pub a_tau: Tensor,
    pub tau: Tensor,
    pub v_star: Tensor,
    /// `[B, T, A]`, 1 where the flow term is supervised.
    pub flow_mask: Tensor,
    pub has_action_labels: Vec<bool>,
}

/// Which terms a variant optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// Inject encoded future conditions into the action head.
    pub conditions: bool,
    /// Weight of the condition-alignment term, if present.
    pub align: Option<f64>,
}

impl Objective {
    pub const STAGE1: Objective = Objective {
        conditions: true,
        align: None,
    };
    pub const STAGE2: Objective = Objective {
        conditions: false,
        align: Some(1.0),
    };
    pub const FLOW_ONLY: Objective = Objective {
        conditions: false,
        align: None,
    };
}

/// `1 - mean` of per-token cosine similarity between `pred` and `target`
/// (`[B, N_q, D]`), recorded on `g`.
pub fn align_term(g: &mut Graph<'_>, pred: Var, target: Var) -> Result<Var> {
    let cos = g.cosine_similarity(pred, target)?;
    let m = g.mean(cos);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

fn feature_vars(g: &mut Graph<'_>, inputs: &LossInputs) -> Result<Vec<Var>> {
    let f = inputs
        .features
        .as_ref()
        .ok_or_else(|| Error::Contract("future features are required for this objective".into()))?;
    Ok(f.heads.iter().map(|h| g.constant(h.clone())).collect())
}

/// Builds the loss of `objective` on `g`. Returns the scalar and its terms.
pub fn loss(g: &mut Graph<'_>, policy: &Policy, inputs: &LossInputs, objective: Objective) -> Result<(Var, LossBreakdown)> {
    let b = inputs.instructions.len();
    let shape = inputs.a_tau.shape().to_vec();
    let per = shape[1] * shape[2];
    let obs = g.constant(inputs.obs.clone());
    let (z, h) = policy.encode_context(g, obs, &inputs.instructions)?;

    let cond = if objective.conditions {
        let feats = feature_vars(g, inputs)?;
        Some(policy.encode_conditions(g, &feats)?)
    } else {
        None
    };
    let a_tau = g.constant(inputs.a_tau.clone());
    let tau = g.constant(inputs.tau.clone());
    let v_star = g.constant(inputs.v_star.clone());
    let mut mask_t = inputs.flow_mask.clone();
    for (row, &lab) in mask_t.data_mut().chunks_mut(per).zip(&inputs.has_action_labels) {
        if !lab {
            row.fill(0.0);
        }
    }
    let mask = g.constant(mask_t);

    let pred = policy.velocity(g, a_tau, tau, z, cond)?;
    let diff = g.sub(pred, v_star)?;
    let sq = g.mul(diff, diff)?;
    let masked = g.mul(sq, mask)?;
    let per_sample_flow: Vec<f64> = g.data(masked).chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
    let s = g.sum(masked);
    let flow = g.scale(s, 1.0 / (b * per) as f64);

    let (total, align) = if let Some(w) = objective.align {
        let feats = feature_vars(g, inputs)?;
        // a frozen encoder binds as constants, so the target carries no gradient
        let target = policy.encode_conditions(g, &feats)?;
        let pred_c = policy.predict_conditions(g, h)?;
        let al = align_term(g, pred_c, target)?;
        let weighted = if w == 1.0 { al } else { g.scale(al, w) };
        (g.add(flow, weighted)?, Some(al))
    } else {
        (flow, None)
    };
    let breakdown = LossBreakdown {
        flow_term: g.item(flow),
        align_term: align.map(|a| g.item(a)),
        total: g.item(total),
        per_sample_flow,
    };
    Ok((total, breakdown))
}

/// Stage-I loss: future conditions injected, flow term only. Every sample
/// must carry action labels.
pub fn loss_stage1(g: &mut Graph<'_>, policy: &Policy, inputs: &LossInputs) -> Result<(Var, LossBreakdown)> {
    if let Some(i) = inputs.has_action_labels.iter().position(|l| !l) {
        return Err(Error::Contract(format!("stage-I batch sample {i} has no action labels")));
    }
    loss(g, policy, inputs, Objective::STAGE1)
}

/// Stage-II loss: flow on labeled samples with context `[z]`, plus alignment
/// to the frozen encoder's conditions on every sample.
pub fn loss_stage2(g: &mut Graph<'_>, policy: &Policy, inputs: &LossInputs) -> Result<(Var, LossBreakdown)> {
    if !future_encoder::is_frozen(&policy.store) {
        return Err(Error::Contract("stage-II loss requires a frozen future encoder".into()));
    }
    loss(g, policy, inputs, Objective::STAGE2)
}

impl LossInputs {
    /// Draws flow targets for `batch` and, if `vision` is given, its frozen
    /// future features.
    pub fn from_batch(
        batch: &super::Batch,
        vision: Option<&crate::vision::VisionEncoders>,
        rng: &mut crate::rng::Rng,
    ) -> Result<Self> {
        let (a_tau, tau, v_star) = batch.flow_targets(rng)?;
        let features = match vision {
            Some(v) => {
                let cur: Vec<_> = batch.current.iter().collect();
                let fut: Vec<_> = batch.future.iter().collect();
                Some(v.features(&cur, &fut)?)
            }
            None => None,
        };
        Ok(Self {
            obs: batch.obs.clone(),
            instructions: batch.instructions.clone(),
            features,
            a_tau,
            tau,
            v_star,
            flow_mask: batch.flow_mask(),
            has_action_labels: batch.has_action_labels.clone(),
        })
    }
}
