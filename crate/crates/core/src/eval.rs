//! Closed-loop receding-horizon evaluation, ID/OOD suites, the ablation grid
//! and the condition probe.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{invalid, Error, Result};
use crate::future_encoder;
use crate::policy::Policy;
use crate::rng::{derive, derived_rng};
use crate::sim::{self, expert_action, instruction, ood_transform, render, Image, OodKind, RenderConfig, Task, TaskParams, WorldState};
use crate::tensor::{Graph, Tensor};
use crate::training::{
    self, train_stage1, train_stage2, train_stage2_wo_cotrain, train_vanilla, ActionNorm, Batch, Dataset, MetricRecord, MixSpec,
    StageConfig,
};
use crate::vision::{self, VisionConfig, VisionEncoders};

pub const DEFAULT_EXEC_HORIZON: usize = 8;
pub const DEFAULT_MAX_STEPS: usize = 80;
pub const DEFAULT_TRIALS: usize = 50;
pub const DEFAULT_SAMPLER_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    Id,
    Background,
    Light,
    NovelObject,
}

impl Setup {
    pub const ALL: [Setup; 4] = [Setup::Id, Setup::Background, Setup::Light, Setup::NovelObject];

    pub fn as_str(self) -> &'static str {
        match self {
            Setup::Id => "id",
            Setup::Background => "background",
            Setup::Light => "light",
            Setup::NovelObject => "novel_object",
        }
    }

    pub fn ood(self) -> Option<OodKind> {
        match self {
            Setup::Id => None,
            Setup::Background => Some(OodKind::Background),
            Setup::Light => Some(OodKind::Light),
            Setup::NovelObject => Some(OodKind::NovelObject),
        }
    }
}

impl FromStr for Setup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Setup::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| invalid("setup", format!("unknown setup {s:?}")))
    }
}

/// Parses `id,background,...` into setups.
pub fn parse_setups(s: &str) -> Result<Vec<Setup>> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub task: Task,
    pub setup: Setup,
}

/// Every `(task, setup)` combination, tasks outermost.
pub fn suite(tasks: &[Task], setups: &[Setup]) -> Vec<SuiteCell> {
    tasks
        .iter()
        .flat_map(|&task| setups.iter().map(move |&setup| SuiteCell { task, setup }))
        .collect()
}

/// Anything that can propose action chunks for a batch of live episodes.
pub trait Controller {
    /// Length of each returned chunk.
    fn horizon(&self) -> usize;

    /// One chunk per state. `keys[i] = (episode seed, replan index)` seeds
    /// any sampling noise so results do not depend on batch composition.
    fn plan(&self, states: &[&WorldState], images: &[Image], keys: &[(u64, u64)]) -> Result<Vec<Vec<[f64; 3]>>>;

    fn label(&self) -> String;

    /// Identifies the parameters behind the controller.
    fn fingerprint(&self) -> String;

    fn sampler_steps(&self) -> usize {
        0
    }
}

/// Inference wrapper around a trained policy. Only the backbone and action
/// head run; conditions are never computed.
#[derive(Debug, Clone)]
pub struct PolicyHandle {
    pub policy: Policy,
    pub norm: ActionNorm,
    pub label: String,
    pub n_steps: usize,
    pub noise_seed: u64,
}

impl PolicyHandle {
    pub fn new(policy: Policy, norm: ActionNorm, label: impl Into<String>) -> Self {
        Self {
            policy,
            norm,
            label: label.into(),
            n_steps: DEFAULT_SAMPLER_STEPS,
            noise_seed: 0,
        }
    }

    /// Handles are built from stage-II or finetuned checkpoints only.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.require_stage("evaluate", "requires stage-II or finetune checkpoint", &[Stage::Two, Stage::Finetune])?;
        Ok(Self::new(ck.to_policy()?, ck.action_norm.clone(), ck.variant.clone()))
    }
}

impl Controller for PolicyHandle {
    fn horizon(&self) -> usize {
        self.policy.cfg.horizon
    }

    fn plan(&self, states: &[&WorldState], images: &[Image], keys: &[(u64, u64)]) -> Result<Vec<Vec<[f64; 3]>>> {
        let refs: Vec<&Image> = images.iter().collect();
        let obs = vision::stack_images(&refs)?;
        let instr: Vec<Vec<u32>> = states.iter().map(|s| instruction(s)).collect();
        let z = self.policy.infer_context(&obs, &instr)?;
        let seeds: Vec<u64> = keys
            .iter()
            .map(|&(ep, k)| derive(derive(self.noise_seed, "episode", ep), "chunk", k))
            .collect();
        let noise = self.policy.initial_noise(&seeds);
        let a = self.policy.sample_actions(&z, None, self.n_steps, noise)?;
        let (t, d) = (self.policy.cfg.horizon, self.policy.cfg.action_dim);
        Ok(a
            .data()
            .chunks(t * d)
            .map(|chunk| {
                chunk
                    .chunks(d)
                    .map(|row| self.norm.denormalize([row[0], row[1], row[2]]))
                    .collect()
            })
            .collect())
    }

    fn label(&self) -> String {
        self.label.clone()
    }

    fn fingerprint(&self) -> String {
        format!("wog-{} params:{}", env!("CARGO_PKG_VERSION"), &self.policy.store.checksum("")[..16])
    }

    fn sampler_steps(&self) -> usize {
        self.n_steps
    }
}

/// The scripted expert packaged as a chunking controller.
#[derive(Debug, Clone, Copy)]
pub struct ExpertController {
    pub horizon: usize,
}

impl Default for ExpertController {
    fn default() -> Self {
        Self { horizon: 16 }
    }
}

impl Controller for ExpertController {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn plan(&self, states: &[&WorldState], _images: &[Image], _keys: &[(u64, u64)]) -> Result<Vec<Vec<[f64; 3]>>> {
        states
            .iter()
            .map(|s| {
                let mut s = (*s).clone();
                let mut chunk = Vec::with_capacity(self.horizon);
                for _ in 0..self.horizon {
                    let a = expert_action(&s);
                    s = sim::step(&s, a)?;
                    chunk.push(a);
                }
                Ok(chunk)
            })
            .collect()
    }

    fn label(&self) -> String {
        "expert".into()
    }

    fn fingerprint(&self) -> String {
        format!("wog-{} expert", env!("CARGO_PKG_VERSION"))
    }
}

/// Initial conditions of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub task: Task,
    pub seed: u64,
    pub render: RenderConfig,
    pub params: TaskParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub actions: Vec<[f64; 3]>,
    pub success: bool,
    /// Number of chunks requested from the controller.
    pub chunks: usize,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Single receding-horizon episode.
pub fn rollout(ctrl: &dyn Controller, env: &EnvSpec, max_steps: usize, exec_horizon: usize) -> Result<Rollout> {
    Ok(rollout_batch(ctrl, std::slice::from_ref(env), max_steps, exec_horizon)?.remove(0))
}

/// Runs many episodes in lockstep so the controller sees batched
/// observations. Each live episode executes the first `exec_horizon` actions
/// of every chunk, then re-observes; it ends on success or `max_steps`.
pub fn rollout_batch(ctrl: &dyn Controller, envs: &[EnvSpec], max_steps: usize, exec_horizon: usize) -> Result<Vec<Rollout>> {
    if exec_horizon == 0 || exec_horizon > ctrl.horizon() {
        return Err(invalid(
            "rollout",
            format!("exec_horizon {exec_horizon} must lie in 1..={}", ctrl.horizon()),
        ));
    }
    let mut states = envs
        .iter()
        .map(|e| sim::reset(e.task, e.seed, &e.params))
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<Rollout> = states
        .iter()
        .map(|s| Rollout {
            actions: Vec::new(),
            success: sim::success(s),
            chunks: 0,
        })
        .collect();
    for replan in 0.. {
        let live: Vec<usize> = (0..envs.len())
            .filter(|&i| !out[i].success && out[i].actions.len() < max_steps)
            .collect();
        if live.is_empty() {
            break;
        }
        let images = live
            .iter()
            .map(|&i| render(&states[i], &envs[i].render))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&WorldState> = live.iter().map(|&i| &states[i]).collect();
        let keys: Vec<(u64, u64)> = live.iter().map(|&i| (envs[i].seed, replan)).collect();
        let chunks = ctrl.plan(&refs, &images, &keys)?;
        for (&i, chunk) in live.iter().zip(chunks) {
            out[i].chunks += 1;
            for a in chunk.into_iter().take(exec_horizon) {
                if out[i].actions.len() >= max_steps {
                    break;
                }
                let a = a.map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 });
                states[i] = sim::step(&states[i], a)?;
                out[i].actions.push(a);
                if sim::success(&states[i]) {
                    out[i].success = true;
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Trial count, horizon and scene settings shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_trials: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub exec_horizon: usize,
    pub render: RenderConfig,
    pub params: TaskParams,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_trials: DEFAULT_TRIALS,
            seed: 0,
            max_steps: DEFAULT_MAX_STEPS,
            exec_horizon: DEFAULT_EXEC_HORIZON,
            render: RenderConfig::default(),
            params: TaskParams::default(),
        }
    }
}

impl EvalOptions {
    /// Scene of trial `i` of `cell`. ID and OOD cells share initial seeds.
    pub fn env(&self, cell: SuiteCell, i: usize) -> EnvSpec {
        let (render, params) = match cell.setup.ood() {
            Some(kind) => ood_transform(&self.render, &self.params, kind),
            None => (self.render.clone(), self.params.clone()),
        };
        EnvSpec {
            task: cell.task,
            seed: derive(self.seed, &format!("eval-{}", cell.task), i as u64),
            render,
            params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub label: String,
    pub task: Task,
    pub setup: Setup,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fingerprint: String,
    pub cells: Vec<EvalCell>,
    pub options: EvalOptions,
    pub sampler_steps: usize,
    pub vision_calls: u64,
    pub future_encoder_calls: u64,
}

impl EvalReport {
    pub fn cell(&self, task: Task, setup: Setup) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.task == task && c.setup == setup)
    }

    pub fn rate(&self, task: Task, setup: Setup) -> Option<f64> {
        self.cell(task, setup).map(|c| c.success_rate)
    }

    /// One cell per line.
    pub fn to_jsonl(&self) -> String {
        self.cells
            .iter()
            .map(|c| serde_json::to_string(c).expect("cell serializes") + "\n")
            .collect()
    }

    /// Plain-text `ID -> OOD` table.
    pub fn table(&self) -> String {
        let mut setups: Vec<Setup> = self.cells.iter().map(|c| c.setup).collect();
        setups.sort();
        setups.dedup();
        let mut tasks: Vec<Task> = self.cells.iter().map(|c| c.task).collect();
        tasks.sort();
        tasks.dedup();
        let mut s = format!("{:<14}", "task");
        for st in &setups {
            let _ = write!(s, " {:>20}", st.as_str());
        }
        s.push('\n');
        for t in tasks {
            let _ = write!(s, "{:<14}", t.as_str());
            let id = self.rate(t, Setup::Id);
            for &st in &setups {
                let r = self.rate(t, st).unwrap_or(f64::NAN);
                let txt = match (st, id) {
                    (Setup::Id, _) | (_, None) => format!("{:.1}%", 100.0 * r),
                    (_, Some(id)) => format!("{:.1}% ({:+.1})", 100.0 * r, -100.0 * relative_drop(id, r)),
                };
                let _ = write!(s, " {txt:>20}");
            }
            s.push('\n');
        }
        s
    }
}

/// `(id - ood) / id`, or zero when the ID rate is zero.
pub fn relative_drop(id: f64, ood: f64) -> f64 {
    if id > 0.0 {
        (id - ood) / id
    } else {
        0.0
    }
}

/// Runs every cell of `suite` for `opts.n_trials` seeded trials. Fails if any
/// frozen-vision or future-encoder code runs during evaluation.
pub fn evaluate(ctrl: &dyn Controller, suite: &[SuiteCell], opts: &EvalOptions) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(invalid("evaluate", "empty suite"));
    }
    if opts.n_trials == 0 {
        return Err(invalid("evaluate", "n_trials must be positive"));
    }
    vision::reset_call_count();
    future_encoder::reset_call_count();
    let mut cells = Vec::with_capacity(suite.len());
    for &cell in suite {
        let envs: Vec<EnvSpec> = (0..opts.n_trials).map(|i| opts.env(cell, i)).collect();
        let runs = rollout_batch(ctrl, &envs, opts.max_steps, opts.exec_horizon)?;
        let successes = runs.iter().filter(|r| r.success).count();
        cells.push(EvalCell {
            label: ctrl.label(),
            task: cell.task,
            setup: cell.setup,
            trials: opts.n_trials,
            successes,
            success_rate: successes as f64 / opts.n_trials as f64,
            mean_episode_length: runs.iter().map(|r| r.len() as f64).sum::<f64>() / opts.n_trials as f64,
        });
    }
    let (vc, fc) = (vision::call_count(), future_encoder::call_count());
    if vc != 0 || fc != 0 {
        return Err(Error::Contract(format!(
            "evaluation invoked frozen encoders (vision {vc}, future {fc})"
        )));
    }
    Ok(EvalReport {
        label: ctrl.label(),
        fingerprint: ctrl.fingerprint(),
        cells,
        options: opts.clone(),
        sampler_steps: ctrl.sampler_steps(),
        vision_calls: vc,
        future_encoder_calls: fc,
    })
}

// ---- ablation -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    WogWoCotrain,
    WogFull,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::WogWoCotrain, Variant::WogFull];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => training::variant::VANILLA,
            Variant::WogWoCotrain => training::variant::WOG_WO_COTRAIN,
            Variant::WogFull => training::variant::WOG_FULL,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| invalid("variant", format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub model: crate::policy::ModelConfig,
    pub vision: VisionConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub mix: MixSpec,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub suite: Vec<SuiteCell>,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub optimizer_steps: usize,
    pub metrics: Vec<MetricRecord>,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub runs: Vec<VariantRun>,
    /// Stage-I checkpoint of each seed, shared by the WoG variants.
    pub stage1: Vec<(u64, Checkpoint)>,
}

/// Fails unless every `(name, steps)` pair consumed the same number of steps.
pub fn check_budgets(budgets: &[(String, usize)]) -> Result<()> {
    if let Some((_, first)) = budgets.first() {
        if budgets.iter().any(|(_, s)| s != first) {
            let list: Vec<String> = budgets.iter().map(|(n, s)| format!("{n}={s}")).collect();
            return Err(Error::BudgetMismatch(list.join(", ")));
        }
    }
    Ok(())
}

/// Planned optimizer steps of a variant.
pub fn planned_steps(variant: Variant, stage1: &StageConfig, stage2: &StageConfig) -> usize {
    match variant {
        Variant::Vanilla | Variant::WogWoCotrain | Variant::WogFull => stage1.steps + stage2.steps,
    }
}

fn steps_in(metrics: &[MetricRecord]) -> usize {
    metrics.last().map_or(0, |m| m.step)
}

/// Trains every variant for every seed on shared data, evaluates each on the
/// shared suite and checks that all consumed the same number of steps.
/// `progress` receives one line per finished run.
pub fn run_ablation(data: &Dataset, cfg: &AblationConfig, progress: &mut dyn FnMut(&str)) -> Result<AblationResult> {
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(invalid("ablation", "needs at least one seed and one variant"));
    }
    let mut runs = Vec::new();
    let mut stage1 = Vec::new();
    for &seed in &cfg.seeds {
        let s1 = StageConfig {
            seed,
            ..cfg.stage1.clone()
        };
        let s2 = StageConfig {
            seed,
            ..cfg.stage2.clone()
        };
        let mut first = None;
        let needs_stage1 = cfg.variants.iter().any(|v| *v != Variant::Vanilla);
        if needs_stage1 {
            let out = train_stage1(data, &cfg.mix, &cfg.model, &cfg.vision, &s1)?;
            progress(&format!("seed {seed}: stage I done, flow {:.4}", out.metrics.last().map_or(f64::NAN, |m| m.flow_term)));
            first = Some(out);
        }
        for &variant in &cfg.variants {
            let (checkpoint, metrics, steps) = match variant {
                Variant::Vanilla => {
                    let sv = StageConfig {
                        steps: planned_steps(variant, &s1, &s2),
                        ..s1.clone()
                    };
                    let out = train_vanilla(data, &cfg.mix, &cfg.model, &cfg.vision, &sv)?;
                    let n = steps_in(&out.metrics);
                    (out.checkpoint, out.metrics, n)
                }
                Variant::WogWoCotrain | Variant::WogFull => {
                    let init = first.as_ref().expect("stage I trained");
                    let out = if variant == Variant::WogFull {
                        train_stage2(data, &cfg.mix, &s2, &init.checkpoint)?
                    } else {
                        train_stage2_wo_cotrain(data, &cfg.mix, &s2, &init.checkpoint)?
                    };
                    let n = steps_in(&init.metrics) + steps_in(&out.metrics);
                    let mut m = init.metrics.clone();
                    m.extend(out.metrics);
                    (out.checkpoint, m, n)
                }
            };
            let handle = PolicyHandle::from_checkpoint(&checkpoint)?;
            let report = evaluate(&handle, &cfg.suite, &cfg.eval)?;
            progress(&format!(
                "seed {seed}: {} steps={steps} {}",
                variant.as_str(),
                report
                    .cells
                    .iter()
                    .map(|c| format!("{}/{}={:.2}", c.task, c.setup.as_str(), c.success_rate))
                    .collect::<Vec<_>>()
                    .join(" ")
            ));
            runs.push(VariantRun {
                variant,
                seed,
                optimizer_steps: steps,
                metrics,
                checkpoint,
                report,
            });
        }
        if let Some(out) = first {
            stage1.push((seed, out.checkpoint));
        }
    }
    let budgets: Vec<(String, usize)> = runs
        .iter()
        .map(|r| (format!("{}@{}", r.variant.as_str(), r.seed), r.optimizer_steps))
        .collect();
    check_budgets(&budgets)?;
    Ok(AblationResult { runs, stage1 })
}

impl AblationResult {
    pub fn per_seed(&self, variant: Variant, task: Task, setup: Setup) -> Vec<(u64, f64)> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.report.rate(task, setup).map(|x| (r.seed, x)))
            .collect()
    }

    pub fn mean(&self, variant: Variant, task: Task, setup: Setup) -> f64 {
        let v = self.per_seed(variant, task, setup);
        v.iter().map(|x| x.1).sum::<f64>() / v.len().max(1) as f64
    }

    /// Rows per variant: mean success with min/max across seeds per cell.
    pub fn table(&self) -> String {
        let mut cells: Vec<SuiteCell> = Vec::new();
        for r in &self.runs {
            for c in &r.report.cells {
                let sc = SuiteCell {
                    task: c.task,
                    setup: c.setup,
                };
                if !cells.contains(&sc) {
                    cells.push(sc);
                }
            }
        }
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        let mut s = format!("{:<16}", "variant");
        for c in &cells {
            let _ = write!(s, " {:>26}", format!("{}/{}", c.task, c.setup.as_str()));
        }
        s.push('\n');
        for v in variants {
            let _ = write!(s, "{:<16}", v.as_str());
            for c in &cells {
                let xs: Vec<f64> = self.per_seed(v, c.task, c.setup).into_iter().map(|x| x.1).collect();
                let mean = xs.iter().sum::<f64>() / xs.len().max(1) as f64;
                let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let _ = write!(
                    s,
                    " {:>26}",
                    format!("{:.1}% [{:.0}..{:.0}]", 100.0 * mean, 100.0 * lo, 100.0 * hi)
                );
            }
            s.push('\n');
        }
        s
    }
}

// ---- condition probe ------------------------------------------------------

pub const PROBE_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mean_token_cosine: f64,
    /// Counts of per-token cosines over `PROBE_BINS` equal bins of `[-1, 1]`.
    pub histogram: Vec<u64>,
    pub samples: usize,
    pub tokens: usize,
}

impl ProbeReport {
    pub fn from_cosines(cos: &[f64], samples: usize) -> Self {
        let mut histogram = vec![0u64; PROBE_BINS];
        for &c in cos {
            let b = (((c + 1.0) / 2.0) * PROBE_BINS as f64).floor().clamp(0.0, (PROBE_BINS - 1) as f64);
            histogram[b as usize] += 1;
        }
        Self {
            mean_token_cosine: cos.iter().sum::<f64>() / cos.len().max(1) as f64,
            histogram,
            samples,
            tokens: cos.len(),
        }
    }
}

/// Row-wise cosine similarity of `[.., D]` tensors.
pub fn token_cosines(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let c = g.cosine_similarity(p, t)?;
    Ok(g.data(c).to_vec())
}

/// Compares conditions predicted from the current frame with the frozen
/// encoder's conditions computed from real future frames, on `n_samples`
/// seeded `(episode, t)` draws from `data`.
pub fn condition_probe(ck: &Checkpoint, data: &Dataset, n_samples: usize, seed: u64) -> Result<ProbeReport> {
    ck.require_stage("condition_probe", "requires stage-II checkpoint", &[Stage::Two, Stage::Finetune])?;
    let usable: Vec<usize> = (0..data.episodes.len()).filter(|&i| !data.episodes[i].is_empty()).collect();
    if usable.is_empty() || n_samples == 0 {
        return Err(invalid("condition_probe", "no samples"));
    }
    let policy = ck.to_policy()?;
    let vision = VisionEncoders::new(&ck.vision)?;
    let mut rng = derived_rng(seed, "probe", 0);
    let samples: Vec<(usize, usize)> = (0..n_samples)
        .map(|_| {
            let e = usable[rng.random_range(0..usable.len())];
            (e, rng.random_range(0..data.episodes[e].len()))
        })
        .collect();
    let mut cos = Vec::with_capacity(n_samples * policy.cfg.n_queries);
    for chunk in samples.chunks(32) {
        let batch = Batch::from_samples(&data.episodes, chunk, policy.cfg.horizon, &ck.action_norm)?;
        let cur: Vec<&Image> = batch.current.iter().collect();
        let fut: Vec<_> = batch.future.iter().collect();
        let feats = vision.features(&cur, &fut)?;
        let mut g = Graph::inference(&policy.store);
        let heads: Vec<_> = feats.heads.iter().map(|h| g.constant(h.clone())).collect();
        let target = policy.encode_conditions(&mut g, &heads)?;
        let obs = g.constant(batch.obs.clone());
        let (_, h) = policy.encode_context(&mut g, obs, &batch.instructions)?;
        let pred = policy.predict_conditions(&mut g, h)?;
        let c = g.cosine_similarity(pred, target)?;
        cos.extend_from_slice(g.data(c));
    }
    Ok(ProbeReport::from_cosines(&cos, n_samples))
}
