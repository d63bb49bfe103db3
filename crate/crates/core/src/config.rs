//! Run configuration: defaults, TOML file, `WOG_OUT`, then dotted-key
//! overrides, in increasing precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalOptions, Setup, SuiteCell, DEFAULT_SAMPLER_STEPS};
use crate::policy::ModelConfig;
use crate::sim::{RenderConfig, SourceTag, Task, TaskParams};
use crate::training::{MixSpec, StageConfig};
use crate::vision::{EncoderConfig, VisionConfig};

pub const OUT_ENV: &str = "WOG_OUT";

/// Demonstration sets to generate or load from the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Robot demonstrations per task.
    pub n_demos: usize,
    /// Fraction of robot demonstrations that keep their action labels.
    pub label_fraction: f64,
    /// Unlabeled human-video episodes per task, used from stage II on.
    pub human_demos: usize,
    /// Labeled UMI-style episodes per task, used only for finetuning.
    pub umi_demos: usize,
    pub seed: u64,
    /// Cache directory; relative paths resolve against `out_dir`.
    pub cache_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_demos: 64,
            label_fraction: 1.0,
            human_demos: 0,
            umi_demos: 0,
            seed: 0,
            cache_dir: PathBuf::from("cache"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub setups: Vec<Setup>,
    pub sampler_steps: usize,
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: crate::eval::DEFAULT_TRIALS,
            max_steps: crate::eval::DEFAULT_MAX_STEPS,
            seed: 0,
            setups: Setup::ALL.to_vec(),
            sampler_steps: DEFAULT_SAMPLER_STEPS,
            noise_seed: 0,
        }
    }
}

/// Full-scale budgets for reference; the defaults in [`RunConfig`] are desk
/// scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceBudgets {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
}

pub const REFERENCE_BUDGETS: ReferenceBudgets = ReferenceBudgets {
    stage1_steps: 100_000,
    stage2_steps: 50_000,
    batch_size: 1024,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tasks: Vec<Task>,
    /// Training seeds; ablations run one replicate per seed.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Actions executed from each predicted chunk.
    pub exec_horizon: usize,
    pub encoders: EncoderConfig,
    pub render: RenderConfig,
    pub scene: TaskParams,
    pub model: ModelConfig,
    pub vision: VisionConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub finetune: StageConfig,
    pub mix: MixSpec,
    /// Mix for finetuning; UMI episodes enter only here.
    pub finetune_mix: MixSpec,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::PickPlace],
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            exec_horizon: 8,
            encoders: EncoderConfig::SemDyn,
            render: RenderConfig::default(),
            scene: TaskParams::default(),
            model: ModelConfig::default(),
            vision: VisionConfig::default(),
            stage1: StageConfig {
                steps: 5000,
                ..StageConfig::default()
            },
            stage2: StageConfig {
                steps: 3000,
                ..StageConfig::default()
            },
            finetune: StageConfig {
                steps: 1000,
                ..StageConfig::default()
            },
            mix: MixSpec::default(),
            finetune_mix: MixSpec::new(&[(SourceTag::Robot, 0.5), (SourceTag::Umi, 0.5)]).expect("valid mix"),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn field_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Action chunk length `T`.
    pub fn horizon(&self) -> usize {
        self.model.horizon
    }

    /// Vision settings with the top-level encoder choice and image size applied.
    pub fn vision_config(&self) -> VisionConfig {
        VisionConfig {
            encoders: self.encoders,
            height: self.render.height,
            width: self.render.width,
            ..self.vision.clone()
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_trials: self.eval.n_trials,
            seed: self.eval.seed,
            max_steps: self.eval.max_steps,
            exec_horizon: self.exec_horizon,
            render: self.render.clone(),
            params: self.scene.clone(),
        }
    }

    pub fn suite(&self) -> Vec<SuiteCell> {
        crate::eval::suite(&self.tasks, &self.eval.setups)
    }

    /// Cache directory resolved against the output directory.
    pub fn cache_dir(&self) -> PathBuf {
        if self.data.cache_dir.is_absolute() {
            self.data.cache_dir.clone()
        } else {
            self.out_dir.join(&self.data.cache_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::Config { field, msg } if field == "horizon" => field_err("model.horizon", msg),
            Error::Config { field, msg } => field_err(&format!("model.{field}"), msg),
            other => other,
        })?;
        if self.exec_horizon == 0 || self.exec_horizon > self.horizon() {
            return Err(field_err(
                "exec_horizon",
                format!("must lie in 1..={} (the horizon T)", self.horizon()),
            ));
        }
        if self.tasks.is_empty() {
            return Err(field_err("tasks", "at least one task is required"));
        }
        if self.seeds.is_empty() {
            return Err(field_err("seeds", "at least one seed is required"));
        }
        self.render.validate().map_err(|e| field_err("render", e.to_string()))?;
        self.scene.validate().map_err(|e| field_err("scene", e.to_string()))?;
        if self.render.height != self.model.image || self.render.width != self.model.image {
            return Err(field_err("model.image", "must equal the rendered image size"));
        }
        let vision = self.vision_config();
        vision.validate().map_err(|e| field_err("vision", e.to_string()))?;
        if vision.window != 4 {
            return Err(field_err("vision.window", "the future sampler yields 4 frames"));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("finetune", &self.finetune)] {
            s.validate().map_err(|e| match e {
                Error::Config { field, msg } => field_err(&format!("{name}.{field}"), msg),
                other => other,
            })?;
        }
        self.mix.normalized().map_err(|e| field_err("mix", e.to_string()))?;
        self.finetune_mix.normalized().map_err(|e| field_err("finetune_mix", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.data.label_fraction) {
            return Err(field_err("data.label_fraction", "must lie in [0, 1]"));
        }
        if self.data.n_demos == 0 {
            return Err(field_err("data.n_demos", "must be positive"));
        }
        if self.eval.n_trials == 0 {
            return Err(field_err("eval.n_trials", "must be positive"));
        }
        if self.eval.setups.is_empty() {
            return Err(field_err("eval.setups", "at least one setup is required"));
        }
        if self.eval.sampler_steps == 0 {
            return Err(field_err("eval.sampler_steps", "must be positive"));
        }
        Ok(())
    }

    /// Parses a TOML document over the defaults. Unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| field_err("<file>", e.message().to_string()))
    }

    /// Sets one dotted key such as `model.dim` or `stage1.steps`. Dashes in
    /// key segments are read as underscores. The value is parsed as TOML and
    /// falls back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = toml::Table::try_from(&*self).map_err(|e| field_err(key, e.to_string()))?;
        let path: Vec<String> = key.split('.').map(|s| s.replace('-', "_")).collect();
        let parsed = parse_value(value);
        let (last, parents) = path.split_last().ok_or_else(|| field_err(key, "empty key"))?;
        let mut table = &mut doc;
        for p in parents {
            table = table
                .get_mut(p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| field_err(key, "unknown key"))?;
        }
        if !table.contains_key(last) {
            return Err(field_err(key, "unknown key"));
        }
        table.insert(last.clone(), parsed);
        *self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| field_err(key, e.message().to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(v: &str) -> toml::Value {
    if let Ok(t) = format!("v = {v}").parse::<toml::Table>() {
        if let Some(x) = t.get("v") {
            return x.clone();
        }
    }
    // comma lists of bare words, e.g. `id,background`
    if v.contains(',') {
        return toml::Value::Array(v.split(',').map(|s| parse_value(s.trim())).collect());
    }
    toml::Value::String(v.to_string())
}

/// Defaults, then the file at `path`, then `WOG_OUT` (when `env_out` is
/// given), then `overrides` in order. The result is validated.
pub fn parse_config(path: Option<&Path>, env_out: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(out) = env_out.filter(|s| !s.is_empty()) {
        cfg.out_dir = PathBuf::from(out);
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Cache specs of every task for the requested sources. Sources with no
    /// configured episodes are skipped.
    pub fn cache_specs(&self, sources: &[SourceTag]) -> Vec<crate::sim::CacheSpec> {
        let mut out = Vec::new();
        for &task in &self.tasks {
            for &source_tag in sources {
                let (n, label_fraction) = match source_tag {
                    SourceTag::Robot => (self.data.n_demos, self.data.label_fraction),
                    SourceTag::HumanVideo => (self.data.human_demos, 0.0),
                    SourceTag::Umi => (self.data.umi_demos, 1.0),
                };
                if n == 0 {
                    continue;
                }
                out.push(crate::sim::CacheSpec {
                    task,
                    n,
                    seed: crate::rng::derive(self.data.seed, source_tag.as_str(), task.code() as u64),
                    render: self.render.clone(),
                    params: self.scene.clone(),
                    source_tag,
                    label_fraction,
                });
            }
        }
        out
    }

    /// Loads (or generates and caches) the episodes of `sources`.
    pub fn load_dataset(
        &self,
        sources: &[SourceTag],
    ) -> Result<(crate::training::Dataset, Vec<crate::sim::ManifestEntry>)> {
        let dir = self.cache_dir();
        let mut episodes = Vec::new();
        let mut entries = Vec::new();
        for spec in self.cache_specs(sources) {
            let (eps, entry) = crate::sim::load_or_generate(&dir, &spec)?;
            episodes.extend(eps);
            entries.push(entry);
        }
        Ok((crate::training::Dataset::new(episodes), entries))
    }
}
