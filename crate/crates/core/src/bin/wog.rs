use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use wog::checkpoint::{Checkpoint, Stage};
use wog::config::{parse_config, RunConfig, OUT_ENV, REFERENCE_BUDGETS};
use wog::eval::{self, condition_probe, evaluate, parse_setups, run_ablation, AblationConfig, PolicyHandle, Variant};
use wog::policy::ModelConfig;
use wog::sim::{generate_demos, ManifestEntry, SourceTag, Task};
use wog::vision::VisionConfig;
use wog::tensor::run_op_suite;
use wog::training::{self, metrics_jsonl, Dataset, MixSpec, StageConfig};

#[derive(Parser, Debug)]
#[command(name = "wog", about = "Two-stage world-guided policy experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as `model.dim=32`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    out_dir: Option<String>,
    #[arg(long, global = true)]
    tasks: Option<String>,
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Action chunk length T.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[arg(long, global = true)]
    exec_horizon: Option<usize>,
    #[arg(long, global = true)]
    encoders: Option<String>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    #[arg(long, global = true)]
    dit_depth: Option<usize>,
    #[arg(long, global = true)]
    n_queries: Option<usize>,
    #[arg(long, global = true)]
    cond_dim: Option<usize>,
    #[arg(long, global = true)]
    stage1_steps: Option<usize>,
    #[arg(long, global = true)]
    stage2_steps: Option<usize>,
    #[arg(long, global = true)]
    finetune_steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    n_demos: Option<usize>,
    #[arg(long, global = true)]
    n_trials: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let quote = |s: &Option<String>| s.as_ref().map(|v| format!("{:?}", v));
        let list = |s: &Option<String>| {
            s.as_ref().map(|v| {
                let items: Vec<String> = v.split(',').map(|x| format!("{:?}", x.trim())).collect();
                format!("[{}]", items.join(","))
            })
        };
        push("out_dir", quote(&self.out_dir));
        push("tasks", list(&self.tasks));
        push("seeds", self.seeds.as_ref().map(|v| format!("[{v}]")));
        push("model.horizon", self.horizon.map(|v| v.to_string()));
        push("exec_horizon", self.exec_horizon.map(|v| v.to_string()));
        push("encoders", self.encoders.as_ref().map(|v| format!("{:?}", v.replace('+', "_"))));
        push("model.dim", self.dim.map(|v| v.to_string()));
        push("model.heads", self.heads.map(|v| v.to_string()));
        push("model.dit_depth", self.dit_depth.map(|v| v.to_string()));
        push("model.n_queries", self.n_queries.map(|v| v.to_string()));
        push("model.cond_dim", self.cond_dim.map(|v| v.to_string()));
        push("stage1.steps", self.stage1_steps.map(|v| v.to_string()));
        push("stage2.steps", self.stage2_steps.map(|v| v.to_string()));
        push("finetune.steps", self.finetune_steps.map(|v| v.to_string()));
        for stage in ["stage1", "stage2", "finetune"] {
            push(&format!("{stage}.batch_size"), self.batch_size.map(|v| v.to_string()));
            push(&format!("{stage}.lr"), self.lr.map(|v| format!("{v:e}")));
        }
        push("data.n_demos", self.n_demos.map(|v| v.to_string()));
        push("eval.n_trials", self.n_trials.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate (or verify) the cached demonstration sets.
    GenData,
    /// Train stage I for one seed.
    TrainStage1 {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train stage II from a stage-I checkpoint.
    TrainStage2 {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        wo_cotrain: bool,
    },
    /// Finetune a stage-II checkpoint on robot and UMI data.
    Finetune {
        #[arg(long)]
        init: PathBuf,
    },
    /// Closed-loop evaluation of a stage-II or finetuned checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated setups: id, background, light, novel_object.
        #[arg(long)]
        suite: Option<String>,
    },
    /// Train and evaluate the three variants on every seed.
    Ablate,
    /// Finite-difference check of every registered op and the stage-I loss.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// Cosine agreement between predicted and frozen-encoder conditions.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenData => "gen-data",
            Cmd::TrainStage1 { .. } => "train-stage1",
            Cmd::TrainStage2 { .. } => "train-stage2",
            Cmd::Finetune { .. } => "finetune",
            Cmd::Eval { .. } => "eval",
            Cmd::Ablate => "ablate",
            Cmd::Gradcheck { .. } => "gradcheck",
            Cmd::Probe { .. } => "probe",
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    data: Vec<ManifestEntry>,
    outputs: Vec<String>,
    extra: serde_json::Value,
}

impl Ctx {
    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.outputs.push(name.to_string());
        Ok(p)
    }

    fn save_checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<PathBuf> {
        let p = self.out.join(name);
        ck.save(&p)?;
        self.outputs.push(name.to_string());
        Ok(p)
    }

    fn dataset(&mut self, sources: &[SourceTag]) -> Result<Dataset> {
        let (d, entries) = self.cfg.load_dataset(sources)?;
        self.data.extend(entries);
        Ok(d)
    }
}

fn config_echo(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or_default()
}

fn stage_cfg(base: &StageConfig, seed: u64) -> StageConfig {
    StageConfig { seed, ..base.clone() }
}

fn first_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds[0]
}

fn run(cli: Cli) -> Result<()> {
    let env_out = std::env::var(OUT_ENV).ok();
    let cfg = parse_config(cli.common.config.as_deref(), env_out.as_deref(), &cli.common.overrides()?)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let start = Instant::now();
    let mut ctx = Ctx {
        out: cfg.out_dir.clone(),
        cfg,
        data: Vec::new(),
        outputs: Vec::new(),
        extra: json!({}),
    };
    let name = cli.cmd.name();
    match cli.cmd {
        Cmd::GenData => {
            ctx.dataset(&SourceTag::ALL)?;
            for e in &ctx.data {
                println!("{} {} episodes sha256={}", e.file, e.episodes, &e.sha256[..16]);
            }
        }
        Cmd::TrainStage1 { seed } => {
            let seed = seed.unwrap_or(first_seed(&ctx.cfg));
            let data = ctx.dataset(&[SourceTag::Robot])?;
            let out = training::train_stage1(
                &data,
                &ctx.cfg.mix,
                &ctx.cfg.model,
                &ctx.cfg.vision_config(),
                &stage_cfg(&ctx.cfg.stage1, seed),
            )?;
            let mut ck = out.checkpoint;
            ck.config = json!({ "run": config_echo(&ctx.cfg), "stage": ck.config });
            ctx.write(&format!("metrics-stage1-seed{seed}.jsonl"), &metrics_jsonl(&out.metrics))?;
            let p = ctx.save_checkpoint(&format!("stage1-seed{seed}.wogck"), &ck)?;
            println!("stage I checkpoint: {}", p.display());
        }
        Cmd::TrainStage2 { init, wo_cotrain } => {
            let init_ck = Checkpoint::load(&init).with_context(|| format!("loading {}", init.display()))?;
            init_ck.require_stage("train-stage2", "requires stage-I init", &[Stage::One])?;
            let data = ctx.dataset(&[SourceTag::Robot, SourceTag::HumanVideo])?;
            let mix = stage2_mix(&ctx.cfg, &data);
            let s2 = stage_cfg(&ctx.cfg.stage2, init_ck.seed);
            let out = if wo_cotrain {
                training::train_stage2_wo_cotrain(&data, &mix, &s2, &init_ck)?
            } else {
                training::train_stage2(&data, &mix, &s2, &init_ck)?
            };
            let mut ck = out.checkpoint;
            ck.config = json!({ "run": config_echo(&ctx.cfg), "stage": ck.config });
            let tag = if wo_cotrain { "stage2-wo-cotrain" } else { "stage2" };
            ctx.write(&format!("metrics-{tag}-seed{}.jsonl", init_ck.seed), &metrics_jsonl(&out.metrics))?;
            let p = ctx.save_checkpoint(&format!("{tag}-seed{}.wogck", init_ck.seed), &ck)?;
            println!("stage II checkpoint: {}", p.display());
        }
        Cmd::Finetune { init } => {
            let init_ck = Checkpoint::load(&init).with_context(|| format!("loading {}", init.display()))?;
            init_ck.require_stage("finetune", "requires stage-II init", &[Stage::Two, Stage::Finetune])?;
            let data = ctx.dataset(&[SourceTag::Robot, SourceTag::Umi])?;
            let out = training::finetune(&data, &ctx.cfg.finetune_mix, &stage_cfg(&ctx.cfg.finetune, init_ck.seed), &init_ck)?;
            let mut ck = out.checkpoint;
            ck.config = json!({ "run": config_echo(&ctx.cfg), "stage": ck.config });
            ctx.write(&format!("metrics-finetune-seed{}.jsonl", init_ck.seed), &metrics_jsonl(&out.metrics))?;
            let p = ctx.save_checkpoint(&format!("finetune-seed{}.wogck", init_ck.seed), &ck)?;
            println!("finetuned checkpoint: {}", p.display());
        }
        Cmd::Eval { checkpoint, suite } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let mut handle = PolicyHandle::from_checkpoint(&ck)?;
            handle.n_steps = ctx.cfg.eval.sampler_steps;
            handle.noise_seed = ctx.cfg.eval.noise_seed;
            let setups = match suite {
                Some(s) => parse_setups(&s)?,
                None => ctx.cfg.eval.setups.clone(),
            };
            let cells = eval::suite(&ctx.cfg.tasks, &setups);
            let report = evaluate(&handle, &cells, &ctx.cfg.eval_options())?;
            let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
            ctx.write(&format!("eval-{stem}.jsonl"), &report.to_jsonl())?;
            ctx.write(&format!("eval-{stem}.txt"), &report.table())?;
            ctx.extra = json!({ "checkpoint": checkpoint, "fingerprint": report.fingerprint });
            print!("{}", report.table());
        }
        Cmd::Ablate => {
            let data = ctx.dataset(&[SourceTag::Robot])?;
            let acfg = AblationConfig {
                model: ctx.cfg.model.clone(),
                vision: ctx.cfg.vision_config(),
                stage1: ctx.cfg.stage1.clone(),
                stage2: ctx.cfg.stage2.clone(),
                mix: ctx.cfg.mix.clone(),
                seeds: ctx.cfg.seeds.clone(),
                variants: Variant::ALL.to_vec(),
                suite: ctx.cfg.suite(),
                eval: ctx.cfg.eval_options(),
            };
            let result = run_ablation(&data, &acfg, &mut |line| eprintln!("{line}"))?;
            let mut lines = String::new();
            for r in &result.runs {
                for c in &r.report.cells {
                    let mut v = serde_json::to_value(c)?;
                    v["seed"] = json!(r.seed);
                    v["variant"] = json!(r.variant.as_str());
                    v["optimizer_steps"] = json!(r.optimizer_steps);
                    lines.push_str(&format!("{v}\n"));
                }
                ctx.write(
                    &format!("metrics-{}-seed{}.jsonl", r.variant.as_str(), r.seed),
                    &metrics_jsonl(&r.metrics),
                )?;
            }
            ctx.write("ablation.jsonl", &lines)?;
            let table = result.table();
            ctx.write("ablation.txt", &table)?;
            print!("{table}");
        }
        Cmd::Gradcheck { trials } => {
            let results = run_op_suite(trials, first_seed(&ctx.cfg), 1e-5)?;
            let mut failed = Vec::new();
            for r in &results {
                let ok = r.max_rel_error < 1e-4;
                println!("{:<20} {:>10.3e} {}", r.name, r.max_rel_error, if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(r.name);
                }
            }
            let seed = first_seed(&ctx.cfg);
            let demos = generate_demos(Task::PickPlace, 2, seed, &ctx.cfg.render, SourceTag::Robot, 1.0)?;
            let tiny = ModelConfig::tiny();
            let vision = VisionConfig {
                embed_dim: 8,
                ..ctx.cfg.vision_config()
            };
            let e2e = training::stage1_loss_grad_check(&Dataset::new(demos), &tiny, &vision, 2, seed, 1e-5, Some(3))?;
            let ok = e2e.max_rel_error < 1e-3;
            println!("{:<20} {:>10.3e} {}", "stage1_loss", e2e.max_rel_error, if ok { "ok" } else { "FAIL" });
            if !ok {
                failed.push("stage1_loss");
            }
            ctx.extra = json!({
                "ops": results.iter().map(|r| json!({"op": r.name, "max_rel_error": r.max_rel_error})).collect::<Vec<_>>(),
                "stage1_loss": {"max_rel_error": e2e.max_rel_error, "checked": e2e.checked, "check_set": e2e.check_set},
            });
            if !failed.is_empty() {
                write_manifest(&mut ctx, name, start)?;
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        Cmd::Probe { checkpoint, samples } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let data = ctx.dataset(&[SourceTag::Robot, SourceTag::HumanVideo])?;
            let report = condition_probe(&ck, &data, samples, first_seed(&ctx.cfg))?;
            let text = serde_json::to_string_pretty(&report)?;
            let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
            ctx.write(&format!("probe-{stem}.json"), &text)?;
            println!("mean token cosine {:.4} over {} tokens", report.mean_token_cosine, report.tokens);
        }
    }
    write_manifest(&mut ctx, name, start)
}

/// Human-video episodes, when present, enter stage II with equal weight.
fn stage2_mix(cfg: &RunConfig, data: &Dataset) -> MixSpec {
    let has_human = data.episodes.iter().any(|e| e.source_tag == SourceTag::HumanVideo);
    if has_human && cfg.mix.weight(SourceTag::HumanVideo) == 0.0 {
        let mut mix = cfg.mix.clone();
        mix.sources.push(wog::training::MixEntry {
            source_tag: SourceTag::HumanVideo,
            weight: mix.sources.iter().map(|e| e.weight).sum(),
        });
        mix
    } else {
        cfg.mix.clone()
    }
}

fn write_manifest(ctx: &mut Ctx, name: &str, start: Instant) -> Result<()> {
    let manifest = json!({
        "subcommand": name,
        "config": config_echo(&ctx.cfg),
        "seeds": ctx.cfg.seeds,
        "reference_budgets": REFERENCE_BUDGETS,
        "data": ctx.data.iter().map(|e| json!({"file": e.file, "sha256": e.sha256, "episodes": e.episodes})).collect::<Vec<_>>(),
        "outputs": ctx.outputs,
        "details": ctx.extra,
        "wall_ms": start.elapsed().as_millis() as u64,
    });
    let path: &Path = &ctx.out.join(format!("manifest-{name}.json"));
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
