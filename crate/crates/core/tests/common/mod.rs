#![allow(dead_code)]

use wog::checkpoint::Checkpoint;
use wog::policy::ModelConfig;
use wog::sim::{generate_demos, RenderConfig, SourceTag, Task};
use wog::training::{self, Dataset, MixSpec, StageConfig};
use wog::vision::VisionConfig;

pub fn model() -> ModelConfig {
    ModelConfig::tiny()
}

pub fn vision() -> VisionConfig {
    VisionConfig {
        embed_dim: 8,
        ..VisionConfig::default()
    }
}

pub fn demos(n: usize, seed: u64) -> Dataset {
    Dataset::new(generate_demos(Task::PickPlace, n, seed, &RenderConfig::default(), SourceTag::Robot, 1.0).unwrap())
}

pub fn human(n: usize, seed: u64) -> Dataset {
    Dataset::new(generate_demos(Task::PickPlace, n, seed, &RenderConfig::default(), SourceTag::HumanVideo, 0.0).unwrap())
}

pub fn stage(steps: usize, seed: u64) -> StageConfig {
    StageConfig {
        steps,
        batch_size: 4,
        seed,
        log_every: 1,
        ..StageConfig::default()
    }
}

pub fn stage1(data: &Dataset, steps: usize) -> Checkpoint {
    training::train_stage1(data, &MixSpec::default(), &model(), &vision(), &stage(steps, 0))
        .unwrap()
        .checkpoint
}

pub fn stage2(data: &Dataset, steps: usize) -> Checkpoint {
    let s1 = stage1(data, steps);
    training::train_stage2(data, &MixSpec::default(), &stage(steps, 0), &s1).unwrap().checkpoint
}
