use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{expert_action, instruction, render, reset, step, success, Image, RenderConfig, RenderStyle, Task, TaskParams};
use crate::error::{invalid, Result};
use crate::rng::{derive, derived_rng};

/// Hard cap on scripted rollouts; the expert finishes well inside it.
const MAX_DEMO_STEPS: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Robot,
    HumanVideo,
    Umi,
}

impl SourceTag {
    pub const ALL: [SourceTag; 3] = [SourceTag::Robot, SourceTag::HumanVideo, SourceTag::Umi];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Robot => "robot",
            SourceTag::HumanVideo => "human_video",
            SourceTag::Umi => "umi",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<SourceTag> {
        SourceTag::ALL.get(usize::from(c)).copied()
    }

    /// Rendering skin used for episodes from this source.
    pub fn style(self) -> RenderStyle {
        match self {
            SourceTag::Robot => RenderStyle::Robot,
            SourceTag::HumanVideo => RenderStyle::Human,
            SourceTag::Umi => RenderStyle::Egocentric,
        }
    }
}

impl std::str::FromStr for SourceTag {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        SourceTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| invalid("source_tag", format!("unknown source {s:?}")))
    }
}

/// One recorded demonstration. `frames.len() == actions.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: Task,
    pub instruction: Vec<u32>,
    pub frames: Vec<Image>,
    /// Zero placeholders when `has_action_labels` is false.
    pub actions: Vec<[f64; 3]>,
    pub success: bool,
    pub seed: u64,
    pub source_tag: SourceTag,
    pub has_action_labels: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Number of labeled episodes among `n` for a given fraction.
pub fn labeled_count(n: usize, label_fraction: f64) -> usize {
    // the epsilon absorbs representation error such as 100 * 0.11
    ((n as f64 * label_fraction) + 1e-9).floor().min(n as f64) as usize
}

/// Scripted expert rollout rendered under `cfg` with the skin of `source_tag`.
pub fn record_episode(
    task: Task,
    seed: u64,
    cfg: &RenderConfig,
    params: &TaskParams,
    source_tag: SourceTag,
) -> Result<Episode> {
    let cfg = RenderConfig {
        style: source_tag.style(),
        ..cfg.clone()
    };
    let mut state = reset(task, seed, params)?;
    let instr = instruction(&state);
    let mut frames = vec![render(&state, &cfg)?];
    let mut actions = Vec::new();
    while !success(&state) && actions.len() < MAX_DEMO_STEPS {
        let a = expert_action(&state);
        state = step(&state, a)?;
        actions.push(a);
        frames.push(render(&state, &cfg)?);
    }
    Ok(Episode {
        task,
        instruction: instr,
        frames,
        actions,
        success: success(&state),
        seed,
        source_tag,
        has_action_labels: true,
    })
}

/// `n` expert demonstrations. A seeded subset of `n - labeled_count(n, f)`
/// episodes is marked unlabeled and has its actions zeroed.
pub fn generate_demos(
    task: Task,
    n: usize,
    seed: u64,
    cfg: &RenderConfig,
    source_tag: SourceTag,
    label_fraction: f64,
) -> Result<Vec<Episode>> {
    generate_demos_with(task, n, seed, cfg, &TaskParams::default(), source_tag, label_fraction)
}

pub fn generate_demos_with(
    task: Task,
    n: usize,
    seed: u64,
    cfg: &RenderConfig,
    params: &TaskParams,
    source_tag: SourceTag,
    label_fraction: f64,
) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(invalid("generate_demos", "n must be at least 1"));
    }
    if !(0.0..=1.0).contains(&label_fraction) {
        return Err(invalid("generate_demos", format!("label_fraction {label_fraction} outside [0, 1]")));
    }
    let mut episodes = (0..n as u64)
        .map(|i| record_episode(task, derive(seed, "demo", i), cfg, params, source_tag))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, "labels", 0));
    for &i in &order[labeled_count(n, label_fraction)..] {
        let ep = &mut episodes[i];
        ep.has_action_labels = false;
        ep.actions.iter_mut().for_each(|a| *a = [0.0; 3]);
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_count_rounding() {
        assert_eq!(labeled_count(100, 0.11), 11);
        assert_eq!(labeled_count(10, 1.0), 10);
        assert_eq!(labeled_count(10, 0.0), 0);
        assert_eq!(labeled_count(3, 0.5), 1);
    }

    #[test]
    fn demos_are_consistent() {
        let eps = generate_demos(Task::PickPlace, 4, 3, &RenderConfig::default(), SourceTag::Robot, 1.0).unwrap();
        assert_eq!(eps.len(), 4);
        for e in &eps {
            assert!(e.success && e.has_action_labels);
            assert_eq!(e.frames.len(), e.actions.len() + 1);
            assert!(e.actions.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unlabeled_have_zero_actions() {
        let eps = generate_demos(Task::FoldCorners, 10, 1, &RenderConfig::default(), SourceTag::HumanVideo, 0.3).unwrap();
        assert_eq!(eps.iter().filter(|e| e.has_action_labels).count(), 3);
        for e in eps.iter().filter(|e| !e.has_action_labels) {
            assert!(e.actions.iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bad_arguments() {
        let cfg = RenderConfig::default();
        assert!(generate_demos(Task::PickPlace, 0, 0, &cfg, SourceTag::Robot, 1.0).is_err());
        assert!(generate_demos(Task::PickPlace, 1, 0, &cfg, SourceTag::Robot, 1.5).is_err());
    }
}
