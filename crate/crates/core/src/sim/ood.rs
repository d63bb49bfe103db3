use serde::{Deserialize, Serialize};

use super::render::{RenderConfig, BACKGROUNDS, OBJECT_COLORS};
use crate::error::{invalid, Result};

/// Background ids used when generating training data.
pub const TRAIN_BACKGROUNDS: [u8; 1] = [0];
/// Object colours used when generating training data.
pub const TRAIN_COLORS: [u8; 3] = [0, 1, 2];
const HELD_OUT_COLORS: [u8; 2] = [3, 4];
/// Fixed brightness of the light-change setup. Repo constant.
pub const OOD_BRIGHTNESS: f64 = 1.35;

/// Scene-generation parameters that are not part of the rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskParams {
    pub object_colors: Vec<u8>,
    /// 0 or 1 (the planner handles a single obstacle).
    pub obstacles: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            object_colors: TRAIN_COLORS.to_vec(),
            obstacles: 1,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.object_colors.is_empty() {
            return Err(invalid("task_params", "empty colour pool"));
        }
        if self.object_colors.iter().any(|&c| usize::from(c) >= OBJECT_COLORS.len()) {
            return Err(invalid("task_params", "unknown colour id"));
        }
        if self.obstacles > 1 {
            return Err(invalid("task_params", "at most one obstacle is supported"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    Background,
    Light,
    NovelObject,
}

impl OodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OodKind::Background => "background",
            OodKind::Light => "light",
            OodKind::NovelObject => "novel_object",
        }
    }
}

/// Applies one distribution shift to the render and scene parameters.
pub fn ood_transform(cfg: &RenderConfig, params: &TaskParams, kind: OodKind) -> (RenderConfig, TaskParams) {
    let mut cfg = cfg.clone();
    let mut params = params.clone();
    match kind {
        OodKind::Background => {
            let unseen = (0..BACKGROUNDS.len() as u8)
                .find(|b| !TRAIN_BACKGROUNDS.contains(b) && *b != cfg.background_color_id)
                .expect("palette has an unseen background");
            cfg.background_color_id = unseen;
        }
        OodKind::Light => cfg.brightness = OOD_BRIGHTNESS,
        OodKind::NovelObject => params.object_colors = HELD_OUT_COLORS.to_vec(),
    }
    (cfg, params)
}

#[cfg(test)]
mod tests {
    use super::super::{color_token, instruction, reset, Task};
    use super::*;

    #[test]
    fn background_changes_only_background() {
        let base = RenderConfig::default();
        let (cfg, params) = ood_transform(&base, &TaskParams::default(), OodKind::Background);
        assert_ne!(cfg.background_color_id, base.background_color_id);
        assert!(!TRAIN_BACKGROUNDS.contains(&cfg.background_color_id));
        let restored = RenderConfig {
            background_color_id: base.background_color_id,
            ..cfg
        };
        assert_eq!(restored, base);
        assert_eq!(params, TaskParams::default());
    }

    #[test]
    fn light_is_fixed_multiplier() {
        let (cfg, _) = ood_transform(&RenderConfig::default(), &TaskParams::default(), OodKind::Light);
        assert_eq!(cfg.brightness, 1.35);
    }

    #[test]
    fn novel_object_uses_unseen_instruction_tokens() {
        let train = TaskParams::default();
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..200 {
            seen.extend(instruction(&reset(Task::PickPlace, seed, &train).unwrap()));
        }
        let (_, novel) = ood_transform(&RenderConfig::default(), &train, OodKind::NovelObject);
        for seed in 0..50 {
            let s = reset(Task::PickPlace, seed, &novel).unwrap();
            let color_tok = instruction(&s)[1];
            assert_eq!(color_tok, color_token(s.objects[0].color_id));
            assert!(!seen.contains(&color_tok), "seed {seed}");
        }
    }
}
