use serde::{Deserialize, Serialize};

use super::{dist, ObjectKind, Vec2, WorldState};
use crate::error::{invalid, Result};

/// How an episode source is drawn. Human and UMI sources re-skin the same
/// world: a hand glyph instead of the robot cross, and an agent-centred crop
/// for the egocentric UMI view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RenderStyle {
    #[default]
    Robot,
    Human,
    Egocentric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub background_color_id: u8,
    /// Multiplier in `[0.5, 1.5]`, applied before clamping to `[0, 1]`.
    pub brightness: f64,
    pub style: RenderStyle,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            channels: 3,
            background_color_id: 0,
            brightness: 1.0,
            style: RenderStyle::Robot,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(invalid("render", "only 3-channel images are supported"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(invalid("render", "images must be at least 8x8"));
        }
        if !(0.5..=1.5).contains(&self.brightness) {
            return Err(invalid("render", format!("brightness {} outside [0.5, 1.5]", self.brightness)));
        }
        if usize::from(self.background_color_id) >= BACKGROUNDS.len() {
            return Err(invalid("render", format!("unknown background {}", self.background_color_id)));
        }
        Ok(())
    }

    /// Stable digest of every field, used for content-addressed caches.
    pub fn key(&self) -> String {
        format!(
            "{}x{}x{}-bg{}-b{:.4}-{:?}",
            self.width, self.height, self.channels, self.background_color_id, self.brightness, self.style
        )
    }
}

/// `height x width x 3` image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

pub(crate) const BACKGROUNDS: [[f32; 3]; 4] = [
    [0.55, 0.50, 0.45],
    [0.35, 0.45, 0.60],
    [0.30, 0.55, 0.35],
    [0.60, 0.35, 0.50],
];

pub(crate) const OBJECT_COLORS: [[f32; 3]; 5] = [
    [0.90, 0.15, 0.10],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.60, 0.20, 0.80],
    [1.00, 0.55, 0.00],
];

const GOAL_COLOR: [f32; 3] = [0.85, 0.85, 0.85];
const OBSTACLE_COLOR: [f32; 3] = [0.10, 0.10, 0.10];
const DOOR_COLOR: [f32; 3] = [0.50, 0.25, 0.05];
const AGENT_OPEN: [f32; 3] = [1.0, 1.0, 1.0];
const AGENT_CLOSED: [f32; 3] = [0.0, 1.0, 1.0];
const HAND_OPEN: [f32; 3] = [0.90, 0.70, 0.55];
const HAND_CLOSED: [f32; 3] = [0.75, 0.45, 0.35];

/// Maps pixel centres to world coordinates; the egocentric view is a
/// 0.7-wide window centred on the agent, kept inside the unit square.
struct View {
    origin: Vec2,
    span: f64,
}

impl View {
    fn world(&self, row: usize, col: usize, h: usize, w: usize) -> Vec2 {
        [
            self.origin[0] + self.span * (col as f64 + 0.5) / w as f64,
            self.origin[1] + self.span * (row as f64 + 0.5) / h as f64,
        ]
    }
}

/// Deterministic rasterization of a state.
pub fn render(state: &WorldState, cfg: &RenderConfig) -> Result<Image> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let view = match cfg.style {
        RenderStyle::Egocentric => {
            let span = 0.7;
            let clamp = |v: f64| (v - span / 2.0).clamp(0.0, 1.0 - span);
            View {
                origin: [clamp(state.agent_pos[0]), clamp(state.agent_pos[1])],
                span,
            }
        }
        _ => View {
            origin: [0.0, 0.0],
            span: 1.0,
        },
    };
    let px = view.span / w as f64;
    let mut img = Image::filled(h, w, BACKGROUNDS[usize::from(cfg.background_color_id)]);
    for row in 0..h {
        for col in 0..w {
            let p = view.world(row, col, h, w);
            let mut color = None;
            if state.task == super::Task::PickPlace && state.goal.radius > 0.0 {
                let g = &state.goal;
                if (p[0] - g.pos[0]).abs() <= g.radius && (p[1] - g.pos[1]).abs() <= g.radius {
                    color = Some(GOAL_COLOR);
                }
            }
            for o in &state.obstacles {
                if dist(p, o.pos) <= o.radius {
                    color = Some(OBSTACLE_COLOR);
                }
            }
            if let Some(d) = &state.door {
                let tip = d.tip();
                if seg_dist(d.hinge, tip, p) <= 0.6 * px.max(0.02) {
                    color = Some(DOOR_COLOR);
                }
            }
            for o in &state.objects {
                let rgb = OBJECT_COLORS[usize::from(o.color_id) % OBJECT_COLORS.len()];
                let inside = match o.kind {
                    ObjectKind::Cup => dist(p, o.pos) <= 0.045,
                    ObjectKind::Block => (p[0] - o.pos[0]).abs() <= 0.04 && (p[1] - o.pos[1]).abs() <= 0.04,
                    ObjectKind::CornerMarker => (p[0] - o.pos[0]).abs() + (p[1] - o.pos[1]).abs() <= 0.05,
                };
                if inside {
                    color = Some(rgb);
                }
            }
            if let Some(c) = color {
                img.set(row, col, c);
            }
        }
    }
    draw_agent(&mut img, state, cfg.style, &view);
    if cfg.brightness != 1.0 {
        let b = cfg.brightness as f32;
        for v in &mut img.data {
            *v = (*v * b).min(1.0);
        }
    }
    Ok(img)
}

fn draw_agent(img: &mut Image, state: &WorldState, style: RenderStyle, view: &View) {
    let (h, w) = (img.height, img.width);
    let closed = state.gripper >= 0.5;
    let a = state.agent_pos;
    let px = view.span / w as f64;
    for row in 0..h {
        for col in 0..w {
            let p = view.world(row, col, h, w);
            let (dx, dy) = ((p[0] - a[0]).abs(), (p[1] - a[1]).abs());
            match style {
                RenderStyle::Human => {
                    if dx + dy <= 2.2 * px {
                        img.set(row, col, if closed { HAND_CLOSED } else { HAND_OPEN });
                    }
                }
                _ => {
                    let arm = 2.5 * px;
                    let half = 0.5 * px;
                    if (dx <= half && dy <= arm) || (dy <= half && dx <= arm) {
                        img.set(row, col, if closed { AGENT_CLOSED } else { AGENT_OPEN });
                    }
                }
            }
        }
    }
}

fn seg_dist(a: Vec2, b: Vec2, p: Vec2) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist([a[0] + t * ab[0], a[1] + t * ab[1]], p)
}

#[cfg(test)]
mod tests {
    use super::super::{reset, Goal, Task, TaskParams, WorldState};
    use super::*;

    #[test]
    fn render_is_deterministic() {
        let s = reset(Task::PickPlace, 9, &TaskParams::default()).unwrap();
        let cfg = RenderConfig::default();
        assert_eq!(render(&s, &cfg).unwrap(), render(&s, &cfg).unwrap());
        assert_eq!(render(&s, &cfg).unwrap().data.len(), 32 * 32 * 3);
    }

    #[test]
    fn brightness_ratio_bounded() {
        let s = reset(Task::CloseDoor, 2, &TaskParams::default()).unwrap();
        let base = render(&s, &RenderConfig::default()).unwrap();
        let bright = render(
            &s,
            &RenderConfig {
                brightness: 1.3,
                ..RenderConfig::default()
            },
        )
        .unwrap();
        for (a, b) in base.data.iter().zip(&bright.data) {
            assert!(*b <= a * 1.3 + 1e-6);
            assert!((0.0..=1.0).contains(b));
        }
        assert_ne!(base, bright);
    }

    #[test]
    fn empty_state_is_background_plus_agent() {
        let s = WorldState {
            agent_pos: [0.5, 0.5],
            gripper: 0.0,
            objects: vec![],
            obstacles: vec![],
            door: None,
            goal: Goal {
                pos: [0.2, 0.2],
                radius: 0.0,
            },
            task: Task::PickPlace,
            step_count: 0,
        };
        let cfg = RenderConfig::default();
        let img = render(&s, &cfg).unwrap();
        let bg = BACKGROUNDS[0];
        let mut agent_px = 0;
        for r in 0..32 {
            for c in 0..32 {
                let p = img.pixel(r, c);
                if p != bg {
                    assert_eq!(p, AGENT_OPEN);
                    agent_px += 1;
                }
            }
        }
        assert!(agent_px > 0 && agent_px <= 24, "{agent_px}");
    }

    #[test]
    fn invalid_config_rejected() {
        let s = reset(Task::PickPlace, 0, &TaskParams::default()).unwrap();
        let cfg = RenderConfig {
            brightness: 2.0,
            ..RenderConfig::default()
        };
        assert!(render(&s, &cfg).is_err());
    }
}
