//! Deterministic 2-D manipulation world.
//!
//! Three tasks stand in for rigid, articulated and deformable manipulation:
//! `pick_place` (carry an object into a goal region around an obstacle),
//! `close_door` (push a hinged door shut) and `fold_corners` (bring one corner
//! marker onto another). Dynamics are a pure function of `(state, action)`.

mod cache;
mod demos;
mod expert;
mod ood;
mod render;

pub use cache::{load_episodes, load_or_generate, save_episodes, CacheManifest, CacheSpec, ManifestEntry, CACHE_MAGIC};
pub use demos::{generate_demos, generate_demos_with, labeled_count, record_episode, Episode, SourceTag};
pub use expert::{expert_action, potential};
pub use ood::{ood_transform, OodKind, TaskParams};
pub use render::{render, Image, RenderConfig, RenderStyle};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derived_rng, Rng};
use rand::Rng as _;

/// Per-axis displacement for a unit action component.
pub const STEP_SIZE: f64 = 0.05;
/// Maximum agent–object distance at which closing the gripper grasps.
pub const GRASP_RADIUS: f64 = 0.05;
pub const ACTION_DIM: usize = 3;
/// Door tip distance within which the agent moves the door.
pub const DOOR_REACH: f64 = 0.07;
pub const DOOR_LENGTH: f64 = 0.3;
pub const DOOR_CLOSED: f64 = 0.05;
pub const FOLD_DISTANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PickPlace,
    CloseDoor,
    FoldCorners,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::PickPlace, Task::CloseDoor, Task::FoldCorners];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::PickPlace => "pick_place",
            Task::CloseDoor => "close_door",
            Task::FoldCorners => "fold_corners",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Task> {
        Task::ALL.get(c as usize).copied()
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| invalid("task", format!("unknown task {s:?}")))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Cup,
    Block,
    CornerMarker,
}

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub pos: Vec2,
    pub kind: ObjectKind,
    pub color_id: u8,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub pos: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub pos: Vec2,
    pub radius: f64,
}

/// Hinged door; `angle` is measured from the closed orientation (+x axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Door {
    pub hinge: Vec2,
    pub length: f64,
    pub angle: f64,
}

impl Door {
    pub fn tip_at(&self, angle: f64) -> Vec2 {
        [
            self.hinge[0] + self.length * angle.cos(),
            self.hinge[1] + self.length * angle.sin(),
        ]
    }

    pub fn tip(&self) -> Vec2 {
        self.tip_at(self.angle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_pos: Vec2,
    /// 0 open, 1 closed.
    pub gripper: f64,
    pub objects: Vec<Object>,
    pub obstacles: Vec<Obstacle>,
    /// Present iff `task == CloseDoor`.
    pub door: Option<Door>,
    pub goal: Goal,
    pub task: Task,
    pub step_count: u32,
}

impl WorldState {
    pub fn door_angle(&self) -> Option<f64> {
        self.door.as_ref().map(|d| d.angle)
    }

    pub fn held_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }
}

pub(crate) fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_unit(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

// ---- instructions ---------------------------------------------------------

pub const TOKEN_PAD: u32 = 0;
const TOKEN_PICK: u32 = 1;
const TOKEN_CLOSE: u32 = 2;
const TOKEN_FOLD: u32 = 3;
const TOKEN_TO: u32 = 4;
const TOKEN_GOAL: u32 = 5;
const TOKEN_DOOR: u32 = 6;
const TOKEN_CUP: u32 = 7;
const TOKEN_BLOCK: u32 = 8;
const TOKEN_CORNER: u32 = 9;
const TOKEN_COLOR_BASE: u32 = 10;
pub const VOCAB_SIZE: usize = 15;
pub const INSTRUCTION_LEN: usize = 6;

pub fn color_token(color_id: u8) -> u32 {
    TOKEN_COLOR_BASE + u32::from(color_id)
}

fn kind_token(kind: ObjectKind) -> u32 {
    match kind {
        ObjectKind::Cup => TOKEN_CUP,
        ObjectKind::Block => TOKEN_BLOCK,
        ObjectKind::CornerMarker => TOKEN_CORNER,
    }
}

/// Fixed-length token sequence describing the task of `state`.
pub fn instruction(state: &WorldState) -> Vec<u32> {
    let p = TOKEN_PAD;
    match state.task {
        Task::PickPlace => {
            let o = &state.objects[0];
            vec![TOKEN_PICK, color_token(o.color_id), kind_token(o.kind), TOKEN_TO, TOKEN_GOAL, p]
        }
        Task::CloseDoor => vec![TOKEN_CLOSE, TOKEN_DOOR, p, p, p, p],
        Task::FoldCorners => {
            let (a, b) = (&state.objects[0], &state.objects[1]);
            vec![
                TOKEN_FOLD,
                color_token(a.color_id),
                TOKEN_CORNER,
                TOKEN_TO,
                color_token(b.color_id),
                TOKEN_CORNER,
            ]
        }
    }
}

// ---- reset ----------------------------------------------------------------

fn sample_point(rng: &mut Rng, lo: f64, hi: f64) -> Vec2 {
    [rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Deterministic initial state for `(task, seed)` under `params`.
pub fn reset(task: Task, seed: u64, params: &TaskParams) -> Result<WorldState> {
    params.validate()?;
    let mut rng = derived_rng(seed, task.as_str(), 0);
    for _attempt in 0..10_000 {
        let candidate = match task {
            Task::PickPlace => place_pick(&mut rng, params),
            Task::CloseDoor => place_door(&mut rng),
            Task::FoldCorners => place_fold(&mut rng, params),
        };
        if let Some(s) = candidate {
            return Ok(s);
        }
    }
    Err(invalid("reset", format!("no valid placement for {task} seed {seed}")))
}

fn pick_color(rng: &mut Rng, params: &TaskParams) -> u8 {
    params.object_colors[rng.random_range(0..params.object_colors.len())]
}

fn place_pick(rng: &mut Rng, params: &TaskParams) -> Option<WorldState> {
    let object = sample_point(rng, 0.1, 0.9);
    let goal = sample_point(rng, 0.15, 0.85);
    if dist(object, goal) < 0.35 {
        return None;
    }
    let mut obstacles = Vec::new();
    if params.obstacles > 0 {
        // obstacle near the carry path so the detour matters
        let mid = [(object[0] + goal[0]) / 2.0, (object[1] + goal[1]) / 2.0];
        let c = [mid[0] + rng.random_range(-0.08..0.08), mid[1] + rng.random_range(-0.08..0.08)];
        let r = rng.random_range(0.07..0.1);
        if !(0.25..=0.75).contains(&c[0]) || !(0.25..=0.75).contains(&c[1]) {
            return None;
        }
        if dist(c, object) < r + 0.08 || dist(c, goal) < r + GOAL_RADIUS + 0.04 {
            return None;
        }
        obstacles.push(Obstacle { pos: c, radius: r });
    }
    let agent = sample_point(rng, 0.1, 0.9);
    if dist(agent, object) < 0.15 || dist(agent, goal) < 0.1 {
        return None;
    }
    if obstacles.iter().any(|o| dist(agent, o.pos) < o.radius + 0.08) {
        return None;
    }
    let kind = if rng.random_bool(0.5) {
        ObjectKind::Cup
    } else {
        ObjectKind::Block
    };
    let color_id = pick_color(rng, params);
    Some(WorldState {
        agent_pos: agent,
        gripper: 0.0,
        objects: vec![Object {
            pos: object,
            kind,
            color_id,
            held: false,
        }],
        obstacles,
        door: None,
        goal: Goal {
            pos: goal,
            radius: GOAL_RADIUS,
        },
        task: Task::PickPlace,
        step_count: 0,
    })
}

const GOAL_RADIUS: f64 = 0.08;

fn place_door(rng: &mut Rng) -> Option<WorldState> {
    let hinge = [rng.random_range(0.2..0.5), rng.random_range(0.15..0.35)];
    let angle = rng.random_range(0.5..std::f64::consts::FRAC_PI_2);
    let door = Door {
        hinge,
        length: DOOR_LENGTH,
        angle: angle.min(std::f64::consts::FRAC_PI_2),
    };
    let agent = sample_point(rng, 0.1, 0.9);
    let rel = [agent[0] - hinge[0], agent[1] - hinge[1]];
    // start on the open side of the door, clear of its sweep
    if rel[1] <= 0.0 || rel[1].atan2(rel[0]) < door.angle + 0.25 {
        return None;
    }
    if dist(agent, door.tip()) < 0.15 || dist(agent, hinge) < 0.1 {
        return None;
    }
    let closed = door.tip_at(0.0);
    Some(WorldState {
        agent_pos: agent,
        gripper: 0.0,
        objects: Vec::new(),
        obstacles: Vec::new(),
        goal: Goal {
            pos: closed,
            radius: DOOR_CLOSED,
        },
        door: Some(door),
        task: Task::CloseDoor,
        step_count: 0,
    })
}

fn place_fold(rng: &mut Rng, params: &TaskParams) -> Option<WorldState> {
    let a = sample_point(rng, 0.15, 0.85);
    let b = sample_point(rng, 0.15, 0.85);
    if dist(a, b) < 0.3 {
        return None;
    }
    let agent = sample_point(rng, 0.1, 0.9);
    if dist(agent, a) < 0.15 || dist(agent, b) < 0.1 {
        return None;
    }
    let ca = pick_color(rng, params);
    let cb = pick_color(rng, params);
    let corner = |pos, color_id| Object {
        pos,
        kind: ObjectKind::CornerMarker,
        color_id,
        held: false,
    };
    Some(WorldState {
        agent_pos: agent,
        gripper: 0.0,
        objects: vec![corner(a, ca), corner(b, cb)],
        obstacles: Vec::new(),
        door: None,
        goal: Goal {
            pos: b,
            radius: FOLD_DISTANCE,
        },
        task: Task::FoldCorners,
        step_count: 0,
    })
}

// ---- dynamics -------------------------------------------------------------

/// One deterministic transition. Action components are clipped to `[-1, 1]`.
pub fn step(state: &WorldState, action: [f64; 3]) -> Result<WorldState> {
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("action {action:?}")));
    }
    let a = action.map(|v| v.clamp(-1.0, 1.0));
    let mut next = state.clone();

    let before = state.agent_pos;
    let mut pos = clamp_unit([before[0] + STEP_SIZE * a[0], before[1] + STEP_SIZE * a[1]]);
    for o in &next.obstacles {
        let d = dist(pos, o.pos);
        if d < o.radius {
            let dir = if d > 1e-12 {
                [(pos[0] - o.pos[0]) / d, (pos[1] - o.pos[1]) / d]
            } else {
                [1.0, 0.0]
            };
            pos = [o.pos[0] + dir[0] * o.radius, o.pos[1] + dir[1] * o.radius];
        }
    }
    next.agent_pos = clamp_unit(pos);

    let g_before = state.gripper;
    next.gripper = (g_before + a[2]).clamp(0.0, 1.0);
    if g_before < 0.5 && next.gripper >= 0.5 && next.held_index().is_none() {
        let nearest = next
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, dist(o.pos, next.agent_pos)))
            .filter(|(_, d)| *d < GRASP_RADIUS)
            .min_by(|x, y| x.1.total_cmp(&y.1));
        if let Some((i, _)) = nearest {
            next.objects[i].held = true;
        }
    } else if g_before >= 0.5 && next.gripper < 0.5 {
        for o in &mut next.objects {
            o.held = false;
        }
    }
    let agent = next.agent_pos;
    for o in next.objects.iter_mut().filter(|o| o.held) {
        o.pos = agent;
    }

    if let Some(door) = &mut next.door {
        if dist(before, door.tip()) < DOOR_REACH {
            let rel = [agent[0] - door.hinge[0], agent[1] - door.hinge[1]];
            let phi = rel[1].atan2(rel[0]);
            if phi < door.angle {
                door.angle = phi.max(0.0);
            }
        }
    }

    next.step_count += 1;
    Ok(next)
}

/// Task completion predicate.
pub fn success(state: &WorldState) -> bool {
    match state.task {
        Task::PickPlace => state
            .objects
            .first()
            .is_some_and(|o| !o.held && dist(o.pos, state.goal.pos) < state.goal.radius),
        Task::CloseDoor => state.door.as_ref().is_some_and(|d| d.angle < DOOR_CLOSED),
        Task::FoldCorners => {
            state.objects.len() >= 2 && dist(state.objects[0].pos, state.objects[1].pos) < FOLD_DISTANCE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> TaskParams {
        TaskParams::default()
    }

    #[test]
    fn reset_is_deterministic() {
        for task in Task::ALL {
            assert_eq!(reset(task, 5, &params()).unwrap(), reset(task, 5, &params()).unwrap());
        }
    }

    #[test]
    fn pick_place_goal_far_from_object() {
        for seed in 0..100 {
            let s = reset(Task::PickPlace, seed, &params()).unwrap();
            assert!(dist(s.objects[0].pos, s.goal.pos) > 0.2, "seed {seed}");
        }
    }

    #[test]
    fn door_angle_in_range() {
        for seed in 0..100 {
            let s = reset(Task::CloseDoor, seed, &params()).unwrap();
            let a = s.door_angle().unwrap();
            assert!(a > 0.0 && a <= std::f64::consts::FRAC_PI_2);
        }
        assert!(reset(Task::PickPlace, 0, &params()).unwrap().door.is_none());
    }

    #[test]
    fn zero_action_is_fixed_point() {
        let s = reset(Task::PickPlace, 3, &params()).unwrap();
        let n = step(&s, [0.0; 3]).unwrap();
        assert_eq!(n.agent_pos, s.agent_pos);
        assert_eq!(n.objects, s.objects);
        assert_eq!(n.step_count, s.step_count + 1);
    }

    #[test]
    fn pushing_into_obstacle_ends_outside() {
        let mut s = reset(Task::PickPlace, 11, &params()).unwrap();
        let o = s.obstacles[0].clone();
        s.agent_pos = [o.pos[0] - o.radius - 0.01, o.pos[1]];
        let n = step(&s, [1.0, 0.0, 0.0]).unwrap();
        assert!(dist(n.agent_pos, o.pos) >= o.radius - 1e-12);
    }

    #[test]
    fn non_finite_action_rejected() {
        let s = reset(Task::PickPlace, 0, &params()).unwrap();
        assert!(step(&s, [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn success_predicates() {
        let mut s = reset(Task::FoldCorners, 2, &params()).unwrap();
        s.objects[0].pos = [0.5, 0.5];
        s.objects[1].pos = [0.54, 0.5];
        assert!(success(&s));

        let mut s = reset(Task::PickPlace, 2, &params()).unwrap();
        s.objects[0].pos = s.goal.pos;
        s.objects[0].held = true;
        assert!(!success(&s));
        s.objects[0].held = false;
        assert!(success(&s));

        let mut s = reset(Task::CloseDoor, 2, &params()).unwrap();
        s.door.as_mut().unwrap().angle = 0.0;
        assert!(success(&s));
    }

    #[test]
    fn grasp_and_release() {
        let mut s = reset(Task::PickPlace, 4, &params()).unwrap();
        s.agent_pos = [s.objects[0].pos[0] + 0.03, s.objects[0].pos[1]];
        let s = step(&s, [0.0, 0.0, 1.0]).unwrap();
        assert!(s.objects[0].held);
        let moved = step(&s, [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(moved.objects[0].pos, moved.agent_pos);
        let released = step(&moved, [0.0, 0.0, -1.0]).unwrap();
        assert!(!released.objects[0].held);
    }

    #[test]
    fn instruction_has_fixed_length() {
        for task in Task::ALL {
            let s = reset(task, 1, &params()).unwrap();
            let ins = instruction(&s);
            assert_eq!(ins.len(), INSTRUCTION_LEN);
            assert!(ins.iter().all(|&t| (t as usize) < VOCAB_SIZE));
        }
    }
}
