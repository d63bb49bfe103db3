//! Scripted expert controllers and the task potentials they descend.

use super::{dist, success, Task, Vec2, WorldState, STEP_SIZE};

/// Clearance added to obstacle radii when planning.
const PLAN_MARGIN: f64 = 0.03;
const ARRIVED: f64 = 1e-6;
const DOOR_APPROACH_OFFSET: f64 = 0.1;

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Vec2) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

fn rot(v: Vec2, ang: f64) -> Vec2 {
    let (s, c) = ang.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn seg_point_dist(a: Vec2, b: Vec2, p: Vec2) -> f64 {
    let ab = sub(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 < 1e-18 {
        return dist(a, p);
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    dist([a[0] + t * ab[0], a[1] + t * ab[1]], p)
}

/// Shortest route from `a` to `b` around a single disc.
struct Route {
    length: f64,
    /// Unit direction of the first leg.
    heading: Vec2,
    /// Length of the straight first leg before the route bends.
    leg: f64,
}

fn angle_between(u: Vec2, v: Vec2) -> f64 {
    let c = (u[0] * v[0] + u[1] * v[1]) / (norm(u) * norm(v));
    c.clamp(-1.0, 1.0).acos()
}

fn route(a: Vec2, b: Vec2, disc: Option<(Vec2, f64)>) -> Route {
    let straight = || {
        let d = dist(a, b);
        let heading = if d > 0.0 { [(b[0] - a[0]) / d, (b[1] - a[1]) / d] } else { [0.0, 0.0] };
        Route {
            length: d,
            heading,
            leg: d,
        }
    };
    let Some((c, r)) = disc else { return straight() };
    if seg_point_dist(a, b, c) >= r {
        return straight();
    }
    let (mut da, db) = (dist(a, c), dist(b, c));
    if da < r - 1e-7 || db < r - 1e-7 {
        // inside the planning disc: head straight out
        let out = sub(a, c);
        let n = norm(out).max(1e-12);
        return Route {
            length: dist(a, b) + (r - da).max(0.0),
            heading: [out[0] / n, out[1] / n],
            leg: (r - da).max(0.0),
        };
    }
    let (ua, ub) = (sub(a, c), sub(b, c));
    da = da.max(r);
    let db = db.max(r);
    let alpha_a = (r / da).acos();
    let alpha_b = (r / db).acos();
    let gap = angle_between(ua, ub);
    let arc = (gap - alpha_a - alpha_b).max(0.0);
    let ta_len = (da * da - r * r).sqrt();
    let tb_len = (db * db - r * r).sqrt();
    let length = ta_len + r * arc + tb_len;
    // tangent point on the side of b's bearing
    let cross = ua[0] * ub[1] - ua[1] * ub[0];
    let sgn = if cross >= 0.0 { 1.0 } else { -1.0 };
    let unit_a = [ua[0] / da, ua[1] / da];
    let tp = rot(unit_a, sgn * alpha_a);
    let tpoint = [c[0] + r * tp[0], c[1] + r * tp[1]];
    let to_t = sub(tpoint, a);
    if ta_len > ARRIVED {
        let n = norm(to_t);
        Route {
            length,
            heading: [to_t[0] / n, to_t[1] / n],
            leg: ta_len,
        }
    } else {
        // on the disc: follow its tangent toward b
        let t = rot(unit_a, sgn * std::f64::consts::FRAC_PI_2);
        Route {
            length,
            heading: t,
            leg: f64::INFINITY,
        }
    }
}

fn planning_disc(state: &WorldState) -> Option<(Vec2, f64)> {
    state.obstacles.first().map(|o| (o.pos, o.radius + PLAN_MARGIN))
}

/// Action moving the agent along the route to `target` by at most one step.
fn move_toward(state: &WorldState, target: Vec2) -> [f64; 3] {
    let r = route(state.agent_pos, target, planning_disc(state));
    let h = r.heading;
    let axis = h[0].abs().max(h[1].abs());
    if axis < 1e-12 {
        return [0.0; 3];
    }
    let max_len = STEP_SIZE / axis;
    let len = max_len.min(r.leg).min(r.length);
    [
        (h[0] * len / STEP_SIZE).clamp(-1.0, 1.0),
        (h[1] * len / STEP_SIZE).clamp(-1.0, 1.0),
        0.0,
    ]
}

fn with_grip(a: [f64; 3], g: f64) -> [f64; 3] {
    [a[0], a[1], g]
}

fn door_approach_point(state: &WorldState) -> Option<Vec2> {
    let d = state.door.as_ref()?;
    Some(d.tip_at(d.angle + DOOR_APPROACH_OFFSET))
}

/// True once the agent sits on the door arc at or beyond the tip.
fn door_engaged(state: &WorldState) -> bool {
    let Some(d) = &state.door else { return false };
    let rel = sub(state.agent_pos, d.hinge);
    let radial = (norm(rel) - d.length).abs();
    let phi = rel[1].atan2(rel[0]);
    radial < 1e-6 && phi >= d.angle - 1e-9 && phi <= d.angle + DOOR_APPROACH_OFFSET + 1e-9
}

/// Scripted controller for `state.task`. Returns the zero action at success.
pub fn expert_action(state: &WorldState) -> [f64; 3] {
    if success(state) {
        return [0.0; 3];
    }
    match state.task {
        Task::PickPlace | Task::FoldCorners => {
            let target = &state.objects[0];
            let dest = state.goal.pos;
            // the gripper command is held (+1 carrying, -1 otherwise) so the
            // gripper never drifts between toggles
            if target.held {
                if dist(state.agent_pos, dest) < ARRIVED {
                    [0.0, 0.0, -1.0]
                } else {
                    with_grip(move_toward(state, dest), 1.0)
                }
            } else if state.gripper >= 0.5 {
                [0.0, 0.0, -1.0]
            } else if dist(state.agent_pos, target.pos) < ARRIVED {
                [0.0, 0.0, 1.0]
            } else {
                with_grip(move_toward(state, target.pos), -1.0)
            }
        }
        Task::CloseDoor => {
            let d = state.door.as_ref().expect("close_door state has a door");
            if door_engaged(state) {
                // walk the arc past the tip; the door follows
                let phi = {
                    let rel = sub(state.agent_pos, d.hinge);
                    rel[1].atan2(rel[0])
                };
                // chord of 0.9 * STEP_SIZE keeps every axis inside one step
                let dphi = 2.0 * (0.45 * STEP_SIZE / d.length).asin();
                let target = d.tip_at((phi - dphi).max(-0.2));
                let v = sub(target, state.agent_pos);
                [v[0] / STEP_SIZE, v[1] / STEP_SIZE, 0.0].map(|x| x.clamp(-1.0, 1.0))
            } else {
                let p = door_approach_point(state).expect("door present");
                let dir = sub(p, state.agent_pos);
                let n = norm(dir);
                let axis = (dir[0].abs().max(dir[1].abs()) / n).max(1e-12);
                let len = (STEP_SIZE / axis).min(n);
                [dir[0] / n * len / STEP_SIZE, dir[1] / n * len / STEP_SIZE, 0.0].map(|x| x.clamp(-1.0, 1.0))
            }
        }
    }
}

/// Task potential the expert strictly decreases on every movement step:
/// remaining planned path length (plus door travel for `close_door`).
pub fn potential(state: &WorldState) -> f64 {
    if success(state) {
        return 0.0;
    }
    let disc = planning_disc(state);
    match state.task {
        Task::PickPlace | Task::FoldCorners => {
            let target = &state.objects[0];
            let dest = state.goal.pos;
            if target.held {
                route(state.agent_pos, dest, disc).length
            } else {
                route(state.agent_pos, target.pos, disc).length + route(target.pos, dest, disc).length
            }
        }
        Task::CloseDoor => {
            let d = state.door.as_ref().expect("door present");
            if door_engaged(state) {
                // remaining arc of the agent; the door angle never exceeds it
                let rel = sub(state.agent_pos, d.hinge);
                d.length * rel[1].atan2(rel[0])
            } else {
                let p = door_approach_point(state).expect("door present");
                // approach leg, then the arc from the approach point
                dist(state.agent_pos, p) + d.length * (d.angle + DOOR_APPROACH_OFFSET)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{reset, step, TaskParams};
    use super::*;

    fn rollout(task: Task, seed: u64) -> (bool, Vec<(f64, bool)>) {
        let mut s = reset(task, seed, &TaskParams::default()).unwrap();
        let mut log = vec![(potential(&s), false)];
        for _ in 0..200 {
            if success(&s) {
                return (true, log);
            }
            let a = expert_action(&s);
            let toggle = a[0] == 0.0 && a[1] == 0.0;
            s = step(&s, a).unwrap();
            log.push((potential(&s), toggle));
        }
        (success(&s), log)
    }

    #[test]
    fn expert_solves_every_seed() {
        for task in Task::ALL {
            for seed in 0..100 {
                let (ok, log) = rollout(task, seed);
                assert!(ok, "{task} seed {seed} failed after {} steps", log.len());
            }
        }
    }

    #[test]
    fn expert_on_seed_7_pick_place() {
        assert!(rollout(Task::PickPlace, 7).0);
    }

    #[test]
    fn potential_strictly_decreases_except_toggles() {
        for task in Task::ALL {
            for seed in 0..100 {
                let (_, log) = rollout(task, seed);
                for w in log.windows(2) {
                    let ((prev, _), (next, toggle)) = (w[0], w[1]);
                    if toggle {
                        assert!(next <= prev + 1e-9, "{task} seed {seed}: toggle raised potential");
                    } else {
                        assert!(next < prev, "{task} seed {seed}: {prev} -> {next}");
                    }
                }
            }
        }
    }

    #[test]
    fn opens_gripper_over_goal() {
        let mut s = reset(Task::PickPlace, 1, &TaskParams::default()).unwrap();
        s.agent_pos = s.goal.pos;
        s.objects[0].pos = s.goal.pos;
        s.objects[0].held = true;
        s.gripper = 1.0;
        assert!(expert_action(&s)[2] < 0.0);
    }

    #[test]
    fn expert_episodes_fit_chunk_scale() {
        let mut lens = Vec::new();
        for seed in 0..50 {
            lens.push(rollout(Task::PickPlace, seed).1.len() - 1);
        }
        let max = *lens.iter().max().unwrap();
        assert!(max <= 80, "{lens:?}");
    }
}
