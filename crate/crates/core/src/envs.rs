//! Deterministic 2D manipulation toys.
//!
//! Two tasks share one state layout:
//!
//! * `PushToTarget`: the object slides on the rail `y = 0.5`; the gripper
//!   pushes it along `+x` until it reaches `x ≥ 0.95`. Grasping is ignored.
//! * `PickPlace2D`: grasp the object (closed gripper within the grasp radius),
//!   carry it and release it within the success radius of the target.
//!
//! Observations are 10-vectors `[p(2), closed, b(2), g(2), q(2), s]` where `q`
//! is a task-irrelevant distractor and `s` the object size.

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub const OBS_DIM: usize = 10;
pub const ACTION_DIM: usize = 3;

pub type Observation = [f64; OBS_DIM];
pub type Action = [f64; ACTION_DIM];

/// Reset-time ranges.
const INNER_LO: f64 = 0.1;
const INNER_HI: f64 = 0.9;
const RAIL_Y: f64 = 0.5;
const PUSH_GOAL_X: f64 = 0.95;
const TRAIN_SIZE: (f64, f64) = (0.04, 0.06);
const NOVEL_SIZE: (f64, f64) = (0.08, 0.10);
const DISTRACTOR_CORNERS: [[f64; 2]; 4] = [[0.1, 0.1], [0.1, 0.9], [0.9, 0.1], [0.9, 0.9]];

/// Proportional gain of the scripted controller.
const EXPERT_GAIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    PushToTarget,
    PickPlace2D,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::PushToTarget, Task::PickPlace2D];

    pub fn name(self) -> &'static str {
        match self {
            Task::PushToTarget => "push",
            Task::PickPlace2D => "pickplace",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "push" | "PushToTarget" => Ok(Task::PushToTarget),
            "pickplace" | "PickPlace2D" => Ok(Task::PickPlace2D),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OodMode {
    None,
    NovelObject,
    RandomLight,
    VisualDistractor,
}

impl OodMode {
    pub const ALL: [OodMode; 4] = [
        OodMode::None,
        OodMode::NovelObject,
        OodMode::RandomLight,
        OodMode::VisualDistractor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OodMode::None => "none",
            OodMode::NovelObject => "novel_object",
            OodMode::RandomLight => "random_light",
            OodMode::VisualDistractor => "visual_distractor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ood mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodConfig {
    pub mode: OodMode,
    pub magnitude: f64,
}

impl OodConfig {
    pub const NONE: OodConfig = OodConfig {
        mode: OodMode::None,
        magnitude: 0.0,
    };

    pub fn new(mode: OodMode, magnitude: f64) -> Result<Self> {
        if !(magnitude >= 0.0) || !magnitude.is_finite() {
            return Err(Error::InvalidArgument(format!("ood magnitude must be >= 0, got {magnitude}")));
        }
        Ok(Self { mode, magnitude })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub task: Task,
    pub max_steps: usize,
    pub dt: f64,
    pub grasp_radius: f64,
    pub success_radius: f64,
    pub ood: OodConfig,
}

impl TaskSpec {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            max_steps: 120,
            dt: 0.05,
            grasp_radius: 0.05,
            success_radius: 0.05,
            ood: OodConfig::NONE,
        }
    }

    pub fn with_ood(self, ood: OodConfig) -> Self {
        Self { ood, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f64| r > 0.0 && r <= 0.2;
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if !in_range(self.grasp_radius) || !in_range(self.success_radius) {
            return Err(Error::InvalidArgument("radii must lie in (0, 0.2]".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Full simulator state, including the per-episode OOD draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub gripper: [f64; 2],
    pub closed: bool,
    pub object: [f64; 2],
    pub attached: bool,
    pub target: [f64; 2],
    pub distractor: [f64; 2],
    pub object_size: f64,
    pub steps: usize,
    /// Additive observation offset (zero unless `RandomLight`); never touches `p`.
    pub light_offset: Observation,
    /// Phase of the circular distractor motion (used by `VisualDistractor`).
    pub distractor_phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    [
        (EXPERT_GAIN * (to[0] - from[0])).clamp(-1.0, 1.0),
        (EXPERT_GAIN * (to[1] - from[1])).clamp(-1.0, 1.0),
    ]
}

const DISTRACTOR_SPEED: f64 = 0.2;

fn distractor_radius(magnitude: f64) -> f64 {
    (0.2 * (1.0 + magnitude)).min(0.45)
}

impl TaskSpec {
    pub fn reset(&self, seed: u64) -> (EnvState, Observation) {
        let mut rng = SeededRng::new(seed);
        let mut u = |lo: f64, hi: f64| rng.uniform_range(lo, hi);
        let (gripper, object, target) = match self.task {
            Task::PushToTarget => {
                let p = [u(INNER_LO, 0.3), u(INNER_LO, INNER_HI)];
                let b = [u(0.4, 0.7), RAIL_Y];
                (p, b, [PUSH_GOAL_X, RAIL_Y])
            }
            Task::PickPlace2D => loop {
                let p = [u(INNER_LO, INNER_HI), u(INNER_LO, INNER_HI)];
                let b = [u(INNER_LO, INNER_HI), u(INNER_LO, INNER_HI)];
                let g = [u(INNER_LO, INNER_HI), u(INNER_LO, INNER_HI)];
                if dist(b, g) >= 0.25 && dist(p, b) >= 0.1 {
                    break (p, b, g);
                }
            },
        };
        let corner = DISTRACTOR_CORNERS[(u(0.0, 4.0) as usize).min(3)];
        let size = u(TRAIN_SIZE.0, TRAIN_SIZE.1);
        let novel_size = u(NOVEL_SIZE.0, NOVEL_SIZE.1);
        let phase = u(0.0, std::f64::consts::TAU);
        let mut light = [0.0; OBS_DIM];
        for v in light.iter_mut().skip(2) {
            *v = u(-1.0, 1.0);
        }

        let ood = self.ood;
        let object_size = match ood.mode {
            OodMode::NovelObject => novel_size * (1.0 + ood.magnitude),
            _ => size,
        };
        let light_offset = match ood.mode {
            OodMode::RandomLight => light.map(|v| v * ood.magnitude),
            _ => [0.0; OBS_DIM],
        };
        let mut state = EnvState {
            gripper,
            closed: false,
            object,
            attached: false,
            target,
            distractor: corner,
            object_size,
            steps: 0,
            light_offset,
            distractor_phase: phase,
        };
        self.place_distractor(&mut state);
        (state, self.observe(&state))
    }

    fn place_distractor(&self, s: &mut EnvState) {
        if self.ood.mode == OodMode::VisualDistractor {
            let r = distractor_radius(self.ood.magnitude);
            let angle = s.distractor_phase + DISTRACTOR_SPEED * s.steps as f64;
            s.distractor = [clip01(0.5 + r * angle.cos()), clip01(0.5 + r * angle.sin())];
        }
    }

    pub fn observe(&self, s: &EnvState) -> Observation {
        let raw = [
            s.gripper[0],
            s.gripper[1],
            if s.closed { 1.0 } else { 0.0 },
            s.object[0],
            s.object[1],
            s.target[0],
            s.target[1],
            s.distractor[0],
            s.distractor[1],
            s.object_size,
        ];
        let mut o = raw;
        for (v, off) in o.iter_mut().zip(&s.light_offset) {
            *v += off;
        }
        o
    }

    pub fn is_success(&self, s: &EnvState) -> bool {
        match self.task {
            Task::PushToTarget => s.object[0] >= PUSH_GOAL_X,
            Task::PickPlace2D => dist(s.object, s.target) <= self.success_radius && !s.attached,
        }
    }

    pub fn step(&self, state: &EnvState, action: &Action) -> Transition {
        let a = action.map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 });
        let mut s = *state;
        let prev = s.gripper;
        s.gripper = [clip01(prev[0] + self.dt * a[0]), clip01(prev[1] + self.dt * a[1])];
        s.closed = a[2] > 0.5;
        let r = self.grasp_radius;
        match self.task {
            Task::PushToTarget => {
                s.attached = false;
                let p = s.gripper;
                let b = s.object;
                if a[0] > 0.0 && prev[0] <= b[0] && (p[1] - b[1]).abs() <= r && p[0] + r > b[0] {
                    s.object[0] = clip01(p[0] + r);
                }
            }
            Task::PickPlace2D => {
                if !s.closed {
                    s.attached = false;
                } else if !s.attached && dist(s.gripper, s.object) <= r {
                    s.attached = true;
                }
                if s.attached {
                    s.object = s.gripper;
                }
            }
        }
        s.steps += 1;
        self.place_distractor(&mut s);
        let success = self.is_success(&s);
        Transition {
            state: s,
            observation: self.observe(&s),
            done: success || s.steps >= self.max_steps,
            success,
        }
    }

    /// Scripted proportional controller; a pure function of the state.
    pub fn expert_action(&self, s: &EnvState) -> Action {
        let r = self.grasp_radius;
        let p = s.gripper;
        let b = s.object;
        match self.task {
            Task::PushToTarget => {
                let behind = [b[0] - r - 0.01, RAIL_Y];
                let aligned = (p[1] - RAIL_Y).abs() <= 0.01 && p[0] >= b[0] - r - 0.03 && p[0] <= b[0];
                if aligned {
                    [1.0, (EXPERT_GAIN * (RAIL_Y - p[1])).clamp(-1.0, 1.0), -1.0]
                } else {
                    let v = toward(p, behind);
                    [v[0], v[1], -1.0]
                }
            }
            Task::PickPlace2D => {
                let g = s.target;
                if s.attached {
                    if dist(p, g) <= 0.02 {
                        [0.0, 0.0, -1.0]
                    } else {
                        let v = toward(p, g);
                        [v[0], v[1], 1.0]
                    }
                } else if dist(b, g) <= self.success_radius {
                    [0.0, 0.0, 0.0]
                } else {
                    let v = toward(p, b);
                    let grip = if dist(p, b) <= 0.6 * r { 1.0 } else { -1.0 };
                    [v[0], v[1], grip]
                }
            }
        }
    }
}

/// Uniform exploration action in `[-1, 1]^3`.
pub fn random_policy(rng: &mut SeededRng) -> Action {
    [
        rng.uniform_range(-1.0, 1.0),
        rng.uniform_range(-1.0, 1.0),
        rng.uniform_range(-1.0, 1.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_expert(spec: &TaskSpec, seed: u64) -> (bool, usize) {
        let (mut s, _) = spec.reset(seed);
        loop {
            let t = spec.step(&s, &spec.expert_action(&s));
            s = t.state;
            if t.done {
                return (t.success, s.steps);
            }
        }
    }

    #[test]
    fn reset_is_seed_deterministic() {
        let spec = TaskSpec::new(Task::PickPlace2D);
        assert_eq!(spec.reset(3), spec.reset(3));
        assert_ne!(spec.reset(3).0, spec.reset(4).0);
    }

    #[test]
    fn reset_ranges() {
        for task in Task::ALL {
            let spec = TaskSpec::new(task);
            for seed in 0..200 {
                let (s, o) = spec.reset(seed);
                assert!((0.04..=0.06).contains(&s.object_size));
                assert!(s.gripper.iter().chain(&s.object).all(|v| (0.1..=0.9).contains(v)));
                assert!(DISTRACTOR_CORNERS.contains(&s.distractor));
                if task == Task::PushToTarget {
                    assert_eq!(s.object[1], 0.5);
                    assert_eq!(s.target, [0.95, 0.5]);
                }
                assert_eq!(o[0..2], s.gripper);
            }
        }
    }

    #[test]
    fn novel_object_size_range() {
        let spec = TaskSpec::new(Task::PickPlace2D).with_ood(OodConfig::new(OodMode::NovelObject, 0.5).unwrap());
        for seed in 0..50 {
            let (s, _) = spec.reset(seed);
            assert!(s.object_size >= 0.08 * 1.5 && s.object_size <= 0.10 * 1.5);
        }
    }

    #[test]
    fn random_light_leaves_gripper_untouched() {
        let spec = TaskSpec::new(Task::PickPlace2D).with_ood(OodConfig::new(OodMode::RandomLight, 0.2).unwrap());
        let (s, o) = spec.reset(5);
        assert_eq!(o[0..2], s.gripper);
        assert!(s.light_offset[2..].iter().all(|v| v.abs() <= 0.2));
        assert!(s.light_offset[2..].iter().any(|v| *v != 0.0));
        let next = spec.step(&s, &[0.0, 0.0, 0.0]);
        assert_eq!(next.state.light_offset, s.light_offset);
    }

    #[test]
    fn move_right() {
        let spec = TaskSpec::new(Task::PickPlace2D);
        let (mut s, _) = spec.reset(0);
        s.gripper = [0.5, 0.5];
        s.object = [0.1, 0.1];
        let t = spec.step(&s, &[1.0, 0.0, 0.0]);
        assert!((t.state.gripper[0] - 0.55).abs() < 1e-15);
        assert_eq!(t.state.gripper[1], 0.5);
    }

    #[test]
    fn zero_action_only_counts_steps() {
        for task in Task::ALL {
            let spec = TaskSpec::new(task);
            let (s, _) = spec.reset(1);
            let t = spec.step(&s, &[0.0, 0.0, 0.0]);
            let mut want = s;
            want.steps += 1;
            assert_eq!(t.state, want);
        }
    }

    #[test]
    fn attached_object_tracks_gripper() {
        let spec = TaskSpec::new(Task::PickPlace2D);
        let (mut s, _) = spec.reset(2);
        s.object = s.gripper;
        s = spec.step(&s, &[0.0, 0.0, 1.0]).state;
        assert!(s.attached && s.closed);
        s = spec.step(&s, &[0.7, -0.4, 1.0]).state;
        assert_eq!(s.object, s.gripper);
        let dropped = spec.step(&s, &[0.5, 0.5, -1.0]).state;
        assert!(!dropped.attached);
        assert_eq!(dropped.object, s.object);
    }

    #[test]
    fn push_moves_object_along_rail() {
        let spec = TaskSpec::new(Task::PushToTarget);
        let (mut s, _) = spec.reset(0);
        s.object = [0.5, 0.5];
        s.gripper = [0.44, 0.5];
        let t = spec.step(&s, &[1.0, 0.0, 1.0]);
        assert!((t.state.object[0] - (0.49 + 0.05)).abs() < 1e-12);
        assert_eq!(t.state.object[1], 0.5);
        assert!(!t.state.attached);
    }

    #[test]
    fn workspace_closure_under_extreme_actions() {
        for task in Task::ALL {
            let spec = TaskSpec::new(task);
            let (mut s, _) = spec.reset(7);
            let mut rng = SeededRng::new(1);
            for _ in 0..300 {
                let a = [rng.uniform_range(-5.0, 5.0), rng.uniform_range(-5.0, 5.0), rng.uniform_range(-2.0, 2.0)];
                s = spec.step(&s, &a).state;
                for v in s.gripper.iter().chain(&s.object).chain(&s.distractor) {
                    assert!((0.0..=1.0).contains(v));
                }
                assert!(!s.attached || s.closed);
            }
        }
    }

    #[test]
    fn expert_idles_when_object_already_placed() {
        let spec = TaskSpec::new(Task::PickPlace2D);
        let (mut s, _) = spec.reset(3);
        s.object = s.target;
        let a = spec.expert_action(&s);
        assert!(a.iter().all(|v| v.abs() < 1e-12));
        let t = spec.step(&s, &a);
        assert!(t.success && t.done);
    }

    #[test]
    fn expert_moves_right_toward_object() {
        let spec = TaskSpec::new(Task::PickPlace2D);
        let (mut s, _) = spec.reset(3);
        s.gripper = [0.1, 0.5];
        s.object = [0.8, 0.5];
        assert!(spec.expert_action(&s)[0] > 0.0);
        let push = TaskSpec::new(Task::PushToTarget);
        let (s, _) = push.reset(3);
        assert!(push.expert_action(&s)[0] > 0.0);
    }

    #[test]
    fn expert_solves_calibration_suite() {
        for task in Task::ALL {
            let spec = TaskSpec::new(task);
            for seed in 0..100 {
                let (ok, steps) = run_expert(&spec, seed);
                assert!(ok, "{task:?} seed {seed} failed after {steps} steps");
            }
        }
    }

    #[test]
    fn distractor_visibility() {
        let none = TaskSpec::new(Task::PickPlace2D);
        let moving = none.with_ood(OodConfig::new(OodMode::VisualDistractor, 1.0).unwrap());
        for spec in [none, moving] {
            let (mut s, o0) = spec.reset(9);
            let mut qs = vec![[o0[7], o0[8]]];
            for _ in 0..10 {
                let t = spec.step(&s, &spec.expert_action(&s));
                s = t.state;
                qs.push([t.observation[7], t.observation[8]]);
            }
            let constant = qs.iter().all(|q| *q == qs[0]);
            assert_eq!(constant, spec.ood.mode == OodMode::None);
        }
    }

    #[test]
    fn random_policy_bounds_and_mean() {
        let mut rng = SeededRng::new(12);
        let n = 100_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let a = random_policy(&mut rng);
            for k in 0..3 {
                assert!((-1.0..=1.0).contains(&a[k]));
                sum[k] += a[k];
            }
        }
        for s in sum {
            assert!((s / n as f64).abs() < 0.02);
        }
        assert_eq!(random_policy(&mut SeededRng::new(1)), random_policy(&mut SeededRng::new(1)));
    }
}
