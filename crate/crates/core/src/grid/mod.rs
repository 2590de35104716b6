//! Door-and-switch gridworld tasks.
//!
//! Agents move one cell per step on a square grid. Doors are open exactly
//! while their switches are occupied; there is no latching, so the door
//! state is a pure function of the agents' positions. An episode ends with
//! +100 for every agent once all agents stand in the target room, or with 0
//! when the step cap is hit.

mod layout;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use layout::{Cell, Layout, DEFAULT_MAX_STEPS};

use crate::error::{Error, Result};

/// Extrinsic reward paid to every agent on success.
pub const SUCCESS_REWARD: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskName {
    Pass,
    SecretRoom,
    MultiRoom,
}

impl TaskName {
    /// (agents, doors, switches)
    pub fn shape(self) -> (usize, usize, usize) {
        match self {
            TaskName::Pass => (2, 1, 2),
            TaskName::SecretRoom => (2, 3, 4),
            TaskName::MultiRoom => (3, 5, 4),
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskName::Pass => "Pass",
            TaskName::SecretRoom => "SecretRoom",
            TaskName::MultiRoom => "MultiRoom",
        })
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pass" => Ok(TaskName::Pass),
            "secretroom" | "secret_room" => Ok(TaskName::SecretRoom),
            "multiroom" | "multi_room" => Ok(TaskName::MultiRoom),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

/// What one agent sees: its own cell and every door's open flag.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LocalObservation {
    pub x: usize,
    pub y: usize,
    pub doors: Vec<bool>,
}

impl LocalObservation {
    /// `2 + num_doors`.
    pub fn dim(&self) -> usize {
        2 + self.doors.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.x as f64);
        v.push(self.y as f64);
        v.extend(self.doors.iter().map(|&d| if d { 1.0 } else { 0.0 }));
        v
    }

    /// Dense key, unique per (x, y, door flags) for grids up to 2^24 per side.
    pub fn key(&self) -> u64 {
        let flags = self
            .doors
            .iter()
            .enumerate()
            .fold(0u64, |acc, (k, &d)| acc | ((d as u64) << k));
        (flags << 48) | ((self.y as u64) << 24) | self.x as u64
    }
}

/// Validated task: layout plus the door rules of its task family.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    layout: Arc<Layout>,
}

impl TaskSpec {
    pub fn new(layout: Layout) -> Self {
        TaskSpec {
            layout: Arc::new(layout),
        }
    }

    pub fn builtin(task: TaskName, grid_size: usize) -> Result<Self> {
        Ok(Self::new(Layout::builtin(task, grid_size)?))
    }

    pub fn with_max_steps(self, max_steps: usize) -> Result<Self> {
        if max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        let mut layout = (*self.layout).clone();
        layout.max_steps = max_steps;
        Ok(Self::new(layout))
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn name(&self) -> TaskName {
        self.layout.task
    }

    pub fn grid_size(&self) -> usize {
        self.layout.size
    }

    pub fn max_steps(&self) -> usize {
        self.layout.max_steps
    }

    pub fn num_agents(&self) -> usize {
        self.layout.num_agents()
    }

    pub fn num_doors(&self) -> usize {
        self.layout.num_doors()
    }

    pub fn obs_dim(&self) -> usize {
        2 + self.num_doors()
    }
}

/// Door flags implied by the agents' positions.
pub fn evaluate_doors(positions: &[(usize, usize)], spec: &TaskSpec) -> Vec<bool> {
    let layout = spec.layout();
    let occupied: Vec<bool> = layout
        .switches
        .iter()
        .map(|s| positions.contains(s))
        .collect();
    match layout.task {
        TaskName::Pass => vec![occupied.iter().any(|&o| o)],
        TaskName::SecretRoom => (0..layout.num_doors())
            .map(|k| occupied[0] || occupied[k + 1])
            .collect(),
        TaskName::MultiRoom => vec![
            occupied[0], // door 1 <- switch 1
            occupied[3], // door 2 <- switch 4
            occupied[1], // door 3 <- switch 2
            occupied[2], // door 4 <- switch 3
            occupied[2], // door 5 <- switch 3
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointState {
    pub positions: Vec<(usize, usize)>,
    pub door_open: Vec<bool>,
    pub steps_elapsed: usize,
}

impl JointState {
    pub fn observation(&self, agent: usize) -> LocalObservation {
        let (x, y) = self.positions[agent];
        LocalObservation {
            x,
            y,
            doors: self.door_open.clone(),
        }
    }

    pub fn observations(&self) -> Vec<LocalObservation> {
        (0..self.positions.len()).map(|i| self.observation(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observations: Vec<LocalObservation>,
    /// Extrinsic reward, identical for every agent.
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone)]
pub struct GridEnv {
    spec: TaskSpec,
    state: JointState,
    done: bool,
}

impl GridEnv {
    pub fn new(spec: TaskSpec) -> Self {
        let state = Self::initial_state(&spec);
        GridEnv {
            spec,
            state,
            done: false,
        }
    }

    fn initial_state(spec: &TaskSpec) -> JointState {
        let positions = spec.layout().starts.clone();
        let door_open = evaluate_doors(&positions, spec);
        JointState {
            positions,
            door_open,
            steps_elapsed: 0,
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn state(&self) -> &JointState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Start a new episode. Start cells are fixed, so `seed` does not change
    /// the outcome; it is accepted to keep the reset signature uniform.
    pub fn reset(&mut self, _seed: u64) -> Vec<LocalObservation> {
        self.state = Self::initial_state(&self.spec);
        self.done = false;
        self.state.observations()
    }

    fn blocked(&self, x: isize, y: isize) -> bool {
        let layout = self.spec.layout();
        if x < 0 || y < 0 || x as usize >= layout.size || y as usize >= layout.size {
            return true;
        }
        match layout.cell(x as usize, y as usize) {
            Cell::Wall => true,
            Cell::Door(k) => !self.state.door_open[k],
            Cell::Floor | Cell::Switch(_) => false,
        }
    }

    /// Move every agent simultaneously against the pre-move door state, then
    /// re-evaluate doors once.
    pub fn step(&mut self, actions: &[Action]) -> Result<Transition> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        if actions.len() != self.state.positions.len() {
            return Err(Error::Shape {
                expected: self.state.positions.len(),
                got: actions.len(),
            });
        }
        let next: Vec<(usize, usize)> = self
            .state
            .positions
            .iter()
            .zip(actions)
            .map(|(&(x, y), a)| {
                let (dx, dy) = a.delta();
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if self.blocked(nx, ny) {
                    (x, y)
                } else {
                    (nx as usize, ny as usize)
                }
            })
            .collect();
        self.state.door_open = evaluate_doors(&next, &self.spec);
        self.state.positions = next;
        self.state.steps_elapsed += 1;

        let layout = self.spec.layout();
        let success = self
            .state
            .positions
            .iter()
            .all(|&(x, y)| layout.is_target(x, y));
        let timeout = self.state.steps_elapsed >= layout.max_steps;
        self.done = success || timeout;
        Ok(Transition {
            observations: self.state.observations(),
            reward: if success { SUCCESS_REWARD } else { 0.0 },
            done: self.done,
            success,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Action::*;

    fn pass() -> TaskSpec {
        TaskSpec::builtin(TaskName::Pass, 15).unwrap()
    }

    fn env_at(spec: &TaskSpec, positions: Vec<(usize, usize)>) -> GridEnv {
        let mut env = GridEnv::new(spec.clone());
        env.state.door_open = evaluate_doors(&positions, spec);
        env.state.positions = positions;
        env
    }

    #[test]
    fn reset_is_deterministic_with_closed_doors() {
        let mut env = GridEnv::new(pass());
        let a = env.reset(0);
        let b = env.reset(0);
        assert_eq!(a, b);
        assert!(a.iter().all(|o| o.doors.iter().all(|&d| !d)));
        let layout = env.spec().layout();
        let left = layout.starts[0];
        for o in &a {
            assert!(layout.same_room(left, (o.x, o.y)));
            assert!(!layout.is_target(o.x, o.y));
        }
    }

    #[test]
    fn observation_dims() {
        for (task, dim) in [
            (TaskName::Pass, 3),
            (TaskName::SecretRoom, 5),
            (TaskName::MultiRoom, 7),
        ] {
            let mut env = GridEnv::new(TaskSpec::builtin(task, 15).unwrap());
            let obs = env.reset(7);
            assert!(obs.iter().all(|o| o.dim() == dim && o.to_vec().len() == dim));
        }
    }

    #[test]
    fn pass_any_switch_opens_door() {
        let spec = pass();
        let l = spec.layout();
        assert_eq!(evaluate_doors(&[l.switches[1], l.starts[0]], &spec), vec![true]);
        assert_eq!(evaluate_doors(&[l.starts[1], l.switches[0]], &spec), vec![true]);
        assert_eq!(evaluate_doors(&l.starts, &spec), vec![false]);
    }

    #[test]
    fn multiroom_switch_rules() {
        let spec = TaskSpec::builtin(TaskName::MultiRoom, 15).unwrap();
        let l = spec.layout();
        let idle = l.starts[1];
        let doors = |s: usize| evaluate_doors(&[l.switches[s], idle, idle], &spec);
        assert_eq!(doors(0), vec![true, false, false, false, false]);
        assert_eq!(doors(1), vec![false, false, true, false, false]);
        assert_eq!(doors(2), vec![false, false, false, true, true]);
        assert_eq!(doors(3), vec![false, true, false, false, false]);
        assert_eq!(evaluate_doors(&l.starts, &spec), vec![false; 5]);
    }

    #[test]
    fn secret_room_switch_rules() {
        let spec = TaskSpec::builtin(TaskName::SecretRoom, 15).unwrap();
        let l = spec.layout();
        let idle = l.starts[1];
        assert_eq!(evaluate_doors(&[l.switches[0], idle], &spec), vec![true; 3]);
        assert_eq!(evaluate_doors(&[l.switches[2], idle], &spec), vec![false, true, false]);
        assert_eq!(evaluate_doors(&[l.switches[3], l.switches[1]], &spec), vec![true, false, true]);
    }

    #[test]
    fn closed_door_blocks() {
        let spec = pass();
        let (dx, dy) = spec.layout().doors[0];
        let mut env = env_at(&spec, vec![(dx - 1, dy), (1, 1)]);
        let t = env.step(&[Right, Up]).unwrap();
        assert_eq!((t.observations[0].x, t.observations[0].y), (dx - 1, dy));
        assert!(!t.done);
        assert_eq!(t.reward, 0.0);
    }

    #[test]
    fn open_door_passes_and_success_pays() {
        let spec = pass();
        let l = spec.layout().clone();
        let (dx, dy) = l.doors[0];
        // agent 1 holds switch 1 while agent 0 walks through the door
        let s1 = l.switches[0];
        let mut env = env_at(&spec, vec![(dx - 1, dy), s1]);
        assert!(env.state().door_open[0]);
        env.step(&[Right, Down]).unwrap();
        assert_eq!(env.state().positions[0], (dx, dy));
        env.step(&[Right, Down]).unwrap();
        assert!(l.is_target(dx + 1, dy));
        // now both in target
        let mut env = env_at(&spec, vec![(dx + 1, dy), (dx - 1, dy)]);
        env.state.door_open = vec![true];
        // door open pre-move (agent 0 is not on a switch, but state says open)
        let t = env.step(&[Right, Right]).unwrap();
        assert!(!t.done, "agent 1 only reached the door cell");
        assert_eq!(env.state().door_open, vec![false]);
        let mut env = env_at(&spec, vec![l.switches[1], (dx, dy)]);
        let t = env.step(&[Up, Right]).unwrap();
        assert!(t.done && t.success);
        assert_eq!(t.reward, SUCCESS_REWARD);
        assert!(matches!(env.step(&[Up, Up]), Err(Error::Usage(_))));
    }

    #[test]
    fn agent_on_closed_door_cell_can_leave() {
        let spec = pass();
        let (dx, dy) = spec.layout().doors[0];
        let mut env = env_at(&spec, vec![(dx, dy), (1, 1)]);
        assert_eq!(env.state().door_open, vec![false]);
        env.step(&[Left, Up]).unwrap();
        assert_eq!(env.state().positions[0], (dx - 1, dy));
    }

    #[test]
    fn timeout_ends_without_reward() {
        let spec = pass().with_max_steps(300).unwrap();
        let mut env = GridEnv::new(spec);
        env.reset(0);
        let mut last = None;
        for _ in 0..300 {
            last = Some(env.step(&[Up, Left]).unwrap());
        }
        let t = last.unwrap();
        assert!(t.done && !t.success);
        assert_eq!(t.reward, 0.0);
        assert_eq!(env.state().steps_elapsed, 300);
    }

    #[test]
    fn agents_may_share_a_cell() {
        let spec = pass();
        let mut env = env_at(&spec, vec![(3, 3), (5, 3)]);
        env.step(&[Right, Left]).unwrap();
        assert_eq!(env.state().positions[0], env.state().positions[1]);
    }

    #[test]
    fn observation_keys_are_unique() {
        let a = LocalObservation { x: 3, y: 4, doors: vec![true, false] };
        let b = LocalObservation { x: 4, y: 3, doors: vec![true, false] };
        let c = LocalObservation { x: 3, y: 4, doors: vec![false, true] };
        assert_ne!(a.key(), b.key());
        assert_ne!(a.key(), c.key());
    }

    fn arb_task() -> impl Strategy<Value = TaskName> {
        prop_oneof![
            Just(TaskName::Pass),
            Just(TaskName::SecretRoom),
            Just(TaskName::MultiRoom)
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_walks_respect_invariants(
            task in arb_task(),
            size in 12usize..20,
            moves in prop::collection::vec(0usize..4, 0..400),
        ) {
            let spec = TaskSpec::builtin(task, size).unwrap();
            let n = spec.num_agents();
            let mut env = GridEnv::new(spec.clone());
            env.reset(0);
            let mut steps = 0;
            for chunk in moves.chunks(n) {
                if chunk.len() < n || env.is_done() {
                    break;
                }
                let actions: Vec<Action> =
                    chunk.iter().map(|&i| Action::from_index(i).unwrap()).collect();
                env.step(&actions).unwrap();
                steps += 1;
                let st = env.state();
                // doors are memoryless
                prop_assert_eq!(&st.door_open, &evaluate_doors(&st.positions, &spec));
                for &(x, y) in &st.positions {
                    prop_assert!(x < size && y < size);
                    prop_assert!(spec.layout().cell(x, y) != Cell::Wall);
                }
                prop_assert!(st.steps_elapsed <= spec.max_steps());
            }
            prop_assert_eq!(env.state().steps_elapsed, steps);
        }
    }
}
