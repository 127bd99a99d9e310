//! Synthetic pixel tasks behind an arcade-style contract: six discrete
//! actions, sign-clipped rewards, terminal flags and deterministic frame
//! skipping.

mod render;
mod tasks;

use rand::Rng as _;

pub use tasks::{Bandit, Dodge, Gather, Paddle};

use crate::error::{Error, Result};
use crate::numerics::math::sign_clip;
use crate::rng::{self, Rng};

pub const NUM_ACTIONS: usize = 6;

/// Hard per-episode step cap shared by every task.
pub const MAX_EPISODE_STEPS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Action {
    Noop = 0,
    Fire = 1,
    Up = 2,
    Right = 3,
    Left = 4,
    Down = 5,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Noop,
        Action::Fire,
        Action::Up,
        Action::Right,
        Action::Left,
        Action::Down,
    ];

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::Domain(format!("action index {index} out of range")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for FrameShape {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `height × width × channels`, values in `[0, 1]`.
    pub frame: Vec<f64>,
    /// Already clipped to `{-1, 0, 1}`.
    pub reward: f64,
    pub done: bool,
}

/// Per-tick game logic. Implementations only see the unit square; the
/// wrapper handles frame skipping, clipping and rasterization.
pub trait TaskDynamics: Send {
    fn reset(&mut self, rng: &mut Rng);
    /// Advances one tick and returns the raw reward.
    fn tick(&mut self, action: Action, rng: &mut Rng) -> f64;
    fn is_over(&self) -> bool;
    fn render(&self, shape: FrameShape, pixels: &mut [f64]);
}

pub const KNOWN_TASKS: [&str; 4] = ["paddle", "gather", "dodge", "bandit"];

pub fn make_dynamics(name: &str) -> Result<Box<dyn TaskDynamics>> {
    Ok(match name {
        "paddle" => Box::new(Paddle::default()),
        "gather" => Box::new(Gather::default()),
        "dodge" => Box::new(Dodge::default()),
        "bandit" => Box::new(Bandit::default()),
        other => return Err(Error::UnknownTask(other.to_string())),
    })
}

/// Ordered task list of one experiment. Index 0 is the first-trained task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRegistry {
    names: Vec<String>,
    shape: FrameShape,
    frame_skip: usize,
}

impl TaskRegistry {
    pub fn new(names: &[String], shape: FrameShape, frame_skip: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        if frame_skip == 0 {
            return Err(Error::Config("frame_skip must be positive".into()));
        }
        for n in names {
            make_dynamics(n)?;
        }
        Ok(Self {
            names: names.to_vec(),
            shape,
            frame_skip,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TaskId> {
        (0..self.names.len()).map(TaskId)
    }

    pub fn name(&self, task: TaskId) -> Result<&str> {
        self.names
            .get(task.0)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownTask(format!("#{}", task.0)))
    }

    pub fn shape(&self) -> FrameShape {
        self.shape
    }

    pub fn frame_skip(&self) -> usize {
        self.frame_skip
    }

    /// Starts an episode; the initial state is a pure function of
    /// `(task, episode_seed)`.
    pub fn reset(&self, task: TaskId, episode_seed: u64) -> Result<(Env, Observation)> {
        let name = self.name(task)?;
        let mut env = Env {
            dynamics: make_dynamics(name)?,
            rng: rng::seeded(rng::derive(episode_seed, &[rng::tag(name)])),
            shape: self.shape,
            frame_skip: self.frame_skip,
            ticks: 0,
            steps: 0,
            done: false,
        };
        env.dynamics.reset(&mut env.rng);
        let obs = Observation {
            frame: env.render(),
            reward: 0.0,
            done: false,
        };
        Ok((env, obs))
    }
}

/// One running episode.
pub struct Env {
    dynamics: Box<dyn TaskDynamics>,
    rng: Rng,
    shape: FrameShape,
    frame_skip: usize,
    ticks: u64,
    steps: usize,
    done: bool,
}

impl Env {
    fn render(&self) -> Vec<f64> {
        let mut frame = vec![0.0; self.shape.len()];
        self.dynamics.render(self.shape, &mut frame);
        frame
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Repeats `action` for `frame_skip` ticks (fewer if the game ends) and
    /// returns the sign of the accumulated reward.
    pub fn step(&mut self, action: Action) -> Result<Observation> {
        if self.done {
            return Err(Error::State("episode already finished".into()));
        }
        let mut raw = 0.0;
        for _ in 0..self.frame_skip {
            raw += self.dynamics.tick(action, &mut self.rng);
            self.ticks += 1;
            if self.dynamics.is_over() {
                break;
            }
        }
        self.steps += 1;
        self.done = self.dynamics.is_over() || self.steps >= MAX_EPISODE_STEPS;
        Ok(Observation {
            frame: self.render(),
            reward: sign_clip(raw),
            done: self.done,
        })
    }
}

/// Sticky random policy: repeats the previous action with probability 0.5,
/// otherwise draws uniformly from all six.
pub fn random_policy_action(rng: &mut Rng, last_action: Action) -> Action {
    if rng.random_bool(0.5) {
        last_action
    } else {
        Action::ALL[rng.random_range(0..NUM_ACTIONS)]
    }
}
