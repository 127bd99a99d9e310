//! The shipped task suite. Each task is a tiny arcade game in the unit
//! square with its own palette and dynamics.

use rand::Rng as _;

use super::render::{grey, Canvas};
use super::{Action, FrameShape, TaskDynamics};
use crate::rng::Rng;

/// Ball and paddle. Returning the ball scores +1, missing it costs -1 and a
/// life.
#[derive(Clone, Debug, Default)]
pub struct Paddle {
    ball: (f64, f64),
    vel: (f64, f64),
    paddle_x: f64,
    lives: u32,
}

impl Paddle {
    const LIVES: u32 = 6;
    const PADDLE_W: f64 = 0.25;
    const PADDLE_Y: f64 = 0.88;
    const BALL: f64 = 0.07;
    const SPEED: f64 = 0.018;

    fn serve(&mut self, rng: &mut Rng) {
        self.ball = (rng.random_range(0.2..0.8), 0.1);
        let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        self.vel = (dir * rng.random_range(0.006..0.016), 0.01);
    }
}

impl TaskDynamics for Paddle {
    fn reset(&mut self, rng: &mut Rng) {
        self.lives = Self::LIVES;
        self.paddle_x = 0.5 - Self::PADDLE_W / 2.0;
        self.serve(rng);
    }

    fn tick(&mut self, action: Action, rng: &mut Rng) -> f64 {
        match action {
            Action::Left => self.paddle_x -= 0.03,
            Action::Right => self.paddle_x += 0.03,
            _ => {}
        }
        self.paddle_x = self.paddle_x.clamp(0.0, 1.0 - Self::PADDLE_W);

        let (mut x, mut y) = (self.ball.0 + self.vel.0, self.ball.1 + self.vel.1);
        if !(0.0..=1.0 - Self::BALL).contains(&x) {
            self.vel.0 = -self.vel.0;
            x = x.clamp(0.0, 1.0 - Self::BALL);
        }
        if y < 0.0 {
            self.vel.1 = self.vel.1.abs();
            y = 0.0;
        }
        self.ball = (x, y);
        if y + Self::BALL >= Self::PADDLE_Y && self.vel.1 > 0.0 {
            let centre = x + Self::BALL / 2.0;
            if centre >= self.paddle_x - 0.02 && centre <= self.paddle_x + Self::PADDLE_W + 0.02 {
                self.vel.1 = -Self::SPEED.max(self.vel.1);
                self.ball.1 = Self::PADDLE_Y - Self::BALL;
                return 1.0;
            }
            self.lives = self.lives.saturating_sub(1);
            self.serve(rng);
            return -1.0;
        }
        0.0
    }

    fn is_over(&self) -> bool {
        self.lives == 0
    }

    fn render(&self, shape: FrameShape, pixels: &mut [f64]) {
        let mut c = Canvas::new(shape, pixels);
        c.clear([0.02, 0.02, 0.12]);
        for i in 0..self.lives {
            c.rect(0.03 + 0.06 * i as f64, 0.02, 0.03, 0.03, [0.9, 0.3, 0.3]);
        }
        c.rect(self.paddle_x, Self::PADDLE_Y, Self::PADDLE_W, 0.06, [0.3, 0.9, 0.9]);
        c.rect(self.ball.0, self.ball.1, Self::BALL, Self::BALL, grey(1.0));
    }
}

/// Steer a block to collect dots on a grey field. Episodes run on a fixed
/// clock drawn at reset.
#[derive(Clone, Debug, Default)]
pub struct Gather {
    agent: (f64, f64),
    dots: Vec<(f64, f64)>,
    ticks_left: u32,
}

impl Gather {
    const AGENT: f64 = 0.12;
    const DOT: f64 = 0.07;
    const STEP: f64 = 0.02;
    const DOTS: usize = 4;

    fn overlaps_agent(&self, dot: (f64, f64)) -> bool {
        let (ax, ay) = self.agent;
        dot.0 < ax + Self::AGENT && dot.0 + Self::DOT > ax && dot.1 < ay + Self::AGENT && dot.1 + Self::DOT > ay
    }

    /// A dot position clear of the agent.
    fn random_spot(&self, rng: &mut Rng) -> (f64, f64) {
        loop {
            let spot = (rng.random_range(0.05..0.88), rng.random_range(0.05..0.88));
            if !self.overlaps_agent(spot) {
                return spot;
            }
        }
    }
}

impl TaskDynamics for Gather {
    fn reset(&mut self, rng: &mut Rng) {
        self.agent = (0.44, 0.44);
        self.dots.clear();
        for _ in 0..Self::DOTS {
            let spot = self.random_spot(rng);
            self.dots.push(spot);
        }
        self.ticks_left = rng.random_range(600..1200);
    }

    fn tick(&mut self, action: Action, rng: &mut Rng) -> f64 {
        self.ticks_left = self.ticks_left.saturating_sub(1);
        let (dx, dy) = match action {
            Action::Up => (0.0, -Self::STEP),
            Action::Down => (0.0, Self::STEP),
            Action::Left => (-Self::STEP, 0.0),
            Action::Right => (Self::STEP, 0.0),
            _ => (0.0, 0.0),
        };
        self.agent.0 = (self.agent.0 + dx).clamp(0.0, 1.0 - Self::AGENT);
        self.agent.1 = (self.agent.1 + dy).clamp(0.0, 1.0 - Self::AGENT);
        let mut reward = 0.0;
        for i in 0..self.dots.len() {
            if self.overlaps_agent(self.dots[i]) {
                reward += 1.0;
                self.dots[i] = self.random_spot(rng);
            }
        }
        reward
    }

    fn is_over(&self) -> bool {
        self.ticks_left == 0
    }

    fn render(&self, shape: FrameShape, pixels: &mut [f64]) {
        let mut c = Canvas::new(shape, pixels);
        c.clear([0.45, 0.55, 0.45]);
        for &(x, y) in &self.dots {
            c.rect(x, y, Self::DOT, Self::DOT, [0.05, 0.05, 0.3]);
        }
        c.rect(self.agent.0, self.agent.1, Self::AGENT, Self::AGENT, [1.0, 0.95, 0.3]);
    }
}

/// Dodge blocks falling onto a bright floor. A block that passes scores +1,
/// a hit costs -1 and a life.
#[derive(Clone, Debug, Default)]
pub struct Dodge {
    player_x: f64,
    fallers: Vec<(f64, f64)>,
    lives: u32,
}

impl Dodge {
    const LIVES: u32 = 5;
    const PLAYER_W: f64 = 0.14;
    const PLAYER_Y: f64 = 0.86;
    const FALLER: f64 = 0.09;
    const FALL: f64 = 0.012;
    const SPAWN_P: f64 = 0.018;
}

impl TaskDynamics for Dodge {
    fn reset(&mut self, rng: &mut Rng) {
        self.lives = Self::LIVES;
        self.player_x = 0.5 - Self::PLAYER_W / 2.0;
        self.fallers = vec![(rng.random_range(0.0..1.0 - Self::FALLER), 0.0)];
    }

    fn tick(&mut self, action: Action, rng: &mut Rng) -> f64 {
        match action {
            Action::Left => self.player_x -= 0.025,
            Action::Right => self.player_x += 0.025,
            _ => {}
        }
        self.player_x = self.player_x.clamp(0.0, 1.0 - Self::PLAYER_W);
        if rng.random_bool(Self::SPAWN_P) {
            self.fallers.push((rng.random_range(0.0..1.0 - Self::FALLER), 0.0));
        }
        let mut reward = 0.0;
        let px = self.player_x;
        let mut lives = self.lives;
        self.fallers.retain_mut(|f| {
            f.1 += Self::FALL;
            let bottom = f.1 + Self::FALLER;
            if bottom >= Self::PLAYER_Y && f.1 <= Self::PLAYER_Y + 0.06 {
                let hit = f.0 < px + Self::PLAYER_W && f.0 + Self::FALLER > px;
                if hit {
                    reward -= 1.0;
                    lives = lives.saturating_sub(1);
                    return false;
                }
            }
            if f.1 >= 1.0 {
                reward += 1.0;
                return false;
            }
            true
        });
        self.lives = lives;
        reward
    }

    fn is_over(&self) -> bool {
        self.lives == 0
    }

    fn render(&self, shape: FrameShape, pixels: &mut [f64]) {
        let mut c = Canvas::new(shape, pixels);
        c.clear([0.92, 0.88, 0.8]);
        for &(x, y) in &self.fallers {
            c.rect(x, y, Self::FALLER, Self::FALLER, [0.6, 0.2, 0.1]);
        }
        for i in 0..self.lives {
            c.rect(0.93 - 0.06 * i as f64, 0.02, 0.03, 0.03, [0.1, 0.4, 0.1]);
        }
        c.rect(self.player_x, Self::PLAYER_Y, Self::PLAYER_W, 0.06, grey(0.05));
    }
}

/// One-step bandit: FIRE pays +1, every other action pays nothing, and the
/// episode ends after a single decision.
#[derive(Clone, Debug, Default)]
pub struct Bandit {
    finished: bool,
}

impl TaskDynamics for Bandit {
    fn reset(&mut self, _rng: &mut Rng) {
        self.finished = false;
    }

    fn tick(&mut self, action: Action, _rng: &mut Rng) -> f64 {
        self.finished = true;
        if action == Action::Fire {
            1.0
        } else {
            0.0
        }
    }

    fn is_over(&self) -> bool {
        self.finished
    }

    fn render(&self, shape: FrameShape, pixels: &mut [f64]) {
        let mut c = Canvas::new(shape, pixels);
        c.clear(grey(0.3));
        c.rect(0.4, 0.4, 0.2, 0.2, grey(0.9));
    }
}
