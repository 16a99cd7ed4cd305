//! Task physics, rewards and drawing. Each substep advances by [`DT`].

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{Canvas, View};

pub const DT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Dense reward `(1 + cos theta) / 2` for an underactuated pendulum.
    PendulumSwingup,
    /// Same dynamics and observations, reward 1 only when `cos theta > 0.95`.
    PendulumSparse,
    /// Point mass that must reach a randomly placed target; sparse reward.
    PointReacher,
    /// Cart-pole started near upright.
    CartpoleBalance,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::PendulumSwingup,
        Task::PendulumSparse,
        Task::PointReacher,
        Task::CartpoleBalance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::PendulumSwingup => "pendulum_swingup",
            Task::PendulumSparse => "pendulum_sparse",
            Task::PointReacher => "point_reacher",
            Task::CartpoleBalance => "cartpole_balance",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn action_dim(self) -> usize {
        match self {
            Task::PointReacher => 2,
            _ => 1,
        }
    }

    /// Length of the proprioceptive observation.
    pub fn state_dim(self) -> usize {
        match self {
            Task::PendulumSwingup | Task::PendulumSparse => 3,
            Task::PointReacher => 6,
            Task::CartpoleBalance => 5,
        }
    }

    /// Indices of [`proprio`] entries that are functions of the current
    /// configuration alone (no velocities), hence visible in a single frame.
    pub fn configuration_coords(self) -> &'static [usize] {
        match self {
            Task::PendulumSwingup | Task::PendulumSparse => &[0, 1],
            Task::PointReacher => &[0, 1, 4, 5],
            Task::CartpoleBalance => &[0, 1, 2],
        }
    }

    pub fn default_action_repeat(self) -> usize {
        4
    }

    fn is_pendulum(self) -> bool {
        matches!(self, Task::PendulumSwingup | Task::PendulumSparse)
    }
}

pub mod pendulum {
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const GRAVITY: f64 = 9.8;
    pub const TORQUE_SCALE: f64 = 2.0;
    pub const DAMPING: f64 = 0.01;
}

pub mod reacher {
    pub const ARENA: f64 = 1.0;
    pub const FORCE_SCALE: f64 = 2.0;
    pub const DAMPING: f64 = 1.0;
    pub const TARGET_RADIUS: f64 = 0.15;
    pub const BODY_RADIUS: f64 = 0.1;
}

pub mod cartpole {
    pub const GRAVITY: f64 = 9.8;
    pub const CART_MASS: f64 = 1.0;
    pub const POLE_MASS: f64 = 0.1;
    /// Half the pole length.
    pub const POLE_HALF_LENGTH: f64 = 0.5;
    pub const FORCE_SCALE: f64 = 10.0;
    pub const TRACK_LIMIT: f64 = 2.4;
    pub const INIT_ANGLE: f64 = 0.05;
}

/// Internal physical configuration.
///
/// pendulum: `[theta, omega]`, theta = 0 upright;
/// reacher: `[x, y, vx, vy, tx, ty]`;
/// cartpole: `[x, x_dot, theta, theta_dot]`, theta = 0 upright.
pub type PhysState = Vec<f64>;

pub fn initial_state(task: Task, rng: &mut impl Rng) -> PhysState {
    match task {
        Task::PendulumSwingup | Task::PendulumSparse => vec![rng.random_range(-PI..PI), 0.0],
        Task::PointReacher => {
            let a = reacher::ARENA;
            let mut u = || rng.random_range(-a..a);
            vec![u(), u(), 0.0, 0.0, u(), u()]
        }
        Task::CartpoleBalance => {
            let th = cartpole::INIT_ANGLE;
            vec![0.0, 0.0, rng.random_range(-th..th), 0.0]
        }
    }
}

/// Uniform draw over the configuration space, used for render probes.
pub fn random_state(task: Task, rng: &mut impl Rng) -> PhysState {
    match task {
        Task::PendulumSwingup | Task::PendulumSparse => vec![rng.random_range(-PI..PI), rng.random_range(-8.0..8.0)],
        Task::PointReacher => {
            let a = reacher::ARENA;
            let mut u = || rng.random_range(-a..a);
            vec![u(), u(), u(), u(), u(), u()]
        }
        Task::CartpoleBalance => {
            let l = cartpole::TRACK_LIMIT;
            vec![
                rng.random_range(-l..l),
                rng.random_range(-2.0..2.0),
                rng.random_range(-PI..PI),
                rng.random_range(-3.0..3.0),
            ]
        }
    }
}

fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

fn pendulum_accel(theta: f64, omega: f64, u: f64, damping: f64) -> f64 {
    use pendulum::*;
    let inertia = MASS * LENGTH * LENGTH;
    GRAVITY / LENGTH * theta.sin() + (TORQUE_SCALE * u - damping * omega) / inertia
}

/// One velocity-Verlet step of the pendulum with the given damping.
pub fn pendulum_substep(q: &mut [f64], u: f64, damping: f64) {
    let half = q[1] + 0.5 * DT * pendulum_accel(q[0], q[1], u, damping);
    let theta = q[0] + DT * half;
    q[1] = half + 0.5 * DT * pendulum_accel(theta, half, u, damping);
    q[0] = wrap_angle(theta);
}

/// Kinetic plus potential energy, potential measured from the lowest point.
pub fn pendulum_energy(q: &[f64]) -> f64 {
    use pendulum::*;
    0.5 * MASS * LENGTH * LENGTH * q[1] * q[1] + MASS * GRAVITY * LENGTH * (1.0 + q[0].cos())
}

/// Advances one substep with a clipped action.
pub fn substep(task: Task, q: &mut [f64], action: &[f64]) {
    match task {
        Task::PendulumSwingup | Task::PendulumSparse => pendulum_substep(q, action[0], pendulum::DAMPING),
        Task::PointReacher => {
            use reacher::*;
            for k in 0..2 {
                let acc = FORCE_SCALE * action[k] - DAMPING * q[2 + k];
                q[2 + k] += DT * acc;
                q[k] += DT * q[2 + k];
                if q[k].abs() > ARENA {
                    q[k] = q[k].clamp(-ARENA, ARENA);
                    q[2 + k] = 0.0;
                }
            }
        }
        Task::CartpoleBalance => {
            use cartpole::*;
            let total = CART_MASS + POLE_MASS;
            let (sin, cos) = q[2].sin_cos();
            let force = FORCE_SCALE * action[0];
            let temp = (force + POLE_MASS * POLE_HALF_LENGTH * q[3] * q[3] * sin) / total;
            let theta_acc =
                (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
            let x_acc = temp - POLE_MASS * POLE_HALF_LENGTH * theta_acc * cos / total;
            q[1] += DT * x_acc;
            q[0] += DT * q[1];
            q[3] += DT * theta_acc;
            q[2] = wrap_angle(q[2] + DT * q[3]);
            if q[0].abs() > TRACK_LIMIT {
                q[0] = q[0].clamp(-TRACK_LIMIT, TRACK_LIMIT);
                q[1] = 0.0;
            }
        }
    }
}

/// Per-substep reward in `[0, 1]`.
pub fn reward(task: Task, q: &[f64]) -> f64 {
    match task {
        Task::PendulumSwingup => 0.5 * (1.0 + q[0].cos()),
        Task::PendulumSparse => f64::from(u8::from(q[0].cos() > 0.95)),
        Task::PointReacher => {
            let d = (q[0] - q[4]).hypot(q[1] - q[5]);
            f64::from(u8::from(d < reacher::TARGET_RADIUS))
        }
        Task::CartpoleBalance => {
            let upright = 0.5 * (1.0 + q[2].cos());
            let centred = 0.5 * (1.0 + (-q[0] * q[0]).exp());
            upright * centred
        }
    }
}

/// Proprioceptive observation of a physical state.
pub fn proprio(task: Task, q: &[f64]) -> Vec<f64> {
    match task {
        Task::PendulumSwingup | Task::PendulumSparse => vec![q[0].cos(), q[0].sin(), q[1]],
        Task::PointReacher => q.to_vec(),
        Task::CartpoleBalance => vec![q[0], q[2].cos(), q[2].sin(), q[1], q[3]],
    }
}

pub fn view(task: Task) -> View {
    match task {
        Task::PendulumSwingup | Task::PendulumSparse => View {
            centre: [0.0, 0.0],
            half_extent: 1.3,
        },
        Task::PointReacher => View {
            centre: [0.0, 0.0],
            half_extent: 1.15,
        },
        Task::CartpoleBalance => View {
            centre: [0.0, 0.4],
            half_extent: 2.7,
        },
    }
}

/// Draws the task bodies over whatever is already on the canvas.
pub fn draw(task: Task, q: &[f64], canvas: &mut Canvas) {
    if task.is_pendulum() {
        let l = pendulum::LENGTH;
        // theta = 0 points up; positive theta swings to the right.
        let tip = [l * q[0].sin(), l * q[0].cos()];
        canvas.segment([0.0, 0.0], tip, 0.09, [200, 120, 40]);
        canvas.disc(tip, 0.2, [235, 205, 60]);
        canvas.disc([0.0, 0.0], 0.08, [120, 120, 120]);
        return;
    }
    match task {
        Task::PointReacher => {
            canvas.disc([q[4], q[5]], reacher::TARGET_RADIUS, [220, 50, 50]);
            canvas.disc([q[0], q[1]], reacher::BODY_RADIUS, [240, 240, 240]);
        }
        Task::CartpoleBalance => {
            use cartpole::*;
            canvas.rect([0.0, -0.25], [TRACK_LIMIT + 0.3, 0.03], [110, 110, 110]);
            let cart = [q[0], 0.0];
            canvas.rect(cart, [0.3, 0.15], [200, 120, 40]);
            let tip = [
                cart[0] + 2.0 * POLE_HALF_LENGTH * q[2].sin(),
                cart[1] + 2.0 * POLE_HALF_LENGTH * q[2].cos(),
            ];
            canvas.segment(cart, tip, 0.1, [235, 205, 60]);
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frictionless_energy_conserved_within_one_percent() {
        for theta0 in [0.3, 1.5, 2.5, -3.0] {
            let mut q = vec![theta0, 0.0];
            let e0 = pendulum_energy(&q);
            for _ in 0..100 {
                pendulum_substep(&mut q, 0.0, 0.0);
                let rel = (pendulum_energy(&q) - e0).abs() / e0;
                assert!(rel < 0.01, "theta0={theta0}: drift {rel}");
            }
        }
    }

    #[test]
    fn explicit_euler_would_drift() {
        // Documents why the pendulum is not integrated with explicit Euler.
        let mut q = [1.5f64, 0.0];
        let e0 = pendulum_energy(&q);
        for _ in 0..100 {
            let acc = pendulum_accel(q[0], q[1], 0.0, 0.0);
            q[0] += DT * q[1];
            q[1] += DT * acc;
        }
        assert!((pendulum_energy(&q) - e0).abs() / e0 > 0.01);
    }

    #[test]
    fn pendulum_rewards_at_extremes() {
        assert_eq!(reward(Task::PendulumSwingup, &[0.0, 0.0]), 1.0);
        assert!(reward(Task::PendulumSwingup, &[PI, 0.0]) < 1e-12);
        assert_eq!(reward(Task::PendulumSparse, &[0.1, 0.0]), 1.0);
        assert_eq!(reward(Task::PendulumSparse, &[0.5, 0.0]), 0.0);
    }

    #[test]
    fn cartpole_stays_on_track() {
        let mut q = vec![0.0, 0.0, 0.01, 0.0];
        for _ in 0..2000 {
            substep(Task::CartpoleBalance, &mut q, &[1.0]);
            assert!(q[0].abs() <= cartpole::TRACK_LIMIT);
            assert!(q.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(Task::parse(t.name()), Some(t));
            assert_eq!(proprio(t, &random_state(t, &mut rand::rng())).len(), t.state_dim());
        }
        assert_eq!(Task::parse("walker"), None);
    }
}
