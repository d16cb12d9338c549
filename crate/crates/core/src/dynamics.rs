//! Ground-truth simulators for the five synthetic systems.
//!
//! ODE systems are advanced with fixed-step classical RK4; the Gray-Scott
//! reaction-diffusion field uses explicit Euler with a periodic 5-point
//! Laplacian. Everything is deterministic for a given spec and initial state.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid system configuration: {0}")]
    Config(String),
    #[error("singularity at t={t}: {detail}")]
    Singularity { t: f64, detail: String },
    #[error("malformed trajectory CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    CircularMotion,
    SinglePendulum,
    DoublePendulum,
    ElasticPendulum,
    ReactionDiffusion,
}

impl SystemKind {
    pub fn label(self) -> &'static str {
        match self {
            SystemKind::CircularMotion => "circular_motion",
            SystemKind::SinglePendulum => "single_pendulum",
            SystemKind::DoublePendulum => "double_pendulum",
            SystemKind::ElasticPendulum => "elastic_pendulum",
            SystemKind::ReactionDiffusion => "reaction_diffusion",
        }
    }

    /// Number of ground-truth variables used for probing and MI.
    pub fn ground_truth_dim(self) -> usize {
        match self {
            SystemKind::CircularMotion | SystemKind::SinglePendulum => 2,
            SystemKind::DoublePendulum | SystemKind::ElasticPendulum => 4,
            SystemKind::ReactionDiffusion => 2,
        }
    }
}

/// Gray-Scott parameters on a unit-spacing periodic grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrayScott {
    pub feed: f64,
    pub kill: f64,
    pub diff_u: f64,
    pub diff_v: f64,
    pub height: usize,
    pub width: usize,
}

impl GrayScott {
    /// Largest explicit-Euler step for which diffusion stays stable.
    pub fn max_stable_dt(&self) -> f64 {
        1.0 / (4.0 * self.diff_u.max(self.diff_v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum System {
    /// Uniform motion on a circle of `radius` m at `omega` rad/s.
    CircularMotion { omega: f64, radius: f64 },
    SinglePendulum { g: f64, length: f64 },
    /// Equal masses (kg) and equal rod lengths (m).
    DoublePendulum { g: f64, mass: f64, length: f64 },
    /// Planar spring pendulum in polar coordinates (r, θ).
    ElasticPendulum {
        g: f64,
        mass: f64,
        stiffness: f64,
        rest_length: f64,
    },
    /// `time_scale` converts seconds into dimensionless reaction time units.
    ReactionDiffusion {
        #[serde(flatten)]
        model: GrayScott,
        time_scale: f64,
    },
}

impl System {
    pub fn kind(&self) -> SystemKind {
        match self {
            System::CircularMotion { .. } => SystemKind::CircularMotion,
            System::SinglePendulum { .. } => SystemKind::SinglePendulum,
            System::DoublePendulum { .. } => SystemKind::DoublePendulum,
            System::ElasticPendulum { .. } => SystemKind::ElasticPendulum,
            System::ReactionDiffusion { .. } => SystemKind::ReactionDiffusion,
        }
    }

    pub fn default_for(kind: SystemKind) -> Self {
        match kind {
            SystemKind::CircularMotion => System::CircularMotion {
                omega: PI,
                radius: 1.0,
            },
            SystemKind::SinglePendulum => System::SinglePendulum {
                g: 9.81,
                length: 1.0,
            },
            SystemKind::DoublePendulum => System::DoublePendulum {
                g: 9.81,
                mass: 1.0,
                length: 1.0,
            },
            SystemKind::ElasticPendulum => System::ElasticPendulum {
                g: 9.81,
                mass: 1.0,
                stiffness: 40.0,
                rest_length: 1.0,
            },
            SystemKind::ReactionDiffusion => System::ReactionDiffusion {
                model: GrayScott {
                    feed: 0.037,
                    kill: 0.06,
                    diff_u: 0.16,
                    diff_v: 0.08,
                    height: 32,
                    width: 32,
                },
                time_scale: 100.0,
            },
        }
    }

    /// Dimension of the simulated state vector.
    pub fn state_dim(&self) -> usize {
        match self {
            System::CircularMotion { .. } | System::SinglePendulum { .. } => 2,
            System::DoublePendulum { .. } | System::ElasticPendulum { .. } => 4,
            System::ReactionDiffusion { model, .. } => 2 * model.height * model.width,
        }
    }
}

/// A system together with its integration step (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub system: System,
    pub dt: f64,
}

impl SystemSpec {
    pub fn new(system: System, dt: f64) -> Result<Self> {
        let spec = Self { system, dt };
        spec.validate()?;
        Ok(spec)
    }

    /// Default spec for `kind`: dt = 1 ms for ODEs, 10 ms for the RD field.
    pub fn default_for(kind: SystemKind) -> Self {
        let dt = if kind == SystemKind::ReactionDiffusion {
            0.01
        } else {
            1e-3
        };
        Self {
            system: System::default_for(kind),
            dt,
        }
    }

    pub fn kind(&self) -> SystemKind {
        self.system.kind()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 0.05) {
            return Err(DynamicsError::Config(format!(
                "dt must lie in (0, 0.05], got {}",
                self.dt
            )));
        }
        let positive: Vec<(&str, f64)> = match &self.system {
            System::CircularMotion { omega, radius } => vec![("omega", *omega), ("radius", *radius)],
            System::SinglePendulum { g, length } => vec![("g", *g), ("length", *length)],
            System::DoublePendulum { g, mass, length } => {
                vec![("g", *g), ("mass", *mass), ("length", *length)]
            }
            System::ElasticPendulum {
                g,
                mass,
                stiffness,
                rest_length,
            } => vec![
                ("g", *g),
                ("mass", *mass),
                ("stiffness", *stiffness),
                ("rest_length", *rest_length),
            ],
            System::ReactionDiffusion { model, time_scale } => {
                if model.height < 8 || model.width < 8 {
                    return Err(DynamicsError::Config(format!(
                        "reaction-diffusion grid must be at least 8x8, got {}x{}",
                        model.height, model.width
                    )));
                }
                let sim_dt = self.dt * time_scale;
                if sim_dt > model.max_stable_dt() {
                    return Err(DynamicsError::Config(format!(
                        "explicit diffusion step {sim_dt} exceeds stability bound {}",
                        model.max_stable_dt()
                    )));
                }
                vec![
                    ("feed", model.feed),
                    ("kill", model.kill),
                    ("diff_u", model.diff_u),
                    ("diff_v", model.diff_v),
                    ("time_scale", *time_scale),
                ]
            }
        };
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DynamicsError::Config(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Draws a random initial state typical for dataset generation.
    pub fn sample_initial_state(&self, rng: &mut impl Rng) -> Vec<f64> {
        match &self.system {
            System::CircularMotion { radius, .. } => {
                let phase = rng.random_range(0.0..2.0 * PI);
                vec![radius * phase.cos(), radius * phase.sin()]
            }
            System::SinglePendulum { .. } => {
                vec![rng.random_range(-1.2..1.2), rng.random_range(-1.5..1.5)]
            }
            System::DoublePendulum { .. } => vec![
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ],
            System::ElasticPendulum {
                g,
                mass,
                stiffness,
                rest_length,
            } => {
                let r_eq = rest_length + mass * g / stiffness;
                vec![
                    r_eq * rng.random_range(0.85..1.15),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-1.0..1.0),
                ]
            }
            System::ReactionDiffusion { model, .. } => {
                let (h, w) = (model.height, model.width);
                let mut u = vec![1.0; h * w];
                let mut v = vec![0.0; h * w];
                let seeds = rng.random_range(1..=3);
                for _ in 0..seeds {
                    let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
                    let half = (h.min(w) / 8).max(1) as isize;
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let y = (cy as isize + dy).rem_euclid(h as isize) as usize;
                            let x = (cx as isize + dx).rem_euclid(w as isize) as usize;
                            u[y * w + x] = 0.5 + rng.random_range(-0.02..0.02);
                            v[y * w + x] = 0.25 + rng.random_range(-0.02..0.02);
                        }
                    }
                }
                u.extend(v);
                u
            }
        }
    }
}

/// Time-stamped ground-truth states on a uniform grid `t_i = t0 + i·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub times: Vec<f64>,
    pub dim: usize,
    /// Row-major `len × dim`.
    pub states: Vec<f64>,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn duration(&self) -> f64 {
        match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Keeps the listed rows; times keep their original values.
    pub fn select(&self, indices: &[usize]) -> StateTrajectory {
        let mut states = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            states.extend_from_slice(self.state(i));
        }
        StateTrajectory {
            times: indices.iter().map(|&i| self.times[i]).collect(),
            dim: self.dim,
            states,
        }
    }

    /// CSV with header `t,s0,s1,...` and 17 significant digits per value.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut line = String::from("t");
        for j in 0..self.dim {
            write!(line, ",s{j}").unwrap();
        }
        writeln!(out, "{line}")?;
        for i in 0..self.len() {
            line.clear();
            write!(line, "{:.16e}", self.times[i]).unwrap();
            for v in self.state(i) {
                write!(line, ",{v:.16e}").unwrap();
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Parses the format produced by [`StateTrajectory::write_csv`]; lines
    /// starting with `#` are skipped.
    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(input)
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.starts_with('#')));
        let header = lines
            .next()
            .ok_or_else(|| DynamicsError::Csv("empty file".into()))??;
        let dim = header.split(',').count().saturating_sub(1);
        if !header.starts_with('t') || dim == 0 {
            return Err(DynamicsError::Csv(format!("bad header {header:?}")));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let values: std::result::Result<Vec<f64>, _> =
                line.split(',').map(str::parse::<f64>).collect();
            let values = values.map_err(|e| DynamicsError::Csv(format!("row {row}: {e}")))?;
            if values.len() != dim + 1 {
                return Err(DynamicsError::Csv(format!(
                    "row {row} has {} fields, expected {}",
                    values.len(),
                    dim + 1
                )));
            }
            times.push(values[0]);
            states.extend_from_slice(&values[1..]);
        }
        Ok(StateTrajectory { times, dim, states })
    }
}

// ----- closed forms and right-hand sides ---------------------------------

pub fn circular_state(t: f64, omega: f64, radius: f64) -> [f64; 2] {
    [radius * (omega * t).cos(), radius * (omega * t).sin()]
}

/// `(θ, θ̇) ↦ (θ̇, −(g/ℓ) sin θ)`.
pub fn single_pendulum_deriv(state: [f64; 2], g: f64, length: f64) -> [f64; 2] {
    [state[1], -(g / length) * state[0].sin()]
}

/// Equal-mass, equal-length double pendulum; state is (θ₁, θ₂, θ̇₁, θ̇₂) with
/// angles from the downward vertical.
pub fn double_pendulum_deriv(state: [f64; 4], g: f64, mass: f64, length: f64) -> [f64; 4] {
    let [t1, t2, w1, w2] = state;
    let (m1, m2, l1, l2) = (mass, mass, length, length);
    let delta = t1 - t2;
    let den = 2.0 * m1 + m2 - m2 * (2.0 * delta).cos();
    let a1 = (-g * (2.0 * m1 + m2) * t1.sin()
        - m2 * g * (t1 - 2.0 * t2).sin()
        - 2.0 * delta.sin() * m2 * (w2 * w2 * l2 + w1 * w1 * l1 * delta.cos()))
        / (l1 * den);
    let a2 = (2.0
        * delta.sin()
        * (w1 * w1 * l1 * (m1 + m2) + g * (m1 + m2) * t1.cos() + w2 * w2 * l2 * m2 * delta.cos()))
        / (l2 * den);
    [w1, w2, a1, a2]
}

/// Spring pendulum, state (r, θ, ṙ, θ̇).
pub fn elastic_pendulum_deriv(
    state: [f64; 4],
    g: f64,
    mass: f64,
    stiffness: f64,
    rest_length: f64,
) -> Result<[f64; 4]> {
    let [r, theta, rdot, thetadot] = state;
    if r <= 0.0 || !r.is_finite() {
        return Err(DynamicsError::Singularity {
            t: f64::NAN,
            detail: format!("spring length r={r} is not positive"),
        });
    }
    let rddot = r * thetadot * thetadot - (stiffness / mass) * (r - rest_length) + g * theta.cos();
    let thetaddot = -(2.0 * rdot * thetadot + g * theta.sin()) / r;
    Ok([rdot, thetadot, rddot, thetaddot])
}

/// One explicit-Euler Gray-Scott update with periodic boundaries.
///
/// `dt` is in reaction time units (grid spacing 1).
pub fn reaction_diffusion_step(
    u: &[f64],
    v: &[f64],
    params: &GrayScott,
    dt: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w) = (params.height, params.width);
    if u.len() != h * w || v.len() != h * w {
        return Err(DynamicsError::Config(format!(
            "fields must have {}x{} cells",
            h, w
        )));
    }
    if !(dt > 0.0) || dt > params.max_stable_dt() {
        return Err(DynamicsError::Config(format!(
            "step {dt} violates diffusion stability bound {}",
            params.max_stable_dt()
        )));
    }
    let mut nu = vec![0.0; h * w];
    let mut nv = vec![0.0; h * w];
    for y in 0..h {
        let up = ((y + h - 1) % h) * w;
        let down = ((y + 1) % h) * w;
        let row = y * w;
        for x in 0..w {
            let left = (x + w - 1) % w;
            let right = (x + 1) % w;
            let i = row + x;
            let lap_u = u[up + x] + u[down + x] + u[row + left] + u[row + right] - 4.0 * u[i];
            let lap_v = v[up + x] + v[down + x] + v[row + left] + v[row + right] - 4.0 * v[i];
            let uvv = u[i] * v[i] * v[i];
            nu[i] = u[i] + dt * (params.diff_u * lap_u - uvv + params.feed * (1.0 - u[i]));
            nv[i] = v[i] + dt * (params.diff_v * lap_v + uvv - (params.feed + params.kill) * v[i]);
        }
    }
    Ok((nu, nv))
}

/// Classical fixed-step RK4 for an autonomous system; returns `steps + 1`
/// states stacked row-major.
pub fn rk4<F>(mut deriv: F, init: &[f64], dt: f64, steps: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let n = init.len();
    let mut out = Vec::with_capacity((steps + 1) * n);
    out.extend_from_slice(init);
    let mut x = init.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        let stamp = |e: DynamicsError| match e {
            DynamicsError::Singularity { detail, .. } => DynamicsError::Singularity {
                t: step as f64 * dt,
                detail,
            },
            other => other,
        };
        deriv(&x, &mut k1).map_err(stamp)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        deriv(&tmp, &mut k2).map_err(stamp)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        deriv(&tmp, &mut k3).map_err(stamp)?;
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        deriv(&tmp, &mut k4).map_err(stamp)?;
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Singularity {
                t: (step + 1) as f64 * dt,
                detail: "state became non-finite".into(),
            });
        }
        out.extend_from_slice(&x);
    }
    Ok(out)
}

fn trajectory(dt: f64, dim: usize, states: Vec<f64>) -> StateTrajectory {
    let len = states.len() / dim;
    StateTrajectory {
        times: (0..len).map(|i| i as f64 * dt).collect(),
        dim,
        states,
    }
}

/// RK4 trajectory of an ODE system (`steps + 1` states).
///
/// Circular motion is integrated through its linear ODE; reaction-diffusion
/// is rejected here (see [`simulate`]).
pub fn integrate_rk4(spec: &SystemSpec, init: &[f64], steps: usize) -> Result<StateTrajectory> {
    spec.validate()?;
    if steps == 0 {
        return Err(DynamicsError::Config("steps must be at least 1".into()));
    }
    if init.len() != spec.system.state_dim() {
        return Err(DynamicsError::Config(format!(
            "initial state has {} values, system expects {}",
            init.len(),
            spec.system.state_dim()
        )));
    }
    let states = match spec.system {
        System::CircularMotion { omega, .. } => rk4(
            |s, d| {
                d[0] = -omega * s[1];
                d[1] = omega * s[0];
                Ok(())
            },
            init,
            spec.dt,
            steps,
        )?,
        System::SinglePendulum { g, length } => rk4(
            |s, d| {
                d.copy_from_slice(&single_pendulum_deriv([s[0], s[1]], g, length));
                Ok(())
            },
            init,
            spec.dt,
            steps,
        )?,
        System::DoublePendulum { g, mass, length } => rk4(
            |s, d| {
                d.copy_from_slice(&double_pendulum_deriv([s[0], s[1], s[2], s[3]], g, mass, length));
                Ok(())
            },
            init,
            spec.dt,
            steps,
        )?,
        System::ElasticPendulum {
            g,
            mass,
            stiffness,
            rest_length,
        } => rk4(
            |s, d| {
                let out = elastic_pendulum_deriv([s[0], s[1], s[2], s[3]], g, mass, stiffness, rest_length)?;
                d.copy_from_slice(&out);
                Ok(())
            },
            init,
            spec.dt,
            steps,
        )?,
        System::ReactionDiffusion { .. } => {
            return Err(DynamicsError::Config(
                "reaction-diffusion is a PDE; use simulate()".into(),
            ))
        }
    };
    Ok(trajectory(spec.dt, init.len(), states))
}

/// Trajectory of any system: exact rotation for circular motion, RK4 for the
/// pendula, explicit Euler for reaction-diffusion.
pub fn simulate(spec: &SystemSpec, init: &[f64], steps: usize) -> Result<StateTrajectory> {
    spec.validate()?;
    match &spec.system {
        System::CircularMotion { omega, .. } => {
            if init.len() != 2 {
                return Err(DynamicsError::Config("circular state is (x, y)".into()));
            }
            let mut states = Vec::with_capacity(2 * (steps + 1));
            for i in 0..=steps {
                let [c, s] = circular_state(i as f64 * spec.dt, *omega, 1.0);
                states.push(c * init[0] - s * init[1]);
                states.push(s * init[0] + c * init[1]);
            }
            Ok(trajectory(spec.dt, 2, states))
        }
        System::ReactionDiffusion { model, time_scale } => {
            let cells = model.height * model.width;
            if init.len() != 2 * cells {
                return Err(DynamicsError::Config(format!(
                    "reaction-diffusion state needs {} values",
                    2 * cells
                )));
            }
            let sim_dt = spec.dt * time_scale;
            let mut states = Vec::with_capacity(2 * cells * (steps + 1));
            states.extend_from_slice(init);
            let (mut u, mut v) = (init[..cells].to_vec(), init[cells..].to_vec());
            for _ in 0..steps {
                (u, v) = reaction_diffusion_step(&u, &v, model, sim_dt)?;
                states.extend_from_slice(&u);
                states.extend_from_slice(&v);
            }
            Ok(trajectory(spec.dt, 2 * cells, states))
        }
        _ => integrate_rk4(spec, init, steps),
    }
}

/// Mechanical energy above the system's ground state (per the given masses),
/// or `None` for systems without a conserved energy.
pub fn energy(system: &System, state: &[f64]) -> Option<f64> {
    match *system {
        System::SinglePendulum { g, length } => {
            let (theta, w) = (state[0], state[1]);
            Some(0.5 * length * length * w * w + g * length * (1.0 - theta.cos()))
        }
        System::DoublePendulum { g, mass, length } => {
            let [t1, t2, w1, w2] = [state[0], state[1], state[2], state[3]];
            let (m, l) = (mass, length);
            let kinetic = 0.5 * (2.0 * m) * l * l * w1 * w1
                + 0.5 * m * l * l * w2 * w2
                + m * l * l * w1 * w2 * (t1 - t2).cos();
            let potential = 2.0 * m * g * l * (1.0 - t1.cos()) + m * g * l * (1.0 - t2.cos());
            Some(kinetic + potential)
        }
        System::ElasticPendulum {
            g,
            mass,
            stiffness,
            rest_length,
        } => {
            let [r, theta, rdot, thetadot] = [state[0], state[1], state[2], state[3]];
            let kinetic = 0.5 * mass * (rdot * rdot + r * r * thetadot * thetadot);
            let potential =
                0.5 * stiffness * (r - rest_length).powi(2) - mass * g * r * theta.cos();
            let ground = -mass * g * rest_length - 0.5 * (mass * g).powi(2) / stiffness;
            Some(kinetic + potential - ground)
        }
        System::CircularMotion { .. } | System::ReactionDiffusion { .. } => None,
    }
}

/// Ground-truth variables exposed to probes and MI estimates.
///
/// ODE systems report their state; reaction-diffusion reports the spatial
/// means of the two fields.
pub fn observables(system: &System, state: &[f64]) -> Vec<f64> {
    match system {
        System::ReactionDiffusion { model, .. } => {
            let cells = model.height * model.width;
            let mean = |s: &[f64]| s.iter().sum::<f64>() / cells as f64;
            vec![mean(&state[..cells]), mean(&state[cells..])]
        }
        _ => state.to_vec(),
    }
}

pub fn observable_names(kind: SystemKind) -> &'static [&'static str] {
    match kind {
        SystemKind::CircularMotion => &["x", "y"],
        SystemKind::SinglePendulum => &["theta", "theta_dot"],
        SystemKind::DoublePendulum => &["theta1", "theta2", "theta1_dot", "theta2_dot"],
        SystemKind::ElasticPendulum => &["r", "theta", "r_dot", "theta_dot"],
        SystemKind::ReactionDiffusion => &["mean_u", "mean_v"],
    }
}

/// Applies [`observables`] to every row.
pub fn observable_trajectory(system: &System, traj: &StateTrajectory) -> StateTrajectory {
    let mut states = Vec::new();
    let mut dim = 0;
    for i in 0..traj.len() {
        let o = observables(system, traj.state(i));
        dim = o.len();
        states.extend(o);
    }
    StateTrajectory {
        times: traj.times.clone(),
        dim,
        states,
    }
}
