//! Continuous-time range-only localization (CT-RO): simulation, the
//! constant-velocity Gaussian-process prior and the QCQP lifting.
//!
//! Each node carries `xi_k = (t_k, v_k)` and the single lifted coordinate
//! `l_k = ||t_k||^2`, giving the local layout `[h, t (3), v (3), ||t||^2]`.

use nalgebra::{DMatrix, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    bilinear, ConstraintFactor, ConstraintKind, CostFactor, LiftedProblem, ProblemKind, Scope, VarBlock,
};

/// Local dimension of a lifted CT-RO block.
pub const LOCAL_DIM: usize = 8;
const MAX_TRAJECTORY_RESTARTS: usize = 100;
const MAX_STEP_DRAWS: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkLayout {
    /// Uniform in the cube.
    #[default]
    Uniform,
    /// Uniform on the horizontal mid-plane of the cube; every configuration
    /// then has a mirror-image ambiguity that only the prior resolves.
    Planar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtroConfig {
    pub n_states: usize,
    pub n_landmarks: usize,
    /// Side of the origin-centred cube holding landmarks and trajectory (m).
    pub cube_side: f64,
    pub init_speed: f64,
    /// Acceleration STD driving the simulated trajectory.
    pub sigma_a_true: f64,
    /// STD of the noise added to each squared distance.
    pub sigma_d_meas: f64,
    /// Assumed squared-distance STD used for the measurement weights.
    pub sigma_d_prior: f64,
    /// Acceleration STD of the estimation prior.
    pub sigma_a_prior: f64,
    /// Fraction of (node, landmark) measurements dropped at random.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub landmark_layout: LandmarkLayout,
    pub seed: u64,
}

impl Default for CtroConfig {
    fn default() -> Self {
        Self {
            n_states: 10,
            n_landmarks: 8,
            cube_side: 10.0,
            init_speed: 0.1,
            sigma_a_true: 0.2,
            sigma_d_meas: 0.10,
            sigma_d_prior: 0.001,
            sigma_a_prior: 0.2,
            dropout: 0.0,
            landmark_layout: LandmarkLayout::Uniform,
            seed: 0,
        }
    }
}

impl CtroConfig {
    pub fn new(n_states: usize, n_landmarks: usize, seed: u64) -> Self {
        Self {
            n_states,
            n_landmarks,
            seed,
            ..Self::default()
        }
    }

    /// Same instance generator with all simulated noise switched off.
    pub fn noiseless(mut self) -> Self {
        self.sigma_a_true = 0.0;
        self.sigma_d_meas = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 {
            return Err(Error::InvalidConfig("CT-RO needs at least 2 states".into()));
        }
        if self.n_landmarks < 1 {
            return Err(Error::InvalidConfig("CT-RO needs at least 1 landmark".into()));
        }
        if !(self.sigma_d_prior > 0.0 && self.sigma_a_prior > 0.0 && self.cube_side > 0.0) {
            return Err(Error::InvalidConfig("prior STDs and cube side must be positive".into()));
        }
        if self.sigma_a_true < 0.0 || self.sigma_d_meas < 0.0 || self.init_speed < 0.0 {
            return Err(Error::InvalidConfig("simulation STDs must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtroState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl CtroState {
    pub fn to_vec(&self) -> Vec<f64> {
        self.position.iter().chain(self.velocity.iter()).copied().collect()
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            position: Vector3::new(s[0], s[1], s[2]),
            velocity: Vector3::new(s[3], s[4], s[5]),
        }
    }

    pub fn as_vector6(&self) -> Vector6<f64> {
        Vector6::new(
            self.position.x,
            self.position.y,
            self.position.z,
            self.velocity.x,
            self.velocity.y,
            self.velocity.z,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub landmark: usize,
    /// Noisy squared distance.
    pub d2: f64,
}

/// Motion-prior term linking nodes `i` and `j = i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GpPrior {
    pub i: usize,
    pub j: usize,
    pub phi: Matrix6<f64>,
    pub weight: Matrix6<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtroInstance {
    pub config: CtroConfig,
    pub landmarks: Vec<Vector3<f64>>,
    pub times: Vec<f64>,
    pub gt_states: Vec<CtroState>,
    /// Per node, the landmarks it measured.
    pub measurements: Vec<Vec<RangeMeasurement>>,
}

impl CtroInstance {
    pub fn n_states(&self) -> usize {
        self.gt_states.len()
    }

    /// Scalar measurement weight, `W_k = w I`.
    pub fn meas_weight(&self) -> f64 {
        self.config.sigma_d_prior.powi(-2)
    }

    /// Prior terms along the chain `(i, i + 1)`.
    pub fn priors(&self) -> Vec<GpPrior> {
        self.times
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (phi, weight) =
                    gp_prior_terms(w[0], w[1], self.config.sigma_a_prior).expect("times strictly increasing");
                GpPrior { i, j: i + 1, phi, weight }
            })
            .collect()
    }

    pub fn gt_raw(&self) -> Vec<Vec<f64>> {
        self.gt_states.iter().map(CtroState::to_vec).collect()
    }
}

/// Transition matrix of the constant-velocity model over `dt`.
pub fn transition(dt: f64) -> Matrix6<f64> {
    let mut phi = Matrix6::identity();
    for a in 0..3 {
        phi[(a, 3 + a)] = dt;
    }
    phi
}

/// Process covariance `Q_dt` of the constant-velocity prior with white
/// acceleration of STD `sigma_a`.
pub fn gp_covariance(dt: f64, sigma_a: f64) -> Matrix6<f64> {
    let qc = sigma_a * sigma_a;
    let mut q = Matrix6::zeros();
    for a in 0..3 {
        q[(a, a)] = dt.powi(3) / 3.0 * qc;
        q[(a, 3 + a)] = dt.powi(2) / 2.0 * qc;
        q[(3 + a, a)] = dt.powi(2) / 2.0 * qc;
        q[(3 + a, 3 + a)] = dt * qc;
    }
    q
}

/// Transition matrix and information matrix `Q_dt^{-1}` for the prior
/// between times `t_i < t_j`.
pub fn gp_prior_terms(t_i: f64, t_j: f64, sigma_a: f64) -> Result<(Matrix6<f64>, Matrix6<f64>)> {
    let dt = t_j - t_i;
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("prior needs t_j > t_i, got dt = {dt}")));
    }
    if !(sigma_a > 0.0) {
        return Err(Error::InvalidConfig("prior acceleration STD must be positive".into()));
    }
    let inv_qc = sigma_a.powi(-2);
    let mut w = Matrix6::zeros();
    for a in 0..3 {
        w[(a, a)] = 12.0 / dt.powi(3) * inv_qc;
        w[(a, 3 + a)] = -6.0 / dt.powi(2) * inv_qc;
        w[(3 + a, a)] = -6.0 / dt.powi(2) * inv_qc;
        w[(3 + a, 3 + a)] = 4.0 / dt * inv_qc;
    }
    Ok((transition(dt), w))
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn inside(p: &Vector3<f64>, half: f64) -> bool {
    p.iter().all(|c| c.abs() <= half)
}

/// Simulates an instance with the generator seeded from `config.seed`.
pub fn simulate_seeded(config: &CtroConfig) -> Result<CtroInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    simulate(config, &mut rng)
}

pub fn simulate<R: Rng + ?Sized>(config: &CtroConfig, rng: &mut R) -> Result<CtroInstance> {
    config.validate()?;
    let n = config.n_states;
    let half = 0.5 * config.cube_side;

    let landmarks: Vec<Vector3<f64>> = (0..config.n_landmarks)
        .map(|_| {
            let z = match config.landmark_layout {
                LandmarkLayout::Uniform => rng.random_range(-half..=half),
                LandmarkLayout::Planar => 0.0,
            };
            Vector3::new(rng.random_range(-half..=half), rng.random_range(-half..=half), z)
        })
        .collect();

    let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=(n as f64 - 1.0))).collect();
    times.sort_by(f64::total_cmp);
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::GenerationFailure("sampled duplicate timestamps".into()));
    }

    let gt_states = simulate_trajectory(config, &times, half, rng)?;

    let mut measurements = Vec::with_capacity(n);
    for s in &gt_states {
        let mut row = Vec::with_capacity(landmarks.len());
        for (i, m) in landmarks.iter().enumerate() {
            let keep = config.dropout == 0.0 || rng.random::<f64>() >= config.dropout;
            let noise = config.sigma_d_meas * normal(rng);
            if keep {
                row.push(RangeMeasurement {
                    landmark: i,
                    d2: (s.position - m).norm_squared() + noise,
                });
            }
        }
        if row.is_empty() {
            // Keep at least one range per node.
            let i = rng.random_range(0..landmarks.len());
            row.push(RangeMeasurement {
                landmark: i,
                d2: (s.position - landmarks[i]).norm_squared() + config.sigma_d_meas * normal(rng),
            });
        }
        measurements.push(row);
    }

    Ok(CtroInstance {
        config: config.clone(),
        landmarks,
        times,
        gt_states,
        measurements,
    })
}

/// Exact constant-velocity propagation plus acceleration increments drawn
/// from `Q_dt`. A step leaving the cube is redrawn; if redraws keep failing
/// the last draw is reflected off the wall, and only an overshoot larger
/// than the cube restarts the trajectory.
fn simulate_trajectory<R: Rng + ?Sized>(
    config: &CtroConfig,
    times: &[f64],
    half: f64,
    rng: &mut R,
) -> Result<Vec<CtroState>> {
    'restart: for _ in 0..MAX_TRAJECTORY_RESTARTS {
        let position = Vector3::new(
            rng.random_range(-half..=half),
            rng.random_range(-half..=half),
            rng.random_range(-half..=half),
        );
        let dir = Vector3::new(normal(rng), normal(rng), normal(rng));
        let dir = if dir.norm() > 0.0 { dir.normalize() } else { Vector3::x() };
        let mut states = vec![CtroState {
            position,
            velocity: dir * config.init_speed,
        }];
        for w in times.windows(2) {
            let dt = w[1] - w[0];
            let prev = *states.last().unwrap();
            let chol = noise_factor(dt, config.sigma_a_true);
            let mut next = None;
            let mut last = prev;
            for _ in 0..MAX_STEP_DRAWS {
                let mut cand = prev;
                cand.position += prev.velocity * dt;
                for a in 0..3 {
                    let (z0, z1) = (normal(rng), normal(rng));
                    cand.position[a] += chol[(0, 0)] * z0;
                    cand.velocity[a] += chol[(1, 0)] * z0 + chol[(1, 1)] * z1;
                }
                if inside(&cand.position, half) {
                    next = Some(cand);
                    break;
                }
                last = cand;
                if config.sigma_a_true == 0.0 {
                    break;
                }
            }
            match next.or_else(|| reflect(last, half)) {
                Some(s) => states.push(s),
                None => continue 'restart,
            }
        }
        return Ok(states);
    }
    Err(Error::GenerationFailure(format!(
        "trajectory left the cube in {MAX_TRAJECTORY_RESTARTS} attempts"
    )))
}

/// Mirrors a state that overshot a wall back inside, flipping the matching
/// velocity component. `None` if the overshoot exceeds the cube side.
fn reflect(mut s: CtroState, half: f64) -> Option<CtroState> {
    for a in 0..3 {
        if s.position[a] > half {
            s.position[a] = 2.0 * half - s.position[a];
            s.velocity[a] = -s.velocity[a];
        } else if s.position[a] < -half {
            s.position[a] = -2.0 * half - s.position[a];
            s.velocity[a] = -s.velocity[a];
        }
    }
    inside(&s.position, half).then_some(s)
}

/// Lower Cholesky factor of the per-axis 2x2 block of `Q_dt`.
fn noise_factor(dt: f64, sigma_a: f64) -> nalgebra::Matrix2<f64> {
    let q = sigma_a * sigma_a;
    let a = dt.powi(3) / 3.0 * q;
    let b = dt.powi(2) / 2.0 * q;
    let c = dt * q;
    if a <= 0.0 {
        return nalgebra::Matrix2::zeros();
    }
    let l00 = a.sqrt();
    let l10 = b / l00;
    let l11 = (c - l10 * l10).max(0.0).sqrt();
    nalgebra::Matrix2::new(l00, 0.0, l10, l11)
}

fn block_labels(k: usize) -> Vec<String> {
    ["tx", "ty", "tz", "vx", "vy", "vz", "|t|^2"]
        .iter()
        .map(|s| format!("x{k}.{s}"))
        .collect()
}

/// Lifts an instance to the QCQP.
pub fn lift_ctro(instance: &CtroInstance) -> Result<LiftedProblem> {
    let n = instance.n_states();
    let blocks: Vec<VarBlock> = (0..n)
        .map(|k| VarBlock {
            index: k,
            state_dim: 6,
            lift_dim: 1,
            labels: block_labels(k),
        })
        .collect();

    let w = instance.meas_weight();
    let mut cost_factors = Vec::new();
    for (k, meas) in instance.measurements.iter().enumerate() {
        if meas.is_empty() {
            continue;
        }
        let mut b = DMatrix::zeros(meas.len(), LOCAL_DIM);
        for (r, m) in meas.iter().enumerate() {
            let lm = instance.landmarks.get(m.landmark).ok_or_else(|| {
                Error::InvalidShape(format!("measurement references missing landmark {}", m.landmark))
            })?;
            b[(r, 0)] = m.d2 - lm.norm_squared();
            for a in 0..3 {
                b[(r, 1 + a)] = 2.0 * lm[a];
            }
            b[(r, 7)] = -1.0;
        }
        let wm = DMatrix::identity(meas.len(), meas.len()) * w;
        cost_factors.push(CostFactor::from_residual(Scope::Absolute(k), &b, &wm));
    }

    let mut relative_scopes = Vec::new();
    for prior in instance.priors() {
        // e_ij = Phi xi_i - xi_j over x_ij = [h, t_i, v_i, l_i, t_j, v_j, l_j].
        let mut b = DMatrix::zeros(6, 1 + 2 * (LOCAL_DIM - 1));
        for r in 0..6 {
            for c in 0..6 {
                b[(r, 1 + c)] = prior.phi[(r, c)];
            }
            b[(r, LOCAL_DIM + r)] = -1.0;
        }
        let wm = DMatrix::from_fn(6, 6, |r, c| prior.weight[(r, c)]);
        cost_factors.push(CostFactor::from_residual(Scope::Relative(prior.i, prior.j), &b, &wm));
        relative_scopes.push((prior.i, prior.j));
    }

    let mut constraint_factors = Vec::with_capacity(2 * n);
    for k in 0..n {
        // l h - t^T t = 0
        constraint_factors.push(ConstraintFactor {
            block: k,
            matrix: bilinear(LOCAL_DIM, &[(0, 7, 1.0), (1, 1, -1.0), (2, 2, -1.0), (3, 3, -1.0)]),
            rhs: 0.0,
            kind: ConstraintKind::Substitution,
        });
        constraint_factors.push(ConstraintFactor::homogenization(k, LOCAL_DIM));
    }

    LiftedProblem::new(ProblemKind::Ctro, blocks, cost_factors, constraint_factors, relative_scopes)
}

/// Direct evaluation of the NLS cost at raw states `(t_k, v_k)`.
pub fn nls_cost(instance: &CtroInstance, states: &[CtroState]) -> f64 {
    let w = instance.meas_weight();
    let mut cost = 0.0;
    for (s, meas) in states.iter().zip(&instance.measurements) {
        for m in meas {
            let e = m.d2 - (s.position - instance.landmarks[m.landmark]).norm_squared();
            cost += w * e * e;
        }
    }
    for p in instance.priors() {
        let e = p.phi * states[p.i].as_vector6() - states[p.j].as_vector6();
        cost += (e.transpose() * p.weight * e)[(0, 0)];
    }
    cost
}

/// Converts raw per-block vectors into typed states.
pub fn states_from_raw(raw: &[Vec<f64>]) -> Vec<CtroState> {
    raw.iter().map(|s| CtroState::from_slice(s)).collect()
}
