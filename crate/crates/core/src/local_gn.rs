//! Local Gauss-Newton baselines for both problems.
//!
//! Every node carries six perturbation coordinates: `(dt, dv)` for CT-RO and
//! `(rho, phi)` for MW, where MW poses are updated on the left through the
//! SE(3) exponential. The normal equations have chain structure and are
//! factored in envelope form.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctro::{CtroInstance, CtroState};
use crate::error::{Error, Result};
use crate::geometry::{hat, orthogonality_error, se3_left_update, so3_exp, vec_mat3};
use crate::linalg::Envelope;
use crate::mw::{pose_to_raw, MwInstance};

/// Perturbation coordinates per node.
pub const DOF: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    RandomAroundGt,
    GroundTruth,
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnConfig {
    /// Threshold on the max-norm of the cost gradient.
    pub grad_tol: f64,
    pub max_iterations: usize,
    /// Factor by which the Levenberg parameter grows after a rejected step
    /// and shrinks after an accepted one. Zero gives plain Gauss-Newton,
    /// where every step is taken.
    pub damping: f64,
    pub init_mode: InitMode,
    /// STD of the random initialization around ground truth.
    pub init_std: f64,
}

impl Default for GnConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-7,
            max_iterations: 100,
            damping: 10.0,
            init_mode: InitMode::RandomAroundGt,
            init_std: 0.5,
        }
    }
}

impl GnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidConfig("grad_tol must be positive".into()));
        }
        if !(self.damping == 0.0 || self.damping > 1.0) {
            return Err(Error::InvalidConfig("damping must be 0 or greater than 1".into()));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::InvalidConfig("init_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnResult {
    /// Raw per-node states, in the same layout as the ground truth.
    pub estimate: Vec<Vec<f64>>,
    pub cost: f64,
    pub grad_max: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One weighted residual `r' W r` over one or two nodes. `jac` has
/// `DOF * nodes.len()` columns, ordered like `nodes`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub nodes: Vec<usize>,
    pub r: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub weight: DMatrix<f64>,
}

impl ResidualBlock {
    pub fn cost(&self) -> f64 {
        self.r.dot(&(&self.weight * &self.r))
    }
}

/// A least-squares problem over a set of nodes with 6-dof local updates.
pub trait LocalProblem {
    type State: Clone;
    fn n_nodes(&self) -> usize;
    fn residuals(&self, x: &[Self::State]) -> Vec<ResidualBlock>;
    /// Applies the stacked update `delta` (length `DOF * n_nodes`).
    fn retract(&self, x: &[Self::State], delta: &DVector<f64>) -> Vec<Self::State>;
}

pub fn total_cost(blocks: &[ResidualBlock]) -> f64 {
    blocks.iter().map(ResidualBlock::cost).sum()
}

/// Gradient of the cost with respect to the stacked update, `2 J' W r`.
pub fn gradient(n_nodes: usize, blocks: &[ResidualBlock]) -> DVector<f64> {
    let mut g = DVector::zeros(DOF * n_nodes);
    for b in blocks {
        let local = b.jac.transpose() * (&b.weight * &b.r) * 2.0;
        for (a, &node) in b.nodes.iter().enumerate() {
            let mut seg = g.rows_mut(DOF * node, DOF);
            seg += local.rows(DOF * a, DOF);
        }
    }
    g
}

fn normal_matrix(n_nodes: usize, blocks: &[ResidualBlock]) -> Envelope {
    let pairs = blocks.iter().flat_map(|b| {
        b.nodes.iter().flat_map(move |&p| {
            b.nodes
                .iter()
                .flat_map(move |&q| (0..DOF).flat_map(move |i| (0..DOF).map(move |j| (DOF * p + i, DOF * q + j))))
        })
    });
    let mut h = Envelope::from_pattern(DOF * n_nodes, pairs);
    for b in blocks {
        let local = b.jac.transpose() * &b.weight * &b.jac;
        for (a, &p) in b.nodes.iter().enumerate() {
            for (c, &q) in b.nodes.iter().enumerate() {
                for i in 0..DOF {
                    for j in 0..DOF {
                        let (gi, gj) = (DOF * p + i, DOF * q + j);
                        if gi >= gj {
                            h.add(gi, gj, local[(DOF * a + i, DOF * c + j)]);
                        }
                    }
                }
            }
        }
    }
    h
}

const LAMBDA_START: f64 = 1e-6;
const LAMBDA_MAX: f64 = 1e16;

/// Damped Gauss-Newton. Returns the final state together with its cost,
/// gradient max-norm, iteration count and convergence flag.
pub fn levenberg<P: LocalProblem>(
    problem: &P,
    init: Vec<P::State>,
    config: &GnConfig,
) -> Result<(Vec<P::State>, f64, f64, usize, bool)> {
    config.validate()?;
    let n = problem.n_nodes();
    let mut x = init;
    let mut blocks = problem.residuals(&x);
    let mut cost = total_cost(&blocks);
    let mut lambda = 0.0;
    let mut iterations = 0;
    loop {
        let g = gradient(n, &blocks);
        let grad_max = g.amax();
        if grad_max <= config.grad_tol {
            return Ok((x, cost, grad_max, iterations, true));
        }
        if iterations >= config.max_iterations {
            return Ok((x, cost, grad_max, iterations, false));
        }
        let h = normal_matrix(n, &blocks);
        let diag: Vec<f64> = (0..h.dim()).map(|i| h.diag(i)).collect();
        let floor = 1e-12 * diag.iter().fold(0.0f64, |a, &d| a.max(d));
        let accepted = loop {
            let mut a = h.clone();
            for (i, &d) in diag.iter().enumerate() {
                a.add_diag(i, lambda * (d + floor));
            }
            if let Err(e) = a.cholesky() {
                if config.damping == 0.0 || lambda >= LAMBDA_MAX {
                    return Err(e);
                }
                lambda = if lambda == 0.0 { LAMBDA_START } else { lambda * config.damping };
                continue;
            }
            let mut step: Vec<f64> = g.iter().map(|v| -0.5 * v).collect();
            a.solve(&mut step);
            let cand = problem.retract(&x, &DVector::from_vec(step));
            let cand_blocks = problem.residuals(&cand);
            let cand_cost = total_cost(&cand_blocks);
            if config.damping == 0.0 || cand_cost <= cost {
                x = cand;
                blocks = cand_blocks;
                cost = cand_cost;
                if config.damping > 0.0 {
                    lambda /= config.damping;
                    if lambda < LAMBDA_START {
                        lambda = 0.0;
                    }
                }
                break true;
            }
            if lambda >= LAMBDA_MAX {
                break false;
            }
            lambda = if lambda == 0.0 { LAMBDA_START } else { lambda * config.damping };
        };
        if !accepted {
            return Ok((x, cost, grad_max, iterations, false));
        }
        iterations += 1;
    }
}

/// CT-RO as a local problem over `(t_k, v_k)`.
pub struct CtroLocal<'a>(pub &'a CtroInstance);

impl LocalProblem for CtroLocal<'_> {
    type State = CtroState;

    fn n_nodes(&self) -> usize {
        self.0.n_states()
    }

    fn residuals(&self, x: &[CtroState]) -> Vec<ResidualBlock> {
        let inst = self.0;
        let w = DMatrix::from_element(1, 1, inst.meas_weight());
        let mut out = Vec::new();
        for (k, (s, meas)) in x.iter().zip(&inst.measurements).enumerate() {
            for m in meas {
                let d = s.position - inst.landmarks[m.landmark];
                let mut jac = DMatrix::zeros(1, DOF);
                for a in 0..3 {
                    jac[(0, a)] = -2.0 * d[a];
                }
                out.push(ResidualBlock {
                    nodes: vec![k],
                    r: DVector::from_element(1, m.d2 - d.norm_squared()),
                    jac,
                    weight: w.clone(),
                });
            }
        }
        for p in inst.priors() {
            let e = p.phi * x[p.i].as_vector6() - x[p.j].as_vector6();
            let mut jac = DMatrix::zeros(DOF, 2 * DOF);
            jac.view_mut((0, 0), (DOF, DOF)).copy_from(&p.phi);
            jac.view_mut((0, DOF), (DOF, DOF)).copy_from(&-DMatrix::<f64>::identity(DOF, DOF));
            out.push(ResidualBlock {
                nodes: vec![p.i, p.j],
                r: DVector::from_column_slice(e.as_slice()),
                jac,
                weight: DMatrix::from_column_slice(DOF, DOF, p.weight.as_slice()),
            });
        }
        out
    }

    fn retract(&self, x: &[CtroState], delta: &DVector<f64>) -> Vec<CtroState> {
        x.iter()
            .enumerate()
            .map(|(k, s)| CtroState {
                position: s.position + delta.fixed_rows::<3>(DOF * k),
                velocity: s.velocity + delta.fixed_rows::<3>(DOF * k + 3),
            })
            .collect()
    }
}

/// MW as a local problem over poses `(C_i0, t)`, perturbed on the left.
pub struct MwLocal<'a>(pub &'a MwInstance);

pub type Pose = (Matrix3<f64>, Vector3<f64>);

/// `d vec(C) / d phi` for `C <- exp(phi^) C`: the stacked `-hat(c_k)`.
fn dvec_rotation(c: &Matrix3<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(9, 3);
    for k in 0..3 {
        out.view_mut((3 * k, 0), (3, 3)).copy_from(&-hat(&c.column(k).into_owned()));
    }
    out
}

impl LocalProblem for MwLocal<'_> {
    type State = Pose;

    fn n_nodes(&self) -> usize {
        self.0.n_poses()
    }

    fn residuals(&self, x: &[Pose]) -> Vec<ResidualBlock> {
        let inst = self.0;
        let mut out = Vec::new();
        for (k, ((c, t), meas)) in x.iter().zip(&inst.landmark_meas).enumerate() {
            for m in meas {
                let p = c * inst.landmarks[m.landmark] + t;
                let mut jac = DMatrix::zeros(3, DOF);
                jac.view_mut((0, 0), (3, 3)).copy_from(&-Matrix3::identity());
                jac.view_mut((0, 3), (3, 3)).copy_from(&hat(&p));
                out.push(ResidualBlock {
                    nodes: vec![k],
                    r: DVector::from_column_slice((m.point - p).as_slice()),
                    jac,
                    weight: DMatrix::from_column_slice(3, 3, m.weight.as_slice()),
                });
            }
        }
        let wd = inst.relative_weight_diag();
        for rel in &inst.relative {
            let (ci, ti) = &x[rel.i];
            let (cj, tj) = &x[rel.j];
            let rt = rel.rotation;
            let er = ci - rt * cj;
            let mut jr = DMatrix::zeros(9, 2 * DOF);
            jr.view_mut((0, 3), (9, 3)).copy_from(&dvec_rotation(ci));
            let mut dj = dvec_rotation(cj);
            for k in 0..3 {
                let blk = -(rt * dj.fixed_view::<3, 3>(3 * k, 0));
                dj.view_mut((3 * k, 0), (3, 3)).copy_from(&blk);
            }
            jr.view_mut((0, DOF + 3), (9, 3)).copy_from(&dj);
            out.push(ResidualBlock {
                nodes: vec![rel.i, rel.j],
                r: DVector::from_column_slice(&vec_mat3(&er)),
                jac: jr,
                weight: DMatrix::identity(9, 9) * wd[0],
            });
            let et = ti - (rt * tj + rel.translation);
            let mut jt = DMatrix::zeros(3, 2 * DOF);
            jt.view_mut((0, 0), (3, 3)).copy_from(&Matrix3::identity());
            jt.view_mut((0, 3), (3, 3)).copy_from(&-hat(ti));
            jt.view_mut((0, DOF), (3, 3)).copy_from(&-rt);
            jt.view_mut((0, DOF + 3), (3, 3)).copy_from(&(rt * hat(tj)));
            out.push(ResidualBlock {
                nodes: vec![rel.i, rel.j],
                r: DVector::from_column_slice(et.as_slice()),
                jac: jt,
                weight: DMatrix::identity(3, 3) * wd[9],
            });
        }
        out
    }

    fn retract(&self, x: &[Pose], delta: &DVector<f64>) -> Vec<Pose> {
        x.iter()
            .enumerate()
            .map(|(k, (c, t))| {
                let rho = delta.fixed_rows::<3>(DOF * k).into_owned();
                let phi = delta.fixed_rows::<3>(DOF * k + 3).into_owned();
                se3_left_update(c, t, &rho, &phi)
            })
            .collect()
    }
}

pub fn gn_ctro(instance: &CtroInstance, init: &[CtroState], config: &GnConfig) -> Result<GnResult> {
    if init.len() != instance.n_states() {
        return Err(Error::DimensionMismatch { expected: instance.n_states(), got: init.len() });
    }
    let (x, cost, grad_max, iterations, converged) = levenberg(&CtroLocal(instance), init.to_vec(), config)?;
    Ok(GnResult {
        estimate: x.iter().map(CtroState::to_vec).collect(),
        cost,
        grad_max,
        iterations,
        converged,
    })
}

pub fn gn_mw(instance: &MwInstance, init: &[Pose], config: &GnConfig) -> Result<GnResult> {
    if init.len() != instance.n_poses() {
        return Err(Error::DimensionMismatch { expected: instance.n_poses(), got: init.len() });
    }
    for (k, (c, _)) in init.iter().enumerate() {
        if orthogonality_error(c) > 1e-8 || (c.determinant() - 1.0).abs() > 1e-8 {
            return Err(Error::InconsistentInput(format!("initial rotation {k} is not in SO(3)")));
        }
    }
    let (x, cost, grad_max, iterations, converged) = levenberg(&MwLocal(instance), init.to_vec(), config)?;
    Ok(GnResult {
        estimate: x.iter().map(|(c, t)| pose_to_raw(c, t)).collect(),
        cost,
        grad_max,
        iterations,
        converged,
    })
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("non-negative std")
}

/// Ground truth plus `N(0, std^2)` on every position and velocity coordinate.
pub fn random_init_ctro<R: Rng + ?Sized>(instance: &CtroInstance, std: f64, rng: &mut R) -> Vec<CtroState> {
    let d = normal(std);
    instance
        .gt_states
        .iter()
        .map(|s| CtroState {
            position: s.position + Vector3::from_fn(|_, _| d.sample(rng)),
            velocity: s.velocity + Vector3::from_fn(|_, _| d.sample(rng)),
        })
        .collect()
}

/// Translations get `N(0, std^2)` per coordinate; rotations are multiplied on
/// the left by `exp(phi^)` with `phi ~ N(0, std^2 I)` in radians.
pub fn random_init_mw<R: Rng + ?Sized>(instance: &MwInstance, std: f64, rng: &mut R) -> Vec<Pose> {
    let d = normal(std);
    instance
        .gt_rotations
        .iter()
        .zip(&instance.gt_translations)
        .map(|(c, t)| {
            let t = t + Vector3::from_fn(|_, _| d.sample(rng));
            let phi = Vector3::from_fn(|_, _| d.sample(rng));
            (so3_exp(&phi) * c, t)
        })
        .collect()
}

pub fn gt_poses(instance: &MwInstance) -> Vec<Pose> {
    instance.gt_rotations.iter().copied().zip(instance.gt_translations.iter().copied()).collect()
}

/// Initial CT-RO states for the configured mode. `User` takes `user`.
pub fn init_ctro<R: Rng + ?Sized>(
    instance: &CtroInstance,
    config: &GnConfig,
    user: Option<&[CtroState]>,
    rng: &mut R,
) -> Result<Vec<CtroState>> {
    match config.init_mode {
        InitMode::GroundTruth => Ok(instance.gt_states.clone()),
        InitMode::RandomAroundGt => Ok(random_init_ctro(instance, config.init_std, rng)),
        InitMode::User => user
            .map(<[CtroState]>::to_vec)
            .ok_or_else(|| Error::InvalidConfig("user init mode needs an initial state".into())),
    }
}

pub fn init_mw<R: Rng + ?Sized>(
    instance: &MwInstance,
    config: &GnConfig,
    user: Option<&[Pose]>,
    rng: &mut R,
) -> Result<Vec<Pose>> {
    match config.init_mode {
        InitMode::GroundTruth => Ok(gt_poses(instance)),
        InitMode::RandomAroundGt => Ok(random_init_mw(instance, config.init_std, rng)),
        InitMode::User => user
            .map(<[Pose]>::to_vec)
            .ok_or_else(|| Error::InvalidConfig("user init mode needs an initial state".into())),
    }
}
