//! Matrix-weighted SE(3) localization (MW): stereo-like landmark
//! observations with anisotropic weights plus relative pose measurements
//! along a chain.
//!
//! A pose `T_i0 = (C_i0, t)` maps world points into frame `i` as `C p + t`.
//! Its lifted block is `[h, vec(C) (9, column-major), t (3)]`; no
//! substitutions are needed since the cost is already quadratic.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot_z, so3_exp, vec_mat3};
use crate::model::{
    bilinear, ConstraintFactor, ConstraintKind, CostFactor, LiftedProblem, ProblemKind, Scope, VarBlock,
};

pub const LOCAL_DIM: usize = 13;
const MAX_POSE_DRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MwConfig {
    pub n_poses: usize,
    pub n_landmarks: usize,
    /// Side of the origin-centred landmark cube (m).
    pub cube_side: f64,
    pub pose_box_lo: [f64; 3],
    pub pose_box_hi: [f64; 3],
    /// Focal length (pixels).
    pub f: f64,
    /// Principal point offset (pixels).
    pub c: f64,
    /// Stereo baseline as used in the disparity formula.
    pub b: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    /// Relative translation STD (m).
    pub sigma_t: f64,
    /// Relative rotation STD (degrees).
    pub sigma_r_deg: f64,
    /// When false, measurements are exact; weights still use the STDs.
    #[serde(default = "yes")]
    pub add_noise: bool,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for MwConfig {
    fn default() -> Self {
        Self {
            n_poses: 10,
            n_landmarks: 8,
            cube_side: 1.0,
            pose_box_lo: [-0.1, -0.1, 2.9],
            pose_box_hi: [0.1, 0.1, 3.1],
            f: 1077.0,
            c: 0.0,
            b: 0.12,
            sigma_u: 1.0,
            sigma_v: 1.0,
            sigma_t: 0.01,
            sigma_r_deg: 10.0,
            add_noise: true,
            seed: 0,
        }
    }
}

impl MwConfig {
    pub fn new(n_poses: usize, n_landmarks: usize, seed: u64) -> Self {
        Self {
            n_poses,
            n_landmarks,
            seed,
            ..Self::default()
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.add_noise = false;
        self
    }

    /// Sets both pixel STDs.
    pub fn with_pixel_noise(mut self, sigma: f64) -> Self {
        self.sigma_u = sigma;
        self.sigma_v = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_poses < 1 || self.n_landmarks < 1 {
            return Err(Error::InvalidConfig("MW needs at least one pose and one landmark".into()));
        }
        let stds = [self.sigma_u, self.sigma_v, self.sigma_t, self.sigma_r_deg];
        if stds.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("MW STDs must be positive".into()));
        }
        if !(self.f > 0.0 && self.b > 0.0 && self.cube_side > 0.0) {
            return Err(Error::InvalidConfig("camera parameters must be positive".into()));
        }
        if (0..3).any(|a| self.pose_box_lo[a] > self.pose_box_hi[a]) {
            return Err(Error::InvalidConfig("pose box bounds are inverted".into()));
        }
        Ok(())
    }

    pub fn sigma_r_rad(&self) -> f64 {
        self.sigma_r_deg.to_radians()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMeasurement {
    pub landmark: usize,
    /// Measured landmark position in the camera frame.
    pub point: Vector3<f64>,
    pub weight: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeMeasurement {
    pub i: usize,
    pub j: usize,
    /// Measured relative transform `T_i0 T_j0^{-1}`.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MwInstance {
    pub config: MwConfig,
    pub landmarks: Vec<Vector3<f64>>,
    pub gt_rotations: Vec<Matrix3<f64>>,
    /// `t_{0i}^i`, the translation part of `T_i0`.
    pub gt_translations: Vec<Vector3<f64>>,
    /// Camera centres in the world frame.
    pub positions: Vec<Vector3<f64>>,
    pub yaws: Vec<f64>,
    pub landmark_meas: Vec<Vec<LandmarkMeasurement>>,
    pub relative: Vec<RelativeMeasurement>,
}

impl MwInstance {
    pub fn n_poses(&self) -> usize {
        self.gt_rotations.len()
    }

    /// Diagonal of the relative-measurement information matrix over the 12
    /// entries `[vec(C) (9), t (3)]`.
    pub fn relative_weight_diag(&self) -> [f64; 12] {
        let wr = self.config.sigma_r_rad().powi(-2);
        let wt = self.config.sigma_t.powi(-2);
        let mut d = [wr; 12];
        d[9..].fill(wt);
        d
    }

    /// Raw states `[vec(C), t]` of the ground truth.
    pub fn gt_raw(&self) -> Vec<Vec<f64>> {
        self.gt_rotations
            .iter()
            .zip(&self.gt_translations)
            .map(|(c, t)| pose_to_raw(c, t))
            .collect()
    }
}

pub fn pose_to_raw(c: &Matrix3<f64>, t: &Vector3<f64>) -> Vec<f64> {
    let mut v = vec_mat3(c).to_vec();
    v.extend_from_slice(t.as_slice());
    v
}

pub fn raw_to_pose(raw: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
    (
        Matrix3::from_column_slice(&raw[..9]),
        Vector3::new(raw[9], raw[10], raw[11]),
    )
}

/// Camera looking straight down (z axis along world -z), before yaw.
pub fn base_orientation() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

/// `g(p) = [f x / z + c, f y / z + c, f b / z]`.
pub fn stereo_project(p: &Vector3<f64>, config: &MwConfig) -> Vector3<f64> {
    Vector3::new(
        config.f * p.x / p.z + config.c,
        config.f * p.y / p.z + config.c,
        config.f * config.b / p.z,
    )
}

pub fn stereo_jacobian(p: &Vector3<f64>, config: &MwConfig) -> Matrix3<f64> {
    let (f, b) = (config.f, config.b);
    let z2 = p.z * p.z;
    Matrix3::new(
        f / p.z,
        0.0,
        -f * p.x / z2,
        0.0,
        f / p.z,
        -f * p.y / z2,
        0.0,
        0.0,
        -f * b / z2,
    )
}

/// Euclidean information matrix `J^T Sigma^{-1} J` of a camera-frame point.
pub fn stereo_weight(p_cam: &Vector3<f64>, config: &MwConfig) -> Result<Matrix3<f64>> {
    if !(p_cam.z > 0.0) {
        return Err(Error::InvalidConfig(format!("point depth must be positive, got {}", p_cam.z)));
    }
    let j = stereo_jacobian(p_cam, config);
    let s_inv = Matrix3::from_diagonal(&Vector3::new(
        config.sigma_u.powi(-2),
        config.sigma_v.powi(-2),
        config.sigma_u.powi(-2),
    ));
    let w = j.transpose() * s_inv * j;
    Ok(0.5 * (w + w.transpose()))
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn simulate_seeded(config: &MwConfig) -> Result<MwInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    simulate(config, &mut rng)
}

pub fn simulate<R: Rng + ?Sized>(config: &MwConfig, rng: &mut R) -> Result<MwInstance> {
    config.validate()?;
    let half = 0.5 * config.cube_side;
    let landmarks: Vec<Vector3<f64>> = (0..config.n_landmarks)
        .map(|_| {
            Vector3::new(
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
            )
        })
        .collect();

    let mut rotations = Vec::with_capacity(config.n_poses);
    let mut translations = Vec::with_capacity(config.n_poses);
    let mut positions = Vec::with_capacity(config.n_poses);
    let mut yaws = Vec::with_capacity(config.n_poses);
    for _ in 0..config.n_poses {
        let mut accepted = None;
        for _ in 0..MAX_POSE_DRAWS {
            let r = Vector3::from_fn(|a, _| {
                let (lo, hi) = (config.pose_box_lo[a], config.pose_box_hi[a]);
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..=hi)
                }
            });
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            let c = base_orientation() * rot_z(yaw).transpose();
            if landmarks.iter().all(|m| (c * (m - r)).z > 0.0) {
                accepted = Some((c, r, yaw));
                break;
            }
        }
        let (c, r, yaw) = accepted.ok_or_else(|| {
            Error::GenerationFailure("could not place a pose with every landmark in front".into())
        })?;
        rotations.push(c);
        translations.push(-(c * r));
        positions.push(r);
        yaws.push(yaw);
    }

    let mut landmark_meas = Vec::with_capacity(config.n_poses);
    for (c, t) in rotations.iter().zip(&translations) {
        let mut row = Vec::with_capacity(landmarks.len());
        for (l, m) in landmarks.iter().enumerate() {
            let p = c * m + t;
            let weight = stereo_weight(&p, config)?;
            let mut point = p;
            if config.add_noise {
                // Pixel noise pushed through the inverse linearized projection.
                let j = stereo_jacobian(&p, config);
                let pix = Vector3::new(
                    config.sigma_u * normal(rng),
                    config.sigma_v * normal(rng),
                    config.sigma_u * normal(rng),
                );
                let j_inv = j
                    .try_inverse()
                    .ok_or_else(|| Error::GenerationFailure("singular stereo Jacobian".into()))?;
                point += j_inv * pix;
            }
            row.push(LandmarkMeasurement { landmark: l, point, weight });
        }
        landmark_meas.push(row);
    }

    let mut relative = Vec::with_capacity(config.n_poses.saturating_sub(1));
    for i in 0..config.n_poses.saturating_sub(1) {
        let j = i + 1;
        let mut rot = rotations[i] * rotations[j].transpose();
        let mut trans = translations[i] - rot * translations[j];
        if config.add_noise {
            let phi = Vector3::from_fn(|_, _| config.sigma_r_rad() * normal(rng));
            rot = so3_exp(&phi) * rot;
            trans += Vector3::from_fn(|_, _| config.sigma_t * normal(rng));
        }
        relative.push(RelativeMeasurement {
            i,
            j,
            rotation: rot,
            translation: trans,
        });
    }

    Ok(MwInstance {
        config: config.clone(),
        landmarks,
        gt_rotations: rotations,
        gt_translations: translations,
        positions,
        yaws,
        landmark_meas,
        relative,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MwLiftOptions {
    /// Add the redundant rotation constraints.
    pub redundant: bool,
    /// Emit all six entries of `C C^T = I` instead of five (the sixth is
    /// linearly dependent on the primary rows).
    pub all_row_orthonormality: bool,
}

impl Default for MwLiftOptions {
    fn default() -> Self {
        Self {
            redundant: true,
            all_row_orthonormality: false,
        }
    }
}

fn block_labels(k: usize) -> Vec<String> {
    let mut v = Vec::with_capacity(12);
    for col in 0..3 {
        for row in 0..3 {
            v.push(format!("x{k}.C{row}{col}"));
        }
    }
    for a in ["tx", "ty", "tz"] {
        v.push(format!("x{k}.{a}"));
    }
    v
}

/// Index of `C[row, col]` within the local block vector.
#[inline]
fn ci(row: usize, col: usize) -> usize {
    1 + 3 * col + row
}

/// Bilinear terms of `(c_u x c_v)[r] - h c_w[r]`.
fn cross_row(u: usize, v: usize, w: usize, r: usize) -> Vec<(usize, usize, f64)> {
    let (a, b) = ((r + 1) % 3, (r + 2) % 3);
    vec![(ci(a, u), ci(b, v), 1.0), (ci(b, u), ci(a, v), -1.0), (0, ci(r, w), -1.0)]
}

/// Rotation constraints of one pose: `(primary, redundant)`.
pub fn rotation_constraints(block: usize, options: MwLiftOptions) -> (Vec<ConstraintFactor>, Vec<ConstraintFactor>) {
    let mk = |terms: Vec<(usize, usize, f64)>, kind| ConstraintFactor {
        block,
        matrix: bilinear(LOCAL_DIM, &terms),
        rhs: 0.0,
        kind,
    };
    let mut primary = Vec::with_capacity(9);
    // C^T C = I: column dot products.
    for a in 0..3 {
        for b in a..3 {
            let mut terms: Vec<_> = (0..3).map(|i| (ci(i, a), ci(i, b), 1.0)).collect();
            if a == b {
                terms.push((0, 0, -1.0));
            }
            primary.push(mk(terms, ConstraintKind::Primary));
        }
    }
    for r in 0..3 {
        primary.push(mk(cross_row(0, 1, 2, r), ConstraintKind::Primary));
    }

    let mut redundant = Vec::new();
    if options.redundant {
        // C C^T = I: row dot products. The (2, 2) entry is implied.
        for a in 0..3 {
            for b in a..3 {
                if a == 2 && b == 2 && !options.all_row_orthonormality {
                    continue;
                }
                let mut terms: Vec<_> = (0..3).map(|k| (ci(a, k), ci(b, k), 1.0)).collect();
                if a == b {
                    terms.push((0, 0, -1.0));
                }
                redundant.push(mk(terms, ConstraintKind::Redundant));
            }
        }
        for r in 0..3 {
            redundant.push(mk(cross_row(1, 2, 0, r), ConstraintKind::Redundant));
        }
        for r in 0..3 {
            redundant.push(mk(cross_row(2, 0, 1, r), ConstraintKind::Redundant));
        }
    }
    (primary, redundant)
}

/// Lifts with redundant constraints on.
pub fn lift_mw(instance: &MwInstance) -> Result<LiftedProblem> {
    lift_mw_with(instance, MwLiftOptions::default())
}

pub fn lift_mw_with(instance: &MwInstance, options: MwLiftOptions) -> Result<LiftedProblem> {
    let n = instance.n_poses();
    let blocks: Vec<VarBlock> = (0..n)
        .map(|k| VarBlock {
            index: k,
            state_dim: 12,
            lift_dim: 0,
            labels: block_labels(k),
        })
        .collect();

    let mut cost_factors = Vec::new();
    for (k, meas) in instance.landmark_meas.iter().enumerate() {
        if meas.is_empty() {
            continue;
        }
        let mut b = DMatrix::<f64>::zeros(3 * meas.len(), LOCAL_DIM);
        let mut w = DMatrix::<f64>::zeros(3 * meas.len(), 3 * meas.len());
        for (r, m) in meas.iter().enumerate() {
            let lm = instance.landmarks.get(m.landmark).ok_or_else(|| {
                Error::InvalidShape(format!("measurement references missing landmark {}", m.landmark))
            })?;
            // e = m~ - (C m + t)
            for a in 0..3 {
                b[(3 * r + a, 0)] = m.point[a];
                for col in 0..3 {
                    b[(3 * r + a, ci(a, col))] = -lm[col];
                }
                b[(3 * r + a, 10 + a)] = -1.0;
                for c in 0..3 {
                    w[(3 * r + a, 3 * r + c)] = m.weight[(a, c)];
                }
            }
        }
        cost_factors.push(CostFactor::from_residual(Scope::Absolute(k), &b, &w));
    }

    let wdiag = instance.relative_weight_diag();
    let mut relative_scopes = Vec::new();
    for rel in &instance.relative {
        // x_ij = [h, vecC_i, t_i, vecC_j, t_j]; e = vec(T_i - T~ T_j) (top 3x4).
        let (oi, oj) = (1, 13);
        let mut b = DMatrix::zeros(12, 25);
        for col in 0..3 {
            for a in 0..3 {
                b[(3 * col + a, oi + 3 * col + a)] = 1.0;
                for k in 0..3 {
                    b[(3 * col + a, oj + 3 * col + k)] = -rel.rotation[(a, k)];
                }
            }
        }
        for a in 0..3 {
            b[(9 + a, oi + 9 + a)] = 1.0;
            for k in 0..3 {
                b[(9 + a, oj + 9 + k)] = -rel.rotation[(a, k)];
            }
            b[(9 + a, 0)] = -rel.translation[a];
        }
        let w = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&wdiag));
        cost_factors.push(CostFactor::from_residual(Scope::Relative(rel.i, rel.j), &b, &w));
        relative_scopes.push((rel.i, rel.j));
    }

    let mut constraint_factors = Vec::new();
    for k in 0..n {
        let (primary, redundant) = rotation_constraints(k, options);
        constraint_factors.extend(primary);
        constraint_factors.extend(redundant);
        constraint_factors.push(ConstraintFactor::homogenization(k, LOCAL_DIM));
    }

    LiftedProblem::new(ProblemKind::Mw, blocks, cost_factors, constraint_factors, relative_scopes)
}

/// Direct evaluation of the NLS cost at poses `(C_i0, t)`.
pub fn nls_cost(instance: &MwInstance, poses: &[(Matrix3<f64>, Vector3<f64>)]) -> f64 {
    let mut cost = 0.0;
    for ((c, t), meas) in poses.iter().zip(&instance.landmark_meas) {
        for m in meas {
            let e = m.point - (c * instance.landmarks[m.landmark] + t);
            cost += (e.transpose() * m.weight * e)[(0, 0)];
        }
    }
    let wd = instance.relative_weight_diag();
    for rel in &instance.relative {
        let (ci_, ti) = &poses[rel.i];
        let (cj, tj) = &poses[rel.j];
        let er = ci_ - rel.rotation * cj;
        let et = ti - (rel.rotation * tj + rel.translation);
        cost += wd[0] * er.norm_squared() + wd[9] * et.norm_squared();
    }
    cost
}

pub fn poses_from_raw(raw: &[Vec<f64>]) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    raw.iter().map(|r| raw_to_pose(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{constraint_residuals, evaluate_cost};

    #[test]
    fn constraint_counts() {
        let inst = simulate_seeded(&MwConfig::new(2, 4, 0)).unwrap();
        let p = lift_mw(&inst).unwrap();
        let count = |kind| p.constraints_of(0).filter(|c| c.kind == kind).count();
        assert_eq!(count(ConstraintKind::Primary), 9);
        assert_eq!(count(ConstraintKind::Redundant), 11);
        assert_eq!(count(ConstraintKind::Homogenization), 1);
        let off = lift_mw_with(&inst, MwLiftOptions { redundant: false, ..Default::default() }).unwrap();
        assert_eq!(off.constraints_of(1).filter(|c| c.kind == ConstraintKind::Redundant).count(), 0);
        assert_eq!(off.cost_factors, p.cost_factors);
    }

    #[test]
    fn ground_truth_feasible() {
        let inst = simulate_seeded(&MwConfig::new(4, 5, 3)).unwrap();
        let p = lift_mw(&inst).unwrap();
        let x = p.lift(&inst.gt_raw()).unwrap();
        let worst = constraint_residuals(&p, &x).iter().fold(0.0f64, |a, r| a.max(r.abs()));
        assert!(worst < 1e-12, "{worst}");
        for c in &inst.gt_rotations {
            assert!((c.transpose() * c - Matrix3::identity()).amax() < 1e-12);
            assert!((c.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reflection_breaks_handedness() {
        let inst = simulate_seeded(&MwConfig::new(1, 3, 0)).unwrap();
        let p = lift_mw(&inst).unwrap();
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let x = p.lift(&[pose_to_raw(&refl, &Vector3::zeros())]).unwrap();
        let r = constraint_residuals(&p, &x);
        let kinds: Vec<_> = p.constraint_factors.iter().map(|c| c.kind).collect();
        // orthonormality rows (first six) hold
        assert!(r[..6].iter().all(|v| v.abs() < 1e-15));
        assert!(r[6..9].iter().any(|v| (v.abs() - 2.0).abs() < 1e-15));
        assert_eq!(kinds[6], ConstraintKind::Primary);
    }

    #[test]
    fn noiseless_measurements_exact() {
        let inst = simulate_seeded(&MwConfig::new(3, 4, 8).noiseless()).unwrap();
        for (k, meas) in inst.landmark_meas.iter().enumerate() {
            for m in meas {
                let p = inst.gt_rotations[k] * inst.landmarks[m.landmark] + inst.gt_translations[k];
                assert_eq!(m.point, p);
            }
        }
        for rel in &inst.relative {
            let ci_ = inst.gt_rotations[rel.i];
            let cj = inst.gt_rotations[rel.j];
            assert!((rel.rotation - ci_ * cj.transpose()).amax() < 1e-15);
            let t = inst.gt_translations[rel.i] - ci_ * cj.transpose() * inst.gt_translations[rel.j];
            assert!((rel.translation - t).amax() < 1e-15);
        }
        let p = lift_mw(&inst).unwrap();
        let x = p.lift(&inst.gt_raw()).unwrap();
        assert!(evaluate_cost(&p, &x).abs() < 1e-9);
    }

    #[test]
    fn poses_in_box_and_looking_down() {
        let inst = simulate_seeded(&MwConfig::new(30, 3, 5)).unwrap();
        for (r, c) in inst.positions.iter().zip(&inst.gt_rotations) {
            assert!((2.9..=3.1).contains(&r.z));
            assert!(r.x.abs() <= 0.1 && r.y.abs() <= 0.1);
            // camera z axis expressed in world points down
            assert!((c.row(2) - Vector3::new(0.0, 0.0, -1.0).transpose()).amax() < 1e-15);
        }
    }

    #[test]
    fn stereo_weight_on_axis() {
        let cfg = MwConfig::default();
        let w = stereo_weight(&Vector3::new(0.0, 0.0, 3.0), &cfg).unwrap();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert_eq!(w[(i, j)], 0.0);
        }
        assert!((w[(2, 2)] - w[(0, 0)]).abs() > 1.0);
        let w2 = stereo_weight(&Vector3::new(0.0, 0.0, 6.0), &cfg).unwrap();
        assert!((w2[(2, 2)] / w[(2, 2)] - 1.0 / 16.0).abs() < 1e-9);
        assert!(stereo_weight(&Vector3::new(0.0, 0.0, 0.0), &cfg).is_err());
        assert!(stereo_weight(&Vector3::new(0.0, 0.0, -1.0), &cfg).is_err());
    }

    #[test]
    fn stereo_jacobian_finite_differences() {
        let cfg = MwConfig::default();
        let p = Vector3::new(0.3, -0.2, 2.7);
        let j = stereo_jacobian(&p, &cfg);
        let h = 1e-6;
        for k in 0..3 {
            let mut dp = Vector3::zeros();
            dp[k] = h;
            let fd = (stereo_project(&(p + dp), &cfg) - stereo_project(&(p - dp), &cfg)) / (2.0 * h);
            for r in 0..3 {
                let scale = j[(r, k)].abs().max(1e-3);
                assert!((fd[r] - j[(r, k)]).abs() / scale < 1e-6, "({r},{k})");
            }
        }
    }
}
