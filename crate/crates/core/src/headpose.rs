//! Head-pose recovery from 2-D facial landmarks.
//!
//! Given a rigid 3-D face model (named landmark points in a head-local
//! frame), the pixel positions of those landmarks in one camera image, and
//! the camera intrinsics, [`solve_pnp`] recovers the rigid transform from
//! the head frame to the camera frame by minimizing reprojection error with
//! Levenberg–Marquardt over a 6-parameter pose (axis-angle rotation plus
//! translation).
//!
//! The Jacobian of the reprojection residual is analytic; the rotation
//! derivative uses the compact exponential-coordinates formula
//! `dR/dw_i = (w_i [w]x + [w x ((I - R) e_i)]x) / |w|^2 * R`, falling back
//! to the small-angle limit `d(Rv)/dw = -[v]x` near zero rotation. Tests
//! validate it against central finite differences.

use crate::geometry::{CameraIntrinsics, GeometryError, Pose};
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Errors from head-pose estimation.
#[derive(Debug, Error)]
pub enum HeadPoseError {
    /// Too few usable correspondences or a (near-)coplanar model.
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    /// The optimizer hit its iteration cap while the reprojection error was
    /// still above the failure threshold.
    #[error("no convergence after {iterations} iterations (rmse {rmse:.3} px)")]
    NoConvergence { iterations: usize, rmse: f64 },
    /// Underlying geometry failure (projection of the final pose).
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    /// A model or landmark file could not be parsed.
    #[error("invalid model data: {0}")]
    InvalidData(String),
}

/// Rigid 3-D face model: named points in the head-local frame (meters).
///
/// The head-local frame matches the camera convention (x right, y down,
/// z backward through the skull), so the face looks along local `(0,0,-1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaceModel3D {
    points: BTreeMap<String, [f64; 3]>,
}

/// Minimum number of correspondences accepted by the solver.
pub const MIN_CORRESPONDENCES: usize = 6;
/// Singular-value floor below which model points count as coplanar.
pub const COPLANARITY_TOL: f64 = 1e-6;

impl FaceModel3D {
    /// Builds a model, checking that it has at least
    /// [`MIN_CORRESPONDENCES`] points and is not coplanar.
    pub fn new(points: BTreeMap<String, [f64; 3]>) -> Result<Self, HeadPoseError> {
        let model = Self { points };
        model.check_nondegenerate()?;
        Ok(model)
    }

    /// Parses the JSON form: an object mapping point names to `[x, y, z]`.
    pub fn from_json(json: &str) -> Result<Self, HeadPoseError> {
        let points: BTreeMap<String, [f64; 3]> = serde_json::from_str(json)
            .map_err(|e| HeadPoseError::InvalidData(format!("face model: {e}")))?;
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<Vector3<f64>> {
        self.points.get(name).map(|p| Vector3::from(*p))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Vector3<f64>)> {
        self.points
            .iter()
            .map(|(name, p)| (name.as_str(), Vector3::from(*p)))
    }

    fn check_nondegenerate(&self) -> Result<(), HeadPoseError> {
        if self.points.len() < MIN_CORRESPONDENCES {
            return Err(HeadPoseError::DegenerateConfiguration(format!(
                "need at least {MIN_CORRESPONDENCES} model points, got {}",
                self.points.len()
            )));
        }
        // Coplanarity check: the smallest singular value of the centered
        // point cloud must clear the tolerance.
        let n = self.points.len();
        let centroid = self
            .points
            .values()
            .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
            / n as f64;
        let mut centered = DMatrix::zeros(n, 3);
        for (i, p) in self.points.values().enumerate() {
            let d = Vector3::from(*p) - centroid;
            centered[(i, 0)] = d.x;
            centered[(i, 1)] = d.y;
            centered[(i, 2)] = d.z;
        }
        let svd = centered.svd(false, false);
        let smallest = svd
            .singular_values
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if smallest < COPLANARITY_TOL {
            return Err(HeadPoseError::DegenerateConfiguration(format!(
                "model points are coplanar within {COPLANARITY_TOL} (sigma_min = {smallest:.2e})"
            )));
        }
        Ok(())
    }
}

/// Detected 2-D landmark positions, named to match a [`FaceModel3D`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LandmarkSet2D {
    points: BTreeMap<String, [f64; 2]>,
}

impl LandmarkSet2D {
    pub fn new(points: BTreeMap<String, [f64; 2]>) -> Self {
        Self { points }
    }

    pub fn insert(&mut self, name: &str, px: Vector2<f64>) {
        self.points.insert(name.to_string(), [px.x, px.y]);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<Vector2<f64>> {
        self.points.get(name).map(|p| Vector2::from(*p))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Vector2<f64>)> {
        self.points
            .iter()
            .map(|(name, p)| (name.as_str(), Vector2::from(*p)))
    }

    /// True when every landmark lies inside the image bounds.
    pub fn all_in_bounds(&self, intr: &CameraIntrinsics) -> bool {
        self.points
            .values()
            .all(|p| intr.contains(&Vector2::from(*p)))
    }
}

/// Result of a head-pose solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseEstimate {
    /// Head-to-camera transform.
    pub pose: Pose,
    /// Root-mean-square reprojection error over points, pixels.
    pub reprojection_rmse: f64,
    /// Outer Levenberg–Marquardt iterations performed.
    pub iterations: usize,
    /// Whether a convergence criterion was met within the iteration cap.
    pub converged: bool,
}

/// Tunable solver parameters; the defaults follow the standard Marquardt
/// schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iters: usize,
    /// Initial damping factor.
    pub lambda_init: f64,
    /// Convergence: accepted step norm below this value.
    pub step_tol: f64,
    /// Convergence: gradient infinity-norm below this value.
    pub grad_tol: f64,
    /// Reprojection RMSE (pixels) above which hitting the iteration cap is
    /// reported as a failure rather than a non-converged estimate.
    pub rmse_fail_threshold: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            lambda_init: 1e-3,
            step_tol: 1e-10,
            grad_tol: 1e-8,
            rmse_fail_threshold: 5.0,
        }
    }
}

/// Rotates `v` by the axis-angle vector `w` and returns both the rotated
/// vector and the 3x3 Jacobian `d(R(w) v) / dw`.
pub fn rotate_with_jacobian(w: &Vector3<f64>, v: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let angle = w.norm();
    let rot = Rotation3::from_scaled_axis(*w);
    let rv = rot * v;
    if angle < 1e-8 {
        // Small-angle limit: R ~ I + [w]x, so d(Rv)/dw -> -[v]x.
        return (rv, -skew(v));
    }
    let r = rot.matrix();
    let mut jac = Matrix3::zeros();
    let eye = Matrix3::identity();
    for i in 0..3 {
        let e_i = eye.column(i).into_owned();
        let term = w.cross(&((eye - r) * e_i));
        let dr_i = (w[i] * skew(w) + skew(&term)) / (angle * angle) * r;
        jac.set_column(i, &(dr_i * v));
    }
    (rv, jac)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Paired 3-D/2-D correspondences matched by landmark name.
fn pair_correspondences(
    model: &FaceModel3D,
    obs: &LandmarkSet2D,
) -> Result<Vec<(Vector3<f64>, Vector2<f64>)>, HeadPoseError> {
    let pairs: Vec<_> = model
        .iter()
        .filter_map(|(name, p3)| obs.get(name).map(|p2| (p3, p2)))
        .collect();
    if pairs.len() < MIN_CORRESPONDENCES {
        return Err(HeadPoseError::DegenerateConfiguration(format!(
            "need at least {MIN_CORRESPONDENCES} matched correspondences, got {}",
            pairs.len()
        )));
    }
    Ok(pairs)
}

/// Reprojection residual (2 per correspondence) and its `2n x 6` Jacobian
/// with respect to `[w, t]`. Points at or behind the camera plane poison the
/// residual with infinities so the trial step is rejected.
fn residual_and_jacobian(
    params: &Vector6<f64>,
    pairs: &[(Vector3<f64>, Vector2<f64>)],
    intr: &CameraIntrinsics,
    want_jacobian: bool,
) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let w = Vector3::new(params[0], params[1], params[2]);
    let t = Vector3::new(params[3], params[4], params[5]);
    let mut r = DVector::zeros(2 * pairs.len());
    let mut jac = want_jacobian.then(|| DMatrix::zeros(2 * pairs.len(), 6));

    for (k, (p3, p2)) in pairs.iter().enumerate() {
        let (rotated, drot_dw) = rotate_with_jacobian(&w, p3);
        let pc = rotated + t;
        if pc.z <= crate::geometry::MIN_PROJECTION_DEPTH {
            r[2 * k] = f64::INFINITY;
            r[2 * k + 1] = f64::INFINITY;
            continue;
        }
        let inv_z = 1.0 / pc.z;
        r[2 * k] = intr.fx * pc.x * inv_z + intr.cx - p2.x;
        r[2 * k + 1] = intr.fy * pc.y * inv_z + intr.cy - p2.y;

        if let Some(jac) = jac.as_mut() {
            // d(pixel)/d(camera point)
            let du = Vector3::new(intr.fx * inv_z, 0.0, -intr.fx * pc.x * inv_z * inv_z);
            let dv = Vector3::new(0.0, intr.fy * inv_z, -intr.fy * pc.y * inv_z * inv_z);
            // d(camera point)/dw = drot_dw, d(camera point)/dt = I
            for c in 0..3 {
                let dpc_dwc = drot_dw.column(c);
                jac[(2 * k, c)] = du.dot(&dpc_dwc.into_owned());
                jac[(2 * k + 1, c)] = dv.dot(&dpc_dwc.into_owned());
                jac[(2 * k, 3 + c)] = du[c];
                jac[(2 * k + 1, 3 + c)] = dv[c];
            }
        }
    }
    (r, jac)
}

fn rmse_of(residual: &DVector<f64>) -> f64 {
    let n_points = residual.len() / 2;
    (residual.norm_squared() / n_points as f64).sqrt()
}

/// Recovers the head-to-camera pose from named 2-D/3-D correspondences.
///
/// `init` seeds the optimizer; when absent the solve starts from identity
/// rotation one meter in front of the camera, which covers the full working
/// range of a user standing before the panel.
pub fn solve_pnp(
    model: &FaceModel3D,
    obs: &LandmarkSet2D,
    intr: &CameraIntrinsics,
    init: Option<&Pose>,
) -> Result<PoseEstimate, HeadPoseError> {
    solve_pnp_with_options(model, obs, intr, init, &SolveOptions::default())
}

/// [`solve_pnp`] with explicit solver options.
pub fn solve_pnp_with_options(
    model: &FaceModel3D,
    obs: &LandmarkSet2D,
    intr: &CameraIntrinsics,
    init: Option<&Pose>,
    opts: &SolveOptions,
) -> Result<PoseEstimate, HeadPoseError> {
    model.check_nondegenerate()?;
    let pairs = pair_correspondences(model, obs)?;

    let default_init = Pose::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
    let start = init.unwrap_or(&default_init);
    let mut params = Vector6::new(
        start.rotation[0],
        start.rotation[1],
        start.rotation[2],
        start.translation[0],
        start.translation[1],
        start.translation[2],
    );

    let (mut residual, mut jac_opt) = residual_and_jacobian(&params, &pairs, intr, true);
    let mut cost = 0.5 * residual.norm_squared();
    let mut lambda = opts.lambda_init;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        let jac = jac_opt.as_ref().expect("jacobian computed with residual");
        let jtj = jac.transpose() * jac;
        let jtr = jac.transpose() * &residual;

        if jtr.amax() < opts.grad_tol {
            converged = true;
            break;
        }

        // Marquardt damping on the diagonal, floored to keep the normal
        // equations well posed even for flat directions.
        let mut accepted = false;
        for _ in 0..24 {
            let mut damped = jtj.clone();
            for d in 0..6 {
                let diag = jtj[(d, d)].max(1e-12);
                damped[(d, d)] = jtj[(d, d)] + lambda * diag;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let step_norm = step.norm();
            let trial = params + Vector6::from_iterator(step.iter().copied());
            let (trial_res, trial_jac) = residual_and_jacobian(&trial, &pairs, intr, true);
            let trial_cost = 0.5 * trial_res.norm_squared();
            if trial_cost.is_finite() && trial_cost < cost {
                params = trial;
                residual = trial_res;
                jac_opt = trial_jac;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if step_norm < opts.step_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e15 {
                break;
            }
        }
        if converged || !accepted {
            break;
        }
    }

    let rmse = rmse_of(&residual);
    if !converged && rmse > opts.rmse_fail_threshold {
        return Err(HeadPoseError::NoConvergence { iterations, rmse });
    }

    let pose = Pose::new(
        Vector3::new(params[0], params[1], params[2]),
        Vector3::new(params[3], params[4], params[5]),
    )
    .canonicalized();
    Ok(PoseEstimate {
        pose,
        reprojection_rmse: rmse,
        iterations,
        converged,
    })
}

/// Direction the head is facing, in the camera frame: the head-local
/// `(0, 0, -1)` axis rotated by the pose. Unit length by construction.
pub fn forward_axis(pose: &Pose) -> Vector3<f64> {
    pose.rotation_matrix() * Vector3::new(0.0, 0.0, -1.0)
}

/// A canonical rigid face model used by the synthetic generator and shipped
/// as a data file: eight well-spread landmarks, head-local frame centered
/// between the eyes, meters.
pub fn canonical_face_model() -> FaceModel3D {
    let mut points = BTreeMap::new();
    let mut add = |name: &str, p: [f64; 3]| {
        points.insert(name.to_string(), p);
    };
    add("left_eye_outer", [-0.045, 0.0, 0.0]);
    add("left_eye_inner", [-0.0185, 0.0, 0.01]);
    add("right_eye_inner", [0.0185, 0.0, 0.01]);
    add("right_eye_outer", [0.045, 0.0, 0.0]);
    add("nose_tip", [0.0, 0.034, -0.026]);
    add("mouth_left", [-0.026, 0.0745, 0.0]);
    add("mouth_right", [0.026, 0.0745, 0.0]);
    add("chin", [0.0, 0.117, 0.005]);
    FaceModel3D::new(points).expect("canonical face model is non-degenerate")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, CameraIntrinsics, Pose};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    /// Projects the canonical model under a ground-truth pose into an exact
    /// landmark set.
    fn project_model(model: &FaceModel3D, pose: &Pose, intr: &CameraIntrinsics) -> LandmarkSet2D {
        let mut obs = LandmarkSet2D::default();
        for (name, p3) in model.iter() {
            let px = project(intr, pose, &p3).expect("model point in front of camera");
            obs.insert(name, px);
        }
        obs
    }

    fn random_pose(rng: &mut impl Rng, max_angle: f64) -> Pose {
        let axis = loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 {
                break v.normalize();
            }
        };
        let angle = rng.gen_range(0.0..max_angle);
        let t = Vector3::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(0.5..2.0),
        );
        Pose::new(axis * angle, t)
    }

    fn rotation_error(a: &Pose, b: &Pose) -> f64 {
        let rel = a.rotation_matrix().inverse() * b.rotation_matrix();
        let trace = rel.matrix().trace();
        ((trace - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn canonical_model_is_nondegenerate() {
        let model = canonical_face_model();
        assert_eq!(model.len(), 8);
    }

    #[test]
    fn coplanar_model_is_rejected() {
        let mut points = BTreeMap::new();
        for i in 0..8 {
            let a = f64::from(i) * 0.7;
            points.insert(format!("p{i}"), [a.cos() * 0.05, a.sin() * 0.05, 0.0]);
        }
        let err = FaceModel3D::new(points).unwrap_err();
        assert!(matches!(err, HeadPoseError::DegenerateConfiguration(_)));
    }

    #[test]
    fn too_few_correspondences_is_degenerate() {
        let model = canonical_face_model();
        let truth = Pose::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
        let full = project_model(&model, &truth, &intr());
        let mut five = LandmarkSet2D::default();
        for (name, px) in full.iter().take(5) {
            five.insert(name, px);
        }
        let err = solve_pnp(&model, &five, &intr(), None).unwrap_err();
        assert!(matches!(err, HeadPoseError::DegenerateConfiguration(_)));
    }

    #[test]
    fn exact_pose_is_a_fixed_point() {
        let model = canonical_face_model();
        let truth = Pose::new(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.1, -0.05, 1.2));
        let obs = project_model(&model, &truth, &intr());
        let est = solve_pnp(&model, &obs, &intr(), Some(&truth)).unwrap();
        assert!(est.converged);
        assert!(est.reprojection_rmse < 1e-9, "rmse {}", est.reprojection_rmse);
        assert!(rotation_error(&truth, &est.pose) < 1e-9);
    }

    #[test]
    fn recovers_synthetic_poses() {
        let model = canonical_face_model();
        let camera = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let truth = random_pose(&mut rng, 40f64.to_radians());
            let obs = project_model(&model, &truth, &camera);
            let est = solve_pnp(&model, &obs, &camera, None).unwrap();
            let rot_err = rotation_error(&truth, &est.pose);
            let t_err = (truth.translation_vec() - est.pose.translation_vec()).norm();
            assert!(
                rot_err < 1e-3 && t_err < 1e-3,
                "trial {trial}: rot_err {rot_err:.2e}, t_err {t_err:.2e}"
            );
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..200 {
            let w = Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let (_, jac) = rotate_with_jacobian(&w, &v);
            for c in 0..3 {
                let mut wp = w;
                let mut wm = w;
                wp[c] += h;
                wm[c] -= h;
                let num = (Rotation3::from_scaled_axis(wp) * v
                    - Rotation3::from_scaled_axis(wm) * v)
                    / (2.0 * h);
                for r in 0..3 {
                    assert!(
                        (jac[(r, c)] - num[r]).abs() < 1e-6,
                        "jacobian mismatch at ({r},{c}): {} vs {}",
                        jac[(r, c)],
                        num[r]
                    );
                }
            }
        }
    }

    #[test]
    fn residual_jacobian_matches_finite_differences() {
        let model = canonical_face_model();
        let camera = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..20 {
            let pose = random_pose(&mut rng, 0.7);
            let obs = project_model(&model, &pose, &camera);
            let pairs = pair_correspondences(&model, &obs).unwrap();
            // Probe at a perturbed pose so residuals are non-zero.
            let mut params = Vector6::new(
                pose.rotation[0] + 0.02,
                pose.rotation[1] - 0.03,
                pose.rotation[2] + 0.01,
                pose.translation[0] + 0.01,
                pose.translation[1] - 0.01,
                pose.translation[2] + 0.02,
            );
            let (_, jac) = residual_and_jacobian(&params, &pairs, &camera, true);
            let jac = jac.unwrap();
            for c in 0..6 {
                let orig = params[c];
                params[c] = orig + h;
                let (rp, _) = residual_and_jacobian(&params, &pairs, &camera, false);
                params[c] = orig - h;
                let (rm, _) = residual_and_jacobian(&params, &pairs, &camera, false);
                params[c] = orig;
                for row in 0..rp.len() {
                    let num = (rp[row] - rm[row]) / (2.0 * h);
                    let ana = jac[(row, c)];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1.0);
                    assert!(
                        rel < 1e-5,
                        "residual jacobian mismatch at ({row},{c}): {ana} vs {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn noisy_landmarks_still_give_accurate_rotations() {
        use rand_distr::{Distribution, Normal};
        let model = canonical_face_model();
        let camera = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut errors: Vec<f64> = Vec::new();
        for _ in 0..1000 {
            let truth = random_pose(&mut rng, 40f64.to_radians());
            let mut obs = LandmarkSet2D::default();
            for (name, p3) in model.iter() {
                let px = project(&camera, &truth, &p3).unwrap();
                obs.insert(
                    name,
                    Vector2::new(px.x + noise.sample(&mut rng), px.y + noise.sample(&mut rng)),
                );
            }
            let est = solve_pnp(&model, &obs, &camera, None).unwrap();
            errors.push(rotation_error(&truth, &est.pose).to_degrees());
        }
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = errors[errors.len() / 2];
        println!("median rotation error at 0.5 px landmark noise: {median:.3} deg");
        assert!(median < 5.0, "median rotation error {median:.3} deg");
    }

    #[test]
    fn forward_axis_known_directions() {
        let fwd = forward_axis(&Pose::identity());
        assert_relative_eq!(fwd.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(fwd.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(fwd.z, -1.0, epsilon = 1e-12);

        let yaw = 30f64.to_radians();
        let pose = Pose::new(Vector3::new(0.0, yaw, 0.0), Vector3::zeros());
        let fwd = forward_axis(&pose);
        assert_relative_eq!(fwd.x, -yaw.sin(), epsilon = 1e-12);
        assert_relative_eq!(fwd.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(fwd.z, -yaw.cos(), epsilon = 1e-12);
        assert_relative_eq!(fwd.norm(), 1.0, epsilon = 1e-12);

        // Opposite rotations mirror the axis.
        let neg = forward_axis(&Pose::new(Vector3::new(0.0, -yaw, 0.0), Vector3::zeros()));
        assert_relative_eq!(fwd.x, -neg.x, epsilon = 1e-12);
        assert_relative_eq!(fwd.z, neg.z, epsilon = 1e-12);
    }

    #[test]
    fn model_json_round_trip() {
        let model = canonical_face_model();
        let json = serde_json::to_string(&model).unwrap();
        let back = FaceModel3D::from_json(&json).unwrap();
        assert_eq!(model.len(), back.len());
        for (name, p) in model.iter() {
            assert_eq!(back.get(name).unwrap(), p);
        }
    }
}
