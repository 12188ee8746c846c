//! Deterministic synthetic gaze-session generator.
//!
//! Scenarios describe a user (height, standing distance and lateral offset
//! from the camera, worn accessories, sideways head turn); the generator
//! plays out dwells — one per target cell — in which the user fixates points
//! inside the target cell for a few consecutive frames while the head holds
//! a fixed orientation. Every quantity a real detector would measure (eye
//! pixels, facial landmarks, per-eye gaze directions, depth) is derived
//! from exact scene geometry and then corrupted by the configured noise
//! model, so a zero-noise run is a geometric oracle: each emitted gaze ray
//! intersects the panel inside its target cell by construction.
//!
//! Output is one JSON object per sample (JSON Lines), format tag
//! `ggm-synth-v1`, and is byte-identical for identical seeds.

use crate::geometry::{
    intersect_panel, project, CameraExtrinsics, CameraIntrinsics, GeometryError, GridCell,
    PanelConfig, PanelPoint, Pose,
};
use crate::headpose::{FaceModel3D, LandmarkSet2D};
use crate::nets::EyeFeature;
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use thiserror::Error;

/// Errors from the synthetic generator.
#[derive(Debug, Error)]
pub enum SynthError {
    /// After repeated retries the perturbed setup still produced a ray that
    /// misses the panel plane or landmarks outside the image.
    #[error("cell {cell} unreachable for user {user}: {reason}")]
    UnreachableCell {
        cell: u32,
        user: String,
        reason: String,
    },
    /// A scenario or noise parameter is out of range.
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    /// Underlying geometry failure while staging the scene.
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    /// Dataset (de)serialization failure.
    #[error("dataset io: {0}")]
    DatasetIo(String),
}

/// Format tag written into every serialized sample.
pub const DATASET_FORMAT: &str = "ggm-synth-v1";
/// Vertical drop from the top of the head to the eyes, meters.
pub const DEFAULT_EYE_DROP: f64 = 0.12;
/// Seconds of fixation per dwell.
pub const DWELL_SECONDS: f64 = 5.0;
/// How many times a dwell is re-rolled before giving up.
const MAX_REGEN_TRIES: usize = 100;

/// Things a user can wear that degrade gaze measurement quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accessory {
    Glasses,
    Hat,
    Mask,
}

/// One recording condition for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Stable user identifier.
    pub user_id: String,
    /// User height, meters.
    pub height: f64,
    /// Distance from the panel plane, meters.
    pub distance: f64,
    /// Lateral offset from the camera axis, meters (positive = to the
    /// camera's right looking outward).
    pub lateral: f64,
    /// Accessories worn during the session.
    pub accessories: BTreeSet<Accessory>,
    /// Sideways head turn while gazing, degrees. The turn direction
    /// alternates per dwell.
    pub side_gaze_deg: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.distance > 0.0) {
            return Err(SynthError::InvalidScenario(format!(
                "distance must be positive, got {}",
                self.distance
            )));
        }
        if !(self.height > 0.5 && self.height < 2.5) {
            return Err(SynthError::InvalidScenario(format!(
                "height {} m is outside the plausible range",
                self.height
            )));
        }
        if !(0.0..=60.0).contains(&self.side_gaze_deg) {
            return Err(SynthError::InvalidScenario(format!(
                "side gaze {} deg out of range [0, 60]",
                self.side_gaze_deg
            )));
        }
        Ok(())
    }
}

/// Noise applied on top of the exact scene geometry.
///
/// `gaze_sigma` is the per-frame angular standard deviation (radians) of
/// each eye's measured gaze direction; accessories multiply it by
/// `accessory_penalty` and targets in the bottom two grid rows multiply it
/// by `downward_penalty` (steep downward gaze is harder to measure).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub gaze_sigma: f64,
    /// Landmark and eye-pixel noise, pixels.
    pub landmark_sigma: f64,
    /// Depth measurement noise, meters.
    pub depth_sigma: f64,
    /// Multiplier on `gaze_sigma` when any accessory is worn (>= 1).
    pub accessory_penalty: f64,
    /// Multiplier on `gaze_sigma` for targets in the bottom two rows (>= 1).
    pub downward_penalty: f64,
}

impl NoiseModel {
    /// No noise at all: the generator becomes a geometric oracle.
    pub fn noiseless() -> Self {
        Self {
            gaze_sigma: 0.0,
            landmark_sigma: 0.0,
            depth_sigma: 0.0,
            accessory_penalty: 1.0,
            downward_penalty: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.gaze_sigma < 0.0 || self.landmark_sigma < 0.0 || self.depth_sigma < 0.0 {
            return Err(SynthError::InvalidScenario(
                "noise sigmas must be non-negative".into(),
            ));
        }
        if self.accessory_penalty < 1.0 || self.downward_penalty < 1.0 {
            return Err(SynthError::InvalidScenario(
                "noise penalties must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// The same model with every sigma multiplied by `factor` (penalties
    /// unchanged); used for accuracy-vs-noise sweeps.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            gaze_sigma: self.gaze_sigma * factor,
            landmark_sigma: self.landmark_sigma * factor,
            depth_sigma: self.depth_sigma * factor,
            accessory_penalty: self.accessory_penalty,
            downward_penalty: self.downward_penalty,
        }
    }

    /// Effective angular sigma for a scenario/cell combination.
    pub fn effective_gaze_sigma(
        &self,
        spec: &ScenarioSpec,
        cell: GridCell,
        panel: &PanelConfig,
    ) -> f64 {
        let mut sigma = self.gaze_sigma;
        if !spec.accessories.is_empty() {
            sigma *= self.accessory_penalty;
        }
        if cell.is_bottom_two_rows(panel) {
            sigma *= self.downward_penalty;
        }
        sigma
    }
}

/// Static scene description shared by all scenarios of a run.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub panel: PanelConfig,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub face_model: FaceModel3D,
    /// Vertical drop from body height to eye height, meters.
    pub eye_drop: f64,
}

impl SceneContext {
    pub fn with_defaults(face_model: FaceModel3D) -> Self {
        let panel = PanelConfig::default();
        let extrinsics = CameraExtrinsics::centered_on_panel(&panel);
        Self {
            panel,
            intrinsics: CameraIntrinsics::default(),
            extrinsics,
            face_model,
            eye_drop: DEFAULT_EYE_DROP,
        }
    }
}

/// One synthetic frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GazeSample {
    /// Format tag, always `ggm-synth-v1`.
    pub format: String,
    pub user_id: String,
    pub scenario: ScenarioSpec,
    /// 1-based index of the gazed grid cell.
    pub target_cell: GridCell,
    /// Noisy 2-D landmark observations for head-pose recovery.
    pub landmarks: LandmarkSet2D,
    pub left: EyeFeature,
    pub right: EyeFeature,
    /// Measured eye-to-camera distance, meters.
    pub depth: f64,
    /// Ground-truth head pose in the camera frame.
    pub true_pose: Pose,
    /// Ground-truth fixated point on the panel.
    pub true_panel_point: PanelPoint,
    /// Seconds since the start of the session; frames of one dwell share a
    /// [`DWELL_SECONDS`]-wide window.
    pub timestamp: f64,
}

impl GazeSample {
    /// Dwell this frame belongs to (frames of a dwell share the index).
    pub fn dwell_index(&self) -> u64 {
        (self.timestamp / DWELL_SECONDS).floor() as u64
    }
}

/// Which cells each scenario visits.
#[derive(Debug, Clone)]
pub enum CellSchedule {
    /// Every cell of the grid, in index order, `repeats` dwells each.
    Exhaustive { repeats: u32 },
    /// `count` cells drawn uniformly (with replacement), `repeats` dwells
    /// each.
    Sampled { count: u32, repeats: u32 },
}

/// Generates all samples for the given scenarios.
///
/// Per scenario, the schedule decides the dwelled cells; each dwell emits
/// `frames_per_dwell` consecutive frames that share the target cell while
/// the fixated point inside the cell is re-drawn every frame (natural
/// fixation jitter across the gazed area). Identical inputs and seed yield
/// byte-identical output.
pub fn generate(
    specs: &[ScenarioSpec],
    schedule: &CellSchedule,
    frames_per_dwell: u32,
    noise: &NoiseModel,
    seed: u64,
    ctx: &SceneContext,
) -> Result<Vec<GazeSample>, SynthError> {
    noise.validate()?;
    if frames_per_dwell == 0 {
        return Err(SynthError::InvalidScenario(
            "frames_per_dwell must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut dwell_counter: u64 = 0;

    for spec in specs {
        spec.validate()?;
        let cells: Vec<GridCell> = match schedule {
            CellSchedule::Exhaustive { repeats } => (0..*repeats)
                .flat_map(|_| (1..=ctx.panel.cell_count()).map(|i| GridCell(i)))
                .collect(),
            CellSchedule::Sampled { count, repeats } => {
                let mut v = Vec::with_capacity((count * repeats) as usize);
                for _ in 0..*repeats {
                    for _ in 0..*count {
                        v.push(GridCell(rng.gen_range(1..=ctx.panel.cell_count())));
                    }
                }
                v
            }
        };

        for cell in cells {
            let dwell = generate_dwell(
                spec,
                cell,
                frames_per_dwell,
                noise,
                ctx,
                dwell_counter,
                &mut rng,
            )?;
            samples.extend(dwell);
            dwell_counter += 1;
        }
    }
    Ok(samples)
}

/// World-frame eye midpoint for a scenario.
fn eye_midpoint_world(spec: &ScenarioSpec, ctx: &SceneContext) -> Vector3<f64> {
    let eye_height = spec.height - ctx.eye_drop;
    Vector3::new(
        ctx.extrinsics.translation[0] + spec.lateral,
        ctx.panel.v_of_height(eye_height),
        spec.distance,
    )
}

/// Orthonormal head orientation (world frame) whose forward axis is `fwd`.
/// "Down" on the face stays aligned with world down.
fn head_rotation_world(fwd: &Vector3<f64>) -> Rotation3<f64> {
    let z = -fwd; // head-local +z points out the back of the head
    let down = Vector3::new(0.0, 1.0, 0.0);
    let y = (down - z * down.dot(&z)).normalize();
    let x = y.cross(&z);
    Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[x, y, z]))
}

/// Perturbs a unit direction by a Gaussian angle in the two tangent
/// directions.
fn perturb_direction(dir: &Vector3<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    if sigma == 0.0 {
        return *dir;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated non-negative");
    // Build an orthonormal tangent basis around dir.
    let helper = if dir.x.abs() < 0.9 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    let t1 = dir.cross(&helper).normalize();
    let t2 = dir.cross(&t1);
    let (a, b) = (normal.sample(rng), normal.sample(rng));
    (dir + t1 * a + t2 * b).normalize()
}

/// Emits the frames of one dwell. The whole dwell is retried from scratch
/// when any frame's measured ray misses the panel plane or its landmarks
/// fall outside the image.
fn generate_dwell(
    spec: &ScenarioSpec,
    cell: GridCell,
    frames_per_dwell: u32,
    noise: &NoiseModel,
    ctx: &SceneContext,
    dwell_index: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GazeSample>, SynthError> {
    let eye_mid = eye_midpoint_world(spec, ctx);
    let sigma = noise.effective_gaze_sigma(spec, cell, &ctx.panel);
    // Fixation points are confined to the central third of the cell: a
    // user aiming at a cell concentrates near its middle, and any point
    // average over such fixations stays within half a cell of the center,
    // so a perfect predictor always scores the cell as correct.
    let (u0, v0, u1, v1) = cell.rect(&ctx.panel);
    let (fu0, fu1) = (u0 + (u1 - u0) / 3.0, u1 - (u1 - u0) / 3.0);
    let (fv0, fv1) = (v0 + (v1 - v0) / 3.0, v1 - (v1 - v0) / 3.0);
    let landmark_noise = Normal::new(0.0, noise.landmark_sigma.max(f64::MIN_POSITIVE))
        .expect("landmark sigma validated");
    let depth_noise =
        Normal::new(0.0, noise.depth_sigma.max(f64::MIN_POSITIVE)).expect("depth sigma validated");

    // The head faces the cell center, turned sideways by the scenario's
    // side-gaze angle; the turn direction alternates per dwell. The head
    // orientation then stays fixed for the whole dwell.
    let cell_center = cell.center(&ctx.panel);
    let head_target = Vector3::new(cell_center.u, cell_center.v, 0.0);
    let side_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let yaw = side_sign * spec.side_gaze_deg.to_radians();
    // World up is -y, so a positive turn is a rotation about -y.
    let turn = Rotation3::from_scaled_axis(Vector3::new(0.0, -yaw, 0.0));
    let head_fwd_world = turn * (head_target - eye_mid).normalize();
    let head_rot_world = head_rotation_world(&head_fwd_world);

    // Head pose in the camera frame (the ground truth a solver recovers).
    let cam_rot = ctx.extrinsics.rotation_matrix();
    let head_rot_cam = cam_rot.inverse() * head_rot_world;
    let head_t_cam = ctx.extrinsics.point_to_camera(&eye_mid);
    let true_pose = Pose::new(head_rot_cam.scaled_axis(), head_t_cam);

    // Eye positions in the world frame: the face model's eye landmarks
    // moved by the head pose.
    let eye_world = |name: &str| -> Result<Vector3<f64>, SynthError> {
        let inner = ctx.face_model.get(&format!("{name}_eye_inner")).ok_or_else(|| {
            SynthError::InvalidScenario(format!("face model lacks {name}_eye_inner"))
        })?;
        let outer = ctx.face_model.get(&format!("{name}_eye_outer")).ok_or_else(|| {
            SynthError::InvalidScenario(format!("face model lacks {name}_eye_outer"))
        })?;
        let center_local = (inner + outer) / 2.0;
        Ok(head_rot_world * center_local + eye_mid)
    };
    let left_eye_world = eye_world("left")?;
    let right_eye_world = eye_world("right")?;
    let true_depth = (eye_mid - ctx.extrinsics.position()).norm();

    'attempt: for _ in 0..MAX_REGEN_TRIES {
        // A frame whose geometry fails abandons the whole attempt; the next
        // attempt draws fresh randomness, so retries stay deterministic.
        let mut frames = Vec::with_capacity(frames_per_dwell as usize);
        for frame in 0..frames_per_dwell {
            // Fixated point: uniform inside the cell's central third,
            // fresh per frame.
            let target = Vector3::new(rng.gen_range(fu0..fu1), rng.gen_range(fv0..fv1), 0.0);

            // Per-eye measured gaze: exact direction to the fixated point,
            // perturbed by the effective angular noise, camera frame.
            let mut eye_feature = |eye_pos: &Vector3<f64>| -> Result<EyeFeature, GeometryError> {
                let dir_world = perturb_direction(&(target - eye_pos).normalize(), sigma, rng);
                let dir_cam = ctx.extrinsics.dir_to_camera(&dir_world);
                let eye_cam = ctx.extrinsics.point_to_camera(eye_pos);
                let mut px = project(&ctx.intrinsics, &Pose::identity(), &eye_cam)?;
                if noise.landmark_sigma > 0.0 {
                    px.x += landmark_noise.sample(rng);
                    px.y += landmark_noise.sample(rng);
                }
                Ok(EyeFeature::new(dir_cam, px))
            };
            let left = match eye_feature(&left_eye_world) {
                Ok(f) => f,
                Err(_) => continue 'attempt,
            };
            let right = match eye_feature(&right_eye_world) {
                Ok(f) => f,
                Err(_) => continue 'attempt,
            };

            // The measured rays must reach the panel plane; re-roll the
            // dwell otherwise.
            for (feature, origin) in [(&left, &left_eye_world), (&right, &right_eye_world)] {
                let dir_world = ctx.extrinsics.dir_to_world(&Vector3::from(feature.gaze));
                if intersect_panel(origin, &dir_world).is_err() {
                    continue 'attempt;
                }
            }

            // Landmarks: exact projection of the posed face model plus
            // pixel noise; every landmark must stay inside the image.
            let mut landmarks = LandmarkSet2D::default();
            for (name, p_local) in ctx.face_model.iter() {
                let p_world = head_rot_world * p_local + eye_mid;
                let p_cam = ctx.extrinsics.point_to_camera(&p_world);
                let mut px = match project(&ctx.intrinsics, &Pose::identity(), &p_cam) {
                    Ok(px) => px,
                    Err(_) => continue 'attempt,
                };
                if noise.landmark_sigma > 0.0 {
                    px.x += landmark_noise.sample(rng);
                    px.y += landmark_noise.sample(rng);
                }
                if !ctx.intrinsics.contains(&px) {
                    continue 'attempt;
                }
                landmarks.insert(name, px);
            }

            let depth = if noise.depth_sigma > 0.0 {
                true_depth + depth_noise.sample(rng)
            } else {
                true_depth
            };

            let timestamp = dwell_index as f64 * DWELL_SECONDS
                + f64::from(frame) * (DWELL_SECONDS / f64::from(frames_per_dwell));

            frames.push(GazeSample {
                format: DATASET_FORMAT.to_string(),
                user_id: spec.user_id.clone(),
                scenario: spec.clone(),
                target_cell: cell,
                landmarks,
                left,
                right,
                depth,
                true_pose: true_pose.clone(),
                true_panel_point: PanelPoint::new(target.x, target.y),
                timestamp,
            });
        }
        return Ok(frames);
    }
    Err(SynthError::UnreachableCell {
        cell: cell.index(),
        user: spec.user_id.clone(),
        reason: format!("no valid dwell in {MAX_REGEN_TRIES} attempts"),
    })
}

/// Writes samples as JSON Lines.
pub fn write_jsonl<W: Write>(samples: &[GazeSample], mut out: W) -> Result<(), SynthError> {
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| SynthError::DatasetIo(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| SynthError::DatasetIo(e.to_string()))?;
    }
    Ok(())
}

/// Reads samples from JSON Lines, checking the per-record format tag.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<GazeSample>, SynthError> {
    let mut samples = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| SynthError::DatasetIo(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: GazeSample = serde_json::from_str(&line)
            .map_err(|e| SynthError::DatasetIo(format!("line {}: {e}", i + 1)))?;
        if sample.format != DATASET_FORMAT {
            return Err(SynthError::DatasetIo(format!(
                "line {}: unsupported format {:?}, expected {DATASET_FORMAT:?}",
                i + 1,
                sample.format
            )));
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Per-feature normalization statistics (population mean/std pooled over
/// both eyes) plus per-cell sample counts.
pub fn dataset_stats(samples: &[GazeSample]) -> Result<crate::nets::DatasetStats, SynthError> {
    use crate::nets::{NormStats, EYE_FEATURE_DIM};
    if samples.len() < 2 {
        return Err(SynthError::InvalidScenario(format!(
            "need at least 2 samples for statistics, got {}",
            samples.len()
        )));
    }
    let mut mean = [0.0f64; EYE_FEATURE_DIM];
    let mut m2 = [0.0f64; EYE_FEATURE_DIM];
    let mut count = 0u64;
    let mut per_cell: std::collections::BTreeMap<u32, u64> = Default::default();

    for s in samples {
        *per_cell.entry(s.target_cell.index()).or_insert(0) += 1;
        for raw in [s.left.raw(), s.right.raw()] {
            count += 1;
            for i in 0..EYE_FEATURE_DIM {
                // Welford's online update.
                let delta = raw[i] - mean[i];
                mean[i] += delta / count as f64;
                m2[i] += delta * (raw[i] - mean[i]);
            }
        }
    }
    let mut std = [0.0f64; EYE_FEATURE_DIM];
    for i in 0..EYE_FEATURE_DIM {
        std[i] = (m2[i] / count as f64).sqrt();
    }
    Ok(crate::nets::DatasetStats {
        norm: NormStats { mean, std },
        per_cell,
        samples: samples.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_to_cell;
    use crate::headpose::canonical_face_model;

    fn ctx() -> SceneContext {
        SceneContext::with_defaults(canonical_face_model())
    }

    fn spec(user_id: &str, height: f64, distance: f64, lateral: f64) -> ScenarioSpec {
        ScenarioSpec {
            user_id: user_id.into(),
            height,
            distance,
            lateral,
            accessories: BTreeSet::new(),
            side_gaze_deg: 0.0,
        }
    }

    /// The standard 3x3 acquisition grid: three distances by three lateral
    /// positions for one user.
    fn nine_specs() -> Vec<ScenarioSpec> {
        let mut specs = Vec::new();
        for (i, &d) in [0.75, 1.0, 1.5].iter().enumerate() {
            for (j, &l) in [-0.5, 0.0, 0.5].iter().enumerate() {
                specs.push(spec(&format!("u{i}{j}"), 1.7, d, l));
            }
        }
        specs
    }

    #[test]
    fn noiseless_rays_hit_target_cells() {
        let ctx = ctx();
        let samples = generate(
            &nine_specs(),
            &CellSchedule::Exhaustive { repeats: 1 },
            10,
            &NoiseModel::noiseless(),
            42,
            &ctx,
        )
        .unwrap();
        assert_eq!(samples.len(), 9 * 36 * 10);

        for s in &samples {
            // Reconstruct each eye's world ray from the emitted features.
            for (feature, eye_name) in [(&s.left, "left"), (&s.right, "right")] {
                let dir_world = ctx.extrinsics.dir_to_world(&Vector3::from(feature.gaze));
                // Eye origin: the posed face-model eye center.
                let head_rot = ctx
                    .extrinsics
                    .rotation_matrix()
                    * s.true_pose.rotation_matrix();
                let eye_local = (ctx.face_model.get(&format!("{eye_name}_eye_inner")).unwrap()
                    + ctx.face_model.get(&format!("{eye_name}_eye_outer")).unwrap())
                    / 2.0;
                let head_origin = ctx
                    .extrinsics
                    .point_to_world(&s.true_pose.translation_vec());
                let origin = head_rot * eye_local + head_origin;
                let hit = intersect_panel(&origin, &dir_world).unwrap();
                let cell = point_to_cell(&hit, &ctx.panel).unwrap();
                assert_eq!(cell, s.target_cell, "user {} ts {}", s.user_id, s.timestamp);
                // And the ray lands exactly on the recorded fixation point.
                assert!((hit.u - s.true_panel_point.u).abs() < 1e-9);
                assert!((hit.v - s.true_panel_point.v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let ctx = ctx();
        let noise = NoiseModel {
            gaze_sigma: 0.05,
            landmark_sigma: 1.0,
            depth_sigma: 0.01,
            accessory_penalty: 1.4,
            downward_penalty: 1.6,
        };
        let specs = vec![spec("u", 1.7, 1.0, 0.0)];
        let schedule = CellSchedule::Sampled {
            count: 10,
            repeats: 2,
        };
        let a = generate(&specs, &schedule, 5, &noise, 7, &ctx).unwrap();
        let b = generate(&specs, &schedule, 5, &noise, 7, &ctx).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_jsonl(&a, &mut buf_a).unwrap();
        write_jsonl(&b, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);

        let c = generate(&specs, &schedule, 5, &noise, 8, &ctx).unwrap();
        let mut buf_c = Vec::new();
        write_jsonl(&c, &mut buf_c).unwrap();
        assert_ne!(buf_a, buf_c);
    }

    #[test]
    fn jsonl_round_trip() {
        let ctx = ctx();
        let samples = generate(
            &[spec("u", 1.6, 0.75, -0.5)],
            &CellSchedule::Sampled { count: 3, repeats: 1 },
            4,
            &NoiseModel::noiseless(),
            3,
            &ctx,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_jsonl(&samples, &mut buf).unwrap();
        let back = read_jsonl(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.len(), samples.len());
        assert_eq!(back[0].target_cell, samples[0].target_cell);
        assert_eq!(back[0].timestamp, samples[0].timestamp);
    }

    #[test]
    fn depth_matches_scene_distance() {
        let ctx = ctx();
        let s = spec("u", 1.75, 1.0, 0.5);
        let samples = generate(
            &[s.clone()],
            &CellSchedule::Sampled { count: 5, repeats: 1 },
            2,
            &NoiseModel::noiseless(),
            1,
            &ctx,
        )
        .unwrap();
        // Eye midpoint: lateral 0.5 m, some vertical offset from the camera,
        // 1.0 m out. The depth must be the exact Euclidean distance.
        let eye_mid = eye_midpoint_world(&s, &ctx);
        let expect = (eye_mid - ctx.extrinsics.position()).norm();
        for sample in &samples {
            assert!((sample.depth - expect).abs() < 1e-12);
        }
        assert!(expect > 1.0 && expect < 1.3);
    }

    #[test]
    fn dwell_indices_group_frames() {
        let ctx = ctx();
        let samples = generate(
            &[spec("u", 1.7, 1.0, 0.0)],
            &CellSchedule::Sampled { count: 4, repeats: 1 },
            6,
            &NoiseModel::noiseless(),
            5,
            &ctx,
        )
        .unwrap();
        assert_eq!(samples.len(), 24);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.dwell_index(), (i / 6) as u64);
        }
    }

    #[test]
    fn timestamps_are_strictly_increasing() {
        let ctx = ctx();
        let samples = generate(
            &[spec("a", 1.6, 0.75, 0.0), spec("b", 1.8, 1.5, 0.5)],
            &CellSchedule::Sampled { count: 3, repeats: 2 },
            5,
            &NoiseModel::noiseless(),
            11,
            &ctx,
        )
        .unwrap();
        for pair in samples.windows(2) {
            assert!(pair[1].timestamp > pair[0].timestamp);
        }
    }

    #[test]
    fn downward_targets_get_noisier_gaze() {
        let ctx = ctx();
        let noise = NoiseModel {
            gaze_sigma: 0.03,
            landmark_sigma: 0.0,
            depth_sigma: 0.0,
            accessory_penalty: 1.0,
            downward_penalty: 2.0,
        };
        let samples = generate(
            &[spec("u", 1.7, 1.0, 0.0)],
            &CellSchedule::Exhaustive { repeats: 12 },
            8,
            &noise,
            23,
            &ctx,
        )
        .unwrap();
        assert!(samples.len() >= 3_000, "sample count {}", samples.len());

        // Angular error of the measured ray vs the exact ray from the left
        // eye's own position to the fixated point.
        let mut err_top = Vec::new();
        let mut err_bottom = Vec::new();
        for s in &samples {
            let eye_mid = eye_midpoint_world(&s.scenario, &ctx);
            let head_rot = ctx.extrinsics.rotation_matrix() * s.true_pose.rotation_matrix();
            let eye_local = (ctx.face_model.get("left_eye_inner").unwrap()
                + ctx.face_model.get("left_eye_outer").unwrap())
                / 2.0;
            let eye_pos = head_rot * eye_local + eye_mid;
            let target = Vector3::new(s.true_panel_point.u, s.true_panel_point.v, 0.0);
            let exact = (target - eye_pos).normalize();
            let measured = ctx
                .extrinsics
                .dir_to_world(&Vector3::from(s.left.gaze));
            let angle = exact.dot(&measured).clamp(-1.0, 1.0).acos();
            if s.target_cell.is_bottom_two_rows(&ctx.panel) {
                err_bottom.push(angle);
            } else {
                err_top.push(angle);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&err_bottom) > 1.5 * mean(&err_top),
            "bottom rows should be noisier: {} vs {}",
            mean(&err_bottom),
            mean(&err_top)
        );
    }

    #[test]
    fn sampled_cells_are_roughly_uniform() {
        let ctx = ctx();
        let n = 14_400u32; // 400 dwells per cell on average
        let samples = generate(
            &[spec("u", 1.7, 1.0, 0.0)],
            &CellSchedule::Sampled { count: n, repeats: 1 },
            1,
            &NoiseModel::noiseless(),
            9,
            &ctx,
        )
        .unwrap();
        let stats = dataset_stats(&samples).unwrap();
        let expect = f64::from(n) / 36.0;
        let bound = 5.0 * (f64::from(n) / 36.0).sqrt();
        assert_eq!(stats.per_cell.values().sum::<u64>(), samples.len() as u64);
        for (cell, count) in &stats.per_cell {
            assert!(
                (*count as f64 - expect).abs() < bound,
                "cell {cell}: {count} vs {expect:.1} ± {bound:.1}"
            );
        }
    }

    #[test]
    fn stats_match_hand_computation() {
        let ctx = ctx();
        let mut samples = generate(
            &[spec("u", 1.7, 1.0, 0.0)],
            &CellSchedule::Sampled { count: 2, repeats: 1 },
            1,
            &NoiseModel::noiseless(),
            2,
            &ctx,
        )
        .unwrap();
        samples.truncate(2);
        let stats = dataset_stats(&samples).unwrap();
        // Feature 3 (eye pixel x) pooled over both eyes of both samples.
        let vals: Vec<f64> = samples
            .iter()
            .flat_map(|s| [s.left.raw()[3], s.right.raw()[3]])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((stats.norm.mean[3] - mean).abs() < 1e-9);
        assert!((stats.norm.std[3] - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let ctx = ctx();
        let bad = ScenarioSpec {
            distance: -1.0,
            ..spec("u", 1.7, 1.0, 0.0)
        };
        assert!(matches!(
            generate(
                &[bad],
                &CellSchedule::Exhaustive { repeats: 1 },
                1,
                &NoiseModel::noiseless(),
                0,
                &ctx
            ),
            Err(SynthError::InvalidScenario(_))
        ));

        let bad_noise = NoiseModel {
            accessory_penalty: 0.5,
            ..NoiseModel::noiseless()
        };
        assert!(bad_noise.validate().is_err());
    }
}
