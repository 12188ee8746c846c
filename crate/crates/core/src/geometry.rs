//! Panel and camera geometry.
//!
//! World frame convention used throughout the crate:
//!
//! - the panel (shelf front) lies in the plane `z = 0`,
//! - the panel's top-left corner is the world origin,
//! - `u`/`x` grows to the right, `v`/`y` grows **downward**,
//! - the user stands in front of the panel at `z > 0`.
//!
//! Camera frame convention is the usual computer-vision one: `x` right,
//! `y` down, `z` along the optical axis into the scene. With identity
//! extrinsics the camera sits at the world origin looking at the user, so a
//! face looking straight at the camera has a world gaze direction of
//! `(0, 0, -1)`.

use nalgebra::{Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced by panel/camera geometry routines.
#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// A 3-D point has non-positive depth and cannot be projected.
    #[error("point behind camera: z = {z}")]
    PointBehindCamera { z: f64 },
    /// A gaze ray runs parallel to the panel plane.
    #[error("ray parallel to panel plane: |dz| = {dz_abs}")]
    RayParallel { dz_abs: f64 },
    /// A gaze ray points away from the panel plane.
    #[error("ray points away from panel: t = {t}")]
    RayAway { t: f64 },
    /// A panel point lies outside the grid area.
    #[error("point ({u}, {v}) is off the panel")]
    OffPanel { u: f64, v: f64 },
    /// A grid-cell index or row/column pair is out of range.
    #[error("cell reference out of range: {what}")]
    CellOutOfRange { what: String },
    /// A configuration value violates its validity constraints.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Numerical guard below which a projected depth counts as "behind camera".
pub const MIN_PROJECTION_DEPTH: f64 = 1e-9;
/// Numerical guard below which a ray counts as parallel to the panel.
pub const MIN_RAY_DZ: f64 = 1e-12;

/// Physical layout of the gridded panel and its camera mount.
///
/// All lengths are in meters. The grid splits the panel into `rows x cols`
/// equal cells; `camera_height` and `panel_bottom_height` are measured from
/// the floor and tie the panel's world frame to user heights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    pub cols: u32,
    pub rows: u32,
    pub cell_w: f64,
    pub cell_h: f64,
    /// Camera mount height above the floor.
    pub camera_height: f64,
    /// Height of the panel's bottom edge above the floor.
    pub panel_bottom_height: f64,
}

impl PanelConfig {
    /// Validated constructor.
    pub fn new(
        cols: u32,
        rows: u32,
        cell_w: f64,
        cell_h: f64,
        camera_height: f64,
        panel_bottom_height: f64,
    ) -> Result<Self, GeometryError> {
        let cfg = Self {
            cols,
            rows,
            cell_w,
            cell_h,
            camera_height,
            panel_bottom_height,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the invariants `cols >= 1`, `rows >= 1`, positive cell sizes,
    /// and non-negative mount heights.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.cols < 1 || self.rows < 1 {
            return Err(GeometryError::InvalidConfig(format!(
                "grid must have at least one row and column, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.cell_w > 0.0) || !(self.cell_h > 0.0) {
            return Err(GeometryError::InvalidConfig(format!(
                "cell size must be positive, got {} x {}",
                self.cell_w, self.cell_h
            )));
        }
        if self.camera_height < 0.0 || self.panel_bottom_height < 0.0 {
            return Err(GeometryError::InvalidConfig(
                "mount heights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Total panel width in meters (`cols * cell_w`).
    pub fn panel_width(&self) -> f64 {
        f64::from(self.cols) * self.cell_w
    }

    /// Total panel height in meters (`rows * cell_h`).
    pub fn panel_height(&self) -> f64 {
        f64::from(self.rows) * self.cell_h
    }

    /// Height of the panel's top edge above the floor.
    pub fn panel_top_height(&self) -> f64 {
        self.panel_bottom_height + self.panel_height()
    }

    /// Number of cells in the grid.
    pub fn cell_count(&self) -> u32 {
        self.cols * self.rows
    }

    /// Converts a height above the floor into a panel `v` coordinate
    /// (measured downward from the panel's top edge).
    pub fn v_of_height(&self, height_above_floor: f64) -> f64 {
        self.panel_top_height() - height_above_floor
    }
}

impl Default for PanelConfig {
    /// The deployed shelf: a 6x6 grid of 0.17 m x 0.23 m cells with the
    /// camera mounted 1.5 m above the floor.
    fn default() -> Self {
        Self {
            cols: 6,
            rows: 6,
            cell_w: 0.17,
            cell_h: 0.23,
            camera_height: 1.5,
            panel_bottom_height: 0.5,
        }
    }
}

/// Pinhole camera intrinsics (pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Checks `fx, fy > 0` and that the principal point lies inside the image.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(GeometryError::InvalidConfig(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        if !(0.0 <= self.cx && self.cx < w && 0.0 <= self.cy && self.cy < h) {
            return Err(GeometryError::InvalidConfig(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// True when a pixel lies inside the image bounds.
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x < f64::from(self.width) && px.y >= 0.0 && px.y < f64::from(self.height)
    }
}

impl Default for CameraIntrinsics {
    /// A wide-angle 848x480 depth-camera-style sensor; the wide horizontal
    /// field of view keeps users standing half a meter to either side in
    /// frame at close range.
    fn default() -> Self {
        Self {
            fx: 425.0,
            fy: 425.0,
            cx: 424.0,
            cy: 240.0,
            width: 848,
            height: 480,
        }
    }
}

/// Rigid transform: axis-angle rotation plus translation.
///
/// Used both for object poses expressed in the camera frame (head pose) and
/// for the camera's own placement in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Axis-angle rotation (Rodrigues vector), radians. Canonical form keeps
    /// the magnitude at or below pi.
    pub rotation: [f64; 3],
    /// Translation in meters.
    pub translation: [f64; 3],
}

impl Pose {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.into(),
            translation: translation.into(),
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.rotation)
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Rotation matrix for this pose's axis-angle vector.
    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        Rotation3::from_scaled_axis(self.rotation_vec())
    }

    /// Applies the transform: `R * p + t`.
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vec()
    }

    /// Returns an equivalent pose whose rotation magnitude is at most pi.
    pub fn canonicalized(&self) -> Self {
        let r = self.rotation_vec();
        let angle = r.norm();
        if angle <= std::f64::consts::PI || angle == 0.0 {
            return self.clone();
        }
        // Wrap the angle into (-pi, pi]; same rotation, shorter vector.
        let wrapped = angle - 2.0 * std::f64::consts::PI * (angle / (2.0 * std::f64::consts::PI)).round();
        Self {
            rotation: (r * (wrapped / angle)).into(),
            translation: self.translation,
        }
    }
}

/// Camera placement in the world frame.
///
/// `rotation`/`translation` map camera-frame coordinates into world-frame
/// coordinates: `p_world = R * p_camera + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl CameraExtrinsics {
    /// Camera mounted on the panel plane at `camera_height`, horizontally
    /// centered, axes aligned with the world frame (optical axis toward the
    /// user).
    pub fn centered_on_panel(panel: &PanelConfig) -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [
                panel.panel_width() / 2.0,
                panel.v_of_height(panel.camera_height),
                0.0,
            ],
        }
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        Rotation3::from_scaled_axis(Vector3::from(self.rotation))
    }

    /// Camera origin in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Maps a camera-frame direction into the world frame.
    pub fn dir_to_world(&self, dir_camera: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * dir_camera
    }

    /// Maps a camera-frame point into the world frame.
    pub fn point_to_world(&self, p_camera: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p_camera + self.position()
    }

    /// Maps a world-frame point into the camera frame.
    pub fn point_to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().inverse() * (p_world - self.position())
    }

    /// Maps a world-frame direction into the camera frame.
    pub fn dir_to_camera(&self, dir_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().inverse() * dir_world
    }
}

/// A point on the panel plane, meters from the top-left corner
/// (`u` right, `v` down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelPoint {
    pub u: f64,
    pub v: f64,
}

impl PanelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Clamps the point into the panel rectangle.
    pub fn clamped(&self, cfg: &PanelConfig) -> Self {
        Self {
            u: self.u.clamp(0.0, cfg.panel_width()),
            v: self.v.clamp(0.0, cfg.panel_height()),
        }
    }
}

/// One cell of the panel grid.
///
/// Cells are numbered 1-based in row-major order starting at the top-left
/// corner, so with 6 columns the top row is cells 1..=6 and the bottom-left
/// cell of a 6x6 grid is cell 31.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridCell(pub u32);

impl GridCell {
    /// Builds a cell from its 1-based row-major index.
    pub fn from_index(index: u32, cfg: &PanelConfig) -> Result<Self, GeometryError> {
        if index < 1 || index > cfg.cell_count() {
            return Err(GeometryError::CellOutOfRange {
                what: format!("index {} not in 1..={}", index, cfg.cell_count()),
            });
        }
        Ok(Self(index))
    }

    /// Builds a cell from 0-based row and column numbers.
    pub fn from_row_col(row: u32, col: u32, cfg: &PanelConfig) -> Result<Self, GeometryError> {
        if row >= cfg.rows || col >= cfg.cols {
            return Err(GeometryError::CellOutOfRange {
                what: format!(
                    "row/col ({row}, {col}) not in {}x{} grid",
                    cfg.rows, cfg.cols
                ),
            });
        }
        Ok(Self(row * cfg.cols + col + 1))
    }

    /// 1-based row-major index.
    pub fn index(&self) -> u32 {
        self.0
    }

    /// 0-based row number (0 is the top row).
    pub fn row(&self, cfg: &PanelConfig) -> u32 {
        (self.0 - 1) / cfg.cols
    }

    /// 0-based column number (0 is the leftmost column).
    pub fn col(&self, cfg: &PanelConfig) -> u32 {
        (self.0 - 1) % cfg.cols
    }

    /// Center of the cell on the panel.
    pub fn center(&self, cfg: &PanelConfig) -> PanelPoint {
        PanelPoint {
            u: (f64::from(self.col(cfg)) + 0.5) * cfg.cell_w,
            v: (f64::from(self.row(cfg)) + 0.5) * cfg.cell_h,
        }
    }

    /// Axis-aligned cell rectangle as `(u_min, v_min, u_max, v_max)`.
    pub fn rect(&self, cfg: &PanelConfig) -> (f64, f64, f64, f64) {
        let u0 = f64::from(self.col(cfg)) * cfg.cell_w;
        let v0 = f64::from(self.row(cfg)) * cfg.cell_h;
        (u0, v0, u0 + cfg.cell_w, v0 + cfg.cell_h)
    }

    /// True when the cell lies in the bottom two rows of the grid (the rows
    /// whose gaze angles are steepest for a standing user).
    pub fn is_bottom_two_rows(&self, cfg: &PanelConfig) -> bool {
        cfg.rows >= 2 && self.row(cfg) >= cfg.rows - 2
    }
}

/// Projects a camera-frame 3-D point through a pose and pinhole intrinsics.
///
/// The point is first moved by `pose` (`R * p + t`) and must end up strictly
/// in front of the camera (`z > 1e-9`).
pub fn project(
    intr: &CameraIntrinsics,
    pose: &Pose,
    point: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let pc = pose.transform(point);
    if pc.z <= MIN_PROJECTION_DEPTH {
        return Err(GeometryError::PointBehindCamera { z: pc.z });
    }
    Ok(Vector2::new(
        intr.fx * pc.x / pc.z + intr.cx,
        intr.fy * pc.y / pc.z + intr.cy,
    ))
}

/// Intersects a world-frame gaze ray with the panel plane `z = 0`.
///
/// `direction` must be unit length (checked to 1e-9). The hit point is
/// returned even when it falls outside the panel rectangle — callers decide
/// what off-panel hits mean.
pub fn intersect_panel(
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
) -> Result<PanelPoint, GeometryError> {
    debug_assert!(
        (direction.norm() - 1.0).abs() <= 1e-9,
        "gaze direction must be unit length"
    );
    if direction.z.abs() < MIN_RAY_DZ {
        return Err(GeometryError::RayParallel {
            dz_abs: direction.z.abs(),
        });
    }
    let t = -origin.z / direction.z;
    if t < 0.0 {
        return Err(GeometryError::RayAway { t });
    }
    Ok(PanelPoint {
        u: origin.x + t * direction.x,
        v: origin.y + t * direction.y,
    })
}

/// Maps a panel point to the grid cell containing it.
///
/// Cell intervals are half-open (`[u0, u0 + cell_w)`), so the panel's right
/// and bottom edges fall off the grid.
pub fn point_to_cell(p: &PanelPoint, cfg: &PanelConfig) -> Result<GridCell, GeometryError> {
    if !(p.u >= 0.0 && p.u < cfg.panel_width() && p.v >= 0.0 && p.v < cfg.panel_height()) {
        return Err(GeometryError::OffPanel { u: p.u, v: p.v });
    }
    let col = (p.u / cfg.cell_w).floor() as u32;
    let row = (p.v / cfg.cell_h).floor() as u32;
    // Guard against floating-point edge cases at the panel boundary.
    let col = col.min(cfg.cols - 1);
    let row = row.min(cfg.rows - 1);
    GridCell::from_row_col(row, col, cfg)
}

/// Intersection-over-union between a cell-sized prediction rectangle
/// centered at `pred_center` and the given grid cell.
///
/// Degenerate (non-overlapping) cases score 0; the result is always in
/// `[0, 1]` and reaches 1 exactly when the prediction is centered on the
/// cell.
pub fn iou_with_cell(pred_center: &PanelPoint, cell: GridCell, cfg: &PanelConfig) -> f64 {
    let (cu0, cv0, cu1, cv1) = cell.rect(cfg);
    let (pu0, pv0) = (
        pred_center.u - cfg.cell_w / 2.0,
        pred_center.v - cfg.cell_h / 2.0,
    );
    let (pu1, pv1) = (pu0 + cfg.cell_w, pv0 + cfg.cell_h);

    let iw = (cu1.min(pu1) - cu0.max(pu0)).max(0.0);
    let ih = (cv1.min(pv1) - cv0.max(pv0)).max(0.0);
    let inter = iw * ih;
    let union = 2.0 * cfg.cell_w * cfg.cell_h - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
