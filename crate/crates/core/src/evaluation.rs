//! Trial scoring and accuracy reporting.
//!
//! One *trial* is one dwell: the user fixates a single grid cell for the
//! dwell window while the system produces a prediction per frame. The
//! per-frame predictions collapse into one panel point (mean by default),
//! that point is scored against the target cell by rectangle IoU, and the
//! trial counts as correct when the IoU reaches 0.5.
//!
//! The canonical session plan sweeps three standing distances, three user
//! groups, and four wearing/looking sub-conditions; its arithmetic yields
//! 80 trials per user and distance for the two-user groups and 40 for the
//! single-user group. Results aggregate three ways: an accuracy table by
//! (distance, group, user), a per-cell table over all 36 cells, and a
//! top-vs-bottom row band split that isolates the steep downward-gaze
//! region.

use crate::config::EvalConfig;
use crate::geometry::{intersect_panel, iou_with_cell, GridCell, PanelConfig, PanelPoint};
use crate::headpose::{forward_axis, solve_pnp};
use crate::nets::{MatchFeatures, MatchNet, NetsError};
use crate::synthgen::{
    generate, Accessory, CellSchedule, GazeSample, NoiseModel, ScenarioSpec, SceneContext,
    SynthError,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Errors from scoring or report assembly.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("a dwell must contain at least one frame")]
    EmptyDwell,
    #[error("dataset does not match the session plan: {0}")]
    ScenarioMismatch(String),
    #[error("malformed trial: {0}")]
    InvalidTrial(String),
    #[error(transparent)]
    Net(#[from] NetsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// How per-frame predictions collapse into one trial prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DwellStatistic {
    /// Coordinate-wise mean (the default).
    Mean,
    /// Coordinate-wise median; sturdier against single-frame outliers.
    Median,
}

/// Collapses the per-frame predicted points of one dwell into a single
/// panel point.
pub fn dwell_aggregate(
    frames: &[PanelPoint],
    statistic: DwellStatistic,
) -> Result<PanelPoint, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::EmptyDwell);
    }
    match statistic {
        DwellStatistic::Mean => {
            let n = frames.len() as f64;
            Ok(PanelPoint {
                u: frames.iter().map(|p| p.u).sum::<f64>() / n,
                v: frames.iter().map(|p| p.v).sum::<f64>() / n,
            })
        }
        DwellStatistic::Median => Ok(PanelPoint {
            u: median(frames.iter().map(|p| p.u).collect()),
            v: median(frames.iter().map(|p| p.v).collect()),
        }),
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------------
// Per-frame prediction
// ---------------------------------------------------------------------------

/// Anything that turns one frame into a predicted panel point.
pub trait PointPredictor: Sync {
    fn predict(&self, sample: &GazeSample) -> Result<PanelPoint, EvalError>;
}

/// Upper-bound predictor: returns the frame's true gaze point. Useful for
/// validating the scoring path — on noiseless data it must score 100%.
pub struct OraclePredictor;

impl PointPredictor for OraclePredictor {
    fn predict(&self, sample: &GazeSample) -> Result<PanelPoint, EvalError> {
        Ok(sample.true_panel_point)
    }
}

/// Normalized panel point hit by the head's forward axis, recovered from
/// the frame's 2-D landmarks. Falls back to the panel center when the pose
/// solve or the panel intersection fails — a neutral input that lets the
/// matcher still run on the remaining features.
pub fn head_panel_uv(sample: &GazeSample, scene: &SceneContext) -> [f64; 2] {
    let fallback = [0.5, 0.5];
    let Ok(est) = solve_pnp(
        &scene.face_model,
        &sample.landmarks,
        &scene.intrinsics,
        None,
    ) else {
        return fallback;
    };
    let origin = scene.extrinsics.point_to_world(&est.pose.translation_vec());
    let dir = scene.extrinsics.dir_to_world(&forward_axis(&est.pose));
    let Ok(hit) = intersect_panel(&origin, &dir) else {
        return fallback;
    };
    [
        (hit.u / scene.panel.panel_width()).clamp(0.0, 1.0),
        (hit.v / scene.panel.panel_height()).clamp(0.0, 1.0),
    ]
}

/// Assembles the matcher's input features for one frame. The head-pose
/// channel is only computed (and only valid) when the matcher fuses it.
pub fn features_from_sample(
    sample: &GazeSample,
    scene: &SceneContext,
    use_headpose: bool,
) -> MatchFeatures {
    MatchFeatures {
        left: sample.left,
        right: sample.right,
        depth: sample.depth,
        head_uv: use_headpose.then(|| head_panel_uv(sample, scene)),
    }
}

/// The production predictor: landmark-derived head pose plus per-eye gaze
/// features through the trained matcher.
pub struct MatcherPredictor<'a> {
    pub net: &'a MatchNet,
    pub scene: &'a SceneContext,
}

impl PointPredictor for MatcherPredictor<'_> {
    fn predict(&self, sample: &GazeSample) -> Result<PanelPoint, EvalError> {
        let features = features_from_sample(sample, self.scene, self.net.arch.use_headpose);
        Ok(self.net.match_forward(&features, &self.scene.panel)?)
    }
}

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

/// One scored dwell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub scenario: ScenarioSpec,
    pub target_cell: GridCell,
    /// Dwell-aggregated prediction.
    pub predicted_point: PanelPoint,
    pub iou: f64,
    /// `iou >= 0.5`, always.
    pub correct: bool,
    /// The dwell's index within its session, for stable ordering.
    pub dwell_index: u64,
}

/// Groups a dataset into dwells, predicts every frame, and scores each
/// dwell. Trials come back ordered by (session user id, dwell index).
///
/// `expected_frames` optionally enforces a fixed frame count per dwell;
/// mixed targets inside one dwell are always an error.
pub fn score_dataset<P: PointPredictor>(
    samples: &[GazeSample],
    predictor: &P,
    panel: &PanelConfig,
    statistic: DwellStatistic,
    expected_frames: Option<u32>,
) -> Result<Vec<TrialResult>, EvalError> {
    let mut dwells: BTreeMap<(String, u64), Vec<&GazeSample>> = BTreeMap::new();
    for sample in samples {
        dwells
            .entry((sample.user_id.clone(), sample.dwell_index()))
            .or_default()
            .push(sample);
    }
    let dwells: Vec<((String, u64), Vec<&GazeSample>)> = dwells.into_iter().collect();
    dwells
        .par_iter()
        .map(|((user_id, dwell_index), frames)| {
            let first = frames.first().expect("grouping never yields empty dwells");
            if let Some(expected) = expected_frames {
                if frames.len() != expected as usize {
                    return Err(EvalError::InvalidTrial(format!(
                        "dwell {dwell_index} of {user_id:?} has {} frames, expected {expected}",
                        frames.len()
                    )));
                }
            }
            if frames
                .iter()
                .any(|f| f.target_cell != first.target_cell || f.scenario != first.scenario)
            {
                return Err(EvalError::InvalidTrial(format!(
                    "dwell {dwell_index} of {user_id:?} mixes targets or scenarios"
                )));
            }
            let predictions = frames
                .iter()
                .map(|f| predictor.predict(f))
                .collect::<Result<Vec<_>, _>>()?;
            let predicted_point = dwell_aggregate(&predictions, statistic)?;
            let iou = iou_with_cell(&predicted_point, first.target_cell, panel);
            Ok(TrialResult {
                scenario: first.scenario.clone(),
                target_cell: first.target_cell,
                predicted_point,
                iou,
                correct: iou >= 0.5,
                dwell_index: *dwell_index,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// The canonical session plan
// ---------------------------------------------------------------------------

/// Standing distances every group is tested at, meters.
pub const TEST_DISTANCES: [f64; 3] = [0.75, 1.0, 1.5];

/// One planned (distance, group, user, sub-condition) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCondition {
    /// User group: 1 and 2 are two-user groups, 3 is the single user.
    pub case: u8,
    /// User tag within the group (`u1`, `u2`).
    pub user_tag: String,
    pub distance: f64,
    /// `A` plain / `B` looking sideways / `C` wearing accessories /
    /// `D` both.
    pub sub_case: char,
    /// Dwell repetitions per drawn cell.
    pub repeats: u32,
    /// The fully-specified scenario the generator runs.
    pub spec: ScenarioSpec,
}

fn sub_case_table() -> [(char, BTreeSet<Accessory>, f64); 4] {
    let worn: BTreeSet<Accessory> = [Accessory::Glasses, Accessory::Hat, Accessory::Mask]
        .into_iter()
        .collect();
    [
        ('A', BTreeSet::new(), 0.0),
        ('B', BTreeSet::new(), 30.0),
        ('C', worn.clone(), 0.0),
        ('D', worn, 30.0),
    ]
}

/// The canonical evaluation plan: every distance x group x user x
/// sub-condition combination. Two-user groups run `repetitions` dwells per
/// drawn cell; the single-user group runs half as many, which reproduces
/// the 80-vs-40 trial split at the default settings.
pub fn table_plan(eval: &EvalConfig) -> Vec<EvalCondition> {
    // (group, tag, height, lateral offset)
    let users: [(u8, &str, f64, f64); 5] = [
        (1, "u1", 1.55, -0.5),
        (1, "u2", 1.75, 0.5),
        (2, "u1", 1.65, -0.5),
        (2, "u2", 1.85, 0.5),
        (3, "u1", 1.70, 0.0),
    ];
    let mut plan = Vec::new();
    for &distance in &TEST_DISTANCES {
        for &(case, tag, height, lateral) in &users {
            let repeats = if case == 3 {
                eval.repetitions.div_ceil(2)
            } else {
                eval.repetitions
            };
            for (label, accessories, side_gaze_deg) in sub_case_table() {
                plan.push(EvalCondition {
                    case,
                    user_tag: tag.to_string(),
                    distance,
                    sub_case: label,
                    repeats,
                    spec: ScenarioSpec {
                        user_id: format!("case{case}-{tag}-d{distance:.2}-{label}"),
                        height,
                        distance,
                        lateral,
                        accessories,
                        side_gaze_deg,
                    },
                });
            }
        }
    }
    plan
}

/// Generates the full dataset for a plan: one generator run per condition
/// (seeded from `base_seed` plus the condition's position), concatenated.
pub fn generate_table_dataset(
    plan: &[EvalCondition],
    eval: &EvalConfig,
    noise: &NoiseModel,
    base_seed: u64,
    scene: &SceneContext,
) -> Result<Vec<GazeSample>, EvalError> {
    let mut samples = Vec::new();
    for (index, cond) in plan.iter().enumerate() {
        let schedule = CellSchedule::Sampled {
            count: eval.cells_per_condition,
            repeats: cond.repeats,
        };
        let batch = generate(
            std::slice::from_ref(&cond.spec),
            &schedule,
            eval.frames_per_dwell,
            noise,
            base_seed.wrapping_add(index as u64),
            scene,
        )?;
        samples.extend(batch);
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// One row of the accuracy table: a user at a distance, pooled over all
/// four sub-conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    /// Test definition, e.g. `"0.75 m"`.
    pub test: String,
    pub case: u8,
    pub user_tag: String,
    pub trials: u64,
    pub correct: u64,
    pub accuracy_pct: f64,
}

/// The per-(distance, group, user) accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub rows: Vec<AccuracyRow>,
    /// Multi-user groups are scored per user, not jointly; this note rides
    /// along in emitted reports.
    pub scoring_note: String,
}

/// Per-cell accuracy; cells with no trials report `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    /// 1-based cell index, row-major from the top-left.
    pub cell: u32,
    pub trials: u64,
    pub correct: u64,
    pub accuracy_pct: Option<f64>,
}

/// Accuracy split into the top four rows versus the bottom two, where
/// gazing steeply downward degrades the signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowBandSplit {
    pub top_trials: u64,
    pub top_correct: u64,
    pub top_accuracy_pct: f64,
    pub bottom_trials: u64,
    pub bottom_correct: u64,
    pub bottom_accuracy_pct: f64,
}

fn pct(correct: u64, trials: u64) -> f64 {
    if trials == 0 {
        0.0
    } else {
        100.0 * correct as f64 / trials as f64
    }
}

/// Builds the accuracy table for trials produced from `plan`. Every trial
/// must belong to a planned condition, every planned condition must have
/// exactly its expected trial count, and rows come out ordered by
/// (distance, group, user).
pub fn accuracy_table(
    plan: &[EvalCondition],
    trials: &[TrialResult],
    eval: &EvalConfig,
) -> Result<AccuracyTable, EvalError> {
    let by_user_id: BTreeMap<&str, &EvalCondition> = plan
        .iter()
        .map(|c| (c.spec.user_id.as_str(), c))
        .collect();

    // key: (distance in centimeters, case, user tag)
    let mut rows: BTreeMap<(u32, u8, String), (u64, u64)> = BTreeMap::new();
    let mut per_condition: BTreeMap<&str, u64> = BTreeMap::new();
    for trial in trials {
        let cond = by_user_id
            .get(trial.scenario.user_id.as_str())
            .ok_or_else(|| {
                EvalError::ScenarioMismatch(format!(
                    "trial session {:?} is not in the plan",
                    trial.scenario.user_id
                ))
            })?;
        if trial.scenario != cond.spec {
            return Err(EvalError::ScenarioMismatch(format!(
                "session {:?} does not match its planned scenario",
                trial.scenario.user_id
            )));
        }
        *per_condition.entry(cond.spec.user_id.as_str()).or_default() += 1;
        let key = (
            (cond.distance * 100.0).round() as u32,
            cond.case,
            cond.user_tag.clone(),
        );
        let entry = rows.entry(key).or_default();
        entry.0 += 1;
        entry.1 += u64::from(trial.correct);
    }
    for cond in plan {
        let expected = u64::from(eval.cells_per_condition) * u64::from(cond.repeats);
        let got = per_condition
            .get(cond.spec.user_id.as_str())
            .copied()
            .unwrap_or(0);
        if got != expected {
            return Err(EvalError::ScenarioMismatch(format!(
                "condition {:?} has {got} trials, expected {expected}",
                cond.spec.user_id
            )));
        }
    }

    let rows = rows
        .into_iter()
        .map(|((dist_cm, case, user_tag), (trials, correct))| AccuracyRow {
            test: format!("{:.2} m", dist_cm as f64 / 100.0),
            case,
            user_tag,
            trials,
            correct,
            accuracy_pct: pct(correct, trials),
        })
        .collect();
    Ok(AccuracyTable {
        rows,
        scoring_note: "multi-user groups scored per user (one row per user)".into(),
    })
}

/// Per-cell tallies over all 36 cells, in cell-index order.
pub fn per_cell_accuracy(trials: &[TrialResult], panel: &PanelConfig) -> Vec<CellAccuracy> {
    let mut tally: BTreeMap<u32, (u64, u64)> = (1..=panel.cell_count())
        .map(|i| (i, (0u64, 0u64)))
        .collect();
    for trial in trials {
        let entry = tally
            .entry(trial.target_cell.index())
            .or_insert((0, 0));
        entry.0 += 1;
        entry.1 += u64::from(trial.correct);
    }
    tally
        .into_iter()
        .map(|(cell, (trials, correct))| CellAccuracy {
            cell,
            trials,
            correct,
            accuracy_pct: (trials > 0).then(|| pct(correct, trials)),
        })
        .collect()
}

/// Splits trials into the top four rows versus the bottom two rows.
pub fn band_split(trials: &[TrialResult], panel: &PanelConfig) -> RowBandSplit {
    let mut split = RowBandSplit {
        top_trials: 0,
        top_correct: 0,
        top_accuracy_pct: 0.0,
        bottom_trials: 0,
        bottom_correct: 0,
        bottom_accuracy_pct: 0.0,
    };
    for trial in trials {
        if trial.target_cell.is_bottom_two_rows(panel) {
            split.bottom_trials += 1;
            split.bottom_correct += u64::from(trial.correct);
        } else {
            split.top_trials += 1;
            split.top_correct += u64::from(trial.correct);
        }
    }
    split.top_accuracy_pct = pct(split.top_correct, split.top_trials);
    split.bottom_accuracy_pct = pct(split.bottom_correct, split.bottom_trials);
    split
}

/// Everything one evaluation run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub table: AccuracyTable,
    pub per_cell: Vec<CellAccuracy>,
    pub band_split: RowBandSplit,
    pub trials: Vec<TrialResult>,
}

impl ExperimentReport {
    /// Overall accuracy across every trial.
    pub fn overall_accuracy_pct(&self) -> f64 {
        let correct = self.trials.iter().filter(|t| t.correct).count() as u64;
        pct(correct, self.trials.len() as u64)
    }
}

/// Scores a canonical-plan dataset end to end: per-frame prediction, dwell
/// aggregation, IoU scoring, and all three aggregate views. The dataset
/// must cover the plan exactly (same scenarios, same trial counts).
pub fn run_experiment<P: PointPredictor>(
    samples: &[GazeSample],
    predictor: &P,
    eval: &EvalConfig,
    scene: &SceneContext,
    statistic: DwellStatistic,
) -> Result<ExperimentReport, EvalError> {
    let plan = table_plan(eval);
    let trials = score_dataset(
        samples,
        predictor,
        &scene.panel,
        statistic,
        Some(eval.frames_per_dwell),
    )?;
    let table = accuracy_table(&plan, &trials, eval)?;
    let per_cell = per_cell_accuracy(&trials, &scene.panel);
    let split = band_split(&trials, &scene.panel);
    Ok(ExperimentReport {
        table,
        per_cell,
        band_split: split,
        trials,
    })
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

/// CSV for the accuracy table; byte-stable for identical inputs.
pub fn accuracy_table_csv(table: &AccuracyTable) -> String {
    let mut out = String::from("test,user_case,user,trials,correct,accuracy_pct\n");
    for row in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.2}\n",
            row.test, row.case, row.user_tag, row.trials, row.correct, row.accuracy_pct
        ));
    }
    out.push_str(&format!("# scoring: {}\n", table.scoring_note));
    out
}

/// CSV of per-cell accuracy: exactly one row per cell; cells without
/// trials leave the accuracy column empty.
pub fn per_cell_csv(cells: &[CellAccuracy]) -> String {
    let mut out = String::from("cell,trials,correct,accuracy_pct\n");
    for c in cells {
        let acc = c
            .accuracy_pct
            .map(|a| format!("{a:.2}"))
            .unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", c.cell, c.trials, c.correct, acc));
    }
    out
}

/// An SVG heat map of per-cell accuracy: red at 0%, green at 100%, gray
/// where no trials landed. Pure string assembly, so output is byte-stable.
pub fn heatmap_svg(cells: &[CellAccuracy], panel: &PanelConfig) -> String {
    let cell_px = 80.0;
    let margin = 30.0;
    let width = panel.cols as f64 * cell_px + 2.0 * margin;
    let height = panel.rows as f64 * cell_px + 2.0 * margin;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width:.0} {height:.0}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n"
    ));
    for c in cells {
        let idx = c.cell - 1;
        let row = idx / panel.cols;
        let col = idx % panel.cols;
        let x = margin + col as f64 * cell_px;
        let y = margin + row as f64 * cell_px;
        let fill = match c.accuracy_pct {
            // 0% -> hue 0 (red), 100% -> hue 120 (green).
            Some(a) => format!("hsl({:.0}, 72%, 55%)", 1.2 * a),
            None => "#c8c8c8".to_string(),
        };
        svg.push_str(&format!(
            "  <rect x=\"{x:.0}\" y=\"{y:.0}\" width=\"{cell_px:.0}\" height=\"{cell_px:.0}\" \
             fill=\"{fill}\" stroke=\"#333\"/>\n"
        ));
        let label = match c.accuracy_pct {
            Some(a) => format!("{a:.0}%"),
            None => "-".to_string(),
        };
        svg.push_str(&format!(
            "  <text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"middle\">{}</text>\n",
            x + cell_px / 2.0,
            y + cell_px / 2.0 - 4.0,
            c.cell
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"middle\" fill=\"#222\">{}</text>\n",
            x + cell_px / 2.0,
            y + cell_px / 2.0 + 14.0,
            label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
