//! The two-eye gaze matcher.
//!
//! Per frame the matcher consumes, for each eye, a unit gaze direction in
//! the camera frame plus the eye's pixel position (5 features per eye), the
//! user's distance from the camera (1 feature, deliberately left in meters
//! so the depth branch sees raw scale), and optionally the panel point the
//! head's forward axis intersects (2 features). A weight-shared eye branch
//! embeds each eye, a small branch embeds depth, and a fusion head regresses
//! the gazed panel point in normalized `[0,1]^2` panel coordinates.
//!
//! Eye features are z-scored with statistics pooled over both eyes so the
//! shared branch sees identically scaled inputs from either side.

use super::dense::{Activation, DenseNet, ForwardCache, NetGrads};
use super::gradcheck::DifferentiableLoss;
use super::NetsError;
use crate::geometry::{PanelConfig, PanelPoint};
use nalgebra::{DVector, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Features for one eye: unit gaze direction (camera frame) and the eye's
/// pixel position in the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EyeFeature {
    /// Unit gaze direction in the camera frame.
    pub gaze: [f64; 3],
    /// Eye-center pixel position.
    pub eye_px: [f64; 2],
}

/// Number of raw features per eye.
pub const EYE_FEATURE_DIM: usize = 5;

impl EyeFeature {
    pub fn new(gaze: Vector3<f64>, eye_px: Vector2<f64>) -> Self {
        Self {
            gaze: gaze.into(),
            eye_px: eye_px.into(),
        }
    }

    /// Raw feature vector `[gx, gy, gz, px, py]`.
    pub fn raw(&self) -> [f64; EYE_FEATURE_DIM] {
        [
            self.gaze[0],
            self.gaze[1],
            self.gaze[2],
            self.eye_px[0],
            self.eye_px[1],
        ]
    }
}

/// Z-score statistics for the per-eye feature vector, pooled over both eyes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; EYE_FEATURE_DIM],
    pub std: [f64; EYE_FEATURE_DIM],
}

impl NormStats {
    /// Identity normalization (mean 0, std 1) — leaves features untouched.
    pub fn identity() -> Self {
        Self {
            mean: [0.0; EYE_FEATURE_DIM],
            std: [1.0; EYE_FEATURE_DIM],
        }
    }

    pub fn validate(&self) -> Result<(), NetsError> {
        for (index, s) in self.std.iter().enumerate() {
            if *s == 0.0 {
                return Err(NetsError::DegenerateStats { index });
            }
        }
        Ok(())
    }

    /// Z-scores one eye's raw features.
    pub fn apply(&self, raw: &[f64; EYE_FEATURE_DIM]) -> [f64; EYE_FEATURE_DIM] {
        let mut out = [0.0; EYE_FEATURE_DIM];
        for i in 0..EYE_FEATURE_DIM {
            out[i] = (raw[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}

/// Per-feature statistics and per-cell coverage of a feature dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub norm: NormStats,
    /// Number of samples per 1-based grid-cell index.
    pub per_cell: std::collections::BTreeMap<u32, u64>,
    pub samples: u64,
}

/// Z-scores a left/right pair into a 10-element feature vector
/// (left eye then right eye).
pub fn normalize_inputs(
    stats: &NormStats,
    left: &EyeFeature,
    right: &EyeFeature,
) -> Result<[f64; 2 * EYE_FEATURE_DIM], NetsError> {
    stats.validate()?;
    let l = stats.apply(&left.raw());
    let r = stats.apply(&right.raw());
    let mut out = [0.0; 2 * EYE_FEATURE_DIM];
    out[..EYE_FEATURE_DIM].copy_from_slice(&l);
    out[EYE_FEATURE_DIM..].copy_from_slice(&r);
    Ok(out)
}

/// Architecture knobs for the matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchNetArch {
    /// Hidden width of the shared eye branch.
    pub eye_hidden: usize,
    /// Output width of the shared eye branch.
    pub eye_out: usize,
    /// Output width of the depth branch.
    pub depth_out: usize,
    /// Hidden width of the fusion head.
    pub fusion_hidden: usize,
    /// Whether the head's forward-axis panel intersection is fused in as
    /// two extra features.
    pub use_headpose: bool,
}

impl Default for MatchNetArch {
    fn default() -> Self {
        Self {
            eye_hidden: 16,
            eye_out: 16,
            depth_out: 4,
            fusion_hidden: 32,
            use_headpose: true,
        }
    }
}

impl MatchNetArch {
    /// Input width of the fusion head implied by the branch widths.
    pub fn fusion_input_dim(&self) -> usize {
        2 * self.eye_out + self.depth_out + if self.use_headpose { 2 } else { 0 }
    }
}

/// Serialization format tag for matcher model files.
pub const MATCHNET_FORMAT: &str = "matchnet-v1";

/// The full gaze matcher.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchNet {
    pub format: String,
    pub arch: MatchNetArch,
    /// Weight-shared branch applied to each eye's normalized features.
    pub eye_branch: DenseNet,
    /// Branch applied to the raw depth value.
    pub depth_branch: DenseNet,
    /// Head mapping concatenated branch outputs to a normalized panel point.
    pub fusion_head: DenseNet,
    pub norm_stats: NormStats,
}

/// One frame's worth of matcher inputs.
#[derive(Debug, Clone, Copy)]
pub struct MatchFeatures {
    pub left: EyeFeature,
    pub right: EyeFeature,
    /// Eye-to-camera distance, meters.
    pub depth: f64,
    /// Panel point hit by the head's forward axis, when head-pose fusion is
    /// enabled (normalized coordinates in `[0,1]^2`).
    pub head_uv: Option<[f64; 2]>,
}

struct MatchCache {
    eye_l: ForwardCache,
    eye_r: ForwardCache,
    depth: ForwardCache,
    fusion: ForwardCache,
}

impl MatchNet {
    /// Builds a Xavier-initialized matcher. All weight draws come from the
    /// seeded generator, so equal seeds give bit-identical nets.
    pub fn init(arch: &MatchNetArch, norm_stats: NormStats, seed: u64) -> Result<Self, NetsError> {
        norm_stats.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eye_branch = DenseNet::xavier(
            &[EYE_FEATURE_DIM, arch.eye_hidden, arch.eye_out],
            Activation::Relu,
            &mut rng,
        )?;
        let depth_branch = DenseNet::xavier(&[1, arch.depth_out], Activation::Relu, &mut rng)?;
        let fusion_head = DenseNet::xavier(
            &[arch.fusion_input_dim(), arch.fusion_hidden, 2],
            Activation::Relu,
            &mut rng,
        )?;
        Ok(Self {
            format: MATCHNET_FORMAT.to_string(),
            arch: arch.clone(),
            eye_branch,
            depth_branch,
            fusion_head,
            norm_stats,
        })
    }

    /// Checks the branch/head dimensions line up with the declared
    /// architecture.
    pub fn validate(&self) -> Result<(), NetsError> {
        self.eye_branch.validate()?;
        self.depth_branch.validate()?;
        self.fusion_head.validate()?;
        self.norm_stats.validate()?;
        if self.eye_branch.input_dim() != EYE_FEATURE_DIM {
            return Err(NetsError::DimensionMismatch(format!(
                "eye branch expects {} inputs, has {}",
                EYE_FEATURE_DIM,
                self.eye_branch.input_dim()
            )));
        }
        let want = 2 * self.eye_branch.output_dim()
            + self.depth_branch.output_dim()
            + if self.arch.use_headpose { 2 } else { 0 };
        if self.fusion_head.input_dim() != want {
            return Err(NetsError::DimensionMismatch(format!(
                "fusion head expects {want} inputs, has {}",
                self.fusion_head.input_dim()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, f: &MatchFeatures) -> Result<(DVector<f64>, MatchCache), NetsError> {
        let norm = normalize_inputs(&self.norm_stats, &f.left, &f.right)?;
        let xl = DVector::from_row_slice(&norm[..EYE_FEATURE_DIM]);
        let xr = DVector::from_row_slice(&norm[EYE_FEATURE_DIM..]);
        let eye_l = self.eye_branch.forward_cached(&xl)?;
        let eye_r = self.eye_branch.forward_cached(&xr)?;
        let depth = self
            .depth_branch
            .forward_cached(&DVector::from_vec(vec![f.depth]))?;

        let mut fusion_in = Vec::with_capacity(self.fusion_head.input_dim());
        fusion_in.extend(eye_l.output.iter());
        fusion_in.extend(eye_r.output.iter());
        fusion_in.extend(depth.output.iter());
        if self.arch.use_headpose {
            let head = f.head_uv.ok_or_else(|| {
                NetsError::DimensionMismatch(
                    "matcher was built with head-pose fusion but no head point was supplied".into(),
                )
            })?;
            fusion_in.extend_from_slice(&head);
        }
        let fusion = self
            .fusion_head
            .forward_cached(&DVector::from_vec(fusion_in))?;
        let out = fusion.output.clone();
        Ok((
            out,
            MatchCache {
                eye_l,
                eye_r,
                depth,
                fusion,
            },
        ))
    }

    /// Raw (unclamped) normalized panel-point prediction. Training uses this
    /// so the loss keeps its gradient outside the unit square.
    pub fn predict_normalized(&self, f: &MatchFeatures) -> Result<[f64; 2], NetsError> {
        let (out, _) = self.forward_cached(f)?;
        Ok([out[0], out[1]])
    }

    /// Full inference: predicts the gazed panel point, clamped to the panel.
    pub fn match_forward(
        &self,
        f: &MatchFeatures,
        panel: &PanelConfig,
    ) -> Result<PanelPoint, NetsError> {
        let raw = self.predict_normalized(f)?;
        if !raw[0].is_finite() || !raw[1].is_finite() {
            return Err(NetsError::NonFinite);
        }
        Ok(PanelPoint {
            u: raw[0].clamp(0.0, 1.0) * panel.panel_width(),
            v: raw[1].clamp(0.0, 1.0) * panel.panel_height(),
        })
    }

    /// Loss contribution and parameter gradients of one sample under
    /// `0.5 |out - target|^2`. Eye-branch gradients from the left and right
    /// applications accumulate into the same shared parameters.
    fn backward_sample(
        &self,
        f: &MatchFeatures,
        target: &[f64; 2],
    ) -> Result<(f64, MatchGrads, f64), NetsError> {
        let (out, cache) = self.forward_cached(f)?;
        let err = DVector::from_vec(vec![out[0] - target[0], out[1] - target[1]]);
        let loss = 0.5 * err.norm_squared();

        let (fusion_grads, fusion_dx) = self.fusion_head.backward(&cache.fusion, &err);
        let e = self.eye_branch.output_dim();
        let d = self.depth_branch.output_dim();
        let d_eye_l = DVector::from_iterator(e, fusion_dx.iter().take(e).copied());
        let d_eye_r = DVector::from_iterator(e, fusion_dx.iter().skip(e).take(e).copied());
        let d_depth = DVector::from_iterator(d, fusion_dx.iter().skip(2 * e).take(d).copied());

        let (eye_grads_l, _) = self.eye_branch.backward(&cache.eye_l, &d_eye_l);
        let (eye_grads_r, _) = self.eye_branch.backward(&cache.eye_r, &d_eye_r);
        let (depth_grads, _) = self.depth_branch.backward(&cache.depth, &d_depth);

        let mut eye_grads = eye_grads_l;
        eye_grads.add_assign(&eye_grads_r);

        let kink = self
            .eye_branch
            .kink_margin(&cache.eye_l)
            .min(self.eye_branch.kink_margin(&cache.eye_r))
            .min(self.depth_branch.kink_margin(&cache.depth))
            .min(self.fusion_head.kink_margin(&cache.fusion));

        Ok((
            loss,
            MatchGrads {
                eye: eye_grads,
                depth: depth_grads,
                fusion: fusion_grads,
            },
            kink,
        ))
    }
}

/// Gradients of all three matcher components.
struct MatchGrads {
    eye: NetGrads,
    depth: NetGrads,
    fusion: NetGrads,
}

impl MatchGrads {
    fn zeros_like(net: &MatchNet) -> Self {
        Self {
            eye: NetGrads::zeros_like(&net.eye_branch),
            depth: NetGrads::zeros_like(&net.depth_branch),
            fusion: NetGrads::zeros_like(&net.fusion_head),
        }
    }

    fn add_assign(&mut self, other: &MatchGrads) {
        self.eye.add_assign(&other.eye);
        self.depth.add_assign(&other.depth);
        self.fusion.add_assign(&other.fusion);
    }

    fn scale(&mut self, k: f64) {
        self.eye.scale(k);
        self.depth.scale(k);
        self.fusion.scale(k);
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 60,
            batch_size: 32,
            seed: 7,
        }
    }
}

/// Everything `train_matchnet` needs besides the data: the architecture and
/// the statistics to normalize with.
#[derive(Debug, Clone)]
pub struct MatchTrainContext {
    pub arch: MatchNetArch,
    pub norm_stats: NormStats,
}

/// A trained matcher plus its per-epoch mean loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: MatchNet,
    /// Mean squared error per epoch, in normalized panel units.
    pub loss_curve: Vec<f64>,
}

/// Trains a matcher on `(features, normalized target)` pairs with mini-batch
/// gradient descent plus momentum. Fully deterministic for a fixed seed.
pub fn train_matchnet(
    data: &[(MatchFeatures, [f64; 2])],
    hyper: &TrainHyper,
    ctx: &MatchTrainContext,
) -> Result<TrainOutcome, NetsError> {
    if data.len() < 2 {
        return Err(NetsError::TooFewSamples(format!(
            "training needs at least 2 samples, got {}",
            data.len()
        )));
    }
    if hyper.batch_size == 0 || hyper.epochs == 0 {
        return Err(NetsError::DimensionMismatch(
            "batch size and epoch count must be positive".into(),
        ));
    }
    let mut net = MatchNet::init(&ctx.arch, ctx.norm_stats.clone(), hyper.seed)?;
    net.validate()?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut vel_eye = NetGrads::zeros_like(&net.eye_branch);
    let mut vel_depth = NetGrads::zeros_like(&net.depth_branch);
    let mut vel_fusion = NetGrads::zeros_like(&net.fusion_head);
    let mut loss_curve = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let mut batch_grads = MatchGrads::zeros_like(&net);
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let (features, target) = &data[idx];
                let (loss, grads, _) = net.backward_sample(features, target)?;
                batch_loss += loss;
                batch_grads.add_assign(&grads);
            }
            batch_grads.scale(1.0 / chunk.len() as f64);
            net.eye_branch
                .apply_update(&batch_grads.eye, &mut vel_eye, hyper.learning_rate, hyper.momentum);
            net.depth_branch.apply_update(
                &batch_grads.depth,
                &mut vel_depth,
                hyper.learning_rate,
                hyper.momentum,
            );
            net.fusion_head.apply_update(
                &batch_grads.fusion,
                &mut vel_fusion,
                hyper.learning_rate,
                hyper.momentum,
            );
            epoch_loss += batch_loss;
        }
        let mean_loss = epoch_loss / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(NetsError::Diverged {
                epoch,
                loss: mean_loss,
            });
        }
        loss_curve.push(mean_loss);
    }

    Ok(TrainOutcome { net, loss_curve })
}

/// Gradient-check probe: the full matcher under an MSE loss on a small
/// batch. Parameters cover all three components in order (eye branch, depth
/// branch, fusion head).
pub struct MatcherMseProbe {
    pub net: MatchNet,
    pub batch: Vec<(MatchFeatures, [f64; 2])>,
}

impl DifferentiableLoss for MatcherMseProbe {
    fn params(&self) -> Vec<f64> {
        let mut p = self.net.eye_branch.params();
        p.extend(self.net.depth_branch.params());
        p.extend(self.net.fusion_head.params());
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let e = self.net.eye_branch.param_count();
        let d = self.net.depth_branch.param_count();
        self.net.eye_branch.set_params(&p[..e]);
        self.net.depth_branch.set_params(&p[e..e + d]);
        self.net.fusion_head.set_params(&p[e + d..]);
    }

    fn loss(&self) -> Result<f64, NetsError> {
        let mut total = 0.0;
        for (f, t) in &self.batch {
            let out = self.net.predict_normalized(f)?;
            total += 0.5 * ((out[0] - t[0]).powi(2) + (out[1] - t[1]).powi(2));
        }
        Ok(total / self.batch.len() as f64)
    }

    fn loss_and_grad(&self) -> Result<(f64, Vec<f64>), NetsError> {
        let mut total = 0.0;
        let mut grads = MatchGrads::zeros_like(&self.net);
        for (f, t) in &self.batch {
            let (loss, g, _) = self.net.backward_sample(f, t)?;
            total += loss;
            grads.add_assign(&g);
        }
        grads.scale(1.0 / self.batch.len() as f64);
        let mut flat = DenseNet::flatten_grads(&grads.eye);
        flat.extend(DenseNet::flatten_grads(&grads.depth));
        flat.extend(DenseNet::flatten_grads(&grads.fusion));
        Ok((total / self.batch.len() as f64, flat))
    }

    fn kink_margin(&self) -> Result<f64, NetsError> {
        let mut margin = f64::INFINITY;
        for (f, t) in &self.batch {
            let (_, _, kink) = self.net.backward_sample(f, t)?;
            margin = margin.min(kink);
        }
        Ok(margin)
    }
}

/// JSON serialization of a trained matcher (format tag `matchnet-v1`).
pub fn matchnet_to_json(net: &MatchNet) -> Result<String, NetsError> {
    serde_json::to_string_pretty(net).map_err(|e| NetsError::InvalidModel(e.to_string()))
}

/// Parses a matcher model file, checking the format tag and dimensions.
pub fn matchnet_from_json(json: &str) -> Result<MatchNet, NetsError> {
    let net: MatchNet =
        serde_json::from_str(json).map_err(|e| NetsError::InvalidModel(e.to_string()))?;
    if net.format != MATCHNET_FORMAT {
        return Err(NetsError::InvalidModel(format!(
            "unsupported model format {:?}, expected {MATCHNET_FORMAT:?}",
            net.format
        )));
    }
    net.validate()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::dense::DenseLayer;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn arch_small(use_headpose: bool) -> MatchNetArch {
        MatchNetArch {
            eye_hidden: 6,
            eye_out: 4,
            depth_out: 2,
            fusion_hidden: 8,
            use_headpose,
        }
    }

    fn random_features(rng: &mut impl Rng, head: bool) -> MatchFeatures {
        let gaze = Vector3::new(
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            -1.0,
        )
        .normalize();
        MatchFeatures {
            left: EyeFeature::new(gaze, Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
            right: EyeFeature::new(gaze, Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
            depth: rng.gen_range(0.7..1.6),
            head_uv: head.then(|| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]),
        }
    }

    #[test]
    fn normalize_known_values() {
        // Stats from a 3-sample toy set per feature: values {1, 2, 3} have
        // mean 2 and population std sqrt(2/3).
        let std = (2.0f64 / 3.0).sqrt();
        let stats = NormStats {
            mean: [2.0; EYE_FEATURE_DIM],
            std: [std; EYE_FEATURE_DIM],
        };
        let eye = EyeFeature {
            gaze: [1.0, 2.0, 3.0],
            eye_px: [2.0, 2.0],
        };
        let z = normalize_inputs(&stats, &eye, &eye).unwrap();
        assert!((z[0] - (1.0 - 2.0) / std).abs() < 1e-12);
        assert!((z[1] - 0.0).abs() < 1e-12);
        assert!((z[2] - (3.0 - 2.0) / std).abs() < 1e-12);

        // x = mean -> zero vector; x = mean + std -> all ones.
        let at_mean = EyeFeature {
            gaze: [2.0, 2.0, 2.0],
            eye_px: [2.0, 2.0],
        };
        let z = normalize_inputs(&stats, &at_mean, &at_mean).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-12));
        let plus_std = EyeFeature {
            gaze: [2.0 + std, 2.0 + std, 2.0 + std],
            eye_px: [2.0 + std, 2.0 + std],
        };
        let z = normalize_inputs(&stats, &plus_std, &plus_std).unwrap();
        assert!(z.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_std_is_degenerate() {
        let stats = NormStats {
            mean: [0.0; EYE_FEATURE_DIM],
            std: [1.0, 1.0, 0.0, 1.0, 1.0],
        };
        let eye = EyeFeature {
            gaze: [0.0, 0.0, -1.0],
            eye_px: [0.0, 0.0],
        };
        let err = normalize_inputs(&stats, &eye, &eye).unwrap_err();
        assert!(matches!(err, NetsError::DegenerateStats { index: 2 }));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = MatchNet::init(&arch_small(true), NormStats::identity(), 42).unwrap();
        let b = MatchNet::init(&arch_small(true), NormStats::identity(), 42).unwrap();
        assert_eq!(a.eye_branch.params(), b.eye_branch.params());
        assert_eq!(a.fusion_head.params(), b.fusion_head.params());
        let c = MatchNet::init(&arch_small(true), NormStats::identity(), 43).unwrap();
        assert_ne!(a.eye_branch.params(), c.eye_branch.params());
    }

    #[test]
    fn fusion_dimension_is_validated() {
        let mut net = MatchNet::init(&arch_small(false), NormStats::identity(), 1).unwrap();
        net.validate().unwrap();
        // Claim head-pose fusion without widening the head: must fail.
        net.arch.use_headpose = true;
        assert!(matches!(
            net.validate().unwrap_err(),
            NetsError::DimensionMismatch(_)
        ));
    }

    #[test]
    fn zero_weight_net_outputs_head_bias() {
        let mut net = MatchNet::init(&arch_small(true), NormStats::identity(), 3).unwrap();
        for layer in net
            .eye_branch
            .layers
            .iter_mut()
            .chain(net.depth_branch.layers.iter_mut())
            .chain(net.fusion_head.layers.iter_mut())
        {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        net.fusion_head.layers.last_mut().unwrap().b =
            nalgebra::DVector::from_vec(vec![0.25, 0.75]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let panel = PanelConfig::default();
        for _ in 0..5 {
            let f = random_features(&mut rng, true);
            let p = net.match_forward(&f, &panel).unwrap();
            assert!((p.u - 0.25 * panel.panel_width()).abs() < 1e-12);
            assert!((p.v - 0.75 * panel.panel_height()).abs() < 1e-12);
        }
    }

    /// A hand-built matcher whose output mirrors when the eyes swap:
    /// the eye branch passes through the horizontal gaze component and the
    /// fusion head computes u = 0.5 + (left - right) / 2.
    #[test]
    fn mirrored_weights_mirror_the_output() {
        let arch = MatchNetArch {
            eye_hidden: 1,
            eye_out: 1,
            depth_out: 1,
            fusion_hidden: 1,
            use_headpose: false,
        };
        let mut net = MatchNet::init(&arch, NormStats::identity(), 0).unwrap();
        // Eye branch: two identity layers picking out the gaze x component.
        net.eye_branch.layers[0] = DenseLayer {
            w: DMatrix::from_row_slice(1, 5, &[1.0, 0.0, 0.0, 0.0, 0.0]),
            b: nalgebra::DVector::zeros(1),
            act: Activation::Identity,
        };
        net.eye_branch.layers[1] = DenseLayer {
            w: DMatrix::from_row_slice(1, 1, &[1.0]),
            b: nalgebra::DVector::zeros(1),
            act: Activation::Identity,
        };
        // Depth branch contributes nothing.
        net.depth_branch.layers[0] = DenseLayer {
            w: DMatrix::from_row_slice(1, 1, &[0.0]),
            b: nalgebra::DVector::zeros(1),
            act: Activation::Identity,
        };
        // Fusion: u = 0.5 + (eL - eR)/2, v = 0.5.
        net.fusion_head.layers[0] = DenseLayer {
            w: DMatrix::from_row_slice(1, 3, &[0.5, -0.5, 0.0]),
            b: nalgebra::DVector::zeros(1),
            act: Activation::Identity,
        };
        net.fusion_head.layers[1] = DenseLayer {
            w: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            b: nalgebra::DVector::from_vec(vec![0.5, 0.5]),
            act: Activation::Identity,
        };
        net.validate().unwrap();

        let panel = PanelConfig::default();
        let left = EyeFeature {
            gaze: [0.3, 0.1, -0.9],
            eye_px: [100.0, 200.0],
        };
        let right = EyeFeature {
            gaze: [-0.1, 0.1, -0.9],
            eye_px: [140.0, 200.0],
        };
        let forward = net
            .match_forward(
                &MatchFeatures {
                    left,
                    right,
                    depth: 1.0,
                    head_uv: None,
                },
                &panel,
            )
            .unwrap();
        let swapped = net
            .match_forward(
                &MatchFeatures {
                    left: right,
                    right: left,
                    depth: 1.0,
                    head_uv: None,
                },
                &panel,
            )
            .unwrap();
        let u_n = forward.u / panel.panel_width();
        let u_swapped = swapped.u / panel.panel_width();
        assert!((u_swapped - (1.0 - u_n)).abs() < 1e-12);
        assert!((forward.v - swapped.v).abs() < 1e-12);
    }

    #[test]
    fn shared_branch_is_literally_shared() {
        let net = MatchNet::init(&arch_small(true), NormStats::identity(), 5).unwrap();
        let x = nalgebra::DVector::from_vec(vec![0.1, -0.2, 0.9, 0.4, -0.3]);
        let a = net.eye_branch.forward(&x).unwrap();
        let b = net.eye_branch.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_is_reproducible_and_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut data = Vec::new();
        for _ in 0..64 {
            let f = random_features(&mut rng, true);
            // A learnable smooth target: gaze x/y mapped affinely.
            let t = [
                0.5 + 0.8 * f.left.gaze[0],
                0.5 + 0.8 * f.left.gaze[1],
            ];
            data.push((f, t));
        }
        let ctx = MatchTrainContext {
            arch: arch_small(true),
            norm_stats: NormStats::identity(),
        };
        let hyper = TrainHyper {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 40,
            batch_size: 16,
            seed: 99,
        };
        let a = train_matchnet(&data, &hyper, &ctx).unwrap();
        let b = train_matchnet(&data, &hyper, &ctx).unwrap();
        assert_eq!(a.net.eye_branch.params(), b.net.eye_branch.params());
        assert_eq!(a.net.fusion_head.params(), b.net.fusion_head.params());
        assert_eq!(a.loss_curve, b.loss_curve);
        assert!(
            a.loss_curve.last().unwrap() < &(a.loss_curve[0] * 0.5),
            "loss should at least halve: {:?}",
            (a.loss_curve.first(), a.loss_curve.last())
        );
    }

    #[test]
    fn missing_head_point_is_an_error() {
        let net = MatchNet::init(&arch_small(true), NormStats::identity(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(&mut rng, false);
        let err = net.match_forward(&f, &PanelConfig::default()).unwrap_err();
        assert!(matches!(err, NetsError::DimensionMismatch(_)));
    }

    #[test]
    fn model_json_round_trip_and_format_check() {
        let net = MatchNet::init(&arch_small(true), NormStats::identity(), 11).unwrap();
        let json = matchnet_to_json(&net).unwrap();
        let back = matchnet_from_json(&json).unwrap();
        assert_eq!(net.eye_branch.params(), back.eye_branch.params());

        let mut tampered = net.clone();
        tampered.format = "matchnet-v0".into();
        let bad = matchnet_to_json(&tampered).unwrap();
        assert!(matches!(
            matchnet_from_json(&bad).unwrap_err(),
            NetsError::InvalidModel(_)
        ));
    }
}
