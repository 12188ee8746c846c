//! Identity embedder trained with a triplet hinge loss.

use super::dense::{DenseNet, NetGrads};
use super::gradcheck::DifferentiableLoss;
use super::NetsError;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// An embedding network plus the triplet margin it is trained with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedder {
    pub net: DenseNet,
    /// Hinge margin, must be positive.
    pub margin: f64,
}

impl Embedder {
    pub fn new(net: DenseNet, margin: f64) -> Result<Self, NetsError> {
        if !(margin > 0.0) {
            return Err(NetsError::DimensionMismatch(format!(
                "triplet margin must be positive, got {margin}"
            )));
        }
        net.validate()?;
        Ok(Self { net, margin })
    }

    pub fn embed(&self, x: &DVector<f64>) -> Result<DVector<f64>, NetsError> {
        self.net.forward(x)
    }
}

/// Triplet hinge loss
/// `max(0, margin + |f(a)-f(p)| - |f(a)-f(n)|)` with Euclidean distances.
///
/// Zero exactly when the negative is at least `margin` farther from the
/// anchor than the positive.
pub fn triplet_loss(
    e: &Embedder,
    anchor: &DVector<f64>,
    positive: &DVector<f64>,
    negative: &DVector<f64>,
) -> Result<f64, NetsError> {
    let fa = e.embed(anchor)?;
    let fp = e.embed(positive)?;
    let fn_ = e.embed(negative)?;
    let d_pos = (&fa - &fp).norm();
    let d_neg = (&fa - &fn_).norm();
    Ok((e.margin + d_pos - d_neg).max(0.0))
}

/// Distance floor below which the Euclidean-norm gradient is treated as a
/// non-differentiable point.
const DIST_KINK_FLOOR: f64 = 1e-9;

/// Triplet loss together with analytic parameter gradients and the distance
/// to the nearest non-differentiable point (hinge boundary, ReLU kink, or a
/// collapsed embedding distance).
pub fn triplet_loss_with_grads(
    e: &Embedder,
    anchor: &DVector<f64>,
    positive: &DVector<f64>,
    negative: &DVector<f64>,
) -> Result<(f64, NetGrads, f64), NetsError> {
    let ca = e.net.forward_cached(anchor)?;
    let cp = e.net.forward_cached(positive)?;
    let cn = e.net.forward_cached(negative)?;
    let diff_pos = &ca.output - &cp.output;
    let diff_neg = &ca.output - &cn.output;
    let d_pos = diff_pos.norm();
    let d_neg = diff_neg.norm();
    let hinge_arg = e.margin + d_pos - d_neg;
    let loss = hinge_arg.max(0.0);

    let relu_margin = [&ca, &cp, &cn]
        .iter()
        .map(|c| e.net.kink_margin(c))
        .fold(f64::INFINITY, f64::min);
    let kink = relu_margin
        .min(hinge_arg.abs())
        .min(if d_pos < DIST_KINK_FLOOR { 0.0 } else { f64::INFINITY })
        .min(if d_neg < DIST_KINK_FLOOR { 0.0 } else { f64::INFINITY });

    let mut grads = NetGrads::zeros_like(&e.net);
    if hinge_arg > 0.0 && d_pos > DIST_KINK_FLOOR && d_neg > DIST_KINK_FLOOR {
        // dL/d f(a) = (fa-fp)/d_pos - (fa-fn)/d_neg
        // dL/d f(p) = -(fa-fp)/d_pos ; dL/d f(n) = (fa-fn)/d_neg
        let g_fa = &diff_pos / d_pos - &diff_neg / d_neg;
        let g_fp = -&diff_pos / d_pos;
        let g_fn = &diff_neg / d_neg;
        let (ga, _) = e.net.backward(&ca, &g_fa);
        let (gp, _) = e.net.backward(&cp, &g_fp);
        let (gn, _) = e.net.backward(&cn, &g_fn);
        grads.add_assign(&ga);
        grads.add_assign(&gp);
        grads.add_assign(&gn);
    }
    Ok((loss, grads, kink))
}

/// Gradient-check probe: one triplet through an embedder.
pub struct TripletProbe {
    pub embedder: Embedder,
    pub anchor: DVector<f64>,
    pub positive: DVector<f64>,
    pub negative: DVector<f64>,
}

impl DifferentiableLoss for TripletProbe {
    fn params(&self) -> Vec<f64> {
        self.embedder.net.params()
    }

    fn set_params(&mut self, p: &[f64]) {
        self.embedder.net.set_params(p);
    }

    fn loss(&self) -> Result<f64, NetsError> {
        triplet_loss(&self.embedder, &self.anchor, &self.positive, &self.negative)
    }

    fn loss_and_grad(&self) -> Result<(f64, Vec<f64>), NetsError> {
        let (loss, grads, _) =
            triplet_loss_with_grads(&self.embedder, &self.anchor, &self.positive, &self.negative)?;
        Ok((loss, DenseNet::flatten_grads(&grads)))
    }

    fn kink_margin(&self) -> Result<f64, NetsError> {
        let (_, _, kink) =
            triplet_loss_with_grads(&self.embedder, &self.anchor, &self.positive, &self.negative)?;
        Ok(kink)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::dense::{Activation, DenseLayer};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// An embedder computing the identity function on 2-D inputs, so
    /// embedding distances equal input distances.
    fn identity_embedder(margin: f64) -> Embedder {
        let layer = DenseLayer {
            w: DMatrix::identity(2, 2),
            b: nalgebra::DVector::zeros(2),
            act: Activation::Identity,
        };
        Embedder::new(DenseNet { layers: vec![layer] }, margin).unwrap()
    }

    #[test]
    fn hinge_known_values() {
        // margin 0.2: d_pos 0.3 vs d_neg 0.9 is comfortably separated.
        let e = identity_embedder(0.2);
        let a = DVector::from_vec(vec![0.0, 0.0]);
        let p = DVector::from_vec(vec![0.3, 0.0]);
        let n = DVector::from_vec(vec![0.9, 0.0]);
        assert_eq!(triplet_loss(&e, &a, &p, &n).unwrap(), 0.0);

        // d_pos 0.8 vs d_neg 0.9 violates the margin by 0.1.
        let p = DVector::from_vec(vec![0.8, 0.0]);
        let loss = triplet_loss(&e, &a, &p, &n).unwrap();
        assert!((loss - 0.1).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_margin_validated() {
        assert!(Embedder::new(identity_embedder(0.2).net, -0.1).is_err());
        assert!(Embedder::new(identity_embedder(0.2).net, 0.0).is_err());

        let e = identity_embedder(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..100 {
            let v = |rng: &mut ChaCha8Rng| {
                DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            };
            let loss = triplet_loss(&e, &v(&mut rng), &v(&mut rng), &v(&mut rng)).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn loss_is_isometry_invariant() {
        // Rotating all three embeddings leaves every distance, and hence the
        // loss, unchanged. Apply the rotation to the identity embedder's
        // weights so the embeddings themselves rotate.
        let theta: f64 = 0.7;
        let rot = DMatrix::from_row_slice(
            2,
            2,
            &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()],
        );
        let plain = identity_embedder(0.3);
        let mut rotated = plain.clone();
        rotated.net.layers[0].w = rot;

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        use rand::Rng;
        for _ in 0..50 {
            let v = |rng: &mut ChaCha8Rng| {
                DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            };
            let (a, p, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let l0 = triplet_loss(&plain, &a, &p, &n).unwrap();
            let l1 = triplet_loss(&rotated, &a, &p, &n).unwrap();
            assert!((l0 - l1).abs() < 1e-12);
        }
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let e = identity_embedder(0.2);
        let a = DVector::from_vec(vec![0.0, 0.0]);
        let p = DVector::from_vec(vec![0.3, 0.0]);
        let n = DVector::from_vec(vec![0.9, 0.0]);
        let (loss, grads, _) = triplet_loss_with_grads(&e, &a, &p, &n).unwrap();
        assert_eq!(loss, 0.0);
        assert!(DenseNet::flatten_grads(&grads).iter().all(|g| *g == 0.0));
    }
}
