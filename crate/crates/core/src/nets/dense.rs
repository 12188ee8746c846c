//! Fully-connected layers with manual forward/backward passes.

use super::NetsError;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-layer activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    /// Element-wise derivative evaluated at the pre-activation.
    fn derivative(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Activation::Relu => z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => DVector::from_element(z.len(), 1.0),
        }
    }
}

/// One dense layer: `a = act(W x + b)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub act: Activation,
}

impl DenseLayer {
    /// Xavier-uniform initialization: weights drawn from
    /// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn xavier(input_dim: usize, output_dim: usize, act: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (input_dim + output_dim) as f64).sqrt();
        let w = DMatrix::from_fn(output_dim, input_dim, |_, _| rng.gen_range(-limit..=limit));
        Self {
            w,
            b: DVector::zeros(output_dim),
            act,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

/// Cached per-layer values from a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (index 0 is the network input).
    inputs: Vec<DVector<f64>>,
    /// Pre-activation `z = W x + b` of each layer.
    pre_activations: Vec<DVector<f64>>,
    /// Final network output.
    pub output: DVector<f64>,
}

/// Parameter gradients of a [`DenseNet`], one entry per layer.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub dw: Vec<DMatrix<f64>>,
    pub db: Vec<DVector<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            dw: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            db: net.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += b;
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.dw {
            *g *= k;
        }
        for g in &mut self.db {
            *g *= k;
        }
    }
}

impl DenseNet {
    /// Builds a Xavier-initialized net from a dimension chain
    /// (`dims = [in, h1, ..., out]`) with `act` on every layer except the
    /// last, which is linear.
    pub fn xavier(dims: &[usize], act: Activation, rng: &mut impl Rng) -> Result<Self, NetsError> {
        if dims.len() < 2 {
            return Err(NetsError::DimensionMismatch(
                "a net needs at least an input and an output dimension".into(),
            ));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let layer_act = if i + 2 == dims.len() {
                Activation::Identity
            } else {
                act
            };
            layers.push(DenseLayer::xavier(dims[i], dims[i + 1], layer_act, rng));
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_dim)
    }

    /// Checks consecutive layer dimensions line up.
    pub fn validate(&self) -> Result<(), NetsError> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NetsError::DimensionMismatch(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, NetsError> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Forward pass that retains the per-layer values needed by
    /// [`DenseNet::backward`].
    pub fn forward_cached(&self, x: &DVector<f64>) -> Result<ForwardCache, NetsError> {
        if x.len() != self.input_dim() {
            return Err(NetsError::DimensionMismatch(format!(
                "input has {} features, net expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &self.layers {
            let z = &layer.w * &a + &layer.b;
            inputs.push(a);
            a = layer.act.apply(&z);
            pre_activations.push(z);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(NetsError::NonFinite);
        }
        Ok(ForwardCache {
            inputs,
            pre_activations,
            output: a,
        })
    }

    /// Backpropagates `grad_output` (dLoss/dOutput) through the cached pass,
    /// returning parameter gradients and the gradient at the network input.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &DVector<f64>) -> (NetGrads, DVector<f64>) {
        let mut grads = NetGrads::zeros_like(self);
        let mut delta = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let dz = delta.component_mul(&layer.act.derivative(&cache.pre_activations[i]));
            grads.dw[i] = &dz * cache.inputs[i].transpose();
            grads.db[i] = dz.clone();
            delta = layer.w.transpose() * dz;
        }
        (grads, delta)
    }

    /// Smallest |pre-activation| across all ReLU units in the cached pass —
    /// the distance to the nearest activation kink. Identity layers have no
    /// kinks and contribute nothing.
    pub fn kink_margin(&self, cache: &ForwardCache) -> f64 {
        let mut margin = f64::INFINITY;
        for (layer, z) in self.layers.iter().zip(&cache.pre_activations) {
            if layer.act == Activation::Relu {
                for v in z.iter() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    /// Applies a momentum-SGD update: `v = mu v - lr g; p += v`.
    pub fn apply_update(&mut self, grads: &NetGrads, velocity: &mut NetGrads, lr: f64, momentum: f64) {
        for i in 0..self.layers.len() {
            velocity.dw[i] = &velocity.dw[i] * momentum - &grads.dw[i] * lr;
            velocity.db[i] = &velocity.db[i] * momentum - &grads.db[i] * lr;
            self.layers[i].w += &velocity.dw[i];
            self.layers[i].b += &velocity.db[i];
        }
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    /// Flattens parameters layer by layer (weights row-major, then biases).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for r in 0..layer.w.nrows() {
                for c in 0..layer.w.ncols() {
                    out.push(layer.w[(r, c)]);
                }
            }
            out.extend(layer.b.iter());
        }
        out
    }

    /// Inverse of [`DenseNet::params`].
    pub fn set_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for layer in &mut self.layers {
            for r in 0..layer.w.nrows() {
                for c in 0..layer.w.ncols() {
                    layer.w[(r, c)] = p[k];
                    k += 1;
                }
            }
            for i in 0..layer.b.len() {
                layer.b[i] = p[k];
                k += 1;
            }
        }
        debug_assert_eq!(k, p.len(), "parameter vector length mismatch");
    }

    /// Flattens gradients in the same order as [`DenseNet::params`].
    pub fn flatten_grads(grads: &NetGrads) -> Vec<f64> {
        let mut out = Vec::new();
        for (dw, db) in grads.dw.iter().zip(&grads.db) {
            for r in 0..dw.nrows() {
                for c in 0..dw.ncols() {
                    out.push(dw[(r, c)]);
                }
            }
            out.extend(db.iter());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = DenseLayer::xavier(8, 4, Activation::Relu, &mut rng);
        let limit = (6.0 / 12.0f64).sqrt();
        assert!(layer.w.iter().all(|w| w.abs() <= limit));
        assert!(layer.b.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn forward_matches_hand_computation() {
        let layer = DenseLayer {
            w: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]),
            b: DVector::from_vec(vec![0.5, -2.0]),
            act: Activation::Relu,
        };
        let net = DenseNet { layers: vec![layer] };
        let y = net.forward(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        // z = (3.5, -2.5) -> relu -> (3.5, 0)
        assert_eq!(y[0], 3.5);
        assert_eq!(y[1], 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = DenseNet::xavier(&[3, 5, 2], Activation::Relu, &mut rng).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7, 1.1]);
        let target = DVector::from_vec(vec![0.2, -0.4]);

        // loss = 0.5 |out - target|^2
        let cache = net.forward_cached(&x).unwrap();
        let (grads, _) = net.backward(&cache, &(&cache.output - &target));
        let analytic = DenseNet::flatten_grads(&grads);

        let h = 1e-6;
        let p0 = net.params();
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] += h;
            net.set_params(&p);
            let lp = 0.5 * (net.forward(&x).unwrap() - &target).norm_squared();
            p[i] -= 2.0 * h;
            net.set_params(&p);
            let lm = 0.5 * (net.forward(&x).unwrap() - &target).norm_squared();
            let num = (lp - lm) / (2.0 * h);
            assert!(
                (analytic[i] - num).abs() < 1e-6,
                "param {i}: analytic {} vs numeric {num}",
                analytic[i]
            );
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNet::xavier(&[4, 6, 3], Activation::Relu, &mut rng).unwrap();
        let p = net.params();
        assert_eq!(p.len(), net.param_count());
        let mut other = DenseNet::xavier(&[4, 6, 3], Activation::Relu, &mut rng).unwrap();
        other.set_params(&p);
        assert_eq!(other.params(), p);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNet::xavier(&[4, 6, 3], Activation::Relu, &mut rng).unwrap();
        let err = net.forward(&DVector::zeros(5)).unwrap_err();
        assert!(matches!(err, NetsError::DimensionMismatch(_)));
    }
}
