use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DenseArray;
use crate::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Transform applied to the final affine layer.
///
/// `NonNegative` squares the output, so zero is reachable exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    Identity,
    NonNegative,
}

impl OutputTransform {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputTransform::Identity => z,
            OutputTransform::NonNegative => z * z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            OutputTransform::Identity => 1.0,
            OutputTransform::NonNegative => 2.0 * z,
        }
    }
}

/// Dense feed-forward network.
///
/// Parameters are kept in one list ordered `[W0, b0, W1, b1, ...]`, where
/// `Wi` has shape `(layer_dims[i+1], layer_dims[i])`. Gradients and Adam
/// moments use the same ordering.
#[derive(Debug, Clone)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    hidden_activation: Activation,
    output_transform: OutputTransform,
    params: Vec<DenseArray>,
    // Changes on every mutable access; ties forward caches to a parameter state.
    stamp: u64,
}

/// Activations recorded by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    /// Input of each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn layer_inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

/// Parameter gradients in [`Mlp`] parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<DenseArray>);

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients(net.params.iter().map(|p| DenseArray::zeros(p.shape())).collect())
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::shape(self.0.len(), other.0.len()));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_scaled(b, scale)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| g.scale(factor));
    }

    pub fn as_slice(&self) -> &[DenseArray] {
        &self.0
    }

    /// Flattened view of all entries, in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
    }
}

impl Mlp {
    /// Seeded initialization, uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_transform: OutputTransform,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut params = Vec::with_capacity(2 * (layer_dims.len() - 1));
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let biases = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(DenseArray::from_vec(&[fan_out, fan_in], weights)?);
            params.push(DenseArray::from_vec(&[fan_out], biases)?);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            hidden_activation,
            output_transform,
            params,
            stamp: fresh_stamp(),
        })
    }

    pub fn from_parts(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_transform: OutputTransform,
        weights: Vec<DenseArray>,
        biases: Vec<DenseArray>,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::shape(
                format!("{layers} weight and bias arrays"),
                format!("{} weights, {} biases", weights.len(), biases.len()),
            ));
        }
        let mut params = Vec::with_capacity(2 * layers);
        for (i, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            let (fan_in, fan_out) = (layer_dims[i], layer_dims[i + 1]);
            if w.shape() != [fan_out, fan_in] {
                return Err(Error::shape(
                    format!("[{fan_out}, {fan_in}]"),
                    format!("{:?}", w.shape()),
                ));
            }
            if b.shape() != [fan_out] {
                return Err(Error::shape(format!("[{fan_out}]"), format!("{:?}", b.shape())));
            }
            if !w.is_finite() || !b.is_finite() {
                return Err(Error::InvalidInput("non-finite network parameter".into()));
            }
            params.push(w);
            params.push(b);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            hidden_activation,
            output_transform,
            params,
            stamp: fresh_stamp(),
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_transform(&self) -> OutputTransform {
        self.output_transform
    }

    pub fn weight(&self, layer: usize) -> &DenseArray {
        &self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &DenseArray {
        &self.params[2 * layer + 1]
    }

    pub fn params(&self) -> &[DenseArray] {
        &self.params
    }

    /// Mutable parameter access. Invalidates every outstanding [`ForwardCache`].
    pub fn params_mut(&mut self) -> &mut [DenseArray] {
        self.stamp = fresh_stamp();
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(DenseArray::len).sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(
                format!("input of length {}", self.input_dim()),
                input.len(),
            ));
        }
        Ok(())
    }

    /// Forward pass without recording a cache.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let last = self.num_layers() - 1;
        let mut act = input.to_vec();
        for layer in 0..=last {
            let mut z = self.affine(layer, &act);
            if layer < last {
                z.iter_mut().for_each(|v| *v = self.hidden_activation.apply(*v));
            } else {
                z.iter_mut().for_each(|v| *v = self.output_transform.apply(*v));
            }
            act = z;
        }
        Ok(act)
    }

    /// Scalar output of a single-output network.
    pub fn eval_scalar(&self, input: &[f64]) -> Result<f64> {
        if self.output_dim() != 1 {
            return Err(Error::shape("scalar output", self.output_dim()));
        }
        Ok(self.eval(input)?[0])
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input)?;
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut act = input.to_vec();
        for layer in 0..layers {
            let z = self.affine(layer, &act);
            let next: Vec<f64> = if layer + 1 < layers {
                z.iter().map(|&v| self.hidden_activation.apply(v)).collect()
            } else {
                z.iter().map(|&v| self.output_transform.apply(v)).collect()
            };
            inputs.push(act);
            pre.push(z);
            act = next;
        }
        let cache = ForwardCache {
            stamp: self.stamp,
            inputs,
            pre,
        };
        Ok((act, cache))
    }

    /// Gradients of `output · output_grad` with respect to all parameters and the input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache);
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::shape(self.output_dim(), output_grad.len()));
        }
        let layers = self.num_layers();
        let mut grads = Gradients::zeros_like(self);
        let mut delta: Vec<f64> = output_grad
            .iter()
            .zip(&cache.pre[layers - 1])
            .map(|(g, &z)| g * self.output_transform.derivative(z))
            .collect();
        for layer in (0..layers).rev() {
            let fan_in = self.layer_dims[layer];
            let a_in = &cache.inputs[layer];
            let w = self.params[2 * layer].as_slice();
            {
                let gw = grads.0[2 * layer].as_mut_slice();
                for (r, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[r * fan_in..(r + 1) * fan_in];
                    for (g, &a) in row.iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                }
            }
            grads.0[2 * layer + 1].as_mut_slice().copy_from_slice(&delta);
            let mut back = vec![0.0; fan_in];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[r * fan_in..(r + 1) * fan_in];
                for (b, &wv) in back.iter_mut().zip(row) {
                    *b += d * wv;
                }
            }
            if layer > 0 {
                for (b, &z) in back.iter_mut().zip(&cache.pre[layer - 1]) {
                    *b *= self.hidden_activation.derivative(z);
                }
            }
            delta = back;
        }
        Ok((grads, delta))
    }

    /// Output of a scalar network and its gradient with respect to the input,
    /// without forming parameter gradients.
    pub fn scalar_input_grad(&self, input: &[f64]) -> Result<(f64, Vec<f64>)> {
        if self.output_dim() != 1 {
            return Err(Error::shape("scalar output", self.output_dim()));
        }
        let (out, cache) = self.forward(input)?;
        let layers = self.num_layers();
        let mut delta = vec![self.output_transform.derivative(cache.pre[layers - 1][0])];
        for layer in (0..layers).rev() {
            let fan_in = self.layer_dims[layer];
            let w = self.params[2 * layer].as_slice();
            let mut back = vec![0.0; fan_in];
            for (r, &d) in delta.iter().enumerate() {
                for (b, &wv) in back.iter_mut().zip(&w[r * fan_in..(r + 1) * fan_in]) {
                    *b += d * wv;
                }
            }
            if layer > 0 {
                for (b, &z) in back.iter_mut().zip(&cache.pre[layer - 1]) {
                    *b *= self.hidden_activation.derivative(z);
                }
            }
            delta = back;
        }
        Ok((out[0], delta))
    }

    fn affine(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        let fan_in = self.layer_dims[layer];
        let w = self.params[2 * layer].as_slice();
        let b = self.params[2 * layer + 1].as_slice();
        b.iter()
            .enumerate()
            .map(|(r, &bias)| {
                w[r * fan_in..(r + 1) * fan_in]
                    .iter()
                    .zip(input)
                    .fold(bias, |acc, (wv, x)| acc + wv * x)
            })
            .collect()
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims
            && self.hidden_activation == other.hidden_activation
            && self.output_transform == other.output_transform
            && self.params == other.params
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidInput(
            "a network needs at least an input and an output dimension".into(),
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidInput(format!(
            "layer dimensions must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

/// On-disk layout: weights are flattened row-major per layer.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpRepr {
    layer_dims: Vec<usize>,
    hidden_activation: Activation,
    output_transform: OutputTransform,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let layers = self.num_layers();
        MlpRepr {
            layer_dims: self.layer_dims.clone(),
            hidden_activation: self.hidden_activation,
            output_transform: self.output_transform,
            weights: (0..layers).map(|l| self.weight(l).as_slice().to_vec()).collect(),
            biases: (0..layers).map(|l| self.bias(l).as_slice().to_vec()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = MlpRepr::deserialize(d)?;
        validate_dims(&repr.layer_dims).map_err(D::Error::custom)?;
        let dims = &repr.layer_dims;
        let weights = repr
            .weights
            .into_iter()
            .enumerate()
            .map(|(l, w)| {
                let shape = [*dims.get(l + 1).unwrap_or(&0), dims[l.min(dims.len() - 1)]];
                DenseArray::from_vec(&shape, w)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        let biases = repr
            .biases
            .into_iter()
            .enumerate()
            .map(|(l, b)| DenseArray::from_vec(&[*dims.get(l + 1).unwrap_or(&0)], b))
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        Mlp::from_parts(dims, repr.hidden_activation, repr.output_transform, weights, biases).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(w: Vec<f64>, b: Vec<f64>, dims: [usize; 2], out: OutputTransform) -> Mlp {
        Mlp::from_parts(
            &dims,
            Activation::Tanh,
            out,
            vec![DenseArray::from_vec(&[dims[1], dims[0]], w).unwrap()],
            vec![DenseArray::vector(b)],
        )
        .unwrap()
    }

    #[test]
    fn identity_network_passes_input_through() {
        let net = single_layer(
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
            [2, 2],
            OutputTransform::Identity,
        );
        let (out, _) = net.forward(&[0.3, -0.7]).unwrap();
        assert_eq!(out, vec![0.3, -0.7]);
    }

    #[test]
    fn non_negative_transform_squares() {
        let net = single_layer(vec![1.0], vec![0.0], [1, 1], OutputTransform::NonNegative);
        assert_eq!(net.eval(&[-2.0]).unwrap(), vec![4.0]);
    }

    #[test]
    fn linear_layer_gradients() {
        let w = 0.7;
        let net = single_layer(vec![w], vec![0.0], [1, 1], OutputTransform::Identity);
        let (_, cache) = net.forward(&[2.0]).unwrap();
        let (grads, input_grad) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(grads.0[0].as_slice(), &[2.0]);
        assert_eq!(grads.0[1].as_slice(), &[1.0]);
        assert_eq!(input_grad, vec![w]);
    }

    #[test]
    fn tanh_unit_has_unit_slope_at_zero() {
        // 1 -> 1 (tanh) -> 1 identity; hidden pre-activation is 0 at input 0.
        let net = Mlp::from_parts(
            &[1, 1, 1],
            Activation::Tanh,
            OutputTransform::Identity,
            vec![
                DenseArray::from_vec(&[1, 1], vec![1.0]).unwrap(),
                DenseArray::from_vec(&[1, 1], vec![1.0]).unwrap(),
            ],
            vec![DenseArray::vector(vec![0.0]), DenseArray::vector(vec![0.0])],
        )
        .unwrap();
        let (_, cache) = net.forward(&[0.0]).unwrap();
        let (_, input_grad) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(input_grad, vec![1.0]);
    }

    #[test]
    fn input_gradient_shortcut_agrees_with_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[3, 5, 4, 1], Activation::Tanh, OutputTransform::NonNegative, &mut rng).unwrap();
        let x = [0.2, -0.4, 0.9];
        let (out, cache) = net.forward(&x).unwrap();
        let (_, expected) = net.backward(&cache, &[1.0]).unwrap();
        let (value, grad) = net.scalar_input_grad(&x).unwrap();
        assert_eq!(value, out[0]);
        for (a, b) in grad.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn input_dimension_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 4, 1], Activation::Tanh, OutputTransform::Identity, &mut rng).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(&[2, 3, 1], Activation::Tanh, OutputTransform::Identity, &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.1, 0.2]).unwrap();
        net.params_mut()[0][0] += 0.1;
        assert!(matches!(net.backward(&cache, &[1.0]), Err(Error::StaleCache)));
    }

    #[test]
    fn json_round_trip_is_value_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[5, 7, 3, 2], Activation::Relu, OutputTransform::NonNegative, &mut rng).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&text).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn malformed_json_is_rejected() {
        let bad = r#"{"layer_dims":[2,1],"hidden_activation":"tanh","output_transform":"identity","weights":[[1.0]],"biases":[[0.0]]}"#;
        assert!(serde_json::from_str::<Mlp>(bad).is_err());
        let unknown = r#"{"layer_dims":[1,1],"hidden_activation":"tanh","output_transform":"identity","weights":[[1.0]],"biases":[[0.0]],"extra":1}"#;
        assert!(serde_json::from_str::<Mlp>(unknown).is_err());
    }
}
