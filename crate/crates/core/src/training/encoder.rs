use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Fully-connected encoder shape: `input → hidden... → embedding`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "encoder widths must be positive: {} -> {:?} -> {}",
                self.input_dim, self.hidden_widths, self.embedding_dim
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_widths);
        widths.push(self.embedding_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Offset of the `outputs×inputs` weights; biases follow.
    offset: usize,
}

impl Layer {
    fn weights(self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }
}

/// Multi-layer perceptron with all parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    params: Vec<f64>,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Encoder {
    /// He-initialized weights drawn from `spec.init_seed`; zero biases.
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from_seed(spec.init_seed);
        let mut params = Vec::with_capacity(spec.parameter_count());
        for (inputs, outputs) in spec.layer_dims() {
            let scale = (2.0 / inputs as f64).sqrt();
            for _ in 0..inputs * outputs {
                let z: f64 = StandardNormal.sample(&mut rng);
                params.push(scale * z);
            }
            params.extend(std::iter::repeat_n(0.0, outputs));
        }
        Ok(Encoder { spec, params })
    }

    pub fn from_parameters(spec: EncoderSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.parameter_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for an encoder with {}",
                params.len(),
                spec.parameter_count()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "encoder parameters",
            });
        }
        Ok(Encoder { spec, params })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.spec
            .layer_dims()
            .into_iter()
            .map(|(inputs, outputs)| {
                let l = Layer {
                    inputs,
                    outputs,
                    offset,
                };
                offset += inputs * outputs + outputs;
                l
            })
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn affine(&self, layer: Layer, x: &[f64]) -> Vec<f64> {
        let w = &self.params[layer.weights()];
        let b = &self.params[layer.bias()];
        (0..layer.outputs)
            .map(|o| {
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in layers.into_iter().enumerate() {
            let mut pre = self.affine(layer, &h);
            if i < last {
                pre.iter_mut()
                    .for_each(|v| *v = self.spec.activation.apply(*v));
            }
            h = pre;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(layers.len()),
            pre: Vec::with_capacity(layers.len()),
        };
        let mut h = x.to_vec();
        for (i, layer) in layers.into_iter().enumerate() {
            let pre = self.affine(layer, &h);
            let next = if i < last {
                pre.iter().map(|&v| self.spec.activation.apply(v)).collect()
            } else {
                pre.clone()
            };
            cache.inputs.push(std::mem::replace(&mut h, next));
            cache.pre.push(pre);
        }
        Ok(cache)
    }

    /// Accumulates `∂loss/∂params` into `grads` given `∂loss/∂embedding`.
    /// Returns `∂loss/∂input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient buffer has {} entries, encoder has {}",
                grads.len(),
                self.params.len()
            )));
        }
        if d_out.len() != self.spec.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.embedding_dim,
                actual: d_out.len(),
            });
        }
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut delta = d_out.to_vec();
        for (i, layer) in layers.into_iter().enumerate().rev() {
            if i < last {
                for (d, &p) in delta.iter_mut().zip(&cache.pre[i]) {
                    *d *= self.spec.activation.derivative(p);
                }
            }
            let input = &cache.inputs[i];
            let w_range = layer.weights();
            let b_range = layer.bias();
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grads
                    [w_range.start + o * layer.inputs..w_range.start + (o + 1) * layer.inputs];
                for (gw, x) in g.iter_mut().zip(input) {
                    *gw += d * x;
                }
                grads[b_range.start + o] += d;
            }
            let w = &self.params[w_range];
            let mut d_in = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                for (di, a) in d_in.iter_mut().zip(row) {
                    *di += d * a;
                }
            }
            delta = d_in;
        }
        Ok(delta)
    }

    /// Embeds a batch of inputs, in order.
    pub fn embed_batch(&self, inputs: &[&[f64]], exec: Execution) -> Result<Vec<Vec<f64>>> {
        parallel::map_slice(exec, inputs, |x| self.forward(x))
            .into_iter()
            .collect()
    }

    /// SHA-256 over the spec and the exact parameter bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> EncoderSpec {
        EncoderSpec {
            input_dim: 5,
            hidden_widths: vec![7, 6],
            embedding_dim: 4,
            activation: Activation::Tanh,
            init_seed: 3,
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let e = Encoder::new(spec()).unwrap();
        assert_eq!(e.parameters().len(), 5 * 7 + 7 + 7 * 6 + 6 + 6 * 4 + 4);
        assert_eq!(e, Encoder::new(spec()).unwrap());
        assert!(e.forward(&[0.0; 4]).is_err());
        let y = e.forward(&[0.1, -0.2, 0.3, 0.4, -0.5]).unwrap();
        let c = e.forward_cached(&[0.1, -0.2, 0.3, 0.4, -0.5]).unwrap();
        assert_eq!(y, c.output());
        assert!(Encoder::new(EncoderSpec {
            input_dim: 0,
            ..spec()
        })
        .is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let e = Encoder::new(EncoderSpec {
                activation: act,
                ..spec()
            })
            .unwrap();
            let x = [0.3, -0.7, 0.2, 0.9, -0.1];
            let w = [0.5, -1.0, 2.0, 0.25];
            let loss = |enc: &Encoder| -> f64 {
                enc.forward(&x)
                    .unwrap()
                    .iter()
                    .zip(&w)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let cache = e.forward_cached(&x).unwrap();
            let mut grads = vec![0.0; e.parameters().len()];
            e.backward(&cache, &w, &mut grads).unwrap();
            let h = 1e-6;
            for k in 0..grads.len() {
                let mut plus = e.clone();
                plus.parameters_mut()[k] += h;
                let mut minus = e.clone();
                minus.parameters_mut()[k] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!(
                    (fd - grads[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {k}: {fd} vs {}",
                    grads[k]
                );
            }
        }
    }

    #[test]
    fn digest_tracks_parameters() {
        let e = Encoder::new(spec()).unwrap();
        let mut f = e.clone();
        assert_eq!(e.digest(), f.digest());
        f.parameters_mut()[0] = f64::from_bits(f.parameters()[0].to_bits() ^ 1);
        assert_ne!(e.digest(), f.digest());
    }
}
