use crate::error::{check_len, Error, Result};
use crate::special_math::RngStream;

/// Fully connected network: tanh on hidden layers, identity on the output.
///
/// Parameters live in one flat buffer. Layer `l` stores its weight matrix
/// row-major as `[fan_out][fan_in]`, followed by its `fan_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer outputs recorded during a forward pass, `outputs[0]` being the input.
#[derive(Debug, Clone)]
pub struct Activations {
    outputs: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("at least the input is recorded")
    }
}

/// Result of a full backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl DenseNet {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] })
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn random(sizes: &[usize], rng: &mut RngStream) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = scale * rng.standard_normal();
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        check_len(net.params.len(), params.len())?;
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// Mutable views of layer `layer`'s weights and biases.
    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let start = self.layer_offset(layer);
        let (w, rest) = self.params[start..].split_at_mut(fan_in * fan_out);
        (w, &mut rest[..fan_out])
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        let mut offset = 0;
        let last = self.num_layers() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            cur = self.affine(offset, w[0], w[1], &cur, l != last);
            offset += (w[0] + 1) * w[1];
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Activations> {
        check_len(self.input_dim(), x.len())?;
        let mut outputs = Vec::with_capacity(self.sizes.len());
        outputs.push(x.to_vec());
        let mut offset = 0;
        let last = self.num_layers() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let next = self.affine(offset, w[0], w[1], outputs.last().unwrap(), l != last);
            outputs.push(next);
            offset += (w[0] + 1) * w[1];
        }
        Ok(Activations { outputs })
    }

    fn affine(&self, offset: usize, fan_in: usize, fan_out: usize, x: &[f64], tanh: bool) -> Vec<f64> {
        let weights = &self.params[offset..offset + fan_in * fan_out];
        let biases = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        weights
            .chunks_exact(fan_in)
            .zip(biases)
            .map(|(row, b)| {
                let z = row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi);
                if tanh {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect()
    }

    /// Reverse-mode pass over recorded activations. Parameter gradients are
    /// added into `param_grads`; the gradient with respect to the input is
    /// returned.
    pub fn backward_cached(
        &self,
        acts: &Activations,
        output_grad: &[f64],
        param_grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        check_len(self.output_dim(), output_grad.len())?;
        check_len(self.num_params(), param_grads.len())?;
        let mut delta = output_grad.to_vec();
        let n = self.num_layers();
        for l in (0..n).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            if l != n - 1 {
                for (d, y) in delta.iter_mut().zip(&acts.outputs[l + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let offset = self.layer_offset(l);
            let input = &acts.outputs[l];
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let (gw, gb) = param_grads[offset..offset + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
            let mut prev = vec![0.0; fan_in];
            for j in 0..fan_out {
                let dj = delta[j];
                gb[j] += dj;
                if dj == 0.0 {
                    continue;
                }
                let row = &weights[j * fan_in..(j + 1) * fan_in];
                let grow = &mut gw[j * fan_in..(j + 1) * fan_in];
                for i in 0..fan_in {
                    grow[i] += dj * input[i];
                    prev[i] += dj * row[i];
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    pub fn backward(&self, x: &[f64], output_grad: &[f64]) -> Result<Gradients> {
        let acts = self.forward_cached(x)?;
        let mut params = vec![0.0; self.num_params()];
        let input = self.backward_cached(&acts, output_grad, &mut params)?;
        Ok(Gradients { params, input })
    }
}
