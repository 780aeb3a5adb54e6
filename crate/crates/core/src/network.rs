//! Fully-connected ReLU network mapping a context vector to a shift on the
//! full taste vector.
//!
//! Parameters are stored in one flat buffer, layer by layer: the row-major
//! `out x in` weight matrix followed by the `out` biases.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContextNetwork {
    widths: Vec<usize>,
    params: Vec<f64>,
    dropout_rate: f64,
    #[serde(skip)]
    revision: u64,
}

/// Standard deviation of the initial hidden-layer biases.
const BIAS_SD: f64 = 0.5;

/// Equality ignores the cache revision counter.
impl PartialEq for ContextNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths && self.params == other.params && self.dropout_rate == other.dropout_rate
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    revision: u64,
    /// Input to every layer (post-activation, post-dropout).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    /// Dropout multipliers of the hidden layers (`0` or `1 / (1 - p)`).
    masks: Vec<Option<Vec<f64>>>,
}

fn layer_sizes(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl ContextNetwork {
    /// Builds a network from explicit parameters.
    pub fn from_params(widths: Vec<usize>, params: Vec<f64>, dropout_rate: f64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("network needs at least input and output widths, all >= 1"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {dropout_rate} not in [0, 1)")));
        }
        let expected = layer_sizes(&widths);
        if params.len() != expected {
            return Err(Error::dims("network parameters", expected, params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("network weights must be finite"));
        }
        Ok(Self {
            widths,
            params,
            dropout_rate,
            revision: 0,
        })
    }

    /// He-initialised hidden layers, all-zero output layer.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], dropout_rate: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::from_params(widths.to_vec(), vec![0.0; layer_sizes(widths)], dropout_rate)?;
        let n_layers = net.n_layers();
        for layer in 0..n_layers - 1 {
            let fan_in = widths[layer];
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sd");
            let (w, b) = net.layer_range(layer);
            for p in &mut net.params[w] {
                *p = normal.sample(rng);
            }
            // Spread the ReLU kinks over the input range instead of stacking
            // them all at the origin.
            let bias = Normal::new(0.0, BIAS_SD).expect("positive sd");
            for p in &mut net.params[b] {
                *p = bias.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.revision += 1;
        &mut self.params
    }

    /// Index ranges of the weights and biases of `layer`.
    pub fn layer_range(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut offset = 0;
        for l in 0..layer {
            offset += self.widths[l + 1] * self.widths[l] + self.widths[l + 1];
        }
        let (n_in, n_out) = (self.widths[layer], self.widths[layer + 1]);
        let w = offset..offset + n_out * n_in;
        let b = w.end..w.end + n_out;
        (w, b)
    }

    /// Human-readable name of a flat parameter index.
    pub fn param_name(&self, index: usize) -> String {
        for layer in 0..self.n_layers() {
            let (w, b) = self.layer_range(layer);
            let n_in = self.widths[layer];
            if w.contains(&index) {
                let k = index - w.start;
                return format!("net.layer{layer}.weight[{},{}]", k / n_in, k % n_in);
            }
            if b.contains(&index) {
                return format!("net.layer{layer}.bias[{}]", index - b.start);
            }
        }
        format!("net.param[{index}]")
    }

    fn affine(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        let (w, b) = self.layer_range(layer);
        let n_in = self.widths[layer];
        let weights = &self.params[w];
        self.params[b]
            .iter()
            .enumerate()
            .map(|(o, bias)| {
                let row = &weights[o * n_in..(o + 1) * n_in];
                bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }

    /// Forward pass. Dropout is applied to hidden activations in train mode
    /// only, scaled so the eval pass needs no correction.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        context: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let mut draw = || rng.random::<f64>();
        match mode {
            Mode::Train if self.dropout_rate > 0.0 => self.run(context, Some(&mut draw)),
            _ => self.run(context, None),
        }
    }

    /// Deterministic evaluation (no dropout).
    pub fn eval(&self, context: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(context, None)?.0)
    }

    fn run(
        &self,
        context: &[f64],
        mut uniform: Option<&mut dyn FnMut() -> f64>,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        if context.len() != self.input_width() {
            return Err(Error::dims("network input", self.input_width(), context.len()));
        }
        let n_layers = self.n_layers();
        let mut cache = ForwardCache {
            revision: self.revision,
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers - 1),
            masks: Vec::with_capacity(n_layers - 1),
        };
        let mut a = context.to_vec();
        for layer in 0..n_layers - 1 {
            let z = self.affine(layer, &a);
            let mut h: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let mask = match uniform.as_mut() {
                Some(draw) => {
                    let keep = 1.0 - self.dropout_rate;
                    let m: Vec<f64> = (0..h.len())
                        .map(|_| if draw() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    h.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                    Some(m)
                }
                None => None,
            };
            cache.inputs.push(std::mem::replace(&mut a, h));
            cache.pre.push(z);
            cache.masks.push(mask);
        }
        let out = self.affine(n_layers - 1, &a);
        cache.inputs.push(a);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite network output"));
        }
        Ok((out, cache))
    }

    /// Reverse pass for `output . output_grad`; accumulates parameter
    /// gradients into `param_grad` and returns the input gradient.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if cache.revision != self.revision || cache.inputs.len() != self.n_layers() {
            return Err(Error::invalid("stale forward cache: network changed since forward pass"));
        }
        if output_grad.len() != self.output_width() {
            return Err(Error::dims("output gradient", self.output_width(), output_grad.len()));
        }
        if param_grad.len() != self.n_params() {
            return Err(Error::dims("parameter gradient buffer", self.n_params(), param_grad.len()));
        }
        let mut delta = output_grad.to_vec();
        for layer in (0..self.n_layers()).rev() {
            let (w, b) = self.layer_range(layer);
            let n_in = self.widths[layer];
            let input = &cache.inputs[layer];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                param_grad[b.start + o] += d;
                let row = &mut param_grad[w.start + o * n_in..w.start + (o + 1) * n_in];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
            }
            let weights = &self.params[w];
            let mut upstream = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &weights[o * n_in..(o + 1) * n_in];
                upstream.iter_mut().zip(row).for_each(|(u, wv)| *u += d * wv);
            }
            if layer > 0 {
                let h = layer - 1;
                if let Some(mask) = &cache.masks[h] {
                    upstream.iter_mut().zip(mask).for_each(|(u, m)| *u *= m);
                }
                upstream
                    .iter_mut()
                    .zip(&cache.pre[h])
                    .for_each(|(u, z)| if *z <= 0.0 { *u = 0.0 });
            }
            delta = upstream;
        }
        Ok(delta)
    }

    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.n_params()];
        let input_grad = self.backward_into(cache, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }
}
