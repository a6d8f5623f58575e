//! Small feed-forward network with explicit reverse-accumulation gradients.
//!
//! Parameters live in one flat vector so policies and regressors can share a
//! single optimizer implementation. Layout per layer: weights row-major
//! `[fan_out][fan_in]`, then biases `[fan_out]`. Hidden activations are tanh,
//! the output layer is affine.

use crate::error::{OplError, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "F: Serialize + serde::de::DeserializeOwned")]
pub struct Mlp<F: Scalar> {
    pub layer_sizes: Vec<usize>,
    pub params: Vec<F>,
}

/// Number of parameters for the given layer sizes: Σ (fan_in + 1) · fan_out.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|w| (w[0] + 1) * w[1])
        .sum()
}

/// Cached first-layer pre-activation for inputs of the form `dense ⊕ onehot`.
///
/// Evaluating a net on the same dense prefix with many different one-hot
/// suffixes only differs by one weight column in the first layer; caching the
/// dense part makes per-action sweeps cheap.
pub struct OneHotPrefix<F> {
    dense_len: usize,
    pre: Vec<F>,
}

impl<F: Scalar> Mlp<F> {
    /// Seeded initialization: weights uniform in
    /// ±sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(OplError::Config(format!(
                "invalid layer sizes {layer_sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = F::from_real((6.0 / (fan_in + fan_out) as f64).sqrt());
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-bound..bound));
            }
            for _ in 0..fan_out {
                params.push(F::zero());
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        let mut m = Self::new(layer_sizes, 0)?;
        m.params.iter_mut().for_each(|p| *p = F::zero());
        Ok(m)
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, fan_in, fan_out) per layer
        let mut off = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let cur = (off, w[0], w[1]);
            off += (w[0] + 1) * w[1];
            cur
        })
    }

    pub fn forward(&self, x: &[F]) -> Result<Vec<F>> {
        if x.len() != self.input_size() {
            return Err(OplError::Contract(format!(
                "input length {} != expected {}",
                x.len(),
                self.input_size()
            )));
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut act = x.to_vec();
        for (li, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let mut next = Vec::with_capacity(fan_out);
            for j in 0..fan_out {
                let row = &self.params[off + j * fan_in..off + (j + 1) * fan_in];
                let bias = self.params[off + fan_in * fan_out + j];
                let mut z = bias;
                for (w, a) in row.iter().zip(act.iter()) {
                    z = z + *w * *a;
                }
                next.push(if li + 1 < n_layers { z.tanh() } else { z });
            }
            act = next;
        }
        Ok(act)
    }

    /// Gradient of `upstreamᵀ · forward(x)` with respect to the flat parameters.
    pub fn param_gradient(&self, x: &[F], upstream: &[F]) -> Result<Vec<F>> {
        if upstream.len() != self.output_size() {
            return Err(OplError::Contract(format!(
                "upstream length {} != output size {}",
                upstream.len(),
                self.output_size()
            )));
        }
        if x.len() != self.input_size() {
            return Err(OplError::Contract(format!(
                "input length {} != expected {}",
                x.len(),
                self.input_size()
            )));
        }
        let n_layers = self.layer_sizes.len() - 1;
        // forward pass, keeping every layer's activation
        let mut acts: Vec<Vec<F>> = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for (li, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let prev = acts.last().unwrap();
            let mut next = Vec::with_capacity(fan_out);
            for j in 0..fan_out {
                let row = &self.params[off + j * fan_in..off + (j + 1) * fan_in];
                let bias = self.params[off + fan_in * fan_out + j];
                let mut z = bias;
                for (w, a) in row.iter().zip(prev.iter()) {
                    z = z + *w * *a;
                }
                next.push(if li + 1 < n_layers { z.tanh() } else { z });
            }
            acts.push(next);
        }

        let offsets: Vec<(usize, usize, usize)> = self.layer_offsets().collect();
        let mut grad = vec![F::zero(); self.params.len()];
        let mut delta = upstream.to_vec();
        for li in (0..n_layers).rev() {
            let (off, fan_in, fan_out) = offsets[li];
            let prev = &acts[li];
            for j in 0..fan_out {
                let d = delta[j];
                let wrow = off + j * fan_in;
                for i in 0..fan_in {
                    grad[wrow + i] = grad[wrow + i] + d * prev[i];
                }
                grad[off + fan_in * fan_out + j] = d;
            }
            if li > 0 {
                let mut prev_delta = vec![F::zero(); fan_in];
                for j in 0..fan_out {
                    let d = delta[j];
                    let wrow = off + j * fan_in;
                    for i in 0..fan_in {
                        prev_delta[i] = prev_delta[i] + self.params[wrow + i] * d;
                    }
                }
                // tanh' = 1 - tanh², using the stored activation
                for (pd, a) in prev_delta.iter_mut().zip(prev.iter()) {
                    *pd = *pd * (F::one() - *a * *a);
                }
                delta = prev_delta;
            }
        }
        Ok(grad)
    }

    /// Precompute the first-layer pre-activation of the dense prefix of an
    /// input `dense ⊕ onehot` (the one-hot block covers the remaining inputs).
    pub fn onehot_prefix(&self, dense: &[F]) -> Result<OneHotPrefix<F>> {
        let fan_in = self.input_size();
        if dense.len() >= fan_in {
            return Err(OplError::Contract(format!(
                "dense prefix {} leaves no room for a one-hot block in input size {fan_in}",
                dense.len()
            )));
        }
        let (off, _, fan_out) = self.layer_offsets().next().unwrap();
        let mut pre = Vec::with_capacity(fan_out);
        for j in 0..fan_out {
            let row = &self.params[off + j * fan_in..off + j * fan_in + dense.len()];
            let bias = self.params[off + fan_in * fan_out + j];
            let mut z = bias;
            for (w, a) in row.iter().zip(dense.iter()) {
                z = z + *w * *a;
            }
            pre.push(z);
        }
        Ok(OneHotPrefix {
            dense_len: dense.len(),
            pre,
        })
    }

    /// Forward pass for `dense ⊕ onehot(hot)` given a cached prefix.
    pub fn forward_from_prefix(&self, prefix: &OneHotPrefix<F>, hot: usize) -> Result<Vec<F>> {
        let fan_in = self.input_size();
        let col = prefix.dense_len + hot;
        if col >= fan_in {
            return Err(OplError::Contract(format!(
                "one-hot index {hot} out of range for input size {fan_in}"
            )));
        }
        let n_layers = self.layer_sizes.len() - 1;
        let (off, _, fan_out) = self.layer_offsets().next().unwrap();
        let mut act: Vec<F> = (0..fan_out)
            .map(|j| {
                let z = prefix.pre[j] + self.params[off + j * fan_in + col];
                if n_layers > 1 {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect();
        for (li, (off, fan_in, fan_out)) in self.layer_offsets().enumerate().skip(1) {
            let mut next = Vec::with_capacity(fan_out);
            for j in 0..fan_out {
                let row = &self.params[off + j * fan_in..off + (j + 1) * fan_in];
                let bias = self.params[off + fan_in * fan_out + j];
                let mut z = bias;
                for (w, a) in row.iter().zip(act.iter()) {
                    z = z + *w * *a;
                }
                next.push(if li + 1 < n_layers { z.tanh() } else { z });
            }
            act = next;
        }
        Ok(act)
    }
}

impl Mlp<f64> {
    /// Export parameters as a CSV list with a header recording the layer sizes.
    pub fn to_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(w, "layer_sizes,{}", sizes.join(","))?;
        for p in &self.params {
            writeln!(w, "{:e}", p)?;
        }
        Ok(())
    }

    pub fn from_csv<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| OplError::Config("empty parameter file".into()))??;
        let mut fields = header.split(',');
        if fields.next() != Some("layer_sizes") {
            return Err(OplError::Config("missing layer_sizes header".into()));
        }
        let layer_sizes: Vec<usize> = fields
            .map(|f| {
                f.trim()
                    .parse()
                    .map_err(|_| OplError::Config(format!("bad layer size {f:?}")))
            })
            .collect::<Result<_>>()?;
        let mut params = Vec::with_capacity(param_count(&layer_sizes));
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            params.push(
                line.trim()
                    .parse()
                    .map_err(|_| OplError::Config(format!("bad parameter value {line:?}")))?,
            );
        }
        if params.len() != param_count(&layer_sizes) {
            return Err(OplError::Config(format!(
                "expected {} parameters, found {}",
                param_count(&layer_sizes),
                params.len()
            )));
        }
        Ok(Self {
            layer_sizes,
            params,
        })
    }
}
