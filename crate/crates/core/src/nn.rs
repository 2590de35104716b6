//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! Layers are dense with ReLU between them. The head is either linear
//! (values, RND features) or a softmax (policies, posteriors). Everything is
//! `f64` and batched: inputs are `batch x features` matrices.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic      8 bytes  "MACENN01"
//! head       u8       0 = linear, 1 = softmax
//! n_sizes    u32
//! sizes      n_sizes x u32          input, hidden..., output
//! per layer  in*out x f64 weights, row-major with shape (in, out)
//!            out x f64 biases
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MACENN01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(in, out)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
struct Cache {
    /// Input of every layer; `inputs[k]` feeds layer `k`.
    inputs: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Dense>,
    head: Head,
    cache: Option<Cache>,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    // Orthonormalize the columns of a tall Gaussian matrix (modified
    // Gram-Schmidt), fix signs like a QR with positive diagonal, and
    // transpose when the requested matrix is wide.
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut q = Array2::<f64>::zeros((tall, short));
    q.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
    for j in 0..short {
        for k in 0..j {
            let dot = q.column(j).dot(&q.column(k));
            let qk = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-dot, &qk);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    let q = q * gain;
    if rows >= cols {
        q
    } else {
        q.reversed_axes().as_standard_layout().to_owned()
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Network {
    /// `sizes` lists the input width, the hidden widths and the output width.
    /// Hidden layers get orthogonal weights with gain √2, the output layer
    /// gets `head_gain`; biases start at zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: Head, head_gain: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs an input and an output size");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let gain = if k == last { head_gain } else { 2f64.sqrt() };
                Dense {
                    weight: orthogonal(w[0], w[1], gain, rng),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Network {
            layers,
            head,
            cache: None,
        }
    }

    pub fn from_layers(layers: Vec<Dense>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network without layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.ncols() != pair[1].weight.nrows() {
                return Err(Error::Shape {
                    expected: pair[0].weight.ncols(),
                    got: pair[1].weight.nrows(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.ncols() {
                return Err(Error::Shape {
                    expected: l.weight.ncols(),
                    got: l.bias.len(),
                });
            }
        }
        Ok(Network {
            layers,
            head,
            cache: None,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.cache = None;
        &mut self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].weight.nrows())
            .chain(self.layers.iter().map(|l| l.weight.ncols()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for l in self.layers_mut() {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<f64>, mut keep: Option<&mut Vec<Array2<f64>>>) -> Array2<f64> {
        let mut act = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight);
            z += &layer.bias;
            if k < last {
                relu_inplace(&mut z);
            }
            if let Some(keep) = keep.as_deref_mut() {
                keep.push(std::mem::replace(&mut act, z));
            } else {
                act = z;
            }
        }
        act
    }

    fn apply_head(&self, logits: Array2<f64>) -> Array2<f64> {
        match self.head {
            Head::Linear => logits,
            Head::Softmax => softmax(&logits),
        }
    }

    /// Pre-head outputs (logits for softmax heads), without caching.
    pub fn predict_logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.run(x, None))
    }

    /// Head outputs without caching; usable through a shared reference.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.apply_head(self.predict_logits(x)?))
    }

    /// Forward pass that keeps the activations for [`Network::backward`].
    /// Returns pre-head outputs.
    pub fn forward_logits(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let logits = self.run(x, Some(&mut inputs));
        self.cache = Some(Cache {
            inputs,
            logits: logits.clone(),
        });
        Ok(logits)
    }

    /// Forward pass that keeps the activations; returns head outputs
    /// (probabilities for softmax heads).
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let logits = self.forward_logits(x)?;
        Ok(self.apply_head(logits))
    }

    /// Single-row convenience wrapper around [`Network::predict`].
    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict(view)?.row(0).to_vec())
    }

    /// Gradients from `d loss / d output`, where output is what
    /// [`Network::forward`] returned. For softmax heads the softmax Jacobian
    /// is applied here.
    pub fn backward(&self, grad_output: &Array2<f64>) -> Result<Gradients> {
        let cache = self.cache()?;
        let grad_logits = match self.head {
            Head::Linear => grad_output.clone(),
            Head::Softmax => {
                let p = softmax(&cache.logits);
                let inner = (&p * grad_output).sum_axis(Axis(1)).insert_axis(Axis(1));
                &p * &(grad_output - &inner)
            }
        };
        self.backward_logits(&grad_logits)
    }

    /// Gradients from `d loss / d logits`.
    pub fn backward_logits(&self, grad_logits: &Array2<f64>) -> Result<Gradients> {
        let cache = self.cache()?;
        if grad_logits.dim() != cache.logits.dim() {
            return Err(Error::Shape {
                expected: cache.logits.len(),
                got: grad_logits.len(),
            });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.clone();
        for k in (0..self.layers.len()).rev() {
            let input = &cache.inputs[k];
            let weight = input.t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut back = delta.dot(&self.layers[k].weight.t());
                // input to layer k is relu(z_{k-1}); zero where it was clipped
                ndarray::Zip::from(&mut back)
                    .and(input)
                    .for_each(|g, &a| {
                        if a <= 0.0 {
                            *g = 0.0
                        }
                    });
                delta = back;
            }
            layers.push(Dense { weight, bias });
        }
        layers.reverse();
        Ok(Gradients { layers })
    }

    fn cache(&self) -> Result<&Cache> {
        self.cache
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called without a cached forward pass".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.num_params());
        buf.extend_from_slice(MAGIC);
        buf.push(match self.head {
            Head::Linear => 0,
            Head::Softmax => 1,
        });
        let sizes = self.sizes();
        buf.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for s in sizes {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for p in self.params() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cur = buf.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let head = match take(1)?[0] {
            0 => Head::Linear,
            1 => Head::Softmax,
            _ => return Err(bad("unknown head")),
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let n = u32_at(take(4)?);
        if n < 2 {
            return Err(bad("need at least two sizes"));
        }
        let sizes: Vec<usize> = (0..n).map(|_| take(4).map(u32_at)).collect::<Result<_>>()?;
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let mut read = |count: usize| -> Result<Vec<f64>> {
                let bytes = take(8 * count)?;
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            };
            let weight = Array2::from_shape_vec((w[0], w[1]), read(w[0] * w[1])?)
                .map_err(|_| bad("weight shape"))?;
            let bias = Array1::from(read(w[1])?);
            layers.push(Dense { weight, bias });
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Network::from_layers(layers, head)
    }
}

/// Adaptive-moment optimizer with bias correction and optional global
/// gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(net: &Network, lr: f64, eps: f64, max_grad_norm: Option<f64>) -> Self {
        let n = net.num_params();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            max_grad_norm,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Clip (if configured) and apply one update. Returns the gradient norm
    /// before clipping.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<f64> {
        let mut flat = grads.flatten();
        if flat.len() != self.m.len() || flat.len() != net.num_params() {
            return Err(Error::Shape {
                expected: self.m.len(),
                got: flat.len(),
            });
        }
        let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient".into(),
                details: format!("norm {norm}"),
            });
        }
        if let Some(max) = self.max_grad_norm {
            if norm > max {
                let s = max / norm;
                flat.iter_mut().for_each(|g| *g *= s);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut params = net.params();
        for (k, g) in flat.iter().enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        net.set_params(&params)?;
        Ok(norm)
    }
}

/// Largest relative disagreement between backpropagated gradients and central
/// finite differences with step `h`, for the loss `sum(probe * output)`.
/// Entries where both gradients are below `1e-6` in magnitude are compared
/// absolutely, since rounding in the difference quotient is of order
/// `1e-16 / h` there.
pub fn gradient_check(net: &Network, x: ArrayView2<f64>, probe: &Array2<f64>, h: f64) -> Result<f64> {
    let mut work = net.clone();
    let out = work.forward(x)?;
    if out.dim() != probe.dim() {
        return Err(Error::Shape {
            expected: out.len(),
            got: probe.len(),
        });
    }
    let analytic = work.backward(probe)?.flatten();
    let base = net.params();
    let loss = |w: &mut Network, params: &[f64]| -> Result<f64> {
        w.set_params(params)?;
        Ok((&w.predict(x)? * probe).sum())
    };
    let mut worst = 0.0f64;
    let mut params = base.clone();
    for (k, &a) in analytic.iter().enumerate() {
        params[k] = base[k] + h;
        let up = loss(&mut work, &params)?;
        params[k] = base[k] - h;
        let down = loss(&mut work, &params)?;
        params[k] = base[k];
        let numeric = (up - down) / (2.0 * h);
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / scale);
    }
    Ok(worst)
}
