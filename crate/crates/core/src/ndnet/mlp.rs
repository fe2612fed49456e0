//! Dense layers with optional batch normalization, ReLU and inverted dropout,
//! plus explicit layer-wise backpropagation.
//!
//! Each hidden layer computes `dense → batch-norm → activation → dropout`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Result, ScaError};

/// EMA factor applied to the previous running statistic.
pub const BN_MOMENTUM: f64 = 0.9;
/// Variance floor inside the batch-norm square root.
pub const BN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active, running statistics updated.
    Train,
    /// Running statistics, no dropout, no state change.
    Eval,
}

/// Draws a `fan_in × fan_out` matrix uniformly from `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor2 {
    assert!(fan_in >= 1 && fan_out >= 1, "xavier_init needs positive fans");
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor2::from_vec(fan_in, fan_out, data).expect("shape matches buffer")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub batch_norm: bool,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl LayerSpec {
    /// `dense → batch-norm → ReLU → dropout`.
    pub fn hidden(in_dim: usize, out_dim: usize, dropout_rate: f64) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            batch_norm: true,
            activation: Activation::Relu,
            dropout_rate,
        }
    }

    /// Plain affine output layer.
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            batch_norm: false,
            activation: Activation::Identity,
            dropout_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    /// `in_dim × out_dim`; the layer computes `x · weight + bias`.
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub batch_norm: Option<BatchNorm>,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl MlpLayer {
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        assert!(
            (0.0..1.0).contains(&spec.dropout_rate),
            "dropout rate must lie in [0, 1)"
        );
        MlpLayer {
            weight: xavier_init(spec.in_dim, spec.out_dim, rng),
            bias: vec![0.0; spec.out_dim],
            batch_norm: spec.batch_norm.then(|| BatchNorm::identity(spec.out_dim)),
            activation: spec.activation,
            dropout_rate: spec.dropout_rate,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Tensor2,
    /// Normalized pre-activation, present when the layer has batch norm.
    xhat: Option<Tensor2>,
    inv_std: Vec<f64>,
    batch_stats: bool,
    /// Input to the activation function.
    pre_act: Tensor2,
    /// Per-entry inverted-dropout multiplier (0 or 1/(1-p)).
    dropout_scale: Option<Vec<f64>>,
}

/// Everything `Mlp::backward` needs from the matching forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    layers: Vec<LayerCache>,
    version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    /// Empty when the layer has no batch norm.
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    /// Gradients named as in [`Mlp::params_mut`].
    pub fn named(&self, prefix: &str) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, g) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), g.weight.data()));
            out.push((format!("{prefix}.{i}.bias"), g.bias.as_slice()));
            if !g.gamma.is_empty() {
                out.push((format!("{prefix}.{i}.bn_gamma"), g.gamma.as_slice()));
                out.push((format!("{prefix}.{i}.bn_beta"), g.beta.as_slice()));
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<MlpLayer>,
    /// Bumped whenever parameters are handed out mutably; caches record it.
    #[serde(skip)]
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

type RunningUpdate = Option<(Vec<f64>, Vec<f64>)>;

impl Mlp {
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        for w in specs.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(ScaError::Dimension(format!(
                    "layer widths do not chain: {} then {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        Ok(Mlp {
            layers: specs.iter().map(|s| MlpLayer::new(*s, rng)).collect(),
            version: 0,
        })
    }

    pub fn from_layers(layers: Vec<MlpLayer>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(ScaError::Dimension("layer widths do not chain".into()));
            }
        }
        Ok(Mlp { layers, version: 0 })
    }

    pub fn layers(&self) -> &[MlpLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MlpLayer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, MlpLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, MlpLayer::out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight.data().len()
                    + l.bias.len()
                    + l.batch_norm.as_ref().map_or(0, |b| 2 * b.gamma.len())
            })
            .sum()
    }

    /// Trainable parameters as named mutable slices.
    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut [f64])> {
        self.version += 1;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), l.weight.data_mut()));
            out.push((format!("{prefix}.{i}.bias"), l.bias.as_mut_slice()));
            if let Some(bn) = l.batch_norm.as_mut() {
                out.push((format!("{prefix}.{i}.bn_gamma"), bn.gamma.as_mut_slice()));
                out.push((format!("{prefix}.{i}.bn_beta"), bn.beta.as_mut_slice()));
            }
        }
        out
    }

    /// Forward pass that records a cache for [`Mlp::backward`].
    ///
    /// In `Train` mode batch-norm running statistics are updated in place.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor2,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor2, MlpCache)> {
        let (out, cache, updates) = self.forward_impl(x, mode, Some(rng))?;
        for (layer, upd) in self.layers.iter_mut().zip(updates) {
            if let (Some(bn), Some((mean, var))) = (layer.batch_norm.as_mut(), upd) {
                for j in 0..mean.len() {
                    bn.running_mean[j] =
                        BN_MOMENTUM * bn.running_mean[j] + (1.0 - BN_MOMENTUM) * mean[j];
                    bn.running_var[j] =
                        BN_MOMENTUM * bn.running_var[j] + (1.0 - BN_MOMENTUM) * var[j];
                }
            }
        }
        Ok((out, cache))
    }

    /// Deterministic inference pass; a pure function of parameters and input.
    pub fn forward_eval(&self, x: &Tensor2) -> Result<Tensor2> {
        let (out, _, _) = self.forward_impl::<rand_chacha::ChaCha8Rng>(x, Mode::Eval, None)?;
        Ok(out)
    }

    fn forward_impl<R: Rng + ?Sized>(
        &self,
        x: &Tensor2,
        mode: Mode,
        mut rng: Option<&mut R>,
    ) -> Result<(Tensor2, MlpCache, Vec<RunningUpdate>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            if h.cols() != layer.in_dim() {
                return Err(ScaError::Dimension(format!(
                    "layer {li} expects {} inputs, got {}",
                    layer.in_dim(),
                    h.cols()
                )));
            }
            let m = h.rows();
            let width = layer.out_dim();
            let mut a = h.matmul(&layer.weight)?;
            for r in 0..m {
                for (v, b) in a.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }

            let mut xhat = None;
            let mut inv_std = Vec::new();
            let mut batch_stats = false;
            let mut update = None;
            if let Some(bn) = &layer.batch_norm {
                let (mean, var) = if mode == Mode::Train {
                    batch_stats = true;
                    let mean: Vec<f64> =
                        a.column_sums().into_iter().map(|s| s / m as f64).collect();
                    let mut var = vec![0.0; width];
                    for r in a.iter_rows() {
                        for j in 0..width {
                            let d = r[j] - mean[j];
                            var[j] += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m as f64);
                    let unbiased = if m > 1 {
                        var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
                    } else {
                        var.clone()
                    };
                    update = Some((mean.clone(), unbiased));
                    (mean, var)
                } else {
                    (bn.running_mean.clone(), bn.running_var.clone())
                };
                inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xh = Tensor2::zeros(m, width);
                for r in 0..m {
                    let src = a.row(r);
                    let dst = xh.row_mut(r);
                    for j in 0..width {
                        dst[j] = (src[j] - mean[j]) * inv_std[j];
                    }
                }
                for r in 0..m {
                    let src = xh.row(r);
                    let dst = a.row_mut(r);
                    for j in 0..width {
                        dst[j] = bn.gamma[j] * src[j] + bn.beta[j];
                    }
                }
                xhat = Some(xh);
            }
            updates.push(update);

            let pre_act = a;
            let mut out = pre_act.clone();
            if layer.activation == Activation::Relu {
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }

            let mut dropout_scale = None;
            if mode == Mode::Train && layer.dropout_rate > 0.0 {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| ScaError::Domain("train-mode dropout needs an rng".into()))?;
                let keep = 1.0 - layer.dropout_rate;
                let scale: Vec<f64> = (0..out.data().len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                for (v, s) in out.data_mut().iter_mut().zip(&scale) {
                    *v *= s;
                }
                dropout_scale = Some(scale);
            }

            if !out.all_finite() {
                return Err(ScaError::Numeric(format!(
                    "non-finite activation in layer {li}"
                )));
            }
            caches.push(LayerCache {
                input: h,
                xhat,
                inv_std,
                batch_stats,
                pre_act,
                dropout_scale,
            });
            h = out;
        }
        Ok((
            h,
            MlpCache {
                layers: caches,
                version: self.version,
            },
            updates,
        ))
    }

    /// Backpropagates `upstream` (gradient w.r.t. the output) and returns the
    /// parameter gradients together with the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, upstream: &Tensor2) -> Result<(MlpGrads, Tensor2)> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(ScaError::StaleCache);
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            if g.shape() != c.pre_act.shape() {
                return Err(ScaError::Dimension(format!(
                    "upstream gradient {:?} does not match layer output {:?}",
                    g.shape(),
                    c.pre_act.shape()
                )));
            }
            if let Some(scale) = &c.dropout_scale {
                for (v, s) in g.data_mut().iter_mut().zip(scale) {
                    *v *= s;
                }
            }
            if layer.activation == Activation::Relu {
                for (v, p) in g.data_mut().iter_mut().zip(c.pre_act.data()) {
                    if *p <= 0.0 {
                        *v = 0.0;
                    }
                }
            }

            let m = g.rows();
            let width = layer.out_dim();
            let (mut dgamma, mut dbeta) = (Vec::new(), Vec::new());
            if let (Some(bn), Some(xhat)) = (&layer.batch_norm, &c.xhat) {
                dgamma = vec![0.0; width];
                dbeta = vec![0.0; width];
                for r in 0..m {
                    for j in 0..width {
                        dgamma[j] += g.get(r, j) * xhat.get(r, j);
                        dbeta[j] += g.get(r, j);
                    }
                }
                // dxhat = g * gamma
                for r in 0..m {
                    for (j, v) in g.row_mut(r).iter_mut().enumerate() {
                        *v *= bn.gamma[j];
                    }
                }
                if c.batch_stats {
                    let mut sum = vec![0.0; width];
                    let mut sum_x = vec![0.0; width];
                    for r in 0..m {
                        for j in 0..width {
                            sum[j] += g.get(r, j);
                            sum_x[j] += g.get(r, j) * xhat.get(r, j);
                        }
                    }
                    let mf = m as f64;
                    for r in 0..m {
                        for j in 0..width {
                            let v = c.inv_std[j] / mf
                                * (mf * g.get(r, j) - sum[j] - xhat.get(r, j) * sum_x[j]);
                            g.set(r, j, v);
                        }
                    }
                } else {
                    for r in 0..m {
                        for (j, v) in g.row_mut(r).iter_mut().enumerate() {
                            *v *= c.inv_std[j];
                        }
                    }
                }
            }

            let dweight = c.input.t_matmul(&g)?;
            let dbias = g.column_sums();
            let dinput = g.matmul_t(&layer.weight)?;
            grads.push(LayerGrads {
                weight: dweight,
                bias: dbias,
                gamma: dgamma,
                beta: dbeta,
            });
            g = dinput;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}
