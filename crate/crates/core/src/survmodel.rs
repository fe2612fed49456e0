//! Deterministic encoder `z = r(x)` and stochastic event-time generator
//! `t = g(z, ε)`.
//!
//! The generator has two hidden layers; noise is concatenated to the input of
//! the last hidden layer only. Its scalar output `o` is mapped to a positive
//! time with `t = time_scale · softplus(o)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaError};
use crate::ndnet::{LayerSpec, Mlp, MlpCache, MlpGrads, Mode, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// `U[0, noise_scale)`
    Uniform,
    /// `N(0, noise_scale²)`
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub noise_dim: usize,
    pub noise_kind: NoiseKind,
    pub noise_scale: f64,
    pub dropout: f64,
    /// Multiplies the softplus output; set from the training times so the
    /// network works in units of order one.
    pub time_scale: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, time_scale: f64) -> Self {
        ModelConfig {
            input_dim,
            latent_dim: 50,
            hidden_dim: 50,
            noise_dim: 50,
            noise_kind: NoiseKind::Uniform,
            noise_scale: 1.0,
            dropout: 0.2,
            time_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ScaError::config(name, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ScaError::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(ScaError::config("noise_scale", "must be finite and >= 0"));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(ScaError::config("time_scale", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub mlp: Mlp,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let h = config.hidden_dim;
        let mlp = Mlp::new(
            &[
                LayerSpec::hidden(config.input_dim, h, config.dropout),
                LayerSpec::hidden(h, h, config.dropout),
                LayerSpec::linear(h, config.latent_dim),
            ],
            rng,
        )?;
        Ok(Encoder { mlp })
    }

    pub fn encode(&self, x: &Tensor2) -> Result<Tensor2> {
        self.mlp.forward_eval(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// `z → hidden`
    pub trunk: Mlp,
    /// `[hidden | ε] → hidden → 1`
    pub head: Mlp,
    pub noise_dim: usize,
    pub noise_kind: NoiseKind,
    pub noise_scale: f64,
    pub time_scale: f64,
}

/// Forward state kept for [`Generator::backward`].
#[derive(Clone, Debug)]
pub struct GeneratorCache {
    trunk: MlpCache,
    head: MlpCache,
    raw: Vec<f64>,
    hidden_dim: usize,
}

#[derive(Clone, Debug)]
pub struct GeneratorGrads {
    pub trunk: MlpGrads,
    pub head: MlpGrads,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let h = config.hidden_dim;
        let trunk = Mlp::new(&[LayerSpec::hidden(config.latent_dim, h, config.dropout)], rng)?;
        let mut head = Mlp::new(
            &[
                LayerSpec::hidden(h + config.noise_dim, h, config.dropout),
                LayerSpec::linear(h, 1),
            ],
            rng,
        )?;
        // Zero output head: the untrained generator emits one constant time.
        if let Some(out) = head.layers_mut().last_mut() {
            out.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(Generator {
            trunk,
            head,
            noise_dim: config.noise_dim,
            noise_kind: config.noise_kind,
            noise_scale: config.noise_scale,
            time_scale: config.time_scale,
        })
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Tensor2 {
        let n = rows * self.noise_dim;
        let data: Vec<f64> = match self.noise_kind {
            NoiseKind::Uniform => (0..n).map(|_| self.noise_scale * rng.random::<f64>()).collect(),
            NoiseKind::Gaussian => (0..n)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    self.noise_scale * e
                })
                .collect(),
        };
        Tensor2::from_vec(rows, self.noise_dim, data).expect("noise shape")
    }

    fn to_time(&self, raw: f64) -> f64 {
        self.time_scale * softplus(raw)
    }

    fn check_times(times: &[f64]) -> Result<()> {
        if let Some(i) = times.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(ScaError::Numeric(format!(
                "generator produced invalid time {} for row {i}",
                times[i]
            )));
        }
        Ok(())
    }

    /// One time sample per row, recording what backprop needs.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        z: &Tensor2,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, GeneratorCache)> {
        let noise = self.draw_noise(z.rows(), rng);
        self.forward_with_noise(z, &noise, mode, rng)
    }

    pub fn forward_with_noise<R: Rng + ?Sized>(
        &mut self,
        z: &Tensor2,
        noise: &Tensor2,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, GeneratorCache)> {
        let (hidden, trunk_cache) = self.trunk.forward(z, mode, rng)?;
        let joined = Tensor2::hconcat(&hidden, noise)?;
        let (out, head_cache) = self.head.forward(&joined, mode, rng)?;
        let raw = out.into_vec();
        let times: Vec<f64> = raw.iter().map(|&o| self.to_time(o)).collect();
        Self::check_times(&times)?;
        Ok((
            times,
            GeneratorCache {
                trunk: trunk_cache,
                head: head_cache,
                raw,
                hidden_dim: hidden.cols(),
            },
        ))
    }

    /// Gradient of the loss w.r.t. the generator parameters and its latent input,
    /// given `d loss / d t` per row.
    pub fn backward(
        &self,
        cache: &GeneratorCache,
        dtimes: &[f64],
    ) -> Result<(GeneratorGrads, Tensor2)> {
        if dtimes.len() != cache.raw.len() {
            return Err(ScaError::Dimension(format!(
                "{} time gradients for {} rows",
                dtimes.len(),
                cache.raw.len()
            )));
        }
        let draw: Vec<f64> = dtimes
            .iter()
            .zip(&cache.raw)
            .map(|(g, &o)| g * self.time_scale * sigmoid(o))
            .collect();
        let upstream = Tensor2::from_vec(draw.len(), 1, draw)?;
        let (head, djoined) = self.head.backward(&cache.head, &upstream)?;
        let dhidden = djoined.slice_cols(0, cache.hidden_dim);
        let (trunk, dz) = self.trunk.backward(&cache.trunk, &dhidden)?;
        Ok((GeneratorGrads { trunk, head }, dz))
    }

    /// Eval-mode sampling of `samples` times per row of `z`.
    pub fn sample_times<R: Rng + ?Sized>(
        &self,
        z: &Tensor2,
        samples: usize,
        rng: &mut R,
    ) -> Result<EventSampleSet> {
        if samples == 0 {
            return Err(ScaError::Domain("need at least one sample".into()));
        }
        let hidden = self.trunk.forward_eval(z)?;
        let n = z.rows();
        let mut out = Tensor2::zeros(n, samples);
        for s in 0..samples {
            let noise = self.draw_noise(n, rng);
            let joined = Tensor2::hconcat(&hidden, &noise)?;
            let raw = self.head.forward_eval(&joined)?;
            for i in 0..n {
                out.set(i, s, self.to_time(raw.get(i, 0)));
            }
        }
        Self::check_times(out.data())?;
        Ok(EventSampleSet { samples: out })
    }
}

/// `S` sampled event times per individual (one row each).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSampleSet {
    pub samples: Tensor2,
}

impl EventSampleSet {
    pub fn individuals(&self) -> usize {
        self.samples.rows()
    }

    pub fn samples_per_individual(&self) -> usize {
        self.samples.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    pub fn medians(&self) -> Vec<f64> {
        self.samples.iter_rows().map(predict_median).collect()
    }
}

/// Lower median: the element at index `(S - 1) / 2` of the sorted samples.
pub fn predict_median(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "median of an empty sample");
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    s[(s.len() - 1) / 2]
}

/// Encoder plus generator, with the configuration that built them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub generator: Generator,
}

impl SurvivalModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, rng)?;
        let generator = Generator::new(&config, rng)?;
        Ok(SurvivalModel {
            config,
            encoder,
            generator,
        })
    }

    pub fn encode(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.config.input_dim {
            return Err(ScaError::Dimension(format!(
                "model expects {} covariates, got {}",
                self.config.input_dim,
                x.cols()
            )));
        }
        self.encoder.encode(x)
    }

    pub fn sample_times<R: Rng + ?Sized>(
        &self,
        x: &Tensor2,
        samples: usize,
        rng: &mut R,
    ) -> Result<EventSampleSet> {
        let z = self.encode(x)?;
        self.generator.sample_times(&z, samples, rng)
    }

    pub fn num_params(&self) -> usize {
        self.encoder.mlp.num_params() + self.generator.trunk.num_params() + self.generator.head.num_params()
    }
}
