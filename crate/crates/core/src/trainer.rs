//! Training procedure: pretraining without the clustering term, K-means
//! centroid initialisation, joint optimisation with early stopping, and the
//! `γ₀` grid search.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, SplitData};
use crate::dpmix::{self, MixtureState};
use crate::error::{Result, ScaError};
use crate::losses::{self, Heaviside, TimeGrid};
use crate::ndnet::{zip_slots, AdamState, Mode, ParamSlot, Tensor2};
use crate::survmodel::{ModelConfig, NoiseKind, SurvivalModel};
use crate::{seeded_rng, SeededRng};

/// Offset of the random stream used for validation noise.
const VAL_STREAM: u64 = 0x5ca1_ab1e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Truncation level of the mixture.
    pub k: usize,
    /// Concentration used by [`fit`].
    pub gamma0: f64,
    /// Candidates tried by [`grid_search`].
    pub gamma0_grid: Vec<f64>,
    pub eta: f64,
    pub nu: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub noise_dim: usize,
    pub noise_kind: NoiseKind,
    pub noise_scale: f64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 25,
            gamma0: 3.0,
            gamma0_grid: vec![2.0, 3.0, 4.0, 8.0],
            eta: 0.9,
            nu: 1.0,
            batch_size: 350,
            lr: 3e-4,
            lambda2: 1.0,
            lambda3: 1.0,
            max_epochs: 300,
            patience: 20,
            pretrain_epochs: 30,
            seed: 0,
            latent_dim: 50,
            hidden_dim: 50,
            noise_dim: 50,
            noise_kind: NoiseKind::Uniform,
            noise_scale: 1.0,
            dropout: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_f = [
            ("gamma0", self.gamma0),
            ("nu", self.nu),
            ("lr", self.lr),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ];
        for (name, v) in positive_f {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScaError::config(name, "must be finite and > 0"));
            }
        }
        let positive_u = [
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        for (name, v) in positive_u {
            if v == 0 {
                return Err(ScaError::config(name, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(ScaError::config("eta", "must lie in [0, 1)"));
        }
        if self.gamma0_grid.is_empty() {
            return Err(ScaError::config("gamma0_grid", "must not be empty"));
        }
        if self.gamma0_grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(ScaError::config("gamma0_grid", "entries must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ScaError::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(ScaError::config("noise_scale", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Network configuration for `input_dim` covariates and a time scale.
    pub fn model_config(&self, input_dim: usize, time_scale: f64) -> ModelConfig {
        ModelConfig {
            input_dim,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            noise_dim: self.noise_dim,
            noise_kind: self.noise_kind,
            noise_scale: self.noise_scale,
            dropout: self.dropout,
            time_scale,
        }
    }
}

/// Output scale such that an untrained generator (zero output layer) predicts
/// the median training time: `softplus(0) = ln 2`.
pub fn default_time_scale(train_times: &[f64]) -> Result<f64> {
    if train_times.is_empty() {
        return Err(ScaError::Domain("no training times".into()));
    }
    let mut t = train_times.to_vec();
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let med = if n % 2 == 1 {
        t[n / 2]
    } else {
        0.5 * (t[n / 2 - 1] + t[n / 2])
    };
    Ok(med / std::f64::consts::LN_2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Tensor2,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Tensor2) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Stops after 100 iterations or
/// once no centroid moves by more than `1e-6`; an emptied cluster is reseeded
/// at the point farthest from its current centroid.
pub fn kmeans(points: &Tensor2, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(ScaError::Domain(format!("k-means with k = {k} on {n} points")));
    }
    if !points.all_finite() {
        return Err(ScaError::Numeric("non-finite k-means input".into()));
    }
    let d = points.cols();
    let mut rng = seeded_rng(seed);
    let mut centroids = Tensor2::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, points.row(first))).collect();
    for j in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(j).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, points.row(pick)));
        }
    }

    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        let mut point_dist = vec![0.0; n];
        for (i, p) in points.iter_rows().enumerate() {
            let (j, dd) = nearest(p, &centroids);
            labels[i] = j;
            point_dist[i] = dd;
        }
        let mut sums = Tensor2::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter_rows().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| point_dist[a].total_cmp(&point_dist[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                point_dist[far] = 0.0;
                shift = f64::INFINITY;
                centroids.row_mut(j).copy_from_slice(points.row(far));
                continue;
            }
            let inv = 1.0 / counts[j] as f64;
            let mut moved = 0.0;
            for (c, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                let v = s * inv;
                moved += (v - *c) * (v - *c);
                *c = v;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < 1e-6 {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter_rows().enumerate() {
        let (j, dd) = nearest(p, &centroids);
        labels[i] = j;
        inertia += dd;
    }
    Ok(KMeansResult {
        centroids,
        labels,
        inertia,
        iterations,
    })
}

/// Loss components averaged over one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clustering: f64,
    pub accuracy: f64,
    pub calibration: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
}

/// One epoch of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub effective_k: Option<usize>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "epoch,phase,train_dp,train_acc,train_cal,train_total,val_dp,val_acc,val_cal,val_total,effective_k,wall_seconds"
        )?;
        for e in &self.epochs {
            let phase = match e.phase {
                Phase::Pretrain => "pretrain",
                Phase::Joint => "joint",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                phase,
                e.train.clustering,
                e.train.accuracy,
                e.train.calibration,
                e.train.total,
                e.val.clustering,
                e.val.accuracy,
                e.val.calibration,
                e.val.total,
                e.effective_k.map(|k| k.to_string()).unwrap_or_default(),
                e.wall_seconds
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything produced by one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub model: SurvivalModel,
    pub mixture: MixtureState,
    pub adam: AdamState,
    pub record: TrainRecord,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Loss of a split in evaluation mode: exact step in the calibration curve,
/// one generated time per individual from a fixed noise stream.
pub fn evaluate_loss(
    model: &SurvivalModel,
    mixture: Option<&MixtureState>,
    split: &SplitData,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let z = model.encode(&split.x)?;
    let mut rng = seeded_rng(config.seed.wrapping_add(VAL_STREAM));
    let generated = model.generator.sample_times(&z, 1, &mut rng)?.samples.into_vec();
    let (accuracy, _) = losses::accuracy_loss(&split.t, &split.l, &generated)?;
    let grid = TimeGrid::from_times(&split.t)?;
    let (calibration, _) =
        losses::calibration_loss(&split.t, &split.l, &generated, &grid, Heaviside::Exact)?;
    let clustering = match mixture {
        Some(m) => dpmix::clustering_loss(m, &z)?.value,
        None => 0.0,
    };
    Ok(LossBreakdown {
        clustering,
        accuracy,
        calibration,
        total: losses::total_loss(clustering, accuracy, calibration, config.lambda2, config.lambda3),
    })
}

fn check_finite(b: &LossBreakdown, phase: Phase, epoch: usize, step: usize) -> Result<()> {
    if [b.clustering, b.accuracy, b.calibration, b.total].iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(ScaError::Numeric(format!(
        "training diverged ({phase:?} epoch {epoch}, step {step}): dp {} acc {} cal {} total {}",
        b.clustering, b.accuracy, b.calibration, b.total
    )))
}

/// One optimisation step on a minibatch. The clustering term is included
/// when `mixture` is given; `π` is refreshed after the gradient step.
fn train_step(
    model: &mut SurvivalModel,
    mut mixture: Option<&mut MixtureState>,
    adam: &mut AdamState,
    x: &Tensor2,
    t: &[f64],
    l: &[u8],
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<LossBreakdown> {
    let (z, enc_cache) = model.encoder.mlp.forward(x, Mode::Train, rng)?;
    let (generated, gen_cache) = model.generator.forward(&z, Mode::Train, rng)?;
    let (accuracy, dacc) = losses::accuracy_loss(t, l, &generated)?;
    let grid = TimeGrid::from_times(t)?;
    let heaviside = Heaviside::Sigmoid {
        tau: grid.default_temperature(),
    };
    let (calibration, dcal) = losses::calibration_loss(t, l, &generated, &grid, heaviside)?;
    let dtimes: Vec<f64> = dacc
        .iter()
        .zip(&dcal)
        .map(|(a, c)| config.lambda2 * a + config.lambda3 * c)
        .collect();
    let (gen_grads, mut dz) = model.generator.backward(&gen_cache, &dtimes)?;

    let cluster = match mixture.as_deref() {
        Some(m) => {
            let c = dpmix::clustering_loss(m, &z)?;
            dz.add_assign(&c.grad_z)?;
            Some(c)
        }
        None => None,
    };
    let (enc_grads, _) = model.encoder.mlp.backward(&enc_cache, &dz)?;

    let clustering = cluster.as_ref().map_or(0.0, |c| c.value);
    let losses = LossBreakdown {
        clustering,
        accuracy,
        calibration,
        total: losses::total_loss(clustering, accuracy, calibration, config.lambda2, config.lambda3),
    };

    let mut slots: Vec<ParamSlot<'_>> =
        zip_slots(model.encoder.mlp.params_mut("encoder"), enc_grads.named("encoder"))?;
    slots.extend(zip_slots(
        model.generator.trunk.params_mut("generator.trunk"),
        gen_grads.trunk.named("generator.trunk"),
    )?);
    slots.extend(zip_slots(
        model.generator.head.params_mut("generator.head"),
        gen_grads.head.named("generator.head"),
    )?);
    if let (Some(m), Some(c)) = (mixture.as_deref_mut(), cluster.as_ref()) {
        slots.push(ParamSlot::new(
            "mixture.centroids",
            m.centroids.data_mut(),
            c.grad_centroids.data(),
        ));
    }
    adam.step(&mut slots)?;
    drop(slots);
    if let (Some(m), Some(c)) = (mixture, cluster) {
        dpmix::update_proportions(m, &c.xi)?;
    }
    Ok(losses)
}

/// One shuffled pass over the training rows. Batches of a single row are
/// skipped since batch normalisation cannot use them.
fn run_epoch(
    model: &mut SurvivalModel,
    mut mixture: Option<&mut MixtureState>,
    adam: &mut AdamState,
    train: &SplitData,
    config: &TrainConfig,
    rng: &mut SeededRng,
    phase: Phase,
    epoch: usize,
) -> Result<LossBreakdown> {
    let n = train.t.len();
    let m = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut sum = LossBreakdown::default();
    let mut weight = 0.0;
    for (step, chunk) in order.chunks(m).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let x = train.x.select_rows(chunk);
        let t: Vec<f64> = chunk.iter().map(|&i| train.t[i]).collect();
        let l: Vec<u8> = chunk.iter().map(|&i| train.l[i]).collect();
        let b = train_step(model, mixture.as_deref_mut(), adam, &x, &t, &l, config, rng)?;
        check_finite(&b, phase, epoch, step)?;
        let w = chunk.len() as f64;
        sum.clustering += w * b.clustering;
        sum.accuracy += w * b.accuracy;
        sum.calibration += w * b.calibration;
        sum.total += w * b.total;
        weight += w;
    }
    if weight > 0.0 {
        sum.clustering /= weight;
        sum.accuracy /= weight;
        sum.calibration /= weight;
        sum.total /= weight;
    }
    Ok(sum)
}

fn check_splits(data: &Dataset) -> Result<(SplitData, SplitData)> {
    let train = data.subset(Split::Train);
    let val = data.subset(Split::Val);
    if train.t.len() < 2 {
        return Err(ScaError::Data("training split needs at least two rows".into()));
    }
    if val.t.is_empty() {
        return Err(ScaError::Data("validation split is empty".into()));
    }
    Ok((train, val))
}

fn pretrain_with(
    model: &mut SurvivalModel,
    adam: &mut AdamState,
    train: &SplitData,
    val: &SplitData,
    config: &TrainConfig,
    rng: &mut SeededRng,
    record: &mut TrainRecord,
) -> Result<()> {
    for epoch in 1..=config.pretrain_epochs {
        let start = Instant::now();
        let tr = run_epoch(model, None, adam, train, config, rng, Phase::Pretrain, epoch)?;
        let va = evaluate_loss(model, None, val, config)?;
        check_finite(&va, Phase::Pretrain, epoch, 0)?;
        record.epochs.push(EpochRecord {
            epoch,
            phase: Phase::Pretrain,
            train: tr,
            val: va,
            effective_k: None,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Builds a fresh model whose output scale follows the training times.
pub fn init_model(config: &TrainConfig, data: &Dataset, rng: &mut SeededRng) -> Result<SurvivalModel> {
    let train_t: Vec<f64> = data.indices(Split::Train).iter().map(|&i| data.t[i]).collect();
    let scale = default_time_scale(&train_t)?;
    SurvivalModel::new(config.model_config(data.dim(), scale), rng)
}

/// Minimises `λ₂ ℓ_acc + λ₃ ℓ_cal` for `pretrain_epochs` epochs.
pub fn pretrain(model: &mut SurvivalModel, config: &TrainConfig, data: &Dataset) -> Result<TrainRecord> {
    config.validate()?;
    let (train, val) = check_splits(data)?;
    let mut rng = seeded_rng(config.seed);
    let mut adam = AdamState::new(config.lr);
    let mut record = TrainRecord::default();
    pretrain_with(model, &mut adam, &train, &val, config, &mut rng, &mut record)?;
    Ok(record)
}

/// Full procedure for `config.gamma0`: pretrain, initialise the centroids with
/// K-means on the training encodings, then train everything jointly with
/// early stopping on the validation total loss. Returns the best snapshot.
pub fn fit(config: &TrainConfig, data: &Dataset) -> Result<FitOutput> {
    config.validate()?;
    let (train, val) = check_splits(data)?;
    if train.t.len() < config.k {
        return Err(ScaError::config(
            "k",
            format!("{} components exceed {} training rows", config.k, train.t.len()),
        ));
    }
    let mut rng = seeded_rng(config.seed);
    let mut model = init_model(config, data, &mut rng)?;
    let mut adam = AdamState::new(config.lr);
    let mut record = TrainRecord::default();
    pretrain_with(&mut model, &mut adam, &train, &val, config, &mut rng, &mut record)?;

    let z_train = model.encode(&train.x)?;
    let km = kmeans(&z_train, config.k, rng.random())?;
    let mut mixture = MixtureState::new(km.centroids, config.gamma0, config.nu, config.eta)?;

    let start = Instant::now();
    let initial = evaluate_loss(&model, Some(&mixture), &val, config)?;
    check_finite(&initial, Phase::Joint, 0, 0)?;
    record.epochs.push(EpochRecord {
        epoch: 0,
        phase: Phase::Joint,
        train: LossBreakdown::default(),
        val: initial,
        effective_k: Some(dpmix::effective_k(&mixture, &z_train)),
        wall_seconds: start.elapsed().as_secs_f64(),
    });
    let mut best = (model.clone(), mixture.clone(), adam.clone());
    let mut best_epoch = 0;
    let mut best_val = initial.total;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let tr = run_epoch(
            &mut model,
            Some(&mut mixture),
            &mut adam,
            &train,
            config,
            &mut rng,
            Phase::Joint,
            epoch,
        )?;
        let va = evaluate_loss(&model, Some(&mixture), &val, config)?;
        check_finite(&va, Phase::Joint, epoch, 0)?;
        if !mixture.centroids.all_finite() {
            return Err(ScaError::Numeric(format!("non-finite centroids after epoch {epoch}")));
        }
        let z = model.encode(&train.x)?;
        record.epochs.push(EpochRecord {
            epoch,
            phase: Phase::Joint,
            train: tr,
            val: va,
            effective_k: Some(dpmix::effective_k(&mixture, &z)),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if va.total < best_val {
            best_val = va.total;
            best_epoch = epoch;
            best = (model.clone(), mixture.clone(), adam.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }
    let (model, mixture, adam) = best;
    Ok(FitOutput {
        model,
        mixture,
        adam,
        record,
        best_epoch,
        best_val_loss: best_val,
    })
}

/// Validation loss of one grid candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCandidate {
    pub gamma0: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchOutput {
    pub best_gamma0: f64,
    pub candidates: Vec<GridCandidate>,
    pub best: FitOutput,
}

/// Fits one model per `γ₀` (in parallel threads) and keeps the lowest
/// validation loss; ties go to the smaller `γ₀`.
pub fn grid_search(config: &TrainConfig, data: &Dataset) -> Result<GridSearchOutput> {
    config.validate()?;
    let results: Vec<Result<FitOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = config
            .gamma0_grid
            .iter()
            .map(|&g| {
                let mut c = config.clone();
                c.gamma0 = g;
                s.spawn(move || fit(&c, data))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(ScaError::Numeric("grid worker panicked".into())))
            })
            .collect()
    });
    let mut fits = Vec::with_capacity(results.len());
    for r in results {
        fits.push(r?);
    }
    let candidates: Vec<GridCandidate> = config
        .gamma0_grid
        .iter()
        .zip(&fits)
        .map(|(&gamma0, f)| GridCandidate {
            gamma0,
            best_val_loss: f.best_val_loss,
            best_epoch: f.best_epoch,
        })
        .collect();
    let mut order: Vec<usize> = (0..fits.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[a]
            .best_val_loss
            .total_cmp(&candidates[b].best_val_loss)
            .then(candidates[a].gamma0.total_cmp(&candidates[b].gamma0))
    });
    let pick = order[0];
    let best_gamma0 = candidates[pick].gamma0;
    let best = fits.swap_remove(pick);
    Ok(GridSearchOutput {
        best_gamma0,
        candidates,
        best,
    })
}
