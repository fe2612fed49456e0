use std::fs;
use std::path::{Path, PathBuf};

use sca_core::data::{self, Dataset, Schema, Split, SynthConfig};
use sca_core::dpmix::{self, MixtureState};
use sca_core::metrics::{
    calibration_points, calibration_slope, kaplan_meier, model_survival, MetricsReport,
};
use sca_core::ndnet::Tensor2;
use sca_core::seeded_rng;
use sca_core::survmodel::SurvivalModel;
use sca_core::trainer::{self, TrainConfig};
use sca_core::ScaError;

use crate::error::CliResult;
use crate::run::{
    self, metrics_file, Checkpoint, RunDir, RunManifest, CHECKPOINT_FILE, CHECKPOINT_VERSION,
    DATASET_FILE, MANIFEST_FILE, RECORD_FILE,
};

/// Samples per individual for distribution-based metrics.
pub const EVAL_SAMPLES: usize = 200;

/// Offset of the random stream used for evaluation sampling.
const EVAL_STREAM: u64 = 0xe7a1_5eed;

pub struct TrainArgs {
    pub config: TrainConfig,
    pub data: PathBuf,
    pub schema: PathBuf,
    pub out: PathBuf,
    pub grid: bool,
}

pub fn train(args: TrainArgs) -> CliResult<RunManifest> {
    let TrainArgs { config, data: data_path, schema: schema_path, out, grid } = args;
    config.validate()?;
    let schema = Schema::load(&schema_path)?;
    let table = data::load_csv(&data_path, &schema)?;
    let dataset = data::preprocess(&table, config.seed)?;
    log::info!(
        "loaded {} rows ({} dropped), {} features, {:.1}% events",
        dataset.len(),
        dataset.dropped_rows,
        dataset.dim(),
        100.0 * dataset.event_fraction()
    );

    let (fit, gamma0, candidates) = if grid {
        let g = trainer::grid_search(&config, &dataset)?;
        log::info!("grid search picked gamma0 = {}", g.best_gamma0);
        (g.best, g.best_gamma0, Some(g.candidates))
    } else {
        (trainer::fit(&config, &dataset)?, config.gamma0, None)
    };
    log::info!("best epoch {} (val loss {:.4})", fit.best_epoch, fit.best_val_loss);

    fs::create_dir_all(&out).map_err(ScaError::from)?;
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: fit.model,
        mixture: fit.mixture,
        best_epoch: fit.best_epoch,
        best_val_loss: fit.best_val_loss,
    };
    run::write_json(&out.join(CHECKPOINT_FILE), &checkpoint)?;
    fit.record.write_csv(&out.join(RECORD_FILE))?;
    dataset.save_json(&out.join(DATASET_FILE))?;

    let report = report_for(&checkpoint, &dataset, Split::Test, config.seed)?;
    let metrics = metrics_file("test");
    run::write_json(&out.join(&metrics), &report)?;

    let manifest = RunManifest {
        seed: config.seed,
        data_sha256: run::fingerprint(&[&data_path, &schema_path])?,
        data_path: data_path.display().to_string(),
        schema_path: schema_path.display().to_string(),
        gamma0,
        grid: candidates,
        checkpoint: CHECKPOINT_FILE.into(),
        train_record: RECORD_FILE.into(),
        dataset: DATASET_FILE.into(),
        metrics,
        config,
    };
    run::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn eval_rng(seed: u64) -> sca_core::SeededRng {
    seeded_rng(seed ^ EVAL_STREAM)
}

fn report_for(ck: &Checkpoint, dataset: &Dataset, split: Split, seed: u64) -> CliResult<MetricsReport> {
    let part = dataset.subset(split);
    if part.t.is_empty() {
        return Err(ScaError::Data(format!("split `{}` is empty", split_name(split))).into());
    }
    report_on(&ck.model, &ck.mixture, &part.x, &part.t, &part.l, seed)
}

fn report_on(
    model: &SurvivalModel,
    mixture: &MixtureState,
    x: &Tensor2,
    t: &[f64],
    l: &[u8],
    seed: u64,
) -> CliResult<MetricsReport> {
    let z = model.encode(x)?;
    let samples = model.generator.sample_times(&z, EVAL_SAMPLES, &mut eval_rng(seed))?;
    let assignments = dpmix::assign_batch(mixture, &z);
    Ok(MetricsReport::compute(&samples.samples, &samples.medians(), &assignments, t, l)?)
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

pub fn evaluate(run_dir: &Path, split: Split) -> CliResult<MetricsReport> {
    let run = RunDir::open(run_dir)?;
    let ck = run.checkpoint()?;
    let manifest = run.manifest()?;
    let dataset = run.dataset()?;
    let report = report_for(&ck, &dataset, split, manifest.seed)?;
    run::write_json(&run.root.join(metrics_file(split_name(split))), &report)?;
    Ok(report)
}

/// Rows to cluster or calibrate: either a fresh CSV pushed through the
/// stored feature manifest, or one split of the stored dataset.
struct Cohort {
    ids: Vec<usize>,
    x: Tensor2,
    t: Vec<f64>,
    l: Vec<u8>,
}

fn cohort(run: &RunDir, data: Option<(&Path, &Path)>, split: Split) -> CliResult<Cohort> {
    let dataset = run.dataset()?;
    match data {
        None => {
            let part = dataset.subset(split);
            if part.t.is_empty() {
                return Err(ScaError::Data(format!("split `{}` is empty", split_name(split))).into());
            }
            Ok(Cohort { ids: part.rows, x: part.x, t: part.t, l: part.l })
        }
        Some((csv, schema)) => {
            let schema = Schema::load(schema)?;
            let table = data::load_csv(csv, &schema)?;
            let keep: Vec<usize> = (0..table.rows())
                .filter(|&r| table.time[r].is_some_and(|t| t > 0.0))
                .collect();
            if keep.is_empty() {
                return Err(ScaError::Data("no rows with a positive time".into()).into());
            }
            if keep.len() < table.rows() {
                log::warn!("dropped {} rows without a positive time", table.rows() - keep.len());
            }
            let table = table.select(&keep);
            let x = dataset.manifest.transform(&table)?;
            let t = table.time.iter().map(|v| v.unwrap_or_default()).collect();
            Ok(Cohort { ids: keep, x, t, l: table.event })
        }
    }
}

pub struct ClusterSummary {
    pub effective_k: usize,
    pub curve_paths: Vec<PathBuf>,
}

/// Writes `id,cluster,q_0..q_{K-1}` to `out` and one survival curve per
/// occupied cluster next to it (`<stem>_km_<k>.csv`).
pub fn cluster(
    run_dir: &Path,
    data: Option<(&Path, &Path)>,
    split: Split,
    out: &Path,
) -> CliResult<ClusterSummary> {
    let run = RunDir::open(run_dir)?;
    let ck = run.checkpoint()?;
    let rows = cohort(&run, data, split)?;
    let z = ck.model.encode(&rows.x)?;
    let (q, _) = dpmix::responsibilities_q(&ck.mixture, &z)?;
    let labels = dpmix::assign_batch(&ck.mixture, &z);
    let k = ck.mixture.k();

    let mut w = csv::Writer::from_path(out).map_err(ScaError::from)?;
    let mut header = vec!["id".to_string(), "cluster".to_string()];
    header.extend((0..k).map(|j| format!("q_{j}")));
    w.write_record(&header).map_err(ScaError::from)?;
    for (n, (&id, &label)) in rows.ids.iter().zip(&labels).enumerate() {
        let mut rec = vec![id.to_string(), label.to_string()];
        rec.extend(q.row(n).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(ScaError::from)?;
    }
    w.flush().map_err(ScaError::from)?;

    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("clusters");
    let dir = out.parent().unwrap_or(Path::new("."));
    let mut curve_paths = Vec::new();
    let mut occupied: Vec<usize> = labels.clone();
    occupied.sort_unstable();
    occupied.dedup();
    for &c in &occupied {
        let idx: Vec<usize> = (0..labels.len()).filter(|&n| labels[n] == c).collect();
        let t: Vec<f64> = idx.iter().map(|&n| rows.t[n]).collect();
        let l: Vec<u8> = idx.iter().map(|&n| rows.l[n]).collect();
        let path = dir.join(format!("{stem}_km_{c}.csv"));
        kaplan_meier(&t, &l)?.write_csv(&path)?;
        curve_paths.push(path);
    }
    Ok(ClusterSummary { effective_k: occupied.len(), curve_paths })
}

/// Writes `time,empirical,model,lower,upper` at every distinct observed time,
/// preceded by a `# calibration_slope=` comment line.
pub fn calibration(
    run_dir: &Path,
    data: Option<(&Path, &Path)>,
    split: Split,
    out: &Path,
) -> CliResult<Option<f64>> {
    let run = RunDir::open(run_dir)?;
    let ck = run.checkpoint()?;
    let manifest = run.manifest()?;
    let rows = cohort(&run, data, split)?;
    let z = ck.model.encode(&rows.x)?;
    let samples = ck.model.generator.sample_times(&z, EVAL_SAMPLES, &mut eval_rng(manifest.seed))?;
    let points = calibration_points(&samples.samples, &rows.t, &rows.l)?;
    let model: Vec<f64> = points.iter().map(|p| p.model).collect();
    let empirical: Vec<f64> = points.iter().map(|p| p.empirical).collect();
    let slope = calibration_slope(&model, &empirical);

    let km = kaplan_meier(&rows.t, &rows.l)?;
    let (lower, upper) = km.bands();
    let mut text = match slope {
        Some(s) => format!("# calibration_slope={s}\n"),
        None => "# calibration_slope=NA\n".to_string(),
    };
    text.push_str("time,empirical,model,lower,upper\n");
    for (i, &t) in km.times.iter().enumerate() {
        let m = model_survival(&samples.samples, t);
        text.push_str(&format!("{t},{},{m},{},{}\n", km.survival[i], lower[i], upper[i]));
    }
    fs::write(out, text).map_err(ScaError::from)?;
    Ok(slope)
}

pub struct SynthArgs {
    pub config: SynthConfig,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes `data.csv`, `schema.json` and `labels.csv` (true cluster per row).
pub fn synth(args: SynthArgs) -> CliResult<()> {
    let data = data::synth_generate(&args.config, args.seed)?;
    fs::create_dir_all(&args.out).map_err(ScaError::from)?;
    data.write_csv(&args.out.join("data.csv"))?;
    run::write_json(&args.out.join("schema.json"), &data::SyntheticData::schema())?;
    let mut text = String::from("id,cluster\n");
    for (i, c) in data.labels.iter().enumerate() {
        text.push_str(&format!("{i},{c}\n"));
    }
    fs::write(args.out.join("labels.csv"), text).map_err(ScaError::from)?;
    log::info!("wrote {} rows (censoring bound {:.3})", data.labels.len(), data.censor_max);
    Ok(())
}

