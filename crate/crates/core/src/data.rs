//! Dataset ingestion, preprocessing, splitting and the synthetic benchmark.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaError};
use crate::ndnet::Tensor2;
use crate::seeded_rng;

/// Names the time and event columns and which covariates are categorical.
/// Every other column except those in `ignore` is read as continuous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub time: String,
    pub event: String,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub ignore: Vec<String>,
}

impl Schema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Continuous { name: String, values: Vec<Option<f64>> },
    Categorical { name: String, values: Vec<Option<String>> },
}

impl Column {
    pub fn name(&self) -> &str {
        match self {
            Column::Continuous { name, .. } | Column::Categorical { name, .. } => name,
        }
    }

    pub fn missing(&self) -> usize {
        match self {
            Column::Continuous { values, .. } => values.iter().filter(|v| v.is_none()).count(),
            Column::Categorical { values, .. } => values.iter().filter(|v| v.is_none()).count(),
        }
    }
}

/// Parsed covariates plus survival columns; `None` marks a missing cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub columns: Vec<Column>,
    pub time: Vec<Option<f64>>,
    pub event: Vec<u8>,
}

impl RawTable {
    pub fn rows(&self) -> usize {
        self.event.len()
    }

    /// Keeps only the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> RawTable {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                Column::Continuous { name, values } => Column::Continuous {
                    name: name.clone(),
                    values: rows.iter().map(|&r| values[r]).collect(),
                },
                Column::Categorical { name, values } => Column::Categorical {
                    name: name.clone(),
                    values: rows.iter().map(|&r| values[r].clone()).collect(),
                },
            })
            .collect();
        RawTable {
            columns,
            time: rows.iter().map(|&r| self.time[r]).collect(),
            event: rows.iter().map(|&r| self.event[r]).collect(),
        }
    }
}

fn is_missing_token(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "N/A" | "NaN" | "nan" | "null" | "NULL" | "?" | ".")
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    if is_missing_token(s) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ScaError::Data(format!("missing required column `{name}`")))
    };
    let time_col = find(&schema.time)?;
    let event_col = find(&schema.event)?;
    for c in &schema.categorical {
        find(c)?;
    }
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != time_col && i != event_col && !schema.ignore.contains(&headers[i]))
        .collect();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    let mut time = Vec::new();
    let mut event = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based data row numbering, header excluded
        let line = row + 1;
        time.push(parse_number(&record[time_col]));
        let e = record[event_col].trim();
        match parse_number(e) {
            Some(v) if v == 0.0 => event.push(0),
            Some(v) if v == 1.0 => event.push(1),
            _ => {
                return Err(ScaError::Data(format!(
                    "row {line}: event column `{}` has value `{e}`, expected 0 or 1",
                    schema.event
                )))
            }
        }
        for &c in &feature_cols {
            raw[c].push(record[c].trim().to_string());
        }
    }
    if event.is_empty() {
        return Err(ScaError::Data("no data rows".into()));
    }
    let columns = feature_cols
        .into_iter()
        .map(|c| {
            let name = headers[c].clone();
            let cells = std::mem::take(&mut raw[c]);
            if schema.categorical.contains(&name) {
                Column::Categorical {
                    name,
                    values: cells
                        .into_iter()
                        .map(|s| (!is_missing_token(&s)).then_some(s))
                        .collect(),
                }
            } else {
                Column::Continuous {
                    name,
                    values: cells.iter().map(|s| parse_number(s)).collect(),
                }
            }
        })
        .collect();
    Ok(RawTable {
        columns,
        time,
        event,
    })
}

/// Fitted transform for one covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureTransform {
    /// Median imputation followed by z-scoring.
    Continuous {
        name: String,
        median: f64,
        mean: f64,
        std: f64,
    },
    /// Mode imputation followed by one-hot encoding over `levels`.
    Categorical {
        name: String,
        mode: String,
        levels: Vec<String>,
    },
}

/// Everything needed to transform unseen rows exactly as the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub features: Vec<FeatureTransform>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

impl Manifest {
    /// Fits imputation, scaling and level maps on the given rows.
    pub fn fit(table: &RawTable, rows: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(table.columns.len());
        for col in &table.columns {
            match col {
                Column::Continuous { name, values } => {
                    let mut seen: Vec<f64> = rows.iter().filter_map(|&r| values[r]).collect();
                    if seen.is_empty() {
                        return Err(ScaError::Data(format!("column `{name}` is entirely missing")));
                    }
                    seen.sort_by(f64::total_cmp);
                    let med = median(&seen);
                    let filled: Vec<f64> = rows.iter().map(|&r| values[r].unwrap_or(med)).collect();
                    let n = filled.len() as f64;
                    let mean = filled.iter().sum::<f64>() / n;
                    let var = filled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                    features.push(FeatureTransform::Continuous {
                        name: name.clone(),
                        median: med,
                        mean,
                        std,
                    });
                }
                Column::Categorical { name, values } => {
                    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                    for &r in rows {
                        if let Some(v) = &values[r] {
                            *counts.entry(v.as_str()).or_default() += 1;
                        }
                    }
                    // most frequent level; ties go to the lexicographically first
                    let mode = counts
                        .iter()
                        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                        .map(|(k, _)| k.to_string())
                        .ok_or_else(|| {
                            ScaError::Data(format!("column `{name}` is entirely missing"))
                        })?;
                    features.push(FeatureTransform::Categorical {
                        name: name.clone(),
                        mode,
                        levels: counts.keys().map(|k| k.to_string()).collect(),
                    });
                }
            }
        }
        Ok(Manifest { features })
    }

    pub fn output_dim(&self) -> usize {
        self.features
            .iter()
            .map(|f| match f {
                FeatureTransform::Continuous { .. } => 1,
                FeatureTransform::Categorical { levels, .. } => levels.len(),
            })
            .sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for f in &self.features {
            match f {
                FeatureTransform::Continuous { name, .. } => out.push(name.clone()),
                FeatureTransform::Categorical { name, levels, .. } => {
                    out.extend(levels.iter().map(|l| format!("{name}={l}")))
                }
            }
        }
        out
    }

    /// Transforms every row of `table`. Unseen categorical levels encode as
    /// all zeros.
    pub fn transform(&self, table: &RawTable) -> Result<Tensor2> {
        if table.columns.len() != self.features.len() {
            return Err(ScaError::Dimension(format!(
                "table has {} covariates, manifest expects {}",
                table.columns.len(),
                self.features.len()
            )));
        }
        let n = table.rows();
        let width = self.output_dim();
        let mut x = Tensor2::zeros(n, width);
        let mut offset = 0;
        for (f, col) in self.features.iter().zip(&table.columns) {
            if f.name() != col.name() {
                return Err(ScaError::Data(format!(
                    "column `{}` where `{}` was expected",
                    col.name(),
                    f.name()
                )));
            }
            match (f, col) {
                (
                    FeatureTransform::Continuous {
                        median, mean, std, ..
                    },
                    Column::Continuous { values, .. },
                ) => {
                    for (r, v) in values.iter().enumerate() {
                        x.set(r, offset, (v.unwrap_or(*median) - mean) / std);
                    }
                    offset += 1;
                }
                (
                    FeatureTransform::Categorical { mode, levels, .. },
                    Column::Categorical { values, .. },
                ) => {
                    for (r, v) in values.iter().enumerate() {
                        let v = v.as_deref().unwrap_or(mode);
                        if let Ok(i) = levels.binary_search_by(|l| l.as_str().cmp(v)) {
                            x.set(r, offset + i, 1.0);
                        }
                    }
                    offset += levels.len();
                }
                _ => {
                    return Err(ScaError::Data(format!(
                        "column `{}` changed kind since the manifest was fitted",
                        f.name()
                    )))
                }
            }
        }
        Ok(x)
    }
}

impl FeatureTransform {
    pub fn name(&self) -> &str {
        match self {
            FeatureTransform::Continuous { name, .. } | FeatureTransform::Categorical { name, .. } => {
                name
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = ScaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(ScaError::config("split", format!("unknown split `{other}`"))),
        }
    }
}

/// Stratified 80/10/10 split on the event indicator.
///
/// Each stratum is shuffled and laid out at evenly spaced fractional
/// positions, so every split receives its share of each stratum up to one
/// row. Falls back to a plain random split (with a warning) when a stratum
/// is too small to reach every split.
pub fn split(events: &[u8], seed: u64) -> Result<Vec<Split>> {
    let n = events.len();
    if n < 3 {
        return Err(ScaError::Domain(format!("cannot split {n} rows three ways")));
    }
    let n_val = ((n as f64) * 0.1).round().max(1.0) as usize;
    let n_test = n_val;
    let mut rng = seeded_rng(seed);
    let mut strata: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in events.iter().enumerate() {
        strata[l as usize].push(i);
    }
    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(n);
    if strata.iter().all(|s| s.len() >= 3 || s.is_empty()) {
        for (k, s) in strata.iter_mut().enumerate() {
            s.shuffle(&mut rng);
            let m = s.len() as f64;
            keyed.extend(
                s.iter()
                    .enumerate()
                    .map(|(pos, &i)| ((pos as f64 + 0.5) / m, k as u8, i)),
            );
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    } else {
        log::warn!("stratified split infeasible for {n} rows; using a plain random split");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        keyed.extend(idx.into_iter().map(|i| (0.0, 0, i)));
    }
    let mut labels = vec![Split::Train; n];
    for (rank, &(_, _, i)) in keyed.iter().enumerate() {
        labels[i] = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(labels)
}

/// Covariates, outcomes and split labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub x: Tensor2,
    pub t: Vec<f64>,
    pub l: Vec<u8>,
    /// Row indices in the parent dataset.
    pub rows: Vec<usize>,
}

/// Fully preprocessed data with its fitted manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor2,
    pub t: Vec<f64>,
    pub l: Vec<u8>,
    pub split: Vec<Split>,
    pub manifest: Manifest,
    pub feature_names: Vec<String>,
    /// Rows removed because the time was missing or not positive.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn subset(&self, which: Split) -> SplitData {
        let rows = self.indices(which);
        SplitData {
            x: self.x.select_rows(&rows),
            t: rows.iter().map(|&i| self.t[i]).collect(),
            l: rows.iter().map(|&i| self.l[i]).collect(),
            rows,
        }
    }

    pub fn event_fraction(&self) -> f64 {
        self.l.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// Drops rows without a positive time, splits, fits the manifest on the
/// training rows only and transforms everything.
pub fn preprocess(table: &RawTable, seed: u64) -> Result<Dataset> {
    let keep: Vec<usize> = (0..table.rows())
        .filter(|&r| table.time[r].is_some_and(|t| t > 0.0))
        .collect();
    let dropped_rows = table.rows() - keep.len();
    if dropped_rows > 0 {
        log::info!("dropped {dropped_rows} rows with a missing or non-positive time");
    }
    let table = table.select(&keep);
    let l = table.event.clone();
    let t: Vec<f64> = table.time.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let split = split(&l, seed)?;
    let train: Vec<usize> = (0..l.len()).filter(|&i| split[i] == Split::Train).collect();
    let manifest = Manifest::fit(&table, &train)?;
    let x = manifest.transform(&table)?;
    Ok(Dataset {
        x,
        t,
        l,
        split,
        feature_names: manifest.feature_names(),
        manifest,
        dropped_rows,
    })
}

/// Knobs of the synthetic Weibull cluster benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_cluster: usize,
    pub n_clusters: usize,
    /// Total covariate count.
    pub p: usize,
    /// Cluster `k` has mean `separation · e_k` in the risk dimensions.
    pub separation: f64,
    pub weibull_shape: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub censor_fraction: f64,
    /// Outcome-independent grouping drawn independently of the risk cluster.
    pub nuisance_groups: usize,
    /// Covariates carrying the nuisance grouping, split evenly among groups.
    pub nuisance_dims: usize,
    /// Shift applied to each covariate of a nuisance group's block.
    pub nuisance_shift: f64,
}

impl SynthConfig {
    pub fn new(n_per_cluster: usize, n_clusters: usize) -> Self {
        SynthConfig {
            n_per_cluster,
            n_clusters,
            p: 10,
            separation: 4.0,
            weibull_shape: 2.0,
            scale_min: 1.0,
            scale_max: 10.0,
            censor_fraction: 0.3,
            nuisance_groups: 0,
            nuisance_dims: 0,
            nuisance_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(ScaError::config("n_clusters", "need at least two clusters"));
        }
        if self.n_per_cluster == 0 {
            return Err(ScaError::config("n_per_cluster", "must be positive"));
        }
        if self.n_clusters + self.nuisance_dims > self.p {
            return Err(ScaError::config(
                "p",
                "too few covariates for the risk and nuisance dimensions",
            ));
        }
        if self.nuisance_dims > 0 && self.nuisance_groups == 0 {
            return Err(ScaError::config("nuisance_groups", "must be positive"));
        }
        if !(self.weibull_shape > 0.0 && self.scale_min > 0.0 && self.scale_max >= self.scale_min) {
            return Err(ScaError::config("weibull", "shape and scales must be positive"));
        }
        if !(0.0..1.0).contains(&self.censor_fraction) {
            return Err(ScaError::config("censor_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Weibull scale of cluster `k`, geometric from `scale_min` to `scale_max`.
    pub fn scale(&self, k: usize) -> f64 {
        let r = k as f64 / (self.n_clusters - 1) as f64;
        self.scale_min * (self.scale_max / self.scale_min).powf(r)
    }
}

/// A synthetic raw table with its hidden generating quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub table: RawTable,
    pub labels: Vec<usize>,
    pub nuisance_labels: Vec<usize>,
    /// Uncensored event times before censoring was applied.
    pub event_times: Vec<f64>,
    pub censor_max: f64,
}

impl SyntheticData {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.table.columns.iter().map(|c| c.name().to_string()).collect();
        header.extend(["time".to_string(), "event".to_string()]);
        w.write_record(&header)?;
        for r in 0..self.table.rows() {
            let mut rec: Vec<String> = self
                .table
                .columns
                .iter()
                .map(|c| match c {
                    Column::Continuous { values, .. } => {
                        values[r].map(|v| v.to_string()).unwrap_or_default()
                    }
                    Column::Categorical { values, .. } => values[r].clone().unwrap_or_default(),
                })
                .collect();
            rec.push(self.table.time[r].map(|v| v.to_string()).unwrap_or_default());
            rec.push(self.table.event[r].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn schema() -> Schema {
        Schema {
            time: "time".into(),
            event: "event".into(),
            categorical: Vec::new(),
            ignore: Vec::new(),
        }
    }
}

/// Draws the synthetic benchmark.
///
/// Covariates are unit-variance Gaussians around the cluster mean (plus the
/// nuisance shift, if configured), event times are Weibull with a
/// cluster-specific scale, and censoring is uniform on `(0, c_max]` with
/// `c_max` tuned by bisection to hit the requested censoring fraction.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let n = config.n_per_cluster * config.n_clusters;
    let block = if config.nuisance_groups > 0 {
        config.nuisance_dims / config.nuisance_groups
    } else {
        0
    };
    let mut x = vec![vec![0.0; n]; config.p];
    let mut labels = Vec::with_capacity(n);
    let mut nuisance_labels = Vec::with_capacity(n);
    let mut event_times = Vec::with_capacity(n);
    for k in 0..config.n_clusters {
        let scale = config.scale(k);
        for _ in 0..config.n_per_cluster {
            let i = labels.len();
            let g = if config.nuisance_groups > 0 {
                rng.random_range(0..config.nuisance_groups)
            } else {
                0
            };
            for (d, col) in x.iter_mut().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let mut mean = if d == k { config.separation } else { 0.0 };
                let nd = d.wrapping_sub(config.n_clusters);
                if d >= config.n_clusters && nd < block * config.nuisance_groups && nd / block == g {
                    mean += config.nuisance_shift;
                }
                col[i] = mean + noise;
            }
            let u: f64 = 1.0 - rng.random::<f64>();
            event_times.push(scale * (-u.ln()).powf(1.0 / config.weibull_shape));
            labels.push(k);
            nuisance_labels.push(g);
        }
    }
    let censor_u: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
    let censored_at = |c: f64| {
        censor_u
            .iter()
            .zip(&event_times)
            .filter(|(u, t)| c * **u < **t)
            .count() as f64
            / n as f64
    };
    let censor_max = if config.censor_fraction == 0.0 {
        f64::INFINITY
    } else {
        let max_t = event_times.iter().cloned().fold(0.0, f64::max);
        let (mut lo, mut hi) = (0.0, max_t / censor_u.iter().cloned().fold(1.0, f64::min));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if censored_at(mid) > config.censor_fraction {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for i in 0..n {
        let c = censor_max * censor_u[i];
        if c < event_times[i] {
            time.push(Some(c));
            event.push(0);
        } else {
            time.push(Some(event_times[i]));
            event.push(1);
        }
    }
    let columns = x
        .into_iter()
        .enumerate()
        .map(|(d, values)| Column::Continuous {
            name: format!("x{d}"),
            values: values.into_iter().map(Some).collect(),
        })
        .collect();
    Ok(SyntheticData {
        table: RawTable {
            columns,
            time,
            event,
        },
        labels,
        nuisance_labels,
        event_times,
        censor_max,
    })
}
