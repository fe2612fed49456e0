//! Evaluation battery: Kaplan-Meier with Greenwood bands, logrank statistics,
//! concordance, relative absolute error, dispersion, calibration slope and ARI.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaError};
use crate::ndnet::Tensor2;

/// z-value of the two-sided 95% normal band.
pub const BAND_Z: f64 = 1.959963984540054;

/// Product-limit curve over the distinct observed times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    /// Greenwood variance of each survival value.
    pub variance: Vec<f64>,
}

impl SurvivalCurve {
    /// Right-continuous step evaluation; 1 before the first time.
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            i => self.survival[i - 1],
        }
    }

    /// Pointwise 95% band, clipped to [0, 1].
    pub fn bands(&self) -> (Vec<f64>, Vec<f64>) {
        self.survival
            .iter()
            .zip(&self.variance)
            .map(|(s, v)| {
                let h = BAND_Z * v.sqrt();
                ((s - h).clamp(0.0, 1.0), (s + h).clamp(0.0, 1.0))
            })
            .unzip()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let (lo, hi) = self.bands();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "time,survival,lower,upper")?;
        for i in 0..self.times.len() {
            writeln!(w, "{},{},{},{}", self.times[i], self.survival[i], lo[i], hi[i])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_survival_data(times: &[f64], events: &[u8]) -> Result<()> {
    if times.is_empty() {
        return Err(ScaError::Domain("no observations".into()));
    }
    if times.len() != events.len() {
        return Err(ScaError::Dimension(format!(
            "{} times but {} event indicators",
            times.len(),
            events.len()
        )));
    }
    if times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(ScaError::Domain("times must be positive and finite".into()));
    }
    Ok(())
}

/// `(time, at risk, events)` at each distinct observed time.
fn risk_table(times: &[f64], events: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = Vec::new();
    let mut at_risk = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < order.len() && times[order[j]] == t {
            d += events[order[j]] as usize;
            j += 1;
        }
        out.push((t, at_risk, d));
        at_risk -= j - i;
        i = j;
    }
    out
}

pub fn kaplan_meier(times: &[f64], events: &[u8]) -> Result<SurvivalCurve> {
    check_survival_data(times, events)?;
    let table = risk_table(times, events);
    let mut curve = SurvivalCurve {
        times: Vec::with_capacity(table.len()),
        survival: Vec::with_capacity(table.len()),
        variance: Vec::with_capacity(table.len()),
    };
    let mut s = 1.0;
    let mut greenwood = 0.0;
    for (t, n, d) in table {
        if d > 0 {
            s *= 1.0 - d as f64 / n as f64;
            if n > d {
                greenwood += d as f64 / (n as f64 * (n - d) as f64);
            }
        }
        curve.times.push(t);
        curve.survival.push(s);
        // the variance collapses with the curve once every subject has failed
        curve.variance.push(if s > 0.0 { s * s * greenwood } else { 0.0 });
    }
    Ok(curve)
}

/// Observed times and event indicators of one group.
#[derive(Clone, Copy, Debug)]
pub struct Group<'a> {
    pub times: &'a [f64],
    pub events: &'a [u8],
}

impl<'a> Group<'a> {
    pub fn new(times: &'a [f64], events: &'a [u8]) -> Self {
        Group { times, events }
    }
}

/// Two-sample logrank chi-square statistic with hypergeometric variance.
///
/// Returns 0 when neither group has an event (or the variance vanishes).
pub fn logrank_pair(a: Group<'_>, b: Group<'_>) -> Result<f64> {
    check_survival_data(a.times, a.events)?;
    check_survival_data(b.times, b.events)?;
    let mut pooled: Vec<(f64, u8, bool)> = Vec::with_capacity(a.times.len() + b.times.len());
    pooled.extend(a.times.iter().zip(a.events).map(|(&t, &l)| (t, l, true)));
    pooled.extend(b.times.iter().zip(b.events).map(|(&t, &l)| (t, l, false)));
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut n_a = a.times.len() as f64;
    let mut n_b = b.times.len() as f64;
    let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let (mut d_a, mut d_b, mut out_a, mut out_b) = (0.0, 0.0, 0.0, 0.0);
        while i < pooled.len() && pooled[i].0 == t {
            let (_, l, in_a) = pooled[i];
            if in_a {
                out_a += 1.0;
                d_a += l as f64;
            } else {
                out_b += 1.0;
                d_b += l as f64;
            }
            i += 1;
        }
        let d = d_a + d_b;
        let n = n_a + n_b;
        if d > 0.0 {
            obs += d_a;
            exp += d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
            }
        }
        n_a -= out_a;
        n_b -= out_b;
    }
    if var <= 0.0 {
        return Ok(0.0);
    }
    Ok((obs - exp).powi(2) / var)
}

/// Sum of pairwise logrank statistics over all non-empty cluster pairs.
///
/// `None` when fewer than two clusters are populated, i.e. there is no
/// clustering structure to score.
pub fn logrank_score(assignments: &[usize], times: &[f64], events: &[u8]) -> Result<Option<f64>> {
    check_survival_data(times, events)?;
    if assignments.len() != times.len() {
        return Err(ScaError::Dimension(format!(
            "{} assignments for {} observations",
            assignments.len(),
            times.len()
        )));
    }
    let mut groups: BTreeMap<usize, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&k, &t), &l) in assignments.iter().zip(times).zip(events) {
        let g = groups.entry(k).or_default();
        g.0.push(t);
        g.1.push(l);
    }
    if groups.len() < 2 {
        return Ok(None);
    }
    let groups: Vec<_> = groups.into_values().collect();
    let mut total = 0.0;
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            total += logrank_pair(
                Group::new(&groups[i].0, &groups[i].1),
                Group::new(&groups[j].0, &groups[j].1),
            )?;
        }
    }
    Ok(Some(total))
}

/// Harrell's concordance index. A pair `(i, j)` is comparable when
/// `t_i < t_j` and `l_i = 1`; it is concordant when `t̂_i < t̂_j`, and tied
/// predictions count one half. `None` without comparable pairs.
pub fn c_index(predicted: &[f64], times: &[f64], events: &[u8]) -> Result<Option<f64>> {
    if predicted.len() != times.len() || events.len() != times.len() {
        return Err(ScaError::Dimension("c_index inputs differ in length".into()));
    }
    let mut comparable = 0u64;
    let mut score = 0u64; // in half units
    for i in 0..times.len() {
        if events[i] != 1 {
            continue;
        }
        for j in 0..times.len() {
            if times[i] < times[j] {
                comparable += 1;
                if predicted[i] < predicted[j] {
                    score += 2;
                } else if predicted[i] == predicted[j] {
                    score += 1;
                }
            }
        }
    }
    if comparable == 0 {
        return Ok(None);
    }
    Ok(Some(score as f64 / (2 * comparable) as f64))
}

/// Relative absolute error split by censoring status.
///
/// Uncensored rows contribute `min(|t̂ − t| / t, 1)`; censored rows contribute
/// `min(max(0, t − t̂) / t, 1)`, so predictions beyond the censoring time are
/// not penalised. Each component is `None` when its subset is empty.
pub fn rae(predicted: &[f64], times: &[f64], events: &[u8]) -> Result<(Option<f64>, Option<f64>)> {
    if predicted.len() != times.len() || events.len() != times.len() {
        return Err(ScaError::Dimension("rae inputs differ in length".into()));
    }
    if times.iter().any(|t| !(*t > 0.0)) {
        return Err(ScaError::Domain("times must be positive".into()));
    }
    let (mut unc, mut n_unc, mut cen, mut n_cen) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..times.len() {
        let t = times[i];
        if events[i] == 1 {
            unc += ((predicted[i] - t).abs() / t).min(1.0);
            n_unc += 1;
        } else {
            cen += ((t - predicted[i]).max(0.0) / t).min(1.0);
            n_cen += 1;
        }
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok((mean(unc, n_unc), mean(cen, n_cen)))
}

/// Mean over individuals (rows) of sample standard deviation over sample mean.
/// Rows with a zero mean are skipped with a warning.
pub fn mean_cov(samples: &Tensor2) -> Result<f64> {
    let s = samples.cols();
    if s < 2 {
        return Err(ScaError::Domain("need at least two samples per individual".into()));
    }
    if samples.rows() == 0 {
        return Err(ScaError::Domain("no individuals".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for row in samples.iter_rows() {
        let mean = row.iter().sum::<f64>() / s as f64;
        if mean == 0.0 {
            log::warn!("skipping an individual with zero mean sample");
            continue;
        }
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
        total += var.sqrt() / mean.abs();
        used += 1;
    }
    if used == 0 {
        return Err(ScaError::Numeric("every individual has zero mean".into()));
    }
    Ok(total / used as f64)
}

/// A paired empirical and model survival probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub time: f64,
    pub empirical: f64,
    pub model: f64,
}

/// Nearest-rank quantile of sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Population-average model survival: fraction of all generated samples
/// exceeding `t`.
pub fn model_survival(samples: &Tensor2, t: f64) -> f64 {
    let data = samples.data();
    data.iter().filter(|&&v| v > t).count() as f64 / data.len() as f64
}

/// Kaplan-Meier versus model survival at the 10%, 20%, ..., 90% quantiles of
/// the observed event times. Duplicate quantile times are kept once.
pub fn calibration_points(
    samples: &Tensor2,
    times: &[f64],
    events: &[u8],
) -> Result<Vec<CalibrationPoint>> {
    check_survival_data(times, events)?;
    if samples.rows() != times.len() || samples.cols() == 0 {
        return Err(ScaError::Dimension(format!(
            "{} sample rows for {} observations",
            samples.rows(),
            times.len()
        )));
    }
    let mut event_times: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &l)| l == 1)
        .map(|(&t, _)| t)
        .collect();
    if event_times.is_empty() {
        return Err(ScaError::Domain("no observed events".into()));
    }
    event_times.sort_by(f64::total_cmp);
    let km = kaplan_meier(times, events)?;
    let mut points: Vec<CalibrationPoint> = Vec::with_capacity(9);
    for d in 1..=9 {
        let t = quantile_sorted(&event_times, d as f64 / 10.0);
        if points.last().is_some_and(|p| p.time == t) {
            continue;
        }
        points.push(CalibrationPoint {
            time: t,
            empirical: km.at(t),
            model: model_survival(samples, t),
        });
    }
    Ok(points)
}

/// Intercept-free least-squares slope of model on empirical survival.
/// `None` with fewer than two points or a vanishing empirical sum of squares.
pub fn calibration_slope(model: &[f64], empirical: &[f64]) -> Option<f64> {
    if model.len() != empirical.len() || model.len() < 2 {
        return None;
    }
    let see: f64 = empirical.iter().map(|e| e * e).sum();
    if see < 1e-12 {
        return None;
    }
    let sem: f64 = empirical.iter().zip(model).map(|(e, m)| e * m).sum();
    Some(sem / see)
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ScaError::Dimension("labelings differ in length".into()));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |m: u64| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&m| c2(m)).sum();
    let sa: f64 = rows.values().map(|&m| c2(m)).sum();
    let sb: f64 = cols.values().map(|&m| c2(m)).sum();
    let expected = sa * sb / c2(n as u64);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        // both labelings trivial (all singletons or one block)
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// The six headline metrics for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub c_index: Option<f64>,
    pub rae_uncensored: Option<f64>,
    pub rae_censored: Option<f64>,
    pub mean_cov: f64,
    pub calibration_slope: Option<f64>,
    pub logrank_score: Option<f64>,
}

impl MetricsReport {
    /// Computes every metric from an `N × S` sample matrix, median point
    /// predictions and hard cluster assignments.
    pub fn compute(
        samples: &Tensor2,
        predicted: &[f64],
        assignments: &[usize],
        times: &[f64],
        events: &[u8],
    ) -> Result<Self> {
        let (rae_uncensored, rae_censored) = rae(predicted, times, events)?;
        let points = calibration_points(samples, times, events)?;
        let model: Vec<f64> = points.iter().map(|p| p.model).collect();
        let empirical: Vec<f64> = points.iter().map(|p| p.empirical).collect();
        Ok(MetricsReport {
            c_index: c_index(predicted, times, events)?,
            rae_uncensored,
            rae_censored,
            mean_cov: mean_cov(samples)?,
            calibration_slope: calibration_slope(&model, &empirical),
            logrank_score: logrank_score(assignments, times, events)?,
        })
    }
}
