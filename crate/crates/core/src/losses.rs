//! Accuracy and calibration objectives and the joint training loss.
//!
//! The calibration loss compares two point-estimate Kaplan-Meier curves over
//! the distinct observed times of a batch: one from the observed `(t, l)` and
//! one from generated times (all treated as events). For training, the step
//! function inside the generated-time curve is replaced by a sigmoid so that
//! gradients reach the generator.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaError};
use crate::ndnet::Tensor2;
use crate::survmodel::sigmoid;

/// A minibatch of covariates, observed times and event indicators.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor2,
    pub t: Vec<f64>,
    pub l: Vec<u8>,
}

impl Batch {
    pub fn new(x: Tensor2, t: Vec<f64>, l: Vec<u8>) -> Result<Self> {
        if t.is_empty() {
            return Err(ScaError::Domain("empty batch".into()));
        }
        if x.rows() != t.len() || l.len() != t.len() {
            return Err(ScaError::Dimension(format!(
                "batch with {} covariate rows, {} times, {} indicators",
                x.rows(),
                t.len(),
                l.len()
            )));
        }
        if t.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(ScaError::Domain("observed times must be positive".into()));
        }
        if l.iter().any(|v| *v > 1) {
            return Err(ScaError::Domain("event indicators must be 0 or 1".into()));
        }
        Ok(Batch { x, t, l })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Sorted, distinct, positive evaluation times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    /// Distinct observed times (censored and uncensored) in increasing order.
    pub fn from_times(times: &[f64]) -> Result<Self> {
        let mut v: Vec<f64> = times.to_vec();
        if v.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(ScaError::Domain("grid times must be positive and finite".into()));
        }
        v.sort_by(f64::total_cmp);
        v.dedup();
        if v.is_empty() {
            return Err(ScaError::Domain("empty time grid".into()));
        }
        Ok(TimeGrid(v))
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Median gap between consecutive grid points (the first gap is measured
    /// from 0 when there is a single point).
    pub fn median_gap(&self) -> f64 {
        if self.0.len() < 2 {
            return self.0[0];
        }
        let mut gaps: Vec<f64> = self.0.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_by(f64::total_cmp);
        let m = gaps.len();
        if m % 2 == 1 {
            gaps[m / 2]
        } else {
            0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
        }
    }

    /// Sigmoid temperature used while training: one tenth of the median gap.
    pub fn default_temperature(&self) -> f64 {
        0.1 * self.median_gap()
    }
}

/// Step function used inside the point-estimate Kaplan-Meier recursion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Heaviside {
    /// `1[b > 0]`; a time equal to a grid point counts as having occurred by it.
    Exact,
    /// `σ(b / τ)`
    Sigmoid { tau: f64 },
}

impl Heaviside {
    #[inline]
    fn eval(self, b: f64) -> (f64, f64) {
        match self {
            Heaviside::Exact => (if b > 0.0 { 1.0 } else { 0.0 }, 0.0),
            Heaviside::Sigmoid { tau } => {
                let s = sigmoid(b / tau);
                (s, s * (1.0 - s) / tau)
            }
        }
    }
}

const AT_RISK_FLOOR: f64 = 1e-12;

/// Intermediate values of the recursion, kept for the reverse pass.
struct PkmTape {
    survival: Vec<f64>,
    factors: Vec<f64>,
    removed: Vec<f64>,
    at_risk: Vec<f64>,
    /// `(G + 1)` derivative values per sample, grid point 0 being time 0.
    dstep: Vec<f64>,
    active: Vec<bool>,
    grid_len: usize,
}

/// `S(g_j) = S(g_{j-1}) · (1 − d_j / n_j)` with
/// `d_j = Σ_n l_n [H(T_n − g_{j−1}) − H(T_n − g_j)]` and
/// `n_j = Σ_n H(T_n − g_{j−1})`, starting from `S = 1` at `g_0 = 0`.
fn pkm_forward(times: &[f64], events: &[u8], grid: &TimeGrid, h: Heaviside) -> PkmTape {
    let g = grid.points();
    let gl = g.len();
    let mut step = vec![0.0; times.len() * (gl + 1)];
    let mut dstep = vec![0.0; times.len() * (gl + 1)];
    for (n, &t) in times.iter().enumerate() {
        for j in 0..=gl {
            let at = if j == 0 { 0.0 } else { g[j - 1] };
            let (v, d) = h.eval(t - at);
            step[n * (gl + 1) + j] = v;
            dstep[n * (gl + 1) + j] = d;
        }
    }
    let mut survival = Vec::with_capacity(gl);
    let mut factors = Vec::with_capacity(gl);
    let mut removed = Vec::with_capacity(gl);
    let mut at_risk = Vec::with_capacity(gl);
    let mut active = Vec::with_capacity(gl);
    let mut s = 1.0;
    for j in 1..=gl {
        let mut d = 0.0;
        let mut r = 0.0;
        for n in 0..times.len() {
            let before = step[n * (gl + 1) + j - 1];
            let after = step[n * (gl + 1) + j];
            r += before;
            if events[n] == 1 {
                d += before - after;
            }
        }
        let on = r > AT_RISK_FLOOR;
        let f = if on { 1.0 - d / r } else { 1.0 };
        s *= f;
        survival.push(s);
        factors.push(f);
        removed.push(d);
        at_risk.push(r);
        active.push(on);
    }
    PkmTape {
        survival,
        factors,
        removed,
        at_risk,
        dstep,
        active,
        grid_len: gl,
    }
}

/// Reverse pass: gradient w.r.t. each time given `d loss / d S(g_j)`.
fn pkm_backward(tape: &PkmTape, events: &[u8], dsurv: &[f64]) -> Vec<f64> {
    let gl = tape.grid_len;
    let n_samples = events.len();
    // adjoint of S_j accumulates through S_{j+1} = S_j f_{j+1}
    let mut adj = vec![0.0; gl];
    let mut carry = 0.0;
    for j in (0..gl).rev() {
        carry = dsurv[j] + if j + 1 < gl { carry * tape.factors[j + 1] } else { 0.0 };
        adj[j] = carry;
    }
    let mut grad = vec![0.0; n_samples];
    for j in 0..gl {
        if !tape.active[j] {
            continue;
        }
        let s_prev = if j == 0 { 1.0 } else { tape.survival[j - 1] };
        let df = adj[j] * s_prev;
        let r = tape.at_risk[j];
        let dd = -df / r;
        let dr = df * tape.removed[j] / (r * r);
        for n in 0..n_samples {
            let base = n * (gl + 1);
            let before = tape.dstep[base + j];
            let after = tape.dstep[base + j + 1];
            let mut g = dr * before;
            if events[n] == 1 {
                g += dd * (before - after);
            }
            grad[n] += g;
        }
    }
    grad
}

fn check_curve_inputs(times: &[f64], events: &[u8]) -> Result<()> {
    if times.is_empty() {
        return Err(ScaError::Domain("survival curve of an empty sample".into()));
    }
    if times.len() != events.len() {
        return Err(ScaError::Dimension(format!(
            "{} times but {} event indicators",
            times.len(),
            events.len()
        )));
    }
    Ok(())
}

/// Point-estimate Kaplan-Meier curve evaluated at the grid, with the exact step.
///
/// On a grid containing every observed time this coincides with the
/// product-limit estimator.
pub fn pkm_curve(times: &[f64], events: &[u8], grid: &TimeGrid) -> Result<Vec<f64>> {
    check_curve_inputs(times, events)?;
    Ok(pkm_forward(times, events, grid, Heaviside::Exact).survival)
}

/// Same recursion with a chosen step function.
pub fn pkm_curve_with(
    times: &[f64],
    events: &[u8],
    grid: &TimeGrid,
    heaviside: Heaviside,
) -> Result<Vec<f64>> {
    check_curve_inputs(times, events)?;
    Ok(pkm_forward(times, events, grid, heaviside).survival)
}

/// Hinge on censored rows plus L1 on observed rows, each averaged over its
/// own subset. Returns the value and `d loss / d generated`.
pub fn accuracy_loss(times: &[f64], events: &[u8], generated: &[f64]) -> Result<(f64, Vec<f64>)> {
    if times.len() != events.len() || times.len() != generated.len() {
        return Err(ScaError::Dimension(format!(
            "accuracy loss over {} times, {} indicators, {} predictions",
            times.len(),
            events.len(),
            generated.len()
        )));
    }
    let n_obs = events.iter().filter(|&&l| l == 1).count();
    let n_cens = events.len() - n_obs;
    let mut cens = 0.0;
    let mut obs = 0.0;
    let mut grad = vec![0.0; times.len()];
    for i in 0..times.len() {
        let diff = times[i] - generated[i];
        if events[i] == 1 {
            obs += diff.abs();
            grad[i] = if diff > 0.0 {
                -1.0
            } else if diff < 0.0 {
                1.0
            } else {
                0.0
            } / n_obs as f64;
        } else if diff > 0.0 {
            cens += diff;
            grad[i] = -1.0 / n_cens as f64;
        }
    }
    let value = if n_cens > 0 { cens / n_cens as f64 } else { 0.0 }
        + if n_obs > 0 { obs / n_obs as f64 } else { 0.0 };
    Ok((value, grad))
}

/// Mean absolute gap between the data curve and the generated-time curve
/// over `grid`, with `d loss / d generated`.
///
/// The data curve always uses the exact step; `heaviside` applies to the
/// generated-time curve, whose samples are all treated as events.
pub fn calibration_loss(
    times: &[f64],
    events: &[u8],
    generated: &[f64],
    grid: &TimeGrid,
    heaviside: Heaviside,
) -> Result<(f64, Vec<f64>)> {
    check_curve_inputs(times, events)?;
    if generated.is_empty() {
        return Err(ScaError::Domain("no generated times".into()));
    }
    let data_curve = pkm_curve(times, events, grid)?;
    let all_events = vec![1u8; generated.len()];
    let tape = pkm_forward(generated, &all_events, grid, heaviside);
    let g = grid.len() as f64;
    let mut value = 0.0;
    let mut dsurv = Vec::with_capacity(grid.len());
    for (d, m) in data_curve.iter().zip(&tape.survival) {
        let gap = d - m;
        value += gap.abs();
        // d|D − S|/dS = −sign(D − S)
        dsurv.push(if gap > 0.0 {
            -1.0 / g
        } else if gap < 0.0 {
            1.0 / g
        } else {
            0.0
        });
    }
    value /= g;
    let grad = if matches!(heaviside, Heaviside::Exact) {
        vec![0.0; generated.len()]
    } else {
        pkm_backward(&tape, &all_events, &dsurv)
    };
    Ok((value, grad))
}

/// `ℓ_dp + λ₂ ℓ_acc + λ₃ ℓ_cal`.
pub fn total_loss(clustering: f64, accuracy: f64, calibration: f64, lambda2: f64, lambda3: f64) -> f64 {
    clustering + lambda2 * accuracy + lambda3 * calibration
}

/// One row of the per-step loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub clustering: f64,
    pub accuracy: f64,
    pub calibration: f64,
    pub total: f64,
}

pub fn write_loss_trace(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,l_dp,l_acc,l_cal,total")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.step, r.clustering, r.accuracy, r.calibration, r.total
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    fn grid(v: &[f64]) -> TimeGrid {
        TimeGrid::from_times(v).unwrap()
    }

    #[test]
    fn accuracy_terms() {
        let (v, g) = accuracy_loss(&[5.0], &[0], &[7.0]).unwrap();
        assert_eq!((v, g[0]), (0.0, 0.0));
        let (v, g) = accuracy_loss(&[5.0], &[0], &[3.0]).unwrap();
        assert_eq!((v, g[0]), (2.0, -1.0));
        let (v, g) = accuracy_loss(&[5.0], &[1], &[3.0]).unwrap();
        assert_eq!((v, g[0]), (2.0, -1.0));
        // each subset averaged on its own
        let (v, _) = accuracy_loss(&[5.0, 5.0, 4.0], &[1, 0, 0], &[6.0, 3.0, 4.0]).unwrap();
        assert!((v - (1.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn pkm_matches_hand_computed_curves() {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        let c = pkm_curve(&[1.0, 2.0, 3.0], &[1, 1, 1], &grid(&[1.0, 2.0, 3.0])).unwrap();
        assert!(close(&c, &[2.0 / 3.0, 1.0 / 3.0, 0.0]), "{c:?}");
        let c = pkm_curve(&[1.0, 2.0, 3.0], &[1, 0, 1], &grid(&[1.0, 2.0, 3.0])).unwrap();
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((c[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c[2], 0.0);
        let c = pkm_curve(&[1.0, 4.0, 2.5], &[0, 0, 0], &grid(&[1.0, 2.5, 4.0])).unwrap();
        assert_eq!(c, vec![1.0; 3]);
        assert!(pkm_curve(&[], &[], &grid(&[1.0])).is_err());
    }

    #[test]
    fn pkm_with_ties() {
        // two events at 2, one censored at 2, one event at 5
        let c = pkm_curve(&[2.0, 2.0, 2.0, 5.0], &[1, 1, 0, 1], &grid(&[2.0, 5.0])).unwrap();
        assert_eq!(c, vec![0.5, 0.0]);
    }

    #[test]
    fn calibration_loss_values() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let l = [1, 1, 1, 1];
        let g = grid(&t);
        let (v, _) = calibration_loss(&t, &l, &t, &g, Heaviside::Exact).unwrap();
        assert_eq!(v, 0.0);
        // generated far beyond every time: loss = mean CDF of the data curve
        let far = [100.0; 4];
        let (v, _) = calibration_loss(&t, &l, &far, &g, Heaviside::Exact).unwrap();
        let data = pkm_curve(&t, &l, &g).unwrap();
        let expected = data.iter().map(|s| 1.0 - s).sum::<f64>() / 4.0;
        assert!((v - expected).abs() < 1e-15 && v > 0.0);
    }

    #[test]
    fn smoothed_calibration_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(21);
        for _ in 0..20 {
            let m = rng.random_range(3..12);
            let t: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..10.0)).collect();
            let l: Vec<u8> = (0..m).map(|_| rng.random_bool(0.7) as u8).collect();
            let gen: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..10.0)).collect();
            let g = grid(&t);
            let h = Heaviside::Sigmoid { tau: g.default_temperature() };
            let (_, grad) = calibration_loss(&t, &l, &gen, &g, h).unwrap();
            let eps = 1e-6;
            for i in 0..m {
                let mut p = gen.clone();
                p[i] += eps;
                let mut q = gen.clone();
                q[i] -= eps;
                let fd = (calibration_loss(&t, &l, &p, &g, h).unwrap().0
                    - calibration_loss(&t, &l, &q, &g, h).unwrap().0)
                    / (2.0 * eps);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
                assert!(err < 1e-3, "sample {i}: analytic {} fd {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn total_loss_weights() {
        assert!((total_loss(0.5, 1.0, 0.2, 1.0, 1.0) - 1.7).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 1.0, 1.0), 0.0);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 2.0, 0.5), 3.5);
    }

    #[test]
    fn grid_and_batch_validation() {
        let g = grid(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(g.points(), &[1.0, 2.0, 3.0]);
        assert_eq!(g.median_gap(), 1.0);
        assert!(TimeGrid::from_times(&[0.0, 1.0]).is_err());
        let x = Tensor2::zeros(2, 1);
        assert!(Batch::new(x.clone(), vec![1.0, -1.0], vec![1, 0]).is_err());
        assert!(Batch::new(x.clone(), vec![1.0, 1.0], vec![1, 2]).is_err());
        assert!(Batch::new(x, vec![1.0, 2.0], vec![1, 0]).is_ok());
    }

    mod props {
        use super::super::*;
        use crate::metrics::kaplan_meier;
        use proptest::prelude::*;

        fn curve_data() -> impl Strategy<Value = (Vec<f64>, Vec<u8>, Vec<f64>)> {
            (2usize..25).prop_flat_map(|n| {
                (
                    prop::collection::vec(0.1f64..10.0, n),
                    prop::collection::vec(0u8..=1, n),
                    prop::collection::vec(0.1f64..10.0, 1..40),
                )
            })
        }

        proptest! {
            #[test]
            fn calibration_loss_is_a_probability_gap((t, l, g) in curve_data(), smooth in any::<bool>()) {
                let grid = TimeGrid::from_times(&t).unwrap();
                let h = if smooth { Heaviside::Sigmoid { tau: grid.default_temperature() } } else { Heaviside::Exact };
                let (v, grad) = calibration_loss(&t, &l, &g, &grid, h).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(grad.iter().all(|d| d.is_finite()));
            }

            #[test]
            fn pkm_matches_km_on_observed_grid((t, l, _) in curve_data()) {
                let grid = TimeGrid::from_times(&t).unwrap();
                let pkm = pkm_curve(&t, &l, &grid).unwrap();
                let km = kaplan_meier(&t, &l).unwrap();
                for (i, &u) in grid.points().iter().enumerate() {
                    prop_assert!((pkm[i] - km.at(u)).abs() < 1e-12);
                }
            }
        }
    }
}
