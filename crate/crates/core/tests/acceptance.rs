//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use sca_core::data::{load_csv, preprocess, synth_generate, Schema, Split, SynthConfig};
use sca_core::dpmix::{
    self, clustering_loss, kl_dirichlet, responsibilities_p, responsibilities_q, stick_weights,
    update_proportions, DirichletParams, MixtureState,
};
use sca_core::losses::{accuracy_loss, calibration_loss, pkm_curve, Heaviside, TimeGrid};
use sca_core::metrics::{
    adjusted_rand_index, c_index, calibration_points, calibration_slope, kaplan_meier, logrank_pair, logrank_score, Group, MetricsReport,
};
use sca_core::ndnet::{Mode, Tensor2};
use sca_core::seeded_rng;
use sca_core::survmodel::{Generator, ModelConfig, SurvivalModel};
use sca_core::trainer::{fit, init_model, kmeans, TrainConfig};
use statrs::function::gamma::ln_gamma;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// 1. gradient suite

// balances O(h²) truncation against roundoff on exactly-zero gradients (pre-norm biases)
const FD_STEP: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn central<F: FnMut(f64) -> f64>(mut f: F, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn small_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(4, 2.0);
    cfg.hidden_dim = 5;
    cfg.latent_dim = 3;
    cfg.noise_dim = 2;
    cfg.dropout = 0.2;
    cfg
}

/// Max relative error over encoder parameters for `Σ w ⊙ encoder(x)` in
/// training mode (batch statistics, fixed dropout mask).
fn encoder_check(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let model = SurvivalModel::new(small_model_config(), &mut rng).unwrap();
    let mut mlp = model.encoder.mlp.clone();
    for (_, p) in mlp.params_mut("e") {
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let x = random_tensor(6, 4, &mut rng);
    let w = random_tensor(6, 3, &mut rng);
    let mask_seed = seed + 1000;
    let loss = |m: &sca_core::ndnet::Mlp| -> f64 {
        let mut m = m.clone();
        let (z, _) = m.forward(&x, Mode::Train, &mut seeded_rng(mask_seed)).unwrap();
        z.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let mut fwd = mlp.clone();
    let (_, cache) = fwd.forward(&x, Mode::Train, &mut seeded_rng(mask_seed)).unwrap();
    let (grads, _) = mlp.backward(&cache, &w).unwrap();
    let analytic: Vec<Vec<f64>> = grads.named("e").iter().map(|(_, g)| g.to_vec()).collect();
    let mut worst = 0.0f64;
    for (pi, g) in analytic.iter().enumerate() {
        for (k, &an) in g.iter().enumerate() {
            let fd = central(
                |v| {
                    let mut m = mlp.clone();
                    m.params_mut("e")[pi].1[k] = v;
                    loss(&m)
                },
                mlp.clone().params_mut("e")[pi].1[k],
            );
            worst = worst.max(rel_err(an, fd));
        }
    }
    worst
}

/// Generator parameters and latent input for `Σ w ⊙ t(z, ε)`.
fn generator_check(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let model = SurvivalModel::new(small_model_config(), &mut rng).unwrap();
    let mut gen = model.generator.clone();
    for (_, p) in gen.head.params_mut("h") {
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let z = random_tensor(6, 3, &mut rng);
    let noise = gen.draw_noise(6, &mut rng);
    let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask_seed = seed + 2000;
    let loss = |g: &Generator, z: &Tensor2| -> f64 {
        let mut g = g.clone();
        let (t, _) = g
            .forward_with_noise(z, &noise, Mode::Train, &mut seeded_rng(mask_seed))
            .unwrap();
        t.iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let mut fwd = gen.clone();
    let (_, cache) = fwd
        .forward_with_noise(&z, &noise, Mode::Train, &mut seeded_rng(mask_seed))
        .unwrap();
    let (grads, dz) = gen.backward(&cache, &w).unwrap();
    let mut worst = 0.0f64;
    for k in 0..z.data().len() {
        let fd = central(
            |v| {
                let mut zz = z.clone();
                zz.data_mut()[k] = v;
                loss(&gen, &zz)
            },
            z.data()[k],
        );
        worst = worst.max(rel_err(dz.data()[k], fd));
    }
    for (prefix, named) in [("trunk", grads.trunk.named("p")), ("head", grads.head.named("p"))] {
        let analytic: Vec<Vec<f64>> = named.iter().map(|(_, g)| g.to_vec()).collect();
        for (pi, g) in analytic.iter().enumerate() {
            for (k, &an) in g.iter().enumerate() {
                let mut probe = gen.clone();
                let mlp = if prefix == "trunk" { &mut probe.trunk } else { &mut probe.head };
                let x0 = mlp.params_mut("p")[pi].1[k];
                let fd = central(
                    |v| {
                        let mut g = gen.clone();
                        let mlp = if prefix == "trunk" { &mut g.trunk } else { &mut g.head };
                        mlp.params_mut("p")[pi].1[k] = v;
                        loss(&g, &z)
                    },
                    x0,
                );
                worst = worst.max(rel_err(an, fd));
            }
        }
    }
    worst
}

fn survival_batch(n: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<u8>, Vec<f64>) {
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..8.0)).collect();
    let mut l: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.6))).collect();
    l[0] = 1;
    l[1] = 0;
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..8.0)).collect();
    (t, l, g)
}

fn accuracy_check(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let (t, l, g) = survival_batch(12, &mut rng);
    let (_, grad) = accuracy_loss(&t, &l, &g).unwrap();
    let mut worst = 0.0f64;
    for k in 0..g.len() {
        let fd = central(
            |v| {
                let mut gg = g.clone();
                gg[k] = v;
                accuracy_loss(&t, &l, &gg).unwrap().0
            },
            g[k],
        );
        worst = worst.max(rel_err(grad[k], fd));
    }
    worst
}

fn calibration_check(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let (t, l, g) = survival_batch(10, &mut rng);
    let grid = TimeGrid::from_times(&t).unwrap();
    let h = Heaviside::Sigmoid { tau: grid.default_temperature() };
    let (_, grad) = calibration_loss(&t, &l, &g, &grid, h).unwrap();
    let mut worst = 0.0f64;
    for k in 0..g.len() {
        let fd = central(
            |v| {
                let mut gg = g.clone();
                gg[k] = v;
                calibration_loss(&t, &l, &gg, &grid, h).unwrap().0
            },
            g[k],
        );
        worst = worst.max(rel_err(grad[k], fd));
    }
    worst
}

fn clustering_check(seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let (k, d, m) = (4, 3, 7);
    let mut state =
        MixtureState::new(random_tensor(k, d, &mut rng), rng.random_range(1.0..5.0), 1.0, 0.9).unwrap();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    state.proportions = raw.iter().map(|v| v / total).collect();
    let z = random_tensor(m, d, &mut rng);
    let res = clustering_loss(&state, &z).unwrap();
    let mut worst = 0.0f64;
    for i in 0..z.data().len() {
        let fd = central(
            |v| {
                let mut zz = z.clone();
                zz.data_mut()[i] = v;
                clustering_loss(&state, &zz).unwrap().value
            },
            z.data()[i],
        );
        worst = worst.max(rel_err(res.grad_z.data()[i], fd));
    }
    for i in 0..state.centroids.data().len() {
        let fd = central(
            |v| {
                let mut s = state.clone();
                s.centroids.data_mut()[i] = v;
                clustering_loss(&s, &z).unwrap().value
            },
            state.centroids.data()[i],
        );
        worst = worst.max(rel_err(res.grad_centroids.data()[i], fd));
    }
    worst
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let checks: [(&str, fn(u64) -> f64); 5] = [
        ("encoder", encoder_check),
        ("generator", generator_check),
        ("accuracy", accuracy_check),
        ("calibration", calibration_check),
        ("clustering", clustering_check),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, check) in checks {
        let worst = (0..20u64).map(check).fold(0.0f64, f64::max);
        pass &= worst < 1e-4;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    outcome(pass, format!("max rel err over 20 seeds: {}; {secs:.1}s", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 2. Dirichlet KL

fn ln_dirichlet_norm(a: &[f64]) -> f64 {
    ln_gamma(a.iter().sum()) - a.iter().map(|&v| ln_gamma(v)).sum::<f64>()
}

/// Monte Carlo estimate of `E_{θ~Dir(a)}[ln Dir(θ; a) − ln Dir(θ; b)]` and its standard error.
fn mc_kl(a: &[f64], b: &[f64], samples: usize, rng: &mut impl Rng) -> (f64, f64) {
    let gammas: Vec<Gamma<f64>> = a.iter().map(|&v| Gamma::new(v, 1.0).unwrap()).collect();
    let offset = ln_dirichlet_norm(a) - ln_dirichlet_norm(b);
    let mut draws = vec![0.0; a.len()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut total = 0.0;
        for (d, g) in draws.iter_mut().zip(&gammas) {
            *d = g.sample(rng).max(f64::MIN_POSITIVE);
            total += *d;
        }
        let ln_total = total.ln();
        let v = offset
            + draws
                .iter()
                .zip(a.iter().zip(b))
                .map(|(&x, (&ai, &bi))| (ai - bi) * (x.ln() - ln_total))
                .sum::<f64>();
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn criterion_dirichlet_kl() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(202);
    let mut worst_z = 0.0f64;
    let mut self_zero = true;
    for _ in 0..20 {
        let k = rng.random_range(2..=5);
        let a: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..20.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..20.0)).collect();
        let closed = kl_dirichlet(&DirichletParams(a.clone()), &DirichletParams(b.clone())).unwrap();
        let (mean, se) = mc_kl(&a, &b, 1_000_000, &mut rng);
        worst_z = worst_z.max((closed - mean).abs() / se);
        self_zero &= kl_dirichlet(&DirichletParams(a.clone()), &DirichletParams(a)).unwrap() == 0.0;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_z <= 3.0 && self_zero && secs < 120.0,
        format!("worst |closed − MC| = {worst_z:.2} SE over 20 pairs; kl(a,a)==0: {self_zero}; {secs:.1}s"),
    )
}

// ---------------------------------------------------------------------------
// 3. Kaplan-Meier / PKM versus risk-set enumeration

/// Exact non-negative fraction for small instances.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Frac {
    num: u128,
    den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Frac {
    fn one() -> Self {
        Frac { num: 1, den: 1 }
    }

    fn times(self, num: u128, den: u128) -> Self {
        let (n, d) = (self.num * num, self.den * den);
        let g = gcd(n, d).max(1);
        Frac { num: n / g, den: d / g }
    }

    fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Product-limit survival at each distinct observed time, by explicit risk sets.
fn brute_survival(times: &[f64], events: &[u8]) -> Vec<(f64, Frac)> {
    let mut distinct: Vec<f64> = times.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut s = Frac::one();
    distinct
        .into_iter()
        .map(|u| {
            let at_risk = times.iter().filter(|&&t| t >= u).count() as u128;
            let deaths = times.iter().zip(events).filter(|&(&t, &l)| t == u && l == 1).count() as u128;
            s = s.times(at_risk - deaths, at_risk);
            (u, s)
        })
        .collect()
}

fn random_instance(rng: &mut impl Rng, censor: bool) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(1..=20);
    let t = (0..n).map(|_| rng.random_range(1..=8) as f64 * 0.5).collect();
    let l = (0..n).map(|_| u8::from(!censor || rng.random_bool(0.6))).collect();
    (t, l)
}

/// Curves must agree with the rational oracle up to accumulated f64 rounding.
const CURVE_TOL: f64 = 1e-14;

fn criterion_curves() -> Outcome {
    let mut rng = seeded_rng(303);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for case in 0..200 {
        let censored = case < 100;
        let (t, l) = random_instance(&mut rng, censored);
        let oracle = brute_survival(&t, &l);
        let km = kaplan_meier(&t, &l).unwrap();
        let grid = TimeGrid::from_times(&t).unwrap();
        let pkm = pkm_curve(&t, &l, &grid).unwrap();
        let mut ok = km.times.len() == oracle.len() && grid.points().len() == oracle.len();
        for (i, &(u, s)) in oracle.iter().enumerate() {
            if !ok {
                break;
            }
            ok &= km.times[i] == u && grid.points()[i] == u;
            let dev = (km.survival[i] - s.value()).abs().max((pkm[i] - s.value()).abs());
            worst = worst.max(dev);
            ok &= dev <= CURVE_TOL;
            if !censored {
                // the product telescopes to the survivor fraction
                let alive = t.iter().filter(|&&x| x > u).count() as u128;
                let direct = Frac::one().times(alive, t.len() as u128);
                ok &= s == direct;
                let dev = (km.survival[i] - direct.value()).abs().max((pkm[i] - direct.value()).abs());
                worst = worst.max(dev);
                ok &= dev <= CURVE_TOL;
            }
        }
        failures += usize::from(!ok);
    }
    outcome(
        failures == 0,
        format!(
            "100 censored + 100 uncensored instances, {failures} mismatches; max deviation from exact rational {worst:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. logrank

fn brute_logrank(a: (&[f64], &[u8]), b: (&[f64], &[u8])) -> f64 {
    let all: Vec<(f64, u8, bool)> = a
        .0
        .iter()
        .zip(a.1)
        .map(|(&t, &l)| (t, l, true))
        .chain(b.0.iter().zip(b.1).map(|(&t, &l)| (t, l, false)))
        .collect();
    let mut event_times: Vec<f64> = all.iter().filter(|r| r.1 == 1).map(|r| r.0).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let (mut o_minus_e, mut var) = (0.0, 0.0);
    for u in event_times {
        let risk: Vec<&(f64, u8, bool)> = all.iter().filter(|r| r.0 >= u).collect();
        let n = risk.len() as f64;
        let n1 = risk.iter().filter(|r| r.2).count() as f64;
        let d = risk.iter().filter(|r| r.0 == u && r.1 == 1).count() as f64;
        let d1 = risk.iter().filter(|r| r.2 && r.0 == u && r.1 == 1).count() as f64;
        o_minus_e += d1 - d * n1 / n;
        if n > 1.0 {
            var += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1.0);
        }
    }
    if var > 0.0 {
        o_minus_e * o_minus_e / var
    } else {
        0.0
    }
}

fn criterion_logrank() -> Outcome {
    let mut rng = seeded_rng(404);
    let mut worst_identical = 0.0f64;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (ta, la) = random_instance(&mut rng, true);
        let (tb, lb) = random_instance(&mut rng, true);
        let same = logrank_pair(Group::new(&ta, &la), Group::new(&ta, &la)).unwrap();
        worst_identical = worst_identical.max(same.abs());
        let got = logrank_pair(Group::new(&ta, &la), Group::new(&tb, &lb)).unwrap();
        let want = brute_logrank((&ta, &la), (&tb, &lb));
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    outcome(
        worst_identical <= 1e-9 && worst <= 1e-9,
        format!("identical groups max |stat| {worst_identical:.1e}; max deviation from brute force {worst:.1e} on 100 instances"),
    )
}

// ---------------------------------------------------------------------------
// 5–7. synthetic benchmark

struct Benchmark {
    fit_seconds: f64,
    effective_k: usize,
    ari: f64,
    sca_logrank: f64,
    kmeans_logrank: f64,
    report: MetricsReport,
    calibration_loss: f64,
    untrained_c_index: f64,
}

/// Training schedule for the benchmark: default hyperparameters with a longer
/// run and early stopping disabled, within the CPU budget.
fn benchmark_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 1500,
        pretrain_epochs: 100,
        patience: 1500,
        seed: 0,
        ..TrainConfig::default()
    }
}

const EVAL_SAMPLES: usize = 200;

fn run_benchmark() -> Benchmark {
    let synth = synth_generate(&SynthConfig::new(700, 3), 0).unwrap();
    let config = benchmark_config();
    let data = preprocess(&synth.table, config.seed).unwrap();
    assert_eq!(data.dropped_rows, 0);
    assert_eq!(config.k, 25);
    assert_eq!(config.gamma0, 3.0);

    let start = Instant::now();
    let out = fit(&config, &data).unwrap();
    let fit_seconds = start.elapsed().as_secs_f64();

    let z_all = out.model.encode(&data.x).unwrap();
    let assign_all = dpmix::assign_batch(&out.mixture, &z_all);
    let km = kmeans(&data.x, 3, config.seed).unwrap();

    let test = data.subset(Split::Test);
    let z = out.model.encode(&test.x).unwrap();
    let samples = out.model.generator.sample_times(&z, EVAL_SAMPLES, &mut seeded_rng(7)).unwrap();
    let assign = dpmix::assign_batch(&out.mixture, &z);
    let report =
        MetricsReport::compute(&samples.samples, &samples.medians(), &assign, &test.t, &test.l).unwrap();
    let grid = TimeGrid::from_times(&test.t).unwrap();
    let (cal, _) =
        calibration_loss(&test.t, &test.l, samples.samples.data(), &grid, Heaviside::Exact).unwrap();

    let untrained = init_model(&config, &data, &mut seeded_rng(config.seed)).unwrap();
    let raw = untrained.sample_times(&test.x, EVAL_SAMPLES, &mut seeded_rng(8)).unwrap();
    let untrained_c_index = c_index(&raw.medians(), &test.t, &test.l).unwrap().unwrap();

    Benchmark {
        fit_seconds,
        effective_k: dpmix::effective_k(&out.mixture, &z_all),
        ari: adjusted_rand_index(&assign_all, &synth.labels).unwrap(),
        sca_logrank: logrank_score(&assign_all, &data.t, &data.l).unwrap().unwrap_or(0.0),
        kmeans_logrank: logrank_score(&km.labels, &data.t, &data.l).unwrap().unwrap_or(0.0),
        report,
        calibration_loss: cal,
        untrained_c_index,
    }
}

fn criterion_clustering(b: &Benchmark) -> Outcome {
    let ratio = b.sca_logrank / b.kmeans_logrank;
    let pass = (3..=6).contains(&b.effective_k) && b.ari >= 0.8 && ratio >= 5.0 && b.fit_seconds < 900.0;
    outcome(
        pass,
        format!(
            "effective K {} (want 3..=6), ARI {:.3} (want >= 0.8), logrank {:.1} vs k-means {:.1} = {:.2}x (want >= 5), fit {:.0}s",
            b.effective_k, b.ari, b.sca_logrank, b.kmeans_logrank, ratio, b.fit_seconds
        ),
    )
}

fn criterion_calibration(b: &Benchmark) -> Outcome {
    let slope = b.report.calibration_slope.unwrap_or(f64::NAN);
    outcome(
        (0.85..=1.15).contains(&slope) && b.calibration_loss < 0.05,
        format!(
            "calibration slope {slope:.3} (want 0.85..1.15), calibration loss {:.4} (want < 0.05)",
            b.calibration_loss
        ),
    )
}

fn criterion_ranking(b: &Benchmark) -> Outcome {
    let c = b.report.c_index.unwrap_or(f64::NAN);
    let rae = b.report.rae_uncensored.unwrap_or(f64::NAN);
    outcome(
        c >= 0.70 && rae <= 0.60 && (b.untrained_c_index - 0.5).abs() <= 0.1,
        format!(
            "C-index {c:.3} (want >= 0.70), uncensored RAE {rae:.3} (want <= 0.60), untrained C-index {:.3} (want 0.5 ± 0.1)",
            b.untrained_c_index
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. simplex and stick invariants

#[derive(Clone, Debug)]
enum Op {
    Responsibilities { seed: u64, rows: usize },
    Update { seed: u64, rows: usize },
    Sticks { k: usize, gamma0: f64 },
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        (any::<u64>(), 1usize..12).prop_map(|(seed, rows)| Op::Responsibilities { seed, rows }),
        (any::<u64>(), 1usize..12).prop_map(|(seed, rows)| Op::Update { seed, rows }),
        (1usize..60, 0.01f64..50.0).prop_map(|(k, gamma0)| Op::Sticks { k, gamma0 }),
    ]
}

fn on_simplex(v: &[f64]) -> bool {
    v.iter().all(|&p| (-1e-9..=1.0 + 1e-9).contains(&p)) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

fn apply(state: &mut MixtureState, op: &Op) -> std::result::Result<(), TestCaseError> {
    match *op {
        Op::Responsibilities { seed, rows } | Op::Update { seed, rows } => {
            let mut rng = seeded_rng(seed);
            let spread = rng.random_range(0.01..30.0);
            let data = (0..rows * state.dim()).map(|_| spread * rng.random_range(-1.0..1.0)).collect();
            let z = Tensor2::from_vec(rows, state.dim(), data).unwrap();
            let (q, xi) = responsibilities_q(state, &z).unwrap();
            let (p, _) = responsibilities_p(state, &z).unwrap();
            for n in 0..rows {
                prop_assert!(on_simplex(q.row(n)), "q row {:?}", q.row(n));
                prop_assert!(on_simplex(p.row(n)), "p row {:?}", p.row(n));
            }
            if matches!(op, Op::Update { .. }) {
                update_proportions(state, &xi).unwrap();
            }
            prop_assert!(on_simplex(&state.proportions), "pi {:?}", state.proportions);
        }
        Op::Sticks { k, gamma0 } => {
            let w = stick_weights(k, gamma0);
            prop_assert_eq!(w.len(), k);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(w.iter().sum::<f64>(), 1.0);
        }
    }
    Ok(())
}

fn criterion_simplex() -> Outcome {
    let ops_per_case = 10;
    let cases = 1000;
    let strategy = (1usize..10, 1usize..6, any::<u64>(), prop::collection::vec(op_strategy(), ops_per_case));
    let mut runner = TestRunner::new(PropConfig { cases, failure_persistence: None, ..PropConfig::default() });
    let fuzz = runner.run(&strategy, |(k, d, seed, ops)| {
        let mut rng = seeded_rng(seed);
        let centroids = random_tensor(k, d, &mut rng);
        let mut state = MixtureState::new(centroids, rng.random_range(0.1..10.0), 1.0, 0.9).unwrap();
        for op in &ops {
            apply(&mut state, op)?;
        }
        Ok(())
    });
    let mut halves = true;
    for k in 1..=12 {
        let w = stick_weights(k, 1.0);
        let mut want: Vec<f64> = (1..k).map(|i| 0.5f64.powi(i as i32)).collect();
        want.push(0.5f64.powi(k as i32 - 1));
        halves &= w == want;
    }
    let detail = match &fuzz {
        Ok(()) => format!("{} random operations on the simplex; gamma0=1 halving weights exact: {halves}", cases as usize * ops_per_case),
        Err(e) => format!("fuzz failure: {e}; gamma0=1 halving weights exact: {halves}"),
    };
    outcome(fuzz.is_ok() && halves, detail)
}

// ---------------------------------------------------------------------------
// 9. public flchain data

/// Runs the pipeline on a local flchain export when `SCA_FLCHAIN_CSV` and
/// `SCA_FLCHAIN_SCHEMA` point at it; reports SKIP otherwise.
fn criterion_flchain() -> Outcome {
    let (Ok(csv), Ok(schema)) = (std::env::var("SCA_FLCHAIN_CSV"), std::env::var("SCA_FLCHAIN_SCHEMA")) else {
        return outcome(true, "SKIP: no local flchain export (set SCA_FLCHAIN_CSV and SCA_FLCHAIN_SCHEMA)");
    };
    let schema = Schema::load(Path::new(&schema)).unwrap();
    let table = load_csv(Path::new(&csv), &schema).unwrap();
    let mut slopes = Vec::new();
    for seed in 0..3u64 {
        let config = TrainConfig { seed, ..TrainConfig::default() };
        let data = preprocess(&table, seed).unwrap();
        let out = fit(&config, &data).unwrap();
        let test = data.subset(Split::Test);
        let z = out.model.encode(&test.x).unwrap();
        let samples = out.model.generator.sample_times(&z, EVAL_SAMPLES, &mut seeded_rng(seed)).unwrap();
        let points = calibration_points(&samples.samples, &test.t, &test.l).unwrap();
        let model: Vec<f64> = points.iter().map(|p| p.model).collect();
        let empirical: Vec<f64> = points.iter().map(|p| p.empirical).collect();
        slopes.push(calibration_slope(&model, &empirical).unwrap_or(f64::NAN));
    }
    let pass = slopes.iter().all(|s| (s - 0.99).abs() <= 0.15);
    outcome(pass, format!("{} rows; test calibration slopes over 3 seeds {slopes:.3?} (want 0.99 ± 0.15)", table.rows()))
}

fn run_criterion(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    println!("{} criterion {id} ({name}): {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let mut all = true;
    all &= run_criterion("1", "gradient suite", criterion_gradients);
    all &= run_criterion("2", "dirichlet kl", criterion_dirichlet_kl);
    all &= run_criterion("3", "kaplan-meier/pkm oracle", criterion_curves);
    all &= run_criterion("4", "logrank", criterion_logrank);
    let start = Instant::now();
    let bench = panic::catch_unwind(run_benchmark);
    println!("synthetic benchmark finished in {:.0}s", start.elapsed().as_secs_f64());
    match &bench {
        Ok(b) => {
            all &= run_criterion("5", "synthetic clustering", || criterion_clustering(b));
            all &= run_criterion("6", "synthetic calibration", || criterion_calibration(b));
            all &= run_criterion("7", "synthetic ranking/accuracy", || criterion_ranking(b));
        }
        Err(_) => {
            for id in ["5", "6", "7"] {
                println!("FAIL criterion {id}: synthetic benchmark panicked");
            }
            all = false;
        }
    }
    all &= run_criterion("8", "simplex/stick invariants", criterion_simplex);
    all &= run_criterion("9", "flchain (soft)", criterion_flchain);
    if !all {
        println!("acceptance: some criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
