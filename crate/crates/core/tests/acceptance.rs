//! Acceptance checks. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attn_rc::config::{Config, ReadoutChoice};
use attn_rc::dynamics::{largest_lyapunov, AlrsExposure, OdeSystem};
use attn_rc::eval::{
    boundary_distance_ratio, fit_readout, harvest_member, nrmse, power_spectrum, run_member, vpt,
};
use attn_rc::readout::{
    attention_forward_linear, attention_gradient, attention_loss, default_lambda_grid,
    quadratic_form, ridge_objective, select_lambda, train_ridge, AttentionGradient, AttentionRef,
    LinearAttention, NonlinearAttention,
};
use attn_rc::reservoir::{check_input_coupling, ReservoirBackend};

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-6;
const RIDGE_RECOVERY_TOL: f64 = 1e-8;
const PERTURBATION: f64 = 1e-3;
const NRMSE_MEAN_TOL: f64 = 1e-10;
const LORENZ: (f64, f64) = (0.91, 0.05);
const ROSSLER: (f64, f64) = (0.071, 0.015);
const SUBSTITUTION_TOL: f64 = 1e-12;
const MIN_WINS: usize = 8;
const SWITCH_RATIO: f64 = 1.5;
const ETA_ZERO_TOL: f64 = 1e-9;
const ETA_COUPLED_MIN: f64 = 1e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn flatten(g: &AttentionGradient) -> Vec<f64> {
    match g {
        AttentionGradient::Linear(ws) => ws.iter().flat_map(|w| w.iter().copied()).collect(),
        AttentionGradient::Nonlinear(nets) => nets
            .iter()
            .flat_map(|n| {
                n.w1.iter()
                    .chain(&n.b1)
                    .chain(n.w2.iter())
                    .chain(&n.b2)
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect(),
    }
}

/// Mutable views of every parameter in the order used by `flatten`.
fn linear_params(m: &mut LinearAttention) -> Vec<&mut f64> {
    m.w_net.iter_mut().flat_map(|w| w.iter_mut()).collect()
}

fn nonlinear_params(m: &mut NonlinearAttention) -> Vec<&mut f64> {
    m.nets
        .iter_mut()
        .flat_map(|n| {
            let mut v: Vec<&mut f64> = n.w1.iter_mut().collect();
            v.extend(n.b1.iter_mut());
            v.extend(n.w2.iter_mut());
            v.extend(n.b2.iter_mut());
            v
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = b
        .iter()
        .map(|y| y * y)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    diff / scale
}

fn central_difference<M: Clone>(
    model: &M,
    count: usize,
    param: impl Fn(&mut M, usize) -> &mut f64,
    loss: impl Fn(&M) -> f64,
) -> Vec<f64> {
    (0..count)
        .map(|k| {
            let mut plus = model.clone();
            *param(&mut plus, k) += FD_STEP;
            let mut minus = model.clone();
            *param(&mut minus, k) -= FD_STEP;
            (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let mut g = rng(100 + i);
        let n = 5 + (i as usize % 6);
        let dims = 1 + (i as usize % 3);
        let r = uniform(20, n, &mut g);
        let y = uniform(20, dims, &mut g);

        let lin = LinearAttention::init(n, dims, i);
        let analytic = flatten(&attention_gradient(AttentionRef::Linear(&lin), &r, &y).unwrap());
        let numeric = central_difference(
            &lin,
            analytic.len(),
            |m, k| linear_params(m).swap_remove(k),
            |m| attention_loss(AttentionRef::Linear(m), &r, &y).unwrap(),
        );
        worst = worst.max(relative_error(&numeric, &analytic));

        let mut non = NonlinearAttention::init(n, dims, i);
        // non-zero biases so their gradients are exercised away from zero
        for net in &mut non.nets {
            net.b1.iter_mut().for_each(|b| *b = g.gen_range(-0.5..0.5));
            net.b2.iter_mut().for_each(|b| *b = g.gen_range(-0.5..0.5));
        }
        let analytic = flatten(&attention_gradient(AttentionRef::Nonlinear(&non), &r, &y).unwrap());
        let numeric = central_difference(
            &non,
            analytic.len(),
            |m, k| nonlinear_params(m).swap_remove(k),
            |m| attention_loss(AttentionRef::Nonlinear(m), &r, &y).unwrap(),
        );
        worst = worst.max(relative_error(&numeric, &analytic));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < FD_REL_TOL && elapsed < Duration::from_secs(10),
        format!(
            "worst relative error {worst:.2e} (< {FD_REL_TOL:e}), {:.2} s (< 10 s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn ridge() -> Outcome {
    let mut g = rng(7);
    let (l, n, m) = (200, 12, 3);
    let r = uniform(l, n, &mut g);
    let planted = uniform(n, m, &mut g);
    let y = &r * &planted;
    let w0 = train_ridge(&r, &y, 0.0).unwrap();
    let recovery = (&w0.w - &planted).amax();

    let noisy = &y + uniform(l, m, &mut g) * 0.1;
    let (w, search) = select_lambda(&r, &noisy, &default_lambda_grid()).unwrap();
    let best = ridge_objective(&r, &noisy, &w.w, search.lambda);
    let mut beaten = 0;
    for _ in 0..100 {
        let dir = uniform(n, m, &mut g);
        let delta = dir.scale(PERTURBATION / dir.norm());
        if ridge_objective(&r, &noisy, &(&w.w + delta), search.lambda) > best {
            beaten += 1;
        }
    }
    outcome(
        recovery < RIDGE_RECOVERY_TOL && beaten == 100,
        format!(
            "lambda=0 max weight error {recovery:.2e} (< {RIDGE_RECOVERY_TOL:e}); grid optimum (lambda {:e}) beats {beaten}/100 perturbations of norm {PERTURBATION:e}",
            search.lambda
        ),
    )
}

fn metrics() -> Outcome {
    let mut g = rng(11);
    let truth = uniform(500, 3, &mut g);
    let mean = DMatrix::from_fn(500, 3, |_, j| truth.column(j).mean());
    let e_mean = nrmse(&mean, &truth).unwrap();
    let e_perfect = nrmse(&truth, &truth).unwrap();

    // squared error 4 > 0.4 * variance (= 1) from sample j on
    let (j, dt, lambda) = (137, 0.02, 0.91);
    let series = DMatrix::from_fn(400, 1, |i, _| (i as f64 * 0.1).sin() * 2f64.sqrt());
    let mut pred = series.clone();
    for i in j..400 {
        pred[(i, 0)] += 2.0;
    }
    let v = vpt(&pred, &series, lambda, dt, 0.4).unwrap();
    let vpt_ok = v.crossing == Some(j) && (v.lyapunov_times - j as f64 * dt * lambda).abs() < 1e-12;

    let (f0, dt_s) = (1.3, 0.01);
    let sine: Vec<f64> = (0..8192)
        .map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 * dt_s).sin())
        .collect();
    let s = power_spectrum(&sine, dt_s).unwrap();
    let peak_err = (s.peak_frequency() - f0).abs();

    outcome(
        (e_mean - 1.0).abs() < NRMSE_MEAN_TOL && e_perfect == 0.0 && vpt_ok && peak_err <= s.bin_width(),
        format!(
            "NRMSE(mean) {e_mean:.12} (1 +- {NRMSE_MEAN_TOL:e}), NRMSE(perfect) {e_perfect}, VPT crossing {:?} (expected {j}), sine peak off by {peak_err:.4} (bin {:.4})",
            v.crossing,
            s.bin_width()
        ),
    )
}

fn lyapunov() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, sys, horizon, (expected, tol)) in [
        ("Lorenz", OdeSystem::lorenz_default(), 2_000.0, LORENZ),
        ("Rossler", OdeSystem::rossler_default(), 20_000.0, ROSSLER),
    ] {
        let start = Instant::now();
        let est = largest_lyapunov(&sys, 0.01, horizon, 1).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let ok = (est.exponent - expected).abs() <= tol && secs < 60.0;
        pass &= ok;
        parts.push(format!(
            "{name} {:.4} ({expected} +- {tol}, {secs:.1} s)",
            est.exponent
        ));
    }
    outcome(pass, parts.join(", "))
}

fn substitution() -> Outcome {
    let mut g = rng(5);
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let n = g.gen_range(2..=12);
        let dims = g.gen_range(1..=3);
        let mut model = LinearAttention::init(n, dims, i);
        for w in &mut model.w_net {
            *w = uniform(n, n, &mut g);
        }
        let r: Vec<f64> = (0..n).map(|_| g.gen_range(-1.0..1.0)).collect();
        let two_stage = attention_forward_linear(&model, &r).unwrap().d;
        let direct = quadratic_form(&model, &r).unwrap();
        for (a, b) in two_stage.iter().zip(&direct) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst < SUBSTITUTION_TOL,
        format!("max |two-stage - quadratic form| {worst:.2e} over 1000 inputs (< {SUBSTITUTION_TOL:e})"),
    )
}

fn surrogate(nodes: usize) -> Config {
    Config::resolve(
        None,
        &[
            "reservoir.backend=leaky-esn".into(),
            format!("reservoir.nodes={nodes}"),
            "dataset.system=uctls".into(),
            "dataset.sigma_force=0.05".into(),
        ],
    )
    .unwrap()
}

fn size_trend() -> Outcome {
    let start = Instant::now();
    let models = [ReadoutChoice::Ridge, ReadoutChoice::LinearAttention];
    let mut pass = true;
    let mut parts = Vec::new();
    for nodes in [10, 20, 30] {
        let cfg = surrogate(nodes);
        let (mut wins, mut vpt_ridge, mut vpt_att) = (0, 0.0, 0.0);
        for seed in 0..10 {
            let m = run_member(&cfg, &models, seed, None).unwrap();
            let e_r = m.metric(ReadoutChoice::Ridge, "nrmse").unwrap();
            let e_a = m.metric(ReadoutChoice::LinearAttention, "nrmse").unwrap();
            wins += (e_a < e_r) as usize;
            vpt_ridge += m.metric(ReadoutChoice::Ridge, "vpt").unwrap() / 10.0;
            vpt_att += m.metric(ReadoutChoice::LinearAttention, "vpt").unwrap() / 10.0;
        }
        pass &= wins >= MIN_WINS && vpt_att >= vpt_ridge;
        parts.push(format!(
            "N={nodes}: NRMSE wins {wins}/10 (>= {MIN_WINS}), mean VPT attention {vpt_att:.3} vs ridge {vpt_ridge:.3}"
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    parts.push(format!("{secs:.0} s (< 900 s)"));
    outcome(pass && secs < 900.0, parts.join("; "))
}

fn switch_response() -> Outcome {
    let cfg = Config::resolve(None, &["dataset.system=alrs".into()]).unwrap();
    let h = harvest_member(&cfg, 0, AlrsExposure::XOnly, &[], None).unwrap();
    let (r_tr, y_tr, r_te, y_te) = h.pairs(1).unwrap();
    let fitted = fit_readout(
        ReadoutChoice::LinearAttention,
        &cfg.readout,
        0,
        &r_tr,
        &y_tr,
        &r_te,
        &y_te,
    )
    .unwrap();
    let rows = h.n_train()..h.total_len() - 1;
    let ratio = boundary_distance_ratio(
        &fitted.model,
        &h.states,
        &h.split,
        rows,
        0,
        cfg.dataset.window,
    )
    .unwrap();
    outcome(
        ratio >= SWITCH_RATIO,
        format!(
            "ALRS test split, N={}: across/within window distance ratio {ratio:.3} (>= {SWITCH_RATIO})",
            cfg.reservoir.nodes
        ),
    )
}

fn loss_convergence() -> Outcome {
    let cfg = surrogate(20);
    let (r_tr, y_tr, r_te, y_te) = {
        let h = harvest_member(&cfg, 0, AlrsExposure::Xyz, &[], None).unwrap();
        h.pairs(1).unwrap()
    };
    let fitted = fit_readout(
        ReadoutChoice::LinearAttention,
        &cfg.readout,
        0,
        &r_tr,
        &y_tr,
        &r_te,
        &y_te,
    )
    .unwrap();
    let curve = &fitted.training.as_ref().unwrap().curve;
    let smooth = curve.smoothed_train(10);
    let rises = smooth.windows(2).filter(|w| w[1] > w[0]).count();
    outcome(
        rises == 0 && cfg.readout.train.learning_rate == 0.01,
        format!(
            "{} smoothed values, {rises} increases; train NRMSE {:.4} -> {:.4}",
            smooth.len(),
            curve.train_nrmse[0],
            curve.train_nrmse[curve.train_nrmse.len() - 1]
        ),
    )
}

fn parameter_count() -> Outcome {
    let mut pass = true;
    for n in [1, 5, 10, 30, 50] {
        let m = NonlinearAttention::init(n, 3, 0);
        let counted: usize = m.nets.iter().map(|net| net.w1.len() + net.w2.len()).sum();
        pass &= m.interlayer_weight_count() == 6 * n * n && counted == 6 * n * n;
    }
    outcome(
        pass,
        "interlayer weights == 6 N^2 for N in {1, 5, 10, 30, 50}".into(),
    )
}

fn laser_coupling() -> Outcome {
    let mut off = ReservoirBackend::lang_kobayashi(20);
    off.laser.eta = 0.0;
    let on = ReservoirBackend::lang_kobayashi(20);
    let dev_off = check_input_coupling(&off, 3, 300, 1).unwrap().max_deviation;
    let dev_on = check_input_coupling(&on, 3, 300, 1).unwrap().max_deviation;
    outcome(
        dev_off < ETA_ZERO_TOL && dev_on > ETA_COUPLED_MIN,
        format!(
            "eta=0 deviation {dev_off:.2e} (< {ETA_ZERO_TOL:e}), eta={} deviation {dev_on:.2e} (> {ETA_COUPLED_MIN:e})",
            on.laser.eta
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [Criterion; 10] = [
        ("gradients match central differences", gradients),
        (
            "ridge recovers planted weights and minimizes its objective",
            ridge,
        ),
        ("metric identities", metrics),
        ("Lyapunov exponents", lyapunov),
        (
            "two-stage attention equals the quadratic form",
            substitution,
        ),
        (
            "attention beats ridge on the surrogate at small N",
            size_trend,
        ),
        (
            "attention weights shift at ALRS system switches",
            switch_response,
        ),
        ("smoothed training loss is non-increasing", loss_convergence),
        (
            "nonlinear attention has 6 N^2 interlayer weights",
            parameter_count,
        ),
        ("laser states ignore the input at eta = 0", laser_coupling),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if let Some(f) = &filter {
            if !name.contains(f.as_str()) && f != &id.to_string() {
                continue;
            }
        }
        let o = check();
        failed += (!o.pass) as usize;
        println!(
            "criterion {id:>2} {}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
