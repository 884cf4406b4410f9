//! Acceptance criteria 1–11, run in order with one PASS/FAIL line each.
//! The process exits nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use fastswa::autodiff::{finite_diff_gradient, max_relative_error, Tensor};
use fastswa::averaging::{
    collect, decode_checkpoint, encode_checkpoint, should_collect, AveragerState, CheckpointHeader,
    CollectionPolicy, Role,
};
use fastswa::config::parse_config;
use fastswa::consistency::{
    student_loss, train, AveragerSpec, ConsistencyConfig, Divergence, LossBatch, PerturbationSpec, Stride,
    TrainConfig,
};
use fastswa::data::{make_dataset, DatasetSpec};
use fastswa::experiment::run_experiment_in;
use fastswa::geometry::{
    crossover_bracket, estimator_variance_check, exact_jacobian_frobenius, hessian_trace_decomposition,
    jacobian_trace_estimate, ray_sharpness_expansion_check, IterateSimSpec, JacobianWrt, MatrixField,
    TraceOptions,
};
use fastswa::nets::{forward, forward_outputs, init_mlp, Activation, MlpSpec, OutputHead, ParamVector};
use fastswa::rng::{standard_normal_vec, stream_rng, Stream};
use fastswa::schedule::{lambda_at, lr_at, RampSpec, ScheduleSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> impl Rng {
    stream_rng(seed, Stream::Test, 0)
}

// 1 ───────────────────────────────────────────────────────────────────────

fn random_tiny_mlp(seed: u64) -> (MlpSpec, ParamVector) {
    let mut r = rng(seed);
    let d = r.random_range(2..5);
    let k = r.random_range(2..5);
    let mut widths = vec![d];
    for _ in 0..r.random_range(1..3) {
        widths.push(r.random_range(3..7));
    }
    widths.push(k);
    let act = if seed.is_multiple_of(2) { Activation::Relu } else { Activation::Softplus };
    let spec = MlpSpec::new(widths, 0.0).unwrap().with_activation(act);
    // every parameter random, biases included: zero biases put relu units
    // exactly on their kink whenever the layer below is all zero
    let w = ParamVector::new(standard_normal_vec(&mut r, spec.param_count()).into_iter().map(|v| 0.7 * v).collect());
    (spec, w)
}

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (spec, w) = random_tiny_mlp(seed);
        let mut r = rng(1000 + seed);
        let d = spec.input_dim();
        let (nl, nu) = (3, 4);
        let xl = Tensor::matrix(nl, d, (0..nl * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let xu = Tensor::matrix(nu, d, (0..nu * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let yl: Vec<usize> = (0..nl).map(|_| r.random_range(0..spec.num_classes())).collect();
        let noise = PerturbationSpec::noise(0.1, 0.0);
        let batch = LossBatch {
            labeled_x: &xl,
            labeled_y: &yl,
            unlabeled_x: Some(&xu),
            perturb: Some(&noise),
            student_seed: seed,
            teacher_seed: seed + 1,
        };
        // targets from an unrelated network, fixed during differentiation
        let other = init_mlp(&spec, 5000 + seed);
        let union = Tensor::matrix(nl + nu, d, [xl.values(), xu.values()].concat()).unwrap();
        let targets = forward(&other, &spec, &union, None, 0).unwrap();
        for div in [Divergence::Mse, Divergence::Kl] {
            let e = student_loss(&w, &spec, &batch, Some(&targets), div, 1.0).unwrap();
            let (spec, batch, targets) = (&spec, &batch, &targets);
            let f = |which: usize| {
                move |v: &[f64]| {
                    let e = student_loss(&ParamVector::new(v.to_vec()), spec, batch, Some(targets), div, 1.0)?;
                    Ok(if which == 0 { e.parts.ce } else { e.parts.cons })
                }
            };
            let fd_ce = finite_diff_gradient(f(0), w.as_slice(), 1e-5).unwrap();
            let fd_cons = finite_diff_gradient(f(1), w.as_slice(), 1e-5).unwrap();
            worst = worst
                .max(max_relative_error(e.grad_ce.as_slice(), &fd_ce, 1e-4))
                .max(max_relative_error(e.grad_cons.as_slice(), &fd_cons, 1e-4));
        }
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.2e} over 100 nets (< 1e-5)"))
}

// 2 ───────────────────────────────────────────────────────────────────────

fn estimator_unbiasedness() -> Outcome {
    let spec = MlpSpec::new(vec![3, 6, 3], 0.0).unwrap().with_activation(Activation::Softplus);
    let w = init_mlp(&spec, 11);
    let mut r = rng(12);
    let x = Tensor::matrix(10, 3, (0..30).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap();
    let exact = exact_jacobian_frobenius(&w, &spec, &x, JacobianWrt::Input, OutputHead::Probabilities).unwrap();
    let reps: Vec<f64> = (0..200)
        .map(|s| {
            let opts = TraceOptions {
                seed: s,
                ..TraceOptions::default()
            };
            jacobian_trace_estimate(&w, &spec, &x, &opts).unwrap().q_hat
        })
        .collect();
    let n = reps.len() as f64;
    let mean = reps.iter().sum::<f64>() / n;
    let se = (reps.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let z = (mean - exact).abs() / se;

    let lin = MlpSpec::new(vec![4, 3], 0.0).unwrap();
    let wl = init_mlp(&lin, 13);
    let fro: f64 = wl.as_slice()[..12].iter().map(|v| v * v).sum();
    let x1 = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap();
    let opts = TraceOptions {
        probes: 100_000,
        head: OutputHead::Logits,
        seed: 14,
        ..TraceOptions::default()
    };
    let ql = jacobian_trace_estimate(&wl, &lin, &x1, &opts).unwrap().q_hat;
    let rel = (ql - fro).abs() / fro;
    outcome(
        z < 3.0 && rel < 0.01,
        format!("|mean Q̂ − exact| = {z:.2} SE (< 3); linear model rel. error {rel:.2e} (< 1e-2)"),
    )
}

// 3 ───────────────────────────────────────────────────────────────────────

fn variance_formula() -> Outcome {
    let d = 6;
    let mut r = rng(21);
    let mats: Vec<Vec<f64>> = (0..8)
        .map(|_| {
            let b: Vec<f64> = (0..d * d).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    a[i * d + j] = 0.5 * (b[i * d + j] + b[j * d + i]);
                }
            }
            a
        })
        .collect();
    let field = MatrixField::new(d, mats).unwrap();
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (n, m) in [(1, 1), (4, 3), (2, 10)] {
        let rep = estimator_variance_check(&field, n, m, 10_000, 22 + n as u64).unwrap();
        worst = worst.max((rep.ratio - 1.0).abs());
        lines.push(format!("n={n},m={m}: {:.3}", rep.ratio));
    }
    outcome(worst < 0.10, format!("empirical/closed-form variance {} (within 10%)", lines.join("; ")))
}

// 4 ───────────────────────────────────────────────────────────────────────

fn hessian_decomposition() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    for seed in 0..10u64 {
        let mut r = rng(40 + seed);
        let spec = MlpSpec::new(vec![3, 8, 8, 3], 0.0).unwrap().with_activation(Activation::Softplus);
        assert!(spec.param_count() <= 200);
        let w = init_mlp(&spec, 40 + seed);
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; 3];
        y[r.random_range(0..3)] = 1.0;
        let head = if seed % 2 == 0 { OutputHead::Probabilities } else { OutputHead::Logits };
        let dec = hessian_trace_decomposition(&w, &spec, &x, &y, head).unwrap();
        worst_gap = worst_gap.max((dec.tr_h - dec.gn_term - dec.residual_oracle).abs() / dec.tr_h.abs());
    }
    // interpolating minimum: targets equal to the network's own outputs
    let mut worst_res: f64 = 0.0;
    for seed in 0..5u64 {
        let spec = MlpSpec::new(vec![2, 6, 3], 0.0).unwrap().with_activation(Activation::Softplus);
        let w = init_mlp(&spec, 60 + seed);
        let x = [0.4 - 0.1 * seed as f64, -0.3];
        let t = Tensor::matrix(1, 2, x.to_vec()).unwrap();
        let y = forward_outputs(&w, &spec, &t, OutputHead::Probabilities).unwrap().into_values();
        let dec = hessian_trace_decomposition(&w, &spec, &x, &y, OutputHead::Probabilities).unwrap();
        worst_res = worst_res.max(dec.residual.abs());
    }
    outcome(
        worst_gap < 1e-3 && worst_res < 1e-4,
        format!("closure gap {worst_gap:.2e} (< 1e-3); residual at interpolation {worst_res:.2e} (< 1e-4)"),
    )
}

// 5 ───────────────────────────────────────────────────────────────────────

fn random_ray_expansion() -> Outcome {
    // L(w) = Σ aᵢwᵢ²/2 + b·Σ wᵢ⁴/12, Hessian diagonal aᵢ + b·wᵢ²
    let p = 40;
    let mut r = rng(50);
    let a: Vec<f64> = (0..p).map(|_| r.random_range(0.5..2.0)).collect();
    let w: Vec<f64> = (0..p).map(|_| r.random_range(-1.0..1.0)).collect();
    let b = 0.3;
    let risk = |v: &[f64]| -> fastswa::Result<f64> {
        Ok(v.iter().zip(&a).map(|(x, ai)| ai * x * x / 2.0 + b * x.powi(4) / 12.0).sum())
    };
    let tr_h: f64 = w.iter().zip(&a).map(|(x, ai)| ai + b * x * x).sum();
    let s = 0.05;
    let c1 = ray_sharpness_expansion_check(risk, &w, tr_h, s, 10_000, 51).unwrap();
    let c2 = ray_sharpness_expansion_check(risk, &w, tr_h, 2.0 * s, 10_000, 51).unwrap();
    let ratio = c1.lhs / c1.rhs;
    let scaling = c2.lhs / c1.lhs;
    outcome(
        (0.95..=1.05).contains(&ratio) && (scaling - 4.0).abs() < 0.04,
        format!("lhs/rhs {ratio:.4} (in [0.95, 1.05]); doubling s scales rise by {scaling:.4} (≈ 4)"),
    )
}

// 6 ───────────────────────────────────────────────────────────────────────

fn gaussian_iterates() -> Outcome {
    let spec = IterateSimSpec {
        n: 10,
        m: 10,
        eta1: 0.05,
        eta2: 0.2,
        sigma_diag: vec![1.0, 0.5, 2.0, 1.5],
        w0: vec![0.3, -1.0, 2.0, 0.0],
        trials: 10_000,
        seed: 61,
    };
    let c = crossover_bracket(&spec, 10, 30, 3.0).unwrap();
    let closed = c.below.matches_closed_forms(3.0) && c.above.matches_closed_forms(3.0);
    outcome(
        closed && c.bracketed && (c.threshold - 20.0).abs() < 1e-12,
        format!(
            "m*={}; closed forms within 3 SE: {closed}; fast-SWA − SWA at m=10: {:+.2e} ± {:.1e}, at m=30: {:+.2e} ± {:.1e}",
            c.threshold, c.below.diff_mean, c.below.diff_std_error, c.above.diff_mean, c.above.diff_std_error
        ),
    )
}

// 7 ───────────────────────────────────────────────────────────────────────

fn averaging_arithmetic() -> Outcome {
    let sched = ScheduleSpec::cyclic(0.1, 14.0, 12.0, 3.0).unwrap();
    let p = 25;
    let mut r = rng(70);
    let ws: Vec<ParamVector> = (0..1000)
        .map(|_| ParamVector::new((0..p).map(|_| r.random_range(-5.0..5.0)).collect()))
        .collect();
    let mut st = AveragerState::new(p, CollectionPolicy::swa(&sched).unwrap());
    for w in &ws {
        st = collect(&st, w).unwrap();
    }
    let mut incr_err: f64 = 0.0;
    for j in 0..p {
        let two_pass = ws.iter().map(|w| w.as_slice()[j]).sum::<f64>() / ws.len() as f64;
        incr_err = incr_err.max((st.mean.as_slice()[j] - two_pass).abs());
    }

    // fast-SWA at one epoch per stride, keeping only SWA's points, against SWA
    let spe = 7;
    let swa_pol = CollectionPolicy::swa(&sched).unwrap();
    let fast_pol = CollectionPolicy::fast_swa(&sched, spe).unwrap();
    let mut swa = AveragerState::new(p, swa_pol);
    let mut fast_restricted = AveragerState::new(p, fast_pol);
    let mut i = 0;
    for epoch in 0..30 {
        for k in 0..spe {
            let w = &ws[i % ws.len()];
            i += 1;
            let in_swa = should_collect(&swa_pol, epoch, k, spe, &sched);
            if in_swa {
                swa = collect(&swa, w).unwrap();
            }
            if should_collect(&fast_pol, epoch, k, spe, &sched) && in_swa {
                fast_restricted = collect(&fast_restricted, w).unwrap();
            }
        }
    }
    let restrict_err = swa
        .mean
        .as_slice()
        .iter()
        .zip(fast_restricted.mean.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let counts_match = swa.count == fast_restricted.count && swa.count > 0;

    let spec = MlpSpec::new(vec![3, 4, 2], 0.0).unwrap();
    let mut w = init_mlp(&spec, 71);
    let vals = w.as_mut_slice();
    vals[0] = -0.0;
    vals[1] = f64::MIN_POSITIVE / 8.0;
    vals[2] = f64::MAX;
    vals[3] = 1.0 / 3.0;
    let h = CheckpointHeader::new(&spec, Role::FastSwa, 5, 35, 9, 5.0);
    let bytes = encode_checkpoint(&w, &h).unwrap();
    let (w2, h2) = decode_checkpoint(&bytes).unwrap();
    let bits_equal = w.as_slice().iter().zip(w2.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    let reencoded = encode_checkpoint(&w2, &h2).unwrap() == bytes;

    outcome(
        incr_err < 1e-10 && restrict_err < 1e-12 && counts_match && bits_equal && reencoded && h2 == h,
        format!(
            "incremental vs two-pass {incr_err:.1e} (< 1e-10); restricted fast-SWA vs SWA {restrict_err:.1e} over {} points (< 1e-12); checkpoint round-trip bit-exact: {}",
            swa.count,
            bits_equal && reencoded
        ),
    )
}

// 8 ───────────────────────────────────────────────────────────────────────

fn schedule_identities() -> Outcome {
    let cos = ScheduleSpec::cosine(0.1, 70.0).unwrap();
    let cyc = ScheduleSpec::cyclic(0.1, 70.0, 60.0, 10.0).unwrap();
    let start = lr_at(&cos, 0.0) == 0.1 && lr_at(&cyc, 0.0) == 0.1;
    let end = lr_at(&cos, 70.0) == 0.0;
    let periodic = (0..400).all(|i| {
        let pos = 60.0 + i as f64 * 0.25;
        lr_at(&cyc, pos) == lr_at(&cyc, pos + 10.0) && lr_at(&cyc, pos) == lr_at(&cyc, pos + 30.0)
    });
    let ramp = RampSpec::new(100.0, 5.0).unwrap();
    let ramp_ok = lambda_at(&ramp, 0.0) == 0.0 && lambda_at(&ramp, 5.0) == 100.0 && lambda_at(&ramp, 50.0) == 100.0;
    outcome(
        start && end && periodic && ramp_ok,
        format!("η(0)=η₀: {start}; η(ℓ₀)=0: {end}; c-periodic beyond ℓ: {periodic}; λ ramp 0→100: {ramp_ok}"),
    )
}

// 9, 10 ──────────────────────────────────────────────────────────────────

const E2E_SEEDS: std::ops::Range<u64> = 0..5;

fn two_moons_config(seed: u64, pi: bool) -> TrainConfig {
    let consistency = if pi {
        ConsistencyConfig {
            ramp: RampSpec::new(100.0, 30.0).unwrap(),
            ..ConsistencyConfig::default()
        }
    } else {
        ConsistencyConfig::supervised()
    };
    TrainConfig {
        model: MlpSpec::new(vec![2, 32, 32, 2], 0.0).unwrap(),
        schedule: ScheduleSpec::cyclic(0.05, 70.0, 60.0, 10.0).unwrap(),
        momentum: 0.9,
        weight_decay: 1e-4,
        nesterov: true,
        consistency,
        perturbation: Some(PerturbationSpec::noise(0.2, 0.0)),
        alpha: 0.97,
        averagers: vec![AveragerSpec::fast_swa(Stride::Epochs(1.0))],
        epochs: 90,
        seed,
        labeled_batch: 6,
        unlabeled_batch: 20,
        snapshot_epochs: vec![],
    }
}

struct SeedResult {
    student: f64,
    fast_swa: f64,
    diversity: f64,
}

impl SeedResult {
    fn gain(&self) -> f64 {
        self.student - self.fast_swa
    }
}

fn run_two_moons(seed: u64, pi: bool) -> SeedResult {
    let data = make_dataset(&DatasetSpec::two_moons(1000, 6, 1000, 0.1), seed).unwrap();
    let out = train(&two_moons_config(seed, pi), &data).unwrap();
    let rows = out.log.rows();
    let last = rows.last().unwrap();
    let tail = &rows[rows.len() - 10..];
    SeedResult {
        student: last.test_err_student,
        fast_swa: last.test_err_averagers[0],
        diversity: tail.iter().map(|r| r.diversity_vs_prev_epoch).sum::<f64>() / tail.len() as f64,
    }
}

fn end_to_end(pi_runs: &[SeedResult], sup_runs: &[SeedResult]) -> Outcome {
    let wins = pi_runs.iter().filter(|r| r.fast_swa <= r.student).count();
    let mean = |v: &[SeedResult]| v.iter().map(SeedResult::gain).sum::<f64>() / v.len() as f64;
    let (gp, gs) = (mean(pi_runs), mean(sup_runs));
    let per_seed: Vec<String> = pi_runs
        .iter()
        .map(|r| format!("{:.3}→{:.3}", r.student, r.fast_swa))
        .collect();
    outcome(
        wins >= 4 && gp >= gs,
        format!(
            "(a) fast-SWA ≤ final Π iterate in {wins}/5 seeds [{}]; (b) mean gain Π {gp:+.4} vs supervised {gs:+.4}",
            per_seed.join(", ")
        ),
    )
}

fn diversity_ordering(pi_runs: &[SeedResult], sup_runs: &[SeedResult]) -> Outcome {
    let wins = pi_runs.iter().zip(sup_runs).filter(|(p, s)| p.diversity > s.diversity).count();
    let pairs: Vec<String> = pi_runs
        .iter()
        .zip(sup_runs)
        .map(|(p, s)| format!("{:.4}/{:.4}", p.diversity, s.diversity))
        .collect();
    outcome(
        wins >= 4,
        format!("Π diversity > supervised in {wins}/5 seeds [Π/sup: {}]", pairs.join(", ")),
    )
}

// 11 ──────────────────────────────────────────────────────────────────────

fn determinism() -> Outcome {
    let text = "
n_total = 300
n_test = 200
hidden = 16
eta0 = 0.05
ell0 = 12
ell = 10
cycle_len = 3
noise_sigma = 0.2
dropout = 0.1
teacher_mode = mean_teacher
swa = true
fast_swa = true
stride_epochs = 0.5
epochs = 12
seed = 5
";
    let cfg = parse_config(text, Path::new(".")).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment_in(&cfg, a.path()).unwrap();
    run_experiment_in(&cfg, b.path()).unwrap();
    let ma = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.path().join("metrics.csv")).unwrap();
    let lines = ma.iter().filter(|&&c| c == b'\n').count();
    outcome(ma == mb && lines == 13, format!("two runs, {} bytes each, identical: {}", ma.len(), ma == mb))
}

fn main() {
    let total = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let el = t.elapsed();
        let in_time = limit.is_none_or(|l| el <= l);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = limit.map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
        println!(
            "criterion {n:>2} {name}: {} ({}) [{:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64()
        );
    };
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    report(1, "gradient correctness", min(1), &mut gradient_correctness);
    report(2, "estimator unbiasedness", min(2), &mut estimator_unbiasedness);
    report(3, "estimator variance", min(2), &mut variance_formula);
    report(4, "Hessian decomposition", min(2), &mut hessian_decomposition);
    report(5, "random-ray expansion", min(1), &mut random_ray_expansion);
    report(6, "Gaussian iterates", min(1), &mut gaussian_iterates);
    report(7, "averaging arithmetic", None, &mut averaging_arithmetic);
    report(8, "schedule identities", None, &mut schedule_identities);

    let t = Instant::now();
    let pi: Vec<SeedResult> = E2E_SEEDS.map(|s| run_two_moons(s, true)).collect();
    let sup: Vec<SeedResult> = E2E_SEEDS.map(|s| run_two_moons(s, false)).collect();
    let shared = t.elapsed();
    report(9, "two-moons averaging gain", None, &mut || {
        let mut o = end_to_end(&pi, &sup);
        let in_time = shared <= Duration::from_secs(300);
        o.detail = format!("{} (10 runs in {:.1}s / 300s)", o.detail, shared.as_secs_f64());
        o.pass &= in_time;
        o
    });
    report(10, "diversity ordering", None, &mut || diversity_ordering(&pi, &sup));
    report(11, "determinism", None, &mut determinism);

    println!("acceptance: {} of 11 criteria passed in {:.1}s", 11 - failed, total.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
