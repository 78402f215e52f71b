//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use hamflow::gradients::{bsm, fd_check, layer_jacobian, residual_bsm, FdCheckConfig};
use hamflow::hamiltonian::coupling_matrix;
use hamflow::integrator::{flow, inject, restricted_flow, ResidualLayer};
use hamflow::numerics::{random_matrix, random_vector};
use hamflow::persist::{load_model, model_from_str, save_model, ModelFile};
use hamflow::training::*;
use hamflow::uap::{rank_repair, shallow_eval, to_shallow_sum, ShallowSum, ShallowTerm};
use hamflow::{Activation, FixedPointConfig, HdnnModel, Layer, Matrix, State, StructureTag, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EQUIVALENCE_TOL: f64 = 1e-12;
const DET_TOL: f64 = 1e-9;
const SIGMA_TOL: f64 = 1e-9;
const BASELINE_SIGMA_MAX: f64 = 0.1;
const SMOOTH_FD_TOL: f64 = 1e-5;
const RELU_FD_TOL: f64 = 1e-3;
const MIN_FD_PARAMS: usize = 200;
const SYMPLECTIC_TOL: f64 = 1e-7;
const TREND_SLACK: f64 = 1.2;
const MAX_SLOPE: f64 = -0.3;
const WELL_TRAINED_LOSS: f64 = 1e-6;
const MIN_ACCURACY: f64 = 0.95;
const HEAD_MAX_ITERATIONS: usize = 10_000;
const CF_REL_TOL: f64 = 0.02;
const DILATION_REL_TOL: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_point(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    random_vector(rng, n, 1.0)
}

fn c1_equivalence() -> Outcome {
    let fp = FixedPointConfig::default();
    let mut worst: f64 = 0.0;
    let mut r = rng(1);
    for n in [1, 2, 4, 8] {
        for depth in [1, 4, 16, 64] {
            let model = HdnnModel::random(StructureTag::Theorem1, n, depth, 0.5, Activation::Tanh, 1.0, &mut r).unwrap();
            let g = to_shallow_sum(&model).unwrap();
            for _ in 0..1000 {
                let xi = uniform_point(&mut r, n);
                let a = restricted_flow(&model, &xi, &fp).unwrap();
                let b = shallow_eval(&g, &xi).unwrap();
                worst = worst.max(a.sub(&b).norm());
            }
        }
    }
    Outcome {
        pass: worst <= EQUIVALENCE_TOL,
        detail: format!("max |phi - g| = {worst:.3e} (tol {EQUIVALENCE_TOL:.0e})"),
    }
}

fn c2_non_vanishing() -> Outcome {
    let fp = FixedPointConfig::default();
    let mut r = rng(2);
    let mut det_dev: f64 = 0.0;
    let mut min_sigma = f64::INFINITY;
    for i in 0..100 {
        let tag = if i % 2 == 0 { StructureTag::Theorem1 } else { StructureTag::BlockExplicit };
        let n = r.gen_range(1..=4);
        let depth = r.gen_range(1..=64);
        let model = HdnnModel::random(tag, n, depth, 0.5, Activation::Tanh, 0.5, &mut r).unwrap();
        let xi = uniform_point(&mut r, n);
        let traj = flow(&model, &inject(&xi), &fp).unwrap();
        let report = bsm(&model, &traj).unwrap();
        for (d, (_, hi)) in report.dets.iter().zip(&report.sigma_extremes) {
            det_dev = det_dev.max((d - 1.0).abs());
            min_sigma = min_sigma.min(*hi);
        }
    }

    let n = 4;
    let layers: Vec<ResidualLayer> = (0..64)
        .map(|_| ResidualLayer {
            w: random_matrix(&mut r, 2 * n, 2 * n, 1.0).scale(0.5),
            b: random_vector(&mut r, 2 * n, 1.0).scale(0.5),
        })
        .collect();
    let x0 = uniform_point(&mut r, 2 * n);
    let baseline = residual_bsm(&layers, Activation::Tanh, 1.0, &x0).unwrap();
    let base_sigma = baseline.sigma_extremes[63].1;

    Outcome {
        pass: det_dev <= DET_TOL && min_sigma >= 1.0 - SIGMA_TOL && base_sigma < BASELINE_SIGMA_MAX,
        detail: format!(
            "max |det - 1| = {det_dev:.3e}, min sigma_max = {min_sigma:.12}, baseline sigma_max(N=64) = {base_sigma:.3e}"
        ),
    }
}

fn c3_gradients() -> Outcome {
    let fp = FixedPointConfig::default();
    let cfg = FdCheckConfig::default();
    let mut r = rng(3);
    let tags = [StructureTag::Theorem1, StructureTag::BlockExplicit, StructureTag::General];
    let mut smooth_worst: f64 = 0.0;
    let mut relu_worst: f64 = 0.0;
    let mut min_checked = usize::MAX;
    let mut relu_min_checked = usize::MAX;
    for i in 0..20 {
        let tag = tags[i % 3];
        let (n, depth) = if tag == StructureTag::General { (2, 8) } else { (4, 8) };
        let model = HdnnModel::random(tag, n, depth, 0.25, Activation::Tanh, 0.5, &mut r).unwrap();
        assert!(model.num_params() >= MIN_FD_PARAMS, "model too small for the check");
        let xi = uniform_point(&mut r, n);
        let smooth = fd_check(&model, &xi, 100 + i as u64, &cfg, &fp).unwrap();
        smooth_worst = smooth_worst.max(smooth.max_rel_err);
        min_checked = min_checked.min(smooth.entries.len());

        let relu = model.with_activation(Activation::Relu);
        let kinked = fd_check(&relu, &xi, 200 + i as u64, &cfg, &fp).unwrap();
        relu_worst = relu_worst.max(kinked.max_rel_err);
        relu_min_checked = relu_min_checked.min(kinked.entries.len() + kinked.excluded.len());
    }
    Outcome {
        pass: smooth_worst <= SMOOTH_FD_TOL
            && relu_worst <= RELU_FD_TOL
            && min_checked >= MIN_FD_PARAMS
            && relu_min_checked >= MIN_FD_PARAMS,
        detail: format!(
            "tanh max rel err {smooth_worst:.3e} (tol {SMOOTH_FD_TOL:.0e}), relu {relu_worst:.3e} (tol {RELU_FD_TOL:.0e}), min params checked {min_checked}"
        ),
    }
}

fn c4_symplecticity() -> Outcome {
    let fp = FixedPointConfig::default();
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.gen_range(1..=4);
        let jc = coupling_matrix(&Matrix::identity(n));
        let layer = Layer::general(
            &jc,
            random_matrix(&mut r, 2 * n, 2 * n, 1.0),
            random_vector(&mut r, 2 * n, 1.0),
            random_vector(&mut r, 2 * n, 1.0),
        )
        .unwrap();
        let h = r.gen_range(0.05..0.3);
        let model = HdnnModel::new(n, h, Activation::Tanh, StructureTag::General, vec![layer.clone()]).unwrap();
        let x0 = State::from_vector(&uniform_point(&mut r, 2 * n)).unwrap();
        let traj = flow(&model, &x0, &fp).unwrap();
        let m = layer_jacobian(&layer, Activation::Tanh, h, &traj[0], &traj[1]).unwrap();
        let lhs = m.transpose().mul(&jc).mul(&m);
        worst = worst.max(lhs.max_abs_diff(&jc));
    }
    Outcome {
        pass: worst <= SYMPLECTIC_TOL,
        detail: format!("max |M^T J M - J| = {worst:.3e} (tol {SYMPLECTIC_TOL:.0e})"),
    }
}

/// A sum whose terms have `W` with `r` dependent rows, plus one full-rank term.
fn deficient_sum(r: &mut ChaCha8Rng, n: usize) -> ShallowSum {
    let mut terms = Vec::new();
    let deficient = r.gen_range(1..=2);
    for _ in 0..deficient {
        let rank = r.gen_range(1..n);
        let basis = random_matrix(r, rank, n, 1.0);
        let mix = random_matrix(r, n, rank, 1.0);
        terms.push(ShallowTerm {
            a: random_matrix(r, n, n, 1.0),
            w: mix.mul(&basis),
            b: random_vector(r, n, 1.0),
        });
    }
    terms.push(ShallowTerm {
        a: random_matrix(r, n, n, 1.0),
        w: Matrix::identity(n).add(&random_matrix(r, n, n, 0.2)),
        b: random_vector(r, n, 1.0),
    });
    ShallowSum::new(terms, Activation::Tanh).unwrap()
}

fn c5_rank_repair() -> Outcome {
    let mut r = rng(5);
    let mut failures = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for i in 0..50 {
        let n = [2, 3, 4][i % 3];
        let eps = if i % 2 == 0 { 1e-2 } else { 1e-3 };
        let g = deficient_sum(&mut r, n);
        let dom = BoxDomain::cube(n, 1.0).unwrap();
        let report = rank_repair(&g, eps, &dom, i as u64).unwrap();

        let deficient: Vec<(usize, usize)> = g
            .terms()
            .iter()
            .enumerate()
            .filter_map(|(j, t)| {
                let sv = t.w.singular_values();
                let tol = 1e-10 * sv.iter().cloned().fold(0.0, f64::max);
                let missing = sv.iter().filter(|&&s| s <= tol).count();
                (missing > 0).then_some((j, missing))
            })
            .collect();
        let n_tilde = deficient.len() as f64;
        // tanh is 1-Lipschitz; the largest |x| on [-1, 1]^n is sqrt(n).
        let x_sup = (n as f64).sqrt();
        for &(j, missing) in &deficient {
            let a_max = (0..n).map(|p| g.terms()[j].a.row(p).norm()).fold(0.0, f64::max);
            let cap = eps / (missing as f64 * n_tilde * (n as f64).sqrt() * x_sup * a_max);
            for &v in &report.perturbation_norms[j] {
                if v > cap {
                    failures.push(format!("sum {i} term {j}: |dw| {v:.3e} > cap {cap:.3e}"));
                }
            }
            if report.perturbation_norms[j].len() != missing {
                failures.push(format!("sum {i} term {j}: repaired {} rows, expected {missing}", report.perturbation_norms[j].len()));
            }
        }
        for (j, t) in report.repaired.terms().iter().enumerate() {
            let (lo, hi) = t.w.svd_extremes();
            if lo <= 1e-10 * hi {
                failures.push(format!("sum {i} term {j}: still rank-deficient"));
            }
        }
        let mut sample = dom.corners();
        sample.extend((0..2000).map(|_| uniform_point(&mut r, n)));
        let own = sample
            .iter()
            .map(|x| {
                let a = shallow_eval(&report.repaired, x).unwrap();
                let b = shallow_eval(&g, x).unwrap();
                a.sub(&b).norm()
            })
            .fold(0.0, f64::max);
        let dev = own.max(report.sup_deviation);
        worst_ratio = worst_ratio.max(dev / eps);
        if dev > eps {
            failures.push(format!("sum {i}: sup deviation {dev:.3e} > {eps:.0e}"));
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("50 sums repaired, max deviation / eps = {worst_ratio:.3e}")
        } else {
            failures.join("; ")
        },
    }
}

fn sweep_settings() -> SweepConfig {
    SweepConfig {
        depths: vec![4, 8, 16, 32, 64],
        seeds: 3,
        dataset_size: 128,
        horizon: Some(4.0),
        train: TrainConfig {
            iterations: 5000,
            learning_rate: 0.02,
            final_lr_fraction: 0.01,
            activation: Activation::Tanh,
            structure: StructureTag::Theorem1,
            ..TrainConfig::default()
        },
        ..SweepConfig::default()
    }
}

fn c6_depth_trend() -> Outcome {
    let dom = BoxDomain::cube(1, 1.0).unwrap();
    let cfg = sweep_settings();
    let sin = depth_sweep(&TargetFunction::new(TargetKind::SinPi), &dom, &cfg).unwrap();
    let errors: Vec<f64> = sin.rows.iter().map(|r| r.sup_error.unwrap_or(f64::INFINITY)).collect();
    let trend = errors.windows(2).all(|w| w[1] <= TREND_SLACK * w[0]);
    let points: Vec<(f64, f64)> = sin.rows.iter().zip(&errors).map(|(r, e)| ((r.depth as f64).ln(), e.ln())).collect();
    let slope = fit_slope(&points).unwrap_or(f64::INFINITY);

    let gauss = depth_sweep(&TargetFunction::new(TargetKind::GaussianBump), &dom, &cfg).unwrap();
    let mut qualifying = 0;
    let mut bound_ok = true;
    for row in &gauss.rows {
        if let (Some(e), Some(loss)) = (row.sup_error, row.final_loss) {
            if loss < WELL_TRAINED_LOSS {
                qualifying += 1;
                let bound = 2f64.sqrt() * gauss.cf / (row.depth as f64).sqrt();
                bound_ok &= e <= bound;
            }
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(",");
    Outcome {
        pass: trend && slope <= MAX_SLOPE && qualifying > 0 && bound_ok,
        detail: format!(
            "sin errors [{}], slope {slope:.3}; gaussian C_f {:.4}, {qualifying} depths with loss < {WELL_TRAINED_LOSS:.0e}, bound held: {bound_ok}",
            fmt(&errors),
            gauss.cf
        ),
    }
}

fn c7_head_task() -> Outcome {
    let (data, labels) = annuli_dataset(500, 7);
    let cfg = TrainConfig {
        depth: 8,
        h: 0.5,
        iterations: 1000,
        learning_rate: 0.01,
        final_lr_fraction: 0.1,
        seed: 1,
        ..TrainConfig::default()
    };
    assert!(cfg.iterations <= HEAD_MAX_ITERATIONS);
    let net = Network::new(init_model(&cfg, 2).unwrap(), Some(init_head(2, 2, cfg.seed))).unwrap();
    let out = train(net, &data, &cfg).unwrap();
    let acc = accuracy(&out.network, &data, &labels, &cfg.fixed_point).unwrap();
    Outcome {
        pass: acc >= MIN_ACCURACY,
        detail: format!("training accuracy {:.2}% after {} iterations", 100.0 * acc, cfg.iterations),
    }
}

fn c8_cf_estimator() -> Outcome {
    let dom = BoxDomain::cube(1, 1.0).unwrap();
    let q = CfQuadrature::default();
    let bump = TargetFunction::new(TargetKind::GaussianBump);
    let base = estimate_cf(&bump, &dom, &q).unwrap().cf_estimate;
    // The transform of exp(-x^2/2) is exp(-w^2/2)/sqrt(2 pi), so C_f = 2/sqrt(2 pi).
    let oracle = (2.0 / std::f64::consts::PI).sqrt();
    let rel = (base - oracle).abs() / oracle;
    let doubled = estimate_cf(&bump.dilated(2.0), &dom, &q).unwrap().cf_estimate;
    let ratio = doubled / base;
    let ratio_err = (ratio - 2.0).abs() / 2.0;
    Outcome {
        pass: rel <= CF_REL_TOL && ratio_err <= DILATION_REL_TOL,
        detail: format!("C_f {base:.10} vs {oracle:.10} (rel {rel:.2e}); dilation ratio {ratio:.6}"),
    }
}

fn c9_round_trip() -> Outcome {
    let mut r = rng(9);
    let dir = std::env::temp_dir().join(format!("hamflow-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut identical = true;
    for (i, tag) in [StructureTag::Theorem1, StructureTag::BlockExplicit, StructureTag::General].into_iter().enumerate() {
        let model = HdnnModel::random(tag, 3, 5, 0.3, Activation::Tanh, 1.0, &mut r).unwrap();
        let head = Some(init_head(3, 2, i as u64));
        let file = ModelFile { model, head, seed: Some(i as u64) };
        let path = dir.join(format!("model{i}.json"));
        save_model(&path, &file).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let loaded = load_model(&path).unwrap();
        let again = dir.join(format!("model{i}-again.json"));
        save_model(&again, &loaded).unwrap();
        identical &= bytes == std::fs::read(&again).unwrap();
        identical &= loaded == file;
        identical &= model_from_str(std::str::from_utf8(&bytes).unwrap()).unwrap() == file;
    }
    let _ = std::fs::remove_dir_all(Path::new(&dir));

    let dom = BoxDomain::cube(1, 1.0).unwrap();
    let data = sample_dataset(&dom, &TargetFunction::new(TargetKind::SinPi), 64, 3).unwrap();
    let cfg = TrainConfig { depth: 6, iterations: 200, batch_size: 16, seed: 11, ..TrainConfig::default() };
    let run = || {
        let net = Network::new(init_model(&cfg, 1).unwrap(), None).unwrap();
        train(net, &data, &cfg).unwrap().loss_history
    };
    let a = run();
    let b = run();
    let deterministic = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    Outcome {
        pass: identical && deterministic,
        detail: format!("model files byte-identical: {identical}; {} losses bit-identical: {deterministic}", a.len()),
    }
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("shallow-sum equivalence", Duration::from_secs(10), c1_equivalence),
        ("non-vanishing gradients", Duration::from_secs(30), c2_non_vanishing),
        ("gradient correctness", Duration::from_secs(60), c3_gradients),
        ("symplecticity", Duration::from_secs(10), c4_symplecticity),
        ("rank repair", Duration::from_secs(30), c5_rank_repair),
        ("depth trend", Duration::from_secs(15 * 60), c6_depth_trend),
        ("head task", Duration::from_secs(120), c7_head_task),
        ("C_f estimator", Duration::from_secs(10), c8_cf_estimator),
        ("round trip and determinism", Duration::from_secs(60), c9_round_trip),
    ];
    let only: Option<usize> = std::env::var("HAMFLOW_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|k| k != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {id} ({name}): {} [{:.1}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
