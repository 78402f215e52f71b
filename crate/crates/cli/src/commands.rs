use std::io::Write;
use std::path::Path;

use hamflow::gradients::{self, fd_check, fd_threshold, has_unit_determinant, FdCheckConfig};
use hamflow::integrator::{flow, inject, restricted_flow};
use hamflow::persist::{
    csv_string, fmt_f64, load_model, parse_points_csv, save_model, shallow_sum_from_str, shallow_sum_to_string,
    ModelFile, RunConfig,
};
use hamflow::training::{
    accuracy, annuli_dataset, depth_sweep as run_sweep, init_head, init_model, sample_dataset, train as run_train,
    BoxDomain, Network,
};
use hamflow::uap::{rank_repair as run_repair, shallow_eval, to_shallow_sum};
use hamflow::{Error, FixedPointConfig, Vector};
use rand::SeedableRng;

use crate::Common;

const BSM_DET_TOL: f64 = 1e-9;
const EQUIVALENCE_TOL: f64 = 1e-11;
const DEFAULT_EQUIVALENCE_SAMPLES: usize = 1000;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 2,
        Error::Layer { source, .. } => exit_code(source),
        Error::Config(_)
        | Error::Parse(_)
        | Error::Dimension { .. }
        | Error::NonFinite(_)
        | Error::SkewSymmetry { .. }
        | Error::StructureViolation { .. }
        | Error::WrongStructure { .. } => 3,
        _ => 1,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::input(format!("{}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::input(e.to_string())),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn note(common: &Common, msg: String) {
    if !common.quiet {
        eprintln!("{msg}");
    }
}

fn parse_xi(text: &str, n: usize) -> Result<Vector, Failure> {
    let values = text
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::input(format!("--xi: {e}")))?;
    if values.len() != n {
        return Err(Failure::input(format!("--xi has {} values, model needs {n}", values.len())));
    }
    Ok(Vector::new(values)?)
}

/// The given point, or one drawn uniformly from `[-1, 1]^n`.
fn input_point(xi: Option<&str>, n: usize, seed: u64) -> Result<Vector, Failure> {
    match xi {
        Some(t) => parse_xi(t, n),
        None => {
            let dom = BoxDomain::cube(n, 1.0)?;
            Ok(dom.sample_uniform(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)))
        }
    }
}

fn load_config(path: &Path, common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = common.samples {
        cfg.samples = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(config: &Path, out: &Path, loss: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let cfg = load_config(config, common)?;
    let tc = cfg.train_config()?;
    let (data, labels, head_dim) = if cfg.task == "annuli" {
        if cfg.samples < 2 {
            return Err(Failure::input("the annuli task needs at least 2 samples"));
        }
        let (data, labels) = annuli_dataset(cfg.samples / 2, cfg.data_seed);
        (data, Some(labels), Some(cfg.head_dim.unwrap_or(2)))
    } else {
        if cfg.head_dim.is_some_and(|r| r != cfg.n) {
            return Err(Failure::input("regression targets have n outputs; head_dim must equal n"));
        }
        let data = sample_dataset(&cfg.domain()?, &cfg.target()?, cfg.samples, cfg.data_seed)?;
        (data, None, cfg.head_dim)
    };
    let head = head_dim.map(|r| init_head(cfg.n, r, tc.seed));
    let net = Network::new(init_model(&tc, cfg.n)?, head)?;
    let outcome = run_train(net, &data, &tc)?;

    let file = ModelFile {
        model: outcome.network.model.clone(),
        head: outcome.network.head.clone(),
        seed: Some(tc.seed),
    };
    save_model(out, &file)?;
    let rows: Vec<Vec<String>> = outcome
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), fmt_f64(*l)])
        .collect();
    let loss_path = loss.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("loss.csv"));
    emit(Some(&loss_path), &csv_string(&["iter", "loss"], &rows))?;

    let mut summary = format!(
        "best loss {} at iteration {}",
        fmt_f64(outcome.best_loss),
        outcome.best_iteration
    );
    if let Some(labels) = labels {
        let acc = accuracy(&outcome.network, &data, &labels, &tc.fixed_point)?;
        summary.push_str(&format!(", training accuracy {:.4}", acc));
    }
    note(common, summary);
    Ok(())
}

pub fn eval(model: &Path, points: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let file = load_model(model)?;
    let points = parse_points_csv(&read(points)?)?;
    let n = file.model.n();
    let net = Network::new(file.model, file.head)?;
    let fp = FixedPointConfig::default();
    let r = net.output_dim();
    let mut header: Vec<String> = (1..=n).map(|i| format!("xi_{i}")).collect();
    header.extend((1..=r).map(|i| format!("phi_{i}")));
    let mut rows = Vec::with_capacity(points.len());
    for (i, xi) in points.iter().enumerate() {
        if xi.len() != n {
            return Err(Failure::input(format!("point {} has {} values, model needs {n}", i + 1, xi.len())));
        }
        let y = net.predict(xi, &fp)?;
        rows.push(xi.iter().chain(y.iter()).map(|v| fmt_f64(*v)).collect());
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    emit(out, &csv_string(&header, &rows))
}

pub fn grad_check(model: &Path, xi: Option<&str>, out: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let file = load_model(model)?;
    let seed = common.seed.unwrap_or(0);
    let xi = input_point(xi, file.model.n(), seed)?;
    let mut cfg = FdCheckConfig::default();
    if let Some(m) = common.samples {
        cfg.max_coords = m;
    }
    let report = fd_check(&file.model, &xi, seed, &cfg, &FixedPointConfig::default())?;
    let rows: Vec<Vec<String>> = report
        .entries
        .iter()
        .map(|e| vec![e.index.to_string(), fmt_f64(e.analytic), fmt_f64(e.fd), fmt_f64(e.rel_err)])
        .collect();
    emit(out, &csv_string(&["index", "analytic", "fd", "rel_err"], &rows))?;
    let threshold = fd_threshold(file.model.activation());
    note(
        common,
        format!(
            "{} parameters checked, {} excluded near kinks, max rel_err {:e} (threshold {:e})",
            report.entries.len(),
            report.excluded.len(),
            report.max_rel_err,
            threshold
        ),
    );
    if report.max_rel_err > threshold {
        return Err(Failure::check(format!(
            "gradient check failed: max rel_err {:e} exceeds {:e}",
            report.max_rel_err, threshold
        )));
    }
    Ok(())
}

pub fn bsm(model: &Path, xi: Option<&str>, out: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let file = load_model(model)?;
    let m = &file.model;
    let xi = input_point(xi, m.n(), common.seed.unwrap_or(0))?;
    let traj = flow(m, &inject(&xi), &FixedPointConfig::default())?;
    let report = gradients::bsm(m, &traj)?;
    let rows: Vec<Vec<String>> = report
        .dets
        .iter()
        .zip(&report.sigma_extremes)
        .enumerate()
        .map(|(i, (d, (lo, hi)))| vec![(i + 1).to_string(), fmt_f64(*d), fmt_f64(*lo), fmt_f64(*hi)])
        .collect();
    emit(out, &csv_string(&["j", "det", "sigma_min", "sigma_max"], &rows))?;
    let dev = report.max_det_deviation();
    note(common, format!("max |det - 1| = {dev:e}, min sigma_max = {}", fmt_f64(report.min_sigma_max())));
    if has_unit_determinant(m.structure()) && dev > BSM_DET_TOL {
        return Err(Failure::check(format!("determinant deviation {dev:e} exceeds {BSM_DET_TOL:e}")));
    }
    Ok(())
}

pub fn uap_equiv(model: &Path, out: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let file = load_model(model)?;
    let m = &file.model;
    let g = to_shallow_sum(m)?;
    let samples = common.samples.unwrap_or(DEFAULT_EQUIVALENCE_SAMPLES);
    let dom = BoxDomain::cube(m.n(), 1.0)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
    let fp = FixedPointConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let xi = dom.sample_uniform(&mut rng);
        let d = restricted_flow(m, &xi, &fp)?.sub(&shallow_eval(&g, &xi)?).norm();
        worst = worst.max(d);
    }
    emit(
        out,
        &csv_string(&["samples", "max_deviation"], &[vec![samples.to_string(), fmt_f64(worst)]]),
    )?;
    if worst > EQUIVALENCE_TOL {
        return Err(Failure::check(format!("deviation {worst:e} exceeds {EQUIVALENCE_TOL:e}")));
    }
    Ok(())
}

pub fn rank_repair(
    sum: &Path,
    eps: f64,
    (lo, hi): (f64, f64),
    out: &Path,
    report_path: Option<&Path>,
    common: &Common,
) -> Result<(), Failure> {
    let g = shallow_sum_from_str(&read(sum)?)?;
    let n = g.n();
    let dom = BoxDomain::new(Vector::filled(n, lo), Vector::filled(n, hi))?;
    let report = run_repair(&g, eps, &dom, common.seed.unwrap_or(0))?;
    emit(Some(out), &shallow_sum_to_string(&report.repaired))?;
    let mut rows = Vec::new();
    for &(j, _) in &report.deficient_terms {
        let zero_a = report.zero_a_terms.contains(&j);
        for (k, v) in report.perturbation_norms[j].iter().enumerate() {
            rows.push(vec![
                j.to_string(),
                k.to_string(),
                fmt_f64(*v),
                fmt_f64(report.bound_used[j]),
                zero_a.to_string(),
            ]);
        }
    }
    emit(
        report_path,
        &csv_string(&["term", "row", "perturbation_norm", "cap", "zero_a"], &rows),
    )?;
    note(
        common,
        format!(
            "{} deficient terms repaired in {} attempts, sup deviation {:e} (eps {eps:e})",
            report.deficient_terms.len(),
            report.attempts,
            report.sup_deviation
        ),
    );
    if report.sup_deviation > eps {
        return Err(Failure::check(format!(
            "sup deviation {:e} exceeds eps {eps:e}",
            report.sup_deviation
        )));
    }
    Ok(())
}

pub fn depth_sweep(config: &Path, out: Option<&Path>, common: &Common) -> Result<(), Failure> {
    let cfg = load_config(config, common)?;
    if cfg.task != "regression" {
        return Err(Failure::input("the depth sweep runs regression tasks only"));
    }
    let result = run_sweep(&cfg.target()?, &cfg.domain()?, &cfg.sweep_config()?)?;
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| {
            vec![
                r.depth.to_string(),
                opt(r.sup_error),
                fmt_f64(r.bound),
                r.seeds_used.to_string(),
                opt(r.final_loss),
                r.grid_points.to_string(),
            ]
        })
        .collect();
    emit(
        out,
        &csv_string(
            &["N", "sup_error", "bound_BN", "seeds_used", "final_loss", "grid_points"],
            &rows,
        ),
    )?;
    for r in &result.rows {
        for f in &r.failures {
            note(common, format!("N={}: {f}", r.depth));
        }
    }
    let summary = format!(
        "slope {}, C_f {} ({})",
        result.slope.map(fmt_f64).unwrap_or_else(|| "undefined".into()),
        fmt_f64(result.cf),
        result.cf_source
    );
    // The summary goes to stdout unless stdout carries the CSV.
    if out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}
