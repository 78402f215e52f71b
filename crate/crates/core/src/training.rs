//! Datasets on boxes, Adam training of networks (with optional affine head),
//! the spectral constant `C_f`, and depth sweeps.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::gradients::backward;
use crate::hamiltonian::{HdnnModel, Layer, StructureTag};
use crate::integrator::{flow, inject, restricted_flow, FixedPointConfig, State};
use crate::numerics::quadrature::{composite_rule, halton};
use crate::numerics::{random_matrix, Activation, Matrix, Vector};
use crate::uap::{head_apply, OutputHead};

/// Points in the low-discrepancy part of sup-norm samples.
pub const SUP_SAMPLE_POINTS: usize = 10_000;

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    lo: Vector,
    hi: Vector,
}

impl BoxDomain {
    pub fn new(lo: Vector, hi: Vector) -> Result<Self> {
        check_dim("box bounds", lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::Config("box dimension must be positive".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(a, b)| !(a < b)) {
            return Err(Error::Config("box needs lo < hi in every coordinate".into()));
        }
        Ok(BoxDomain { lo, hi })
    }

    /// `[-a, a]^n`.
    pub fn cube(n: usize, a: f64) -> Result<Self> {
        BoxDomain::new(Vector::filled(n, -a), Vector::filled(n, a))
    }

    pub fn n(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &Vector {
        &self.lo
    }

    pub fn hi(&self) -> &Vector {
        &self.hi
    }

    /// `sup_{x in box} |x|`, attained at the farthest corner.
    pub fn sup_norm(&self) -> f64 {
        self.lo
            .iter()
            .zip(self.hi.iter())
            .map(|(a, b)| a.abs().max(b.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Image of a point of `[0, 1]^n`.
    pub fn map_unit(&self, u: &[f64]) -> Vector {
        Vector::from_vec(
            u.iter()
                .enumerate()
                .map(|(i, t)| self.lo[i] + t * (self.hi[i] - self.lo[i]))
                .collect(),
        )
    }

    /// All `2^n` corners, bit `i` of the index selecting `hi` in coordinate `i`.
    pub fn corners(&self) -> Vec<Vector> {
        let n = self.n();
        (0..1usize << n)
            .map(|mask| {
                Vector::from_vec(
                    (0..n)
                        .map(|i| if mask >> i & 1 == 1 { self.hi[i] } else { self.lo[i] })
                        .collect(),
                )
            })
            .collect()
    }

    /// Halton points mapped into the box plus the corners.
    pub fn sup_sample(&self) -> Vec<Vector> {
        let mut pts: Vec<Vector> = halton(SUP_SAMPLE_POINTS, self.n())
            .iter()
            .map(|u| self.map_unit(u))
            .collect();
        pts.extend(self.corners());
        pts
    }

    /// Held-out grid for sup errors: 1001 points at n = 1, 33 x 33 at n = 2,
    /// otherwise [`BoxDomain::sup_sample`].
    pub fn error_grid(&self) -> Vec<Vector> {
        match self.n() {
            1 => (0..=1000).map(|i| self.map_unit(&[i as f64 / 1000.0])).collect(),
            2 => (0..33)
                .flat_map(|i| (0..33).map(move |j| [i as f64 / 32.0, j as f64 / 32.0]))
                .map(|u| self.map_unit(&u))
                .collect(),
            _ => self.sup_sample(),
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let u: Vec<f64> = (0..self.n()).map(|_| rng.gen::<f64>()).collect();
        self.map_unit(&u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetKind {
    /// `sin(pi x_i)` in every coordinate.
    SinPi,
    /// `exp(-|x|^2 / 2)` in every coordinate.
    GaussianBump,
    Identity,
    /// Every coordinate equal to the given value.
    Constant(f64),
}

/// `x -> kind(a x)` for a dilation `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetFunction {
    pub kind: TargetKind,
    pub dilation: f64,
}

/// `C_f` known in closed form, with where it comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnownCf {
    pub value: f64,
    pub provenance: &'static str,
}

impl TargetFunction {
    pub const REGISTERED: [&'static str; 4] = ["sin_pi", "gaussian_bump", "identity", "constant"];

    pub fn new(kind: TargetKind) -> Self {
        TargetFunction { kind, dilation: 1.0 }
    }

    pub fn dilated(self, a: f64) -> Self {
        TargetFunction {
            dilation: self.dilation * a,
            ..self
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TargetKind::SinPi => "sin_pi",
            TargetKind::GaussianBump => "gaussian_bump",
            TargetKind::Identity => "identity",
            TargetKind::Constant(_) => "constant",
        }
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        let a = self.dilation;
        match self.kind {
            TargetKind::SinPi => x.map(|t| (PI * a * t).sin()),
            TargetKind::GaussianBump => {
                let r2 = a * a * x.dot(x);
                Vector::filled(x.len(), (-0.5 * r2).exp())
            }
            TargetKind::Identity => x.scale(a),
            TargetKind::Constant(c) => Vector::filled(x.len(), c),
        }
    }

    /// Closed-form `C_f` in the convention of [`FOURIER_CONVENTION`].
    pub fn known_cf(&self, n: usize) -> Option<KnownCf> {
        match self.kind {
            TargetKind::SinPi if n == 1 => Some(KnownCf {
                value: PI * self.dilation.abs(),
                provenance: "analytic: point masses 1/2 at +-pi a",
            }),
            TargetKind::Constant(_) => Some(KnownCf {
                value: 0.0,
                provenance: "analytic: transform supported at 0",
            }),
            _ => None,
        }
    }
}

impl fmt::Display for TargetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim().to_ascii_lowercase().as_str() {
            "sin_pi" => TargetKind::SinPi,
            "gaussian_bump" => TargetKind::GaussianBump,
            "identity" => TargetKind::Identity,
            "constant" => TargetKind::Constant(1.0),
            other => return Err(Error::Config(format!("unknown target function '{other}'"))),
        };
        Ok(TargetFunction::new(kind))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vector>,
    pub targets: Vec<Vector>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// `count` labelled points: the box corners first when `count >= 2^n`, the
/// rest uniform.
pub fn sample_dataset(dom: &BoxDomain, target: &TargetFunction, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(count);
    if dom.n() < usize::BITS as usize && count >= 1usize << dom.n() {
        inputs.extend(dom.corners());
    }
    while inputs.len() < count {
        inputs.push(dom.sample_uniform(&mut rng));
    }
    let targets = inputs.iter().map(|x| target.eval(x)).collect();
    Ok(Dataset { inputs, targets })
}

/// Two concentric annuli in the unit disc, one-hot targets in `R^2`. Returns
/// the dataset and the class labels.
pub fn annuli_dataset(per_class: usize, seed: u64) -> (Dataset, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Dataset::default();
    let mut labels = Vec::with_capacity(2 * per_class);
    for class in 0..2 {
        let (r_lo, r_hi) = if class == 0 { (0.0, 0.35) } else { (0.65, 1.0) };
        for _ in 0..per_class {
            let r = rng.gen_range(r_lo..r_hi);
            let t = rng.gen_range(0.0..2.0 * PI);
            data.inputs.push(Vector::from_vec(vec![r * t.cos(), r * t.sin()]));
            let mut onehot = Vector::zeros(2);
            onehot[class] = 1.0;
            data.targets.push(onehot);
            labels.push(class);
        }
    }
    (data, labels)
}

/// Optimiser and model settings of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub depth: usize,
    pub h: f64,
    pub structure: StructureTag,
    pub activation: Activation,
    /// Zero means full batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last iteration as a fraction of the initial one,
    /// reached by cosine decay.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Stop once the loss falls to this value.
    pub target_loss: Option<f64>,
    pub fixed_point: FixedPointConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            depth: 8,
            h: 1.0,
            structure: StructureTag::Theorem1,
            activation: Activation::Tanh,
            batch_size: 0,
            learning_rate: 1e-2,
            final_lr_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 1000,
            seed: 0,
            init_scale: 1.0,
            target_loss: None,
            fixed_point: FixedPointConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {v}")))
            }
        };
        if self.depth == 0 {
            return Err(Error::Config("depth must be positive".into()));
        }
        positive(self.h, "h")?;
        positive(self.learning_rate, "learning_rate")?;
        positive(self.final_lr_fraction, "final_lr_fraction")?;
        positive(self.adam_eps, "adam_eps")?;
        positive(self.init_scale, "init_scale")?;
        for (v, what) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{what} must lie in [0, 1), got {v}")));
            }
        }
        self.fixed_point.validate()
    }

    fn learning_rate_at(&self, it: usize) -> f64 {
        if self.iterations <= 1 || self.final_lr_fraction == 1.0 {
            return self.learning_rate;
        }
        let t = it as f64 / (self.iterations - 1) as f64;
        let f = self.final_lr_fraction + 0.5 * (1.0 - self.final_lr_fraction) * (1.0 + (PI * t).cos());
        self.learning_rate * f
    }
}

/// A network with weight entries `U[-s, s]`, `s = init_scale / sqrt(n)`, and
/// zero biases and `eta`.
pub fn init_model(cfg: &TrainConfig, n: usize) -> Result<HdnnModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.init_scale / (n as f64).sqrt();
    let layers = (0..cfg.depth)
        .map(|_| Layer::init(cfg.structure, n, s, &mut rng))
        .collect();
    HdnnModel::new(n, cfg.h, cfg.activation, cfg.structure, layers)
}

/// A head `n -> r` with `U[-s, s]` weights, `s = 1 / sqrt(n)`, zero bias.
pub fn init_head(n: usize, r: usize, seed: u64) -> OutputHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    OutputHead {
        w_o: random_matrix(&mut rng, n, r, 1.0 / (n as f64).sqrt()),
        b_o: Vector::zeros(r),
    }
}

/// Restricted flow followed by an optional affine head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub model: HdnnModel,
    pub head: Option<OutputHead>,
}

impl Network {
    pub fn new(model: HdnnModel, head: Option<OutputHead>) -> Result<Self> {
        if let Some(h) = &head {
            check_dim("head input", model.n(), h.input_dim())?;
        }
        Ok(Network { model, head })
    }

    pub fn output_dim(&self) -> usize {
        self.head.as_ref().map_or(self.model.n(), |h| h.output_dim())
    }

    pub fn predict(&self, xi: &Vector, cfg: &FixedPointConfig) -> Result<Vector> {
        let q = restricted_flow(&self.model, xi, cfg)?;
        match &self.head {
            Some(h) => head_apply(h, &q),
            None => Ok(q),
        }
    }

    pub fn num_params(&self) -> usize {
        self.model.num_params() + self.head.as_ref().map_or(0, |h| h.num_params())
    }

    pub fn params_vec(&self) -> Vec<f64> {
        let mut out = self.model.params_vec();
        if let Some(h) = &self.head {
            h.write_params(&mut out);
        }
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim("parameter vector", self.num_params(), src.len())?;
        let k = self.model.num_params();
        self.model.set_params(&src[..k])?;
        if let Some(h) = &mut self.head {
            h.read_params(&src[k..]);
        }
        Ok(())
    }
}

/// Mean squared error `sum_i |y_i - t_i|^2 / (m r)` over `batch` and its
/// gradient in the layout of [`Network::params_vec`].
pub fn loss_and_grad(net: &Network, data: &Dataset, batch: &[usize], cfg: &FixedPointConfig) -> Result<(f64, Vec<f64>)> {
    let r = net.output_dim() as f64;
    let per_sample = batch
        .par_iter()
        .map(|&i| -> Result<(f64, Vec<f64>)> {
            let traj = flow(&net.model, &inject(&data.inputs[i]), cfg)?;
            let q = &traj[net.model.depth()].q;
            let (resid, q_bar, head_grad) = match &net.head {
                Some(head) => {
                    let resid = head_apply(head, q)?.sub(&data.targets[i]);
                    let y_bar = resid.scale(2.0 / r);
                    let mut hg = OutputHead {
                        w_o: Matrix::zeros(head.input_dim(), head.output_dim()),
                        b_o: y_bar.clone(),
                    };
                    hg.w_o.add_outer(1.0, q, &y_bar);
                    (resid, head.w_o.mul_vec(&y_bar), Some(hg))
                }
                None => {
                    let resid = q.sub(&data.targets[i]);
                    let q_bar = resid.scale(2.0 / r);
                    (resid, q_bar, None)
                }
            };
            let adj = State {
                p: Vector::zeros(net.model.n()),
                q: q_bar,
            };
            let mut g = backward(&net.model, &traj, &adj)?.0.flatten();
            if let Some(hg) = head_grad {
                hg.write_params(&mut g);
            }
            Ok((resid.dot(&resid) / r, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.num_params()];
    for (l, g) in &per_sample {
        loss += l;
        for (t, v) in grad.iter_mut().zip(g) {
            *t += v;
        }
    }
    grad.iter_mut().for_each(|t| *t /= m);
    Ok((loss / m, grad))
}

/// Mean squared error over the whole dataset.
pub fn mse(net: &Network, data: &Dataset, cfg: &FixedPointConfig) -> Result<f64> {
    let r = net.output_dim() as f64;
    let errs = data
        .inputs
        .par_iter()
        .zip(&data.targets)
        .map(|(x, t)| {
            let e = net.predict(x, cfg)?.sub(t);
            Ok(e.dot(&e) / r)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest recorded loss.
    pub network: Network,
    /// Loss before each update, then the loss of the final parameters.
    pub loss_history: Vec<f64>,
    pub best_loss: f64,
    pub best_iteration: usize,
}

/// Adam on the mean squared error of `net` over `data`.
pub fn train(net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    check_dim("training targets", data.len(), data.targets.len())?;
    check_dim("training input", net.model.n(), data.inputs[0].len())?;
    check_dim("training target", net.output_dim(), data.targets[0].len())?;

    let fp = &cfg.fixed_point;
    let full: Vec<usize> = (0..data.len()).collect();
    let minibatch = cfg.batch_size > 0 && cfg.batch_size < data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut net = net;
    let mut theta = net.params_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut best = theta.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_iteration = 0;
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut b1t = 1.0;
    let mut b2t = 1.0;

    let mut it = 0;
    while it < cfg.iterations {
        let batch = if minibatch {
            sample(&mut rng, data.len(), cfg.batch_size).into_vec()
        } else {
            full.clone()
        };
        let (loss, grad) = loss_and_grad(&net, data, &batch, fp)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_iteration = it;
            best.clone_from(&theta);
        }
        if cfg.target_loss.is_some_and(|t| loss <= t) {
            break;
        }
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        let lr = cfg.learning_rate_at(it);
        for k in 0..theta.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
            let m_hat = m[k] / (1.0 - b1t);
            let v_hat = v[k] / (1.0 - b2t);
            theta[k] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        net.set_params(&theta)?;
        it += 1;
    }
    if it == cfg.iterations {
        let loss = if minibatch {
            mse(&net, data, fp)?
        } else {
            loss_and_grad(&net, data, &full, fp)?.0
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_iteration = it;
            best.clone_from(&theta);
        }
    }
    net.set_params(&best)?;
    Ok(TrainOutcome {
        network: net,
        loss_history: history,
        best_loss,
        best_iteration,
    })
}

/// Fraction of points whose largest output coordinate is the label.
pub fn accuracy(net: &Network, data: &Dataset, labels: &[usize], cfg: &FixedPointConfig) -> Result<f64> {
    check_dim("labels", data.len(), labels.len())?;
    let hits = data
        .inputs
        .par_iter()
        .zip(labels)
        .map(|(x, &l)| {
            let y = net.predict(x, cfg)?;
            let arg = (0..y.len()).fold(0, |b, i| if y[i] > y[b] { i } else { b });
            Ok(usize::from(arg == l))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len().max(1) as f64)
}

/// Largest Euclidean error over the domain's [`BoxDomain::error_grid`];
/// returns the error and the number of grid points.
pub fn sup_error(net: &Network, target: &TargetFunction, dom: &BoxDomain, cfg: &FixedPointConfig) -> Result<(f64, usize)> {
    let grid = dom.error_grid();
    let errs = grid
        .par_iter()
        .map(|x| Ok(net.predict(x, cfg)?.sub(&target.eval(x)).norm()))
        .collect::<Result<Vec<f64>>>()?;
    Ok((errs.iter().fold(0.0, |m: f64, e| m.max(*e)), grid.len()))
}

/// Fourier convention used for `C_f`.
pub const FOURIER_CONVENTION: &str = "f(x) = int exp(i w.x) F(w) dw, F(w) = (2 pi)^-n int exp(-i w.x) f(x) dx";

/// Quadrature settings of [`estimate_cf`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfQuadrature {
    /// The spatial integral runs over the domain scaled by this factor.
    pub extension: f64,
    pub spatial_panels: usize,
    /// Frequencies are truncated to `[-radius, radius]^n`; the shell up to
    /// `2 radius` estimates the tail.
    pub radius: f64,
    pub frequency_panels: usize,
    /// Gauss–Legendre order per panel.
    pub order: usize,
    /// Step of the central differences for the gradient of `f`.
    pub fd_step: f64,
}

impl Default for CfQuadrature {
    fn default() -> Self {
        CfQuadrature {
            extension: 8.0,
            spatial_panels: 32,
            radius: 16.0,
            frequency_panels: 32,
            order: 16,
            fd_step: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralProfile {
    pub cf_estimate: f64,
    /// Spatial nodes per axis times frequency nodes per axis.
    pub quadrature_nodes: usize,
    pub truncation_radius: f64,
    /// Integral over the shell `radius < |w|_inf <= 2 radius`.
    pub tail_estimate: f64,
}

/// `C_f = int |w|_1 |F(w)| dw`, evaluated as `sum_k int |F[d_k f](w)| dw` so
/// that the spectral weight comes from the gradient of `f`. Supports
/// `n <= 2`.
pub fn estimate_cf(target: &TargetFunction, dom: &BoxDomain, q: &CfQuadrature) -> Result<SpectralProfile> {
    let n = dom.n();
    if n > 2 {
        return Err(Error::Config(format!("C_f quadrature supports n <= 2, got {n}")));
    }
    let centre: Vec<f64> = (0..n).map(|i| 0.5 * (dom.lo()[i] + dom.hi()[i])).collect();
    let axes: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .map(|i| {
            let half = 0.5 * (dom.hi()[i] - dom.lo()[i]) * q.extension;
            composite_rule(centre[i] - half, centre[i] + half, q.spatial_panels, q.order)
        })
        .collect();
    // frequency rule on [-2R, 2R] with panel edges at +-R
    let r = q.radius;
    let outer = (q.frequency_panels / 2).max(1);
    let (mut wn, mut ww) = composite_rule(-2.0 * r, -r, outer, q.order);
    let (cn, cw) = composite_rule(-r, r, q.frequency_panels, q.order);
    let (hn, hw) = composite_rule(r, 2.0 * r, outer, q.order);
    wn.extend(cn);
    ww.extend(cw);
    wn.extend(hn);
    ww.extend(hw);

    let ns = axes[0].0.len();
    let nf = wn.len();
    let points = ns.pow(n as u32);
    let out_dim = target.eval(&Vector::zeros(n)).len();

    // gradient samples: index (k, component, spatial point)
    let mut grads = vec![vec![vec![0.0; points]; out_dim]; n];
    for p in 0..points {
        let x = Vector::from_vec((0..n).map(|a| axes[a].0[(p / ns.pow(a as u32)) % ns]).collect());
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += q.fd_step;
            xm[k] -= q.fd_step;
            let d = target.eval(&xp).sub(&target.eval(&xm)).scale(0.5 / q.fd_step);
            for c in 0..out_dim {
                grads[k][c][p] = d[c];
            }
        }
    }

    // transform axis by axis: spatial index a -> frequency index
    let norm = (2.0 * PI).powi(-(n as i32));
    let mut spectra: Vec<Vec<Vec<(f64, f64)>>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut comps = Vec::with_capacity(out_dim);
        for c in 0..out_dim {
            let mut data: Vec<(f64, f64)> = grads[k][c].iter().map(|&v| (v, 0.0)).collect();
            let mut shape = vec![ns; n];
            for a in 0..n {
                data = transform_axis(&data, &shape, a, &axes[a].0, &axes[a].1, &wn);
                shape[a] = nf;
            }
            comps.push(data.into_iter().map(|(re, im)| (re * norm, im * norm)).collect());
        }
        spectra.push(comps);
    }

    let mut main = 0.0;
    let mut tail = 0.0;
    for f in 0..nf.pow(n as u32) {
        let idx: Vec<usize> = (0..n).map(|a| (f / nf.pow(a as u32)) % nf).collect();
        let weight: f64 = idx.iter().map(|&i| ww[i]).product();
        let inside = idx.iter().all(|&i| wn[i].abs() <= r);
        let mut value = 0.0;
        for comps in &spectra {
            value += comps.iter().map(|s| s[f].0 * s[f].0 + s[f].1 * s[f].1).sum::<f64>().sqrt();
        }
        if inside {
            main += weight * value;
        } else {
            tail += weight * value;
        }
    }
    if tail > 0.1 * main {
        return Err(Error::TruncationTooTight { tail, integral: main });
    }
    Ok(SpectralProfile {
        cf_estimate: main,
        quadrature_nodes: ns * nf,
        truncation_radius: r,
        tail_estimate: tail,
    })
}

/// `out[.., w, ..] = sum_x weight(x) exp(-i w x) data[.., x, ..]` along axis
/// `axis` of a column-major tensor of the given shape.
fn transform_axis(
    data: &[(f64, f64)],
    shape: &[usize],
    axis: usize,
    nodes: &[f64],
    weights: &[f64],
    freqs: &[f64],
) -> Vec<(f64, f64)> {
    let stride: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let outer: usize = shape[axis + 1..].iter().product();
    let nf = freqs.len();
    let mut out = vec![(0.0, 0.0); stride * nf * outer];
    let phases: Vec<Vec<(f64, f64)>> = freqs
        .iter()
        .map(|&w| {
            nodes
                .iter()
                .zip(weights)
                .map(|(&x, &wt)| {
                    let (s, c) = (w * x).sin_cos();
                    (wt * c, -wt * s)
                })
                .collect()
        })
        .collect();
    for o in 0..outer {
        for s in 0..stride {
            for (fi, row) in phases.iter().enumerate() {
                let mut acc = (0.0, 0.0);
                for (xi, &(pr, pi)) in row.iter().enumerate() {
                    let (dr, di) = data[s + stride * (xi + len * o)];
                    acc.0 += pr * dr - pi * di;
                    acc.1 += pr * di + pi * dr;
                }
                out[s + stride * (fi + nf * o)] = acc;
            }
        }
    }
    out
}

/// Settings of [`depth_sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    pub seeds: usize,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    /// Per-run settings; `depth` and `seed` are overwritten per run.
    pub train: TrainConfig,
    /// Used instead of the known or estimated `C_f` when set.
    pub cf: Option<f64>,
    /// When set, each depth uses `h = horizon / N` instead of `train.h`.
    pub horizon: Option<f64>,
    pub quadrature: CfQuadrature,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            depths: vec![4, 8, 16, 32, 64],
            seeds: 3,
            dataset_size: 128,
            dataset_seed: 0,
            train: TrainConfig::default(),
            cf: None,
            horizon: None,
            quadrature: CfQuadrature::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRow {
    pub depth: usize,
    /// Best sampled sup error over the seeds; `None` if every run failed.
    pub sup_error: Option<f64>,
    /// `2^{n/2} C_f / sqrt(N)`.
    pub bound: f64,
    pub within_bound: Option<bool>,
    /// Final training loss of the run with the best sup error.
    pub final_loss: Option<f64>,
    pub seeds_used: usize,
    pub grid_points: usize,
    /// Messages of failed runs.
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthSweepResult {
    pub rows: Vec<DepthRow>,
    pub cf: f64,
    pub cf_source: String,
    /// Least-squares slope of `log e_N` against `log N`.
    pub slope: Option<f64>,
}

/// `2^{n/2} C_f / sqrt(N)`.
pub fn depth_bound(n: usize, cf: f64, depth: usize) -> f64 {
    2f64.powf(n as f64 / 2.0) * cf / (depth as f64).sqrt()
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Seed of run `s` at depth `depth`.
pub fn sweep_seed(base: u64, depth: usize, s: usize) -> u64 {
    base.wrapping_add(1000 * depth as u64 + s as u64)
}

/// Trains `cfg.seeds` fresh models per depth and keeps the best sup error.
/// Failed runs are recorded and the sweep continues.
pub fn depth_sweep(target: &TargetFunction, dom: &BoxDomain, cfg: &SweepConfig) -> Result<DepthSweepResult> {
    if !cfg.train.activation.is_sigmoidal() {
        return Err(Error::Config(format!(
            "depth sweep needs a sigmoidal activation, got {}",
            cfg.train.activation
        )));
    }
    let n = dom.n();
    let (cf, cf_source) = match (cfg.cf, target.known_cf(n)) {
        (Some(c), _) => (c, "configured".to_string()),
        (None, Some(k)) => (k.value, k.provenance.to_string()),
        (None, None) => (
            estimate_cf(target, dom, &cfg.quadrature)?.cf_estimate,
            "quadrature estimate".to_string(),
        ),
    };
    let data = sample_dataset(dom, target, cfg.dataset_size, cfg.dataset_seed)?;
    let runs: Vec<(usize, usize)> = cfg
        .depths
        .iter()
        .flat_map(|&d| (0..cfg.seeds).map(move |s| (d, s)))
        .collect();
    let results: Vec<Result<(f64, f64, usize)>> = runs
        .par_iter()
        .map(|&(depth, s)| {
            let mut tc = cfg.train.clone();
            tc.depth = depth;
            tc.seed = sweep_seed(cfg.train.seed, depth, s);
            if let Some(t) = cfg.horizon {
                tc.h = t / depth as f64;
            }
            let model = init_model(&tc, n)?;
            let outcome = train(Network::new(model, None)?, &data, &tc)?;
            let (err, pts) = sup_error(&outcome.network, target, dom, &tc.fixed_point)?;
            Ok((err, outcome.best_loss, pts))
        })
        .collect();

    let mut rows = Vec::with_capacity(cfg.depths.len());
    for &depth in &cfg.depths {
        let mut best: Option<(f64, f64)> = None;
        let mut failures = Vec::new();
        let mut grid_points = 0;
        let mut used = 0;
        for (run, res) in runs.iter().zip(&results) {
            if run.0 != depth {
                continue;
            }
            match res {
                Ok((err, loss, pts)) => {
                    used += 1;
                    grid_points = *pts;
                    if best.is_none_or(|b| *err < b.0) {
                        best = Some((*err, *loss));
                    }
                }
                Err(e) => failures.push(format!("seed {}: {e}", run.1)),
            }
        }
        let bound = depth_bound(n, cf, depth);
        rows.push(DepthRow {
            depth,
            sup_error: best.map(|b| b.0),
            bound,
            within_bound: best.map(|b| b.0 <= bound),
            final_loss: best.map(|b| b.1),
            seeds_used: used,
            grid_points,
            failures,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.sup_error.filter(|e| *e > 0.0).map(|e| ((r.depth as f64).ln(), e.ln())))
        .collect();
    Ok(DepthSweepResult {
        slope: fit_slope(&pts),
        rows,
        cf,
        cf_source,
    })
}
