//! Exact layer Jacobians, backward sensitivity products and reverse-mode
//! parameter gradients.
//!
//! Reverse mode is written out by hand for each structure tag. General
//! layers differentiate the implicit `p`-update through the implicit
//! function theorem at the converged `p+`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::hamiltonian::{HdnnModel, Layer, StructureTag};
use crate::integrator::{flow, inject, FixedPointConfig, ResidualLayer, State};
use crate::numerics::{Activation, Matrix, Vector};

/// Condition number above which the implicit correction `I - h K_pp` is
/// treated as singular.
const MAX_IMPLICIT_CONDITION: f64 = 1e12;

/// Jacobian `d x_out / d x_in` of one layer, given both endpoints of the step.
pub fn layer_jacobian(layer: &Layer, act: Activation, h: f64, s_in: &State, s_out: &State) -> Result<Matrix> {
    let n = layer.n();
    check_dim("state", n, s_in.n())?;
    check_dim("state", n, s_out.n())?;
    let eye = Matrix::identity(n);
    let zero = Matrix::zeros(n, n);
    match layer {
        Layer::Theorem1 { x, w, b, .. } => {
            // [[I, 0], [A D W, I]] with A = h X W^T
            let mut z = w.mul_vec(&s_out.p);
            z.axpy(1.0, b);
            let shear = x.mul(&w.transpose()).scale(h).mul(&w.scale_rows(&act.apply_prime(&z)));
            Ok(Matrix::from_blocks(&eye, &zero, &shear, &eye))
        }
        Layer::BlockExplicit { x, w_p, w_q, b_p, b_q, .. } => {
            let mut zq = w_q.mul_vec(&s_in.q);
            zq.axpy(1.0, b_q);
            let mut zp = w_p.mul_vec(&s_out.p);
            zp.axpy(1.0, b_p);
            // p+ = p + S_q q-shear, q+ = q + S_p p+-shear
            let s_q = x
                .transpose()
                .mul(&w_q.transpose())
                .mul(&w_q.scale_rows(&act.apply_prime(&zq)))
                .scale(-h);
            let s_p = x
                .mul(&w_p.transpose())
                .mul(&w_p.scale_rows(&act.apply_prime(&zp)))
                .scale(h);
            let lower = Matrix::from_blocks(&eye, &zero, &s_p, &eye);
            let upper = Matrix::from_blocks(&eye, &s_q, &zero, &eye);
            Ok(lower.mul(&upper))
        }
        Layer::General { .. } => {
            let k = GeneralLinearization::new(layer, act, h, s_in, s_out)?;
            let inv = k.correction.inverse()?;
            // dp+ = M^{-1} (dp + h K_pq dq)
            let dp_dp = inv.clone();
            let dp_dq = inv.mul(&k.kpq).scale(h);
            let dq_dp = k.kqp.mul(&inv).scale(h);
            let dq_dq = eye.add(&k.kqq.scale(h)).add(&k.kqp.mul(&dp_dq).scale(h));
            Ok(Matrix::from_blocks(&dp_dp, &dp_dq, &dq_dp, &dq_dq))
        }
    }
}

/// Blocks of `K = J Hess(H)` at the mixed point `(p+, q)` and the implicit
/// correction `I - h K_pp`.
struct GeneralLinearization {
    kpq: Matrix,
    kqp: Matrix,
    kqq: Matrix,
    correction: Matrix,
}

impl GeneralLinearization {
    fn new(layer: &Layer, act: Activation, h: f64, s_in: &State, s_out: &State) -> Result<Self> {
        let n = layer.n();
        let params = layer.to_params();
        let z = s_out.p.concat(&s_in.q);
        let k = params.j().mul(&params.hessian(act, &z));
        let kpp = k.block(0, 0, n, n);
        let correction = Matrix::identity(n).sub(&kpp.scale(h));
        let condition = correction.condition();
        if !(condition <= MAX_IMPLICIT_CONDITION) {
            return Err(Error::SingularImplicitJacobian { condition });
        }
        Ok(GeneralLinearization {
            kpq: k.block(0, n, n, n),
            kqp: k.block(n, 0, n, n),
            kqq: k.block(n, n, n, n),
            correction,
        })
    }
}

/// Backward sensitivity products of a trajectory.
#[derive(Clone, Debug)]
pub struct BsmReport {
    /// `d x_{l+1} / d x_l` for `l = 0..N`.
    pub layer_jacobians: Vec<Matrix>,
    /// Entry `j - 1` holds `d x_N / d x_{N-j}` for `j = 1..=N`.
    pub products: Vec<Matrix>,
    pub dets: Vec<f64>,
    /// `(sigma_min, sigma_max)` of each product.
    pub sigma_extremes: Vec<(f64, f64)>,
}

impl BsmReport {
    /// Accumulates the products right to left from per-layer Jacobians.
    pub fn from_jacobians(layer_jacobians: Vec<Matrix>) -> Self {
        let depth = layer_jacobians.len();
        let mut products = Vec::with_capacity(depth);
        let mut dets = Vec::with_capacity(depth);
        let mut sigma_extremes = Vec::with_capacity(depth);
        let mut running: Option<Matrix> = None;
        for jac in layer_jacobians.iter().rev() {
            let next = match running {
                None => jac.clone(),
                Some(ref p) => p.mul(jac),
            };
            dets.push(next.det());
            sigma_extremes.push(next.svd_extremes());
            products.push(next.clone());
            running = Some(next);
        }
        BsmReport {
            layer_jacobians,
            products,
            dets,
            sigma_extremes,
        }
    }

    /// `d x_N / d x_{N-j}`, `1 <= j <= N`.
    pub fn product(&self, j: usize) -> &Matrix {
        &self.products[j - 1]
    }

    pub fn depth(&self) -> usize {
        self.products.len()
    }

    pub fn max_det_deviation(&self) -> f64 {
        self.dets.iter().fold(0.0, |m, d| m.max((d - 1.0).abs()))
    }

    pub fn min_sigma_max(&self) -> f64 {
        self.sigma_extremes.iter().fold(f64::INFINITY, |m, s| m.min(s.1))
    }
}

/// Backward sensitivity report along `trajectory` (from [`flow`]).
pub fn bsm(model: &HdnnModel, trajectory: &[State]) -> Result<BsmReport> {
    check_dim("trajectory length", model.depth() + 1, trajectory.len())?;
    let jacobians = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            layer_jacobian(layer, model.activation(), model.h(), &trajectory[l], &trajectory[l + 1])
                .map_err(|e| e.at_layer(l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BsmReport::from_jacobians(jacobians))
}

/// Backward sensitivity of a stack of [`ResidualLayer`]s started at `x0`.
pub fn residual_bsm(layers: &[ResidualLayer], act: Activation, h: f64, x0: &Vector) -> Result<BsmReport> {
    let mut x = x0.clone();
    let mut jacobians = Vec::with_capacity(layers.len());
    for layer in layers {
        let mut z = layer.w.matvec(&x)?;
        z.axpy(1.0, &layer.b);
        let d = act.apply_prime(&z);
        let jac = Matrix::scalar(x.len(), 1.0 - h).add(&layer.w.scale_rows(&d).scale(h));
        jacobians.push(jac);
        x = layer.step(act, h, &x)?;
    }
    Ok(BsmReport::from_jacobians(jacobians))
}

/// Gradients with the same layout as the model's free parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(model: &HdnnModel) -> Self {
        ParamGrads {
            layers: model
                .layers()
                .iter()
                .map(|l| Layer::zeros(l.structure(), l.n()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.write_params(&mut out);
        }
        out
    }

    fn from_flat(model: &HdnnModel, flat: &[f64]) -> Self {
        let mut g = ParamGrads::zeros_like(model);
        let mut pos = 0;
        for l in &mut g.layers {
            pos += l.read_params(&flat[pos..]);
        }
        g
    }
}

/// Propagates the adjoint of one step backwards, accumulating parameter
/// gradients into `grads`; returns the adjoint of `s_in`.
fn layer_backward(
    layer: &Layer,
    act: Activation,
    h: f64,
    s_in: &State,
    s_out: &State,
    adj: &State,
    grads: &mut Layer,
) -> Result<State> {
    match (layer, grads) {
        (
            Layer::Theorem1 { x, w, b, eta },
            Layer::Theorem1 {
                x: gx,
                w: gw,
                b: gb,
                eta: geta,
            },
        ) => {
            let p_next = &s_out.p;
            let mut z = w.mul_vec(p_next);
            z.axpy(1.0, b);
            let s = act.apply(&z);
            let u = w.tr_mul_vec(&s);
            // q+ = q + h X u
            gx.add_outer(h, &adj.q, &u);
            let u_bar = x.tr_mul_vec(&adj.q).scale(h);
            // u = W^T s
            gw.add_outer(1.0, &s, &u_bar);
            let z_bar = w.mul_vec(&u_bar).hadamard(&act.apply_prime(&z));
            // z = W p+ + b
            gw.add_outer(1.0, &z_bar, p_next);
            gb.axpy(1.0, &z_bar);
            let mut p_bar = adj.p.clone();
            p_bar.axpy(1.0, &w.tr_mul_vec(&z_bar));
            // p+ = p + h X^T eta
            gx.add_outer(h, eta, &p_bar);
            geta.axpy(h, &x.mul_vec(&p_bar));
            Ok(State {
                p: p_bar,
                q: adj.q.clone(),
            })
        }
        (
            Layer::BlockExplicit {
                x,
                w_p,
                w_q,
                b_p,
                b_q,
                eta_p,
                eta_q,
            },
            Layer::BlockExplicit {
                x: gx,
                w_p: gw_p,
                w_q: gw_q,
                b_p: gb_p,
                b_q: gb_q,
                eta_p: geta_p,
                eta_q: geta_q,
            },
        ) => {
            let q = &s_in.q;
            let p_next = &s_out.p;
            let mut zq = w_q.mul_vec(q);
            zq.axpy(1.0, b_q);
            let sq = act.apply(&zq);
            let mut gq = w_q.tr_mul_vec(&sq);
            gq.axpy(1.0, eta_q);
            let mut zp = w_p.mul_vec(p_next);
            zp.axpy(1.0, b_p);
            let sp = act.apply(&zp);
            let mut gp = w_p.tr_mul_vec(&sp);
            gp.axpy(1.0, eta_p);

            // q+ = q + h X g_p(p+)
            gx.add_outer(h, &adj.q, &gp);
            let gp_bar = x.tr_mul_vec(&adj.q).scale(h);
            geta_p.axpy(1.0, &gp_bar);
            gw_p.add_outer(1.0, &sp, &gp_bar);
            let zp_bar = w_p.mul_vec(&gp_bar).hadamard(&act.apply_prime(&zp));
            gw_p.add_outer(1.0, &zp_bar, p_next);
            gb_p.axpy(1.0, &zp_bar);
            let mut p_bar = adj.p.clone();
            p_bar.axpy(1.0, &w_p.tr_mul_vec(&zp_bar));

            // p+ = p - h X^T g_q(q)
            gx.add_outer(-h, &gq, &p_bar);
            let gq_bar = x.mul_vec(&p_bar).scale(-h);
            geta_q.axpy(1.0, &gq_bar);
            gw_q.add_outer(1.0, &sq, &gq_bar);
            let zq_bar = w_q.mul_vec(&gq_bar).hadamard(&act.apply_prime(&zq));
            gw_q.add_outer(1.0, &zq_bar, q);
            gb_q.axpy(1.0, &zq_bar);
            let mut q_bar = adj.q.clone();
            q_bar.axpy(1.0, &w_q.tr_mul_vec(&zq_bar));
            Ok(State { p: p_bar, q: q_bar })
        }
        (
            Layer::General { .. },
            Layer::General {
                lower: gl,
                w: gw,
                b: gb,
                eta: geta,
            },
        ) => {
            let n = layer.n();
            let params = layer.to_params();
            let lin = GeneralLinearization::new(layer, act, h, s_in, s_out)?;
            // (I - h K_pp)^T lambda = p_bar+ + h K_qp^T q_bar+
            let mut rhs = adj.p.clone();
            rhs.axpy(h, &lin.kqp.tr_mul_vec(&adj.q));
            let lambda = lin.correction.transpose().solve(&rhs)?;

            let z = s_out.p.concat(&s_in.q);
            let pre = params.preactivation(&z);
            let s = act.apply(&pre);
            let mut g = params.w().tr_mul_vec(&s);
            g.axpy(1.0, params.eta());
            // adjoint of v = J g
            let v_bar = lambda.concat(&adj.q).scale(h);
            let d = lower_dim(gl);
            for i in 0..d {
                for k in 0..i {
                    let dj = v_bar[i] * g[k] - v_bar[k] * g[i];
                    gl.set(i, k, gl.get(i, k) + dj);
                }
            }
            let g_bar = params.j().tr_mul_vec(&v_bar);
            geta.axpy(1.0, &g_bar);
            gw.add_outer(1.0, &s, &g_bar);
            let pre_bar = params.w().mul_vec(&g_bar).hadamard(&act.apply_prime(&pre));
            gw.add_outer(1.0, &pre_bar, &z);
            gb.axpy(1.0, &pre_bar);
            let z_bar = params.w().tr_mul_vec(&pre_bar);
            let mut q_bar = adj.q.clone();
            q_bar.axpy(1.0, &z_bar.segment(n, n));
            Ok(State { p: lambda, q: q_bar })
        }
        (layer, grads) => Err(Error::WrongStructure {
            expected: layer.structure().name(),
            found: grads.structure().name(),
        }),
    }
}

fn lower_dim(m: &Matrix) -> usize {
    m.rows()
}

/// Reverse pass over one trajectory. `adj_out` is the loss gradient with
/// respect to the final state. Returns the parameter gradients and the
/// adjoint of the initial state.
pub fn backward(model: &HdnnModel, trajectory: &[State], adj_out: &State) -> Result<(ParamGrads, State)> {
    check_dim("trajectory length", model.depth() + 1, trajectory.len())?;
    let mut grads = ParamGrads::zeros_like(model);
    let mut adj = adj_out.clone();
    for l in (0..model.depth()).rev() {
        adj = layer_backward(
            &model.layers()[l],
            model.activation(),
            model.h(),
            &trajectory[l],
            &trajectory[l + 1],
            &adj,
            &mut grads.layers[l],
        )
        .map_err(|e| e.at_layer(l))?;
    }
    Ok((grads, adj))
}

/// Batch-averaged gradients of a loss on the restricted flow. `loss_grad`
/// receives the sample index and `q_N` and returns `dL/dq_N` for that
/// sample. Per-sample work runs in parallel; the reduction is sequential in
/// sample order, so the result does not depend on thread count.
pub fn backprop<F>(model: &HdnnModel, xi_batch: &[Vector], loss_grad: F, cfg: &FixedPointConfig) -> Result<ParamGrads>
where
    F: Fn(usize, &Vector) -> Vector + Sync,
{
    let per_sample = xi_batch
        .par_iter()
        .enumerate()
        .map(|(i, xi)| {
            let traj = flow(model, &inject(xi), cfg)?;
            let q_bar = loss_grad(i, &traj[model.depth()].q);
            let adj = State {
                p: Vector::zeros(model.n()),
                q: q_bar,
            };
            Ok(backward(model, &traj, &adj)?.0.flatten())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0; model.num_params()];
    for g in &per_sample {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    let scale = 1.0 / xi_batch.len().max(1) as f64;
    total.iter_mut().for_each(|t| *t *= scale);
    Ok(ParamGrads::from_flat(model, &total))
}

/// Pre-activations of one step, in the order the activation sees them.
pub fn layer_preactivations(layer: &Layer, s_in: &State, s_out: &State) -> Vector {
    match layer {
        Layer::Theorem1 { w, b, .. } => {
            let mut z = w.mul_vec(&s_out.p);
            z.axpy(1.0, b);
            z
        }
        Layer::BlockExplicit { w_p, w_q, b_p, b_q, .. } => {
            let mut zq = w_q.mul_vec(&s_in.q);
            zq.axpy(1.0, b_q);
            let mut zp = w_p.mul_vec(&s_out.p);
            zp.axpy(1.0, b_p);
            zq.concat(&zp)
        }
        Layer::General { .. } => layer.to_params().preactivation(&s_out.p.concat(&s_in.q)),
    }
}

fn trajectory_preactivations(model: &HdnnModel, traj: &[State]) -> Vec<f64> {
    model
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(l, layer)| layer_preactivations(layer, &traj[l], &traj[l + 1]).into_vec())
        .collect()
}

/// Settings for [`fd_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdCheckConfig {
    /// Step of the five-point central stencil.
    pub step: f64,
    /// Coordinates checked; all of them if the model has no more than this.
    pub max_coords: usize,
    /// Kinked activations: coordinates whose perturbed forward passes bring
    /// any pre-activation within this distance of the kink, or across it,
    /// are excluded.
    pub kink_margin: f64,
    /// Relative error denominators are floored at this fraction of the
    /// largest analytic gradient entry.
    pub scale_floor: f64,
}

impl Default for FdCheckConfig {
    fn default() -> Self {
        FdCheckConfig {
            step: 1e-3,
            max_coords: 200,
            kink_margin: 1e-4,
            scale_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub excluded: Vec<usize>,
    pub max_rel_err: f64,
    /// Parameter index of the largest relative error.
    pub worst: Option<usize>,
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compares [`backward`] against five-point central differences of
/// `L = |phi(xi) - y|^2 / 2` with a target `y` drawn from `seed`.
pub fn fd_check(
    model: &HdnnModel,
    xi: &Vector,
    seed: u64,
    cfg: &FdCheckConfig,
    fp: &FixedPointConfig,
) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.n();
    check_dim("xi", n, xi.len())?;
    let target = Vector::from_vec((0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect());
    let kinked = model.activation().has_kink();

    let evaluate = |m: &HdnnModel| -> Result<(f64, Vec<State>, Vec<f64>)> {
        let traj = flow(m, &inject(xi), fp)?;
        let r = traj[m.depth()].q.sub(&target);
        let pre = if kinked {
            trajectory_preactivations(m, &traj)
        } else {
            Vec::new()
        };
        Ok((0.5 * r.dot(&r), traj, pre))
    };

    let (_, traj, base_pre) = evaluate(model)?;
    let residual = traj[model.depth()].q.sub(&target);
    let adj = State {
        p: Vector::zeros(n),
        q: residual,
    };
    let analytic = backward(model, &traj, &adj)?.0.flatten();
    let floor = cfg.scale_floor * analytic.iter().fold(0.0_f64, |m, a| m.max(a.abs()));

    let total = analytic.len();
    let coords: Vec<usize> = if total <= cfg.max_coords {
        (0..total).collect()
    } else {
        let mut idx = sample(&mut rng, total, cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let theta = model.params_vec();
    let mut entries = Vec::with_capacity(coords.len());
    let mut excluded = Vec::new();
    let mut probe = model.clone();
    'coords: for &k in &coords {
        let mut losses = [0.0; 4];
        for (slot, offset) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
            let mut t = theta.clone();
            t[k] += offset * cfg.step;
            probe.set_params(&t)?;
            let (loss, _, pre) = evaluate(&probe)?;
            let near_kink = pre.iter().zip(&base_pre).any(|(z, z0)| {
                z.abs() < cfg.kink_margin || z0.abs() < cfg.kink_margin || z.signum() != z0.signum()
            });
            if near_kink {
                excluded.push(k);
                continue 'coords;
            }
            losses[slot] = loss;
        }
        let [l2, l1, m1, m2] = losses;
        let fd = (-l2 + 8.0 * l1 - 8.0 * m1 + m2) / (12.0 * cfg.step);
        let a = analytic[k];
        entries.push(FdEntry {
            index: k,
            analytic: a,
            fd,
            rel_err: relative_error(a, fd, floor),
        });
    }
    let (max_rel_err, worst) = entries.iter().fold((0.0, None), |(m, w), e| {
        if e.rel_err > m {
            (e.rel_err, Some(e.index))
        } else {
            (m, w)
        }
    });
    Ok(FdReport {
        entries,
        excluded,
        max_rel_err,
        worst,
    })
}

/// Default acceptance threshold of [`fd_check`] for an activation.
pub fn fd_threshold(act: Activation) -> f64 {
    if act.has_kink() {
        1e-3
    } else {
        1e-5
    }
}

/// Structures for which every backward product has unit determinant.
pub fn has_unit_determinant(tag: StructureTag) -> bool {
    tag.is_explicit()
}
