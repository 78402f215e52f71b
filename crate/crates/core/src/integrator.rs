//! Semi-implicit (symplectic) Euler layers and the network flow.
//!
//! One layer maps `(p, q)` to
//!
//! ```text
//! (p+, q+) = (p, q) + h J (W^T sigma(W (p+, q) + b) + eta)
//! ```
//!
//! The gradient is evaluated at the mixed point `(p+, q)`, so only `p+` is
//! implicit; `q+` follows explicitly once `p+` is known. For the structured
//! tags `p+` does not depend on itself and the step is closed form.

use crate::error::{check_dim, Error, Result};
use crate::hamiltonian::{vector_field, HdnnModel, Layer, LayerParams};
use crate::numerics::{Activation, Matrix, Vector};

/// Canonical coordinates of the network state.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub p: Vector,
    pub q: Vector,
}

impl State {
    pub fn new(p: Vector, q: Vector) -> Result<Self> {
        check_dim("state blocks", p.len(), q.len())?;
        if !(p.is_finite() && q.is_finite()) {
            return Err(Error::NonFinite("state"));
        }
        Ok(State { p, q })
    }

    pub fn zeros(n: usize) -> Self {
        State {
            p: Vector::zeros(n),
            q: Vector::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    /// `x = (p, q)`
    pub fn to_vector(&self) -> Vector {
        self.p.concat(&self.q)
    }

    pub fn from_vector(x: &Vector) -> Result<Self> {
        if !x.len().is_multiple_of(2) {
            return Err(Error::Dimension {
                context: "state vector must have even length",
                expected: x.len() + 1,
                found: x.len(),
            });
        }
        let n = x.len() / 2;
        Ok(State {
            p: x.segment(0, n),
            q: x.segment(n, n),
        })
    }

    pub fn max_abs_diff(&self, other: &State) -> f64 {
        self.p.max_abs_diff(&other.p).max(self.q.max_abs_diff(&other.q))
    }
}

/// Settings for the implicit `p`-update of general layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointConfig {
    /// Absolute tolerance on the max-norm of successive iterates.
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation factor in `(0, 1]`.
    pub damping: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            tol: 1e-12,
            max_iter: 100,
            damping: 1.0,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("fixed-point tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("fixed-point max_iter must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        Ok(())
    }
}

/// `p`-rows of `J g(p+, q)`.
fn p_field(params: &LayerParams, act: Activation, p_next: &Vector, q: &Vector) -> Vector {
    let n = q.len();
    let g = params.grad_unchecked(act, &p_next.concat(q));
    params.j().mul_vec(&g).segment(0, n)
}

/// Solves the implicit update on dense weights by damped fixed-point
/// iteration. Works for any tag; the explicit tags converge in one sweep.
pub fn sie_step_implicit(
    params: &LayerParams,
    act: Activation,
    h: f64,
    s: &State,
    cfg: &FixedPointConfig,
) -> Result<State> {
    let n = params.n();
    check_dim("state", n, s.n())?;
    let mut p_next = s.p.clone();
    let mut update = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut target = s.p.clone();
        target.axpy(h, &p_field(params, act, &p_next, &s.q));
        let mut candidate = p_next.scale(1.0 - cfg.damping);
        candidate.axpy(cfg.damping, &target);
        update = candidate.max_abs_diff(&p_next);
        p_next = candidate;
        if !update.is_finite() {
            break;
        }
        if update <= cfg.tol {
            break;
        }
    }
    let mut residual = s.p.clone();
    residual.axpy(h, &p_field(params, act, &p_next, &s.q));
    let residual = residual.max_abs_diff(&p_next);
    if !(update <= cfg.tol && residual <= cfg.tol.max(16.0 * f64::EPSILON * p_next.norm_inf())) {
        return Err(Error::NoConvergence {
            iterations,
            residual: if residual.is_finite() { residual } else { update },
        });
    }
    let g = params.grad_unchecked(act, &p_next.concat(&s.q));
    let v = params.j().mul_vec(&g);
    let mut q_next = s.q.clone();
    q_next.axpy(h, &v.segment(n, n));
    Ok(State { p: p_next, q: q_next })
}

/// One layer update. Structured tags use their closed forms; general layers
/// are solved implicitly.
pub fn sie_step(layer: &Layer, act: Activation, h: f64, s: &State, cfg: &FixedPointConfig) -> Result<State> {
    check_dim("state", layer.n(), s.n())?;
    match layer {
        Layer::General { .. } => sie_step_implicit(&layer.to_params(), act, h, s, cfg),
        Layer::Theorem1 { x, w, b, eta } => {
            // p+ = p + h X^T eta~ ;  q+ = q + h X W~^T sigma(W~ p+ + b~)
            let mut p = s.p.clone();
            p.axpy(h, &x.tr_mul_vec(eta));
            let mut z = w.mul_vec(&p);
            z.axpy(1.0, b);
            let u = w.tr_mul_vec(&act.apply(&z));
            let mut q = s.q.clone();
            q.axpy(h, &x.mul_vec(&u));
            Ok(State { p, q })
        }
        Layer::BlockExplicit {
            x,
            w_p,
            w_q,
            b_p,
            b_q,
            eta_p,
            eta_q,
        } => {
            // p+ = p - h X^T (W_q^T sigma(W_q q + b_q) + eta_q)
            let mut zq = w_q.mul_vec(&s.q);
            zq.axpy(1.0, b_q);
            let mut gq = w_q.tr_mul_vec(&act.apply(&zq));
            gq.axpy(1.0, eta_q);
            let mut p = s.p.clone();
            p.axpy(-h, &x.tr_mul_vec(&gq));
            // q+ = q + h X (W_p^T sigma(W_p p+ + b_p) + eta_p)
            let mut zp = w_p.mul_vec(&p);
            zp.axpy(1.0, b_p);
            let mut gp = w_p.tr_mul_vec(&act.apply(&zp));
            gp.axpy(1.0, eta_p);
            let mut q = s.q.clone();
            q.axpy(h, &x.mul_vec(&gp));
            Ok(State { p, q })
        }
    }
}

/// Full trajectory `x_0, ..., x_N` of the network.
pub fn flow(model: &HdnnModel, x0: &State, cfg: &FixedPointConfig) -> Result<Vec<State>> {
    check_dim("initial state", model.n(), x0.n())?;
    let mut traj = Vec::with_capacity(model.depth() + 1);
    traj.push(x0.clone());
    for (j, layer) in model.layers().iter().enumerate() {
        let next = sie_step(layer, model.activation(), model.h(), &traj[j], cfg).map_err(|e| e.at_layer(j))?;
        traj.push(next);
    }
    Ok(traj)
}

/// `xi -> (xi, 0)`
pub fn inject(xi: &Vector) -> State {
    State {
        p: xi.clone(),
        q: Vector::zeros(xi.len()),
    }
}

/// `(p, q) -> q`
pub fn project(s: &State) -> Vector {
    s.q.clone()
}

/// The restricted flow `xi -> q_N` from initial condition `(xi, 0)`.
pub fn restricted_flow(model: &HdnnModel, xi: &Vector, cfg: &FixedPointConfig) -> Result<Vector> {
    let traj = flow(model, &inject(xi), cfg)?;
    Ok(project(traj.last().expect("trajectory is never empty")))
}

/// Explicit Euler step `x + h J dH/dx (x)`; not symplectic.
pub fn forward_euler_step(params: &LayerParams, act: Activation, h: f64, s: &State) -> Result<State> {
    let x = s.to_vector();
    let mut next = x.clone();
    next.axpy(h, &vector_field(params, act, &x)?);
    State::from_vector(&next)
}

/// A residual layer `x+ = x + h (-x + sigma(W x + b))`: explicit Euler of a
/// leaky, non-Hamiltonian field. With `h = 1` it is a plain feed-forward
/// layer `sigma(W x + b)`. Used as the vanishing-gradient contrast.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualLayer {
    pub w: Matrix,
    pub b: Vector,
}

impl ResidualLayer {
    pub fn step(&self, act: Activation, h: f64, x: &Vector) -> Result<Vector> {
        check_dim("residual layer input", self.w.cols(), x.len())?;
        let mut z = self.w.mul_vec(x);
        z.axpy(1.0, &self.b);
        let s = act.apply(&z);
        let mut out = x.scale(1.0 - h);
        out.axpy(h, &s);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{coupling_matrix, StructureTag};
    use crate::numerics::random_vector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_theorem1(x: f64, w: f64, b: f64, eta: f64) -> Layer {
        let m = |v| Matrix::new(1, 1, vec![v]).unwrap();
        let v = |v| Vector::new(vec![v]).unwrap();
        Layer::Theorem1 {
            x: m(x),
            w: m(w),
            b: v(b),
            eta: v(eta),
        }
    }

    fn st(p: f64, q: f64) -> State {
        State::new(Vector::new(vec![p]).unwrap(), Vector::new(vec![q]).unwrap()).unwrap()
    }

    const CFG: FixedPointConfig = FixedPointConfig {
        tol: 1e-12,
        max_iter: 100,
        damping: 1.0,
    };

    #[test]
    fn zero_step_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for tag in [StructureTag::General, StructureTag::Theorem1, StructureTag::BlockExplicit] {
            let layer = Layer::random(tag, 3, 1.0, &mut rng);
            let s = State::from_vector(&random_vector(&mut rng, 6, 1.0)).unwrap();
            let out = sie_step(&layer, Activation::Tanh, 0.0, &s, &CFG).unwrap();
            assert_eq!(out, s);
        }
    }

    #[test]
    fn scalar_theorem1_step() {
        let layer = scalar_theorem1(1.0, 1.0, 0.0, 0.0);
        let out = sie_step(&layer, Activation::Tanh, 0.5, &st(1.0, 0.0), &CFG).unwrap();
        assert_eq!(out.p[0], 1.0);
        // 0.5 * tanh(1)
        assert!((out.q[0] - 0.38079707797788243).abs() < 1e-16);

        let implicit = sie_step_implicit(&layer.to_params(), Activation::Tanh, 0.5, &st(1.0, 0.0), &CFG).unwrap();
        assert!(implicit.max_abs_diff(&out) < 1e-12);
    }

    #[test]
    fn flow_examples() {
        let layer = scalar_theorem1(1.0, 1.0, 0.0, 0.0);
        let single =
            HdnnModel::new(1, 0.5, Activation::Tanh, StructureTag::Theorem1, vec![layer.clone()]).unwrap();
        let traj = flow(&single, &st(1.0, 0.0), &CFG).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj[1], sie_step(&layer, Activation::Tanh, 0.5, &st(1.0, 0.0), &CFG).unwrap());
        let xi = Vector::new(vec![1.0]).unwrap();
        let phi = restricted_flow(&single, &xi, &CFG).unwrap();
        assert!((phi[0] - 0.38079707797788243).abs() < 1e-16);

        // depth 2: second layer X=2, W=-1, b=0.5, eta=0.25
        let second = scalar_theorem1(2.0, -1.0, 0.5, 0.25);
        let two = HdnnModel::new(1, 0.5, Activation::Tanh, StructureTag::Theorem1, vec![layer, second]).unwrap();
        let traj = flow(&two, &st(1.0, 0.0), &CFG).unwrap();
        // p2 = 1 + 0.5*2*0.25 = 1.25; q2 = q1 + 0.5*2*(-1)*tanh(-1.25 + 0.5)
        let q1 = 0.5 * 1f64.tanh();
        let q2 = q1 - (-0.75f64).tanh();
        assert_eq!(traj[2].p[0], 1.25);
        assert!((traj[2].q[0] - q2).abs() < 1e-15);

        let zero = HdnnModel::zeros(StructureTag::General, 2, 5, 0.3, Activation::Tanh).unwrap();
        let x0 = State::from_vector(&Vector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        assert!(flow(&zero, &x0, &CFG).unwrap().iter().all(|s| *s == x0));
        assert_eq!(restricted_flow(&zero, &Vector::new(vec![1.0, 2.0]).unwrap(), &CFG).unwrap(), Vector::zeros(2));
    }

    #[test]
    fn inject_project() {
        let xi = Vector::new(vec![1.0, 2.0]).unwrap();
        let s = inject(&xi);
        assert_eq!(s.p, xi);
        assert_eq!(s.q, Vector::zeros(2));
        assert_eq!(project(&s), Vector::zeros(2));
        let s = State::new(xi.clone(), Vector::new(vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(project(&s).as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn no_convergence_is_reported() {
        // strongly expansive implicit map: h * |K_pp| >> 1
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = Layer::random(StructureTag::General, 2, 3.0, &mut rng);
        let s = State::from_vector(&random_vector(&mut rng, 4, 1.0)).unwrap();
        let cfg = FixedPointConfig {
            max_iter: 5,
            ..CFG
        };
        let err = sie_step(&layer, Activation::Identity, 5.0, &s, &cfg).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 5, .. }), "{err:?}");

        let model = HdnnModel::new(2, 5.0, Activation::Identity, StructureTag::General, vec![layer]).unwrap();
        let err = flow(&model, &s, &cfg).unwrap_err();
        assert!(matches!(err, Error::Layer { index: 0, .. }));
    }

    #[test]
    fn config_validation() {
        assert!(FixedPointConfig::default().validate().is_ok());
        assert!(FixedPointConfig { tol: 0.0, ..CFG }.validate().is_err());
        assert!(FixedPointConfig { max_iter: 0, ..CFG }.validate().is_err());
        assert!(FixedPointConfig { damping: 1.5, ..CFG }.validate().is_err());
    }

    #[test]
    fn forward_euler_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = Layer::random(StructureTag::General, 2, 1.0, &mut rng).to_params();
        let s = State::from_vector(&random_vector(&mut rng, 4, 1.0)).unwrap();
        assert_eq!(forward_euler_step(&params, Activation::Tanh, 0.0, &s).unwrap(), s);
        let zero = crate::hamiltonian::LayerParams::zeros(2);
        assert_eq!(forward_euler_step(&zero, Activation::Tanh, 0.7, &s).unwrap(), s);

        // H = eta^T x with canonical J: field (-eta_q, eta_p)
        let lin = LayerParams::new(
            coupling_matrix(&Matrix::identity(1)),
            Matrix::zeros(2, 2),
            Vector::zeros(2),
            Vector::new(vec![2.0, 3.0]).unwrap(),
        )
        .unwrap();
        let out = forward_euler_step(&lin, Activation::Tanh, 0.5, &st(1.0, 1.0)).unwrap();
        assert_eq!((out.p[0], out.q[0]), (1.0 - 0.5 * 3.0, 1.0 + 0.5 * 2.0));
    }

    #[test]
    fn step_defect_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layer = Layer::random(StructureTag::General, 2, 0.5, &mut rng);
        let params = layer.to_params();
        let s = State::from_vector(&random_vector(&mut rng, 4, 1.0)).unwrap();
        let defect = |h: f64| {
            let out = sie_step(&layer, Activation::Tanh, h, &s, &CFG).unwrap().to_vector();
            let euler = forward_euler_step(&params, Activation::Tanh, h, &s).unwrap().to_vector();
            out.sub(&euler).norm()
        };
        let (d1, d2) = (defect(0.02), defect(0.01));
        let ratio = d1 / d2;
        assert!((3.5..4.5).contains(&ratio), "halving h scaled defect by {ratio}");
    }

    proptest! {
        #[test]
        fn implicit_solve_matches_closed_forms(
            seed in any::<u64>(),
            n in 1usize..=8,
            h in 0.0f64..=0.5,
            block in any::<bool>(),
        ) {
            let tag = if block { StructureTag::BlockExplicit } else { StructureTag::Theorem1 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = Layer::random(tag, n, 1.0, &mut rng);
            let s = State::from_vector(&random_vector(&mut rng, 2 * n, 1.0)).unwrap();
            let closed = sie_step(&layer, Activation::Tanh, h, &s, &CFG).unwrap();
            let implicit = sie_step_implicit(&layer.to_params(), Activation::Tanh, h, &s, &CFG).unwrap();
            prop_assert!(closed.max_abs_diff(&implicit) <= 1e-11);
        }
    }
}
