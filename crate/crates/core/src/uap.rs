//! Shallow sums `g(x) = sum_j A_j sigma(W_j x + b_j)`, their exchange with
//! THEOREM1 networks, full-rank repair, and affine output heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::hamiltonian::{HdnnModel, Layer, StructureTag};
use crate::integrator::{restricted_flow, FixedPointConfig};
use crate::numerics::{Activation, Matrix, Vector};
use crate::training::BoxDomain;

/// Resampling budget of [`rank_repair`].
pub const MAX_REPAIR_ATTEMPTS: usize = 16;
/// Relative residual below which a row counts as dependent.
const RANK_TOL: f64 = 1e-10;
/// Repaired matrices must satisfy `sigma_min >= MIN_REPAIRED_RATIO * sigma_max`.
const MIN_REPAIRED_RATIO: f64 = 1e-10;
/// Acceptance tolerance of the image form `A_j = h X W_j^T`.
const IMAGE_FORM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ShallowTerm {
    pub a: Matrix,
    pub w: Matrix,
    pub b: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShallowSum {
    terms: Vec<ShallowTerm>,
    activation: Activation,
}

impl ShallowSum {
    pub fn new(terms: Vec<ShallowTerm>, activation: Activation) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(Error::Config("shallow sum needs at least one term".into()));
        };
        let n = first.a.rows();
        for t in &terms {
            for m in [&t.a, &t.w] {
                check_dim("shallow term rows", n, m.rows())?;
                check_dim("shallow term cols", n, m.cols())?;
            }
            check_dim("shallow term bias", n, t.b.len())?;
            if !(t.a.is_finite() && t.w.is_finite() && t.b.is_finite()) {
                return Err(Error::NonFinite("shallow term"));
            }
        }
        Ok(ShallowSum { terms, activation })
    }

    pub fn n(&self) -> usize {
        self.terms[0].a.rows()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[ShallowTerm] {
        &self.terms
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }
}

/// Evaluates the sum, accumulating terms in order.
pub fn shallow_eval(g: &ShallowSum, x: &Vector) -> Result<Vector> {
    check_dim("shallow_eval input", g.n(), x.len())?;
    let mut out = Vector::zeros(g.n());
    for t in &g.terms {
        let mut z = t.w.mul_vec(x);
        z.axpy(1.0, &t.b);
        out.axpy(1.0, &t.a.mul_vec(&g.activation.apply(&z)));
    }
    Ok(out)
}

/// Shallow-sum form of the restricted flow of a THEOREM1 model: terms
/// `(h X_j W_j^T, W_j, W_j r_j + b_j)` with `r_j` the accumulated shifts
/// `h X_i^T eta_i`, `i <= j`.
pub fn to_shallow_sum(model: &HdnnModel) -> Result<ShallowSum> {
    if model.structure() != StructureTag::Theorem1 {
        return Err(Error::WrongStructure {
            expected: StructureTag::Theorem1.name(),
            found: model.structure().name(),
        });
    }
    let h = model.h();
    let mut shift = Vector::zeros(model.n());
    let mut terms = Vec::with_capacity(model.depth());
    for layer in model.layers() {
        let Layer::Theorem1 { x, w, b, eta } = layer else {
            unreachable!("structure checked above")
        };
        shift.axpy(h, &x.tr_mul_vec(eta));
        let mut d = w.mul_vec(&shift);
        d.axpy(1.0, b);
        terms.push(ShallowTerm {
            a: x.mul(&w.transpose()).scale(h),
            w: w.clone(),
            b: d,
        });
    }
    ShallowSum::new(terms, model.activation())
}

/// Builds a THEOREM1 model with a shared `X` whose restricted flow equals `g`.
/// Requires every `A_j` to equal `h X W_j^T`; biases of the model are zero.
pub fn from_shallow_sum(g: &ShallowSum, h: f64, x: &Matrix) -> Result<HdnnModel> {
    let n = g.n();
    check_dim("X rows", n, x.rows())?;
    check_dim("X cols", n, x.cols())?;
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let certificate = g
        .terms
        .iter()
        .map(|t| {
            let image = x.mul(&t.w.transpose()).scale(h);
            t.a.max_abs_diff(&image) / t.a.max_abs().max(1.0)
        })
        .fold(0.0, f64::max);
    if certificate > IMAGE_FORM_TOL {
        return Err(Error::NotRepresentable { certificate });
    }
    let shift_map = x.transpose().scale(h).lu();
    if shift_map.is_singular() {
        return Err(Error::Singular);
    }
    let mut prev = Vector::zeros(n);
    let mut layers = Vec::with_capacity(g.len());
    for (term, t) in g.terms.iter().enumerate() {
        let lu = t.w.lu();
        if lu.is_singular() {
            return Err(Error::SingularW { term });
        }
        let r = lu.solve(&t.b)?;
        let eta = shift_map.solve(&r.sub(&prev))?;
        prev = r;
        layers.push(Layer::Theorem1 {
            x: x.clone(),
            w: t.w.clone(),
            b: Vector::zeros(n),
            eta,
        });
    }
    HdnnModel::new(n, h, g.activation, StructureTag::Theorem1, layers)
}

#[derive(Clone, Debug)]
pub struct RankRepairReport {
    pub repaired: ShallowSum,
    /// Norms of the added rows, per term (empty for full-rank terms).
    pub perturbation_norms: Vec<Vec<f64>>,
    /// Per-term cap on each added row's norm; zero for full-rank terms.
    pub bound_used: Vec<f64>,
    /// `(term, number of dependent rows)`.
    pub deficient_terms: Vec<(usize, usize)>,
    /// Deficient terms with `A = 0`, repaired with unit-norm rows.
    pub zero_a_terms: Vec<usize>,
    /// Sampled sup of `|g_repaired - g|` over the domain.
    pub sup_deviation: f64,
    /// Direction draws used, including the accepted one.
    pub attempts: usize,
}

/// Row-pivoted Gram–Schmidt on the rows of `w`: returns an orthonormal basis
/// of the row space and the indices of the dependent rows.
fn row_space(w: &Matrix) -> (Vec<Vector>, Vec<usize>) {
    let n = w.rows();
    let mut residual: Vec<Vector> = (0..n).map(|i| w.row(i)).collect();
    let scale = residual.iter().fold(0.0_f64, |m, r| m.max(r.norm()));
    let mut basis = Vec::new();
    let mut remaining: Vec<usize> = (0..n).collect();
    while !remaining.is_empty() {
        let (pos, &best) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| residual[*a.1].norm().total_cmp(&residual[*b.1].norm()))
            .unwrap();
        let norm = residual[best].norm();
        if scale == 0.0 || norm <= RANK_TOL * scale {
            break;
        }
        let q = residual[best].scale(1.0 / norm);
        remaining.remove(pos);
        for &i in &remaining {
            let c = residual[i].dot(&q);
            residual[i].axpy(-c, &q);
        }
        basis.push(q);
    }
    (basis, remaining)
}

/// Sup-norm of `|g1 - g2|` on the domain's deterministic sample.
pub fn sup_deviation(g1: &ShallowSum, g2: &ShallowSum, domain: &BoxDomain) -> Result<f64> {
    let mut worst = 0.0_f64;
    for x in domain.sup_sample() {
        let d = shallow_eval(g1, &x)?.sub(&shallow_eval(g2, &x)?);
        worst = worst.max(d.norm());
    }
    Ok(worst)
}

/// Makes every `W_j` nonsingular while moving `g` by at most `eps` in sup
/// norm over `domain`. Dependent rows of a singular `W_j` receive an added
/// row drawn from the orthogonal complement of the row space, scaled to the
/// cap `eps / (r n~ sqrt(n) L_sigma |x|_inf max_p |a^(p)|)`, where `r` is the
/// number of dependent rows, `n~` the number of singular terms and `a^(p)`
/// the rows of `A_j`.
pub fn rank_repair(g: &ShallowSum, eps: f64, domain: &BoxDomain, seed: u64) -> Result<RankRepairReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("repair tolerance must be positive, got {eps}")));
    }
    let n = g.n();
    check_dim("domain", n, domain.n())?;
    let analysed: Vec<(Vec<Vector>, Vec<usize>)> = g.terms.iter().map(|t| row_space(&t.w)).collect();
    let deficient_terms: Vec<(usize, usize)> = analysed
        .iter()
        .enumerate()
        .filter(|(_, (_, dep))| !dep.is_empty())
        .map(|(j, (_, dep))| (j, dep.len()))
        .collect();
    let n_tilde = deficient_terms.len() as f64;
    let lip = g.activation.lipschitz();
    let x_sup = domain.sup_norm();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = g.terms.clone();
    let mut perturbation_norms = vec![Vec::new(); g.len()];
    let mut bound_used = vec![0.0; g.len()];
    let mut zero_a_terms = Vec::new();
    let mut attempts = 0;

    for &(j, r) in &deficient_terms {
        let (basis, dependent) = &analysed[j];
        let a_max = (0..n).map(|p| g.terms[j].a.row(p).norm()).fold(0.0, f64::max);
        let cap = if a_max == 0.0 {
            zero_a_terms.push(j);
            1.0
        } else {
            eps / (r as f64 * n_tilde * (n as f64).sqrt() * lip * x_sup * a_max)
        };
        bound_used[j] = cap;
        let mut done = false;
        for _ in 0..MAX_REPAIR_ATTEMPTS {
            attempts += 1;
            let mut w = g.terms[j].w.clone();
            let mut norms = Vec::with_capacity(r);
            for &row in dependent {
                let mut added = complement_direction(basis, n, &mut rng).scale(cap);
                while added.norm() > cap {
                    added = added.scale(1.0 - f64::EPSILON);
                }
                for c in 0..n {
                    w.set(row, c, w.get(row, c) + added[c]);
                }
                norms.push(added.norm());
            }
            let (lo, hi) = w.svd_extremes();
            if lo >= MIN_REPAIRED_RATIO * hi && lo > 0.0 {
                terms[j].w = w;
                perturbation_norms[j] = norms;
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::RepairFailed {
                term: j,
                attempts: MAX_REPAIR_ATTEMPTS,
            });
        }
    }
    let repaired = ShallowSum::new(terms, g.activation)?;
    let sup = sup_deviation(&repaired, g, domain)?;
    Ok(RankRepairReport {
        repaired,
        perturbation_norms,
        bound_used,
        deficient_terms,
        zero_a_terms,
        sup_deviation: sup,
        attempts,
    })
}

/// Unit vector orthogonal to `basis`, from a Gaussian draw.
fn complement_direction(basis: &[Vector], n: usize, rng: &mut ChaCha8Rng) -> Vector {
    loop {
        let mut v = Vector::from_vec((0..n).map(|_| StandardNormal.sample(rng)).collect());
        // two passes keep the projection orthogonal to round-off
        for _ in 0..2 {
            for q in basis {
                let c = v.dot(q);
                v.axpy(-c, q);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            return v.scale(1.0 / norm);
        }
    }
}

/// Affine head `v -> W_o^T v + b_o` with `W_o` of shape `n x r`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputHead {
    pub w_o: Matrix,
    pub b_o: Vector,
}

impl OutputHead {
    pub fn new(w_o: Matrix, b_o: Vector) -> Result<Self> {
        check_dim("head bias", w_o.cols(), b_o.len())?;
        if !(w_o.is_finite() && b_o.is_finite()) {
            return Err(Error::NonFinite("output head"));
        }
        Ok(OutputHead { w_o, b_o })
    }

    pub fn identity(n: usize) -> Self {
        OutputHead {
            w_o: Matrix::identity(n),
            b_o: Vector::zeros(n),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_o.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_o.cols()
    }

    /// Lipschitz constant in the Euclidean norm.
    pub fn lipschitz(&self) -> f64 {
        self.w_o.norm2()
    }

    pub fn num_params(&self) -> usize {
        self.w_o.rows() * self.w_o.cols() + self.b_o.len()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w_o.as_slice());
        out.extend_from_slice(self.b_o.as_slice());
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let nw = self.w_o.rows() * self.w_o.cols();
        let nb = self.b_o.len();
        self.w_o.as_mut_slice().copy_from_slice(&src[..nw]);
        self.b_o.as_mut_slice().copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }
}

pub fn head_apply(head: &OutputHead, v: &Vector) -> Result<Vector> {
    check_dim("head input", head.input_dim(), v.len())?;
    let mut out = head.w_o.tr_mul_vec(v);
    out.axpy(1.0, &head.b_o);
    Ok(out)
}

/// `xi -> head(phi(xi))`.
pub fn head_compose<'a>(
    model: &'a HdnnModel,
    head: &'a OutputHead,
    cfg: &'a FixedPointConfig,
) -> impl Fn(&Vector) -> Result<Vector> + 'a {
    move |xi| head_apply(head, &restricted_flow(model, xi, cfg)?)
}
