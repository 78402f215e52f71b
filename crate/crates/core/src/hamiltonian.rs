//! The layer Hamiltonian `H(x) = sigma_tilde(W x + b)^T 1 + eta^T x`, its
//! gradient field, and the parameter containers.
//!
//! Two views of a layer coexist. [`LayerParams`] is the dense form
//! `{J, W, b, eta}` acting on the full state `x = (p, q)` of length `2n`.
//! [`Layer`] is the trainable parametrization for one [`StructureTag`]; it
//! stores only free parameters, so skew-symmetry of `J` cannot be broken by
//! an optimizer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::numerics::{random_matrix, Activation, Matrix, Vector};

/// Dense layer weights `{J, W, b, eta}` with `J` skew-symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    j: Matrix,
    w: Matrix,
    b: Vector,
    eta: Vector,
}

impl LayerParams {
    pub fn new(j: Matrix, w: Matrix, b: Vector, eta: Vector) -> Result<Self> {
        let p = LayerParams::from_parts_unchecked(j, w, b, eta)?;
        let deviation = p.j.skew_deviation();
        if deviation > 1e-12 {
            return Err(Error::SkewSymmetry { deviation });
        }
        Ok(p)
    }

    /// Checks dimensions only; `J` may fail to be skew-symmetric. Operations
    /// that rely on skewness re-check it.
    pub fn from_parts_unchecked(j: Matrix, w: Matrix, b: Vector, eta: Vector) -> Result<Self> {
        let dim = j.rows();
        check_dim("J columns", dim, j.cols())?;
        if !dim.is_multiple_of(2) {
            return Err(Error::Dimension {
                context: "state dimension must be even",
                expected: dim + 1,
                found: dim,
            });
        }
        check_dim("W rows", dim, w.rows())?;
        check_dim("W columns", dim, w.cols())?;
        check_dim("b", dim, b.len())?;
        check_dim("eta", dim, eta.len())?;
        Ok(LayerParams { j, w, b, eta })
    }

    pub fn zeros(n: usize) -> Self {
        LayerParams {
            j: Matrix::zeros(2 * n, 2 * n),
            w: Matrix::zeros(2 * n, 2 * n),
            b: Vector::zeros(2 * n),
            eta: Vector::zeros(2 * n),
        }
    }

    /// Half of the state dimension.
    pub fn n(&self) -> usize {
        self.j.rows() / 2
    }

    pub fn j(&self) -> &Matrix {
        &self.j
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    pub fn eta(&self) -> &Vector {
        &self.eta
    }

    fn check_state(&self, x: &Vector) -> Result<()> {
        check_dim("state", 2 * self.n(), x.len())
    }

    /// `W x + b`
    pub(crate) fn preactivation(&self, x: &Vector) -> Vector {
        let mut z = self.w.mul_vec(x);
        z.axpy(1.0, &self.b);
        z
    }

    /// `W^T sigma(W x + b) + eta`, without the dimension check.
    pub(crate) fn grad_unchecked(&self, act: Activation, x: &Vector) -> Vector {
        let s = act.apply(&self.preactivation(x));
        let mut g = self.w.tr_mul_vec(&s);
        g.axpy(1.0, &self.eta);
        g
    }

    /// Hessian of `H` at `x`: `W^T diag(sigma'(W x + b)) W`.
    pub(crate) fn hessian(&self, act: Activation, x: &Vector) -> Matrix {
        let d = act.apply_prime(&self.preactivation(x));
        self.w.transpose().mul(&self.w.scale_rows(&d))
    }
}

/// `sigma_tilde(W x + b)^T 1 + eta^T x`
pub fn hamiltonian_value(params: &LayerParams, act: Activation, x: &Vector) -> Result<f64> {
    params.check_state(x)?;
    let z = params.preactivation(x);
    let mut acc = 0.0;
    for &zi in z.iter() {
        acc += act.sigma_tilde(zi);
    }
    Ok(acc + params.eta.dot(x))
}

/// `dH/dx = W^T sigma(W x + b) + eta`
pub fn hamiltonian_gradient(params: &LayerParams, act: Activation, x: &Vector) -> Result<Vector> {
    params.check_state(x)?;
    Ok(params.grad_unchecked(act, x))
}

/// `J dH/dx`
pub fn vector_field(params: &LayerParams, act: Activation, x: &Vector) -> Result<Vector> {
    let deviation = params.j.skew_deviation();
    if deviation > 1e-12 {
        return Err(Error::SkewSymmetry { deviation });
    }
    let g = hamiltonian_gradient(params, act, x)?;
    Ok(params.j.mul_vec(&g))
}

/// Which parameter subspace a model's layers live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StructureTag {
    /// Any skew `J` and any `W`; the step is implicit in `p`.
    General,
    /// `J = [[0, -X^T], [X, 0]]`, `W = diag(W~, 0)`, `b = (b~, 0)`,
    /// `eta = (0, -eta~)`. The restricted flow is then a shallow sum.
    Theorem1,
    /// `J = [[0, -X^T], [X, 0]]` with block-diagonal `W`; explicit step.
    BlockExplicit,
}

impl StructureTag {
    pub fn name(self) -> &'static str {
        match self {
            StructureTag::General => "GENERAL",
            StructureTag::Theorem1 => "THEOREM1",
            StructureTag::BlockExplicit => "BLOCK_EXPLICIT",
        }
    }

    /// True for the tags with a closed-form, unit-determinant step.
    pub fn is_explicit(self) -> bool {
        !matches!(self, StructureTag::General)
    }
}

impl fmt::Display for StructureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StructureTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GENERAL" => Ok(StructureTag::General),
            "THEOREM1" => Ok(StructureTag::Theorem1),
            "BLOCK_EXPLICIT" => Ok(StructureTag::BlockExplicit),
            _ => Err(Error::Parse(format!("unknown structure tag `{s}`"))),
        }
    }
}

/// Skew block `[[0, -X^T], [X, 0]]`.
pub fn coupling_matrix(x: &Matrix) -> Matrix {
    let n = x.rows();
    let zero = Matrix::zeros(n, n);
    Matrix::from_blocks(&zero, &x.transpose().scale(-1.0), x, &zero)
}

/// One layer's free parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    General {
        /// Only the strictly lower triangle is read; `J = L - L^T`.
        lower: Matrix,
        w: Matrix,
        b: Vector,
        eta: Vector,
    },
    Theorem1 {
        x: Matrix,
        /// Inner weight `W~` acting on `p`.
        w: Matrix,
        b: Vector,
        /// `eta~`; the dense `eta` is `(0, -eta~)`.
        eta: Vector,
    },
    BlockExplicit {
        x: Matrix,
        w_p: Matrix,
        w_q: Matrix,
        b_p: Vector,
        b_q: Vector,
        eta_p: Vector,
        eta_q: Vector,
    },
}

impl Layer {
    pub fn zeros(tag: StructureTag, n: usize) -> Layer {
        let m = || Matrix::zeros(n, n);
        let v = || Vector::zeros(n);
        match tag {
            StructureTag::General => Layer::General {
                lower: Matrix::zeros(2 * n, 2 * n),
                w: Matrix::zeros(2 * n, 2 * n),
                b: Vector::zeros(2 * n),
                eta: Vector::zeros(2 * n),
            },
            StructureTag::Theorem1 => Layer::Theorem1 {
                x: m(),
                w: m(),
                b: v(),
                eta: v(),
            },
            StructureTag::BlockExplicit => Layer::BlockExplicit {
                x: m(),
                w_p: m(),
                w_q: m(),
                b_p: v(),
                b_q: v(),
                eta_p: v(),
                eta_q: v(),
            },
        }
    }

    /// Every free parameter drawn from `U[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(tag: StructureTag, n: usize, scale: f64, rng: &mut R) -> Layer {
        let mut layer = Layer::zeros(tag, n);
        let values: Vec<f64> = (0..layer.num_params())
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        layer.read_params(&values);
        layer
    }

    /// Weight matrices from `U[-scale, scale]`, biases and `eta` zero.
    pub fn init<R: Rng + ?Sized>(tag: StructureTag, n: usize, scale: f64, rng: &mut R) -> Layer {
        let mut mat = |r, c| random_matrix(rng, r, c, scale);
        match tag {
            StructureTag::General => {
                let lower = strictly_lower(&mat(2 * n, 2 * n));
                let w = mat(2 * n, 2 * n);
                Layer::General {
                    lower,
                    w,
                    b: Vector::zeros(2 * n),
                    eta: Vector::zeros(2 * n),
                }
            }
            StructureTag::Theorem1 => {
                let x = mat(n, n);
                let w = mat(n, n);
                Layer::Theorem1 {
                    x,
                    w,
                    b: Vector::zeros(n),
                    eta: Vector::zeros(n),
                }
            }
            StructureTag::BlockExplicit => {
                let x = mat(n, n);
                let w_p = mat(n, n);
                let w_q = mat(n, n);
                Layer::BlockExplicit {
                    x,
                    w_p,
                    w_q,
                    b_p: Vector::zeros(n),
                    b_q: Vector::zeros(n),
                    eta_p: Vector::zeros(n),
                    eta_q: Vector::zeros(n),
                }
            }
        }
    }

    /// A general layer whose `J` is the given skew matrix.
    pub fn general(j: &Matrix, w: Matrix, b: Vector, eta: Vector) -> Result<Layer> {
        let params = LayerParams::new(j.clone(), w, b, eta)?;
        Ok(Layer::General {
            lower: strictly_lower(&params.j),
            w: params.w,
            b: params.b,
            eta: params.eta,
        })
    }

    pub fn structure(&self) -> StructureTag {
        match self {
            Layer::General { .. } => StructureTag::General,
            Layer::Theorem1 { .. } => StructureTag::Theorem1,
            Layer::BlockExplicit { .. } => StructureTag::BlockExplicit,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Layer::General { w, .. } => w.rows() / 2,
            Layer::Theorem1 { x, .. } | Layer::BlockExplicit { x, .. } => x.rows(),
        }
    }

    /// Dense `{J, W, b, eta}` embedding.
    pub fn to_params(&self) -> LayerParams {
        let n = self.n();
        match self {
            Layer::General { lower, w, b, eta } => LayerParams {
                j: lower.sub(&lower.transpose()),
                w: w.clone(),
                b: b.clone(),
                eta: eta.clone(),
            },
            Layer::Theorem1 { x, w, b, eta } => {
                let zero = Matrix::zeros(n, n);
                LayerParams {
                    j: coupling_matrix(x),
                    w: Matrix::from_blocks(w, &zero, &zero, &zero),
                    b: b.concat(&Vector::zeros(n)),
                    eta: Vector::zeros(n).concat(&eta.scale(-1.0)),
                }
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
                let zero = Matrix::zeros(n, n);
                LayerParams {
                    j: coupling_matrix(x),
                    w: Matrix::from_blocks(w_p, &zero, &zero, w_q),
                    b: b_p.concat(b_q),
                    eta: eta_p.concat(eta_q),
                }
            }
        }
    }

    /// Recovers the structured parametrization of dense weights, failing if
    /// they do not lie in the subspace of `tag`.
    pub fn from_params(tag: StructureTag, params: &LayerParams) -> std::result::Result<Layer, String> {
        let n = params.n();
        let j = &params.j;
        let w = &params.w;
        let zero_block = |m: &Matrix, i0, j0| m.block(i0, j0, n, n).max_abs() == 0.0;
        let coupling = || -> std::result::Result<Matrix, String> {
            if !zero_block(j, 0, 0) || !zero_block(j, n, n) {
                return Err("J diagonal blocks must vanish".into());
            }
            let x = j.block(n, 0, n, n);
            if j.block(0, n, n, n).max_abs_diff(&x.transpose().scale(-1.0)) > 1e-12 {
                return Err("J upper-right block must be -X^T".into());
            }
            Ok(x)
        };
        match tag {
            StructureTag::General => {
                if j.skew_deviation() > 1e-12 {
                    return Err("J is not skew-symmetric".into());
                }
                Ok(Layer::General {
                    lower: strictly_lower(j),
                    w: w.clone(),
                    b: params.b.clone(),
                    eta: params.eta.clone(),
                })
            }
            StructureTag::Theorem1 => {
                let x = coupling()?;
                if !zero_block(w, 0, n) || !zero_block(w, n, 0) || !zero_block(w, n, n) {
                    return Err("W must be diag(W~, 0)".into());
                }
                let b_q = params.b.segment(n, n);
                let eta_p = params.eta.segment(0, n);
                if b_q.norm_inf() != 0.0 || eta_p.norm_inf() != 0.0 {
                    return Err("b must be (b~, 0) and eta must be (0, -eta~)".into());
                }
                Ok(Layer::Theorem1 {
                    x,
                    w: w.block(0, 0, n, n),
                    b: params.b.segment(0, n),
                    eta: params.eta.segment(n, n).scale(-1.0),
                })
            }
            StructureTag::BlockExplicit => {
                let x = coupling()?;
                if !zero_block(w, 0, n) || !zero_block(w, n, 0) {
                    return Err("W must be block diagonal".into());
                }
                Ok(Layer::BlockExplicit {
                    x,
                    w_p: w.block(0, 0, n, n),
                    w_q: w.block(n, n, n, n),
                    b_p: params.b.segment(0, n),
                    b_q: params.b.segment(n, n),
                    eta_p: params.eta.segment(0, n),
                    eta_q: params.eta.segment(n, n),
                })
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let n = self.n();
        match self {
            Layer::General { .. } => {
                let d = 2 * n;
                d * (d - 1) / 2 + d * d + 2 * d
            }
            Layer::Theorem1 { .. } => 2 * n * n + 2 * n,
            Layer::BlockExplicit { .. } => 3 * n * n + 4 * n,
        }
    }

    /// Appends the free parameters in their canonical order.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        match self {
            Layer::General { lower, w, b, eta } => {
                let d = lower.rows();
                for i in 0..d {
                    for k in 0..i {
                        out.push(lower.get(i, k));
                    }
                }
                out.extend_from_slice(w.as_slice());
                out.extend_from_slice(b.as_slice());
                out.extend_from_slice(eta.as_slice());
            }
            Layer::Theorem1 { x, w, b, eta } => {
                out.extend_from_slice(x.as_slice());
                out.extend_from_slice(w.as_slice());
                out.extend_from_slice(b.as_slice());
                out.extend_from_slice(eta.as_slice());
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
                for m in [x, w_p, w_q] {
                    out.extend_from_slice(m.as_slice());
                }
                for v in [b_p, b_q, eta_p, eta_q] {
                    out.extend_from_slice(v.as_slice());
                }
            }
        }
    }

    /// Overwrites the free parameters from `src`; returns how many were read.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&src[pos..pos + dst.len()]);
            pos += dst.len();
        };
        match self {
            Layer::General { lower, w, b, eta } => {
                let d = lower.rows();
                let mut strict = vec![0.0; d * (d - 1) / 2];
                take(&mut strict);
                let mut it = strict.into_iter();
                for i in 0..d {
                    for k in 0..i {
                        lower.set(i, k, it.next().unwrap_or_default());
                    }
                }
                take(w.as_mut_slice());
                take(b.as_mut_slice());
                take(eta.as_mut_slice());
            }
            Layer::Theorem1 { x, w, b, eta } => {
                take(x.as_mut_slice());
                take(w.as_mut_slice());
                take(b.as_mut_slice());
                take(eta.as_mut_slice());
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
                take(x.as_mut_slice());
                take(w_p.as_mut_slice());
                take(w_q.as_mut_slice());
                take(b_p.as_mut_slice());
                take(b_q.as_mut_slice());
                take(eta_p.as_mut_slice());
                take(eta_q.as_mut_slice());
            }
        }
        pos
    }

    pub fn params_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.write_params(&mut v);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.params_vec().iter().all(|x| x.is_finite())
    }

    /// Multiplies every weight matrix (not biases or `eta`) by `s`.
    pub fn scale_weights(&mut self, s: f64) {
        match self {
            Layer::General { w, .. } | Layer::Theorem1 { w, .. } => *w = w.scale(s),
            Layer::BlockExplicit { w_p, w_q, .. } => {
                *w_p = w_p.scale(s);
                *w_q = w_q.scale(s);
            }
        }
    }
}

fn strictly_lower(m: &Matrix) -> Matrix {
    let d = m.rows();
    let mut l = Matrix::zeros(d, d);
    for i in 0..d {
        for k in 0..i {
            l.set(i, k, m.get(i, k));
        }
    }
    l
}

/// A depth-`N` Hamiltonian network with step size `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct HdnnModel {
    n: usize,
    h: f64,
    activation: Activation,
    structure: StructureTag,
    layers: Vec<Layer>,
}

impl HdnnModel {
    pub fn new(
        n: usize,
        h: f64,
        activation: Activation,
        structure: StructureTag,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("state half-dimension n must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::Config("depth must be positive".into()));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {h}")));
        }
        for (index, layer) in layers.iter().enumerate() {
            if layer.structure() != structure {
                return Err(Error::StructureViolation {
                    index,
                    reason: format!("tagged {} but model is {}", layer.structure(), structure),
                });
            }
            if layer.n() != n {
                return Err(Error::Dimension {
                    context: "layer half-dimension",
                    expected: n,
                    found: layer.n(),
                }
                .at_layer(index));
            }
            if !layer.is_finite() {
                return Err(Error::NonFinite("layer parameters").at_layer(index));
            }
        }
        Ok(HdnnModel {
            n,
            h,
            activation,
            structure,
            layers,
        })
    }

    pub fn zeros(structure: StructureTag, n: usize, depth: usize, h: f64, activation: Activation) -> Result<Self> {
        let layers = (0..depth).map(|_| Layer::zeros(structure, n)).collect();
        HdnnModel::new(n, h, activation, structure, layers)
    }

    /// Every free parameter from `U[-scale, scale]`.
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        structure: StructureTag,
        n: usize,
        depth: usize,
        h: f64,
        activation: Activation,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|_| Layer::random(structure, n, scale, rng))
            .collect();
        HdnnModel::new(n, h, activation, structure, layers)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Final time `T = N h`.
    pub fn horizon(&self) -> f64 {
        self.h * self.depth() as f64
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn structure(&self) -> StructureTag {
        self.structure
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn params_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            layer.write_params(&mut v);
        }
        v
    }

    /// Replaces all free parameters from a flat slice in layer order.
    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim("parameter vector", self.num_params(), src.len())?;
        let mut pos = 0;
        for layer in &mut self.layers {
            pos += layer.read_params(&src[pos..]);
        }
        Ok(())
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}
