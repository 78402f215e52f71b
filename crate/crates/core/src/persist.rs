//! Model and shallow-sum files, run configuration and CSV output.
//!
//! Model files are JSON documents written by hand so that every float is
//! printed with 17 significant digits; saving a loaded file reproduces it
//! byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hamiltonian::{HdnnModel, Layer, StructureTag};
use crate::integrator::FixedPointConfig;
use crate::numerics::{Activation, Matrix, Vector};
use crate::training::{BoxDomain, CfQuadrature, SweepConfig, TargetFunction, TrainConfig};
use crate::uap::{OutputHead, ShallowSum, ShallowTerm};

pub const FORMAT_VERSION: u64 = 1;
const CREATED_BY: &str = concat!("hamflow ", env!("CARGO_PKG_VERSION"));

/// A float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_vector(out: &mut String, v: &Vector) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&fmt_f64(*x));
    }
    out.push(']');
}

fn write_matrix(out: &mut String, m: &Matrix, indent: &str) {
    out.push('[');
    for i in 0..m.rows() {
        if i > 0 {
            out.push(',');
        }
        out.push('\n');
        out.push_str(indent);
        out.push_str("  ");
        write_vector(out, &m.row(i));
    }
    out.push('\n');
    out.push_str(indent);
    out.push(']');
}

enum Field<'a> {
    M(&'a Matrix),
    V(&'a Vector),
}

fn write_object(out: &mut String, fields: &[(&str, Field)], indent: &str) {
    out.push_str("{\n");
    let inner = format!("{indent}  ");
    for (i, (name, field)) in fields.iter().enumerate() {
        let _ = write!(out, "{inner}\"{name}\": ");
        match field {
            Field::M(m) => write_matrix(out, m, &inner),
            Field::V(v) => write_vector(out, v),
        }
        out.push_str(if i + 1 < fields.len() { ",\n" } else { "\n" });
    }
    out.push_str(indent);
    out.push('}');
}

fn layer_fields(layer: &Layer) -> (Vec<(&'static str, Field<'_>)>, Option<Matrix>) {
    match layer {
        Layer::General { w, b, eta, .. } => {
            // the full skew matrix is stored for readability
            let j = layer.to_params().j().clone();
            (vec![("w", Field::M(w)), ("b", Field::V(b)), ("eta", Field::V(eta))], Some(j))
        }
        Layer::Theorem1 { x, w, b, eta } => (
            vec![
                ("x", Field::M(x)),
                ("w", Field::M(w)),
                ("b", Field::V(b)),
                ("eta", Field::V(eta)),
            ],
            None,
        ),
        Layer::BlockExplicit {
            x,
            w_p,
            w_q,
            b_p,
            b_q,
            eta_p,
            eta_q,
        } => (
            vec![
                ("x", Field::M(x)),
                ("w_p", Field::M(w_p)),
                ("w_q", Field::M(w_q)),
                ("b_p", Field::V(b_p)),
                ("b_q", Field::V(b_q)),
                ("eta_p", Field::V(eta_p)),
                ("eta_q", Field::V(eta_q)),
            ],
            None,
        ),
    }
}

/// Serialises a model (and optional head) to the model file format.
pub fn model_to_string(model: &HdnnModel, head: Option<&OutputHead>, seed: Option<u64>) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"format_version\": {FORMAT_VERSION},");
    let _ = writeln!(out, "  \"created_by\": \"{CREATED_BY}\",");
    let _ = writeln!(out, "  \"n\": {},", model.n());
    let _ = writeln!(out, "  \"depth\": {},", model.depth());
    let _ = writeln!(out, "  \"h\": {},", fmt_f64(model.h()));
    let _ = writeln!(out, "  \"activation\": \"{}\",", model.activation().name());
    let _ = writeln!(out, "  \"structure\": \"{}\",", model.structure().name());
    match seed {
        Some(s) => {
            let _ = writeln!(out, "  \"seed\": {s},");
        }
        None => out.push_str("  \"seed\": null,\n"),
    }
    out.push_str("  \"layers\": [");
    for (i, layer) in model.layers().iter().enumerate() {
        out.push_str(if i == 0 { "\n    " } else { ",\n    " });
        let (mut fields, j) = layer_fields(layer);
        if let Some(j) = &j {
            fields.insert(0, ("j", Field::M(j)));
        }
        write_object(&mut out, &fields, "    ");
    }
    out.push_str("\n  ],\n");
    match head {
        Some(h) => {
            out.push_str("  \"head\": ");
            write_object(&mut out, &[("w_o", Field::M(&h.w_o)), ("b_o", Field::V(&h.b_o))], "  ");
            out.push('\n');
        }
        None => out.push_str("  \"head\": null\n"),
    }
    out.push_str("}\n");
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u64,
    #[allow(dead_code)]
    created_by: String,
    n: usize,
    depth: usize,
    h: f64,
    activation: String,
    structure: String,
    seed: Option<u64>,
    layers: Vec<BTreeMap<String, Value>>,
    head: Option<BTreeMap<String, Value>>,
}

/// A loaded model file.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub model: HdnnModel,
    pub head: Option<OutputHead>,
    pub seed: Option<u64>,
}

impl ModelFile {
    pub fn to_json(&self) -> String {
        model_to_string(&self.model, self.head.as_ref(), self.seed)
    }
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

fn take_vector(map: &mut BTreeMap<String, Value>, key: &str, len: usize) -> Result<Vector> {
    let v = map.remove(key).ok_or_else(|| parse_err(format!("missing field '{key}'")))?;
    let xs: Vec<f64> = serde_json::from_value(v).map_err(|e| parse_err(format!("field '{key}': {e}")))?;
    if xs.len() != len {
        return Err(parse_err(format!("field '{key}': expected {len} entries, found {}", xs.len())));
    }
    Vector::new(xs).map_err(|_| parse_err(format!("field '{key}': non-finite entry")))
}

fn take_matrix(map: &mut BTreeMap<String, Value>, key: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let v = map.remove(key).ok_or_else(|| parse_err(format!("missing field '{key}'")))?;
    let rs: Vec<Vec<f64>> = serde_json::from_value(v).map_err(|e| parse_err(format!("field '{key}': {e}")))?;
    if rs.len() != rows || rs.iter().any(|r| r.len() != cols) {
        return Err(parse_err(format!("field '{key}': expected a {rows}x{cols} matrix")));
    }
    Matrix::from_rows(&rs).map_err(|_| parse_err(format!("field '{key}': non-finite entry")))
}

fn no_extra(map: &BTreeMap<String, Value>, what: &str) -> Result<()> {
    match map.keys().next() {
        Some(k) => Err(parse_err(format!("{what}: unknown field '{k}'"))),
        None => Ok(()),
    }
}

fn parse_layer(mut map: BTreeMap<String, Value>, tag: StructureTag, n: usize) -> Result<Layer> {
    let layer = match tag {
        StructureTag::General => {
            let j = take_matrix(&mut map, "j", 2 * n, 2 * n)?;
            let w = take_matrix(&mut map, "w", 2 * n, 2 * n)?;
            let b = take_vector(&mut map, "b", 2 * n)?;
            let eta = take_vector(&mut map, "eta", 2 * n)?;
            Layer::general(&j, w, b, eta)?
        }
        StructureTag::Theorem1 => Layer::Theorem1 {
            x: take_matrix(&mut map, "x", n, n)?,
            w: take_matrix(&mut map, "w", n, n)?,
            b: take_vector(&mut map, "b", n)?,
            eta: take_vector(&mut map, "eta", n)?,
        },
        StructureTag::BlockExplicit => Layer::BlockExplicit {
            x: take_matrix(&mut map, "x", n, n)?,
            w_p: take_matrix(&mut map, "w_p", n, n)?,
            w_q: take_matrix(&mut map, "w_q", n, n)?,
            b_p: take_vector(&mut map, "b_p", n)?,
            b_q: take_vector(&mut map, "b_q", n)?,
            eta_p: take_vector(&mut map, "eta_p", n)?,
            eta_q: take_vector(&mut map, "eta_q", n)?,
        },
    };
    no_extra(&map, "layer")?;
    Ok(layer)
}

/// Parses a model file; the result passes every structural check.
pub fn model_from_str(text: &str) -> Result<ModelFile> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| parse_err(format!("model file: {e}")))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(parse_err(format!("unsupported format_version {}", doc.format_version)));
    }
    if doc.layers.len() != doc.depth {
        return Err(parse_err(format!("depth {} but {} layers", doc.depth, doc.layers.len())));
    }
    let activation: Activation = doc.activation.parse()?;
    let structure: StructureTag = doc.structure.parse()?;
    let layers = doc
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| parse_layer(l, structure, doc.n).map_err(|e| e.at_layer(i)))
        .collect::<Result<Vec<_>>>()?;
    let model = HdnnModel::new(doc.n, doc.h, activation, structure, layers)?;
    let head = match doc.head {
        None => None,
        Some(mut map) => {
            let v = map.get("b_o").and_then(|v| v.as_array()).map(|a| a.len()).unwrap_or(0);
            let w_o = take_matrix(&mut map, "w_o", doc.n, v)?;
            let b_o = take_vector(&mut map, "b_o", v)?;
            no_extra(&map, "head")?;
            Some(OutputHead::new(w_o, b_o)?)
        }
    };
    Ok(ModelFile {
        model,
        head,
        seed: doc.seed,
    })
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    std::fs::write(path, file.to_json()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    model_from_str(&text)
}

pub fn shallow_sum_to_string(g: &ShallowSum) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"format_version\": {FORMAT_VERSION},");
    let _ = writeln!(out, "  \"n\": {},", g.n());
    let _ = writeln!(out, "  \"activation\": \"{}\",", g.activation().name());
    out.push_str("  \"terms\": [");
    for (i, t) in g.terms().iter().enumerate() {
        out.push_str(if i == 0 { "\n    " } else { ",\n    " });
        write_object(
            &mut out,
            &[("a", Field::M(&t.a)), ("w", Field::M(&t.w)), ("b", Field::V(&t.b))],
            "    ",
        );
    }
    out.push_str("\n  ]\n}\n");
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ShallowDoc {
    format_version: u64,
    n: usize,
    activation: String,
    terms: Vec<BTreeMap<String, Value>>,
}

pub fn shallow_sum_from_str(text: &str) -> Result<ShallowSum> {
    let doc: ShallowDoc = serde_json::from_str(text).map_err(|e| parse_err(format!("shallow-sum file: {e}")))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(parse_err(format!("unsupported format_version {}", doc.format_version)));
    }
    let n = doc.n;
    let terms = doc
        .terms
        .into_iter()
        .map(|mut m| {
            let t = ShallowTerm {
                a: take_matrix(&mut m, "a", n, n)?,
                w: take_matrix(&mut m, "w", n, n)?,
                b: take_vector(&mut m, "b", n)?,
            };
            no_extra(&m, "term")?;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    ShallowSum::new(terms, doc.activation.parse()?)
}

/// Flat run configuration. Every key is optional; unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `regression` on `target`, or `annuli` classification with a head.
    pub task: String,
    pub target: String,
    pub n: usize,
    pub domain_lo: f64,
    pub domain_hi: f64,
    pub samples: usize,
    pub data_seed: u64,

    pub structure: String,
    pub activation: String,
    pub depth: usize,
    pub h: f64,
    pub init_scale: f64,
    pub head_dim: Option<usize>,

    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub target_loss: Option<f64>,

    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub fp_damping: f64,

    pub depths: Vec<usize>,
    pub seeds: usize,
    pub cf: Option<f64>,
    pub horizon: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SweepConfig::default();
        RunConfig {
            task: "regression".into(),
            target: "sin_pi".into(),
            n: 1,
            domain_lo: -1.0,
            domain_hi: 1.0,
            samples: s.dataset_size,
            data_seed: s.dataset_seed,
            structure: t.structure.name().into(),
            activation: t.activation.name().into(),
            depth: t.depth,
            h: t.h,
            init_scale: t.init_scale,
            head_dim: None,
            learning_rate: t.learning_rate,
            final_lr_fraction: t.final_lr_fraction,
            beta1: t.beta1,
            beta2: t.beta2,
            batch_size: t.batch_size,
            iterations: t.iterations,
            seed: t.seed,
            target_loss: t.target_loss,
            fp_tol: t.fixed_point.tol,
            fp_max_iter: t.fixed_point.max_iter,
            fp_damping: t.fixed_point.damping,
            depths: s.depths,
            seeds: s.seeds,
            cf: None,
            horizon: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.task.as_str(), "regression" | "annuli") {
            return Err(Error::Config(format!("unknown task '{}'", self.task)));
        }
        if self.task == "annuli" && self.n != 2 {
            return Err(Error::Config("the annuli task needs n = 2".into()));
        }
        self.target()?;
        self.domain()?;
        if self.samples == 0 || self.seeds == 0 || self.depths.contains(&0) {
            return Err(Error::Config("samples, seeds and depths must be positive".into()));
        }
        self.train_config()?.validate()
    }

    pub fn target(&self) -> Result<TargetFunction> {
        self.target.parse()
    }

    pub fn domain(&self) -> Result<BoxDomain> {
        BoxDomain::new(Vector::filled(self.n, self.domain_lo), Vector::filled(self.n, self.domain_hi))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            depth: self.depth,
            h: self.h,
            structure: self.structure.parse()?,
            activation: self.activation.parse()?,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            final_lr_fraction: self.final_lr_fraction,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: TrainConfig::default().adam_eps,
            iterations: self.iterations,
            seed: self.seed,
            init_scale: self.init_scale,
            target_loss: self.target_loss,
            fixed_point: self.fixed_point(),
        })
    }

    pub fn fixed_point(&self) -> FixedPointConfig {
        FixedPointConfig {
            tol: self.fp_tol,
            max_iter: self.fp_max_iter,
            damping: self.fp_damping,
        }
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        Ok(SweepConfig {
            depths: self.depths.clone(),
            seeds: self.seeds,
            dataset_size: self.samples,
            dataset_seed: self.data_seed,
            train: self.train_config()?,
            cf: self.cf,
            horizon: self.horizon,
            quadrature: CfQuadrature::default(),
        })
    }
}

/// CSV text with a header row.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Reads a CSV of numeric points; a first row that does not parse is taken
/// as the header.
pub fn parse_points_csv(text: &str) -> Result<Vec<Vector>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => points.push(Vector::new(v).map_err(|_| parse_err(format!("line {}: non-finite value", i + 1)))?),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(parse_err(format!("line {}: {e}", i + 1))),
        }
    }
    if let Some(first) = points.first() {
        let n = first.len();
        if let Some(bad) = points.iter().position(|p| p.len() != n) {
            return Err(parse_err(format!("row {} has {} columns, expected {n}", bad + 1, points[bad].len())));
        }
    }
    Ok(points)
}
