//! Block-diagram IR and its graphic differentiation.
//!
//! Signals are scalar. A `Mux` packs scalars into a bundle that may only be
//! consumed by a `Demux` of the same width. Ports are numbered from 1 and
//! written `"block.port"` in documents.
//!
//! Transfer-function coefficients are listed in descending powers of `s`
//! (or `z`): `[tau, 1]` is `tau*s + 1`.

mod agdm;
mod linear;
mod prune;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::elementary::ElementaryFn;
use crate::expr::{ExprError, ParamExpr, ParamValues};

pub use agdm::{agdm_diff, agdm_diff_with, derivative_block_name, derivative_output_name, AgdmOptions};
pub use linear::{ss_augment, tf_param_derivative, tf_to_ss, Matrix, Poly, StateSpace};
pub use prune::prune_zero;
pub use validate::{inline_subsystems, validate, ValidationReport, Violation};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiagramError {
    #[error("schema error at {path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("invalid diagram:\n{0}")]
    Validation(ValidationReport),
    #[error("unknown parameter `{name}` (available: {available})")]
    UnknownParameter { name: String, available: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cannot differentiate `{block}`: {reason}")]
    Unsupported { block: String, reason: String },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// `block.port` with a 1-based port.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub block: String,
    pub port: usize,
}

impl PortRef {
    pub fn new(block: impl Into<String>, port: usize) -> PortRef {
        PortRef { block: block.into(), port }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.port)
    }
}

impl FromStr for PortRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (block, port) = s.rsplit_once('.').ok_or_else(|| format!("`{s}` is not of the form block.port"))?;
        let port: usize = port.parse().map_err(|_| format!("`{port}` is not a port number"))?;
        if block.is_empty() || port == 0 {
            return Err(format!("`{s}` is not of the form block.port with port >= 1"));
        }
        Ok(PortRef { block: block.to_string(), port })
    }
}

impl Serialize for PortRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PortRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupOutput {
    /// Piecewise-linear interpolation, clamped at the ends.
    #[default]
    Value,
    /// Slope of the interpolant (zero outside the breakpoint range).
    Slope,
}

/// How the derivative flow of a lookup table is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupDerivative {
    /// Interpolation slope between the bracketing breakpoints.
    #[default]
    Slope,
    /// Forward difference with the breakpoint spacing as increment.
    Fd,
    /// Central difference with the breakpoint spacing as increment.
    FdCentral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayOutput {
    /// `u(t - h)`.
    #[default]
    Value,
    /// `u'(t - h)`; the delayed signal must be an integrator state.
    Rate,
}

fn default_product_ops() -> String {
    "**".to_string()
}

fn default_level() -> ParamExpr {
    ParamExpr::one()
}

fn is_zero_expr(e: &ParamExpr) -> bool {
    e.is_zero()
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

impl Default for ParamExpr {
    fn default() -> Self {
        ParamExpr::zero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BlockKind {
    Gain {
        gain: ParamExpr,
    },
    /// One input per sign character, `+` or `-`.
    Sum {
        signs: String,
    },
    /// One input per character, `*` multiplies and `/` divides.
    Product {
        #[serde(default = "default_product_ops")]
        ops: String,
    },
    Integrator {
        #[serde(default, skip_serializing_if = "is_zero_expr")]
        initial: ParamExpr,
        /// `[lower, upper]` bounds on the state.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        saturation: Option<[f64; 2]>,
        /// Id of a saturated integrator whose pinned intervals gate this one.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        follow: Option<String>,
    },
    TransferFnS {
        num: Vec<ParamExpr>,
        den: Vec<ParamExpr>,
    },
    TransferFnZ {
        num: Vec<ParamExpr>,
        den: Vec<ParamExpr>,
        sample_time: f64,
    },
    StateSpaceC {
        a: Matrix,
        b: Matrix,
        c: Matrix,
        d: Matrix,
    },
    StateSpaceD {
        a: Matrix,
        b: Matrix,
        c: Matrix,
        d: Matrix,
        sample_time: f64,
    },
    Fn {
        func: ElementaryFn,
    },
    /// Inputs `[u1, control, u3]`: passes `u1` when `control >= threshold`.
    Switch {
        #[serde(default)]
        threshold: f64,
    },
    Saturation {
        lower: f64,
        upper: f64,
    },
    /// Inputs `[upper, u, lower]`.
    SaturationDynamic,
    LookupTable1D {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
        #[serde(default, skip_serializing_if = "is_default")]
        output: LookupOutput,
        #[serde(default, skip_serializing_if = "is_default")]
        derivative: LookupDerivative,
    },
    Constant {
        value: ParamExpr,
    },
    Step {
        #[serde(default)]
        time: f64,
        #[serde(default = "default_level")]
        level: ParamExpr,
        #[serde(default, skip_serializing_if = "is_zero_expr")]
        initial: ParamExpr,
    },
    TransportDelay {
        delay: ParamExpr,
        #[serde(default, skip_serializing_if = "is_zero_expr")]
        prehistory: ParamExpr,
        #[serde(default, skip_serializing_if = "is_default")]
        output: DelayOutput,
    },
    Mux {
        n: usize,
    },
    Demux {
        n: usize,
    },
    UnitDelay {
        #[serde(default, skip_serializing_if = "is_zero_expr")]
        initial: ParamExpr,
        sample_time: f64,
    },
    /// Zero-order hold at `sample_time`.
    RateTransition {
        sample_time: f64,
    },
    /// Input port of the enclosing subsystem (1-based).
    Inport {
        index: usize,
    },
    Subsystem {
        diagram: Box<Diagram>,
    },
}

impl BlockKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            BlockKind::Gain { .. } => "Gain",
            BlockKind::Sum { .. } => "Sum",
            BlockKind::Product { .. } => "Product",
            BlockKind::Integrator { .. } => "Integrator",
            BlockKind::TransferFnS { .. } => "TransferFnS",
            BlockKind::TransferFnZ { .. } => "TransferFnZ",
            BlockKind::StateSpaceC { .. } => "StateSpaceC",
            BlockKind::StateSpaceD { .. } => "StateSpaceD",
            BlockKind::Fn { .. } => "Fn",
            BlockKind::Switch { .. } => "Switch",
            BlockKind::Saturation { .. } => "Saturation",
            BlockKind::SaturationDynamic => "SaturationDynamic",
            BlockKind::LookupTable1D { .. } => "LookupTable1D",
            BlockKind::Constant { .. } => "Constant",
            BlockKind::Step { .. } => "Step",
            BlockKind::TransportDelay { .. } => "TransportDelay",
            BlockKind::Mux { .. } => "Mux",
            BlockKind::Demux { .. } => "Demux",
            BlockKind::UnitDelay { .. } => "UnitDelay",
            BlockKind::RateTransition { .. } => "RateTransition",
            BlockKind::Inport { .. } => "Inport",
            BlockKind::Subsystem { .. } => "Subsystem",
        }
    }

    pub fn num_inputs(&self) -> usize {
        match self {
            BlockKind::Sum { signs } => signs.chars().count(),
            BlockKind::Product { ops } => ops.chars().count(),
            BlockKind::StateSpaceC { b, .. } | BlockKind::StateSpaceD { b, .. } => {
                b.first().map_or(0, |r| r.len())
            }
            BlockKind::Switch { .. } | BlockKind::SaturationDynamic => 3,
            BlockKind::Constant { .. } | BlockKind::Step { .. } | BlockKind::Inport { .. } => 0,
            BlockKind::Mux { n } => *n,
            BlockKind::Subsystem { diagram } => diagram.inport_count(),
            _ => 1,
        }
    }

    pub fn num_outputs(&self) -> usize {
        match self {
            BlockKind::StateSpaceC { c, .. } | BlockKind::StateSpaceD { c, .. } => c.len(),
            BlockKind::Demux { n } => *n,
            BlockKind::Subsystem { diagram } => diagram.outputs.len(),
            _ => 1,
        }
    }

    /// Parameter expressions carried by the block.
    pub fn exprs(&self) -> Vec<&ParamExpr> {
        match self {
            BlockKind::Gain { gain } => vec![gain],
            BlockKind::Integrator { initial, .. } | BlockKind::UnitDelay { initial, .. } => vec![initial],
            BlockKind::TransferFnS { num, den } | BlockKind::TransferFnZ { num, den, .. } => {
                num.iter().chain(den.iter()).collect()
            }
            BlockKind::StateSpaceC { a, b, c, d } | BlockKind::StateSpaceD { a, b, c, d, .. } => {
                [a, b, c, d].into_iter().flatten().flatten().collect()
            }
            BlockKind::Constant { value } => vec![value],
            BlockKind::Step { level, initial, .. } => vec![level, initial],
            BlockKind::TransportDelay { delay, prehistory, .. } => vec![delay, prehistory],
            BlockKind::Subsystem { diagram } => {
                diagram.blocks.iter().flat_map(|b| b.kind.exprs()).collect()
            }
            _ => vec![],
        }
    }

    pub fn depends_on(&self, theta: &str) -> bool {
        self.exprs().iter().any(|e| e.depends_on(theta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    #[serde(flatten)]
    pub kind: BlockKind,
}

impl Block {
    pub fn new(id: impl Into<String>, kind: BlockKind) -> Block {
        Block { id: id.into(), kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub from: PortRef,
    pub to: PortRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub name: String,
    pub from: PortRef,
}

/// Derivative signal of `of` with respect to `wrt`; `None` is a structural zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivativeRecord {
    pub of: PortRef,
    pub wrt: String,
    pub signal: Option<PortRef>,
}

/// Bookkeeping written by the differentiation transform.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Annotations {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derivatives: Vec<DerivativeRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derivative_blocks: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Annotations {
    pub fn is_empty(&self) -> bool {
        self.derivatives.is_empty() && self.derivative_blocks.is_empty() && self.warnings.is_empty()
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagram {
    #[serde(default = "default_schema")]
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: ParamValues,
    pub blocks: Vec<Block>,
    #[serde(default)]
    pub links: Vec<Link>,
    #[serde(default)]
    pub outputs: Vec<OutputSpec>,
    #[serde(default, skip_serializing_if = "Annotations::is_empty")]
    pub annotations: Annotations,
}

impl Diagram {
    pub fn new(name: impl Into<String>) -> Diagram {
        Diagram {
            schema: SCHEMA_VERSION,
            name: name.into(),
            params: ParamValues::new(),
            blocks: vec![],
            links: vec![],
            outputs: vec![],
            annotations: Annotations::default(),
        }
    }

    pub fn param(mut self, name: &str, value: f64) -> Diagram {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn block(mut self, id: &str, kind: BlockKind) -> Diagram {
        self.blocks.push(Block::new(id, kind));
        self
    }

    /// Add a link; both ends as `"block.port"`.
    pub fn link(mut self, from: &str, to: &str) -> Diagram {
        self.links.push(Link {
            from: from.parse().expect("well-formed port reference"),
            to: to.parse().expect("well-formed port reference"),
        });
        self
    }

    pub fn output(mut self, name: &str, from: &str) -> Diagram {
        self.outputs.push(OutputSpec {
            name: name.to_string(),
            from: from.parse().expect("well-formed port reference"),
        });
        self
    }

    pub fn find(&self, id: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn inport_count(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b.kind, BlockKind::Inport { .. })).count()
    }

    /// Source port driving each input port.
    pub fn drivers(&self) -> BTreeMap<PortRef, PortRef> {
        self.links.iter().map(|l| (l.to.clone(), l.from.clone())).collect()
    }

    pub fn input_source(&self, block: &str, port: usize) -> Option<&PortRef> {
        self.links
            .iter()
            .find(|l| l.to.block == block && l.to.port == port)
            .map(|l| &l.from)
    }

    pub fn output_index(&self, name: &str) -> Option<usize> {
        self.outputs.iter().position(|o| o.name == name)
    }

    /// Check `theta` names a parameter.
    pub fn require_param(&self, theta: &str) -> Result<(), DiagramError> {
        if self.params.contains_key(theta) {
            Ok(())
        } else {
            Err(DiagramError::UnknownParameter {
                name: theta.to_string(),
                available: self.params.keys().cloned().collect::<Vec<_>>().join(", "),
            })
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagram serializes")
    }

    /// Structural references (blocks and ports) with document paths.
    fn check_references(&self) -> Result<(), DiagramError> {
        let schema = |path: String, msg: String| DiagramError::Schema { path, msg };
        let lookup = |r: &PortRef, input: bool| -> Result<(), String> {
            let b = self.find(&r.block).ok_or_else(|| format!("no block `{}`", r.block))?;
            let n = if input { b.kind.num_inputs() } else { b.kind.num_outputs() };
            if r.port > n {
                let side = if input { "input" } else { "output" };
                return Err(format!("block `{}` has {n} {side} port(s), not {}", r.block, r.port));
            }
            Ok(())
        };
        for (i, l) in self.links.iter().enumerate() {
            lookup(&l.from, false).map_err(|m| schema(format!("links[{i}].from"), m))?;
            lookup(&l.to, true).map_err(|m| schema(format!("links[{i}].to"), m))?;
        }
        for (i, o) in self.outputs.iter().enumerate() {
            lookup(&o.from, false).map_err(|m| schema(format!("outputs[{i}].from"), m))?;
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let BlockKind::Subsystem { diagram } = &b.kind {
                diagram.check_references().map_err(|e| match e {
                    DiagramError::Schema { path, msg } => schema(format!("blocks[{i}].diagram.{path}"), msg),
                    other => other,
                })?;
            }
        }
        Ok(())
    }
}

/// Parse and validate a diagram document.
pub fn parse_diagram(document: &str) -> Result<Diagram, DiagramError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let d: Diagram = serde_path_to_error::deserialize(de).map_err(|e| DiagramError::Schema {
        path: e.path().to_string(),
        msg: e.inner().to_string(),
    })?;
    if d.schema != SCHEMA_VERSION {
        return Err(DiagramError::Schema {
            path: "schema".into(),
            msg: format!("unsupported schema version {} (expected {SCHEMA_VERSION})", d.schema),
        });
    }
    d.check_references()?;
    let report = validate(&d);
    if !report.is_ok() {
        return Err(DiagramError::Validation(report));
    }
    Ok(d)
}
