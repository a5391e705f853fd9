//! Typed IR for numerical flux expressions, with a reference interpreter
//! (the semantic oracle) and lowering into fused scalar assignments that the
//! kernel generator splices into gather kernels.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// Which side of a face a trace is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Interior,
    Exterior,
}

/// Value shape of a flux subexpression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector3,
}

/// A flux expression tree.
#[derive(Debug, Clone)]
pub enum FluxExpr {
    /// Trace of a named field on one side of the face.
    FieldTrace(String, Side),
    /// The outward unit normal of the interior side.
    Normal,
    /// Scalar literal (parameters such as the upwinding weight bake in
    /// here).
    Const(f64),
    /// Vector literal (e.g. a constant advection velocity).
    ConstVec3([f64; 3]),
    Add(Box<FluxExpr>, Box<FluxExpr>),
    Sub(Box<FluxExpr>, Box<FluxExpr>),
    Neg(Box<FluxExpr>),
    /// Scalar times scalar-or-vector.
    ScalarMul(Box<FluxExpr>, Box<FluxExpr>),
    Cross(Box<FluxExpr>, Box<FluxExpr>),
    Dot(Box<FluxExpr>, Box<FluxExpr>),
    /// Interior minus exterior trace of a named field.
    Jump(String),
    /// Mean of the two traces of a named field.
    Average(String),
    /// Absolute value of a scalar.
    Abs(Box<FluxExpr>),
}

impl FluxExpr {
    pub fn trace(name: &str, side: Side) -> Self {
        FluxExpr::FieldTrace(name.to_string(), side)
    }
    pub fn jump(name: &str) -> Self {
        FluxExpr::Jump(name.to_string())
    }
    pub fn average(name: &str) -> Self {
        FluxExpr::Average(name.to_string())
    }
    pub fn add(self, rhs: Self) -> Self {
        FluxExpr::Add(Box::new(self), Box::new(rhs))
    }
    pub fn sub(self, rhs: Self) -> Self {
        FluxExpr::Sub(Box::new(self), Box::new(rhs))
    }
    pub fn neg(self) -> Self {
        FluxExpr::Neg(Box::new(self))
    }
    pub fn cross(self, rhs: Self) -> Self {
        FluxExpr::Cross(Box::new(self), Box::new(rhs))
    }
    pub fn dot(self, rhs: Self) -> Self {
        FluxExpr::Dot(Box::new(self), Box::new(rhs))
    }
    /// `self * rhs` with `self` scalar.
    pub fn scale(self, rhs: Self) -> Self {
        FluxExpr::ScalarMul(Box::new(self), Box::new(rhs))
    }
    pub fn abs(self) -> Self {
        FluxExpr::Abs(Box::new(self))
    }
}

/// A complete numerical-flux description: system fields, one output
/// expression per field, and reportable parameter bindings.
#[derive(Debug, Clone)]
pub struct FluxSpec {
    /// Declared trace fields (name, shape), in component order.
    pub fields: Vec<(String, Shape)>,
    /// One output expression per declared field, same order and shapes.
    pub outputs: Vec<(String, FluxExpr)>,
    /// Named scalar parameters already baked into the expressions, kept for
    /// configuration reporting.
    pub params: Vec<(String, f64)>,
}

fn field_shape(fields: &[(String, Shape)], name: &str, path: &str) -> Result<Shape> {
    fields
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::Flux {
            path: path.to_string(),
            msg: format!("field `{name}` is not declared"),
        })
}

/// Infer the shape of an expression against declared fields, or report a
/// located type error.
pub fn typecheck(expr: &FluxExpr, fields: &[(String, Shape)]) -> Result<Shape> {
    fn walk(e: &FluxExpr, fields: &[(String, Shape)], path: &str) -> Result<Shape> {
        let err = |msg: String| Error::Flux {
            path: path.to_string(),
            msg,
        };
        match e {
            FluxExpr::FieldTrace(name, _) => field_shape(fields, name, path),
            FluxExpr::Jump(name) | FluxExpr::Average(name) => field_shape(fields, name, path),
            FluxExpr::Normal => Ok(Shape::Vector3),
            FluxExpr::Const(_) => Ok(Shape::Scalar),
            FluxExpr::ConstVec3(_) => Ok(Shape::Vector3),
            FluxExpr::Add(a, b) | FluxExpr::Sub(a, b) => {
                let sa = walk(a, fields, &format!("{path}.lhs"))?;
                let sb = walk(b, fields, &format!("{path}.rhs"))?;
                if sa != sb {
                    return Err(err(format!(
                        "operands have mismatched shapes {sa:?} and {sb:?}"
                    )));
                }
                Ok(sa)
            }
            FluxExpr::Neg(a) => walk(a, fields, &format!("{path}.arg")),
            FluxExpr::ScalarMul(a, b) => {
                let sa = walk(a, fields, &format!("{path}.scalar"))?;
                if sa != Shape::Scalar {
                    return Err(err("scalar multiplier must have scalar shape".into()));
                }
                walk(b, fields, &format!("{path}.arg"))
            }
            FluxExpr::Cross(a, b) => {
                let sa = walk(a, fields, &format!("{path}.lhs"))?;
                let sb = walk(b, fields, &format!("{path}.rhs"))?;
                if sa != Shape::Vector3 || sb != Shape::Vector3 {
                    return Err(err("cross requires vector operands".into()));
                }
                Ok(Shape::Vector3)
            }
            FluxExpr::Dot(a, b) => {
                let sa = walk(a, fields, &format!("{path}.lhs"))?;
                let sb = walk(b, fields, &format!("{path}.rhs"))?;
                if sa != Shape::Vector3 || sb != Shape::Vector3 {
                    return Err(err("dot requires vector operands".into()));
                }
                Ok(Shape::Scalar)
            }
            FluxExpr::Abs(a) => {
                let sa = walk(a, fields, &format!("{path}.arg"))?;
                if sa != Shape::Scalar {
                    return Err(err("abs requires a scalar operand".into()));
                }
                Ok(Shape::Scalar)
            }
        }
    }
    walk(expr, fields, "root")
}

/// Runtime value during interpretation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vec3([f64; 3]),
}

impl Value {
    fn zip(self, other: Value, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Value> {
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => Ok(Value::Scalar(f(a, b))),
            (Value::Vec3(a), Value::Vec3(b)) => {
                Ok(Value::Vec3([f(a[0], b[0]), f(a[1], b[1]), f(a[2], b[2])]))
            }
            _ => Err(Error::Flux {
                path: "interpret".into(),
                msg: format!("{what} on mismatched shapes"),
            }),
        }
    }
}

/// Recursive reference evaluation of a flux expression: the oracle against
/// which generated gather code is verified.
pub fn interpret(
    expr: &FluxExpr,
    traces: &HashMap<String, (Value, Value)>,
    normal: [f64; 3],
) -> Result<Value> {
    let lookup = |name: &str| -> Result<(Value, Value)> {
        traces.get(name).copied().ok_or_else(|| Error::Flux {
            path: "interpret".into(),
            msg: format!("no trace bound for field `{name}`"),
        })
    };
    match expr {
        FluxExpr::FieldTrace(name, side) => {
            let (m, p) = lookup(name)?;
            Ok(match side {
                Side::Interior => m,
                Side::Exterior => p,
            })
        }
        FluxExpr::Jump(name) => {
            let (m, p) = lookup(name)?;
            m.zip(p, |a, b| a - b, "jump")
        }
        FluxExpr::Average(name) => {
            let (m, p) = lookup(name)?;
            m.zip(p, |a, b| 0.5 * (a + b), "average")
        }
        FluxExpr::Normal => Ok(Value::Vec3(normal)),
        FluxExpr::Const(c) => Ok(Value::Scalar(*c)),
        FluxExpr::ConstVec3(v) => Ok(Value::Vec3(*v)),
        FluxExpr::Add(a, b) => {
            interpret(a, traces, normal)?.zip(interpret(b, traces, normal)?, |x, y| x + y, "add")
        }
        FluxExpr::Sub(a, b) => {
            interpret(a, traces, normal)?.zip(interpret(b, traces, normal)?, |x, y| x - y, "sub")
        }
        FluxExpr::Neg(a) => match interpret(a, traces, normal)? {
            Value::Scalar(x) => Ok(Value::Scalar(-x)),
            Value::Vec3(v) => Ok(Value::Vec3([-v[0], -v[1], -v[2]])),
        },
        FluxExpr::ScalarMul(a, b) => {
            let Value::Scalar(s) = interpret(a, traces, normal)? else {
                return Err(Error::Flux {
                    path: "interpret".into(),
                    msg: "scalar multiplier is not scalar".into(),
                });
            };
            match interpret(b, traces, normal)? {
                Value::Scalar(x) => Ok(Value::Scalar(s * x)),
                Value::Vec3(v) => Ok(Value::Vec3([s * v[0], s * v[1], s * v[2]])),
            }
        }
        FluxExpr::Cross(a, b) => {
            let (Value::Vec3(u), Value::Vec3(v)) =
                (interpret(a, traces, normal)?, interpret(b, traces, normal)?)
            else {
                return Err(Error::Flux {
                    path: "interpret".into(),
                    msg: "cross on non-vectors".into(),
                });
            };
            Ok(Value::Vec3([
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ]))
        }
        FluxExpr::Dot(a, b) => {
            let (Value::Vec3(u), Value::Vec3(v)) =
                (interpret(a, traces, normal)?, interpret(b, traces, normal)?)
            else {
                return Err(Error::Flux {
                    path: "interpret".into(),
                    msg: "dot on non-vectors".into(),
                });
            };
            Ok(Value::Scalar(u[0] * v[0] + u[1] * v[1] + u[2] * v[2]))
        }
        FluxExpr::Abs(a) => match interpret(a, traces, normal)? {
            Value::Scalar(x) => Ok(Value::Scalar(x.abs())),
            _ => Err(Error::Flux {
                path: "interpret".into(),
                msg: "abs on non-scalar".into(),
            }),
        },
    }
}

/// One node of the lowered scalar DAG. Operands are indices of earlier
/// nodes, so the vector order is already a valid evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarNode {
    /// Trace of one scalar component (flattened component index).
    Trace { component: usize, side: Side },
    /// One component of the face normal.
    NormalComp(usize),
    /// Literal constant, stored as bits for hashability.
    Lit(u64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Abs(usize),
}

impl ScalarNode {
    pub fn lit(v: f64) -> Self {
        // Normalise -0.0 so structurally equal constants unify.
        let v = if v == 0.0 { 0.0 } else { v };
        ScalarNode::Lit(v.to_bits())
    }
    pub fn lit_value(&self) -> Option<f64> {
        match self {
            ScalarNode::Lit(bits) => Some(f64::from_bits(*bits)),
            _ => None,
        }
    }
    fn is_lit(&self, v: f64) -> bool {
        self.lit_value() == Some(v)
    }
}

/// A lowered flux: a scalar DAG plus one output node per field component.
#[derive(Debug, Clone)]
pub struct LoweredFlux {
    /// DAG nodes in evaluation order.
    pub nodes: Vec<ScalarNode>,
    /// (component index, node id) per output, covering all components in
    /// order.
    pub outputs: Vec<(usize, usize)>,
    /// Human-readable component names (scalars keep the field name,
    /// vectors expand to `.x/.y/.z`).
    pub component_names: Vec<String>,
}

struct DagBuilder {
    nodes: Vec<ScalarNode>,
    memo: HashMap<ScalarNode, usize>,
}

impl DagBuilder {
    fn new() -> Self {
        DagBuilder {
            nodes: Vec::new(),
            memo: HashMap::new(),
        }
    }

    fn intern(&mut self, node: ScalarNode) -> usize {
        if let Some(&id) = self.memo.get(&node) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(node);
        self.memo.insert(node, id);
        id
    }

    fn lit(&mut self, v: f64) -> usize {
        self.intern(ScalarNode::lit(v))
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let (na, nb) = (self.nodes[a], self.nodes[b]);
        if let (Some(x), Some(y)) = (na.lit_value(), nb.lit_value()) {
            return self.lit(x + y);
        }
        if na.is_lit(0.0) {
            return b;
        }
        if nb.is_lit(0.0) {
            return a;
        }
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.intern(ScalarNode::Add(a, b))
    }

    fn sub(&mut self, a: usize, b: usize) -> usize {
        if a == b {
            return self.lit(0.0);
        }
        let (na, nb) = (self.nodes[a], self.nodes[b]);
        if let (Some(x), Some(y)) = (na.lit_value(), nb.lit_value()) {
            return self.lit(x - y);
        }
        if nb.is_lit(0.0) {
            return a;
        }
        if na.is_lit(0.0) {
            return self.neg(b);
        }
        self.intern(ScalarNode::Sub(a, b))
    }

    fn mul(&mut self, a: usize, b: usize) -> usize {
        let (na, nb) = (self.nodes[a], self.nodes[b]);
        if let (Some(x), Some(y)) = (na.lit_value(), nb.lit_value()) {
            return self.lit(x * y);
        }
        if na.is_lit(0.0) || nb.is_lit(0.0) {
            return self.lit(0.0);
        }
        if na.is_lit(1.0) {
            return b;
        }
        if nb.is_lit(1.0) {
            return a;
        }
        if na.is_lit(-1.0) {
            return self.neg(b);
        }
        if nb.is_lit(-1.0) {
            return self.neg(a);
        }
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.intern(ScalarNode::Mul(a, b))
    }

    fn neg(&mut self, a: usize) -> usize {
        match self.nodes[a] {
            ScalarNode::Lit(_) => {
                let v = self.nodes[a].lit_value().unwrap();
                self.lit(-v)
            }
            ScalarNode::Neg(inner) => inner,
            _ => self.intern(ScalarNode::Neg(a)),
        }
    }

    fn abs(&mut self, a: usize) -> usize {
        if let Some(v) = self.nodes[a].lit_value() {
            return self.lit(v.abs());
        }
        self.intern(ScalarNode::Abs(a))
    }
}

/// Lowered scalar-or-vector handle into the DAG.
#[derive(Debug, Clone, Copy)]
enum Lowered {
    Scalar(usize),
    Vec3([usize; 3]),
}

fn component_layout(fields: &[(String, Shape)]) -> (Vec<String>, HashMap<String, (usize, Shape)>) {
    let mut names = Vec::new();
    let mut map = HashMap::new();
    for (name, shape) in fields {
        map.insert(name.clone(), (names.len(), *shape));
        match shape {
            Shape::Scalar => names.push(name.clone()),
            Shape::Vector3 => {
                for suffix in [".x", ".y", ".z"] {
                    names.push(format!("{name}{suffix}"));
                }
            }
        }
    }
    (names, map)
}

fn lower_expr(
    expr: &FluxExpr,
    comp: &HashMap<String, (usize, Shape)>,
    b: &mut DagBuilder,
) -> Result<Lowered> {
    let trace_components = |name: &str| -> Result<(usize, Shape)> {
        comp.get(name).copied().ok_or_else(|| Error::Flux {
            path: "lower".into(),
            msg: format!("field `{name}` is not declared"),
        })
    };
    let err = |msg: &str| Error::Flux {
        path: "lower".into(),
        msg: msg.to_string(),
    };
    Ok(match expr {
        FluxExpr::FieldTrace(name, side) => {
            let (base, shape) = trace_components(name)?;
            match shape {
                Shape::Scalar => Lowered::Scalar(b.intern(ScalarNode::Trace {
                    component: base,
                    side: *side,
                })),
                Shape::Vector3 => {
                    let mut ids = [0; 3];
                    for (d, id) in ids.iter_mut().enumerate() {
                        *id = b.intern(ScalarNode::Trace {
                            component: base + d,
                            side: *side,
                        });
                    }
                    Lowered::Vec3(ids)
                }
            }
        }
        FluxExpr::Jump(name) | FluxExpr::Average(name) => {
            let is_jump = matches!(expr, FluxExpr::Jump(_));
            let (base, shape) = trace_components(name)?;
            let combine = |b: &mut DagBuilder, component: usize| {
                let m = b.intern(ScalarNode::Trace {
                    component,
                    side: Side::Interior,
                });
                let p = b.intern(ScalarNode::Trace {
                    component,
                    side: Side::Exterior,
                });
                if is_jump {
                    b.sub(m, p)
                } else {
                    let s = b.add(m, p);
                    let half = b.lit(0.5);
                    b.mul(half, s)
                }
            };
            match shape {
                Shape::Scalar => Lowered::Scalar(combine(b, base)),
                Shape::Vector3 => {
                    let mut ids = [0; 3];
                    for (d, id) in ids.iter_mut().enumerate() {
                        *id = combine(b, base + d);
                    }
                    Lowered::Vec3(ids)
                }
            }
        }
        FluxExpr::Normal => {
            let mut ids = [0; 3];
            for (d, id) in ids.iter_mut().enumerate() {
                *id = b.intern(ScalarNode::NormalComp(d));
            }
            Lowered::Vec3(ids)
        }
        FluxExpr::Const(c) => Lowered::Scalar(b.lit(*c)),
        FluxExpr::ConstVec3(v) => {
            let mut ids = [0; 3];
            for (d, id) in ids.iter_mut().enumerate() {
                *id = b.lit(v[d]);
            }
            Lowered::Vec3(ids)
        }
        FluxExpr::Add(x, y) | FluxExpr::Sub(x, y) => {
            let is_add = matches!(expr, FluxExpr::Add(..));
            let lx = lower_expr(x, comp, b)?;
            let ly = lower_expr(y, comp, b)?;
            let op = |b: &mut DagBuilder, p: usize, q: usize| {
                if is_add {
                    b.add(p, q)
                } else {
                    b.sub(p, q)
                }
            };
            match (lx, ly) {
                (Lowered::Scalar(p), Lowered::Scalar(q)) => Lowered::Scalar(op(b, p, q)),
                (Lowered::Vec3(p), Lowered::Vec3(q)) => {
                    let mut ids = [0; 3];
                    for d in 0..3 {
                        ids[d] = op(b, p[d], q[d]);
                    }
                    Lowered::Vec3(ids)
                }
                _ => return Err(err("add/sub on mismatched shapes")),
            }
        }
        FluxExpr::Neg(x) => match lower_expr(x, comp, b)? {
            Lowered::Scalar(p) => Lowered::Scalar(b.neg(p)),
            Lowered::Vec3(p) => {
                let mut ids = [0; 3];
                for d in 0..3 {
                    ids[d] = b.neg(p[d]);
                }
                Lowered::Vec3(ids)
            }
        },
        FluxExpr::ScalarMul(s, x) => {
            let Lowered::Scalar(sid) = lower_expr(s, comp, b)? else {
                return Err(err("scalar multiplier is not scalar"));
            };
            match lower_expr(x, comp, b)? {
                Lowered::Scalar(p) => Lowered::Scalar(b.mul(sid, p)),
                Lowered::Vec3(p) => {
                    let mut ids = [0; 3];
                    for d in 0..3 {
                        ids[d] = b.mul(sid, p[d]);
                    }
                    Lowered::Vec3(ids)
                }
            }
        }
        FluxExpr::Cross(x, y) => {
            let (Lowered::Vec3(u), Lowered::Vec3(v)) =
                (lower_expr(x, comp, b)?, lower_expr(y, comp, b)?)
            else {
                return Err(err("cross on non-vectors"));
            };
            let mut ids = [0; 3];
            for d in 0..3 {
                let (i, j) = ((d + 1) % 3, (d + 2) % 3);
                let p = b.mul(u[i], v[j]);
                let q = b.mul(u[j], v[i]);
                ids[d] = b.sub(p, q);
            }
            Lowered::Vec3(ids)
        }
        FluxExpr::Dot(x, y) => {
            let (Lowered::Vec3(u), Lowered::Vec3(v)) =
                (lower_expr(x, comp, b)?, lower_expr(y, comp, b)?)
            else {
                return Err(err("dot on non-vectors"));
            };
            let mut acc = b.mul(u[0], v[0]);
            for d in 1..3 {
                let t = b.mul(u[d], v[d]);
                acc = b.add(acc, t);
            }
            Lowered::Scalar(acc)
        }
        FluxExpr::Abs(x) => {
            let Lowered::Scalar(p) = lower_expr(x, comp, b)? else {
                return Err(err("abs on non-scalar"));
            };
            Lowered::Scalar(b.abs(p))
        }
    })
}

/// Lower a flux spec into a compact scalar DAG: expands jump/average and
/// vector operations, eliminates common subexpressions, folds constants,
/// and prunes dead nodes.
pub fn lower(spec: &FluxSpec) -> Result<LoweredFlux> {
    if spec.outputs.len() != spec.fields.len() {
        return Err(Error::Flux {
            path: "lower".into(),
            msg: format!(
                "{} outputs for {} fields; outputs must cover all fields",
                spec.outputs.len(),
                spec.fields.len()
            ),
        });
    }
    for ((fname, fshape), (oname, expr)) in spec.fields.iter().zip(&spec.outputs) {
        if fname != oname {
            return Err(Error::Flux {
                path: "lower".into(),
                msg: format!("output `{oname}` does not match field `{fname}` in order"),
            });
        }
        let shape = typecheck(expr, &spec.fields)?;
        if shape != *fshape {
            return Err(Error::Flux {
                path: format!("output {oname}"),
                msg: format!("flux has shape {shape:?}, field has {fshape:?}"),
            });
        }
    }

    let (component_names, comp) = component_layout(&spec.fields);
    let mut b = DagBuilder::new();
    let mut outputs = Vec::new();
    for (name, expr) in &spec.outputs {
        let (base, shape) = comp[name];
        match (shape, lower_expr(expr, &comp, &mut b)?) {
            (Shape::Scalar, Lowered::Scalar(id)) => outputs.push((base, id)),
            (Shape::Vector3, Lowered::Vec3(ids)) => {
                for (d, id) in ids.into_iter().enumerate() {
                    outputs.push((base + d, id));
                }
            }
            _ => unreachable!("shape checked above"),
        }
    }

    // Prune nodes made unreachable by folding, preserving order.
    let mut live = vec![false; b.nodes.len()];
    let mut stack: Vec<usize> = outputs.iter().map(|&(_, id)| id).collect();
    while let Some(id) = stack.pop() {
        if live[id] {
            continue;
        }
        live[id] = true;
        match b.nodes[id] {
            ScalarNode::Add(x, y) | ScalarNode::Sub(x, y) | ScalarNode::Mul(x, y) => {
                stack.push(x);
                stack.push(y);
            }
            ScalarNode::Neg(x) | ScalarNode::Abs(x) => stack.push(x),
            _ => {}
        }
    }
    let mut remap = vec![usize::MAX; b.nodes.len()];
    let mut nodes = Vec::new();
    for (id, node) in b.nodes.iter().enumerate() {
        if !live[id] {
            continue;
        }
        let fixed = match *node {
            ScalarNode::Add(x, y) => ScalarNode::Add(remap[x], remap[y]),
            ScalarNode::Sub(x, y) => ScalarNode::Sub(remap[x], remap[y]),
            ScalarNode::Mul(x, y) => ScalarNode::Mul(remap[x], remap[y]),
            ScalarNode::Neg(x) => ScalarNode::Neg(remap[x]),
            ScalarNode::Abs(x) => ScalarNode::Abs(remap[x]),
            other => other,
        };
        remap[id] = nodes.len();
        nodes.push(fixed);
    }
    let outputs = outputs.into_iter().map(|(c, id)| (c, remap[id])).collect();

    Ok(LoweredFlux {
        nodes,
        outputs,
        component_names,
    })
}

impl LoweredFlux {
    /// Number of scalar field components.
    pub fn num_components(&self) -> usize {
        self.component_names.len()
    }

    /// Floating-point operations per face-node evaluation.
    pub fn flop_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| {
                matches!(
                    n,
                    ScalarNode::Add(..)
                        | ScalarNode::Sub(..)
                        | ScalarNode::Mul(..)
                        | ScalarNode::Neg(..)
                        | ScalarNode::Abs(..)
                )
            })
            .count()
    }

    /// Evaluate the DAG for one face node. `minus`/`plus` hold the traces
    /// per component; returns one value per component.
    pub fn evaluate(&self, minus: &[f64], plus: &[f64], normal: [f64; 3]) -> Vec<f64> {
        let mut vals = vec![0.0; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            vals[id] = match *node {
                ScalarNode::Trace { component, side } => match side {
                    Side::Interior => minus[component],
                    Side::Exterior => plus[component],
                },
                ScalarNode::NormalComp(d) => normal[d],
                ScalarNode::Lit(bits) => f64::from_bits(bits),
                ScalarNode::Add(a, b) => vals[a] + vals[b],
                ScalarNode::Sub(a, b) => vals[a] - vals[b],
                ScalarNode::Mul(a, b) => vals[a] * vals[b],
                ScalarNode::Neg(a) => -vals[a],
                ScalarNode::Abs(a) => vals[a].abs(),
            };
        }
        self.outputs.iter().map(|&(_, id)| vals[id]).collect()
    }
}

impl fmt::Display for LoweredFlux {
    /// Readable dump of the lowered assignments: temps first, then one
    /// `out` line per component.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = |id: usize| format!("t{id}");
        for (id, node) in self.nodes.iter().enumerate() {
            let rhs = match *node {
                ScalarNode::Trace { component, side } => {
                    let tag = match side {
                        Side::Interior => "M",
                        Side::Exterior => "P",
                    };
                    format!("{}{tag}", self.component_names[component])
                }
                ScalarNode::NormalComp(d) => format!("n.{}", ["x", "y", "z"][d]),
                ScalarNode::Lit(bits) => format!("{:?}", f64::from_bits(bits)),
                ScalarNode::Add(a, b) => format!("{} + {}", name(a), name(b)),
                ScalarNode::Sub(a, b) => format!("{} - {}", name(a), name(b)),
                ScalarNode::Mul(a, b) => format!("{} * {}", name(a), name(b)),
                ScalarNode::Neg(a) => format!("-{}", name(a)),
                ScalarNode::Abs(a) => format!("fabs({})", name(a)),
            };
            writeln!(f, "{} = {rhs}", name(id))?;
        }
        for &(component, id) in &self.outputs {
            writeln!(f, "out {} = {}", self.component_names[component], name(id))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn maxwell_fields() -> Vec<(String, Shape)> {
        vec![
            ("E".to_string(), Shape::Vector3),
            ("H".to_string(), Shape::Vector3),
        ]
    }

    /// Electric-field flux bracket: 1/2 (n x (jump(H) - alpha n x jump(E))).
    fn maxwell_e_flux(alpha: f64) -> FluxExpr {
        let inner = FluxExpr::jump("H").sub(
            FluxExpr::Const(alpha).scale(FluxExpr::Normal.cross(FluxExpr::jump("E"))),
        );
        FluxExpr::Const(0.5).scale(FluxExpr::Normal.cross(inner))
    }

    /// Magnetic-field counterpart: -1/2 (n x (jump(E) + alpha n x jump(H))).
    fn maxwell_h_flux(alpha: f64) -> FluxExpr {
        let inner = FluxExpr::jump("E").add(
            FluxExpr::Const(alpha).scale(FluxExpr::Normal.cross(FluxExpr::jump("H"))),
        );
        FluxExpr::Const(0.5).scale(FluxExpr::Normal.cross(inner)).neg()
    }

    fn maxwell_spec(alpha: f64) -> FluxSpec {
        FluxSpec {
            fields: maxwell_fields(),
            outputs: vec![
                ("E".to_string(), maxwell_e_flux(alpha)),
                ("H".to_string(), maxwell_h_flux(alpha)),
            ],
            params: vec![("alpha".to_string(), alpha)],
        }
    }

    fn advection_spec(a: [f64; 3], alpha: f64) -> FluxSpec {
        let an = FluxExpr::Normal.dot(FluxExpr::ConstVec3(a));
        let bracket = FluxExpr::Const(0.5).scale(
            an.clone()
                .sub(FluxExpr::Const(alpha).scale(an.abs()))
                .scale(FluxExpr::jump("u")),
        );
        FluxSpec {
            fields: vec![("u".to_string(), Shape::Scalar)],
            outputs: vec![("u".to_string(), bracket)],
            params: vec![("alpha".to_string(), alpha)],
        }
    }

    fn random_traces(rng: &mut StdRng) -> HashMap<String, (Value, Value)> {
        let mut v3 = || {
            Value::Vec3([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ])
        };
        let mut m = HashMap::new();
        m.insert("E".to_string(), (v3(), v3()));
        m.insert("H".to_string(), (v3(), v3()));
        m
    }

    fn random_normal(rng: &mut StdRng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 0.1 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }

    #[test]
    fn typecheck_examples() {
        let fields = maxwell_fields();
        let shape = typecheck(&FluxExpr::Normal.cross(FluxExpr::jump("H")), &fields).unwrap();
        assert_eq!(shape, Shape::Vector3);
        let shape = typecheck(&FluxExpr::Normal.dot(FluxExpr::Normal), &fields).unwrap();
        assert_eq!(shape, Shape::Scalar);
        match typecheck(&FluxExpr::Const(1.0).cross(FluxExpr::Normal), &fields) {
            Err(Error::Flux { path, msg }) => {
                assert!(msg.contains("cross requires vector operands"));
                assert!(path.starts_with("root"));
            }
            other => panic!("expected type error, got {other:?}"),
        }
        assert!(typecheck(&FluxExpr::jump("missing"), &fields).is_err());
    }

    #[test]
    fn jump_definition_on_random_draws() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..100 {
            let traces = random_traces(&mut rng);
            let n = random_normal(&mut rng);
            let got = interpret(&FluxExpr::jump("E"), &traces, n).unwrap();
            let (Value::Vec3(m), Value::Vec3(p)) = traces["E"] else { unreachable!() };
            assert_eq!(got, Value::Vec3([m[0] - p[0], m[1] - p[1], m[2] - p[2]]));
        }
    }

    #[test]
    fn equal_traces_zero_the_bracket() {
        let mut rng = StdRng::seed_from_u64(4);
        for _ in 0..20 {
            let mut traces = random_traces(&mut rng);
            for v in traces.values_mut() {
                v.1 = v.0;
            }
            let n = random_normal(&mut rng);
            for expr in [maxwell_e_flux(1.0), maxwell_h_flux(1.0)] {
                let Value::Vec3(out) = interpret(&expr, &traces, n).unwrap() else {
                    panic!()
                };
                for c in out {
                    assert!(c.abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn central_flux_cross_product_example() {
        let mut traces = HashMap::new();
        traces.insert(
            "E".to_string(),
            (Value::Vec3([0.0; 3]), Value::Vec3([0.0; 3])),
        );
        traces.insert(
            "H".to_string(),
            (Value::Vec3([0.0, 0.0, 1.0]), Value::Vec3([0.0; 3])),
        );
        let got = interpret(&maxwell_e_flux(0.0), &traces, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(got, Value::Vec3([0.0, -0.5, 0.0]));
    }

    #[test]
    fn maxwell_lowering_has_six_outputs_and_matches_interpreter() {
        let mut rng = StdRng::seed_from_u64(5);
        for alpha in [0.0, 0.37, 1.0] {
            let spec = maxwell_spec(alpha);
            let low = lower(&spec).unwrap();
            assert_eq!(low.outputs.len(), 6);
            assert_eq!(low.num_components(), 6);
            for _ in 0..1000 {
                let traces = random_traces(&mut rng);
                let n = random_normal(&mut rng);
                let flat = |side: usize| -> Vec<f64> {
                    let mut out = Vec::new();
                    for f in ["E", "H"] {
                        let pair = traces[f];
                        let v = if side == 0 { pair.0 } else { pair.1 };
                        let Value::Vec3(v) = v else { unreachable!() };
                        out.extend_from_slice(&v);
                    }
                    out
                };
                let got = low.evaluate(&flat(0), &flat(1), n);
                let want_e = interpret(&spec.outputs[0].1, &traces, n).unwrap();
                let want_h = interpret(&spec.outputs[1].1, &traces, n).unwrap();
                let (Value::Vec3(we), Value::Vec3(wh)) = (want_e, want_h) else {
                    unreachable!()
                };
                let want = [we[0], we[1], we[2], wh[0], wh[1], wh[2]];
                for (g, w) in got.iter().zip(want) {
                    let scale = w.abs().max(1.0);
                    assert!(
                        (g - w).abs() < 1e-14 * scale,
                        "alpha {alpha}: lowered {g} vs interpreted {w}"
                    );
                }
            }
        }
    }

    #[test]
    fn advection_lowering_matches_interpreter() {
        let mut rng = StdRng::seed_from_u64(6);
        let spec = advection_spec([1.0, 0.5, 0.25], 1.0);
        let low = lower(&spec).unwrap();
        assert_eq!(low.outputs.len(), 1);
        for _ in 0..1000 {
            let um = rng.gen_range(-1.0..1.0);
            let up = rng.gen_range(-1.0..1.0);
            let n = random_normal(&mut rng);
            let mut traces = HashMap::new();
            traces.insert("u".to_string(), (Value::Scalar(um), Value::Scalar(up)));
            let got = low.evaluate(&[um], &[up], n);
            let Value::Scalar(want) = interpret(&spec.outputs[0].1, &traces, n).unwrap()
            else {
                unreachable!()
            };
            assert!((got[0] - want).abs() < 1e-14 * want.abs().max(1.0));
        }
    }

    #[test]
    fn constant_folding_strips_zero_alpha_terms() {
        let central = lower(&advection_spec([1.0, 0.5, 0.25], 0.0)).unwrap();
        assert!(
            !central.nodes.iter().any(|n| matches!(n, ScalarNode::Abs(_))),
            "alpha = 0 must fold away the upwind |n.a| term"
        );
        let upwind = lower(&advection_spec([1.0, 0.5, 0.25], 1.0)).unwrap();
        assert!(central.nodes.len() < upwind.nodes.len());
        let mx0 = lower(&maxwell_spec(0.0)).unwrap();
        let mx1 = lower(&maxwell_spec(1.0)).unwrap();
        assert!(mx0.nodes.len() < mx1.nodes.len());
        assert!(!mx0.nodes.iter().any(|n| n.is_lit(0.0)));
    }

    #[test]
    fn lowering_is_deterministic_and_dumpable() {
        let a = lower(&maxwell_spec(1.0)).unwrap().to_string();
        let b = lower(&maxwell_spec(1.0)).unwrap().to_string();
        assert_eq!(a, b);
        let out_lines = a.lines().filter(|l| l.starts_with("out ")).count();
        assert_eq!(out_lines, 6);
    }

    #[test]
    fn cse_shares_repeated_subexpressions() {
        // n x jump(E) appears in both outputs of the upwind Maxwell flux
        // via jump traces; temp count must be well below the unshared tree
        // size.
        let low = lower(&maxwell_spec(1.0)).unwrap();
        let trace_nodes = low
            .nodes
            .iter()
            .filter(|n| matches!(n, ScalarNode::Trace { .. }))
            .count();
        // 6 components x 2 sides, each used once thanks to CSE.
        assert_eq!(trace_nodes, 12);
    }

    #[test]
    fn flop_count_counts_arithmetic_nodes() {
        let low = lower(&advection_spec([1.0, 0.0, 0.0], 0.0)).unwrap();
        // n.a folds to n.x outright, leaving the jump subtraction, the
        // product with the jump, and the half scaling.
        assert_eq!(low.flop_count(), 3);
    }

    #[test]
    fn output_coverage_is_enforced() {
        let spec = FluxSpec {
            fields: maxwell_fields(),
            outputs: vec![("E".to_string(), maxwell_e_flux(1.0))],
            params: Vec::new(),
        };
        assert!(lower(&spec).is_err());
    }
}
