//! Semantic analysis for the kernel dialect: name resolution, strict
//! typing, lane-taint analysis, and fission of the per-lane body into
//! barrier-delimited segments. The result is a typed, laned IR shared by
//! the interpreter and the C emitter.
//!
//! Taint marks values that can differ between lanes (anything derived from
//! `LID`, including control dependences). Barriers are legal only under
//! lane-uniform control flow, which the fission pass enforces.

use std::collections::HashMap;

use super::dialect::{ParamKind, Pos, UExpr, UKernel, UParam, UStmt};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ty {
    Int,
    Real,
    Bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IBinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RBinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// Typed integer expression.
#[derive(Debug, Clone)]
pub enum IExpr {
    Lit(i64),
    Lid,
    Gid,
    Local(usize),
    Param(usize),
    LoadIntBuf { buf: usize, index: Box<IExpr> },
    Bin(IBinOp, Box<IExpr>, Box<IExpr>),
    Neg(Box<IExpr>),
}

/// Typed real expression.
#[derive(Debug, Clone)]
pub enum RExpr {
    Lit(f64),
    Local(usize),
    Param(usize),
    LoadBuf { buf: usize, index: IExpr },
    LoadShared { shared: usize, index: IExpr },
    LoadStatic { statik: usize, index: IExpr },
    Bin(RBinOp, Box<RExpr>, Box<RExpr>),
    Neg(Box<RExpr>),
    Abs(Box<RExpr>),
}

/// Typed boolean expression (conditions only).
#[derive(Debug, Clone)]
pub enum BExpr {
    CmpI(CmpOp, IExpr, IExpr),
    CmpR(CmpOp, RExpr, RExpr),
    And(Box<BExpr>, Box<BExpr>),
    Or(Box<BExpr>, Box<BExpr>),
    Not(Box<BExpr>),
}

/// Typed statement inside a lane segment (no barriers).
#[derive(Debug, Clone)]
pub enum Stmt {
    SetInt { slot: usize, value: IExpr },
    SetReal { slot: usize, value: RExpr },
    StoreBuf { buf: usize, index: IExpr, value: RExpr },
    StoreShared { shared: usize, index: IExpr, value: RExpr },
    For { var: usize, start: IExpr, end: IExpr, body: Vec<Stmt> },
    If { cond: BExpr, then_body: Vec<Stmt>, else_body: Vec<Stmt> },
}

/// Barrier-fissioned statement: lane segments separated by uniform control
/// structure. A barrier is exactly the boundary between two `Lanes` runs.
#[derive(Debug, Clone)]
pub enum LanedStmt {
    /// Execute for every lane in order; contains no barrier.
    Lanes(Vec<Stmt>),
    UniformFor { var: usize, start: IExpr, end: IExpr, body: Vec<LanedStmt> },
    UniformIf { cond: BExpr, then_body: Vec<LanedStmt>, else_body: Vec<LanedStmt> },
}

/// How a local is materialized by the C emitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalClass {
    /// Lane-uniform value: one scalar.
    Uniform,
    /// Lane-varying value: one slot per lane.
    PerLane,
    /// Loop induction variable, scoped to its loop.
    LoopVar,
}

#[derive(Debug, Clone)]
pub struct LocalInfo {
    pub name: String,
    pub ty: Ty,
    pub class: LocalClass,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
}

/// Fully checked kernel in laned form.
#[derive(Debug, Clone)]
pub struct LanedKernel {
    pub name: String,
    pub lanes: usize,
    pub single_precision: bool,
    pub params: Vec<Param>,
    /// Shared arrays (name, length in words).
    pub shared: Vec<(String, usize)>,
    /// Constant arrays baked into the kernel text (name, values).
    pub statics: Vec<(String, Vec<f64>)>,
    pub locals: Vec<LocalInfo>,
    pub body: Vec<LanedStmt>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Sym {
    Param(usize),
    Shared(usize),
    Static(usize),
    Local(usize),
}

struct Checker {
    params: Vec<Param>,
    shared: Vec<(String, usize)>,
    statics: Vec<(String, Vec<f64>)>,
    locals: Vec<LocalInfo>,
    /// All names ever declared (uniqueness is kernel-wide).
    names: HashMap<String, Sym>,
    /// Scope stack for visibility; inner vectors list names going out of
    /// scope.
    scopes: Vec<Vec<String>>,
    visible: HashMap<String, Sym>,
    /// Taint dependency edges: local -> depends on LID directly or on
    /// other locals (by slot).
    dep_lid: Vec<bool>,
    dep_slots: Vec<Vec<usize>>,
}

/// Dependencies of an expression for the taint fixpoint.
#[derive(Default, Clone)]
struct Deps {
    lid: bool,
    slots: Vec<usize>,
}

impl Deps {
    fn merge(&mut self, other: &Deps) {
        self.lid |= other.lid;
        self.slots.extend_from_slice(&other.slots);
    }
}

impl Checker {
    fn new(params: &[UParam]) -> Result<Self> {
        let mut c = Checker {
            params: Vec::new(),
            shared: Vec::new(),
            statics: Vec::new(),
            locals: Vec::new(),
            names: HashMap::new(),
            scopes: vec![Vec::new()],
            visible: HashMap::new(),
            dep_lid: Vec::new(),
            dep_slots: Vec::new(),
        };
        for p in params {
            c.declare(&p.name, Sym::Param(c.params.len()), p.pos)?;
            c.params.push(Param {
                name: p.name.clone(),
                kind: p.kind,
            });
        }
        Ok(c)
    }

    fn declare(&mut self, name: &str, sym: Sym, pos: Pos) -> Result<()> {
        if name == "LID" || name == "GID" || name == "fabs" {
            return Err(pos.err(format!("`{name}` is a reserved builtin")));
        }
        if self.names.contains_key(name) {
            return Err(pos.err(format!(
                "`{name}` is already declared; kernel names must be unique"
            )));
        }
        self.names.insert(name.to_string(), sym);
        self.visible.insert(name.to_string(), sym);
        self.scopes.last_mut().unwrap().push(name.to_string());
        Ok(())
    }

    fn push_scope(&mut self) {
        self.scopes.push(Vec::new());
    }

    fn pop_scope(&mut self) {
        for name in self.scopes.pop().unwrap() {
            self.visible.remove(&name);
        }
    }

    fn new_local(&mut self, name: &str, ty: Ty, class: LocalClass, pos: Pos) -> Result<usize> {
        let slot = self.locals.len();
        self.declare(name, Sym::Local(slot), pos)?;
        self.locals.push(LocalInfo {
            name: name.to_string(),
            ty,
            class,
        });
        self.dep_lid.push(false);
        self.dep_slots.push(Vec::new());
        Ok(slot)
    }

    fn lookup(&self, name: &str, pos: Pos) -> Result<Sym> {
        self.visible
            .get(name)
            .copied()
            .ok_or_else(|| pos.err(format!("unknown name `{name}`")))
    }

    /// Record that `slot` is assigned a value with dependencies `deps`
    /// under control context `ctx`.
    fn record_assign(&mut self, slot: usize, deps: &Deps, ctx: &Deps) {
        self.dep_lid[slot] |= deps.lid | ctx.lid;
        self.dep_slots[slot].extend_from_slice(&deps.slots);
        self.dep_slots[slot].extend_from_slice(&ctx.slots);
    }

    /// Type an expression as an integer.
    fn int_expr(&mut self, e: &UExpr, deps: &mut Deps) -> Result<IExpr> {
        let (expr, ty) = self.expr(e, deps)?;
        match ty {
            Ty::Int => Ok(expr.into_int()),
            other => Err(e.pos().err(format!("expected int expression, found {other:?}"))),
        }
    }

    fn real_expr(&mut self, e: &UExpr, deps: &mut Deps) -> Result<RExpr> {
        let (expr, ty) = self.expr(e, deps)?;
        match ty {
            Ty::Real => Ok(expr.into_real()),
            other => Err(e.pos().err(format!("expected real expression, found {other:?}"))),
        }
    }

    fn bool_expr(&mut self, e: &UExpr, deps: &mut Deps) -> Result<BExpr> {
        let (expr, ty) = self.expr(e, deps)?;
        match ty {
            Ty::Bool => Ok(expr.into_bool()),
            other => Err(e.pos().err(format!("expected condition, found {other:?}"))),
        }
    }

    fn expr(&mut self, e: &UExpr, deps: &mut Deps) -> Result<(AnyExpr, Ty)> {
        match e {
            UExpr::IntLit(v, _) => Ok((AnyExpr::I(IExpr::Lit(*v)), Ty::Int)),
            UExpr::RealLit(v, _) => Ok((AnyExpr::R(RExpr::Lit(*v)), Ty::Real)),
            UExpr::Ident(name, pos) => {
                if name == "LID" {
                    deps.lid = true;
                    return Ok((AnyExpr::I(IExpr::Lid), Ty::Int));
                }
                if name == "GID" {
                    return Ok((AnyExpr::I(IExpr::Gid), Ty::Int));
                }
                match self.lookup(name, *pos)? {
                    Sym::Local(slot) => {
                        deps.slots.push(slot);
                        match self.locals[slot].ty {
                            Ty::Int => Ok((AnyExpr::I(IExpr::Local(slot)), Ty::Int)),
                            Ty::Real => Ok((AnyExpr::R(RExpr::Local(slot)), Ty::Real)),
                            Ty::Bool => unreachable!("no bool locals"),
                        }
                    }
                    Sym::Param(idx) => match self.params[idx].kind {
                        ParamKind::IntScalar => Ok((AnyExpr::I(IExpr::Param(idx)), Ty::Int)),
                        ParamKind::RealScalar => Ok((AnyExpr::R(RExpr::Param(idx)), Ty::Real)),
                        _ => Err(pos.err(format!("buffer `{name}` must be indexed"))),
                    },
                    Sym::Shared(_) => Err(pos.err(format!("shared array `{name}` must be indexed"))),
                    Sym::Static(_) => Err(pos.err(format!("static array `{name}` must be indexed"))),
                }
            }
            UExpr::Index(name, idx, pos) => {
                let mut idx_deps = Deps::default();
                let index = self.int_expr(idx, &mut idx_deps)?;
                // A load's value varies between lanes only if its address
                // does.
                deps.merge(&idx_deps);
                match self.lookup(name, *pos)? {
                    Sym::Param(buf) => match self.params[buf].kind {
                        ParamKind::RealBuf { .. } => {
                            Ok((AnyExpr::R(RExpr::LoadBuf { buf, index }), Ty::Real))
                        }
                        ParamKind::IntBuf { .. } => Ok((
                            AnyExpr::I(IExpr::LoadIntBuf {
                                buf,
                                index: Box::new(index),
                            }),
                            Ty::Int,
                        )),
                        _ => Err(pos.err(format!("`{name}` is a scalar, not a buffer"))),
                    },
                    Sym::Shared(shared) => {
                        Ok((AnyExpr::R(RExpr::LoadShared { shared, index }), Ty::Real))
                    }
                    Sym::Static(statik) => {
                        Ok((AnyExpr::R(RExpr::LoadStatic { statik, index }), Ty::Real))
                    }
                    Sym::Local(_) => Err(pos.err(format!("local `{name}` cannot be indexed"))),
                }
            }
            UExpr::Un("-", inner, pos) => {
                let (expr, ty) = self.expr(inner, deps)?;
                match ty {
                    Ty::Int => Ok((AnyExpr::I(IExpr::Neg(Box::new(expr.into_int()))), Ty::Int)),
                    Ty::Real => Ok((AnyExpr::R(RExpr::Neg(Box::new(expr.into_real()))), Ty::Real)),
                    Ty::Bool => Err(pos.err("cannot negate a condition")),
                }
            }
            UExpr::Un("!", inner, _) => {
                let b = self.bool_expr(inner, deps)?;
                Ok((AnyExpr::B(BExpr::Not(Box::new(b))), Ty::Bool))
            }
            UExpr::Un(op, _, pos) => Err(pos.err(format!("unknown unary operator `{op}`"))),
            UExpr::Call(name, args, pos) => {
                if name != "fabs" {
                    return Err(pos.err(format!("unknown builtin `{name}`")));
                }
                if args.len() != 1 {
                    return Err(pos.err("fabs takes exactly one argument"));
                }
                let arg = self.real_expr(&args[0], deps)?;
                Ok((AnyExpr::R(RExpr::Abs(Box::new(arg))), Ty::Real))
            }
            UExpr::Bin(op, lhs, rhs, pos) => {
                if matches!(*op, "&&" | "||") {
                    let l = self.bool_expr(lhs, deps)?;
                    let r = self.bool_expr(rhs, deps)?;
                    let node = if *op == "&&" {
                        BExpr::And(Box::new(l), Box::new(r))
                    } else {
                        BExpr::Or(Box::new(l), Box::new(r))
                    };
                    return Ok((AnyExpr::B(node), Ty::Bool));
                }
                let (le, lt) = self.expr(lhs, deps)?;
                let (re, rt) = self.expr(rhs, deps)?;
                if lt != rt {
                    return Err(pos.err(format!(
                        "operands of `{op}` have mismatched types {lt:?} and {rt:?}"
                    )));
                }
                if let Some(cmp) = cmp_op(op) {
                    return match lt {
                        Ty::Int => Ok((
                            AnyExpr::B(BExpr::CmpI(cmp, le.into_int(), re.into_int())),
                            Ty::Bool,
                        )),
                        Ty::Real => Ok((
                            AnyExpr::B(BExpr::CmpR(cmp, le.into_real(), re.into_real())),
                            Ty::Bool,
                        )),
                        Ty::Bool => Err(pos.err("cannot compare conditions")),
                    };
                }
                match lt {
                    Ty::Int => {
                        let bin = match *op {
                            "+" => IBinOp::Add,
                            "-" => IBinOp::Sub,
                            "*" => IBinOp::Mul,
                            "/" => IBinOp::Div,
                            "%" => IBinOp::Rem,
                            _ => return Err(pos.err(format!("unknown operator `{op}`"))),
                        };
                        Ok((
                            AnyExpr::I(IExpr::Bin(
                                bin,
                                Box::new(le.into_int()),
                                Box::new(re.into_int()),
                            )),
                            Ty::Int,
                        ))
                    }
                    Ty::Real => {
                        let bin = match *op {
                            "+" => RBinOp::Add,
                            "-" => RBinOp::Sub,
                            "*" => RBinOp::Mul,
                            "/" => RBinOp::Div,
                            "%" => return Err(pos.err("`%` is defined on ints only")),
                            _ => return Err(pos.err(format!("unknown operator `{op}`"))),
                        };
                        Ok((
                            AnyExpr::R(RExpr::Bin(
                                bin,
                                Box::new(le.into_real()),
                                Box::new(re.into_real()),
                            )),
                            Ty::Real,
                        ))
                    }
                    Ty::Bool => Err(pos.err(format!("`{op}` is not defined on conditions"))),
                }
            }
        }
    }

    /// Type a barrier-free statement list (inside a lane segment).
    fn lane_stmts(&mut self, stmts: &[UStmt], ctx: &Deps) -> Result<Vec<Stmt>> {
        let mut out = Vec::new();
        for s in stmts {
            out.push(self.lane_stmt(s, ctx)?);
        }
        Ok(out)
    }

    fn lane_stmt(&mut self, s: &UStmt, ctx: &Deps) -> Result<Stmt> {
        match s {
            UStmt::Barrier { pos } => Err(pos.err(
                "barrier under lane-divergent control flow; barriers require lane-uniform \
                 conditions and bounds",
            )),
            UStmt::Shared { pos, .. } => {
                Err(pos.err("shared declarations are allowed only at the top level"))
            }
            UStmt::StaticReal { pos, .. } => {
                Err(pos.err("static declarations are allowed only at the top level"))
            }
            UStmt::DeclInt { name, init, pos } => {
                let mut deps = Deps::default();
                let value = self.int_expr(init, &mut deps)?;
                let slot = self.new_local(name, Ty::Int, LocalClass::Uniform, *pos)?;
                self.record_assign(slot, &deps, ctx);
                Ok(Stmt::SetInt { slot, value })
            }
            UStmt::DeclReal { name, init, pos } => {
                let mut deps = Deps::default();
                let value = self.real_expr(init, &mut deps)?;
                let slot = self.new_local(name, Ty::Real, LocalClass::Uniform, *pos)?;
                self.record_assign(slot, &deps, ctx);
                Ok(Stmt::SetReal { slot, value })
            }
            UStmt::Assign { target, value, pos } => match target {
                UExpr::Ident(name, tpos) => {
                    let sym = self.lookup(name, *tpos)?;
                    let Sym::Local(slot) = sym else {
                        return Err(tpos.err(format!(
                            "`{name}` is not assignable; only locals and buffer elements are"
                        )));
                    };
                    let mut deps = Deps::default();
                    match self.locals[slot].ty {
                        Ty::Int => {
                            let value = self.int_expr(value, &mut deps)?;
                            self.record_assign(slot, &deps, ctx);
                            Ok(Stmt::SetInt { slot, value })
                        }
                        Ty::Real => {
                            let value = self.real_expr(value, &mut deps)?;
                            self.record_assign(slot, &deps, ctx);
                            Ok(Stmt::SetReal { slot, value })
                        }
                        Ty::Bool => unreachable!(),
                    }
                }
                UExpr::Index(name, idx, tpos) => {
                    let mut deps = Deps::default();
                    let index = self.int_expr(idx, &mut deps)?;
                    let value = self.real_expr(value, &mut deps)?;
                    match self.lookup(name, *tpos)? {
                        Sym::Param(buf) => match self.params[buf].kind {
                            ParamKind::RealBuf { constant: false } => {
                                Ok(Stmt::StoreBuf { buf, index, value })
                            }
                            ParamKind::RealBuf { constant: true } => {
                                Err(tpos.err(format!("buffer `{name}` is const")))
                            }
                            ParamKind::IntBuf { .. } => {
                                Err(tpos.err("int buffers are read-only index tables"))
                            }
                            _ => Err(tpos.err(format!("`{name}` is a scalar, not a buffer"))),
                        },
                        Sym::Shared(shared) => Ok(Stmt::StoreShared { shared, index, value }),
                        Sym::Static(_) => {
                            Err(tpos.err(format!("static array `{name}` is read-only")))
                        }
                        Sym::Local(_) => Err(tpos.err(format!("local `{name}` cannot be indexed"))),
                    }
                }
                _ => Err(pos.err("assignment target must be a name or element")),
            },
            UStmt::For { var, start, end, body, pos } => {
                let mut deps = Deps::default();
                let start = self.int_expr(start, &mut deps)?;
                let end = self.int_expr(end, &mut deps)?;
                self.push_scope();
                let slot = self.new_local(var, Ty::Int, LocalClass::LoopVar, *pos)?;
                self.record_assign(slot, &deps, ctx);
                let mut inner_ctx = ctx.clone();
                inner_ctx.merge(&deps);
                let body = self.lane_stmts(body, &inner_ctx)?;
                self.pop_scope();
                Ok(Stmt::For { var: slot, start, end, body })
            }
            UStmt::If { cond, then_body, else_body, .. } => {
                let mut deps = Deps::default();
                let cond = self.bool_expr(cond, &mut deps)?;
                let mut inner_ctx = ctx.clone();
                inner_ctx.merge(&deps);
                self.push_scope();
                let then_body = self.lane_stmts(then_body, &inner_ctx)?;
                self.pop_scope();
                self.push_scope();
                let else_body = self.lane_stmts(else_body, &inner_ctx)?;
                self.pop_scope();
                Ok(Stmt::If { cond, then_body, else_body })
            }
        }
    }
}

enum AnyExpr {
    I(IExpr),
    R(RExpr),
    B(BExpr),
}

impl AnyExpr {
    fn into_int(self) -> IExpr {
        match self {
            AnyExpr::I(e) => e,
            _ => unreachable!("type checked"),
        }
    }
    fn into_real(self) -> RExpr {
        match self {
            AnyExpr::R(e) => e,
            _ => unreachable!("type checked"),
        }
    }
    fn into_bool(self) -> BExpr {
        match self {
            AnyExpr::B(e) => e,
            _ => unreachable!("type checked"),
        }
    }
}

fn cmp_op(op: &str) -> Option<CmpOp> {
    Some(match op {
        "==" => CmpOp::Eq,
        "!=" => CmpOp::Ne,
        "<" => CmpOp::Lt,
        "<=" => CmpOp::Le,
        ">" => CmpOp::Gt,
        ">=" => CmpOp::Ge,
        _ => return None,
    })
}

fn contains_barrier(stmts: &[UStmt]) -> bool {
    stmts.iter().any(|s| match s {
        UStmt::Barrier { .. } => true,
        UStmt::For { body, .. } => contains_barrier(body),
        UStmt::If { then_body, else_body, .. } => {
            contains_barrier(then_body) || contains_barrier(else_body)
        }
        _ => false,
    })
}

/// Intermediate fission product before taint resolution.
enum RawLaned {
    Lanes(Vec<Stmt>),
    UniformFor {
        var: usize,
        start: IExpr,
        end: IExpr,
        body: Vec<RawLaned>,
        header_deps: Deps,
        pos: Pos,
    },
    UniformIf {
        cond: BExpr,
        then_body: Vec<RawLaned>,
        else_body: Vec<RawLaned>,
        cond_deps: Deps,
        pos: Pos,
    },
}

fn fission(c: &mut Checker, stmts: &[UStmt], top_level: bool, out: &mut Vec<RawLaned>) -> Result<()> {
    let mut pending: Vec<UStmt> = Vec::new();
    let flush = |c: &mut Checker, pending: &mut Vec<UStmt>, out: &mut Vec<RawLaned>| -> Result<()> {
        if !pending.is_empty() {
            let stmts = c.lane_stmts(pending, &Deps::default())?;
            out.push(RawLaned::Lanes(stmts));
            pending.clear();
        }
        Ok(())
    };
    for s in stmts {
        match s {
            UStmt::Shared { name, size, pos } => {
                if !top_level {
                    return Err(pos.err("shared declarations are allowed only at the top level"));
                }
                flush(c, &mut pending, out)?;
                let idx = c.shared.len();
                c.declare(name, Sym::Shared(idx), *pos)?;
                c.shared.push((name.clone(), *size as usize));
            }
            UStmt::StaticReal { name, values, pos } => {
                if !top_level {
                    return Err(pos.err("static declarations are allowed only at the top level"));
                }
                if values.is_empty() {
                    return Err(pos.err("static array needs at least one value"));
                }
                flush(c, &mut pending, out)?;
                let idx = c.statics.len();
                c.declare(name, Sym::Static(idx), *pos)?;
                c.statics.push((name.clone(), values.clone()));
            }
            UStmt::Barrier { .. } => {
                flush(c, &mut pending, out)?;
            }
            UStmt::For { var, start, end, body, pos } if contains_barrier(body) => {
                flush(c, &mut pending, out)?;
                let mut header_deps = Deps::default();
                let start = c.int_expr(start, &mut header_deps)?;
                let end = c.int_expr(end, &mut header_deps)?;
                c.push_scope();
                let slot = c.new_local(var, Ty::Int, LocalClass::LoopVar, *pos)?;
                c.record_assign(slot, &header_deps, &Deps::default());
                let mut inner = Vec::new();
                fission(c, body, false, &mut inner)?;
                c.pop_scope();
                out.push(RawLaned::UniformFor {
                    var: slot,
                    start,
                    end,
                    body: inner,
                    header_deps,
                    pos: *pos,
                });
            }
            UStmt::If { cond, then_body, else_body, pos }
                if contains_barrier(then_body) || contains_barrier(else_body) =>
            {
                flush(c, &mut pending, out)?;
                let mut cond_deps = Deps::default();
                let cond = c.bool_expr(cond, &mut cond_deps)?;
                c.push_scope();
                let mut then_l = Vec::new();
                fission(c, then_body, false, &mut then_l)?;
                c.pop_scope();
                c.push_scope();
                let mut else_l = Vec::new();
                fission(c, else_body, false, &mut else_l)?;
                c.pop_scope();
                out.push(RawLaned::UniformIf {
                    cond,
                    then_body: then_l,
                    else_body: else_l,
                    cond_deps,
                    pos: *pos,
                });
            }
            other => pending.push(other.clone()),
        }
    }
    flush(c, &mut pending, out)?;
    Ok(())
}

/// Resolve the taint fixpoint: a local is lane-varying if it (transitively)
/// depends on LID.
fn taint_fixpoint(c: &Checker) -> Vec<bool> {
    let n = c.locals.len();
    let mut tainted: Vec<bool> = c.dep_lid.clone();
    loop {
        let mut changed = false;
        for slot in 0..n {
            if tainted[slot] {
                continue;
            }
            if c.dep_slots[slot].iter().any(|&d| tainted[d]) {
                tainted[slot] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    tainted
}

fn deps_tainted(deps: &Deps, tainted: &[bool]) -> bool {
    deps.lid || deps.slots.iter().any(|&s| tainted[s])
}

fn finalize(raw: Vec<RawLaned>, tainted: &[bool]) -> Result<Vec<LanedStmt>> {
    let mut out = Vec::new();
    for r in raw {
        out.push(match r {
            RawLaned::Lanes(v) => LanedStmt::Lanes(v),
            RawLaned::UniformFor { var, start, end, body, header_deps, pos } => {
                if deps_tainted(&header_deps, tainted) {
                    return Err(pos.err(
                        "loop contains a barrier but its bounds vary between lanes",
                    ));
                }
                LanedStmt::UniformFor {
                    var,
                    start,
                    end,
                    body: finalize(body, tainted)?,
                }
            }
            RawLaned::UniformIf { cond, then_body, else_body, cond_deps, pos } => {
                if deps_tainted(&cond_deps, tainted) {
                    return Err(pos.err(
                        "branch contains a barrier but its condition varies between lanes",
                    ));
                }
                LanedStmt::UniformIf {
                    cond,
                    then_body: finalize(then_body, tainted)?,
                    else_body: finalize(else_body, tainted)?,
                }
            }
        });
    }
    Ok(out)
}

/// Check a parsed kernel and lower it to laned form.
pub fn check(k: &UKernel) -> Result<LanedKernel> {
    let mut c = Checker::new(&k.params)?;
    let mut raw = Vec::new();
    fission(&mut c, &k.body, true, &mut raw)?;
    let tainted = taint_fixpoint(&c);
    let body = finalize(raw, &tainted)?;
    let mut locals = c.locals;
    for (slot, info) in locals.iter_mut().enumerate() {
        if info.class == LocalClass::LoopVar {
            continue;
        }
        info.class = if tainted[slot] {
            LocalClass::PerLane
        } else {
            LocalClass::Uniform
        };
    }
    Ok(LanedKernel {
        name: k.name.clone(),
        lanes: k.lanes,
        single_precision: k.single_precision,
        params: c.params,
        shared: c.shared,
        statics: c.statics,
        locals,
        body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::executor::dialect::parse;

    fn check_src(src: &str) -> Result<LanedKernel> {
        check(&parse(src)?)
    }

    #[test]
    fn fission_splits_at_barriers() {
        let src = "\
kernel t(global real* y, global const real* x) lanes 4 f64 {
  shared real s[4];
  s[LID] = x[LID];
  barrier;
  y[GID * 4 + LID] = s[(LID + 1) % 4];
}";
        let k = check_src(src).unwrap();
        assert_eq!(k.shared, vec![("s".to_string(), 4)]);
        assert_eq!(k.body.len(), 2, "two lane segments around the barrier");
        assert!(matches!(k.body[0], LanedStmt::Lanes(_)));
        assert!(matches!(k.body[1], LanedStmt::Lanes(_)));
    }

    #[test]
    fn barrier_inside_uniform_loop_is_hoisted() {
        let src = "\
kernel t(global real* y, int n) lanes 4 f64 {
  shared real s[4];
  for p = 0 to n {
    s[LID] = 1.0;
    barrier;
    y[p * 4 + LID] = s[LID];
    barrier;
  }
}";
        let k = check_src(src).unwrap();
        assert_eq!(k.body.len(), 1);
        let LanedStmt::UniformFor { body, .. } = &k.body[0] else {
            panic!("expected uniform loop, got {:?}", k.body[0])
        };
        assert_eq!(body.len(), 2, "loop body splits into two lane segments");
    }

    #[test]
    fn barrier_under_lane_condition_is_rejected() {
        let src = "\
kernel t(global real* y) lanes 4 f64 {
  if (LID < 2) {
    barrier;
  }
  y[LID] = 0.0;
}";
        match check_src(src) {
            Err(Error::Dialect { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("varies between lanes"), "got: {msg}");
            }
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn taint_flows_through_locals_transitively() {
        let src = "\
kernel t(global real* y, int n) lanes 4 f64 {
  int a = LID * 2;
  int b = a + 1;
  int c = n + 3;
  for p = 0 to b {
    barrier;
  }
  y[c] = 0.0;
}";
        match check_src(src) {
            Err(Error::Dialect { msg, .. }) => {
                assert!(msg.contains("bounds vary"), "got: {msg}");
            }
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn control_dependence_taints_assignments() {
        // `u` is assigned a uniform value but only on lanes where LID < 2,
        // so it must be classified per-lane.
        let src = "\
kernel t(global real* y, int n) lanes 4 f64 {
  int u = 0;
  if (LID < 2) {
    u = n;
  }
  y[LID] = 0.0;
}";
        let k = check_src(src).unwrap();
        let u = k.locals.iter().find(|l| l.name == "u").unwrap();
        assert_eq!(u.class, LocalClass::PerLane);
    }

    #[test]
    fn uniform_locals_stay_uniform() {
        let src = "\
kernel t(global real* y, int n) lanes 4 f64 {
  int base = GID * n;
  real half = 0.5;
  y[base + LID] = half;
}";
        let k = check_src(src).unwrap();
        for name in ["base", "half"] {
            let info = k.locals.iter().find(|l| l.name == name).unwrap();
            assert_eq!(info.class, LocalClass::Uniform, "{name}");
        }
    }

    #[test]
    fn type_errors_are_located() {
        let src = "kernel t(global real* y, int n) lanes 1 f64 {\n  y[0] = n;\n}";
        match check_src(src) {
            Err(Error::Dialect { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("expected real"), "got: {msg}");
            }
            other => panic!("expected type error, got {other:?}"),
        }
        assert!(check_src("kernel t() lanes 1 f64 { int x = 1.5; }").is_err());
        assert!(check_src("kernel t(global real* y) lanes 1 f64 { y[0.5] = 1.0; }").is_err());
    }

    #[test]
    fn name_rules_are_enforced() {
        assert!(check_src("kernel t(int n, int n) lanes 1 f64 {}").is_err());
        assert!(check_src("kernel t() lanes 1 f64 { int a = 1; real a = 2.0; }").is_err());
        assert!(check_src("kernel t() lanes 1 f64 { int LID = 1; }").is_err());
        assert!(check_src("kernel t(global real* y) lanes 1 f64 { y[z] = 1.0; }").is_err());
    }

    #[test]
    fn const_and_scalar_write_protection() {
        assert!(
            check_src("kernel t(global const real* x) lanes 1 f64 { x[0] = 1.0; }").is_err()
        );
        assert!(check_src("kernel t(global const int* i) lanes 1 f64 { i[0] = 1; }").is_err());
        assert!(check_src("kernel t(real a) lanes 1 f64 { a = 1.0; }").is_err());
    }

    #[test]
    fn loop_variable_is_scoped_to_its_body() {
        let src = "\
kernel t(global real* y) lanes 1 f64 {
  for j = 0 to 4 {
    y[j] = 0.0;
  }
  y[j] = 1.0;
}";
        match check_src(src) {
            Err(Error::Dialect { msg, .. }) => assert!(msg.contains("unknown name `j`")),
            other => panic!("expected scope error, got {other:?}"),
        }
    }

    #[test]
    fn shared_must_be_top_level() {
        let src = "\
kernel t(global real* y) lanes 1 f64 {
  if (GID == 0) {
    shared real s[4];
  }
}";
        assert!(check_src(src).is_err());
    }
}
