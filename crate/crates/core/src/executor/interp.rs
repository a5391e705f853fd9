//! Structured interpreter for laned kernels. It is the semantic reference
//! for the native backend and doubles as the instrumented execution mode:
//! it counts every floating-point operation it performs, which the
//! performance-model tests compare against analytic flop counts.
//!
//! Single-precision kernels are evaluated in f64 with a rounding step after
//! every operation, which reproduces IEEE binary32 arithmetic exactly
//! (binary64 carries more than twice the significand bits, so the double
//! rounding is exact for +, -, *, /).

use super::check::{
    BExpr, CmpOp, IBinOp, IExpr, LanedKernel, LanedStmt, RBinOp, RExpr, Stmt,
};
use crate::error::{Error, Result};

/// Raw views of launch buffers, in buffer-parameter order.
pub enum BufView {
    F64(*mut f64, usize),
    F32(*mut f32, usize),
    I64(*mut i64, usize),
}

struct Ctx<'a> {
    k: &'a LanedKernel,
    gid: i64,
    lanes: i64,
    bufs: &'a [BufView],
    iargs: &'a [i64],
    fargs: &'a [f64],
    /// Per-lane local storage, indexed slot*lanes + lane.
    ints: Vec<i64>,
    reals: Vec<f64>,
    shared: Vec<Vec<f64>>,
    single: bool,
    flops: u64,
}

impl<'a> Ctx<'a> {
    fn err(&self, msg: String) -> Error {
        Error::Executor(format!("kernel `{}`: {msg}", self.k.name))
    }

    fn rnd(&self, v: f64) -> f64 {
        if self.single {
            v as f32 as f64
        } else {
            v
        }
    }

    fn eval_i(&mut self, e: &IExpr, lid: i64) -> Result<i64> {
        Ok(match e {
            IExpr::Lit(v) => *v,
            IExpr::Lid => lid,
            IExpr::Gid => self.gid,
            IExpr::Local(slot) => self.ints[slot * self.lanes as usize + lid as usize],
            IExpr::Param(p) => self.iargs[self.scalar_index(*p)],
            IExpr::LoadIntBuf { buf, index } => {
                let i = self.eval_i(index, lid)?;
                let view = &self.bufs[self.buf_index(*buf)];
                let BufView::I64(ptr, len) = view else {
                    return Err(self.err("int load from non-index buffer".into()));
                };
                self.check_bounds(i, *len)?;
                unsafe { *ptr.add(i as usize) }
            }
            IExpr::Bin(op, a, b) => {
                let x = self.eval_i(a, lid)?;
                let y = self.eval_i(b, lid)?;
                match op {
                    IBinOp::Add => x.wrapping_add(y),
                    IBinOp::Sub => x.wrapping_sub(y),
                    IBinOp::Mul => x.wrapping_mul(y),
                    IBinOp::Div => {
                        if y == 0 {
                            return Err(self.err("integer division by zero".into()));
                        }
                        x / y
                    }
                    IBinOp::Rem => {
                        if y == 0 {
                            return Err(self.err("integer remainder by zero".into()));
                        }
                        x % y
                    }
                }
            }
            IExpr::Neg(a) => -self.eval_i(a, lid)?,
        })
    }

    fn eval_r(&mut self, e: &RExpr, lid: i64) -> Result<f64> {
        Ok(match e {
            RExpr::Lit(v) => self.rnd(*v),
            RExpr::Local(slot) => self.reals[slot * self.lanes as usize + lid as usize],
            RExpr::Param(p) => self.rnd(self.fargs[self.scalar_real_index(*p)]),
            RExpr::LoadBuf { buf, index } => {
                let i = self.eval_i(index, lid)?;
                match &self.bufs[self.buf_index(*buf)] {
                    BufView::F64(ptr, len) => {
                        self.check_bounds(i, *len)?;
                        unsafe { *ptr.add(i as usize) }
                    }
                    BufView::F32(ptr, len) => {
                        self.check_bounds(i, *len)?;
                        unsafe { *ptr.add(i as usize) as f64 }
                    }
                    BufView::I64(..) => {
                        return Err(self.err("real load from index buffer".into()))
                    }
                }
            }
            RExpr::LoadShared { shared, index } => {
                let i = self.eval_i(index, lid)?;
                let arr = &self.shared[*shared];
                self.check_bounds(i, arr.len())?;
                arr[i as usize]
            }
            RExpr::LoadStatic { statik, index } => {
                let i = self.eval_i(index, lid)?;
                let arr = &self.k.statics[*statik].1;
                self.check_bounds(i, arr.len())?;
                self.rnd(arr[i as usize])
            }
            RExpr::Bin(op, a, b) => {
                let x = self.eval_r(a, lid)?;
                let y = self.eval_r(b, lid)?;
                self.flops += 1;
                self.rnd(match op {
                    RBinOp::Add => x + y,
                    RBinOp::Sub => x - y,
                    RBinOp::Mul => x * y,
                    RBinOp::Div => x / y,
                })
            }
            RExpr::Neg(a) => {
                let x = self.eval_r(a, lid)?;
                self.flops += 1;
                -x
            }
            RExpr::Abs(a) => {
                let x = self.eval_r(a, lid)?;
                self.flops += 1;
                x.abs()
            }
        })
    }

    fn eval_b(&mut self, e: &BExpr, lid: i64) -> Result<bool> {
        Ok(match e {
            BExpr::CmpI(op, a, b) => {
                let x = self.eval_i(a, lid)?;
                let y = self.eval_i(b, lid)?;
                cmp(op, &x, &y)
            }
            BExpr::CmpR(op, a, b) => {
                let x = self.eval_r(a, lid)?;
                let y = self.eval_r(b, lid)?;
                cmp(op, &x, &y)
            }
            BExpr::And(a, b) => self.eval_b(a, lid)? && self.eval_b(b, lid)?,
            BExpr::Or(a, b) => self.eval_b(a, lid)? || self.eval_b(b, lid)?,
            BExpr::Not(a) => !self.eval_b(a, lid)?,
        })
    }

    fn check_bounds(&self, i: i64, len: usize) -> Result<()> {
        if i < 0 || i as usize >= len {
            Err(self.err(format!("index {i} out of bounds for length {len}")))
        } else {
            Ok(())
        }
    }

    /// Map a param index to its position among buffer params.
    fn buf_index(&self, p: usize) -> usize {
        self.k.params[..p]
            .iter()
            .filter(|q| {
                matches!(
                    q.kind,
                    super::dialect::ParamKind::RealBuf { .. }
                        | super::dialect::ParamKind::IntBuf { .. }
                )
            })
            .count()
    }

    fn scalar_index(&self, p: usize) -> usize {
        self.k.params[..p]
            .iter()
            .filter(|q| matches!(q.kind, super::dialect::ParamKind::IntScalar))
            .count()
    }

    fn scalar_real_index(&self, p: usize) -> usize {
        self.k.params[..p]
            .iter()
            .filter(|q| matches!(q.kind, super::dialect::ParamKind::RealScalar))
            .count()
    }

    fn set_int(&mut self, slot: usize, lid: i64, v: i64) {
        self.ints[slot * self.lanes as usize + lid as usize] = v;
    }

    fn set_real(&mut self, slot: usize, lid: i64, v: f64) {
        self.reals[slot * self.lanes as usize + lid as usize] = v;
    }

    fn run_stmts(&mut self, stmts: &[Stmt], lid: i64) -> Result<()> {
        for s in stmts {
            match s {
                Stmt::SetInt { slot, value } => {
                    let v = self.eval_i(value, lid)?;
                    self.set_int(*slot, lid, v);
                }
                Stmt::SetReal { slot, value } => {
                    let v = self.eval_r(value, lid)?;
                    self.set_real(*slot, lid, v);
                }
                Stmt::StoreBuf { buf, index, value } => {
                    let i = self.eval_i(index, lid)?;
                    let v = self.eval_r(value, lid)?;
                    match &self.bufs[self.buf_index(*buf)] {
                        BufView::F64(ptr, len) => {
                            self.check_bounds(i, *len)?;
                            unsafe { *ptr.add(i as usize) = v };
                        }
                        BufView::F32(ptr, len) => {
                            self.check_bounds(i, *len)?;
                            unsafe { *ptr.add(i as usize) = v as f32 };
                        }
                        BufView::I64(..) => {
                            return Err(self.err("real store to index buffer".into()))
                        }
                    }
                }
                Stmt::StoreShared { shared, index, value } => {
                    let i = self.eval_i(index, lid)?;
                    let v = self.eval_r(value, lid)?;
                    self.check_bounds(i, self.shared[*shared].len())?;
                    self.shared[*shared][i as usize] = v;
                }
                Stmt::For { var, start, end, body } => {
                    let s = self.eval_i(start, lid)?;
                    let e = self.eval_i(end, lid)?;
                    let mut j = s;
                    while j < e {
                        self.set_int(*var, lid, j);
                        self.run_stmts(body, lid)?;
                        j += 1;
                    }
                }
                Stmt::If { cond, then_body, else_body } => {
                    if self.eval_b(cond, lid)? {
                        self.run_stmts(then_body, lid)?;
                    } else {
                        self.run_stmts(else_body, lid)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn run_laned(&mut self, body: &[LanedStmt]) -> Result<()> {
        for s in body {
            match s {
                LanedStmt::Lanes(stmts) => {
                    for lid in 0..self.lanes {
                        self.run_stmts(stmts, lid)?;
                    }
                }
                LanedStmt::UniformFor { var, start, end, body } => {
                    let s = self.eval_i(start, 0)?;
                    let e = self.eval_i(end, 0)?;
                    let mut j = s;
                    while j < e {
                        // The induction variable must be visible to every
                        // lane inside the body's segments.
                        for lid in 0..self.lanes {
                            self.set_int(*var, lid, j);
                        }
                        self.run_laned(body)?;
                        j += 1;
                    }
                }
                LanedStmt::UniformIf { cond, then_body, else_body } => {
                    if self.eval_b(cond, 0)? {
                        self.run_laned(then_body)?;
                    } else {
                        self.run_laned(else_body)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn cmp<T: PartialOrd>(op: &CmpOp, a: &T, b: &T) -> bool {
    match op {
        CmpOp::Eq => a == b,
        CmpOp::Ne => a != b,
        CmpOp::Lt => a < b,
        CmpOp::Le => a <= b,
        CmpOp::Gt => a > b,
        CmpOp::Ge => a >= b,
    }
}

/// Execute one workgroup of `k` and return the number of floating-point
/// operations performed.
pub fn execute(
    k: &LanedKernel,
    gid: i64,
    bufs: &[BufView],
    iargs: &[i64],
    fargs: &[f64],
) -> Result<u64> {
    let lanes = k.lanes as i64;
    let mut ctx = Ctx {
        k,
        gid,
        lanes,
        bufs,
        iargs,
        fargs,
        ints: vec![0; k.locals.len() * k.lanes],
        reals: vec![0.0; k.locals.len() * k.lanes],
        shared: k.shared.iter().map(|(_, n)| vec![0.0; *n]).collect(),
        single: k.single_precision,
        flops: 0,
    };
    ctx.run_laned(&k.body)?;
    Ok(ctx.flops)
}
