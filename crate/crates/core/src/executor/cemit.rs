//! Native CPU execution path: translate a laned kernel to C, compile it to
//! a shared object with the system compiler, and load the entry point with
//! dlopen. Lane semantics are realized by loop fission (one plain loop per
//! barrier-delimited segment); lane-varying locals become per-lane arrays,
//! lane-uniform locals stay scalars.
//!
//! Compilation uses `-ffp-contract=off` so the arithmetic trees emitted
//! here evaluate exactly like the reference interpreter, operation by
//! operation, in both precisions.

use std::ffi::CString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use super::check::{
    BExpr, CmpOp, IBinOp, IExpr, LanedKernel, LanedStmt, LocalClass, RBinOp, RExpr, Stmt, Ty,
};
use super::dialect::ParamKind;
use crate::error::{Error, Result};

/// Emit the complete C translation unit for a laned kernel.
pub fn emit_c(k: &LanedKernel) -> String {
    let mut e = Emitter {
        k,
        out: String::new(),
        indent: 1,
    };
    let real = if k.single_precision { "float" } else { "double" };
    let _ = writeln!(e.out, "/* kernel `{}`, translated from the dgforge dialect */", k.name);
    let _ = writeln!(e.out, "#include <stdint.h>");
    let _ = writeln!(e.out, "#include <math.h>");
    let _ = writeln!(e.out, "typedef {real} real;");
    let _ = writeln!(e.out, "#define LANES {}", k.lanes);
    for (name, values) in &k.statics {
        let _ = write!(e.out, "static const real {name}[{}] = {{", values.len());
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                e.out.push(',');
            }
            if i % 8 == 0 {
                e.out.push_str("\n  ");
            } else {
                e.out.push(' ');
            }
            let _ = write!(e.out, "(real){v:?}");
        }
        let _ = writeln!(e.out, "\n}};");
    }
    let _ = writeln!(
        e.out,
        "void dg_kernel_main(int64_t GID, void** BUFS, const int64_t* IARGS, const double* FARGS) {{"
    );
    let (mut nbuf, mut nint, mut nreal) = (0, 0, 0);
    for p in &k.params {
        match p.kind {
            ParamKind::RealBuf { constant } => {
                let c = if constant { "const " } else { "" };
                e.line(&format!("{c}real* {} = ({c}real*)BUFS[{nbuf}];", p.name));
                nbuf += 1;
            }
            ParamKind::IntBuf { .. } => {
                e.line(&format!(
                    "const int64_t* {} = (const int64_t*)BUFS[{nbuf}];",
                    p.name
                ));
                nbuf += 1;
            }
            ParamKind::IntScalar => {
                e.line(&format!("const int64_t {} = IARGS[{nint}];", p.name));
                nint += 1;
            }
            ParamKind::RealScalar => {
                e.line(&format!("const real {} = (real)FARGS[{nreal}];", p.name));
                nreal += 1;
            }
        }
    }
    for (name, size) in &k.shared {
        e.line(&format!("real {name}[{size}];"));
    }
    for info in &k.locals {
        let cty = match info.ty {
            Ty::Int => "int64_t",
            Ty::Real => "real",
            Ty::Bool => unreachable!(),
        };
        match info.class {
            LocalClass::Uniform => e.line(&format!("{cty} {};", info.name)),
            LocalClass::PerLane => e.line(&format!("{cty} {}[LANES];", info.name)),
            LocalClass::LoopVar => {} // declared in its for header
        }
    }
    e.line("(void)GID; (void)BUFS; (void)IARGS; (void)FARGS;");
    e.emit_laned(&k.body);
    let _ = writeln!(e.out, "}}");
    e.out
}

struct Emitter<'a> {
    k: &'a LanedKernel,
    out: String,
    indent: usize,
}

impl<'a> Emitter<'a> {
    fn line(&mut self, s: &str) {
        for _ in 0..self.indent {
            self.out.push_str("  ");
        }
        self.out.push_str(s);
        self.out.push('\n');
    }

    /// Name of a local as an lvalue/rvalue in the current context.
    fn local(&self, slot: usize) -> String {
        let info = &self.k.locals[slot];
        match info.class {
            LocalClass::PerLane => format!("{}[LID]", info.name),
            _ => info.name.clone(),
        }
    }

    fn iexpr(&self, e: &IExpr) -> String {
        match e {
            IExpr::Lit(v) => format!("{v}"),
            IExpr::Lid => "LID".to_string(),
            IExpr::Gid => "GID".to_string(),
            IExpr::Local(slot) => self.local(*slot),
            IExpr::Param(p) => self.k.params[*p].name.clone(),
            IExpr::LoadIntBuf { buf, index } => {
                format!("{}[{}]", self.k.params[*buf].name, self.iexpr(index))
            }
            IExpr::Bin(op, a, b) => {
                let sym = match op {
                    IBinOp::Add => "+",
                    IBinOp::Sub => "-",
                    IBinOp::Mul => "*",
                    IBinOp::Div => "/",
                    IBinOp::Rem => "%",
                };
                format!("({} {sym} {})", self.iexpr(a), self.iexpr(b))
            }
            IExpr::Neg(a) => format!("(-{})", self.iexpr(a)),
        }
    }

    fn rexpr(&self, e: &RExpr) -> String {
        match e {
            RExpr::Lit(v) => format!("((real){:?})", v),
            RExpr::Local(slot) => self.local(*slot),
            RExpr::Param(p) => self.k.params[*p].name.clone(),
            RExpr::LoadBuf { buf, index } => {
                format!("{}[{}]", self.k.params[*buf].name, self.iexpr(index))
            }
            RExpr::LoadShared { shared, index } => {
                format!("{}[{}]", self.k.shared[*shared].0, self.iexpr(index))
            }
            RExpr::LoadStatic { statik, index } => {
                format!("{}[{}]", self.k.statics[*statik].0, self.iexpr(index))
            }
            RExpr::Bin(op, a, b) => {
                let sym = match op {
                    RBinOp::Add => "+",
                    RBinOp::Sub => "-",
                    RBinOp::Mul => "*",
                    RBinOp::Div => "/",
                };
                format!("({} {sym} {})", self.rexpr(a), self.rexpr(b))
            }
            RExpr::Neg(a) => format!("(-{})", self.rexpr(a)),
            RExpr::Abs(a) => {
                let f = if self.k.single_precision { "fabsf" } else { "fabs" };
                format!("{f}({})", self.rexpr(a))
            }
        }
    }

    fn bexpr(&self, e: &BExpr) -> String {
        match e {
            BExpr::CmpI(op, a, b) => {
                format!("({} {} {})", self.iexpr(a), cmp_sym(op), self.iexpr(b))
            }
            BExpr::CmpR(op, a, b) => {
                format!("({} {} {})", self.rexpr(a), cmp_sym(op), self.rexpr(b))
            }
            BExpr::And(a, b) => format!("({} && {})", self.bexpr(a), self.bexpr(b)),
            BExpr::Or(a, b) => format!("({} || {})", self.bexpr(a), self.bexpr(b)),
            BExpr::Not(a) => format!("(!{})", self.bexpr(a)),
        }
    }

    fn emit_stmts(&mut self, stmts: &[Stmt]) {
        for s in stmts {
            match s {
                Stmt::SetInt { slot, value } => {
                    let rhs = self.iexpr(value);
                    let lhs = self.local(*slot);
                    self.line(&format!("{lhs} = {rhs};"));
                }
                Stmt::SetReal { slot, value } => {
                    let rhs = self.rexpr(value);
                    let lhs = self.local(*slot);
                    self.line(&format!("{lhs} = {rhs};"));
                }
                Stmt::StoreBuf { buf, index, value } => {
                    let line = format!(
                        "{}[{}] = {};",
                        self.k.params[*buf].name,
                        self.iexpr(index),
                        self.rexpr(value)
                    );
                    self.line(&line);
                }
                Stmt::StoreShared { shared, index, value } => {
                    let line = format!(
                        "{}[{}] = {};",
                        self.k.shared[*shared].0,
                        self.iexpr(index),
                        self.rexpr(value)
                    );
                    self.line(&line);
                }
                Stmt::For { var, start, end, body } => {
                    let v = self.k.locals[*var].name.clone();
                    let line = format!(
                        "for (int64_t {v} = {}; {v} < {}; ++{v}) {{",
                        self.iexpr(start),
                        self.iexpr(end)
                    );
                    self.line(&line);
                    self.indent += 1;
                    self.emit_stmts(body);
                    self.indent -= 1;
                    self.line("}");
                }
                Stmt::If { cond, then_body, else_body } => {
                    let line = format!("if ({}) {{", self.bexpr(cond));
                    self.line(&line);
                    self.indent += 1;
                    self.emit_stmts(then_body);
                    self.indent -= 1;
                    if else_body.is_empty() {
                        self.line("}");
                    } else {
                        self.line("} else {");
                        self.indent += 1;
                        self.emit_stmts(else_body);
                        self.indent -= 1;
                        self.line("}");
                    }
                }
            }
        }
    }

    fn emit_laned(&mut self, body: &[LanedStmt]) {
        for s in body {
            match s {
                LanedStmt::Lanes(stmts) => {
                    self.line("for (int64_t LID = 0; LID < LANES; ++LID) {");
                    self.indent += 1;
                    self.line("(void)LID;");
                    self.emit_stmts(stmts);
                    self.indent -= 1;
                    self.line("}");
                }
                LanedStmt::UniformFor { var, start, end, body } => {
                    let v = self.k.locals[*var].name.clone();
                    let line = format!(
                        "for (int64_t {v} = {}; {v} < {}; ++{v}) {{",
                        self.iexpr(start),
                        self.iexpr(end)
                    );
                    self.line(&line);
                    self.indent += 1;
                    self.emit_laned(body);
                    self.indent -= 1;
                    self.line("}");
                }
                LanedStmt::UniformIf { cond, then_body, else_body } => {
                    let line = format!("if ({}) {{", self.bexpr(cond));
                    self.line(&line);
                    self.indent += 1;
                    self.emit_laned(then_body);
                    self.indent -= 1;
                    if else_body.is_empty() {
                        self.line("}");
                    } else {
                        self.line("} else {");
                        self.indent += 1;
                        self.emit_laned(else_body);
                        self.indent -= 1;
                        self.line("}");
                    }
                }
            }
        }
    }
}

fn cmp_sym(op: &CmpOp) -> &'static str {
    match op {
        CmpOp::Eq => "==",
        CmpOp::Ne => "!=",
        CmpOp::Lt => "<",
        CmpOp::Le => "<=",
        CmpOp::Gt => ">",
        CmpOp::Ge => ">=",
    }
}

pub type KernelFn =
    unsafe extern "C" fn(i64, *mut *mut libc::c_void, *const i64, *const f64);

/// A loaded shared object holding one kernel entry point.
pub struct NativeKernel {
    handle: *mut libc::c_void,
    func: KernelFn,
}

unsafe impl Send for NativeKernel {}
unsafe impl Sync for NativeKernel {}

impl NativeKernel {
    pub fn func(&self) -> KernelFn {
        self.func
    }
}

impl Drop for NativeKernel {
    fn drop(&mut self) {
        unsafe {
            libc::dlclose(self.handle);
        }
    }
}

fn write_atomically(path: &Path, contents: &str) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

/// Compile C source to a shared object under `cache_dir` (keyed by the
/// caller-provided content hash) and load its entry point. An existing
/// object file for the same hash is reused without invoking the compiler.
pub fn build_native(cache_dir: &Path, hash_hex: &str, c_source: &str) -> Result<NativeKernel> {
    let c_path: PathBuf = cache_dir.join(format!("{hash_hex}.c"));
    let so_path: PathBuf = cache_dir.join(format!("{hash_hex}.so"));
    if !so_path.exists() {
        write_atomically(&c_path, c_source)?;
        let tmp_so = cache_dir.join(format!("{hash_hex}.so.tmp.{}", std::process::id()));
        let output = Command::new("cc")
            .arg("-O2")
            .arg("-fPIC")
            .arg("-shared")
            .arg("-ffp-contract=off")
            .arg("-o")
            .arg(&tmp_so)
            .arg(&c_path)
            .arg("-lm")
            .output()
            .map_err(|e| Error::Compile(format!("failed to run cc: {e}")))?;
        if !output.status.success() {
            return Err(Error::Compile(format!(
                "cc failed on kernel {hash_hex}: {}",
                String::from_utf8_lossy(&output.stderr)
            )));
        }
        std::fs::rename(&tmp_so, &so_path)?;
    }
    let c_path_str = CString::new(so_path.to_str().ok_or_else(|| {
        Error::Compile("non-UTF-8 kernel cache path".to_string())
    })?)
    .expect("path has no NUL");
    unsafe {
        let handle = libc::dlopen(c_path_str.as_ptr(), libc::RTLD_NOW | libc::RTLD_LOCAL);
        if handle.is_null() {
            let err = std::ffi::CStr::from_ptr(libc::dlerror());
            return Err(Error::Compile(format!(
                "dlopen failed: {}",
                err.to_string_lossy()
            )));
        }
        let sym = libc::dlsym(handle, c"dg_kernel_main".as_ptr());
        if sym.is_null() {
            libc::dlclose(handle);
            return Err(Error::Compile(
                "kernel object lacks dg_kernel_main".to_string(),
            ));
        }
        let func: KernelFn = std::mem::transmute(sym);
        Ok(NativeKernel { handle, func })
    }
}
