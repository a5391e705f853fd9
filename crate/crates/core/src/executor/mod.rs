//! Kernel execution layer: a small C-like kernel dialect with explicit
//! workgroups, lanes, shared memory, and barriers, plus two interchangeable
//! ways to run it on the CPU:
//!
//! * a **native** path that translates kernels to C, compiles them to shared
//!   objects (content-addressed, cached on disk and in memory), and runs
//!   workgroups in parallel;
//! * an **instrumented** path that interprets kernels sequentially while
//!   counting every floating-point operation, used for validating both
//!   results and analytic work models.
//!
//! The two paths produce bitwise-identical results in both precisions: the
//! interpreter rounds after every operation, and the emitted C is compiled
//! with floating-point contraction disabled.
//!
//! Kernel launches are synchronous (work is complete when `launch` returns);
//! `synchronize` is the portable point after which results are guaranteed
//! visible, and callers must not assume anything stronger.

pub mod dialect;

pub(crate) mod cemit;
pub(crate) mod check;
pub(crate) mod interp;

use std::cell::UnsafeCell;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use cemit::NativeKernel;
use check::LanedKernel;
use dialect::ParamKind;
use interp::BufView;

/// Floating-point width a kernel (or buffer) works in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Bytes per real word.
    pub fn word_size(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

/// What a device buffer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferKind {
    /// Real words in the given precision.
    Real(Precision),
    /// 64-bit signed indices.
    Index,
}

enum Storage {
    F64(Box<[f64]>),
    F32(Box<[f32]>),
    I64(Box<[i64]>),
}

struct BufferInner {
    storage: UnsafeCell<Storage>,
    kind: BufferKind,
    len: usize,
}

// Launches hand raw pointers into the storage to worker threads; the queue
// is synchronous, so host-side access never overlaps kernel execution.
// Workgroups of one launch may run concurrently and must write disjoint
// locations, as on any accelerator.
unsafe impl Send for BufferInner {}
unsafe impl Sync for BufferInner {}

/// A typed, fixed-length allocation kernels can read and write. Cloning is
/// shallow; the allocation lives until the last handle is dropped, so a
/// launch can never outlive or dangle its buffers.
#[derive(Clone)]
pub struct DeviceBuffer {
    inner: Arc<BufferInner>,
}

impl DeviceBuffer {
    fn new(kind: BufferKind, len: usize) -> Self {
        let storage = match kind {
            BufferKind::Real(Precision::F64) => Storage::F64(vec![0.0; len].into_boxed_slice()),
            BufferKind::Real(Precision::F32) => Storage::F32(vec![0.0; len].into_boxed_slice()),
            BufferKind::Index => Storage::I64(vec![0; len].into_boxed_slice()),
        };
        DeviceBuffer {
            inner: Arc::new(BufferInner {
                storage: UnsafeCell::new(storage),
                kind,
                len,
            }),
        }
    }

    pub fn kind(&self) -> BufferKind {
        self.inner.kind
    }

    pub fn len(&self) -> usize {
        self.inner.len
    }

    pub fn is_empty(&self) -> bool {
        self.inner.len == 0
    }

    fn view(&self) -> BufView {
        unsafe {
            match &mut *self.inner.storage.get() {
                Storage::F64(b) => BufView::F64(b.as_mut_ptr(), b.len()),
                Storage::F32(b) => BufView::F32(b.as_mut_ptr(), b.len()),
                Storage::I64(b) => BufView::I64(b.as_mut_ptr(), b.len()),
            }
        }
    }

    fn raw_ptr(&self) -> *mut libc::c_void {
        unsafe {
            match &mut *self.inner.storage.get() {
                Storage::F64(b) => b.as_mut_ptr() as *mut libc::c_void,
                Storage::F32(b) => b.as_mut_ptr() as *mut libc::c_void,
                Storage::I64(b) => b.as_mut_ptr() as *mut libc::c_void,
            }
        }
    }
}

struct KernelObject {
    laned: Arc<LanedKernel>,
    native: Arc<NativeKernel>,
}

/// A kernel ready to launch: its checked form (for the interpreter) and its
/// loaded native entry point.
#[derive(Clone)]
pub struct CompiledKernel {
    name: String,
    lanes: usize,
    precision: Precision,
    laned: Arc<LanedKernel>,
    native: Arc<NativeKernel>,
    /// Wall seconds spent producing this kernel; exactly `0.0` when it was
    /// served from the backend's in-memory cache.
    pub compile_seconds: f64,
}

impl fmt::Debug for CompiledKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompiledKernel")
            .field("name", &self.name)
            .field("lanes", &self.lanes)
            .field("precision", &self.precision)
            .field("compile_seconds", &self.compile_seconds)
            .finish()
    }
}

impl CompiledKernel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }
}

fn source_hash(source: &str) -> String {
    let mut h = Sha256::new();
    h.update(source.as_bytes());
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for byte in digest {
        s.push_str(&format!("{byte:02x}"));
    }
    s
}

/// Compiles dialect source to runnable kernels, memoized on the source text.
///
/// Shared objects are cached on disk under a content hash, so identical
/// kernels survive process restarts without re-invoking the C compiler;
/// repeat compilations within one backend are served from memory.
pub struct CpuBackend {
    cache_dir: PathBuf,
    memo: Mutex<HashMap<String, Arc<KernelObject>>>,
}

impl CpuBackend {
    /// Backend with the default on-disk cache location: `$DGFORGE_KERNEL_CACHE`
    /// if set, else `dgforge-kernel-cache` under the system temp directory.
    pub fn new() -> Result<Self> {
        let dir = match std::env::var_os("DGFORGE_KERNEL_CACHE") {
            Some(d) => PathBuf::from(d),
            None => std::env::temp_dir().join("dgforge-kernel-cache"),
        };
        Self::with_cache_dir(dir)
    }

    pub fn with_cache_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let cache_dir = dir.into();
        std::fs::create_dir_all(&cache_dir)?;
        Ok(CpuBackend {
            cache_dir,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }

    /// Stable identifier naming this backend in tuning keys and caches;
    /// measurements never transfer across backends.
    pub fn identifier(&self) -> &'static str {
        "cpu-native"
    }

    pub fn compile(&self, source: &str) -> Result<CompiledKernel> {
        let hash = source_hash(source);
        if let Some(obj) = self.memo.lock().unwrap().get(&hash) {
            return Ok(self.kernel_from(obj.clone(), 0.0));
        }
        let t0 = Instant::now();
        let parsed = dialect::parse(source)?;
        let laned = Arc::new(check::check(&parsed)?);
        let c_source = cemit::emit_c(&laned);
        let native = Arc::new(cemit::build_native(&self.cache_dir, &hash, &c_source)?);
        let obj = Arc::new(KernelObject { laned, native });
        let seconds = t0.elapsed().as_secs_f64();
        self.memo.lock().unwrap().insert(hash, obj.clone());
        Ok(self.kernel_from(obj, seconds))
    }

    fn kernel_from(&self, obj: Arc<KernelObject>, compile_seconds: f64) -> CompiledKernel {
        let precision = if obj.laned.single_precision {
            Precision::F32
        } else {
            Precision::F64
        };
        CompiledKernel {
            name: obj.laned.name.clone(),
            lanes: obj.laned.lanes,
            precision,
            laned: obj.laned.clone(),
            native: obj.native.clone(),
            compile_seconds,
        }
    }

    /// Emitted C for `source`, for inspection or dumping.
    pub fn translate(&self, source: &str) -> Result<String> {
        let parsed = dialect::parse(source)?;
        let laned = check::check(&parsed)?;
        Ok(cemit::emit_c(&laned))
    }
}

/// One launch argument; must match the corresponding kernel parameter.
pub enum LaunchArg<'a> {
    Buf(&'a DeviceBuffer),
    Int(i64),
    Real(f64),
}

/// Pointer table shared read-only across workgroup threads. The emitted C
/// reads `BUFS[i]` but never writes the table itself.
struct PtrTable(Vec<*mut libc::c_void>);
unsafe impl Sync for PtrTable {}

impl PtrTable {
    fn as_arg(&self) -> *mut *mut libc::c_void {
        self.0.as_ptr() as *mut *mut libc::c_void
    }
}

/// Submits kernel launches and moves data in and out of device buffers.
///
/// In **native** mode workgroups run in parallel through compiled code. In
/// **instrumented** mode kernels are interpreted sequentially and every
/// floating-point operation is tallied; results are bitwise identical to
/// native mode.
pub struct Queue {
    instrumented: bool,
    flops: AtomicU64,
}

impl Queue {
    pub fn new() -> Self {
        Queue {
            instrumented: false,
            flops: AtomicU64::new(0),
        }
    }

    pub fn instrumented() -> Self {
        Queue {
            instrumented: true,
            flops: AtomicU64::new(0),
        }
    }

    pub fn is_instrumented(&self) -> bool {
        self.instrumented
    }

    /// Floating-point operations tallied so far (instrumented mode only;
    /// stays zero in native mode).
    pub fn flops(&self) -> u64 {
        self.flops.load(Ordering::Relaxed)
    }

    pub fn reset_flops(&self) {
        self.flops.store(0, Ordering::Relaxed);
    }

    /// Zero-initialized real buffer.
    pub fn alloc(&self, len: usize, precision: Precision) -> DeviceBuffer {
        DeviceBuffer::new(BufferKind::Real(precision), len)
    }

    /// Zero-initialized index buffer.
    pub fn alloc_index(&self, len: usize) -> DeviceBuffer {
        DeviceBuffer::new(BufferKind::Index, len)
    }

    /// Overwrite the whole buffer. Values are converted to the buffer's
    /// precision on the way in.
    pub fn write(&self, buf: &DeviceBuffer, data: &[f64]) -> Result<()> {
        if data.len() != buf.len() {
            return Err(Error::Executor(format!(
                "write of {} values into buffer of length {}",
                data.len(),
                buf.len()
            )));
        }
        unsafe {
            match &mut *buf.inner.storage.get() {
                Storage::F64(b) => b.copy_from_slice(data),
                Storage::F32(b) => {
                    for (dst, src) in b.iter_mut().zip(data) {
                        *dst = *src as f32;
                    }
                }
                Storage::I64(_) => {
                    return Err(Error::Executor(
                        "real write into an index buffer".to_string(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn write_index(&self, buf: &DeviceBuffer, data: &[i64]) -> Result<()> {
        if data.len() != buf.len() {
            return Err(Error::Executor(format!(
                "write of {} values into buffer of length {}",
                data.len(),
                buf.len()
            )));
        }
        unsafe {
            match &mut *buf.inner.storage.get() {
                Storage::I64(b) => b.copy_from_slice(data),
                _ => {
                    return Err(Error::Executor(
                        "index write into a real buffer".to_string(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Copy the buffer out, widening to f64 if it is single precision.
    pub fn read_back(&self, buf: &DeviceBuffer) -> Result<Vec<f64>> {
        unsafe {
            match &*buf.inner.storage.get() {
                Storage::F64(b) => Ok(b.to_vec()),
                Storage::F32(b) => Ok(b.iter().map(|&v| v as f64).collect()),
                Storage::I64(_) => Err(Error::Executor(
                    "real read of an index buffer".to_string(),
                )),
            }
        }
    }

    pub fn read_back_index(&self, buf: &DeviceBuffer) -> Result<Vec<i64>> {
        unsafe {
            match &*buf.inner.storage.get() {
                Storage::I64(b) => Ok(b.to_vec()),
                _ => Err(Error::Executor(
                    "index read of a real buffer".to_string(),
                )),
            }
        }
    }

    /// Run `workgroups` copies of the kernel. Arguments are validated
    /// against the kernel's parameter list (count, kind, buffer precision).
    pub fn launch(
        &self,
        kernel: &CompiledKernel,
        workgroups: usize,
        args: &[LaunchArg],
    ) -> Result<()> {
        let params = &kernel.laned.params;
        if args.len() != params.len() {
            return Err(Error::Executor(format!(
                "kernel `{}` takes {} arguments, got {}",
                kernel.name,
                params.len(),
                args.len()
            )));
        }
        let mut views: Vec<BufView> = Vec::new();
        let mut ptrs: Vec<*mut libc::c_void> = Vec::new();
        let mut iargs: Vec<i64> = Vec::new();
        let mut fargs: Vec<f64> = Vec::new();
        for (param, arg) in params.iter().zip(args) {
            let mismatch = |want: &str| {
                Error::Executor(format!(
                    "kernel `{}` parameter `{}` expects {want}",
                    kernel.name, param.name
                ))
            };
            match (param.kind, arg) {
                (ParamKind::RealBuf { .. }, LaunchArg::Buf(b)) => {
                    if b.kind() != BufferKind::Real(kernel.precision) {
                        return Err(mismatch(&format!(
                            "a real buffer in {}",
                            kernel.precision
                        )));
                    }
                    views.push(b.view());
                    ptrs.push(b.raw_ptr());
                }
                (ParamKind::IntBuf { .. }, LaunchArg::Buf(b)) => {
                    if b.kind() != BufferKind::Index {
                        return Err(mismatch("an index buffer"));
                    }
                    views.push(b.view());
                    ptrs.push(b.raw_ptr());
                }
                (ParamKind::IntScalar, LaunchArg::Int(v)) => iargs.push(*v),
                (ParamKind::RealScalar, LaunchArg::Real(v)) => fargs.push(*v),
                (ParamKind::RealBuf { .. } | ParamKind::IntBuf { .. }, _) => {
                    return Err(mismatch("a buffer"));
                }
                (ParamKind::IntScalar, _) => return Err(mismatch("an integer scalar")),
                (ParamKind::RealScalar, _) => return Err(mismatch("a real scalar")),
            }
        }
        if workgroups == 0 {
            return Ok(());
        }
        if self.instrumented {
            let mut total = 0u64;
            for gid in 0..workgroups as i64 {
                total += interp::execute(&kernel.laned, gid, &views, &iargs, &fargs)?;
            }
            self.flops.fetch_add(total, Ordering::Relaxed);
        } else {
            let table = PtrTable(ptrs);
            let func = kernel.native.func();
            let table_ref = &table;
            (0..workgroups as i64).into_par_iter().for_each(|gid| unsafe {
                func(gid, table_ref.as_arg(), iargs.as_ptr(), fargs.as_ptr());
            });
        }
        Ok(())
    }

    /// After this returns, results of all prior launches are visible to
    /// `read_back`. Callers must not rely on visibility any earlier.
    pub fn synchronize(&self) -> Result<()> {
        Ok(())
    }
}

impl Default for Queue {
    fn default() -> Self {
        Queue::new()
    }
}

/// Monotonic time source, swappable so timing-sensitive logic can be tested
/// deterministically.
pub trait Clock: Send + Sync {
    /// Seconds since an arbitrary fixed origin.
    fn now(&self) -> f64;
}

pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        WallClock::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Clock that advances by a fixed step on every reading.
pub struct FakeClock {
    t: Mutex<f64>,
    step: f64,
}

impl FakeClock {
    pub fn new(step: f64) -> Self {
        FakeClock {
            t: Mutex::new(0.0),
            step,
        }
    }
}

impl Clock for FakeClock {
    fn now(&self) -> f64 {
        let mut t = self.t.lock().unwrap();
        let v = *t;
        *t += self.step;
        v
    }
}

/// Wall seconds for `body` as observed through `clock`, bracketed by queue
/// synchronization so only completed device work is measured.
pub fn wall_time(
    queue: &Queue,
    clock: &dyn Clock,
    body: impl FnOnce() -> Result<()>,
) -> Result<f64> {
    queue.synchronize()?;
    let t0 = clock.now();
    body()?;
    queue.synchronize()?;
    Ok(clock.now() - t0)
}
