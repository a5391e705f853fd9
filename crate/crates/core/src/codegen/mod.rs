//! Run-time kernel-source generation. Each pipeline stage (volume
//! differentiation, flux gather, lift, vector assembly) is produced as text
//! in the portable kernel dialect, parameterized by a [`KernelPlan`]: how
//! much work a workgroup takes on, which operands are staged in shared
//! memory, and whether dot products are emitted fully unrolled with the
//! operator entries baked in as literal constants.
//!
//! Generation is deterministic: identical inputs yield byte-identical
//! source, so compiled objects can be cached by content hash. Mesh sizes
//! (element counts, buffer strides) stay runtime arguments, letting one
//! compiled kernel serve every mesh of the same order and layout.
//!
//! Every generated kernel guards its work by the real element count, so
//! padding words are never read or written and the floating-point operation
//! count of a stage is identical across all plans.

mod assembly;
mod gather;
mod local;

pub use assembly::generate_assembly_kernel;
pub use gather::{generate_gather_kernel, GhostRule};
pub use local::{generate_diff_kernel, generate_lift_kernel};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::executor::Precision;
use crate::layout::MicroblockLayout;

/// Pipeline stage a kernel implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Differentiation,
    Lift,
    Gather,
    Assembly,
}

impl Stage {
    pub fn is_local(self) -> bool {
        matches!(self, Stage::Differentiation | Stage::Lift)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Differentiation => "diff",
            Stage::Lift => "lift",
            Stage::Gather => "gather",
            Stage::Assembly => "assembly",
        };
        write!(f, "{s}")
    }
}

/// How much work one workgroup takes on, in microblocks: `w_s` processed
/// sequentially, `w_i` in-line per work item (separate register
/// accumulators), `w_p` side by side on extra lanes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkDecomposition {
    pub w_s: usize,
    pub w_i: usize,
    pub w_p: usize,
}

impl WorkDecomposition {
    pub fn unit() -> Self {
        WorkDecomposition { w_s: 1, w_i: 1, w_p: 1 }
    }

    /// Microblocks per workgroup.
    pub fn product(&self) -> usize {
        self.w_s * self.w_i * self.w_p
    }
}

/// Which operand a local-stage kernel stages in shared memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StorageStrategy {
    /// The full operator matrix is staged once per workgroup.
    MatrixInShared,
    /// The field data of the workgroup's microblocks is staged, one field
    /// at a time; the matrix streams from global memory.
    FieldsInShared,
    /// The matrix is staged a block of rows at a time, in passes.
    RowPartitionInShared,
    /// Everything streams from global memory.
    StreamAll,
}

impl fmt::Display for StorageStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StorageStrategy::MatrixInShared => "matrix",
            StorageStrategy::FieldsInShared => "fields",
            StorageStrategy::RowPartitionInShared => "rowpart",
            StorageStrategy::StreamAll => "stream",
        };
        write!(f, "{s}")
    }
}

/// A complete recipe for generating one kernel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelPlan {
    pub stage: Stage,
    pub decomp: WorkDecomposition,
    pub storage: StorageStrategy,
    /// Face-side tasks per workgroup (gather stage only; 1 otherwise).
    pub faces_per_block: usize,
    /// Emit dot products fully unrolled with operator entries baked in as
    /// literal constants.
    pub unroll: bool,
    pub precision: Precision,
    /// Polynomial order the kernel is specialized for.
    pub order: usize,
}

impl KernelPlan {
    /// The always-admissible fallback plan for a stage.
    pub fn degenerate(stage: Stage, order: usize, precision: Precision) -> Self {
        KernelPlan {
            stage,
            decomp: WorkDecomposition::unit(),
            storage: StorageStrategy::StreamAll,
            faces_per_block: if stage == Stage::Gather { 4 } else { 1 },
            unroll: false,
            precision,
            order,
        }
    }

    /// Short deterministic descriptor used in file names and reports.
    pub fn descriptor(&self) -> String {
        match self.stage {
            Stage::Gather => format!(
                "{}_n{}_{}_fpb{}",
                self.stage, self.order, self.precision, self.faces_per_block
            ),
            Stage::Assembly => format!("{}_n{}_{}", self.stage, self.order, self.precision),
            _ => format!(
                "{}_n{}_{}_ws{}_wi{}_wp{}_{}_u{}",
                self.stage,
                self.order,
                self.precision,
                self.decomp.w_s,
                self.decomp.w_i,
                self.decomp.w_p,
                self.storage,
                self.unroll as u8
            ),
        }
    }
}

impl fmt::Display for KernelPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.descriptor())
    }
}

/// Resource limits applied when enumerating candidate plans.
#[derive(Debug, Clone)]
pub struct PlanLimits {
    /// Shared-memory budget in bytes.
    pub onchip_bytes: usize,
    /// Workgroup size cap in lanes.
    pub max_lanes: usize,
    /// Cap on w_s * w_i * w_p.
    pub max_work_product: usize,
    /// Candidate face-side counts per workgroup for the gather stage.
    pub faces_per_block: Vec<usize>,
}

impl Default for PlanLimits {
    fn default() -> Self {
        PlanLimits {
            onchip_bytes: 48 * 1024,
            max_lanes: 1024,
            max_work_product: 64,
            faces_per_block: vec![4, 8, 16, 32],
        }
    }
}

/// Largest node count for which unrolled emission is allowed; beyond this
/// the generated text (and native compile time) grows without benefit.
pub const MAX_UNROLL_NP: usize = 56;

/// Rows of the operator staged per pass by the row-partition strategy.
pub fn rows_per_pass(np: usize) -> usize {
    np.div_ceil(2)
}

/// Shared-memory bytes a plan will declare.
///
/// For the differentiation stage the staged matrix is the three Np x Np
/// derivative operators; for lift it is the Np x 4Nfp lifting operator and
/// the staged field is the facial input (4Nfp words per element).
pub fn estimate_onchip(plan: &KernelPlan, layout: &MicroblockLayout, nfp: usize) -> usize {
    let word = plan.precision.word_size();
    let np = layout.np;
    let row_len = match plan.stage {
        Stage::Differentiation => np,
        Stage::Lift => 4 * nfp,
        _ => return 0,
    };
    if plan.unroll && matches!(plan.storage, StorageStrategy::MatrixInShared | StorageStrategy::RowPartitionInShared) {
        // Baked-in entries leave nothing to stage; such plans are rejected
        // by admissibility anyway.
        return 0;
    }
    match plan.storage {
        StorageStrategy::MatrixInShared => {
            let matrices = if plan.stage == Stage::Differentiation { 3 } else { 1 };
            matrices * np * row_len * word
        }
        StorageStrategy::FieldsInShared => {
            layout.k_m * plan.decomp.w_p * plan.decomp.w_i * row_len * word
        }
        StorageStrategy::RowPartitionInShared => rows_per_pass(np) * row_len * word,
        StorageStrategy::StreamAll => 0,
    }
}

/// Workgroup size in lanes for a plan.
pub fn plan_lanes(plan: &KernelPlan, layout: &MicroblockLayout, nfp: usize) -> usize {
    match plan.stage {
        Stage::Gather => plan.faces_per_block * nfp,
        Stage::Assembly => layout.k_m * layout.np,
        _ => layout.k_m * layout.np * plan.decomp.w_p,
    }
}

fn admissible(plan: &KernelPlan, layout: &MicroblockLayout, nfp: usize, limits: &PlanLimits) -> bool {
    if plan.decomp.product() > limits.max_work_product {
        return false;
    }
    if plan_lanes(plan, layout, nfp) > limits.max_lanes {
        return false;
    }
    if estimate_onchip(plan, layout, nfp) > limits.onchip_bytes {
        return false;
    }
    if plan.unroll {
        // Unrolled emission bakes the operator into the text, so staging
        // the matrix is meaningless, and huge operators are excluded.
        if layout.np > MAX_UNROLL_NP {
            return false;
        }
        if !matches!(
            plan.storage,
            StorageStrategy::StreamAll | StorageStrategy::FieldsInShared
        ) {
            return false;
        }
    }
    true
}

/// All admissible plans for a stage, in a fixed deterministic order. The
/// degenerate plan is always present for local stages; gather always
/// retains at least the smallest granularity; assembly has exactly one
/// plan.
pub fn enumerate_plans(
    stage: Stage,
    order: usize,
    precision: Precision,
    layout: &MicroblockLayout,
    nfp: usize,
    limits: &PlanLimits,
) -> Vec<KernelPlan> {
    let mut out = Vec::new();
    match stage {
        Stage::Assembly => {
            out.push(KernelPlan::degenerate(stage, order, precision));
        }
        Stage::Gather => {
            for &fpb in &limits.faces_per_block {
                let plan = KernelPlan {
                    stage,
                    decomp: WorkDecomposition::unit(),
                    storage: StorageStrategy::StreamAll,
                    faces_per_block: fpb,
                    unroll: false,
                    precision,
                    order,
                };
                if admissible(&plan, layout, nfp, limits) {
                    out.push(plan);
                }
            }
            if out.is_empty() {
                // Guarantee a working granularity even under hostile limits.
                out.push(KernelPlan::degenerate(stage, order, precision));
            }
        }
        Stage::Differentiation | Stage::Lift => {
            for w_s in [1usize, 2, 4] {
                for w_i in [1usize, 2] {
                    for w_p in [1usize, 2, 4] {
                        for storage in [
                            StorageStrategy::MatrixInShared,
                            StorageStrategy::FieldsInShared,
                            StorageStrategy::RowPartitionInShared,
                            StorageStrategy::StreamAll,
                        ] {
                            for unroll in [false, true] {
                                let plan = KernelPlan {
                                    stage,
                                    decomp: WorkDecomposition { w_s, w_i, w_p },
                                    storage,
                                    faces_per_block: 1,
                                    unroll,
                                    precision,
                                    order,
                                };
                                if admissible(&plan, layout, nfp, limits) {
                                    out.push(plan);
                                }
                            }
                        }
                    }
                }
            }
            debug_assert!(out
                .iter()
                .any(|p| p.decomp == WorkDecomposition::unit()
                    && p.storage == StorageStrategy::StreamAll
                    && !p.unroll));
        }
    }
    out
}

/// Generated kernel text plus the launch geometry it assumes.
#[derive(Debug, Clone)]
pub struct KernelSource {
    /// Kernel (and dialect entry) name; unique per plan and inputs.
    pub name: String,
    /// Full source text in the kernel dialect.
    pub text: String,
    /// Workgroup size in lanes.
    pub lanes: usize,
    /// Work units one workgroup covers: microblocks for local stages,
    /// face-side tasks for gather, (field, microblock) pairs for assembly.
    /// Launch `ceil(total_units / units_per_workgroup)` workgroups.
    pub units_per_workgroup: usize,
    /// Declared shared-memory words.
    pub shared_words: usize,
    /// Rough per-lane register demand (scalar locals emitted).
    pub registers_estimate: usize,
}

/// Number of floating-point operations the differentiation stage performs
/// per element: for each of `num_inputs` referenced fields, three
/// reference-axis dot products of length Np at every node, plus the
/// geometric combination of `num_entries` (output, input) couplings.
pub fn diff_flops_per_element(np: usize, num_inputs: usize, num_entries: usize) -> u64 {
    (6 * np * np * num_inputs + 6 * num_entries * np) as u64
}

/// Lift-stage operations per element: per field and node, one dot product
/// over the 4 Nfp facial values plus the Jacobian-weighted accumulation
/// into the volume output.
pub fn lift_flops_per_element(np: usize, nfp: usize, num_fields: usize) -> u64 {
    (num_fields * np * (8 * nfp + 2)) as u64
}

/// Gather-stage operations per face node: the fused flux evaluation plus
/// one surface-Jacobian scaling per component. Ghost synthesis may add
/// [`GhostRule::extra_flops`] on boundary tasks.
pub fn gather_flops_per_facenode(flux_flops: usize, num_components: usize) -> u64 {
    (flux_flops + num_components) as u64
}

/// Assembly operations per stored (non-padding) word.
pub fn assembly_flops_per_word() -> u64 {
    3
}

/// Internal text builder with indentation and unique-name support.
pub(crate) struct Src {
    text: String,
    indent: usize,
    pub locals: usize,
}

impl Src {
    pub fn new() -> Self {
        Src { text: String::new(), indent: 0, locals: 0 }
    }

    pub fn line(&mut self, s: impl AsRef<str>) {
        for _ in 0..self.indent {
            self.text.push_str("  ");
        }
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }

    /// Emit a local declaration line (tracked for the register estimate).
    pub fn decl(&mut self, s: impl AsRef<str>) {
        self.locals += 1;
        self.line(s);
    }

    pub fn open(&mut self, s: impl AsRef<str>) {
        self.line(s);
        self.indent += 1;
    }

    pub fn close(&mut self) {
        self.indent -= 1;
        self.line("}");
    }

    /// Close the current branch and open its `else` at the same depth.
    pub fn else_open(&mut self) {
        self.indent -= 1;
        self.line("} else {");
        self.indent += 1;
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// Format a real constant as dialect text that round-trips exactly.
pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:?}")
}

/// `base` or `base + lit`, folding a zero offset away.
pub(crate) fn add_lit(base: &str, lit: usize) -> String {
    if lit == 0 {
        base.to_string()
    } else {
        format!("{base} + {lit}")
    }
}

/// `base` or `base + stride * f`, folding the field-0 term away.
pub(crate) fn field_off(base: &str, stride: &str, f: usize) -> String {
    match f {
        0 => base.to_string(),
        _ => format!("{base} + {stride} * {f}"),
    }
}
