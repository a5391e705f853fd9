//! Plan benchmarking, selection, and persistent tuning records.
//!
//! The kernel generator exposes many interchangeable implementation choices
//! (work aggregation, on-chip staging, unrolling, faces per workgroup), and
//! which one is fastest depends on the hardware, the polynomial order, and
//! the precision. Rather than guessing, this module measures every
//! admissible candidate on a fixed synthetic workload, keeps the complete
//! study for reporting, selects the fastest plan that produces correct
//! results, and persists winners in a line-oriented cache file so later
//! runs can skip the search.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::codegen::{
    assembly_flops_per_word, diff_flops_per_element, enumerate_plans, gather_flops_per_facenode,
    generate_assembly_kernel, generate_diff_kernel, generate_gather_kernel, generate_lift_kernel,
    lift_flops_per_element, GhostRule, KernelPlan, KernelSource, PlanLimits, Stage,
};
use crate::error::{Error, Result};
use crate::executor::{
    wall_time, Clock, CompiledKernel, CpuBackend, DeviceBuffer, LaunchArg, Precision, Queue,
};
use crate::layout::MicroblockLayout;
use crate::physics::{SolverConfig, SystemDefinition};
use crate::refelem::ReferenceElement;

/// Untimed launches executed before the timed repetitions, so one-time
/// warm-up effects never land in a measurement.
pub const WARMUP_RUNS: usize = 2;
/// Timed repetitions per plan; the median is recorded.
pub const TIMED_RUNS: usize = 5;
/// Microblock count a tuning workload aims for: large enough to amortize
/// launch overhead, capped by the actual problem size.
pub const TARGET_MICROBLOCKS: usize = 512;
/// Default tuning-cache file name, relative to the working directory.
pub const DEFAULT_CACHE_FILE: &str = ".dgforge-tune";

/// Number of microblocks a tuning workload should use for a problem of
/// `problem_microblocks`: the standard target, shrunk to the problem when
/// the problem is smaller.
pub fn workload_microblocks(problem_microblocks: usize) -> usize {
    problem_microblocks.min(TARGET_MICROBLOCKS).max(1)
}

/// Everything a tuning result is specialized on. Two runs with equal keys
/// may share a cached plan; changing any field invalidates reuse.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TuningKey {
    pub stage: Stage,
    /// Polynomial order the kernels are specialized for.
    pub order: usize,
    pub precision: Precision,
    /// Identifier of the executing backend; timings never transfer across
    /// hardware.
    pub backend: String,
    /// Storage-layout alignment granule in words.
    pub granule: usize,
    /// Elements per microblock.
    pub k_m: usize,
}

impl fmt::Display for TuningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:n{}:{}:{}:g{}:km{}",
            self.stage, self.order, self.precision, self.backend, self.granule, self.k_m
        )
    }
}

/// A selected plan together with the measurement that justified it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub key: TuningKey,
    pub plan: KernelPlan,
    /// Median wall seconds for one launch over the tuning workload.
    pub median_seconds: f64,
    /// Floating-point operations one launch performs on that workload.
    pub flops: u64,
    /// Seconds since the Unix epoch when the measurement was taken.
    pub timestamp: u64,
}

impl TuningRecord {
    /// Build a record, enforcing that the measurement is positive and that
    /// the plan actually belongs under the key.
    pub fn new(key: TuningKey, plan: KernelPlan, median_seconds: f64, flops: u64) -> Result<Self> {
        if !(median_seconds > 0.0) {
            return Err(Error::Tune(format!(
                "median of {median_seconds} s for {} is not positive",
                plan.descriptor()
            )));
        }
        if plan.stage != key.stage || plan.order != key.order || plan.precision != key.precision {
            return Err(Error::Tune(format!(
                "plan {} does not belong under key {key}",
                plan.descriptor()
            )));
        }
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(TuningRecord {
            key,
            plan,
            median_seconds,
            flops,
            timestamp,
        })
    }
}

/// What benchmarking one candidate produced.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanOutcome {
    /// Passed the correctness gate; median of the timed repetitions.
    Timed { median_seconds: f64 },
    /// Failed compilation, launching, or the correctness gate. Never
    /// selectable, however fast it might have been.
    Disqualified { reason: String },
}

/// One line of a tuning study.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub plan: KernelPlan,
    pub outcome: PlanOutcome,
}

/// An exhaustive study over a candidate space plus the selected winner.
#[derive(Debug, Clone)]
pub struct TuningStudy {
    pub record: TuningRecord,
    pub rows: Vec<StudyRow>,
}

type SourceHook = Box<dyn Fn(&KernelPlan, &str) -> Option<String>>;

/// A fixed single-stage problem that every candidate plan must solve
/// identically: synthetic operands sized like a real run, a reference
/// output produced by the degenerate plan, and the launch conventions of
/// the stage. Plans are gated for correctness on it and then timed on it.
pub struct Workload<'a> {
    backend: &'a CpuBackend,
    queue: Queue,
    stage: Stage,
    order: usize,
    precision: Precision,
    layout: MicroblockLayout,
    sys: SystemDefinition,
    refel: ReferenceElement,
    num_mb: usize,
    num_k: usize,
    nf: usize,
    nfp: usize,
    num_tasks: usize,
    gbw: usize,
    btype: Vec<i64>,
    out_words: usize,
    b_in: DeviceBuffer,
    b_out: DeviceBuffer,
    b_geo: Option<DeviceBuffer>,
    b_dall: Option<DeviceBuffer>,
    b_lall: Option<DeviceBuffer>,
    b_invjac: Option<DeviceBuffer>,
    b_second: Option<DeviceBuffer>,
    b_normals: Option<DeviceBuffer>,
    b_scale: Option<DeviceBuffer>,
    b_gdata: Option<DeviceBuffer>,
    b_minus: Option<DeviceBuffer>,
    b_plus: Option<DeviceBuffer>,
    b_btype: Option<DeviceBuffer>,
    b_outbase: Option<DeviceBuffer>,
    reference: Vec<f64>,
    hook: Option<SourceHook>,
}

/// Scalar operands for the assembly stage's linear combination; arbitrary
/// nonzero values so both inputs influence the output.
const ASSEMBLY_A: f64 = 1.25;
const ASSEMBLY_B: f64 = -0.75;

fn random_values(rng: &mut StdRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn filled(queue: &Queue, precision: Precision, data: &[f64]) -> Result<DeviceBuffer> {
    let buf = queue.alloc(data.len(), precision);
    queue.write(&buf, data)?;
    Ok(buf)
}

fn filled_index(queue: &Queue, data: &[i64]) -> Result<DeviceBuffer> {
    let buf = queue.alloc_index(data.len());
    queue.write_index(&buf, data)?;
    Ok(buf)
}

struct Candidate {
    plan: KernelPlan,
    src: KernelSource,
    kernel: CompiledKernel,
}

impl<'a> Workload<'a> {
    /// Build the synthetic stage problem: `microblocks` full microblocks of
    /// random operands (no tail, so every plan performs identical numerical
    /// work), plus the reference output of the degenerate plan.
    pub fn new(
        backend: &'a CpuBackend,
        system: &SystemDefinition,
        stage: Stage,
        config: &SolverConfig,
        microblocks: usize,
    ) -> Result<Workload<'a>> {
        let order = config.order;
        let precision = config.precision;
        let refel = ReferenceElement::new(order)?;
        let np = refel.np;
        let nfp = refel.nfp;
        let nf = system.num_fields;
        let layout = MicroblockLayout::choose(np, config.granule, config.k_m_max);
        let num_mb = microblocks.max(1);
        let num_k = num_mb * layout.k_m;
        let fw = num_mb * layout.padded_size;
        let flw = num_mb * layout.k_m * 4 * nfp;
        let queue = Queue::new();
        let mut rng = StdRng::seed_from_u64(0x7e57_da7a);

        let mut b_geo = None;
        let mut b_dall = None;
        let mut b_lall = None;
        let mut b_invjac = None;
        let mut b_second = None;
        let mut b_normals = None;
        let mut b_scale = None;
        let mut b_gdata = None;
        let mut b_minus = None;
        let mut b_plus = None;
        let mut b_btype = None;
        let mut b_outbase = None;
        let mut num_tasks = 0;
        let mut gbw = 1;
        let mut btype: Vec<i64> = Vec::new();

        let b_in;
        let out_words;
        match stage {
            Stage::Differentiation => {
                b_in = filled(&queue, precision, &random_values(&mut rng, nf * fw, -1.0, 1.0))?;
                let geo_words = num_k * system.structure.len() * 3;
                b_geo = Some(filled(
                    &queue,
                    precision,
                    &random_values(&mut rng, geo_words, -1.0, 1.0),
                )?);
                let mut d = vec![0.0; 3 * np * np];
                for (mu, mat) in refel.diff.iter().enumerate() {
                    for i in 0..np {
                        for j in 0..np {
                            d[mu * np * np + i * np + j] = mat[(i, j)];
                        }
                    }
                }
                b_dall = Some(filled(&queue, precision, &d)?);
                out_words = nf * fw;
            }
            Stage::Gather => {
                b_in = filled(&queue, precision, &random_values(&mut rng, nf * fw, -1.0, 1.0))?;
                num_tasks = 4 * num_k;
                let rules = &system.ghost_rules;
                let mut t_minus: Vec<i64> = Vec::with_capacity(num_tasks * nfp);
                let mut t_plus: Vec<i64> = Vec::with_capacity(num_tasks * nfp);
                let mut t_outbase: Vec<i64> = Vec::with_capacity(num_tasks);
                let mut normals: Vec<f64> = Vec::with_capacity(num_tasks * 3);
                let mut pslots = 0usize;
                for t in 0..num_tasks {
                    for _ in 0..nfp {
                        t_minus.push(rng.gen_range(0..fw) as i64);
                    }
                    // Sprinkle every boundary treatment the system knows
                    // between plain interior faces.
                    if !rules.is_empty() && t % 5 == 4 {
                        let rule_idx = (t / 5) % rules.len();
                        btype.push(rule_idx as i64 + 1);
                        if rules[rule_idx] == GhostRule::Prescribed {
                            for m in 0..nfp {
                                t_plus.push((pslots + m) as i64);
                            }
                            pslots += nfp;
                        } else {
                            t_plus.extend(std::iter::repeat_n(0i64, nfp));
                        }
                    } else {
                        btype.push(0);
                        for _ in 0..nfp {
                            t_plus.push(rng.gen_range(0..fw) as i64);
                        }
                    }
                    // Each task owns a distinct facial slot, as on a mesh.
                    t_outbase.push((t * nfp) as i64);
                    loop {
                        let v: [f64; 3] = [
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        ];
                        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        if len > 0.1 {
                            normals.extend(v.iter().map(|c| c / len));
                            break;
                        }
                    }
                }
                gbw = pslots.max(1);
                b_minus = Some(filled_index(&queue, &t_minus)?);
                b_plus = Some(filled_index(&queue, &t_plus)?);
                b_btype = Some(filled_index(&queue, &btype)?);
                b_outbase = Some(filled_index(&queue, &t_outbase)?);
                b_normals = Some(filled(&queue, precision, &normals)?);
                b_scale = Some(filled(
                    &queue,
                    precision,
                    &random_values(&mut rng, num_tasks, 0.5, 1.5),
                )?);
                b_gdata = Some(filled(
                    &queue,
                    precision,
                    &random_values(&mut rng, gbw * nf, -1.0, 1.0),
                )?);
                out_words = nf * flw;
            }
            Stage::Lift => {
                b_in = filled(&queue, precision, &random_values(&mut rng, nf * flw, -1.0, 1.0))?;
                b_invjac = Some(filled(
                    &queue,
                    precision,
                    &random_values(&mut rng, num_k, 0.5, 1.5),
                )?);
                let mut l = vec![0.0; np * 4 * nfp];
                for i in 0..np {
                    for m in 0..4 * nfp {
                        l[i * 4 * nfp + m] = refel.lift[(i, m)];
                    }
                }
                b_lall = Some(filled(&queue, precision, &l)?);
                out_words = nf * fw;
            }
            Stage::Assembly => {
                b_in = filled(&queue, precision, &random_values(&mut rng, nf * fw, -1.0, 1.0))?;
                b_second = Some(filled(
                    &queue,
                    precision,
                    &random_values(&mut rng, nf * fw, -1.0, 1.0),
                )?);
                out_words = nf * fw;
            }
        }
        let b_out = queue.alloc(out_words, precision);

        let mut workload = Workload {
            backend,
            queue,
            stage,
            order,
            precision,
            layout,
            sys: system.clone(),
            refel,
            num_mb,
            num_k,
            nf,
            nfp,
            num_tasks,
            gbw,
            btype,
            out_words,
            b_in,
            b_out,
            b_geo,
            b_dall,
            b_lall,
            b_invjac,
            b_second,
            b_normals,
            b_scale,
            b_gdata,
            b_minus,
            b_plus,
            b_btype,
            b_outbase,
            reference: Vec::new(),
            hook: None,
        };
        let degenerate = KernelPlan::degenerate(stage, order, precision);
        workload.reference = workload.run_plan(&degenerate)?;
        Ok(workload)
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn layout(&self) -> &MicroblockLayout {
        &self.layout
    }

    pub fn num_elements(&self) -> usize {
        self.num_k
    }

    pub fn face_nodes(&self) -> usize {
        self.nfp
    }

    /// Output of the degenerate plan on this workload's operands.
    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    /// Acceptable relative deviation from the reference: plans may
    /// reassociate sums, so single precision gets a wider band.
    pub fn tolerance(&self) -> f64 {
        match self.precision {
            Precision::F64 => 1e-12,
            Precision::F32 => 1e-6,
        }
    }

    /// The key this workload's measurements are filed under.
    pub fn key(&self) -> TuningKey {
        TuningKey {
            stage: self.stage,
            order: self.order,
            precision: self.precision,
            backend: self.backend.identifier().to_string(),
            granule: self.layout.granule,
            k_m: self.layout.k_m,
        }
    }

    /// Every admissible plan for this workload's stage under `limits`,
    /// in enumeration order.
    pub fn candidate_plans(&self, limits: &PlanLimits) -> Vec<KernelPlan> {
        enumerate_plans(
            self.stage,
            self.order,
            self.precision,
            &self.layout,
            self.nfp,
            limits,
        )
    }

    /// Floating-point operations one launch performs on this workload.
    pub fn flops(&self) -> u64 {
        match self.stage {
            Stage::Differentiation => {
                self.num_k as u64
                    * diff_flops_per_element(self.refel.np, self.nf, self.sys.structure.len())
            }
            Stage::Gather => {
                let per_node = gather_flops_per_facenode(self.sys.flux.flop_count(), self.nf);
                self.btype
                    .iter()
                    .map(|&bt| {
                        let extra = if bt == 0 {
                            0
                        } else {
                            self.sys.ghost_rules[(bt - 1) as usize].extra_flops()
                        };
                        self.nfp as u64 * (per_node + extra)
                    })
                    .sum()
            }
            Stage::Lift => {
                self.num_k as u64 * lift_flops_per_element(self.refel.np, self.nfp, self.nf)
            }
            Stage::Assembly => {
                assembly_flops_per_word() * (self.nf * self.num_k * self.refel.np) as u64
            }
        }
    }

    /// Install a source transformation applied after generation and before
    /// compilation. Tests use this to sabotage chosen plans and prove the
    /// correctness gate catches them; returning `None` leaves a plan alone.
    pub fn set_source_hook<F>(&mut self, hook: F)
    where
        F: Fn(&KernelPlan, &str) -> Option<String> + 'static,
    {
        self.hook = Some(Box::new(hook));
    }

    /// Compile `plan`, run it once from a zeroed output, and return the
    /// output words.
    pub fn run_plan(&self, plan: &KernelPlan) -> Result<Vec<f64>> {
        let cand = self.compile(plan)?;
        self.zero_output()?;
        self.launch(&cand)?;
        self.queue.synchronize()?;
        self.queue.read_back(&self.b_out)
    }

    fn check_key(&self, key: &TuningKey) -> Result<()> {
        let own = self.key();
        if *key != own {
            return Err(Error::Tune(format!(
                "tuning key {key} does not match the workload ({own})"
            )));
        }
        Ok(())
    }

    fn compile(&self, plan: &KernelPlan) -> Result<Candidate> {
        let mut src = match self.stage {
            Stage::Differentiation => generate_diff_kernel(
                plan,
                &self.layout,
                &self.refel.diff,
                &self.sys.structure,
                self.nf,
                self.nf,
            )?,
            Stage::Gather => generate_gather_kernel(
                plan,
                &self.layout,
                self.nfp,
                &self.sys.flux,
                &self.sys.ghost_rules,
            )?,
            Stage::Lift => generate_lift_kernel(plan, &self.layout, &self.refel.lift, self.nf)?,
            Stage::Assembly => generate_assembly_kernel(plan, &self.layout)?,
        };
        if let Some(hook) = &self.hook {
            if let Some(text) = hook(plan, &src.text) {
                src.text = text;
            }
        }
        let kernel = self.backend.compile(&src.text)?;
        Ok(Candidate {
            plan: plan.clone(),
            src,
            kernel,
        })
    }

    fn zero_output(&self) -> Result<()> {
        self.queue.write(&self.b_out, &vec![0.0; self.out_words])
    }

    fn stage_buffer<'b>(buf: &'b Option<DeviceBuffer>, what: &str) -> &'b DeviceBuffer {
        buf.as_ref()
            .unwrap_or_else(|| panic!("{what} buffer exists for this stage"))
    }

    fn launch(&self, cand: &Candidate) -> Result<()> {
        match self.stage {
            Stage::Differentiation => {
                let mut args: Vec<LaunchArg> = vec![
                    LaunchArg::Buf(&self.b_in),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_geo, "geo")),
                ];
                if !cand.plan.unroll {
                    args.push(LaunchArg::Buf(Self::stage_buffer(&self.b_dall, "matrix")));
                }
                args.push(LaunchArg::Buf(&self.b_out));
                args.push(LaunchArg::Int(self.num_mb as i64));
                args.push(LaunchArg::Int(self.num_k as i64));
                let groups = self.num_mb.div_ceil(cand.src.units_per_workgroup);
                self.queue.launch(&cand.kernel, groups, &args)
            }
            Stage::Gather => {
                let args = [
                    LaunchArg::Buf(&self.b_in),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_gdata, "prescribed-data")),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_normals, "normals")),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_scale, "scale")),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_minus, "interior-index")),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_plus, "exterior-index")),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_btype, "boundary-type")),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_outbase, "output-base")),
                    LaunchArg::Buf(&self.b_out),
                    LaunchArg::Int(self.num_mb as i64),
                    LaunchArg::Int(self.num_tasks as i64),
                    LaunchArg::Int(self.gbw as i64),
                ];
                let groups = self.num_tasks.div_ceil(cand.src.units_per_workgroup);
                self.queue.launch(&cand.kernel, groups, &args)
            }
            Stage::Lift => {
                let mut args: Vec<LaunchArg> = vec![
                    LaunchArg::Buf(&self.b_in),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_invjac, "inverse-jacobian")),
                ];
                if !cand.plan.unroll {
                    args.push(LaunchArg::Buf(Self::stage_buffer(&self.b_lall, "matrix")));
                }
                args.push(LaunchArg::Buf(&self.b_out));
                args.push(LaunchArg::Int(self.num_mb as i64));
                args.push(LaunchArg::Int(self.num_k as i64));
                let groups = self.num_mb.div_ceil(cand.src.units_per_workgroup);
                self.queue.launch(&cand.kernel, groups, &args)
            }
            Stage::Assembly => {
                let args = [
                    LaunchArg::Buf(&self.b_in),
                    LaunchArg::Buf(Self::stage_buffer(&self.b_second, "second-operand")),
                    LaunchArg::Buf(&self.b_out),
                    LaunchArg::Int(self.num_mb as i64),
                    LaunchArg::Int(self.num_k as i64),
                    LaunchArg::Real(ASSEMBLY_A),
                    LaunchArg::Real(ASSEMBLY_B),
                ];
                self.queue.launch(&cand.kernel, self.nf * self.num_mb, &args)
            }
        }
    }
}

/// Largest relative deviation between `a` and the reference `b`, with the
/// scale floored at one so zero-heavy outputs do not inflate it. Any
/// non-finite word counts as an unbounded deviation.
fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (x - y).abs();
        if !d.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(d);
    }
    worst / scale
}

/// Measure one candidate on the workload. The plan is first compiled and
/// gated: its output on the workload must match the degenerate plan's
/// reference before any timing counts. Gated plans then run
/// [`WARMUP_RUNS`] untimed and [`TIMED_RUNS`] timed repetitions; the
/// median of the timed ones is the result. Any failure along the way
/// disqualifies the plan rather than aborting the study.
pub fn benchmark_plan(
    plan: &KernelPlan,
    key: &TuningKey,
    workload: &Workload<'_>,
    clock: &dyn Clock,
) -> Result<PlanOutcome> {
    workload.check_key(key)?;
    if plan.stage != key.stage || plan.order != key.order || plan.precision != key.precision {
        return Err(Error::Tune(format!(
            "plan {} does not fit key {key}",
            plan.descriptor()
        )));
    }
    let cand = match workload.compile(plan) {
        Ok(c) => c,
        Err(e) => {
            return Ok(PlanOutcome::Disqualified {
                reason: format!("compilation failed: {e}"),
            })
        }
    };

    let gated = workload.zero_output().and_then(|()| {
        workload.launch(&cand)?;
        workload.queue.synchronize()?;
        workload.queue.read_back(&workload.b_out)
    });
    let out = match gated {
        Ok(v) => v,
        Err(e) => {
            return Ok(PlanOutcome::Disqualified {
                reason: format!("launch failed: {e}"),
            })
        }
    };
    let rel = relative_difference(&out, &workload.reference);
    if rel > workload.tolerance() {
        return Ok(PlanOutcome::Disqualified {
            reason: format!("results differ from the reference plan by {rel:.3e} (relative)"),
        });
    }

    for _ in 0..WARMUP_RUNS {
        if let Err(e) = workload
            .launch(&cand)
            .and_then(|()| workload.queue.synchronize())
        {
            return Ok(PlanOutcome::Disqualified {
                reason: format!("warmup failed: {e}"),
            });
        }
    }
    let mut times = Vec::with_capacity(TIMED_RUNS);
    for _ in 0..TIMED_RUNS {
        match wall_time(&workload.queue, clock, || workload.launch(&cand)) {
            Ok(t) => times.push(t),
            Err(e) => {
                return Ok(PlanOutcome::Disqualified {
                    reason: format!("timed run failed: {e}"),
                })
            }
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(PlanOutcome::Timed {
        median_seconds: times[TIMED_RUNS / 2],
    })
}

/// Index of the fastest correct row. Ties break toward the plan whose
/// descriptor sorts first, so selection is deterministic and independent
/// of candidate order.
fn select_index(rows: &[StudyRow]) -> Option<usize> {
    let mut best: Option<(usize, f64, String)> = None;
    for (i, row) in rows.iter().enumerate() {
        let median = match row.outcome {
            PlanOutcome::Timed { median_seconds } => median_seconds,
            PlanOutcome::Disqualified { .. } => continue,
        };
        let desc = row.plan.descriptor();
        let better = match &best {
            None => true,
            Some((_, bm, bd)) => median < *bm || (median == *bm && desc < *bd),
        };
        if better {
            best = Some((i, median, desc));
        }
    }
    best.map(|(i, _, _)| i)
}

/// Benchmark every plan in `plans` serially on `workload` and return the
/// full study plus a record for the fastest correct plan. Errors only if
/// the plan space is empty or every candidate was disqualified — the
/// degenerate plan, which defines the reference, should always survive.
pub fn autotune(
    key: &TuningKey,
    plans: &[KernelPlan],
    workload: &Workload<'_>,
    clock: &dyn Clock,
) -> Result<TuningStudy> {
    if plans.is_empty() {
        return Err(Error::Tune("cannot tune over an empty plan space".into()));
    }
    let mut rows = Vec::with_capacity(plans.len());
    for plan in plans {
        let outcome = benchmark_plan(plan, key, workload, clock)?;
        if let PlanOutcome::Disqualified { reason } = &outcome {
            log::warn!("plan {} disqualified: {reason}", plan.descriptor());
        }
        rows.push(StudyRow {
            plan: plan.clone(),
            outcome,
        });
    }
    let best = select_index(&rows).ok_or_else(|| {
        Error::Tune("every candidate plan was disqualified; even the reference plan failed".into())
    })?;
    let median = match rows[best].outcome {
        PlanOutcome::Timed { median_seconds } => median_seconds,
        PlanOutcome::Disqualified { .. } => unreachable!("selected row is always timed"),
    };
    let record = TuningRecord::new(key.clone(), rows[best].plan.clone(), median, workload.flops())?;
    Ok(TuningStudy { record, rows })
}

/// Write the studies as CSV: one row per candidate plan, plan parameters
/// first, then the measurement and its standing.
pub fn write_study_csv(studies: &[TuningStudy], path: &Path) -> Result<()> {
    let mut text = String::from(
        "stage,order,precision,w_s,w_i,w_p,storage,faces_per_block,unroll,median_seconds,status,selected\n",
    );
    for study in studies {
        for row in &study.rows {
            let p = &row.plan;
            let (status, median) = match &row.outcome {
                PlanOutcome::Timed { median_seconds } => ("ok", median_seconds.to_string()),
                PlanOutcome::Disqualified { .. } => ("disqualified", String::new()),
            };
            let selected = u8::from(row.plan == study.record.plan);
            writeln!(
                text,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                p.stage,
                p.order,
                p.precision,
                p.decomp.w_s,
                p.decomp.w_i,
                p.decomp.w_p,
                p.storage,
                p.faces_per_block,
                p.unroll,
                median,
                status,
                selected,
            )
            .expect("writing to a string cannot fail");
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Append `record` as one self-describing line to the cache at `path`,
/// creating the file if needed.
pub fn cache_store(path: &Path, record: &TuningRecord) -> Result<()> {
    let line = serde_json::to_string(record)
        .map_err(|e| Error::Tune(format!("cannot serialize tuning record: {e}")))?;
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Latest record stored under `key`, or `None` when the file or the key is
/// absent. Corrupt lines are skipped with a warning so one bad write never
/// poisons the whole cache.
pub fn cache_load(path: &Path, key: &TuningKey) -> Result<Option<TuningRecord>> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut found = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TuningRecord>(&line) {
            Ok(record) => {
                if record.key == *key {
                    found = Some(record);
                }
            }
            Err(e) => log::warn!(
                "skipping corrupt line {} in tuning cache {}: {e}",
                idx + 1,
                path.display()
            ),
        }
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{FakeClock, WallClock};
    use proptest::prelude::*;
    use std::sync::Mutex;
    use tempfile::tempdir;

    fn backend() -> CpuBackend {
        CpuBackend::with_cache_dir(std::env::temp_dir().join("dgforge-autotune-tests")).unwrap()
    }

    fn transport() -> SystemDefinition {
        SystemDefinition::advection([1.0, 0.5, 0.25], 1.0).unwrap()
    }

    fn config(order: usize) -> SolverConfig {
        SolverConfig {
            order,
            ..SolverConfig::default()
        }
    }

    fn gather_workload(be: &CpuBackend, order: usize) -> Workload<'_> {
        Workload::new(be, &transport(), Stage::Gather, &config(order), 2).unwrap()
    }

    fn sample_key(order: usize) -> TuningKey {
        TuningKey {
            stage: Stage::Gather,
            order,
            precision: Precision::F64,
            backend: "cpu-native".into(),
            granule: 16,
            k_m: 5,
        }
    }

    /// Clock whose successive interval readings replay a script: the n-th
    /// open/close reading pair reports the n-th scripted duration.
    struct ScriptClock {
        state: Mutex<(f64, usize)>,
        durations: Vec<f64>,
    }

    impl ScriptClock {
        fn new(durations: Vec<f64>) -> Self {
            ScriptClock {
                state: Mutex::new((0.0, 0)),
                durations,
            }
        }
    }

    impl Clock for ScriptClock {
        fn now(&self) -> f64 {
            let mut guard = self.state.lock().unwrap();
            if guard.1 % 2 == 1 {
                let idx = (guard.1 / 2).min(self.durations.len() - 1);
                guard.0 += self.durations[idx];
            }
            guard.1 += 1;
            guard.0
        }
    }

    #[test]
    fn the_injected_clock_decides_the_winner() {
        let be = backend();
        let w = gather_workload(&be, 1);
        let key = w.key();
        let plans = w.candidate_plans(&PlanLimits::default());
        assert!(plans.len() >= 3, "need at least three face groupings");
        let candidates = plans[..3].to_vec();
        let mut durations = Vec::new();
        for &d in &[2e-3, 1e-3, 3e-3] {
            durations.extend(std::iter::repeat_n(d, TIMED_RUNS));
        }
        let clock = ScriptClock::new(durations);
        let study = autotune(&key, &candidates, &w, &clock).unwrap();
        assert_eq!(study.record.plan, candidates[1]);
        assert_eq!(study.record.median_seconds, 1e-3);
        assert_eq!(study.record.flops, w.flops());
        assert!(study.record.flops > 0);
        let medians: Vec<f64> = study
            .rows
            .iter()
            .map(|r| match r.outcome {
                PlanOutcome::Timed { median_seconds } => median_seconds,
                PlanOutcome::Disqualified { ref reason } => panic!("disqualified: {reason}"),
            })
            .collect();
        assert_eq!(medians, vec![2e-3, 1e-3, 3e-3]);
    }

    #[test]
    fn ties_break_toward_the_first_descriptor() {
        let be = backend();
        let w = gather_workload(&be, 1);
        let key = w.key();
        let plans = w.candidate_plans(&PlanLimits::default());
        let study = autotune(&key, &plans, &w, &FakeClock::new(1e-3)).unwrap();
        let expected = plans.iter().map(|p| p.descriptor()).min().unwrap();
        assert_eq!(study.record.plan.descriptor(), expected);

        let mut reversed = plans.clone();
        reversed.reverse();
        let again = autotune(&key, &reversed, &w, &FakeClock::new(1e-3)).unwrap();
        assert_eq!(again.record.plan, study.record.plan);
    }

    #[test]
    fn wrong_results_are_never_selected_however_fast() {
        let be = backend();
        let mut w = gather_workload(&be, 1);
        let plans = w.candidate_plans(&PlanLimits::default());
        let candidates = plans[..2].to_vec();
        let bad = candidates[0].clone();
        w.set_source_hook(move |plan, src| {
            (*plan == bad).then(|| {
                let body = src.find('{').expect("kernel body");
                format!("{}{{ int sink = GID; }}", &src[..body])
            })
        });
        let key = w.key();
        // The sabotaged plan would look instantaneous; it must still lose.
        let study = autotune(&key, &candidates, &w, &FakeClock::new(1e-6)).unwrap();
        assert_eq!(study.record.plan, candidates[1]);
        match &study.rows[0].outcome {
            PlanOutcome::Disqualified { reason } => {
                assert!(reason.contains("differ"), "unexpected reason: {reason}")
            }
            PlanOutcome::Timed { .. } => panic!("sabotaged plan must be disqualified"),
        }

        let direct = benchmark_plan(&candidates[0], &key, &w, &WallClock::new()).unwrap();
        assert!(matches!(direct, PlanOutcome::Disqualified { .. }));
    }

    #[test]
    fn the_reference_plan_times_positive_on_a_real_clock() {
        let be = backend();
        let w = gather_workload(&be, 1);
        let plan = KernelPlan::degenerate(Stage::Gather, 1, Precision::F64);
        match benchmark_plan(&plan, &w.key(), &w, &WallClock::new()).unwrap() {
            PlanOutcome::Timed { median_seconds } => assert!(median_seconds > 0.0),
            PlanOutcome::Disqualified { reason } => panic!("reference disqualified: {reason}"),
        }
    }

    #[test]
    fn mismatched_keys_are_rejected_outright() {
        let be = backend();
        let w = gather_workload(&be, 1);
        let mut key = w.key();
        key.order = 2;
        let plan = KernelPlan::degenerate(Stage::Gather, 2, Precision::F64);
        assert!(benchmark_plan(&plan, &key, &w, &WallClock::new()).is_err());
    }

    #[test]
    fn the_study_covers_every_admissible_plan_and_exports_cleanly() {
        let be = backend();
        let w = gather_workload(&be, 2);
        let plans = w.candidate_plans(&PlanLimits::default());
        let study = autotune(&w.key(), &plans, &w, &FakeClock::new(1e-4)).unwrap();
        assert_eq!(study.rows.len(), plans.len());
        for (row, plan) in study.rows.iter().zip(&plans) {
            assert_eq!(row.plan, *plan);
        }

        let dir = tempdir().unwrap();
        let path = dir.path().join("tuning_study.csv");
        write_study_csv(std::slice::from_ref(&study), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), plans.len() + 1);
        assert!(lines[0].starts_with("stage,order,precision"));
        let selected = lines[1..].iter().filter(|l| l.ends_with(",1")).count();
        assert_eq!(selected, 1, "exactly one row is marked selected");
    }

    #[test]
    fn differentiation_plans_agree_with_the_reference_on_random_data() {
        let be = backend();
        let w = Workload::new(&be, &transport(), Stage::Differentiation, &config(1), 2).unwrap();
        let plans = w.candidate_plans(&PlanLimits::default());
        // One streamed and one unrolled variant; the exhaustive sweep over
        // every plan is an integration concern.
        let picks: Vec<KernelPlan> = [
            plans.iter().find(|p| !p.unroll),
            plans.iter().find(|p| p.unroll),
        ]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
        assert_eq!(picks.len(), 2);
        for plan in &picks {
            let out = w.run_plan(plan).unwrap();
            let rel = relative_difference(&out, w.reference());
            assert!(rel < 1e-12, "plan {} diverged by {rel}", plan.descriptor());
        }
    }

    #[test]
    fn lift_plans_reproduce_the_reference_accumulation() {
        let be = backend();
        let w = Workload::new(&be, &transport(), Stage::Lift, &config(2), 2).unwrap();
        let plans = w.candidate_plans(&PlanLimits::default());
        let plan = plans.iter().find(|p| p.unroll).unwrap_or(&plans[0]);
        let out = w.run_plan(plan).unwrap();
        let rel = relative_difference(&out, w.reference());
        assert!(rel < 1e-12, "plan {} diverged by {rel}", plan.descriptor());
    }

    #[test]
    fn the_assembly_stage_has_exactly_one_candidate() {
        let be = backend();
        let w = Workload::new(&be, &transport(), Stage::Assembly, &config(2), 3).unwrap();
        let plans = w.candidate_plans(&PlanLimits::default());
        assert_eq!(plans.len(), 1);
        let study = autotune(&w.key(), &plans, &w, &FakeClock::new(1e-5)).unwrap();
        assert_eq!(study.record.plan, plans[0]);
    }

    #[test]
    fn cache_round_trips_and_returns_the_latest_record() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tune-cache");
        let key = sample_key(3);
        assert!(cache_load(&path, &key).unwrap().is_none());

        let plan = KernelPlan::degenerate(Stage::Gather, 3, Precision::F64);
        let first = TuningRecord::new(key.clone(), plan.clone(), 2e-3, 1000).unwrap();
        cache_store(&path, &first).unwrap();
        assert_eq!(cache_load(&path, &key).unwrap().unwrap(), first);

        // A corrupt line is skipped; a later record for the same key wins.
        {
            let mut f = fs::OpenOptions::new().append(true).open(&path).unwrap();
            writeln!(f, "{{ not a record").unwrap();
        }
        let mut other_plan = plan.clone();
        other_plan.faces_per_block = 8;
        let second = TuningRecord::new(key.clone(), other_plan, 1e-3, 1000).unwrap();
        cache_store(&path, &second).unwrap();
        assert_eq!(cache_load(&path, &key).unwrap().unwrap(), second);

        let unrelated = TuningKey {
            order: 4,
            ..key.clone()
        };
        assert!(cache_load(&path, &unrelated).unwrap().is_none());
    }

    #[test]
    fn keys_serialize_stably() {
        let key = sample_key(3);
        assert_eq!(key.to_string(), "gather:n3:f64:cpu-native:g16:km5");
        let json = serde_json::to_string(&key).unwrap();
        let back: TuningKey = serde_json::from_str(&json).unwrap();
        assert_eq!(back, key);
    }

    #[test]
    fn records_reject_impossible_measurements() {
        let key = sample_key(3);
        let plan = KernelPlan::degenerate(Stage::Gather, 3, Precision::F64);
        assert!(TuningRecord::new(key.clone(), plan.clone(), 0.0, 1).is_err());
        assert!(TuningRecord::new(key.clone(), plan.clone(), -1.0, 1).is_err());
        let wrong_order = KernelPlan::degenerate(Stage::Gather, 4, Precision::F64);
        assert!(TuningRecord::new(key, wrong_order, 1e-3, 1).is_err());
    }

    proptest! {
        #[test]
        fn selection_is_the_argmin_over_surviving_rows(
            entries in proptest::collection::vec((1e-3f64..10.0, any::<bool>()), 1..20)
        ) {
            let rows: Vec<StudyRow> = entries
                .iter()
                .enumerate()
                .map(|(i, (median, dq))| StudyRow {
                    plan: {
                        let mut p = KernelPlan::degenerate(Stage::Gather, 2, Precision::F64);
                        p.faces_per_block = i + 1;
                        p
                    },
                    outcome: if *dq {
                        PlanOutcome::Disqualified { reason: "test".into() }
                    } else {
                        PlanOutcome::Timed { median_seconds: *median }
                    },
                })
                .collect();
            match select_index(&rows) {
                None => prop_assert!(rows
                    .iter()
                    .all(|r| matches!(r.outcome, PlanOutcome::Disqualified { .. }))),
                Some(i) => {
                    let winner = match rows[i].outcome {
                        PlanOutcome::Timed { median_seconds } => median_seconds,
                        PlanOutcome::Disqualified { .. } => {
                            return Err(TestCaseError::fail("selected a disqualified row"))
                        }
                    };
                    for row in &rows {
                        if let PlanOutcome::Timed { median_seconds } = row.outcome {
                            prop_assert!(
                                winner < median_seconds
                                    || (winner == median_seconds
                                        && rows[i].plan.descriptor() <= row.plan.descriptor())
                            );
                        }
                    }
                }
            }
        }
    }
}
