//! Flux-gather kernel generator. One work unit is a *directed face side*:
//! for each element face (4 per element), the kernel gathers the interior
//! ("minus") trace at every face node, obtains the exterior ("plus") trace
//! — from the neighbor through a precomputed index table, or synthesized by
//! a boundary rule — evaluates the fused numerical-flux expression, scales
//! by the face's surface Jacobian, and writes the result into the facial
//! buffer slot that the lift stage later consumes.
//!
//! All indexing (node permutations across faces, boundary classification)
//! is table-driven, so the generated text depends only on the order, the
//! flux expression, and the boundary rule list — not on any particular
//! mesh.

use super::{add_lit, field_off, fmt_real, KernelPlan, KernelSource, Src, Stage};
use crate::error::{Error, Result};
use crate::fluxdsl::{LoweredFlux, ScalarNode, Side};
use crate::layout::MicroblockLayout;

/// How the exterior trace is synthesized on a boundary face.
///
/// The `btype` table entry for a task is `0` for interior faces and
/// `1 + rule_index` for boundary faces, indexing the rule list the kernel
/// was generated with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GhostRule {
    /// Exterior trace copies the interior trace (zero-jump outflow).
    CopyInterior,
    /// Exterior trace copies the interior trace with the listed components
    /// negated (reflecting walls).
    MirrorNegate(Vec<usize>),
    /// Exterior trace is read from the prescribed-data buffer at the slot
    /// given by the task's plus-index entry.
    Prescribed,
}

impl GhostRule {
    /// Extra floating-point operations per face node relative to an
    /// interior face.
    pub fn extra_flops(&self) -> u64 {
        match self {
            GhostRule::MirrorNegate(comps) => comps.len() as u64,
            _ => 0,
        }
    }
}

/// Generate the flux-gather kernel.
///
/// Buffer arguments at launch, in order: `u` (volume fields), `gdata`
/// (prescribed boundary data, one row of `gbw` words per field; pass a
/// 1-word dummy with `gbw = 1` when no rule prescribes data), `normals`
/// (3 per task), `scale` (surface Jacobian per task), `minus_idx` /
/// `plus_idx` / `btype` / `out_base` (index tables), `fluxout`, then the
/// integers `num_mb`, `num_tasks`, `gbw`.
///
/// `minus_idx[task*Nfp + m]` is the volume word (within one field's block)
/// of the interior trace; `plus_idx` likewise for interior tasks, or the
/// `gdata` slot for prescribed-boundary tasks. `out_base[task]` is the
/// facial word (within one field's block) where the task's `Nfp` outputs
/// start.
pub fn generate_gather_kernel(
    plan: &KernelPlan,
    layout: &MicroblockLayout,
    nfp: usize,
    flux: &LoweredFlux,
    rules: &[GhostRule],
) -> Result<KernelSource> {
    if plan.stage != Stage::Gather {
        return Err(Error::Codegen(format!(
            "gather generator got a {} plan",
            plan.stage
        )));
    }
    if nfp == 0 {
        return Err(Error::Codegen("gather kernel needs at least one face node".into()));
    }
    let nc = flux.num_components();
    if nc == 0 {
        return Err(Error::Codegen("flux has no components".into()));
    }
    for rule in rules {
        if let GhostRule::MirrorNegate(comps) = rule {
            if let Some(&c) = comps.iter().find(|&&c| c >= nc) {
                return Err(Error::Codegen(format!(
                    "mirror rule negates component {c}, but the flux has {nc}"
                )));
            }
        }
    }
    let fpb = plan.faces_per_block;
    let lanes = fpb * nfp;
    let pad = layout.padded_size;
    let kmf = layout.k_m * 4 * nfp;

    let name = plan.descriptor();
    let mut s = Src::new();
    s.open(format!(
        "kernel {name}(global const real* u, global const real* gdata, \
         global const real* normals, global const real* scale, \
         global const int* minus_idx, global const int* plus_idx, \
         global const int* btype, global const int* out_base, \
         global real* fluxout, int num_mb, int num_tasks, int gbw) lanes {lanes} {} {{",
        plan.precision
    ));
    // Negative constants would parse as a sign flip applied to a positive
    // literal, which the instrumented backend bills as an operation. A
    // read-only table keeps every stated constant free of charge.
    let neg_lits: Vec<usize> = flux
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(id, node)| match node {
            ScalarNode::Lit(bits) if f64::from_bits(*bits).is_sign_negative() => Some(id),
            _ => None,
        })
        .collect();
    if !neg_lits.is_empty() {
        let body = neg_lits
            .iter()
            .map(|&id| match flux.nodes[id] {
                ScalarNode::Lit(bits) => fmt_real(f64::from_bits(bits)),
                _ => unreachable!(),
            })
            .collect::<Vec<_>>()
            .join(", ");
        s.line(format!("static real cpool[] = {{{body}}};"));
    }
    s.decl(format!("int fw = num_mb * {pad};"));
    s.decl(format!("int flw = num_mb * {kmf};"));
    s.decl(format!("int tl = LID / {nfp};"));
    s.decl(format!("int m = LID % {nfp};"));
    s.decl(format!("int task = GID * {fpb} + tl;"));
    s.open("if (task < num_tasks) {");
    s.decl(format!("int tb = task * {nfp};"));
    s.decl("int mi = minus_idx[tb + m];");
    s.decl("int pi = plus_idx[tb + m];");
    s.decl("int bt = btype[task];");
    s.decl("int ob = out_base[task];");
    for d in 0..3 {
        s.decl(format!("real n{d} = normals[{}];", add_lit("task * 3", d)));
    }
    s.decl("real sc = scale[task];");
    for c in 0..nc {
        s.decl(format!("real um{c} = u[{}];", field_off("mi", "fw", c)));
    }
    for c in 0..nc {
        s.decl(format!("real up{c} = 0.0;"));
    }
    s.open("if (bt == 0) {");
    for c in 0..nc {
        s.line(format!("up{c} = u[{}];", field_off("pi", "fw", c)));
    }
    for (r, rule) in rules.iter().enumerate() {
        s.else_open();
        s.open(format!("if (bt == {}) {{", r + 1));
        match rule {
            GhostRule::CopyInterior => {
                for c in 0..nc {
                    s.line(format!("up{c} = um{c};"));
                }
            }
            GhostRule::MirrorNegate(comps) => {
                for c in 0..nc {
                    if comps.contains(&c) {
                        s.line(format!("up{c} = -um{c};"));
                    } else {
                        s.line(format!("up{c} = um{c};"));
                    }
                }
            }
            GhostRule::Prescribed => {
                for c in 0..nc {
                    s.line(format!("up{c} = gdata[{}];", field_off("pi", "gbw", c)));
                }
            }
        }
    }
    for _ in 0..=rules.len() {
        s.close();
    }
    // The fused flux expression: one assignment per DAG node, in
    // evaluation order, so the operation count equals the DAG's.
    for (id, node) in flux.nodes.iter().enumerate() {
        let rhs = match *node {
            ScalarNode::Trace { component, side } => match side {
                Side::Interior => format!("um{component}"),
                Side::Exterior => format!("up{component}"),
            },
            ScalarNode::NormalComp(d) => format!("n{d}"),
            ScalarNode::Lit(bits) => {
                if let Some(slot) = neg_lits.iter().position(|&n| n == id) {
                    format!("cpool[{slot}]")
                } else {
                    fmt_real(f64::from_bits(bits))
                }
            }
            ScalarNode::Add(a, b) => format!("t{a} + t{b}"),
            ScalarNode::Sub(a, b) => format!("t{a} - t{b}"),
            ScalarNode::Mul(a, b) => format!("t{a} * t{b}"),
            ScalarNode::Neg(a) => format!("-t{a}"),
            ScalarNode::Abs(a) => format!("fabs(t{a})"),
        };
        s.decl(format!("real t{id} = {rhs};"));
    }
    for &(c, node) in &flux.outputs {
        s.line(format!(
            "fluxout[{}] = sc * t{node};",
            field_off("ob + m", "flw", c)
        ));
    }
    s.close();
    s.close();
    let registers_estimate = s.locals;
    Ok(KernelSource {
        name,
        text: s.finish(),
        lanes,
        units_per_workgroup: fpb,
        shared_words: 0,
        registers_estimate,
    })
}
