//! Generators for the two local stages: volume differentiation and facial
//! lift. Both compute dense small-operator products per element and node.
//!
//! Every strategy and work decomposition emits the *same arithmetic
//! sequence* per (element, node) pair — the same dot-product order, the
//! same coefficient-fold order — so all plans produce bitwise-identical
//! results and identical operation counts. Plans differ only in where
//! operands are read from (global memory, a shared staging buffer, or
//! constants baked into the text) and how many microblocks one workgroup
//! covers.
//!
//! Work is guarded by the real element count: lanes mapped to tail slots of
//! the last microblock, and whole microblocks past the end, perform no
//! loads, arithmetic, or stores.

use nalgebra::DMatrix;

use super::{
    add_lit, field_off, fmt_real, rows_per_pass, KernelPlan, KernelSource, Src, Stage,
    StorageStrategy,
};
use crate::error::{Error, Result};
use crate::layout::MicroblockLayout;

/// Emit a cooperative staging loop copying `size` words into
/// `shared[0..size)`, all lanes striding together.
fn stage_flat(
    s: &mut Src,
    fresh: &mut usize,
    lanes: usize,
    shared: &str,
    size: usize,
    source: impl Fn(&str) -> String,
) {
    *fresh += 1;
    let n = *fresh;
    let iters = size.div_ceil(lanes);
    s.open(format!("for c{n} = 0 to {iters} {{"));
    if iters == 1 {
        s.decl(format!("int si{n} = LID;"));
    } else {
        s.decl(format!("int si{n} = c{n} * {lanes} + LID;"));
    }
    s.open(format!("if (si{n} < {size}) {{"));
    let idx = format!("si{n}");
    s.line(format!("{shared}[{idx}] = {};", source(&idx)));
    s.close();
    s.close();
}

/// Emit `static real NAME[] = {...};` from a row-major matrix walk.
fn emit_static(s: &mut Src, name: &str, values: impl Iterator<Item = f64>) {
    let mut list = String::new();
    for v in values {
        if !list.is_empty() {
            list.push_str(", ");
        }
        list.push_str(&fmt_real(v));
    }
    s.line(format!("static real {name}[] = {{{list}}};"));
}

/// Generate the volume-differentiation kernel.
///
/// For each element `k`, node `i`, and coupling entry `(f, g)` of
/// `structure`, the kernel computes the three reference-axis derivatives of
/// input field `g` and folds them with per-element coefficients:
///
/// ```text
/// out[f][k,i] = sum over entries s=(f,g) of
///               sum over axis mu of geo[(k*NS + s)*3 + mu] * (D_mu in_g)[k,i]
/// ```
///
/// `geo` carries all geometric factors and system coupling coefficients,
/// precomputed per element by the caller; `structure` lists the (output,
/// input) pairs with nonzero coupling, defining the `geo` entry order.
/// Buffer arguments at launch: `u` (inputs), `geo`, `d_all` (the three
/// operators concatenated, absent when the plan bakes them in), `out`,
/// then `num_mb`, `num_k`.
pub fn generate_diff_kernel(
    plan: &KernelPlan,
    layout: &MicroblockLayout,
    d: &[DMatrix<f64>; 3],
    structure: &[(usize, usize)],
    num_in: usize,
    num_out: usize,
) -> Result<KernelSource> {
    if plan.stage != Stage::Differentiation {
        return Err(Error::Codegen(format!(
            "differentiation generator got a {} plan",
            plan.stage
        )));
    }
    let np = layout.np;
    for m in d.iter() {
        if m.nrows() != np || m.ncols() != np {
            return Err(Error::Codegen(format!(
                "derivative operator must be {np}x{np}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    if structure.is_empty() {
        return Err(Error::Codegen("coupling structure is empty".into()));
    }
    for &(f, g) in structure {
        if f >= num_out || g >= num_in {
            return Err(Error::Codegen(format!(
                "coupling ({f}, {g}) outside {num_out} outputs / {num_in} inputs"
            )));
        }
    }

    let km = layout.k_m;
    let pad = layout.padded_size;
    let knp = km * np;
    let (ws, wi, wp) = (plan.decomp.w_s, plan.decomp.w_i, plan.decomp.w_p);
    let lanes = knp * wp;
    let mbw = ws * wi * wp;
    let ns3 = structure.len() * 3;
    let storage = plan.storage;
    let unroll = plan.unroll;
    let rpp = rows_per_pass(np);
    let passes: Vec<(usize, usize)> = [(0, rpp), (rpp, np)]
        .into_iter()
        .filter(|(r0, r1)| r1 > r0)
        .collect();

    // Distinct input fields, in order of first appearance: this fixes the
    // canonical accumulation order every plan reproduces.
    let mut inputs: Vec<usize> = Vec::new();
    for &(_, g) in structure {
        if !inputs.contains(&g) {
            inputs.push(g);
        }
    }

    let shared_words = match storage {
        StorageStrategy::MatrixInShared => 3 * np * np,
        StorageStrategy::FieldsInShared => wi * wp * knp,
        StorageStrategy::RowPartitionInShared => rpp * np,
        StorageStrategy::StreamAll => 0,
    };

    let name = plan.descriptor();
    let mut s = Src::new();
    let mut fresh = 0usize;
    let dparam = if unroll { "" } else { "global const real* d_all, " };
    s.open(format!(
        "kernel {name}(global const real* u, global const real* geo, {dparam}global real* out, \
         int num_mb, int num_k) lanes {lanes} {} {{",
        plan.precision
    ));
    if unroll {
        for (mu, mat) in d.iter().enumerate() {
            emit_static(
                &mut s,
                &format!("ds{mu}"),
                (0..np).flat_map(|i| (0..np).map(move |j| mat[(i, j)])),
            );
        }
    }
    match storage {
        StorageStrategy::MatrixInShared => s.line(format!("shared real dsh[{}];", 3 * np * np)),
        StorageStrategy::FieldsInShared => s.line(format!("shared real ush[{}];", wi * wp * knp)),
        StorageStrategy::RowPartitionInShared => {
            s.line(format!("shared real rsh[{}];", rpp * np))
        }
        StorageStrategy::StreamAll => {}
    }
    s.decl(format!("int fw = num_mb * {pad};"));
    s.decl(format!("int p = LID / {knp};"));
    s.decl(format!("int lcl = LID % {knp};"));
    s.decl(format!("int e = lcl / {np};"));
    s.decl(format!("int i = lcl % {np};"));
    if storage == StorageStrategy::RowPartitionInShared {
        s.decl(format!("int bi = i / {rpp};"));
        for (pp, &(r0, _)) in passes.iter().enumerate() {
            if r0 == 0 {
                s.decl(format!("int lrow{pp} = i * {np};"));
            } else {
                s.decl(format!("int lrow{pp} = (i - {r0}) * {np};"));
            }
        }
    } else {
        s.decl(format!("int drow = i * {np};"));
    }
    s.decl(format!("int wgb = GID * {mbw};"));

    if storage == StorageStrategy::MatrixInShared {
        stage_flat(&mut s, &mut fresh, lanes, "dsh", 3 * np * np, |idx| {
            format!("d_all[{idx}]")
        });
        s.line("barrier;");
    }

    let in_sloop = ws > 1;
    if in_sloop {
        s.open(format!("for sq = 0 to {ws} {{"));
        s.decl(format!("int sb = wgb + sq * {};", wi * wp));
    } else {
        s.decl("int sb = wgb;");
    }

    for ii in 0..wi {
        let off = ii * wp;
        s.decl(format!("int mb{ii} = {} + p;", add_lit("sb", off)));
        s.decl(format!("int k{ii} = mb{ii} * {km} + e;"));
        s.decl(format!("int gb{ii} = k{ii} * {ns3};"));
        if storage == StorageStrategy::FieldsInShared {
            let q = if off == 0 {
                "p".to_string()
            } else {
                format!("(p + {off})")
            };
            s.decl(format!("int qb{ii} = {q} * {knp} + e * {np};"));
        }
    }
    for f in 0..num_out {
        for ii in 0..wi {
            s.decl(format!("real acc{f}_{ii} = 0.0;"));
        }
    }

    // The per-entry coefficient folds, emitted after a field's derivatives
    // are complete. Order: entries in structure order, axes innermost.
    let emit_folds = |s: &mut Src, g: usize, ii: usize| {
        for (sidx, &(f, gg)) in structure.iter().enumerate() {
            if gg != g {
                continue;
            }
            for mu in 0..3 {
                let gidx = add_lit(&format!("gb{ii}"), sidx * 3 + mu);
                s.line(format!(
                    "acc{f}_{ii} = acc{f}_{ii} + geo[{gidx}] * d{mu}_{g}_{ii};"
                ));
            }
        }
    };

    if storage == StorageStrategy::RowPartitionInShared {
        // Derivative accumulators and operand bases for every field up
        // front (integer address arithmetic is safe unguarded), then one
        // barrier-paced staging pass per operator row block.
        for &g in &inputs {
            for ii in 0..wi {
                s.decl(format!(
                    "int ub{g}_{ii} = {};",
                    field_off(&format!("mb{ii} * {pad} + e * {np}"), "fw", g)
                ));
                for mu in 0..3 {
                    s.decl(format!("real d{mu}_{g}_{ii} = 0.0;"));
                }
            }
        }
        for mu in 0..3 {
            for (pp, &(r0, r1)) in passes.iter().enumerate() {
                let base = mu * np * np + r0 * np;
                stage_flat(&mut s, &mut fresh, lanes, "rsh", (r1 - r0) * np, |idx| {
                    format!("d_all[{}]", add_lit(idx, base))
                });
                s.line("barrier;");
                for ii in 0..wi {
                    s.open(format!("if (k{ii} < num_k) {{"));
                    s.open(format!("if (bi == {pp}) {{"));
                    fresh += 1;
                    let j = format!("j{fresh}");
                    s.open(format!("for {j} = 0 to {np} {{"));
                    for &g in &inputs {
                        s.line(format!(
                            "d{mu}_{g}_{ii} = d{mu}_{g}_{ii} + rsh[lrow{pp} + {j}] * u[ub{g}_{ii} + {j}];"
                        ));
                    }
                    s.close();
                    s.close();
                    s.close();
                }
                s.line("barrier;");
            }
        }
        for &g in &inputs {
            for ii in 0..wi {
                s.open(format!("if (k{ii} < num_k) {{"));
                emit_folds(&mut s, g, ii);
                s.close();
            }
        }
    } else {
        for &g in &inputs {
            if storage == StorageStrategy::FieldsInShared {
                // Stage this field's data for all wi*wp microblocks of the
                // current sequential step: exactly wi full-width strides.
                for tt in 0..wi {
                    fresh += 1;
                    let n = fresh;
                    if tt == 0 {
                        s.decl(format!("int st{n} = LID;"));
                    } else {
                        s.decl(format!("int st{n} = {} + LID;", tt * lanes));
                    }
                    s.decl(format!("int stq{n} = st{n} / {knp};"));
                    s.decl(format!("int sre{n} = st{n} % {knp};"));
                    s.decl(format!("int smb{n} = sb + stq{n};"));
                    s.open(format!("if (smb{n} < num_mb) {{"));
                    s.line(format!(
                        "ush[st{n}] = u[{}];",
                        field_off(&format!("smb{n} * {pad} + sre{n}"), "fw", g)
                    ));
                    s.close();
                }
                s.line("barrier;");
            }
            for ii in 0..wi {
                s.open(format!("if (k{ii} < num_k) {{"));
                if storage != StorageStrategy::FieldsInShared {
                    s.decl(format!(
                        "int ub{g}_{ii} = {};",
                        field_off(&format!("mb{ii} * {pad} + e * {np}"), "fw", g)
                    ));
                }
                for mu in 0..3 {
                    s.decl(format!("real d{mu}_{g}_{ii} = 0.0;"));
                }
                let usrc = |j: &str| -> String {
                    if storage == StorageStrategy::FieldsInShared {
                        format!("ush[qb{ii} + {j}]")
                    } else {
                        format!("u[ub{g}_{ii} + {j}]")
                    }
                };
                if unroll {
                    for j in 0..np {
                        let uat = if storage == StorageStrategy::FieldsInShared {
                            format!("ush[{}]", add_lit(&format!("qb{ii}"), j))
                        } else {
                            format!("u[{}]", add_lit(&format!("ub{g}_{ii}"), j))
                        };
                        for mu in 0..3 {
                            s.line(format!(
                                "d{mu}_{g}_{ii} = d{mu}_{g}_{ii} + ds{mu}[{}] * {uat};",
                                add_lit("drow", j)
                            ));
                        }
                    }
                } else {
                    fresh += 1;
                    let j = format!("j{fresh}");
                    s.open(format!("for {j} = 0 to {np} {{"));
                    for mu in 0..3 {
                        let dmat = match storage {
                            StorageStrategy::MatrixInShared => {
                                format!("dsh[{}]", add_lit(&format!("drow + {j}"), mu * np * np))
                            }
                            _ => {
                                format!("d_all[{}]", add_lit(&format!("drow + {j}"), mu * np * np))
                            }
                        };
                        s.line(format!(
                            "d{mu}_{g}_{ii} = d{mu}_{g}_{ii} + {dmat} * {};",
                            usrc(&j)
                        ));
                    }
                    s.close();
                }
                emit_folds(&mut s, g, ii);
                s.close();
            }
            if storage == StorageStrategy::FieldsInShared {
                s.line("barrier;");
            }
        }
    }

    for ii in 0..wi {
        s.open(format!("if (k{ii} < num_k) {{"));
        s.decl(format!("int ob{ii} = mb{ii} * {pad} + e * {np} + i;"));
        for f in 0..num_out {
            s.line(format!(
                "out[{}] = acc{f}_{ii};",
                field_off(&format!("ob{ii}"), "fw", f)
            ));
        }
        s.close();
    }

    if in_sloop {
        s.close();
    }
    s.close();
    let registers_estimate = s.locals;
    Ok(KernelSource {
        name,
        text: s.finish(),
        lanes,
        units_per_workgroup: mbw,
        shared_words,
        registers_estimate,
    })
}

/// Generate the lift kernel: accumulate the Jacobian-weighted facial
/// contribution into the volume output, in place.
///
/// For each element `k`, node `i`, and field `f`:
///
/// ```text
/// out[f][k,i] += invjac[k] * sum over the 4*Nfp face nodes m of
///                lift[i, m] * facial[f][k*4*Nfp + m]
/// ```
///
/// Buffer arguments at launch: `facial` (per-field face-node data, one
/// dense 4*Nfp block per element, sized in whole microblocks), `invjac`
/// (reciprocal element Jacobians), `l_all` (the lift operator, absent when
/// baked in), `out`, then `num_mb`, `num_k`.
pub fn generate_lift_kernel(
    plan: &KernelPlan,
    layout: &MicroblockLayout,
    lift: &DMatrix<f64>,
    num_fields: usize,
) -> Result<KernelSource> {
    if plan.stage != Stage::Lift {
        return Err(Error::Codegen(format!(
            "lift generator got a {} plan",
            plan.stage
        )));
    }
    let np = layout.np;
    if lift.nrows() != np || lift.ncols() == 0 || !lift.ncols().is_multiple_of(4) {
        return Err(Error::Codegen(format!(
            "lift operator must be {np} x 4*Nfp, got {}x{}",
            lift.nrows(),
            lift.ncols()
        )));
    }
    if num_fields == 0 {
        return Err(Error::Codegen("lift kernel needs at least one field".into()));
    }
    let nfp4 = lift.ncols();
    let km = layout.k_m;
    let pad = layout.padded_size;
    let knp = km * np;
    let kmf = km * nfp4;
    let (ws, wi, wp) = (plan.decomp.w_s, plan.decomp.w_i, plan.decomp.w_p);
    let lanes = knp * wp;
    let mbw = ws * wi * wp;
    let storage = plan.storage;
    let unroll = plan.unroll;
    let rpp = rows_per_pass(np);
    let passes: Vec<(usize, usize)> = [(0, rpp), (rpp, np)]
        .into_iter()
        .filter(|(r0, r1)| r1 > r0)
        .collect();

    let shared_words = match storage {
        StorageStrategy::MatrixInShared => np * nfp4,
        StorageStrategy::FieldsInShared => wi * wp * kmf,
        StorageStrategy::RowPartitionInShared => rpp * nfp4,
        StorageStrategy::StreamAll => 0,
    };

    let name = plan.descriptor();
    let mut s = Src::new();
    let mut fresh = 0usize;
    let lparam = if unroll { "" } else { "global const real* l_all, " };
    s.open(format!(
        "kernel {name}(global const real* facial, global const real* invjac, {lparam}\
         global real* out, int num_mb, int num_k) lanes {lanes} {} {{",
        plan.precision
    ));
    if unroll {
        emit_static(
            &mut s,
            "ls",
            (0..np).flat_map(|i| (0..nfp4).map(move |m| lift[(i, m)])),
        );
    }
    match storage {
        StorageStrategy::MatrixInShared => s.line(format!("shared real lsh[{}];", np * nfp4)),
        StorageStrategy::FieldsInShared => s.line(format!("shared real ush[{}];", wi * wp * kmf)),
        StorageStrategy::RowPartitionInShared => {
            s.line(format!("shared real lsh[{}];", rpp * nfp4))
        }
        StorageStrategy::StreamAll => {}
    }
    s.decl(format!("int fw = num_mb * {pad};"));
    s.decl(format!("int flw = num_mb * {kmf};"));
    s.decl(format!("int p = LID / {knp};"));
    s.decl(format!("int lcl = LID % {knp};"));
    s.decl(format!("int e = lcl / {np};"));
    s.decl(format!("int i = lcl % {np};"));
    if storage == StorageStrategy::RowPartitionInShared {
        s.decl(format!("int bi = i / {rpp};"));
        for (pp, &(r0, _)) in passes.iter().enumerate() {
            if r0 == 0 {
                s.decl(format!("int lrow{pp} = i * {nfp4};"));
            } else {
                s.decl(format!("int lrow{pp} = (i - {r0}) * {nfp4};"));
            }
        }
    } else {
        s.decl(format!("int lrow = i * {nfp4};"));
    }
    s.decl(format!("int wgb = GID * {mbw};"));

    if storage == StorageStrategy::MatrixInShared {
        stage_flat(&mut s, &mut fresh, lanes, "lsh", np * nfp4, |idx| {
            format!("l_all[{idx}]")
        });
        s.line("barrier;");
    }

    let in_sloop = ws > 1;
    if in_sloop {
        s.open(format!("for sq = 0 to {ws} {{"));
        s.decl(format!("int sb = wgb + sq * {};", wi * wp));
    } else {
        s.decl("int sb = wgb;");
    }

    for ii in 0..wi {
        let off = ii * wp;
        s.decl(format!("int mb{ii} = {} + p;", add_lit("sb", off)));
        s.decl(format!("int k{ii} = mb{ii} * {km} + e;"));
        s.decl(format!("int fb{ii} = k{ii} * {nfp4};"));
        if storage == StorageStrategy::FieldsInShared {
            let q = if off == 0 {
                "p".to_string()
            } else {
                format!("(p + {off})")
            };
            s.decl(format!("int sfb{ii} = {q} * {kmf} + e * {nfp4};"));
        }
    }

    // Emit the dot product, Jacobian weighting, and in-place accumulation
    // for one (field, in-line microblock) pair; the caller has already
    // opened the guards.
    let emit_body = |s: &mut Src,
                         fresh: &mut usize,
                         f: usize,
                         ii: usize,
                         lmat: &dyn Fn(&str) -> String,
                         fsrc: &dyn Fn(&str) -> String,
                         fsrc_lit: &dyn Fn(usize) -> String| {
        s.decl(format!("real ac{f}_{ii} = 0.0;"));
        if unroll {
            for m in 0..nfp4 {
                s.line(format!(
                    "ac{f}_{ii} = ac{f}_{ii} + ls[{}] * {};",
                    add_lit("lrow", m),
                    fsrc_lit(m)
                ));
            }
        } else {
            *fresh += 1;
            let m = format!("m{fresh}");
            s.open(format!("for {m} = 0 to {nfp4} {{"));
            s.line(format!(
                "ac{f}_{ii} = ac{f}_{ii} + {} * {};",
                lmat(&m),
                fsrc(&m)
            ));
            s.close();
        }
        s.decl(format!("real iv{f}_{ii} = invjac[k{ii}];"));
        s.decl(format!(
            "int ow{f}_{ii} = {};",
            field_off(&format!("mb{ii} * {pad} + e * {np} + i"), "fw", f)
        ));
        s.line(format!(
            "out[ow{f}_{ii}] = out[ow{f}_{ii}] + iv{f}_{ii} * ac{f}_{ii};"
        ));
    };

    if storage == StorageStrategy::RowPartitionInShared {
        // One staging sweep per operator row block; each lane handles all
        // fields in the single pass that stages its row.
        for (pp, &(r0, r1)) in passes.iter().enumerate() {
            stage_flat(&mut s, &mut fresh, lanes, "lsh", (r1 - r0) * nfp4, |idx| {
                format!("l_all[{}]", add_lit(idx, r0 * nfp4))
            });
            s.line("barrier;");
            for ii in 0..wi {
                s.open(format!("if (k{ii} < num_k) {{"));
                s.open(format!("if (bi == {pp}) {{"));
                for f in 0..num_fields {
                    s.decl(format!(
                        "int flb{f}_{ii}_{pp} = {};",
                        field_off(&format!("fb{ii}"), "flw", f)
                    ));
                    s.decl(format!("real ac{f}_{ii}_{pp} = 0.0;"));
                    fresh += 1;
                    let m = format!("m{fresh}");
                    s.open(format!("for {m} = 0 to {nfp4} {{"));
                    s.line(format!(
                        "ac{f}_{ii}_{pp} = ac{f}_{ii}_{pp} + lsh[lrow{pp} + {m}] * facial[flb{f}_{ii}_{pp} + {m}];"
                    ));
                    s.close();
                    s.decl(format!("real iv{f}_{ii}_{pp} = invjac[k{ii}];"));
                    s.decl(format!(
                        "int ow{f}_{ii}_{pp} = {};",
                        field_off(&format!("mb{ii} * {pad} + e * {np} + i"), "fw", f)
                    ));
                    s.line(format!(
                        "out[ow{f}_{ii}_{pp}] = out[ow{f}_{ii}_{pp}] + iv{f}_{ii}_{pp} * ac{f}_{ii}_{pp};"
                    ));
                }
                s.close();
                s.close();
            }
            s.line("barrier;");
        }
    } else {
        for f in 0..num_fields {
            if storage == StorageStrategy::FieldsInShared {
                let sl = wi * wp * kmf;
                fresh += 1;
                let n = fresh;
                let iters = sl.div_ceil(lanes);
                s.open(format!("for c{n} = 0 to {iters} {{"));
                if iters == 1 {
                    s.decl(format!("int si{n} = LID;"));
                } else {
                    s.decl(format!("int si{n} = c{n} * {lanes} + LID;"));
                }
                s.open(format!("if (si{n} < {sl}) {{"));
                s.decl(format!("int stq{n} = si{n} / {kmf};"));
                s.decl(format!("int sre{n} = si{n} % {kmf};"));
                s.decl(format!("int smb{n} = sb + stq{n};"));
                s.open(format!("if (smb{n} < num_mb) {{"));
                s.line(format!(
                    "ush[si{n}] = facial[{}];",
                    field_off(&format!("smb{n} * {kmf} + sre{n}"), "flw", f)
                ));
                s.close();
                s.close();
                s.close();
                s.line("barrier;");
            }
            for ii in 0..wi {
                s.open(format!("if (k{ii} < num_k) {{"));
                if storage == StorageStrategy::FieldsInShared {
                    emit_body(
                        &mut s,
                        &mut fresh,
                        f,
                        ii,
                        &|m| format!("l_all[lrow + {m}]"),
                        &|m| format!("ush[sfb{ii} + {m}]"),
                        &|m| format!("ush[{}]", add_lit(&format!("sfb{ii}"), m)),
                    );
                } else {
                    s.decl(format!(
                        "int flb{f}_{ii} = {};",
                        field_off(&format!("fb{ii}"), "flw", f)
                    ));
                    let lmat: Box<dyn Fn(&str) -> String> = match storage {
                        StorageStrategy::MatrixInShared => {
                            Box::new(|m: &str| format!("lsh[lrow + {m}]"))
                        }
                        _ => Box::new(|m: &str| format!("l_all[lrow + {m}]")),
                    };
                    emit_body(
                        &mut s,
                        &mut fresh,
                        f,
                        ii,
                        &*lmat,
                        &|m| format!("facial[flb{f}_{ii} + {m}]"),
                        &|m| format!("facial[{}]", add_lit(&format!("flb{f}_{ii}"), m)),
                    );
                }
                s.close();
            }
            if storage == StorageStrategy::FieldsInShared {
                s.line("barrier;");
            }
        }
    }

    if in_sloop {
        s.close();
    }
    s.close();
    let registers_estimate = s.locals;
    Ok(KernelSource {
        name,
        text: s.finish(),
        lanes,
        units_per_workgroup: mbw,
        shared_words,
        registers_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegen::{enumerate_plans, PlanLimits, WorkDecomposition};
    use crate::executor::{CpuBackend, LaunchArg, Precision, Queue};

    /// Deterministic pseudo-random value in (-0.5, 0.5).
    fn tv(n: u64) -> f64 {
        let x = n
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let x = (x ^ (x >> 31)).wrapping_mul(0x9e3779b97f4a7c15);
        ((x >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    fn dmats(np: usize, seed: u64) -> [DMatrix<f64>; 3] {
        [0, 1, 2].map(|mu| {
            DMatrix::from_fn(np, np, |i, j| tv(seed + (mu * np * np + i * np + j) as u64))
        })
    }

    struct DiffFixture {
        layout: MicroblockLayout,
        d: [DMatrix<f64>; 3],
        structure: Vec<(usize, usize)>,
        num_k: usize,
        num_mb: usize,
        u: Vec<f64>,
        geo: Vec<f64>,
    }

    fn diff_fixture(np: usize, num_k: usize) -> DiffFixture {
        let layout = MicroblockLayout::choose(np, 16, 8);
        let num_mb = num_k.div_ceil(layout.k_m);
        let fw = num_mb * layout.padded_size;
        let structure = vec![(0, 0), (1, 0), (0, 1), (1, 1)];
        let mut u = vec![f64::NAN; 2 * fw];
        for g in 0..2 {
            for k in 0..num_k {
                for i in 0..np {
                    u[g * fw + layout.dof_index(k, i)] = tv((g * fw + k * np + i) as u64 + 900);
                }
            }
        }
        let geo: Vec<f64> = (0..num_k * structure.len() * 3)
            .map(|n| tv(n as u64 + 5000))
            .collect();
        DiffFixture {
            layout,
            d: dmats(np, 33),
            structure,
            num_k,
            num_mb,
            u,
            geo,
        }
    }

    /// Canonical host evaluation: the arithmetic sequence every plan must
    /// reproduce bitwise.
    fn host_diff(fx: &DiffFixture) -> Vec<f64> {
        let np = fx.layout.np;
        let fw = fx.num_mb * fx.layout.padded_size;
        let ns = fx.structure.len();
        let mut inputs = Vec::new();
        for &(_, g) in &fx.structure {
            if !inputs.contains(&g) {
                inputs.push(g);
            }
        }
        let mut out = vec![0.0f64; 2 * fw];
        for k in 0..fx.num_k {
            for i in 0..np {
                let mut acc = [0.0f64; 2];
                for &g in &inputs {
                    let mut dref = [0.0f64; 3];
                    for j in 0..np {
                        let uv = fx.u[g * fw + fx.layout.dof_index(k, j)];
                        for (mu, dr) in dref.iter_mut().enumerate() {
                            *dr += fx.d[mu][(i, j)] * uv;
                        }
                    }
                    for (sidx, &(f, gg)) in fx.structure.iter().enumerate() {
                        if gg != g {
                            continue;
                        }
                        for (mu, dr) in dref.iter().enumerate() {
                            acc[f] += fx.geo[(k * ns + sidx) * 3 + mu] * dr;
                        }
                    }
                }
                for (f, a) in acc.iter().enumerate() {
                    out[f * fw + fx.layout.dof_index(k, i)] = *a;
                }
            }
        }
        out
    }

    fn run_diff(backend: &CpuBackend, queue: &Queue, fx: &DiffFixture, plan: &KernelPlan) -> Vec<f64> {
        let src =
            generate_diff_kernel(plan, &fx.layout, &fx.d, &fx.structure, 2, 2).unwrap();
        let kernel = backend.compile(&src.text).unwrap();
        let fw = fx.num_mb * fx.layout.padded_size;
        let np = fx.layout.np;
        let ub = queue.alloc(fx.u.len(), plan.precision);
        queue.write(&ub, &fx.u).unwrap();
        let gb = queue.alloc(fx.geo.len(), plan.precision);
        queue.write(&gb, &fx.geo).unwrap();
        let ob = queue.alloc(2 * fw, plan.precision);
        let d_all: Vec<f64> = (0..3)
            .flat_map(|mu| {
                (0..np).flat_map(move |i| (0..np).map(move |j| (mu, i, j)))
            })
            .map(|(mu, i, j)| fx.d[mu][(i, j)])
            .collect();
        let db = queue.alloc(d_all.len(), plan.precision);
        queue.write(&db, &d_all).unwrap();
        let groups = fx.num_mb.div_ceil(src.units_per_workgroup);
        let mut args: Vec<LaunchArg> = vec![LaunchArg::Buf(&ub), LaunchArg::Buf(&gb)];
        if !plan.unroll {
            args.push(LaunchArg::Buf(&db));
        }
        args.push(LaunchArg::Buf(&ob));
        args.push(LaunchArg::Int(fx.num_mb as i64));
        args.push(LaunchArg::Int(fx.num_k as i64));
        queue.launch(&kernel, groups, &args).unwrap();
        queue.synchronize().unwrap();
        queue.read_back(&ob).unwrap()
    }

    #[test]
    fn identity_operator_reproduces_input() {
        let layout = MicroblockLayout::choose(4, 4, 4);
        let np = layout.np;
        let num_k: usize = 5;
        let num_mb = num_k.div_ceil(layout.k_m);
        let fw = num_mb * layout.padded_size;
        let eye = DMatrix::<f64>::identity(np, np);
        let d = [eye.clone(), eye.clone(), eye];
        let plan = KernelPlan::degenerate(Stage::Differentiation, 1, Precision::F64);
        let src = generate_diff_kernel(&plan, &layout, &d, &[(0, 0)], 1, 1).unwrap();
        let backend = CpuBackend::new().unwrap();
        let queue = Queue::new();
        let kernel = backend.compile(&src.text).unwrap();
        let mut u = vec![0.0; fw];
        for k in 0..num_k {
            for i in 0..np {
                u[layout.dof_index(k, i)] = tv((k * np + i) as u64);
            }
        }
        // Coefficients pick out the first axis with weight one.
        let mut geo = vec![0.0; num_k * 3];
        for k in 0..num_k {
            geo[k * 3] = 1.0;
        }
        let ub = queue.alloc(fw, Precision::F64);
        queue.write(&ub, &u).unwrap();
        let gb = queue.alloc(geo.len(), Precision::F64);
        queue.write(&gb, &geo).unwrap();
        let d_all: Vec<f64> = (0..3)
            .flat_map(|mu| (0..np).flat_map(move |i| (0..np).map(move |j| (mu, i, j))))
            .map(|(mu, i, j)| d[mu][(i, j)])
            .collect();
        let db = queue.alloc(d_all.len(), Precision::F64);
        queue.write(&db, &d_all).unwrap();
        let ob = queue.alloc(fw, Precision::F64);
        let groups = num_mb.div_ceil(src.units_per_workgroup);
        queue
            .launch(
                &kernel,
                groups,
                &[
                    LaunchArg::Buf(&ub),
                    LaunchArg::Buf(&gb),
                    LaunchArg::Buf(&db),
                    LaunchArg::Buf(&ob),
                    LaunchArg::Int(num_mb as i64),
                    LaunchArg::Int(num_k as i64),
                ],
            )
            .unwrap();
        queue.synchronize().unwrap();
        let got = queue.read_back(&ob).unwrap();
        for k in 0..num_k {
            for i in 0..np {
                let w = layout.dof_index(k, i);
                assert_eq!(got[w].to_bits(), u[w].to_bits(), "element {k} node {i}");
            }
        }
    }

    fn unit_test_limits(layout: &MicroblockLayout) -> PlanLimits {
        PlanLimits {
            onchip_bytes: 48 * 1024,
            max_lanes: 2 * layout.k_m * layout.np,
            max_work_product: 4,
            faces_per_block: vec![1, 32],
        }
    }

    #[test]
    fn every_diff_plan_matches_the_canonical_result_bitwise() {
        let fx = diff_fixture(10, 19);
        let expect = host_diff(&fx);
        let backend = CpuBackend::new().unwrap();
        let queue = Queue::new();
        let limits = unit_test_limits(&fx.layout);
        let plans = enumerate_plans(
            Stage::Differentiation,
            2,
            Precision::F64,
            &fx.layout,
            6,
            &limits,
        );
        assert!(plans.len() > 10, "want real plan variety, got {}", plans.len());
        assert!(plans.iter().any(|p| p.unroll));
        for st in [
            StorageStrategy::MatrixInShared,
            StorageStrategy::FieldsInShared,
            StorageStrategy::RowPartitionInShared,
            StorageStrategy::StreamAll,
        ] {
            assert!(plans.iter().any(|p| p.storage == st), "missing {st}");
        }
        let fw = fx.num_mb * fx.layout.padded_size;
        for plan in &plans {
            let got = run_diff(&backend, &queue, &fx, plan);
            for f in 0..2 {
                for k in 0..fx.num_k {
                    for i in 0..fx.layout.np {
                        let w = f * fw + fx.layout.dof_index(k, i);
                        assert_eq!(
                            got[w].to_bits(),
                            expect[w].to_bits(),
                            "plan {plan} field {f} element {k} node {i}: {} vs {}",
                            got[w],
                            expect[w]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn diff_leaves_padding_and_tail_words_untouched() {
        let fx = diff_fixture(10, 19);
        let backend = CpuBackend::new().unwrap();
        let queue = Queue::new();
        // Exercise the strategy that stages fields through shared memory,
        // where tail words are read (but never consumed or written).
        let plan = KernelPlan {
            stage: Stage::Differentiation,
            decomp: WorkDecomposition { w_s: 1, w_i: 2, w_p: 2 },
            storage: StorageStrategy::FieldsInShared,
            faces_per_block: 1,
            unroll: false,
            precision: Precision::F64,
            order: 2,
        };
        let got = run_diff(&backend, &queue, &fx, &plan);
        let fw = fx.num_mb * fx.layout.padded_size;
        let mut real_words = vec![false; fw];
        for k in 0..fx.num_k {
            for i in 0..fx.layout.np {
                real_words[fx.layout.dof_index(k, i)] = true;
            }
        }
        for f in 0..2 {
            for w in 0..fw {
                if real_words[w] {
                    assert!(got[f * fw + w].is_finite(), "field {f} word {w} contaminated");
                } else {
                    // Output buffers start zeroed; non-element words must
                    // never be stored to.
                    assert_eq!(got[f * fw + w], 0.0, "field {f} word {w} written");
                }
            }
        }
    }

    #[test]
    fn unrolled_streaming_kernel_bakes_operators_and_has_no_loops() {
        let fx = diff_fixture(10, 19);
        let plan = KernelPlan {
            stage: Stage::Differentiation,
            decomp: WorkDecomposition::unit(),
            storage: StorageStrategy::StreamAll,
            faces_per_block: 1,
            unroll: true,
            precision: Precision::F64,
            order: 2,
        };
        let src = generate_diff_kernel(&plan, &fx.layout, &fx.d, &fx.structure, 2, 2).unwrap();
        assert!(!src.text.contains("for "), "unrolled kernel has a loop:\n{}", src.text);
        assert!(!src.text.contains("d_all"), "baked kernel still takes the operator");
        assert!(src.text.contains("static real ds0[]"));
        assert!(src.text.contains("static real ds2[]"));
        let again = generate_diff_kernel(&plan, &fx.layout, &fx.d, &fx.structure, 2, 2).unwrap();
        assert_eq!(src.text, again.text, "generation must be deterministic");
    }

    struct LiftFixture {
        layout: MicroblockLayout,
        lift: DMatrix<f64>,
        nfp4: usize,
        num_k: usize,
        num_mb: usize,
        facial: Vec<f64>,
        invjac: Vec<f64>,
        out0: Vec<f64>,
    }

    fn lift_fixture(np: usize, nfp: usize, num_k: usize) -> LiftFixture {
        let layout = MicroblockLayout::choose(np, 16, 8);
        let num_mb = num_k.div_ceil(layout.k_m);
        let nfp4 = 4 * nfp;
        let fw = num_mb * layout.padded_size;
        let flw = num_mb * layout.k_m * nfp4;
        let lift = DMatrix::from_fn(np, nfp4, |i, m| tv((i * nfp4 + m) as u64 + 77));
        let mut facial = vec![0.0; 2 * flw];
        for f in 0..2 {
            for k in 0..num_k {
                for m in 0..nfp4 {
                    facial[f * flw + k * nfp4 + m] = tv((f * flw + k * nfp4 + m) as u64 + 404);
                }
            }
        }
        let invjac: Vec<f64> = (0..num_k).map(|k| 1.0 + tv(k as u64 + 11)).collect();
        let mut out0 = vec![0.0; 2 * fw];
        for f in 0..2 {
            for k in 0..num_k {
                for i in 0..np {
                    out0[f * fw + layout.dof_index(k, i)] = tv((f * fw + k * np + i) as u64 + 8);
                }
            }
        }
        LiftFixture {
            layout,
            lift,
            nfp4,
            num_k,
            num_mb,
            facial,
            invjac,
            out0,
        }
    }

    fn host_lift(fx: &LiftFixture) -> Vec<f64> {
        let np = fx.layout.np;
        let fw = fx.num_mb * fx.layout.padded_size;
        let flw = fx.num_mb * fx.layout.k_m * fx.nfp4;
        let mut out = fx.out0.clone();
        for f in 0..2 {
            for k in 0..fx.num_k {
                for i in 0..np {
                    let mut ac = 0.0f64;
                    for m in 0..fx.nfp4 {
                        ac += fx.lift[(i, m)] * fx.facial[f * flw + k * fx.nfp4 + m];
                    }
                    let w = f * fw + fx.layout.dof_index(k, i);
                    out[w] += fx.invjac[k] * ac;
                }
            }
        }
        out
    }

    fn run_lift(backend: &CpuBackend, queue: &Queue, fx: &LiftFixture, plan: &KernelPlan) -> Vec<f64> {
        let src = generate_lift_kernel(plan, &fx.layout, &fx.lift, 2).unwrap();
        let kernel = backend.compile(&src.text).unwrap();
        let fb = queue.alloc(fx.facial.len(), plan.precision);
        queue.write(&fb, &fx.facial).unwrap();
        let jb = queue.alloc(fx.invjac.len(), plan.precision);
        queue.write(&jb, &fx.invjac).unwrap();
        let ob = queue.alloc(fx.out0.len(), plan.precision);
        queue.write(&ob, &fx.out0).unwrap();
        let np = fx.layout.np;
        let l_all: Vec<f64> = (0..np)
            .flat_map(|i| (0..fx.nfp4).map(move |m| (i, m)))
            .map(|(i, m)| fx.lift[(i, m)])
            .collect();
        let lb = queue.alloc(l_all.len(), plan.precision);
        queue.write(&lb, &l_all).unwrap();
        let groups = fx.num_mb.div_ceil(src.units_per_workgroup);
        let mut args: Vec<LaunchArg> = vec![LaunchArg::Buf(&fb), LaunchArg::Buf(&jb)];
        if !plan.unroll {
            args.push(LaunchArg::Buf(&lb));
        }
        args.push(LaunchArg::Buf(&ob));
        args.push(LaunchArg::Int(fx.num_mb as i64));
        args.push(LaunchArg::Int(fx.num_k as i64));
        queue.launch(&kernel, groups, &args).unwrap();
        queue.synchronize().unwrap();
        queue.read_back(&ob).unwrap()
    }

    #[test]
    fn every_lift_plan_matches_the_canonical_result_bitwise() {
        let fx = lift_fixture(10, 6, 19);
        let expect = host_lift(&fx);
        let backend = CpuBackend::new().unwrap();
        let queue = Queue::new();
        let limits = unit_test_limits(&fx.layout);
        let plans = enumerate_plans(Stage::Lift, 2, Precision::F64, &fx.layout, 6, &limits);
        assert!(plans.iter().any(|p| p.unroll));
        for st in [
            StorageStrategy::MatrixInShared,
            StorageStrategy::FieldsInShared,
            StorageStrategy::RowPartitionInShared,
            StorageStrategy::StreamAll,
        ] {
            assert!(plans.iter().any(|p| p.storage == st), "missing {st}");
        }
        let fw = fx.num_mb * fx.layout.padded_size;
        for plan in &plans {
            let got = run_lift(&backend, &queue, &fx, plan);
            for f in 0..2 {
                for k in 0..fx.num_k {
                    for i in 0..fx.layout.np {
                        let w = f * fw + fx.layout.dof_index(k, i);
                        assert_eq!(
                            got[w].to_bits(),
                            expect[w].to_bits(),
                            "plan {plan} field {f} element {k} node {i}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_precision_plans_agree_with_each_other() {
        // The f32 interpreter is the semantic reference for native f32; here
        // we check that storage strategies cannot change f32 results either.
        let fx = diff_fixture(10, 9);
        let backend = CpuBackend::new().unwrap();
        let queue = Queue::new();
        let base = KernelPlan::degenerate(Stage::Differentiation, 2, Precision::F32);
        let expect = run_diff(&backend, &queue, &fx, &base);
        for storage in [
            StorageStrategy::MatrixInShared,
            StorageStrategy::FieldsInShared,
            StorageStrategy::RowPartitionInShared,
        ] {
            let plan = KernelPlan {
                storage,
                decomp: WorkDecomposition { w_s: 2, w_i: 1, w_p: 1 },
                ..base.clone()
            };
            let got = run_diff(&backend, &queue, &fx, &plan);
            for (w, (a, b)) in got.iter().zip(expect.iter()).enumerate() {
                assert_eq!(a.to_bits(), b.to_bits(), "{storage} word {w}");
            }
        }
        let unrolled = KernelPlan {
            unroll: true,
            ..base.clone()
        };
        let got = run_diff(&backend, &queue, &fx, &unrolled);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
