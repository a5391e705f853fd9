//! Vector-assembly kernel generator: the fused `out = a*x + b*y` update
//! over padded multi-field storage. One workgroup covers one (field,
//! microblock) pair; lanes map to the element slots of the microblock, so
//! padding words and tail slots are never read or written. The scalar
//! weights are runtime arguments, letting a single compiled kernel serve
//! every update in a time-step scheme.

use super::{KernelPlan, KernelSource, Src, Stage};
use crate::error::{Error, Result};
use crate::layout::MicroblockLayout;

/// Generate the assembly kernel.
///
/// Launch with `num_fields * num_mb` workgroups and arguments `x`, `y`,
/// `out`, `num_mb`, `num_k`, `a`, `b`. `out` may alias `x` or `y`: the
/// update is elementwise. Operation count: 3 per stored word.
pub fn generate_assembly_kernel(
    plan: &KernelPlan,
    layout: &MicroblockLayout,
) -> Result<KernelSource> {
    if plan.stage != Stage::Assembly {
        return Err(Error::Codegen(format!(
            "assembly generator got a {} plan",
            plan.stage
        )));
    }
    let np = layout.np;
    let km = layout.k_m;
    let pad = layout.padded_size;
    let lanes = km * np;
    let name = plan.descriptor();
    let mut s = Src::new();
    s.open(format!(
        "kernel {name}(global const real* x, global const real* y, global real* out, \
         int num_mb, int num_k, real a, real b) lanes {lanes} {} {{",
        plan.precision
    ));
    s.decl(format!("int fw = num_mb * {pad};"));
    s.decl("int mb = GID % num_mb;");
    s.decl("int f = GID / num_mb;");
    s.decl(format!("int e = LID / {np};"));
    s.decl(format!("int i = LID % {np};"));
    s.decl(format!("int k = mb * {km} + e;"));
    s.open("if (k < num_k) {");
    s.decl(format!("int w = f * fw + mb * {pad} + e * {np} + i;"));
    s.line("out[w] = a * x[w] + b * y[w];");
    s.close();
    s.close();
    let registers_estimate = s.locals;
    Ok(KernelSource {
        name,
        text: s.finish(),
        lanes,
        units_per_workgroup: 1,
        shared_words: 0,
        registers_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegen::assembly_flops_per_word;
    use crate::executor::{CpuBackend, CompiledKernel, LaunchArg, Precision, Queue};

    fn tv(n: u64) -> f64 {
        let x = n
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let x = (x ^ (x >> 31)).wrapping_mul(0x9e3779b97f4a7c15);
        ((x >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    struct Fixture {
        layout: MicroblockLayout,
        num_k: usize,
        num_mb: usize,
        nf: usize,
        x: Vec<f64>,
        y: Vec<f64>,
    }

    fn fixture() -> Fixture {
        let layout = MicroblockLayout::choose(10, 16, 8);
        let num_k: usize = 19;
        let num_mb = num_k.div_ceil(layout.k_m);
        let nf = 3;
        let fw = num_mb * layout.padded_size;
        // Poison everything, then write real values only at element words:
        // the kernel must neither read nor write any other word.
        let mut x = vec![f64::NAN; nf * fw];
        let mut y = vec![f64::NAN; nf * fw];
        for f in 0..nf {
            for k in 0..num_k {
                for i in 0..layout.np {
                    let w = f * fw + layout.dof_index(k, i);
                    x[w] = tv(w as u64);
                    y[w] = tv(w as u64 + 100_000);
                }
            }
        }
        Fixture { layout, num_k, num_mb, nf, x, y }
    }

    fn compile(backend: &CpuBackend, layout: &MicroblockLayout) -> (CompiledKernel, usize) {
        let plan = KernelPlan::degenerate(Stage::Assembly, 2, Precision::F64);
        let src = generate_assembly_kernel(&plan, layout).unwrap();
        (backend.compile(&src.text).unwrap(), src.units_per_workgroup)
    }

    #[test]
    fn axpby_matches_a_scalar_loop_and_skips_padding() {
        let fx = fixture();
        let backend = CpuBackend::new().unwrap();
        let queue = Queue::new();
        let (kernel, upw) = compile(&backend, &fx.layout);
        let fw = fx.num_mb * fx.layout.padded_size;
        let (a, b) = (1.31, -0.72);
        let xb = queue.alloc(fx.x.len(), Precision::F64);
        queue.write(&xb, &fx.x).unwrap();
        let yb = queue.alloc(fx.y.len(), Precision::F64);
        queue.write(&yb, &fx.y).unwrap();
        let ob = queue.alloc(fx.x.len(), Precision::F64);
        let groups = fx.nf * fx.num_mb / upw;
        queue
            .launch(
                &kernel,
                groups,
                &[
                    LaunchArg::Buf(&xb),
                    LaunchArg::Buf(&yb),
                    LaunchArg::Buf(&ob),
                    LaunchArg::Int(fx.num_mb as i64),
                    LaunchArg::Int(fx.num_k as i64),
                    LaunchArg::Real(a),
                    LaunchArg::Real(b),
                ],
            )
            .unwrap();
        queue.synchronize().unwrap();
        let got = queue.read_back(&ob).unwrap();
        let mut is_real = vec![false; fw];
        for k in 0..fx.num_k {
            for i in 0..fx.layout.np {
                is_real[fx.layout.dof_index(k, i)] = true;
            }
        }
        for f in 0..fx.nf {
            for w in 0..fw {
                let idx = f * fw + w;
                if is_real[w] {
                    let expect = a * fx.x[idx] + b * fx.y[idx];
                    assert_eq!(got[idx].to_bits(), expect.to_bits(), "field {f} word {w}");
                } else {
                    assert_eq!(got[idx], 0.0, "padding word {w} of field {f} was written");
                }
            }
        }
    }

    #[test]
    fn update_can_run_in_place() {
        let fx = fixture();
        let backend = CpuBackend::new().unwrap();
        let queue = Queue::new();
        let (kernel, _) = compile(&backend, &fx.layout);
        let fw = fx.num_mb * fx.layout.padded_size;
        let xb = queue.alloc(fx.x.len(), Precision::F64);
        queue.write(&xb, &fx.x).unwrap();
        let yb = queue.alloc(fx.y.len(), Precision::F64);
        queue.write(&yb, &fx.y).unwrap();
        // out aliases y: the accumulate-into form.
        let groups = fx.nf * fx.num_mb;
        queue
            .launch(
                &kernel,
                groups,
                &[
                    LaunchArg::Buf(&xb),
                    LaunchArg::Buf(&yb),
                    LaunchArg::Buf(&yb),
                    LaunchArg::Int(fx.num_mb as i64),
                    LaunchArg::Int(fx.num_k as i64),
                    LaunchArg::Real(0.5),
                    LaunchArg::Real(1.0),
                ],
            )
            .unwrap();
        queue.synchronize().unwrap();
        let got = queue.read_back(&yb).unwrap();
        for f in 0..fx.nf {
            for k in 0..fx.num_k {
                for i in 0..fx.layout.np {
                    let idx = f * fw + fx.layout.dof_index(k, i);
                    let expect = 0.5 * fx.x[idx] + 1.0 * fx.y[idx];
                    assert_eq!(got[idx].to_bits(), expect.to_bits());
                }
            }
        }
    }

    #[test]
    fn weight_zero_pairs_give_copies_and_zeros() {
        let fx = fixture();
        let backend = CpuBackend::new().unwrap();
        let queue = Queue::new();
        let (kernel, _) = compile(&backend, &fx.layout);
        let fw = fx.num_mb * fx.layout.padded_size;
        let xb = queue.alloc(fx.x.len(), Precision::F64);
        queue.write(&xb, &fx.x).unwrap();
        let yb = queue.alloc(fx.y.len(), Precision::F64);
        queue.write(&yb, &fx.y).unwrap();
        let ob = queue.alloc(fx.x.len(), Precision::F64);
        let groups = fx.nf * fx.num_mb;
        let run = |a: f64, b: f64| {
            queue
                .launch(
                    &kernel,
                    groups,
                    &[
                        LaunchArg::Buf(&xb),
                        LaunchArg::Buf(&yb),
                        LaunchArg::Buf(&ob),
                        LaunchArg::Int(fx.num_mb as i64),
                        LaunchArg::Int(fx.num_k as i64),
                        LaunchArg::Real(a),
                        LaunchArg::Real(b),
                    ],
                )
                .unwrap();
            queue.synchronize().unwrap();
            queue.read_back(&ob).unwrap()
        };
        let copies = run(1.0, 0.0);
        for f in 0..fx.nf {
            for k in 0..fx.num_k {
                for i in 0..fx.layout.np {
                    let idx = f * fw + fx.layout.dof_index(k, i);
                    // 1*x + 0*y == x exactly (y is finite at element words).
                    assert_eq!(copies[idx].to_bits(), fx.x[idx].to_bits());
                }
            }
        }
        let zeros = run(0.0, 0.0);
        for f in 0..fx.nf {
            for k in 0..fx.num_k {
                for i in 0..fx.layout.np {
                    let idx = f * fw + fx.layout.dof_index(k, i);
                    assert_eq!(zeros[idx], 0.0);
                }
            }
        }
    }

    #[test]
    fn counts_three_operations_per_stored_word() {
        let fx = fixture();
        let backend = CpuBackend::new().unwrap();
        let queue = Queue::instrumented();
        let (kernel, _) = compile(&backend, &fx.layout);
        let xb = queue.alloc(fx.x.len(), Precision::F64);
        queue.write(&xb, &fx.x).unwrap();
        let yb = queue.alloc(fx.y.len(), Precision::F64);
        queue.write(&yb, &fx.y).unwrap();
        let ob = queue.alloc(fx.x.len(), Precision::F64);
        queue
            .launch(
                &kernel,
                fx.nf * fx.num_mb,
                &[
                    LaunchArg::Buf(&xb),
                    LaunchArg::Buf(&yb),
                    LaunchArg::Buf(&ob),
                    LaunchArg::Int(fx.num_mb as i64),
                    LaunchArg::Int(fx.num_k as i64),
                    LaunchArg::Real(2.0),
                    LaunchArg::Real(3.0),
                ],
            )
            .unwrap();
        queue.synchronize().unwrap();
        let words = (fx.nf * fx.num_k * fx.layout.np) as u64;
        assert_eq!(queue.flops(), words * assembly_flops_per_word());
    }
}
