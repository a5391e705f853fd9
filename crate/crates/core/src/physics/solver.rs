//! The time-stepping solver: owns the device state, the generated kernels
//! for all four pipeline stages, and the classical four-stage Runge-Kutta
//! loop built from them.

use super::cases::Case;
use crate::codegen::{
    assembly_flops_per_word, diff_flops_per_element, gather_flops_per_facenode,
    generate_assembly_kernel, generate_diff_kernel, generate_gather_kernel, generate_lift_kernel,
    lift_flops_per_element, GhostRule, KernelPlan, KernelSource, Stage,
};
use crate::error::{Error, Result};
use crate::executor::{CompiledKernel, CpuBackend, DeviceBuffer, LaunchArg, Precision, Queue};
use crate::layout::{
    face_dof_gather_indices, MicroblockLayout, DEFAULT_GRANULE, DEFAULT_K_M_MAX,
};
use crate::mesh::{build_connectivity, compute_geometric_factors, GeometricFactors, Mesh};
use crate::refelem::ReferenceElement;

/// One kernel plan per pipeline stage.
#[derive(Debug, Clone)]
pub struct PlanSet {
    pub diff: KernelPlan,
    pub gather: KernelPlan,
    pub lift: KernelPlan,
    pub assembly: KernelPlan,
}

impl PlanSet {
    /// The reference plans: no work aggregation, everything streamed.
    pub fn degenerate(order: usize, precision: Precision) -> Self {
        PlanSet {
            diff: KernelPlan::degenerate(Stage::Differentiation, order, precision),
            gather: KernelPlan::degenerate(Stage::Gather, order, precision),
            lift: KernelPlan::degenerate(Stage::Lift, order, precision),
            assembly: KernelPlan::degenerate(Stage::Assembly, order, precision),
        }
    }

    fn validate(&self, order: usize, precision: Precision) -> Result<()> {
        let slots = [
            (&self.diff, Stage::Differentiation),
            (&self.gather, Stage::Gather),
            (&self.lift, Stage::Lift),
            (&self.assembly, Stage::Assembly),
        ];
        for (plan, stage) in slots {
            if plan.stage != stage {
                return Err(Error::Config(format!(
                    "plan set holds a {} plan in the {stage} slot",
                    plan.stage
                )));
            }
            if plan.order != order || plan.precision != precision {
                return Err(Error::Config(format!(
                    "{} plan is specialized for order {} in {}, solver wants order {order} in {precision}",
                    stage, plan.order, plan.precision
                )));
            }
        }
        Ok(())
    }
}

/// Discretisation parameters independent of the benchmark case.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Polynomial order of the element basis.
    pub order: usize,
    pub precision: Precision,
    /// Time-step safety factor.
    pub cfl: f64,
    /// Lane-alignment granule for the storage layout.
    pub granule: usize,
    /// Cap on elements per microblock.
    pub k_m_max: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            order: 3,
            precision: Precision::F64,
            cfl: 0.25,
            granule: DEFAULT_GRANULE,
            k_m_max: DEFAULT_K_M_MAX,
        }
    }
}

/// A fully assembled solver instance for one case on one mesh.
pub struct Solver {
    case: Case,
    mesh: Mesh,
    refel: ReferenceElement,
    geo: GeometricFactors,
    layout: MicroblockLayout,
    queue: Queue,

    num_k: usize,
    num_mb: usize,
    nf: usize,
    np: usize,
    nfp: usize,
    num_tasks: usize,
    gbw: usize,
    /// Words per field in the volume layout.
    fw: usize,

    sources: Vec<KernelSource>,
    k_diff: CompiledKernel,
    k_gather: CompiledKernel,
    k_lift: CompiledKernel,
    k_axpby: CompiledKernel,
    compile_seconds: f64,

    b_u: DeviceBuffer,
    b_stage: DeviceBuffer,
    b_k1: DeviceBuffer,
    b_k2: DeviceBuffer,
    b_k3: DeviceBuffer,
    b_k4: DeviceBuffer,
    b_acc: DeviceBuffer,
    b_flux: DeviceBuffer,
    b_geo: DeviceBuffer,
    b_dall: Option<DeviceBuffer>,
    b_lall: Option<DeviceBuffer>,
    b_invjac: DeviceBuffer,
    b_normals: DeviceBuffer,
    b_scale: DeviceBuffer,
    b_gdata: DeviceBuffer,
    b_minus: DeviceBuffer,
    b_plus: DeviceBuffer,
    b_btype: DeviceBuffer,
    b_outbase: DeviceBuffer,

    /// (data slot, node position) per prescribed-exterior boundary node.
    prescribed: Vec<(usize, [f64; 3])>,
    /// Task type codes, kept for the operation-count model.
    btype_host: Vec<i64>,

    time: f64,
    dt: f64,
}

impl Solver {
    pub fn new(
        case: Case,
        mesh: Mesh,
        config: &SolverConfig,
        plans: &PlanSet,
        backend: &CpuBackend,
        queue: Queue,
    ) -> Result<Solver> {
        let num_k = mesh.num_elements();
        if num_k == 0 {
            return Err(Error::Config("mesh has no elements".into()));
        }
        plans.validate(config.order, config.precision)?;
        let sys = &case.system;
        let nf = sys.num_fields;
        if sys.flux.num_components() != nf {
            return Err(Error::Config(format!(
                "flux has {} components for {} fields",
                sys.flux.num_components(),
                nf
            )));
        }

        let refel = ReferenceElement::new(config.order)?;
        let conn = build_connectivity(&mesh, &refel)?;
        let geo = compute_geometric_factors(&mesh)?;
        let layout = MicroblockLayout::choose(refel.np, config.granule, config.k_m_max);
        let (np, nfp) = (refel.np, refel.nfp);
        let num_mb = layout.num_microblocks(num_k);
        let fw = num_mb * layout.padded_size;
        let flw = num_mb * layout.k_m * 4 * nfp;

        let sources = vec![
            generate_diff_kernel(&plans.diff, &layout, &refel.diff, &sys.structure, nf, nf)?,
            generate_gather_kernel(&plans.gather, &layout, nfp, &sys.flux, &sys.ghost_rules)?,
            generate_lift_kernel(&plans.lift, &layout, &refel.lift, nf)?,
            generate_assembly_kernel(&plans.assembly, &layout)?,
        ];
        let k_diff = backend.compile(&sources[0].text)?;
        let k_gather = backend.compile(&sources[1].text)?;
        let k_lift = backend.compile(&sources[2].text)?;
        let k_axpby = backend.compile(&sources[3].text)?;
        let compile_seconds = k_diff.compile_seconds
            + k_gather.compile_seconds
            + k_lift.compile_seconds
            + k_axpby.compile_seconds;

        // Static operand buffers.
        let precision = config.precision;
        let geo_host = sys.geo_coefficients(&geo);
        let b_geo = queue.alloc(geo_host.len(), precision);
        queue.write(&b_geo, &geo_host)?;

        let b_dall = if plans.diff.unroll {
            None
        } else {
            let mut d = vec![0.0; 3 * np * np];
            for (mu, mat) in refel.diff.iter().enumerate() {
                for i in 0..np {
                    for j in 0..np {
                        d[mu * np * np + i * np + j] = mat[(i, j)];
                    }
                }
            }
            let b = queue.alloc(d.len(), precision);
            queue.write(&b, &d)?;
            Some(b)
        };
        let b_lall = if plans.lift.unroll {
            None
        } else {
            let mut l = vec![0.0; np * 4 * nfp];
            for i in 0..np {
                for m in 0..4 * nfp {
                    l[i * 4 * nfp + m] = refel.lift[(i, m)];
                }
            }
            let b = queue.alloc(l.len(), precision);
            queue.write(&b, &l)?;
            Some(b)
        };
        let inv_j: Vec<f64> = geo.jacobian.iter().map(|j| 1.0 / j).collect();
        let b_invjac = queue.alloc(num_k, precision);
        queue.write(&b_invjac, &inv_j)?;

        // Face-side task tables: one task per directed face side, minus
        // sides in canonical trace order; the exterior indices of a plus
        // side go through the inverse node matching.
        let tables = face_dof_gather_indices(&layout, &refel, &conn);
        let mut t_minus: Vec<i64> = Vec::new();
        let mut t_plus: Vec<i64> = Vec::new();
        let mut t_btype: Vec<i64> = Vec::new();
        let mut t_outbase: Vec<i64> = Vec::new();
        let mut t_normals: Vec<f64> = Vec::new();
        let mut t_scale: Vec<f64> = Vec::new();
        let mut prescribed: Vec<(usize, [f64; 3])> = Vec::new();
        let mut pslots = 0usize;

        for (p, pair) in conn.interior_pairs.iter().enumerate() {
            let (km, fm) = pair.minus;
            let (kp, fp) = pair.plus;
            t_minus.extend(tables.interior[p].0.iter().map(|&w| w as i64));
            t_plus.extend(tables.interior[p].1.iter().map(|&w| w as i64));
            t_btype.push(0);
            t_outbase.push((km * 4 * nfp + fm * nfp) as i64);
            t_normals.extend(geo.normal[km][fm]);
            t_scale.push(geo.surface_jacobian[km][fm]);

            let mut inv = vec![0usize; nfp];
            for (m, &mp) in pair.node_permutation.iter().enumerate() {
                inv[mp] = m;
            }
            for (mp, &m) in inv.iter().enumerate() {
                t_minus.push(layout.dof_index(kp, refel.face_node_index[fp][mp]) as i64);
                t_plus.push(tables.interior[p].0[m] as i64);
            }
            t_btype.push(0);
            t_outbase.push((kp * 4 * nfp + fp * nfp) as i64);
            t_normals.extend(geo.normal[kp][fp]);
            t_scale.push(geo.surface_jacobian[kp][fp]);
        }
        for (b, bf) in conn.boundary_faces.iter().enumerate() {
            let (k, face) = (bf.element, bf.face);
            let n = geo.normal[k][face];
            let rule_idx = case.boundary_rule(n);
            let rule = sys.ghost_rules.get(rule_idx).ok_or_else(|| {
                Error::Config(format!(
                    "case selected boundary rule {rule_idx}, system has {}",
                    sys.ghost_rules.len()
                ))
            })?;
            t_minus.extend(tables.boundary[b].iter().map(|&w| w as i64));
            if *rule == GhostRule::Prescribed {
                for m in 0..nfp {
                    let node = refel.face_node_index[face][m];
                    let x = mesh.map_reference_point(k, refel.nodes[node]);
                    prescribed.push((pslots + m, x));
                    t_plus.push((pslots + m) as i64);
                }
                pslots += nfp;
            } else {
                t_plus.extend(std::iter::repeat_n(0i64, nfp));
            }
            t_btype.push(rule_idx as i64 + 1);
            t_outbase.push((k * 4 * nfp + face * nfp) as i64);
            t_normals.extend(n);
            t_scale.push(geo.surface_jacobian[k][face]);
        }
        let num_tasks = t_btype.len();
        debug_assert_eq!(num_tasks, 4 * num_k);
        let gbw = pslots.max(1);

        let b_minus = queue.alloc_index(t_minus.len());
        queue.write_index(&b_minus, &t_minus)?;
        let b_plus = queue.alloc_index(t_plus.len());
        queue.write_index(&b_plus, &t_plus)?;
        let b_btype = queue.alloc_index(t_btype.len());
        queue.write_index(&b_btype, &t_btype)?;
        let b_outbase = queue.alloc_index(t_outbase.len());
        queue.write_index(&b_outbase, &t_outbase)?;
        let b_normals = queue.alloc(t_normals.len(), precision);
        queue.write(&b_normals, &t_normals)?;
        let b_scale = queue.alloc(t_scale.len(), precision);
        queue.write(&b_scale, &t_scale)?;
        let b_gdata = queue.alloc(gbw * nf, precision);

        let field_words = nf * fw;
        let b_u = queue.alloc(field_words, precision);
        let b_stage = queue.alloc(field_words, precision);
        let b_k1 = queue.alloc(field_words, precision);
        let b_k2 = queue.alloc(field_words, precision);
        let b_k3 = queue.alloc(field_words, precision);
        let b_k4 = queue.alloc(field_words, precision);
        let b_acc = queue.alloc(field_words, precision);
        let b_flux = queue.alloc(nf * flw, precision);

        let order2 = (config.order * config.order).max(1) as f64;
        let dt = config.cfl * geo.global_h_min() / (order2 * sys.max_speed);

        Ok(Solver {
            case,
            mesh,
            refel,
            geo,
            layout,
            queue,
            num_k,
            num_mb,
            nf,
            np,
            nfp,
            num_tasks,
            gbw,
            fw,
            sources,
            k_diff,
            k_gather,
            k_lift,
            k_axpby,
            compile_seconds,
            b_u,
            b_stage,
            b_k1,
            b_k2,
            b_k3,
            b_k4,
            b_acc,
            b_flux,
            b_geo,
            b_dall,
            b_lall,
            b_invjac,
            b_normals,
            b_scale,
            b_gdata,
            b_minus,
            b_plus,
            b_btype,
            b_outbase,
            prescribed,
            btype_host: t_btype,
            time: 0.0,
            dt,
        })
    }

    /// Evaluate the semi-discrete right-hand side of `u` into `out` at
    /// stage time `t`: volume differentiation overwrites `out`, the face
    /// pipeline (gather then lift) accumulates into it.
    fn rhs(&self, t: f64, u: &DeviceBuffer, out: &DeviceBuffer) -> Result<()> {
        if !self.prescribed.is_empty() {
            let mut g = vec![0.0; self.gbw * self.nf];
            for &(slot, x) in &self.prescribed {
                let vals = self.case.exact(x, t);
                for (c, v) in vals.iter().enumerate() {
                    g[slot + self.gbw * c] = *v;
                }
            }
            self.queue.write(&self.b_gdata, &g)?;
        }

        let mut args: Vec<LaunchArg> = vec![LaunchArg::Buf(u), LaunchArg::Buf(&self.b_geo)];
        if let Some(d) = &self.b_dall {
            args.push(LaunchArg::Buf(d));
        }
        args.push(LaunchArg::Buf(out));
        args.push(LaunchArg::Int(self.num_mb as i64));
        args.push(LaunchArg::Int(self.num_k as i64));
        let groups = self.num_mb.div_ceil(self.sources[0].units_per_workgroup);
        self.queue.launch(&self.k_diff, groups, &args)?;

        let args = [
            LaunchArg::Buf(u),
            LaunchArg::Buf(&self.b_gdata),
            LaunchArg::Buf(&self.b_normals),
            LaunchArg::Buf(&self.b_scale),
            LaunchArg::Buf(&self.b_minus),
            LaunchArg::Buf(&self.b_plus),
            LaunchArg::Buf(&self.b_btype),
            LaunchArg::Buf(&self.b_outbase),
            LaunchArg::Buf(&self.b_flux),
            LaunchArg::Int(self.num_mb as i64),
            LaunchArg::Int(self.num_tasks as i64),
            LaunchArg::Int(self.gbw as i64),
        ];
        let groups = self.num_tasks.div_ceil(self.sources[1].units_per_workgroup);
        self.queue.launch(&self.k_gather, groups, &args)?;

        let mut args: Vec<LaunchArg> = vec![
            LaunchArg::Buf(&self.b_flux),
            LaunchArg::Buf(&self.b_invjac),
        ];
        if let Some(l) = &self.b_lall {
            args.push(LaunchArg::Buf(l));
        }
        args.push(LaunchArg::Buf(out));
        args.push(LaunchArg::Int(self.num_mb as i64));
        args.push(LaunchArg::Int(self.num_k as i64));
        let groups = self.num_mb.div_ceil(self.sources[2].units_per_workgroup);
        self.queue.launch(&self.k_lift, groups, &args)
    }

    /// `out = a*x + b*y` on every stored field word.
    fn axpby(
        &self,
        a: f64,
        x: &DeviceBuffer,
        b: f64,
        y: &DeviceBuffer,
        out: &DeviceBuffer,
    ) -> Result<()> {
        self.queue.launch(
            &self.k_axpby,
            self.nf * self.num_mb,
            &[
                LaunchArg::Buf(x),
                LaunchArg::Buf(y),
                LaunchArg::Buf(out),
                LaunchArg::Int(self.num_mb as i64),
                LaunchArg::Int(self.num_k as i64),
                LaunchArg::Real(a),
                LaunchArg::Real(b),
            ],
        )
    }

    /// Advance one classical four-stage Runge-Kutta step.
    pub fn step(&mut self) -> Result<()> {
        let (t, dt) = (self.time, self.dt);
        self.rhs(t, &self.b_u, &self.b_k1)?;
        self.axpby(1.0, &self.b_u, 0.5 * dt, &self.b_k1, &self.b_stage)?;
        self.rhs(t + 0.5 * dt, &self.b_stage, &self.b_k2)?;
        self.axpby(1.0, &self.b_u, 0.5 * dt, &self.b_k2, &self.b_stage)?;
        self.rhs(t + 0.5 * dt, &self.b_stage, &self.b_k3)?;
        self.axpby(1.0, &self.b_u, dt, &self.b_k3, &self.b_stage)?;
        self.rhs(t + dt, &self.b_stage, &self.b_k4)?;
        self.axpby(1.0, &self.b_k1, 2.0, &self.b_k2, &self.b_acc)?;
        self.axpby(1.0, &self.b_acc, 2.0, &self.b_k3, &self.b_acc)?;
        self.axpby(1.0, &self.b_acc, 1.0, &self.b_k4, &self.b_acc)?;
        self.axpby(1.0, &self.b_u, dt / 6.0, &self.b_acc, &self.b_u)?;
        self.time += dt;
        Ok(())
    }

    /// Interpolate the case's initial data onto the nodes and reset time.
    pub fn apply_initial_condition(&mut self) -> Result<()> {
        let mut u = vec![0.0; self.nf * self.fw];
        for k in 0..self.num_k {
            for (i, node) in self.refel.nodes.iter().enumerate() {
                let x = self.mesh.map_reference_point(k, *node);
                let vals = self.case.initial(x);
                let w = self.layout.dof_index(k, i);
                for (f, v) in vals.iter().enumerate() {
                    u[f * self.fw + w] = *v;
                }
            }
        }
        self.queue.write(&self.b_u, &u)?;
        self.time = 0.0;
        Ok(())
    }

    /// Overwrite every padding word of the state buffer with NaN. Results
    /// must not change: no kernel may read padding into arithmetic.
    pub fn poison_padding(&self) -> Result<()> {
        let mut w = self.queue.read_back(&self.b_u)?;
        for (idx, v) in w.iter_mut().enumerate() {
            if self.layout.is_padding(idx % self.fw, self.num_k) {
                *v = f64::NAN;
            }
        }
        self.queue.write(&self.b_u, &w)
    }

    /// Raw device image of the state, padding included.
    pub fn state_words(&self) -> Result<Vec<f64>> {
        self.queue.synchronize()?;
        self.queue.read_back(&self.b_u)
    }

    fn device_to_flat(&self, words: &[f64]) -> Vec<f64> {
        let mut flat = vec![0.0; self.nf * self.num_k * self.np];
        for f in 0..self.nf {
            for k in 0..self.num_k {
                for i in 0..self.np {
                    flat[(f * self.num_k + k) * self.np + i] =
                        words[f * self.fw + self.layout.dof_index(k, i)];
                }
            }
        }
        flat
    }

    /// State in dense order `(field*K + element)*Np + node`.
    pub fn state_flat(&self) -> Result<Vec<f64>> {
        Ok(self.device_to_flat(&self.state_words()?))
    }

    pub fn set_state_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.nf * self.num_k * self.np {
            return Err(Error::Config(format!(
                "state has {} entries, expected {}",
                flat.len(),
                self.nf * self.num_k * self.np
            )));
        }
        let mut words = vec![0.0; self.nf * self.fw];
        for f in 0..self.nf {
            for k in 0..self.num_k {
                for i in 0..self.np {
                    words[f * self.fw + self.layout.dof_index(k, i)] =
                        flat[(f * self.num_k + k) * self.np + i];
                }
            }
        }
        self.queue.write(&self.b_u, &words)
    }

    /// One right-hand-side evaluation of the current state at time `t`,
    /// returned in dense order. Clobbers the first stage buffer.
    pub fn eval_rhs_once(&self, t: f64) -> Result<Vec<f64>> {
        self.rhs(t, &self.b_u, &self.b_k1)?;
        self.queue.synchronize()?;
        Ok(self.device_to_flat(&self.queue.read_back(&self.b_k1)?))
    }

    fn mass_quadratic(&self, e: &[f64]) -> f64 {
        let np = self.np;
        let mut q = 0.0;
        for i in 0..np {
            for j in 0..np {
                q += e[i] * self.refel.mass[(i, j)] * e[j];
            }
        }
        q
    }

    /// Discrete energy `1/2 * sum_k J_k sum_f u^T M u`.
    pub fn energy(&self) -> Result<f64> {
        let flat = self.state_flat()?;
        let mut total = 0.0;
        for k in 0..self.num_k {
            for f in 0..self.nf {
                let base = (f * self.num_k + k) * self.np;
                total += self.geo.jacobian[k] * self.mass_quadratic(&flat[base..base + self.np]);
            }
        }
        Ok(0.5 * total)
    }

    /// Global L2 distance between the state and the case's exact solution
    /// at the current time, measured through the element mass matrix.
    pub fn l2_error(&self) -> Result<f64> {
        let flat = self.state_flat()?;
        let mut total = 0.0;
        let mut e = vec![0.0; self.np];
        for k in 0..self.num_k {
            let exact: Vec<Vec<f64>> = self
                .refel
                .nodes
                .iter()
                .map(|node| self.case.exact(self.mesh.map_reference_point(k, *node), self.time))
                .collect();
            for f in 0..self.nf {
                let base = (f * self.num_k + k) * self.np;
                for (i, ex) in exact.iter().enumerate() {
                    e[i] = flat[base + i] - ex[f];
                }
                total += self.geo.jacobian[k] * self.mass_quadratic(&e);
            }
        }
        Ok(total.sqrt())
    }

    /// Exact number of floating-point operations one time step performs,
    /// matching the instrumented backend's count.
    pub fn flops_per_step(&self) -> u64 {
        let sys = &self.case.system;
        let diff = self.num_k as u64
            * diff_flops_per_element(self.np, sys.num_inputs(), sys.structure.len());
        let lift = self.num_k as u64 * lift_flops_per_element(self.np, self.nfp, self.nf);
        let per_node = gather_flops_per_facenode(sys.flux.flop_count(), self.nf);
        let mut gather = 0u64;
        for &bt in &self.btype_host {
            let extra = if bt == 0 {
                0
            } else {
                sys.ghost_rules[(bt - 1) as usize].extra_flops()
            };
            gather += self.nfp as u64 * (per_node + extra);
        }
        let axpby = assembly_flops_per_word() * (self.nf * self.num_k * self.np) as u64;
        4 * (diff + gather + lift) + 7 * axpby
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn set_dt(&mut self, dt: f64) {
        self.dt = dt;
    }

    pub fn case(&self) -> &Case {
        &self.case
    }

    pub fn num_elements(&self) -> usize {
        self.num_k
    }

    pub fn num_fields(&self) -> usize {
        self.nf
    }

    pub fn points_per_element(&self) -> usize {
        self.np
    }

    pub fn layout(&self) -> &MicroblockLayout {
        &self.layout
    }

    pub fn reference_element(&self) -> &ReferenceElement {
        &self.refel
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn queue(&self) -> &Queue {
        &self.queue
    }

    /// Generated kernel sources, in pipeline order: differentiation,
    /// gather, lift, assembly.
    pub fn kernel_sources(&self) -> &[KernelSource] {
        &self.sources
    }

    /// Wall seconds spent translating and compiling kernels that were not
    /// already cached (0.0 on full cache hits).
    pub fn compile_seconds(&self) -> f64 {
        self.compile_seconds
    }
}
