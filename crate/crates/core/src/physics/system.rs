//! Linear conservation-law systems: the volume coupling structure consumed
//! by the differentiation stage, the face flux expression consumed by the
//! gather stage, and the ghost-state rules for boundary faces.

use crate::codegen::GhostRule;
use crate::error::{Error, Result};
use crate::fluxdsl::{lower, FluxExpr, FluxSpec, LoweredFlux, Shape};
use crate::mesh::GeometricFactors;

/// A first-order linear system `du/dt + sum_nu A_nu du/dx_nu = 0` in the
/// form the solver pipeline consumes.
///
/// The volume part is a sparse coupling list: entry `s = (f, g)` says field
/// `f`'s time derivative involves derivatives of field `g`, with Cartesian
/// weights `coeffs[s][nu] = A_nu[f][g]`. The face part is a flux expression
/// evaluated on the two traces; it produces the quantity the lift stage
/// adds, scaled by the face's surface Jacobian and the element's inverse
/// volume Jacobian.
#[derive(Debug, Clone)]
pub struct SystemDefinition {
    pub name: &'static str,
    /// Number of scalar fields.
    pub num_fields: usize,
    /// (output field, input field) pairs with nonzero coupling, in the
    /// order the geometry coefficient table is packed.
    pub structure: Vec<(usize, usize)>,
    /// Per structure entry, the three Cartesian coupling coefficients.
    pub coeffs: Vec<[f64; 3]>,
    /// The numerical flux as a typed expression (kept for reporting and as
    /// the semantic reference).
    pub flux_spec: FluxSpec,
    /// The same flux lowered to the scalar DAG spliced into gather kernels.
    pub flux: LoweredFlux,
    /// Ghost-state construction per boundary kind; a face tagged with rule
    /// index `r` gets gather task type `r + 1`.
    pub ghost_rules: Vec<GhostRule>,
    /// Largest characteristic speed, entering the time-step rule.
    pub max_speed: f64,
}

impl SystemDefinition {
    /// Normalised electromagnetic system: six fields `E.x..H.z`, curl-curl
    /// coupling, tangential-penalty flux with upwind weight `alpha` (0 =
    /// central, 1 = fully upwind), and a perfectly conducting wall rule
    /// (negate E, copy H).
    pub fn maxwell(alpha: f64) -> Result<Self> {
        // Coupling entries: dE/dt is the curl of H, dH/dt is minus the
        // curl of E. With fields (E0,E1,E2,H0,H1,H2), the entry for
        // (E_i, H_k), i != k, carries weight -eps(i,nu,k) on the third
        // axis nu, and (H_i, E_k) carries +eps(i,nu,k).
        let mut structure = Vec::new();
        let mut coeffs = Vec::new();
        let eps = |i: usize, j: usize, k: usize| -> f64 {
            match (i, j, k) {
                (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
                (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
                _ => 0.0,
            }
        };
        for i in 0..3 {
            for k in 0..3 {
                if i == k {
                    continue;
                }
                let nu = 3 - i - k;
                let mut c = [0.0; 3];
                c[nu] = -eps(i, nu, k);
                structure.push((i, 3 + k));
                coeffs.push(c);
            }
        }
        for i in 0..3 {
            for k in 0..3 {
                if i == k {
                    continue;
                }
                let nu = 3 - i - k;
                let mut c = [0.0; 3];
                c[nu] = eps(i, nu, k);
                structure.push((3 + i, k));
                coeffs.push(c);
            }
        }

        // Face flux (jump convention: interior minus exterior):
        //   E: -1/2 n x (jump(H) - alpha n x jump(E))
        //   H: +1/2 n x (jump(E) + alpha n x jump(H))
        let n = || FluxExpr::Normal;
        let e_out = FluxExpr::Const(-0.5).scale(n().cross(
            FluxExpr::jump("H").sub(FluxExpr::Const(alpha).scale(n().cross(FluxExpr::jump("E")))),
        ));
        let h_out = FluxExpr::Const(0.5).scale(n().cross(
            FluxExpr::jump("E").add(FluxExpr::Const(alpha).scale(n().cross(FluxExpr::jump("H")))),
        ));
        let flux_spec = FluxSpec {
            fields: vec![
                ("E".to_string(), Shape::Vector3),
                ("H".to_string(), Shape::Vector3),
            ],
            outputs: vec![("E".to_string(), e_out), ("H".to_string(), h_out)],
            params: vec![("upwind".to_string(), alpha)],
        };
        let flux = lower(&flux_spec)?;
        Ok(SystemDefinition {
            name: "maxwell",
            num_fields: 6,
            structure,
            coeffs,
            flux_spec,
            flux,
            ghost_rules: vec![GhostRule::MirrorNegate(vec![0, 1, 2])],
            max_speed: 1.0,
        })
    }

    /// Scalar transport `du/dt + a . grad u = 0` with upwind weight
    /// `alpha`. Boundary rules: 0 copies the interior trace (outflow),
    /// 1 prescribes the exterior trace (inflow).
    pub fn advection(a: [f64; 3], alpha: f64) -> Result<Self> {
        let an = || FluxExpr::ConstVec3(a).dot(FluxExpr::Normal);
        let out = FluxExpr::Const(0.5)
            .scale(an().sub(FluxExpr::Const(alpha).scale(an().abs())))
            .scale(FluxExpr::jump("u"));
        let flux_spec = FluxSpec {
            fields: vec![("u".to_string(), Shape::Scalar)],
            outputs: vec![("u".to_string(), out)],
            params: vec![
                ("upwind".to_string(), alpha),
                ("a.x".to_string(), a[0]),
                ("a.y".to_string(), a[1]),
                ("a.z".to_string(), a[2]),
            ],
        };
        let flux = lower(&flux_spec)?;
        Ok(SystemDefinition {
            name: "advection",
            num_fields: 1,
            structure: vec![(0, 0)],
            coeffs: vec![a],
            flux_spec,
            flux,
            ghost_rules: vec![GhostRule::CopyInterior, GhostRule::Prescribed],
            max_speed: (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt(),
        })
    }

    /// Scalar component names, matching the field indexing of `structure`.
    pub fn field_names(&self) -> &[String] {
        &self.flux.component_names
    }

    /// Number of distinct input fields in the coupling structure.
    pub fn num_inputs(&self) -> usize {
        let mut seen = Vec::new();
        for &(_, g) in &self.structure {
            if !seen.contains(&g) {
                seen.push(g);
            }
        }
        seen.len()
    }

    /// Pack the per-element differentiation coefficients consumed by the
    /// volume kernel: entry `(k*NS + s)*3 + mu` weights the mu-th
    /// reference-axis derivative of input `g` in output `f`, for structure
    /// entry `s = (f, g)`. The chain rule and the leading minus sign of
    /// the evolution equation are folded in here.
    pub fn geo_coefficients(&self, geo: &GeometricFactors) -> Vec<f64> {
        let ns = self.structure.len();
        let mut out = vec![0.0; geo.drdx.len() * ns * 3];
        for (k, dr) in geo.drdx.iter().enumerate() {
            for (s, c) in self.coeffs.iter().enumerate() {
                for mu in 0..3 {
                    let mut v = 0.0;
                    for nu in 0..3 {
                        v += c[nu] * dr[mu][nu];
                    }
                    out[(k * ns + s) * 3 + mu] = -v;
                }
            }
        }
        out
    }

    /// `A_n = sum_nu n_nu A_nu` applied to a state vector; the exact
    /// normal-flux difference the numerical flux must telescope to across
    /// a face (conservation).
    pub fn normal_jacobian_apply(&self, normal: [f64; 3], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_fields];
        for (s, &(f, g)) in self.structure.iter().enumerate() {
            let an: f64 = (0..3).map(|nu| self.coeffs[s][nu] * normal[nu]).sum();
            out[f] += an * u[g];
        }
        out
    }

    pub fn rule_code(&self, rule_index: usize) -> Result<i64> {
        if rule_index >= self.ghost_rules.len() {
            return Err(Error::Config(format!(
                "ghost rule index {rule_index} out of range for {}",
                self.name
            )));
        }
        Ok(rule_index as i64 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluxdsl::{interpret, Value};
    use crate::mesh::{compute_geometric_factors, Mesh};
    use crate::refelem::ReferenceElement;
    use std::collections::HashMap;

    /// Mesh of the reference tetrahedron itself: identity map, so nodal
    /// coordinates equal reference coordinates and reference-axis
    /// differentiation is Cartesian differentiation.
    fn reference_mesh() -> Mesh {
        Mesh::from_raw(
            vec![
                [-1.0, -1.0, -1.0],
                [1.0, -1.0, -1.0],
                [-1.0, 1.0, -1.0],
                [-1.0, -1.0, 1.0],
            ],
            vec![[0, 1, 2, 3]],
            Vec::new(),
        )
        .unwrap()
    }

    /// Apply the volume operator on the reference element the same way the
    /// kernel contract states it, entirely with host linear algebra.
    fn apply_volume(
        sys: &SystemDefinition,
        refel: &ReferenceElement,
        u: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let geo = compute_geometric_factors(&reference_mesh()).unwrap();
        let coeff = sys.geo_coefficients(&geo);
        let np = refel.np;
        let mut out = vec![vec![0.0; np]; sys.num_fields];
        for (s, &(f, g)) in sys.structure.iter().enumerate() {
            for mu in 0..3 {
                for (i, o) in out[f].iter_mut().enumerate() {
                    let d: f64 = (0..np).map(|j| refel.diff[mu][(i, j)] * u[g][j]).sum();
                    *o += coeff[s * 3 + mu] * d;
                }
            }
        }
        out
    }

    #[test]
    fn electromagnetic_volume_terms_reproduce_the_curls() {
        let sys = SystemDefinition::maxwell(1.0).unwrap();
        for order in [2, 3] {
            let refel = ReferenceElement::new(order).unwrap();
            let np = refel.np;
            // Quadratic fields with known curls:
            //   E = (z^2, x^2, y^2) -> curl E = (2y, 2z, 2x)
            //   H = (y^2, z^2, x^2) -> curl H = (-2z, -2x, -2y)
            let mut u = vec![vec![0.0; np]; 6];
            for (i, p) in refel.nodes.iter().enumerate() {
                let [x, y, z] = *p;
                u[0][i] = z * z;
                u[1][i] = x * x;
                u[2][i] = y * y;
                u[3][i] = y * y;
                u[4][i] = z * z;
                u[5][i] = x * x;
            }
            let out = apply_volume(&sys, &refel, &u);
            for (i, p) in refel.nodes.iter().enumerate() {
                let [x, y, z] = *p;
                let expect = [
                    -2.0 * z,
                    -2.0 * x,
                    -2.0 * y, // dE/dt = curl H
                    -2.0 * y,
                    -2.0 * z,
                    -2.0 * x, // dH/dt = -curl E
                ];
                for f in 0..6 {
                    assert!(
                        (out[f][i] - expect[f]).abs() < 1e-10,
                        "order {order} field {f} node {i}: {} vs {}",
                        out[f][i],
                        expect[f]
                    );
                }
            }
        }
    }

    #[test]
    fn transport_volume_term_is_minus_the_directional_derivative() {
        let a = [1.0, 0.5, 0.25];
        let sys = SystemDefinition::advection(a, 1.0).unwrap();
        let refel = ReferenceElement::new(1).unwrap();
        let np = refel.np;
        let grad = [0.3, 0.7, -1.1];
        let mut u = vec![vec![0.0; np]];
        for (dst, p) in u[0].iter_mut().zip(&refel.nodes) {
            *dst = 0.5 + grad[0] * p[0] + grad[1] * p[1] + grad[2] * p[2];
        }
        let out = apply_volume(&sys, &refel, &u);
        let expect = -(a[0] * grad[0] + a[1] * grad[1] + a[2] * grad[2]);
        for v in &out[0] {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    fn tv(n: u64) -> f64 {
        let mut x = n.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
        x ^= x >> 29;
        x = x.wrapping_mul(0xbf58476d1ce4e5b9);
        x ^= x >> 32;
        (x % 2_000_003) as f64 / 1_000_001.5 - 1.0
    }

    fn eval_flux(
        sys: &SystemDefinition,
        minus: &[f64],
        plus: &[f64],
        normal: [f64; 3],
    ) -> Vec<f64> {
        // Reference evaluation through the typed interpreter, binding the
        // declared fields to trace values.
        let mut traces: HashMap<String, (Value, Value)> = HashMap::new();
        let mut base = 0;
        for (name, shape) in &sys.flux_spec.fields {
            match shape {
                Shape::Scalar => {
                    traces.insert(
                        name.clone(),
                        (Value::Scalar(minus[base]), Value::Scalar(plus[base])),
                    );
                    base += 1;
                }
                Shape::Vector3 => {
                    traces.insert(
                        name.clone(),
                        (
                            Value::Vec3([minus[base], minus[base + 1], minus[base + 2]]),
                            Value::Vec3([plus[base], plus[base + 1], plus[base + 2]]),
                        ),
                    );
                    base += 3;
                }
            }
        }
        let mut out = Vec::new();
        for (_, expr) in &sys.flux_spec.outputs {
            match interpret(expr, &traces, normal).unwrap() {
                Value::Scalar(v) => out.push(v),
                Value::Vec3(v) => out.extend_from_slice(&v),
            }
        }
        out
    }

    /// Conservation: the flux seen from one side plus the flux seen from
    /// the other (swapped traces, flipped normal) must telescope to the
    /// exact normal-flux difference A_n (u- minus u+). This ties the face
    /// expression to the volume coupling with consistent signs.
    #[test]
    fn numerical_fluxes_telescope_to_the_normal_flux_difference() {
        let systems = [
            SystemDefinition::maxwell(0.0).unwrap(),
            SystemDefinition::maxwell(1.0).unwrap(),
            SystemDefinition::maxwell(0.3).unwrap(),
            SystemDefinition::advection([1.0, 0.5, 0.25], 0.0).unwrap(),
            SystemDefinition::advection([1.0, 0.5, 0.25], 1.0).unwrap(),
        ];
        for (si, sys) in systems.iter().enumerate() {
            let nf = sys.num_fields;
            for trial in 0..20 {
                let seed = (si * 1000 + trial) as u64;
                let minus: Vec<f64> = (0..nf).map(|c| tv(seed * 97 + c as u64)).collect();
                let plus: Vec<f64> = (0..nf).map(|c| tv(seed * 97 + 31 + c as u64)).collect();
                let raw = [tv(seed + 400), tv(seed + 500), tv(seed + 600)];
                let len = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
                let n = [raw[0] / len, raw[1] / len, raw[2] / len];
                let here = eval_flux(sys, &minus, &plus, n);
                let there = eval_flux(sys, &plus, &minus, [-n[0], -n[1], -n[2]]);
                let d: Vec<f64> = (0..nf).map(|c| minus[c] - plus[c]).collect();
                let exact = sys.normal_jacobian_apply(n, &d);
                for c in 0..nf {
                    assert!(
                        (here[c] + there[c] - exact[c]).abs() < 1e-12,
                        "{} trial {trial} component {c}: {} + {} vs {}",
                        sys.name,
                        here[c],
                        there[c],
                        exact[c]
                    );
                }
            }
        }
    }

    #[test]
    fn fluxes_are_consistent_for_equal_traces() {
        for sys in [
            SystemDefinition::maxwell(1.0).unwrap(),
            SystemDefinition::advection([1.0, 0.5, 0.25], 1.0).unwrap(),
        ] {
            let nf = sys.num_fields;
            let u: Vec<f64> = (0..nf).map(|c| tv(c as u64 + 42)).collect();
            let out = eval_flux(&sys, &u, &u, [0.6, -0.8, 0.0]);
            for (c, v) in out.iter().enumerate() {
                assert_eq!(*v, 0.0, "component {c} nonzero for equal traces");
            }
        }
    }

    #[test]
    fn fully_upwind_transport_takes_the_upwind_trace() {
        let a = [1.0, 0.5, 0.25];
        let sys = SystemDefinition::advection(a, 1.0).unwrap();
        let (m, p) = (0.8, -0.3);
        for n in [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]] {
            let na = n[0] * a[0] + n[1] * a[1] + n[2] * a[2];
            let got = eval_flux(&sys, &[m], &[p], n)[0];
            // Lifted quantity: n.F(interior) minus the upwind flux.
            let upwind = if na > 0.0 { na * m } else { na * p };
            let expect = na * m - upwind;
            assert!(
                (got - expect).abs() < 1e-14,
                "normal {n:?}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn component_names_follow_field_order() {
        let sys = SystemDefinition::maxwell(1.0).unwrap();
        let names: Vec<&str> = sys.field_names().iter().map(|s| s.as_str()).collect();
        assert_eq!(names, ["E.x", "E.y", "E.z", "H.x", "H.y", "H.z"]);
        assert_eq!(sys.num_inputs(), 6);
        assert_eq!(sys.structure.len(), 12);
        let adv = SystemDefinition::advection([1.0, 0.5, 0.25], 1.0).unwrap();
        assert_eq!(adv.field_names(), ["u"]);
        assert_eq!(adv.num_inputs(), 1);
    }

    /// The central flux must have no dissipative terms at all: its lowered
    /// DAG is strictly smaller than the upwind one.
    #[test]
    fn central_flux_folds_away_the_penalty_terms() {
        let central = SystemDefinition::maxwell(0.0).unwrap();
        let upwind = SystemDefinition::maxwell(1.0).unwrap();
        assert!(central.flux.flop_count() < upwind.flux.flop_count());
        let c = SystemDefinition::advection([1.0, 0.5, 0.25], 0.0).unwrap();
        let u = SystemDefinition::advection([1.0, 0.5, 0.25], 1.0).unwrap();
        assert!(c.flux.flop_count() < u.flux.flop_count());
    }
}
