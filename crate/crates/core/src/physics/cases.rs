//! Benchmark problems with closed-form solutions on the unit cube:
//! a resonant electromagnetic cavity mode and two transported scalar
//! profiles. Each case bundles its system, exact solution, boundary
//! handling, and a default final time.

use super::system::SystemDefinition;
use crate::error::{Error, Result};
use std::f64::consts::{PI, SQRT_2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    /// Standing mode in a perfectly conducting unit cube: one electric
    /// component, two magnetic, oscillating at frequency pi*sqrt(2).
    MaxwellCavity,
    /// Gaussian bump transported with constant velocity; inflow faces
    /// prescribe the exact trace, outflow copies the interior.
    AdvectGauss,
    /// Smooth sinusoidal plane wave transported with constant velocity.
    AdvectPlane,
}

const ADVECT_VELOCITY: [f64; 3] = [1.0, 0.5, 0.25];
const GAUSS_CENTER: [f64; 3] = [0.4, 0.4, 0.4];
const GAUSS_WIDTH: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Case {
    pub name: &'static str,
    pub kind: CaseKind,
    pub system: SystemDefinition,
    /// Default integration horizon.
    pub t_final: f64,
}

impl Case {
    /// Look a case up by its command-line name; `alpha` is the upwind
    /// weight passed through to the numerical flux.
    pub fn by_name(name: &str, alpha: f64) -> Result<Case> {
        match name {
            "maxwell-cavity-101" => Ok(Case {
                name: "maxwell-cavity-101",
                kind: CaseKind::MaxwellCavity,
                system: SystemDefinition::maxwell(alpha)?,
                t_final: 0.35,
            }),
            "advect-gauss" => Ok(Case {
                name: "advect-gauss",
                kind: CaseKind::AdvectGauss,
                system: SystemDefinition::advection(ADVECT_VELOCITY, alpha)?,
                t_final: 0.2,
            }),
            "advect-plane" => Ok(Case {
                name: "advect-plane",
                kind: CaseKind::AdvectPlane,
                system: SystemDefinition::advection(ADVECT_VELOCITY, alpha)?,
                t_final: 0.25,
            }),
            other => Err(Error::Config(format!(
                "unknown case '{other}'; available: {}",
                Self::all_names().join(", ")
            ))),
        }
    }

    pub fn all_names() -> Vec<&'static str> {
        vec!["maxwell-cavity-101", "advect-gauss", "advect-plane"]
    }

    /// Cube bounds the case is posed on.
    pub fn domain(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    /// Exact solution at a point and time, one entry per scalar field.
    pub fn exact(&self, x: [f64; 3], t: f64) -> Vec<f64> {
        match self.kind {
            CaseKind::MaxwellCavity => {
                let om = PI * SQRT_2;
                let ey = (PI * x[0]).sin() * (PI * x[2]).sin() * (om * t).cos();
                let hx = (PI / om) * (PI * x[0]).sin() * (PI * x[2]).cos() * (om * t).sin();
                let hz = -(PI / om) * (PI * x[0]).cos() * (PI * x[2]).sin() * (om * t).sin();
                vec![0.0, ey, 0.0, hx, 0.0, hz]
            }
            CaseKind::AdvectGauss => {
                let a = ADVECT_VELOCITY;
                let mut r2 = 0.0;
                for nu in 0..3 {
                    let d = x[nu] - GAUSS_CENTER[nu] - a[nu] * t;
                    r2 += d * d;
                }
                vec![(-r2 / (2.0 * GAUSS_WIDTH * GAUSS_WIDTH)).exp()]
            }
            CaseKind::AdvectPlane => {
                let a = ADVECT_VELOCITY;
                let speed = a[0] + a[1] + a[2];
                vec![(2.0 * PI * (x[0] + x[1] + x[2] - speed * t)).sin()]
            }
        }
    }

    /// Initial data is the exact solution at time zero.
    pub fn initial(&self, x: [f64; 3]) -> Vec<f64> {
        self.exact(x, 0.0)
    }

    /// Index into `system.ghost_rules` for a boundary face with the given
    /// outward normal.
    pub fn boundary_rule(&self, normal: [f64; 3]) -> usize {
        match self.kind {
            CaseKind::MaxwellCavity => 0,
            CaseKind::AdvectGauss | CaseKind::AdvectPlane => {
                let a = ADVECT_VELOCITY;
                let na = normal[0] * a[0] + normal[1] * a[1] + normal[2] * a[2];
                // Characteristics enter where the velocity opposes the
                // outward normal: prescribe the exact exterior trace there.
                if na < 0.0 {
                    1
                } else {
                    0
                }
            }
        }
    }
}
