//! Modal basis, Vandermonde matrices, and the assembled reference element.
//!
//! The Lagrange-basis operators are produced without quadrature: an
//! orthonormal modal basis on the simplex gives a generalized Vandermonde
//! matrix V, from which mass = (V Vᵀ)⁻¹, differentiation D = V_∂ V⁻¹, and
//! the face-mass / lifting machinery all follow.

use nalgebra::DMatrix;

use super::jacobi::{grad_jacobi_p, jacobi_p};
use super::nodes::{face_node_count, interpolation_nodes, node_count};
use crate::error::{Error, Result};

/// Number of faces of a tetrahedron.
pub const NUM_FACES: usize = 4;

/// Local vertex triples spanning each face of the reference tetrahedron.
/// Faces 0, 1, 3 lie in the coordinate planes t = -1, s = -1, r = -1; face 2
/// is the slanted plane r + s + t = -1.
pub const FACE_VERTICES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [1, 2, 3], [0, 2, 3]];

/// Area of face `f` of the reference tetrahedron.
pub fn reference_face_area(f: usize) -> f64 {
    if f == 2 {
        2.0 * 3f64.sqrt()
    } else {
        2.0
    }
}

/// Reference differentiation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    R = 0,
    S = 1,
    T = 2,
}

/// Collapsed coordinates for the tetrahedron.
fn rst_to_abc(r: f64, s: f64, t: f64) -> (f64, f64, f64) {
    let a = if (s + t).abs() > 1e-14 {
        2.0 * (1.0 + r) / (-s - t) - 1.0
    } else {
        -1.0
    };
    let b = if (1.0 - t).abs() > 1e-14 {
        2.0 * (1.0 + s) / (1.0 - t) - 1.0
    } else {
        -1.0
    };
    (a, b, t)
}

/// Orthonormal modal basis member (i, j, k) on the reference tetrahedron,
/// evaluated in collapsed coordinates.
fn simplex_3d(a: f64, b: f64, c: f64, i: usize, j: usize, k: usize) -> f64 {
    let h1 = jacobi_p(a, 0, 0, i);
    let h2 = jacobi_p(b, 2 * i as u32 + 1, 0, j);
    let h3 = jacobi_p(c, 2 * (i + j) as u32 + 2, 0, k);
    2.0 * 2f64.sqrt() * h1 * h2 * (1.0 - b).powi(i as i32) * h3 * (1.0 - c).powi((i + j) as i32)
}

/// Gradient (d/dr, d/ds, d/dt) of the modal basis member (i, j, k).
fn grad_simplex_3d(a: f64, b: f64, c: f64, i: usize, j: usize, k: usize) -> (f64, f64, f64) {
    let fa = jacobi_p(a, 0, 0, i);
    let dfa = grad_jacobi_p(a, 0, 0, i);
    let gb = jacobi_p(b, 2 * i as u32 + 1, 0, j);
    let dgb = grad_jacobi_p(b, 2 * i as u32 + 1, 0, j);
    let hc = jacobi_p(c, 2 * (i + j) as u32 + 2, 0, k);
    let dhc = grad_jacobi_p(c, 2 * (i + j) as u32 + 2, 0, k);
    let hb = 0.5 * (1.0 - b);
    let hcf = 0.5 * (1.0 - c);

    let mut dr = dfa * gb * hc;
    if i > 0 {
        dr *= hb.powi(i as i32 - 1);
    }
    if i + j > 0 {
        dr *= hcf.powi((i + j) as i32 - 1);
    }

    let mut ds = 0.5 * (1.0 + a) * dr;
    let mut tmp = dgb * hb.powi(i as i32);
    if i > 0 {
        tmp += -0.5 * i as f64 * gb * hb.powi(i as i32 - 1);
    }
    if i + j > 0 {
        tmp *= hcf.powi((i + j) as i32 - 1);
    }
    tmp *= fa * hc;
    ds += tmp;

    let mut dt = 0.5 * (1.0 + a) * dr + 0.5 * (1.0 + b) * tmp;
    let mut tc = dhc * hcf.powi((i + j) as i32);
    if i + j > 0 {
        tc -= 0.5 * (i + j) as f64 * hc * hcf.powi((i + j) as i32 - 1);
    }
    tc *= fa * gb * hb.powi(i as i32);
    dt += tc;

    let scale = 2f64.powi(2 * i as i32 + j as i32) * 2.0 * 2f64.sqrt();
    (dr * scale, ds * scale, dt * scale)
}

/// Generalized Vandermonde matrix: V[p][m] = basis_m(node_p).
fn vandermonde_3d(n: usize, pts: &[[f64; 3]]) -> DMatrix<f64> {
    let np = node_count(n);
    let mut v = DMatrix::zeros(pts.len(), np);
    for (p, &[r, s, t]) in pts.iter().enumerate() {
        let (a, b, c) = rst_to_abc(r, s, t);
        let mut m = 0;
        for i in 0..=n {
            for j in 0..=(n - i) {
                for k in 0..=(n - i - j) {
                    v[(p, m)] = simplex_3d(a, b, c, i, j, k);
                    m += 1;
                }
            }
        }
    }
    v
}

/// Gradient Vandermonde matrices (d/dr, d/ds, d/dt).
fn grad_vandermonde_3d(n: usize, pts: &[[f64; 3]]) -> [DMatrix<f64>; 3] {
    let np = node_count(n);
    let mut vr = DMatrix::zeros(pts.len(), np);
    let mut vs = DMatrix::zeros(pts.len(), np);
    let mut vt = DMatrix::zeros(pts.len(), np);
    for (p, &[r, s, t]) in pts.iter().enumerate() {
        let (a, b, c) = rst_to_abc(r, s, t);
        let mut m = 0;
        for i in 0..=n {
            for j in 0..=(n - i) {
                for k in 0..=(n - i - j) {
                    let (dr, ds, dt) = grad_simplex_3d(a, b, c, i, j, k);
                    vr[(p, m)] = dr;
                    vs[(p, m)] = ds;
                    vt[(p, m)] = dt;
                    m += 1;
                }
            }
        }
    }
    [vr, vs, vt]
}

/// Orthonormal modal basis member (i, j) on the reference triangle.
fn simplex_2d(a: f64, b: f64, i: usize, j: usize) -> f64 {
    2f64.sqrt()
        * jacobi_p(a, 0, 0, i)
        * jacobi_p(b, 2 * i as u32 + 1, 0, j)
        * (1.0 - b).powi(i as i32)
}

/// Triangle Vandermonde over 2D points in the bi-unit triangle.
fn vandermonde_2d(n: usize, pts: &[[f64; 2]]) -> DMatrix<f64> {
    let nfp = face_node_count(n);
    let mut v = DMatrix::zeros(pts.len(), nfp);
    for (p, &[r, s]) in pts.iter().enumerate() {
        let a = if (1.0 - s).abs() > 1e-14 {
            2.0 * (1.0 + r) / (1.0 - s) - 1.0
        } else {
            -1.0
        };
        let b = s;
        let mut m = 0;
        for i in 0..=n {
            for j in 0..=(n - i) {
                v[(p, m)] = simplex_2d(a, b, i, j);
                m += 1;
            }
        }
    }
    v
}

/// Signed distance of a node from the plane of face `f`, normalised so a
/// distance below tolerance means "on the face".
fn face_plane_distance(f: usize, p: [f64; 3]) -> f64 {
    match f {
        0 => (p[2] + 1.0).abs(),
        1 => (p[1] + 1.0).abs(),
        2 => (p[0] + p[1] + p[2] + 1.0).abs() / 3f64.sqrt(),
        3 => (p[0] + 1.0).abs(),
        _ => unreachable!("tetrahedra have 4 faces"),
    }
}

/// In-face 2D parameters of a node on face `f`. Each face maps affinely and
/// area-preservingly (up to the slant factor handled separately) onto the
/// bi-unit triangle.
fn face_parameters(f: usize, p: [f64; 3]) -> [f64; 2] {
    match f {
        0 => [p[0], p[1]],
        1 => [p[0], p[2]],
        2 => [p[1], p[2]],
        3 => [p[1], p[2]],
        _ => unreachable!("tetrahedra have 4 faces"),
    }
}

/// Order-N reference tetrahedron: interpolation nodes plus the dense
/// operators used by every generated kernel and by host-side diagnostics.
#[derive(Debug, Clone)]
pub struct ReferenceElement {
    /// Polynomial order N.
    pub order: usize,
    /// Volume node count (N+1)(N+2)(N+3)/6.
    pub np: usize,
    /// Per-face node count (N+1)(N+2)/2.
    pub nfp: usize,
    /// Node coordinates (r, s, t) on the bi-unit reference tetrahedron.
    pub nodes: Vec<[f64; 3]>,
    /// For each face, the indices of the nodes lying on it.
    pub face_node_index: [Vec<usize>; 4],
    /// Mass matrix, Np x Np.
    pub mass: DMatrix<f64>,
    /// Stiffness matrices (mass times differentiation) per axis, Np x Np.
    pub stiffness: [DMatrix<f64>; 3],
    /// Nodal differentiation matrices per axis, Np x Np.
    pub diff: [DMatrix<f64>; 3],
    /// Face mass matrices, Nfp x Nfp each.
    pub face_mass: [DMatrix<f64>; 4],
    /// Lifting matrix mapping stacked face values to a volume vector,
    /// Np x (4 Nfp).
    pub lift: DMatrix<f64>,
    /// Modal-to-nodal Vandermonde matrix, kept for interpolation utilities.
    pub vandermonde: DMatrix<f64>,
}

impl ReferenceElement {
    /// Build the full operator set for order `n` (1..=MAX_ORDER).
    pub fn new(n: usize) -> Result<Self> {
        let nodes = interpolation_nodes(n)?;
        let np = node_count(n);
        let nfp = face_node_count(n);

        let v = vandermonde_3d(n, &nodes);
        let v_inv = v.clone().try_inverse().ok_or_else(|| {
            Error::RefElem(format!("singular volume Vandermonde matrix at order {n}"))
        })?;
        let vvt = &v * v.transpose();
        let mass = vvt.clone().try_inverse().ok_or_else(|| {
            Error::RefElem(format!("singular nodal Gram matrix at order {n}"))
        })?;

        let grad = grad_vandermonde_3d(n, &nodes);
        let diff: [DMatrix<f64>; 3] = [
            &grad[0] * &v_inv,
            &grad[1] * &v_inv,
            &grad[2] * &v_inv,
        ];
        let stiffness: [DMatrix<f64>; 3] =
            [&mass * &diff[0], &mass * &diff[1], &mass * &diff[2]];

        let mut face_node_index: [Vec<usize>; 4] = Default::default();
        for f in 0..NUM_FACES {
            let idx: Vec<usize> = nodes
                .iter()
                .enumerate()
                .filter(|(_, &p)| face_plane_distance(f, p) < 1e-10)
                .map(|(i, _)| i)
                .collect();
            if idx.len() != nfp {
                return Err(Error::RefElem(format!(
                    "face {f} holds {} nodes, expected {nfp}",
                    idx.len()
                )));
            }
            face_node_index[f] = idx;
        }

        let mut face_mass: [DMatrix<f64>; 4] = [
            DMatrix::zeros(nfp, nfp),
            DMatrix::zeros(nfp, nfp),
            DMatrix::zeros(nfp, nfp),
            DMatrix::zeros(nfp, nfp),
        ];
        for f in 0..NUM_FACES {
            let pts: Vec<[f64; 2]> = face_node_index[f]
                .iter()
                .map(|&i| face_parameters(f, nodes[i]))
                .collect();
            let v2 = vandermonde_2d(n, &pts);
            let v2v2t = &v2 * v2.transpose();
            let mut m2 = v2v2t.try_inverse().ok_or_else(|| {
                Error::RefElem(format!("singular face Vandermonde on face {f} at order {n}"))
            })?;
            if f == 2 {
                // The slant face's parameter triangle has area 2 while the
                // true face area is 2*sqrt(3).
                m2 *= 3f64.sqrt();
            }
            face_mass[f] = m2;
        }

        // Face masses embedded at facial rows, then lifted through the
        // inverse mass matrix (V Vᵀ exactly).
        let mut emat = DMatrix::<f64>::zeros(np, 4 * nfp);
        for f in 0..NUM_FACES {
            for (m, &row) in face_node_index[f].iter().enumerate() {
                for col in 0..nfp {
                    emat[(row, f * nfp + col)] = face_mass[f][(m, col)];
                }
            }
        }
        let lift = &vvt * &emat;

        Ok(ReferenceElement {
            order: n,
            np,
            nfp,
            nodes,
            face_node_index,
            mass,
            stiffness,
            diff,
            face_mass,
            lift,
            vandermonde: v,
        })
    }

    /// Apply the nodal differentiation matrix for one axis.
    pub fn differentiate(&self, nodal: &[f64], axis: Axis) -> Result<Vec<f64>> {
        if nodal.len() != self.np {
            return Err(Error::RefElem(format!(
                "nodal vector has length {}, element has {} nodes",
                nodal.len(),
                self.np
            )));
        }
        let d = &self.diff[axis as usize];
        let mut out = vec![0.0; self.np];
        for i in 0..self.np {
            let mut acc = 0.0;
            for j in 0..self.np {
                acc += d[(i, j)] * nodal[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Write every operator to `w` as plain text, one matrix row per line,
    /// for external cross-checking.
    pub fn dump_matrices<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let dump = |w: &mut W, name: &str, m: &DMatrix<f64>| -> std::io::Result<()> {
            writeln!(w, "# {name} {}x{}", m.nrows(), m.ncols())?;
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            Ok(())
        };
        dump(w, "mass", &self.mass)?;
        for (axis, s) in ["r", "s", "t"].iter().zip(&self.stiffness) {
            dump(w, &format!("stiffness_{axis}"), s)?;
        }
        for (axis, d) in ["r", "s", "t"].iter().zip(&self.diff) {
            dump(w, &format!("diff_{axis}"), d)?;
        }
        for (f, fm) in self.face_mass.iter().enumerate() {
            dump(w, &format!("face_mass_{f}"), fm)?;
        }
        dump(w, "lift", &self.lift)
    }
}
