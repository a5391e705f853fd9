//! Warp-and-blend interpolation nodes on the reference tetrahedron
//! {(r,s,t) : r,s,t >= -1, r+s+t <= -1}.
//!
//! Equidistributed nodes are deformed by edge-wise 1D warps (displacing the
//! equispaced distribution onto Gauss-Lobatto points) blended smoothly into
//! the interior, which keeps interpolation well conditioned at high order
//! while preserving the full symmetry of the tetrahedron.

use super::jacobi::gauss_lobatto_nodes;
use crate::error::{Error, Result};

/// Blend sharpness per polynomial order (index `order - 1`), chosen to
/// minimise the interpolation Lebesgue constant.
const BLEND_ALPHA: [f64; 15] = [
    0.0, 0.0, 0.0, 0.1002, 1.1332, 1.5608, 1.3413, 1.2577, 1.1603, 1.10153, 0.6080, 0.4523,
    0.8856, 0.8717, 0.9655,
];

/// Highest supported polynomial order.
pub const MAX_ORDER: usize = 10;

const TOL: f64 = 1e-10;

/// Number of volume nodes for order `n`.
pub fn node_count(n: usize) -> usize {
    (n + 1) * (n + 2) * (n + 3) / 6
}

/// Number of nodes on one face for order `n`.
pub fn face_node_count(n: usize) -> usize {
    (n + 1) * (n + 2) / 2
}

/// Equidistributed nodes on the reference tetrahedron.
fn equidistributed_nodes(n: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(node_count(n));
    let nf = n as f64;
    for layer_t in 0..=n {
        for layer_s in 0..=(n - layer_t) {
            for layer_r in 0..=(n - layer_t - layer_s) {
                pts.push([
                    -1.0 + 2.0 * layer_r as f64 / nf,
                    -1.0 + 2.0 * layer_s as f64 / nf,
                    -1.0 + 2.0 * layer_t as f64 / nf,
                ]);
            }
        }
    }
    pts
}

/// 1D warp: the displacement field that carries equispaced points onto
/// Gauss-Lobatto points, evaluated at `x` via a deflated Lagrange expansion
/// (end-point roots divided out so the warp can be blended by edge factors).
fn edge_warp(n: usize, lobatto: &[f64], x: f64) -> f64 {
    let nf = n as f64;
    let xeq: Vec<f64> = (0..=n).map(|i| -1.0 + 2.0 * (n - i) as f64 / nf).collect();
    let mut warp = 0.0;
    for i in 0..=n {
        let mut d = lobatto[i] - xeq[i];
        for (j, &xj) in xeq.iter().enumerate().take(n).skip(1) {
            if i != j {
                d *= (x - xj) / (xeq[i] - xj);
            }
        }
        if i != 0 {
            d = -d / (xeq[i] - xeq[0]);
        }
        if i != n {
            d /= xeq[i] - xeq[n];
        }
        warp += d;
    }
    warp
}

/// Tangential warp of one triangular face, expressed in the plane of an
/// equilateral triangle. `l` holds the three barycentric coordinates of the
/// face; returns the (x, y) displacement.
fn face_warp(n: usize, alpha: f64, lobatto: &[f64], l: [f64; 3]) -> (f64, f64) {
    let blend = [l[1] * l[2], l[0] * l[2], l[0] * l[1]];
    let arg = [l[2] - l[1], l[0] - l[2], l[1] - l[0]];
    let mut dx = 0.0;
    let mut dy = 0.0;
    // Unit directions of the three edge warps in the equilateral plane.
    let dirs = [
        (1.0, 0.0),
        ((2.0 * std::f64::consts::PI / 3.0).cos(), (2.0 * std::f64::consts::PI / 3.0).sin()),
        ((4.0 * std::f64::consts::PI / 3.0).cos(), (4.0 * std::f64::consts::PI / 3.0).sin()),
    ];
    for e in 0..3 {
        let w = 4.0 * edge_warp(n, lobatto, arg[e]);
        let amount = blend[e] * w * (1.0 + (alpha * l[e]).powi(2));
        dx += amount * dirs[e].0;
        dy += amount * dirs[e].1;
    }
    (dx, dy)
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn scale3(v: [f64; 3], a: f64) -> [f64; 3] {
    [v[0] * a, v[1] * a, v[2] * a]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Warp-and-blend nodes for order `n`, in reference coordinates (r, s, t).
/// Supports `1 <= n <= MAX_ORDER`.
pub fn interpolation_nodes(n: usize) -> Result<Vec<[f64; 3]>> {
    if n == 0 || n > MAX_ORDER {
        return Err(Error::RefElem(format!(
            "polynomial order {n} out of supported range 1..={MAX_ORDER}"
        )));
    }
    let alpha = BLEND_ALPHA[n - 1];
    let lobatto: Vec<f64> = gauss_lobatto_nodes(n).iter().map(|x| -x).collect();

    // Equilateral-tetrahedron vertices used as the warping frame.
    let v1 = [-1.0, -1.0 / 3f64.sqrt(), -1.0 / 6f64.sqrt()];
    let v2 = [1.0, -1.0 / 3f64.sqrt(), -1.0 / 6f64.sqrt()];
    let v3 = [0.0, 2.0 / 3f64.sqrt(), -1.0 / 6f64.sqrt()];
    let v4 = [0.0, 0.0, 3.0 / 6f64.sqrt()];

    // Two orthogonal in-plane tangents per face of the equilateral frame.
    let mut t1 = [
        sub3(v2, v1),
        sub3(v2, v1),
        sub3(v3, v2),
        sub3(v3, v1),
    ];
    let mut t2 = [
        sub3(v3, scale3([v1[0] + v2[0], v1[1] + v2[1], v1[2] + v2[2]], 0.5)),
        sub3(v4, scale3([v1[0] + v2[0], v1[1] + v2[1], v1[2] + v2[2]], 0.5)),
        sub3(v4, scale3([v2[0] + v3[0], v2[1] + v3[1], v2[2] + v3[2]], 0.5)),
        sub3(v4, scale3([v1[0] + v3[0], v1[1] + v3[1], v1[2] + v3[2]], 0.5)),
    ];
    for f in 0..4 {
        t1[f] = scale3(t1[f], 1.0 / norm3(t1[f]));
        t2[f] = scale3(t2[f], 1.0 / norm3(t2[f]));
    }

    let rst = equidistributed_nodes(n);
    let np = rst.len();

    // Barycentric coordinates matching the (v1, v2, v3, v4) frame.
    let bary: Vec<[f64; 4]> = rst
        .iter()
        .map(|&[r, s, t]| {
            [
                -(1.0 + r + s + t) / 2.0, // v1
                (1.0 + r) / 2.0,          // v2
                (1.0 + s) / 2.0,          // v3
                (1.0 + t) / 2.0,          // v4
            ]
        })
        .collect();

    let mut xyz: Vec<[f64; 3]> = bary
        .iter()
        .map(|l| {
            let mut p = [0.0; 3];
            for d in 0..3 {
                p[d] = l[0] * v1[d] + l[1] * v2[d] + l[2] * v3[d] + l[3] * v4[d];
            }
            p
        })
        .collect();

    // Face-local barycentric index sets: (opposite vertex, then the face's
    // three vertices in warping order).
    let face_bary: [[usize; 4]; 4] = [
        [3, 2, 0, 1], // face of v1,v2,v3, opposite v4
        [2, 3, 0, 1], // face of v1,v2,v4, opposite v3
        [0, 3, 1, 2], // face of v2,v3,v4, opposite v1
        [1, 3, 0, 2], // face of v1,v3,v4, opposite v2
    ];

    let mut shift = vec![[0.0f64; 3]; np];
    for f in 0..4 {
        let [ia, ib, ic, id] = face_bary[f];
        for (p, l) in bary.iter().enumerate() {
            let (la, lb, lc, ld) = (l[ia], l[ib], l[ic], l[id]);
            let (wx, wy) = face_warp(n, alpha, &lobatto, [lb, lc, ld]);
            let mut blend = lb * lc * ld;
            let denom = (lb + 0.5 * la) * (lc + 0.5 * la) * (ld + 0.5 * la);
            if denom > TOL {
                blend = (1.0 + (alpha * la).powi(2)) * blend / denom;
            }
            for d in 0..3 {
                shift[p][d] += blend * wx * t1[f][d] + blend * wy * t2[f][d];
            }
            let interior_count =
                (lb > TOL) as usize + (lc > TOL) as usize + (ld > TOL) as usize;
            if la < TOL && interior_count < 3 {
                // Node on an edge of this face: take the pure face warp so
                // shared edges are not blended twice.
                for d in 0..3 {
                    shift[p][d] = wx * t1[f][d] + wy * t2[f][d];
                }
            }
        }
    }
    for p in 0..np {
        for d in 0..3 {
            xyz[p][d] += shift[p][d];
        }
    }

    // Map back from the equilateral frame to reference (r, s, t): invert
    // x = sum_i lambda_i v_i against the reference vertices.
    let half = |a: [f64; 3], b: [f64; 3]| scale3(sub3(a, b), 0.5);
    let col_r = half(v2, v1);
    let col_s = half(v3, v1);
    let col_t = half(v4, v1);
    let mat = nalgebra::Matrix3::from_columns(&[
        nalgebra::Vector3::from_column_slice(&col_r),
        nalgebra::Vector3::from_column_slice(&col_s),
        nalgebra::Vector3::from_column_slice(&col_t),
    ]);
    let inv = mat
        .try_inverse()
        .ok_or_else(|| Error::RefElem("degenerate equilateral frame".into()))?;
    let origin = [
        0.5 * (v2[0] + v3[0] + v4[0] - v1[0]),
        0.5 * (v2[1] + v3[1] + v4[1] - v1[1]),
        0.5 * (v2[2] + v3[2] + v4[2] - v1[2]),
    ];
    let out = xyz
        .iter()
        .map(|p| {
            let rhs = nalgebra::Vector3::new(
                p[0] - origin[0],
                p[1] - origin[1],
                p[2] - origin[2],
            );
            let rst = inv * rhs;
            [rst[0], rst[1], rst[2]]
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const REF_VERTS: [[f64; 3]; 4] = [
        [-1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ];

    fn contains(pts: &[[f64; 3]], q: [f64; 3], tol: f64) -> bool {
        pts.iter().any(|p| {
            (p[0] - q[0]).abs() < tol && (p[1] - q[1]).abs() < tol && (p[2] - q[2]).abs() < tol
        })
    }

    #[test]
    fn order_one_gives_vertices() {
        let pts = interpolation_nodes(1).unwrap();
        assert_eq!(pts.len(), 4);
        for v in REF_VERTS {
            assert!(contains(&pts, v, 1e-12), "missing vertex {v:?}");
        }
    }

    #[test]
    fn order_two_gives_vertices_and_edge_midpoints() {
        let pts = interpolation_nodes(2).unwrap();
        assert_eq!(pts.len(), 10);
        for v in REF_VERTS {
            assert!(contains(&pts, v, 1e-10), "missing vertex {v:?}");
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                let mid = [
                    0.5 * (REF_VERTS[i][0] + REF_VERTS[j][0]),
                    0.5 * (REF_VERTS[i][1] + REF_VERTS[j][1]),
                    0.5 * (REF_VERTS[i][2] + REF_VERTS[j][2]),
                ];
                assert!(contains(&pts, mid, 1e-10), "missing midpoint {mid:?}");
            }
        }
    }

    #[test]
    fn node_counts_and_face_populations() {
        for n in 1..=8 {
            let pts = interpolation_nodes(n).unwrap();
            assert_eq!(pts.len(), node_count(n), "wrong volume node count at order {n}");
            let nfp = face_node_count(n);
            let on = |pred: &dyn Fn(&[f64; 3]) -> f64| {
                pts.iter().filter(|p| pred(p).abs() < 1e-8).count()
            };
            assert_eq!(on(&|p| p[2] + 1.0), nfp, "t=-1 face at order {n}");
            assert_eq!(on(&|p| p[1] + 1.0), nfp, "s=-1 face at order {n}");
            assert_eq!(on(&|p| p[0] + 1.0), nfp, "r=-1 face at order {n}");
            assert_eq!(on(&|p| p[0] + p[1] + p[2] + 1.0), nfp, "slant face at order {n}");
        }
    }

    #[test]
    fn nodes_stay_inside_reference_tetrahedron() {
        for n in [3, 5, 8] {
            for p in interpolation_nodes(n).unwrap() {
                assert!(p[0] >= -1.0 - 1e-9 && p[1] >= -1.0 - 1e-9 && p[2] >= -1.0 - 1e-9);
                assert!(p[0] + p[1] + p[2] <= -1.0 + 1e-9, "node outside: {p:?}");
            }
        }
    }

    #[test]
    fn node_set_symmetric_under_vertex_permutations() {
        // The affine map induced by any vertex permutation must send the
        // node set to itself.
        let perms: [[usize; 4]; 3] = [[1, 0, 2, 3], [0, 2, 1, 3], [0, 1, 3, 2]];
        for n in [3, 4, 6] {
            let pts = interpolation_nodes(n).unwrap();
            for perm in perms {
                for p in &pts {
                    let l = [
                        -(1.0 + p[0] + p[1] + p[2]) / 2.0,
                        (1.0 + p[0]) / 2.0,
                        (1.0 + p[1]) / 2.0,
                        (1.0 + p[2]) / 2.0,
                    ];
                    let mut q = [0.0; 3];
                    for i in 0..4 {
                        for d in 0..3 {
                            q[d] += l[i] * REF_VERTS[perm[i]][d];
                        }
                    }
                    assert!(
                        contains(&pts, q, 1e-8),
                        "order {n}: image {q:?} of node {p:?} not in set"
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_unsupported_orders() {
        assert!(interpolation_nodes(0).is_err());
        assert!(interpolation_nodes(MAX_ORDER + 1).is_err());
    }
}
