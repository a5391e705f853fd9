//! Structured box meshes: each hexahedral cell is split into six
//! tetrahedra sharing the cell's main diagonal, which keeps the split
//! conforming across neighbouring cells.

use super::Mesh;
use crate::error::{Error, Result};

/// Generate an nx x ny x nz box mesh over `bounds` = (lower, upper) with
/// 6·nx·ny·nz tetrahedra. All boundary faces carry the default tag.
pub fn generate_box_mesh(
    nx: usize,
    ny: usize,
    nz: usize,
    bounds: ([f64; 3], [f64; 3]),
) -> Result<Mesh> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::Mesh("box mesh needs at least one cell per axis".into()));
    }
    let (lo, hi) = bounds;
    for d in 0..3 {
        if !(hi[d] > lo[d]) {
            return Err(Error::Mesh(format!(
                "degenerate box bounds on axis {d}: [{}, {}]",
                lo[d], hi[d]
            )));
        }
    }

    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([
                    lo[0] + (hi[0] - lo[0]) * i as f64 / nx as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / ny as f64,
                    lo[2] + (hi[2] - lo[2]) * k as f64 / nz as f64,
                ]);
            }
        }
    }
    let vid = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;

    // Subdivide along vertex paths from the low corner to the high corner,
    // one tetrahedron per axis-order permutation. Every cell cuts shared
    // square faces along the same diagonal, so the mesh conforms.
    const AXIS_ORDERS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for order in AXIS_ORDERS {
                    let mut off = [0usize; 3];
                    let base = [i, j, k];
                    let mut tet = [0usize; 4];
                    tet[0] = vid(base[0], base[1], base[2]);
                    off[order[0]] = 1;
                    tet[1] = vid(base[0] + off[0], base[1] + off[1], base[2] + off[2]);
                    off[order[1]] = 1;
                    tet[2] = vid(base[0] + off[0], base[1] + off[1], base[2] + off[2]);
                    tet[3] = vid(i + 1, j + 1, k + 1);
                    tets.push(tet);
                }
            }
        }
    }
    Mesh::from_raw(vertices, tets, Vec::new())
}
