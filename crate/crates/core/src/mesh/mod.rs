//! Tetrahedral meshes: generation, file ingestion, face-to-face
//! connectivity, per-element affine geometric factors, and the greedy
//! partitioner that groups elements into flux-gather blocks.

mod boxgen;
mod connectivity;
mod geometry;
mod io;
mod partition;

pub use boxgen::generate_box_mesh;
pub use connectivity::{build_connectivity, BoundaryFace, FaceConnectivity, InteriorPair};
pub use geometry::{compute_geometric_factors, GeometricFactors};
pub use io::{load_mesh, parse_mesh};
pub use partition::{contiguous_partition, greedy_partition, GatherPartition};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::refelem::FACE_VERTICES;

/// Default tag assigned to untagged boundary faces.
pub const DEFAULT_BOUNDARY_TAG: &str = "boundary";

/// An unstructured tetrahedral mesh. Orientation is normalised on
/// construction so every element has positive volume.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// Vertex coordinates.
    pub vertices: Vec<[f64; 3]>,
    /// Four vertex indices per tetrahedron.
    pub tets: Vec<[usize; 4]>,
    /// Tag per boundary face, keyed by (element, local face).
    pub boundary_tag: HashMap<(usize, usize), String>,
}

impl Mesh {
    /// Number of elements.
    pub fn num_elements(&self) -> usize {
        self.tets.len()
    }

    /// Global vertex coordinates of one element.
    pub fn element_vertices(&self, k: usize) -> [[f64; 3]; 4] {
        let t = self.tets[k];
        [
            self.vertices[t[0]],
            self.vertices[t[1]],
            self.vertices[t[2]],
            self.vertices[t[3]],
        ]
    }

    /// Sorted global vertex triple of one local face, used as a face key.
    pub fn face_key(&self, k: usize, f: usize) -> [usize; 3] {
        let t = self.tets[k];
        let fv = FACE_VERTICES[f];
        let mut key = [t[fv[0]], t[fv[1]], t[fv[2]]];
        key.sort_unstable();
        key
    }

    /// Longest edge of one element.
    pub fn element_diameter(&self, k: usize) -> f64 {
        let v = self.element_vertices(k);
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let e = [v[j][0] - v[i][0], v[j][1] - v[i][1], v[j][2] - v[i][2]];
                d = d.max((e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt());
            }
        }
        d
    }

    /// Map a reference point (r, s, t) into element `k` via the affine
    /// vertex map.
    pub fn map_reference_point(&self, k: usize, p: [f64; 3]) -> [f64; 3] {
        let [r, s, t] = p;
        let l = [
            -(1.0 + r + s + t) / 2.0,
            (1.0 + r) / 2.0,
            (1.0 + s) / 2.0,
            (1.0 + t) / 2.0,
        ];
        let v = self.element_vertices(k);
        let mut x = [0.0; 3];
        for i in 0..4 {
            for d in 0..3 {
                x[d] += l[i] * v[i][d];
            }
        }
        x
    }

    /// Signed volume of the tetrahedron spanned by four points.
    fn signed_volume(v: &[[f64; 3]; 4]) -> f64 {
        let e = |a: usize| {
            [
                v[a][0] - v[0][0],
                v[a][1] - v[0][1],
                v[a][2] - v[0][2],
            ]
        };
        let (e1, e2, e3) = (e(1), e(2), e(3));
        let det = e1[0] * (e2[1] * e3[2] - e2[2] * e3[1])
            - e1[1] * (e2[0] * e3[2] - e2[2] * e3[0])
            + e1[2] * (e2[0] * e3[1] - e2[1] * e3[0]);
        det / 6.0
    }

    /// Normalise orientation (positive volume; fixes by swapping the last
    /// two vertices) and validate volumes, index bounds, and face sharing.
    /// Returns, per element, whether its vertices were swapped, so callers
    /// holding local-face references can remap them.
    fn normalize_and_validate(&mut self) -> Result<Vec<bool>> {
        let nv = self.vertices.len();
        let mut swapped = vec![false; self.num_elements()];
        for (k, tet) in self.tets.iter_mut().enumerate() {
            for &vi in tet.iter() {
                if vi >= nv {
                    return Err(Error::Mesh(format!(
                        "element {k} references vertex {vi}, mesh has {nv} vertices"
                    )));
                }
            }
            let verts = [
                self.vertices[tet[0]],
                self.vertices[tet[1]],
                self.vertices[tet[2]],
                self.vertices[tet[3]],
            ];
            let mut vol = Self::signed_volume(&verts);
            if vol < 0.0 {
                tet.swap(2, 3);
                swapped[k] = true;
                vol = -vol;
            }
            let diam = {
                let mut d: f64 = 0.0;
                for i in 0..4 {
                    for j in (i + 1)..4 {
                        let e = [
                            verts[j][0] - verts[i][0],
                            verts[j][1] - verts[i][1],
                            verts[j][2] - verts[i][2],
                        ];
                        d = d.max((e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt());
                    }
                }
                d
            };
            if vol <= 1e-12 * diam.powi(3).max(f64::MIN_POSITIVE) {
                return Err(Error::Mesh(format!("element {k} has zero volume")));
            }
        }
        let mut face_count: HashMap<[usize; 3], usize> = HashMap::new();
        for k in 0..self.num_elements() {
            for f in 0..4 {
                *face_count.entry(self.face_key(k, f)).or_insert(0) += 1;
            }
        }
        for (key, count) in &face_count {
            if *count > 2 {
                return Err(Error::Mesh(format!(
                    "face with vertices {key:?} is shared by {count} elements"
                )));
            }
        }
        Ok(swapped)
    }

    /// Build a mesh from raw arrays: normalises orientation, validates, and
    /// tags every unshared face (merging any tags supplied by the caller,
    /// whose local-face indices refer to the pre-normalisation ordering).
    pub fn from_raw(
        vertices: Vec<[f64; 3]>,
        tets: Vec<[usize; 4]>,
        tags: Vec<(usize, usize, String)>,
    ) -> Result<Self> {
        let mut mesh = Mesh {
            vertices,
            tets,
            boundary_tag: HashMap::new(),
        };
        let swapped = mesh.normalize_and_validate()?;

        // Swapping vertices 2 and 3 exchanges local faces 0 and 1 and leaves
        // faces 2 and 3 as sets.
        let remap = |k: usize, f: usize| -> usize {
            if swapped[k] && f < 2 {
                1 - f
            } else {
                f
            }
        };

        let mut face_count: HashMap<[usize; 3], usize> = HashMap::new();
        for k in 0..mesh.num_elements() {
            for f in 0..4 {
                *face_count.entry(mesh.face_key(k, f)).or_insert(0) += 1;
            }
        }
        for (k, f, tag) in tags {
            if k >= mesh.num_elements() || f >= 4 {
                return Err(Error::Mesh(format!(
                    "boundary tag targets nonexistent face ({k}, {f})"
                )));
            }
            let f = remap(k, f);
            if face_count[&mesh.face_key(k, f)] != 1 {
                return Err(Error::Mesh(format!(
                    "boundary tag targets interior face ({k}, {f})"
                )));
            }
            mesh.boundary_tag.insert((k, f), tag);
        }
        for k in 0..mesh.num_elements() {
            for f in 0..4 {
                if face_count[&mesh.face_key(k, f)] == 1 {
                    mesh.boundary_tag
                        .entry((k, f))
                        .or_insert_with(|| DEFAULT_BOUNDARY_TAG.to_string());
                }
            }
        }
        Ok(mesh)
    }

    /// Total mesh volume.
    pub fn total_volume(&self) -> f64 {
        (0..self.num_elements())
            .map(|k| Self::signed_volume(&self.element_vertices(k)))
            .sum()
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// All-pairs face matcher: the independent oracle for interior-face
    /// counting used by connectivity tests.
    pub fn brute_force_interior_pairs(mesh: &Mesh) -> Vec<((usize, usize), (usize, usize))> {
        let mut pairs = Vec::new();
        let k = mesh.num_elements();
        for ka in 0..k {
            for fa in 0..4 {
                for kb in (ka + 1)..k {
                    for fb in 0..4 {
                        if mesh.face_key(ka, fa) == mesh.face_key(kb, fb) {
                            pairs.push(((ka, fa), (kb, fb)));
                        }
                    }
                }
            }
        }
        pairs
    }

    /// A two-element mesh sharing one face.
    pub fn two_tet_mesh() -> Mesh {
        let vertices = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
        ];
        let tets = vec![[0, 1, 2, 3], [1, 2, 3, 4]];
        Mesh::from_raw(vertices, tets, Vec::new()).unwrap()
    }
}
