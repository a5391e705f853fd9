//! Face-to-face connectivity: interior face pairing by sorted vertex
//! triples and facial node correspondence by coordinate matching.

use std::collections::HashMap;

use super::{Mesh, DEFAULT_BOUNDARY_TAG};
use crate::error::{Error, Result};
use crate::refelem::ReferenceElement;

/// One matched interior face.
#[derive(Debug, Clone)]
pub struct InteriorPair {
    /// Owning (element, local face); the lower element index of the two.
    pub minus: (usize, usize),
    /// Neighbouring (element, local face).
    pub plus: (usize, usize),
    /// For the m-th face node of the minus side, `node_permutation[m]` is
    /// the face-node slot on the plus side at the same physical point.
    pub node_permutation: Vec<usize>,
}

/// One unmatched (boundary) face.
#[derive(Debug, Clone)]
pub struct BoundaryFace {
    pub element: usize,
    pub face: usize,
    pub tag: String,
}

/// Complete face connectivity of a mesh.
#[derive(Debug, Clone)]
pub struct FaceConnectivity {
    pub interior_pairs: Vec<InteriorPair>,
    pub boundary_faces: Vec<BoundaryFace>,
}

impl FaceConnectivity {
    /// Element adjacency lists implied by the interior pairs.
    pub fn neighbors(&self, num_elements: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); num_elements];
        for p in &self.interior_pairs {
            adj[p.minus.0].push(p.plus.0);
            adj[p.plus.0].push(p.minus.0);
        }
        adj
    }
}

/// Pair all faces by sorted vertex triple and compute facial node
/// permutations by nearest-coordinate matching.
pub fn build_connectivity(mesh: &Mesh, refel: &ReferenceElement) -> Result<FaceConnectivity> {
    let mut by_key: HashMap<[usize; 3], Vec<(usize, usize)>> = HashMap::new();
    for k in 0..mesh.num_elements() {
        for f in 0..4 {
            by_key.entry(mesh.face_key(k, f)).or_default().push((k, f));
        }
    }

    let mut interior_pairs = Vec::new();
    let mut boundary_faces = Vec::new();
    let mut keys: Vec<&[usize; 3]> = by_key.keys().collect();
    keys.sort_unstable();
    for key in keys {
        let sides = &by_key[key];
        match sides.len() {
            1 => {
                let (k, f) = sides[0];
                let tag = mesh
                    .boundary_tag
                    .get(&(k, f))
                    .cloned()
                    .unwrap_or_else(|| DEFAULT_BOUNDARY_TAG.to_string());
                boundary_faces.push(BoundaryFace { element: k, face: f, tag });
            }
            2 => {
                let (mut a, mut b) = (sides[0], sides[1]);
                if b.0 < a.0 {
                    std::mem::swap(&mut a, &mut b);
                }
                let node_permutation = match_face_nodes(mesh, refel, a, b)?;
                interior_pairs.push(InteriorPair {
                    minus: a,
                    plus: b,
                    node_permutation,
                });
            }
            n => {
                return Err(Error::Mesh(format!(
                    "face {key:?} shared by {n} elements"
                )));
            }
        }
    }
    // Deterministic order: by owning element, then local face.
    interior_pairs.sort_by_key(|p| p.minus);
    boundary_faces.sort_by_key(|b| (b.element, b.face));
    Ok(FaceConnectivity {
        interior_pairs,
        boundary_faces,
    })
}

fn match_face_nodes(
    mesh: &Mesh,
    refel: &ReferenceElement,
    minus: (usize, usize),
    plus: (usize, usize),
) -> Result<Vec<usize>> {
    let tol = 1e-8 * mesh.element_diameter(minus.0);
    let map_face = |(k, f): (usize, usize)| -> Vec<[f64; 3]> {
        refel.face_node_index[f]
            .iter()
            .map(|&i| mesh.map_reference_point(k, refel.nodes[i]))
            .collect()
    };
    let pm = map_face(minus);
    let pp = map_face(plus);
    let nfp = refel.nfp;
    let mut perm = vec![usize::MAX; nfp];
    let mut used = vec![false; nfp];
    for (m, a) in pm.iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        for (n, b) in pp.iter().enumerate() {
            let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            if d2 < best.0 {
                best = (d2, n);
            }
        }
        if best.0.sqrt() > tol || used[best.1] {
            return Err(Error::Mesh(format!(
                "cannot match face nodes between elements {} and {}: \
                 nearest distance {:.3e} (tolerance {tol:.3e})",
                minus.0,
                plus.0,
                best.0.sqrt()
            )));
        }
        used[best.1] = true;
        perm[m] = best.1;
    }
    Ok(perm)
}
