//! Microblocked degree-of-freedom storage: K_M elements are packed into a
//! microblock which is padded up to an alignment granule; every kernel uses
//! the same index arithmetic to address nodal values.

use crate::mesh::FaceConnectivity;
use crate::refelem::ReferenceElement;

/// Padded element-major storage layout for one scalar field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MicroblockLayout {
    /// Nodes per element.
    pub np: usize,
    /// Elements per microblock.
    pub k_m: usize,
    /// Alignment granule in scalar words.
    pub granule: usize,
    /// Words per microblock: smallest multiple of `granule` >= k_m * np.
    pub padded_size: usize,
}

/// Default alignment granule in scalar words.
pub const DEFAULT_GRANULE: usize = 16;
/// Default upper bound on elements per microblock.
pub const DEFAULT_K_M_MAX: usize = 8;

impl MicroblockLayout {
    /// Choose K_M in 1..=k_m_max minimising the padding fraction
    /// (padded_size - K_M*Np)/padded_size, ties to the smallest K_M.
    pub fn choose(np: usize, granule: usize, k_m_max: usize) -> Self {
        assert!(np >= 1 && granule >= 1 && k_m_max >= 1);
        let mut best: Option<(f64, usize, usize)> = None;
        for k_m in 1..=k_m_max {
            let payload = k_m * np;
            let padded = payload.div_ceil(granule) * granule;
            let frac = (padded - payload) as f64 / padded as f64;
            let better = match best {
                None => true,
                Some((bf, _, _)) => frac < bf,
            };
            if better {
                best = Some((frac, k_m, padded));
            }
        }
        let (_, k_m, padded_size) = best.unwrap();
        MicroblockLayout {
            np,
            k_m,
            granule,
            padded_size,
        }
    }

    /// Padding words per microblock.
    pub fn padding(&self) -> usize {
        self.padded_size - self.k_m * self.np
    }

    /// Microblocks needed to hold `k` elements.
    pub fn num_microblocks(&self, k: usize) -> usize {
        k.div_ceil(self.k_m)
    }

    /// Words per field buffer for `k` elements.
    pub fn total_words(&self, k: usize) -> usize {
        self.num_microblocks(k) * self.padded_size
    }

    /// Word offset of node `i` of element `k`.
    pub fn dof_index(&self, k: usize, i: usize) -> usize {
        assert!(i < self.np, "node index {i} out of range (Np = {})", self.np);
        (k / self.k_m) * self.padded_size + (k % self.k_m) * self.np + i
    }

    /// Whether a word offset addresses padding rather than a stored node
    /// (assuming `k` elements; trailing elements of a partial final
    /// microblock also count as padding).
    pub fn is_padding(&self, word: usize, k: usize) -> bool {
        let within = word % self.padded_size;
        let mb = word / self.padded_size;
        if within >= self.k_m * self.np {
            return true;
        }
        let elem = mb * self.k_m + within / self.np;
        elem >= k
    }
}

/// Word-offset tables for facial trace gathering.
#[derive(Debug, Clone)]
pub struct FaceGatherTables {
    /// Per interior pair (in connectivity order): word offsets of the Nfp
    /// interior-trace nodes and of the geometrically matching Nfp
    /// exterior-trace nodes.
    pub interior: Vec<(Vec<usize>, Vec<usize>)>,
    /// Per boundary face (in connectivity order): interior-trace offsets.
    pub boundary: Vec<Vec<usize>>,
}

/// Build gather tables: traversing slot m of an interior entry touches the
/// same physical point on both sides.
pub fn face_dof_gather_indices(
    layout: &MicroblockLayout,
    refel: &ReferenceElement,
    conn: &FaceConnectivity,
) -> FaceGatherTables {
    let face_offsets = |k: usize, f: usize| -> Vec<usize> {
        refel.face_node_index[f]
            .iter()
            .map(|&i| layout.dof_index(k, i))
            .collect()
    };
    let interior = conn
        .interior_pairs
        .iter()
        .map(|p| {
            let minus = face_offsets(p.minus.0, p.minus.1);
            let plus: Vec<usize> = p
                .node_permutation
                .iter()
                .map(|&n| layout.dof_index(p.plus.0, refel.face_node_index[p.plus.1][n]))
                .collect();
            (minus, plus)
        })
        .collect();
    let boundary = conn
        .boundary_faces
        .iter()
        .map(|b| face_offsets(b.element, b.face))
        .collect();
    FaceGatherTables { interior, boundary }
}
