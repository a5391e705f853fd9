//! Greedy grouping of elements into flux-gather blocks, maximising the
//! number of face pairs that become block-internal.

use std::collections::HashSet;

use super::FaceConnectivity;

/// A disjoint cover of the elements by blocks of bounded size.
#[derive(Debug, Clone)]
pub struct GatherPartition {
    pub blocks: Vec<Vec<usize>>,
    pub capacity: usize,
    /// Fraction of interior face pairs whose two elements share a block.
    pub interior_ratio: f64,
}

fn ratio(conn: &FaceConnectivity, block_of: &[usize]) -> f64 {
    let total = conn.interior_pairs.len();
    if total == 0 {
        return 1.0;
    }
    let internal = conn
        .interior_pairs
        .iter()
        .filter(|p| block_of[p.minus.0] == block_of[p.plus.0])
        .count();
    internal as f64 / total as f64
}

/// Greedy partition: seed each block with the lowest-index unassigned
/// element, then repeatedly add the unassigned neighbour that turns the
/// most face pairs internal (ties to the lowest element index).
pub fn greedy_partition(
    conn: &FaceConnectivity,
    num_elements: usize,
    capacity: usize,
) -> GatherPartition {
    assert!(capacity >= 1, "block capacity must be positive");
    let adj = conn.neighbors(num_elements);
    let mut assigned = vec![false; num_elements];
    let mut block_of = vec![usize::MAX; num_elements];
    let mut blocks = Vec::new();

    for seed in 0..num_elements {
        if assigned[seed] {
            continue;
        }
        let bid = blocks.len();
        let mut block = vec![seed];
        assigned[seed] = true;
        block_of[seed] = bid;
        while block.len() < capacity {
            // Candidates: unassigned neighbours of any block member.
            let mut candidates: HashSet<usize> = HashSet::new();
            for &m in &block {
                for &n in &adj[m] {
                    if !assigned[n] {
                        candidates.insert(n);
                    }
                }
            }
            if candidates.is_empty() {
                break;
            }
            let mut best: Option<(usize, usize)> = None; // (score, element)
            for &c in &candidates {
                let score = adj[c].iter().filter(|&&n| block_of.get(n) == Some(&bid)).count();
                match best {
                    None => best = Some((score, c)),
                    Some((bs, bc)) => {
                        if score > bs || (score == bs && c < bc) {
                            best = Some((score, c));
                        }
                    }
                }
            }
            let (_, chosen) = best.unwrap();
            assigned[chosen] = true;
            block_of[chosen] = bid;
            block.push(chosen);
        }
        blocks.push(block);
    }

    let interior_ratio = ratio(conn, &block_of);
    GatherPartition {
        blocks,
        capacity,
        interior_ratio,
    }
}

/// Baseline partition: contiguous index-order chunks of size `capacity`.
pub fn contiguous_partition(
    conn: &FaceConnectivity,
    num_elements: usize,
    capacity: usize,
) -> GatherPartition {
    assert!(capacity >= 1, "block capacity must be positive");
    let mut blocks = Vec::new();
    let mut block_of = vec![usize::MAX; num_elements];
    for (bid, chunk) in (0..num_elements).collect::<Vec<_>>().chunks(capacity).enumerate() {
        for &k in chunk {
            block_of[k] = bid;
        }
        blocks.push(chunk.to_vec());
    }
    let interior_ratio = ratio(conn, &block_of);
    GatherPartition {
        blocks,
        capacity,
        interior_ratio,
    }
}
