//! Order-N reference tetrahedron: interpolation nodes, Lagrange-basis
//! operators (mass, stiffness, differentiation, face mass), and the lifting
//! matrix that carries facial flux data back into the volume.

mod jacobi;
mod matrices;
mod nodes;

pub use matrices::{
    reference_face_area, Axis, ReferenceElement, FACE_VERTICES, NUM_FACES,
};
pub use nodes::{face_node_count, interpolation_nodes, node_count, MAX_ORDER};
