//! KAM tori for Hamiltonian lattices whose normal frequencies accumulate at a
//! finite point: spectral BBM and gPC models, Birkhoff normal forms,
//! homological solvers, parameter excision and verification.

pub mod birkhoff;
pub mod homology;
pub mod kam;
pub mod lattice;
pub mod melnikov;
pub mod model;
pub mod norms;
pub mod poly;
pub mod scalar;
pub mod verify;

pub use lattice::Lattice;
pub use poly::{Caps, HamiltonianPoly, LieOptions, Monomial, PhasePoint};
pub use scalar::{Cx, Real};

pub type PolyF64 = HamiltonianPoly<f64>;
pub type PolyF32 = HamiltonianPoly<f32>;
