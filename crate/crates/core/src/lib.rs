#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod cone;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod problem;
pub mod registry;
pub mod report;
pub mod solver;
pub mod solver_fd;
pub mod solver_radial;
pub mod symfunc;
pub mod transform;
pub mod verify;
