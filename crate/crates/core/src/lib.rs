pub mod boundary;
pub mod current;
pub mod diagnostics;
pub mod energy;
pub mod error;
pub mod expr;
pub mod mesh;
pub mod solver;
pub mod scenario;
