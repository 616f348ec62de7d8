pub mod geodesy;
pub mod model;
pub mod solver;
pub mod features;
pub mod pinet;
pub mod simulate;
pub mod eval;
