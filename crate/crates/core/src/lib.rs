pub mod backend;
pub mod belief;
pub mod eval;
pub mod geometry;
pub mod heatmap;
pub mod heuristics;
pub mod learn;
pub mod par;
pub mod qnet;
pub mod sim;
