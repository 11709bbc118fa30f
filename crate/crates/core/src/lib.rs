#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks

pub mod de_engine;
pub mod lambert;
pub mod leg_geometry;
pub mod orbital_core;
pub mod phasing_heuristic;
pub mod pipeline;
pub mod tour_solver;
pub mod trajectory_model;
