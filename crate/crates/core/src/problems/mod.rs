//! Objective definitions: the analytic toy problem, seeded synthetic
//! multi-task datasets, and a convex shared-regression problem.

pub mod convex;
pub mod synthetic;
pub mod toy;

pub use convex::ConvexRegression;
pub use synthetic::{make_synthetic, Dataset, SyntheticProblem, SyntheticSpec, Teacher};
pub use toy::{distance_to_front, toy_front_sample, toy_gradients, toy_grid_front, toy_objectives, ToyFrontPoint, ToyState};
