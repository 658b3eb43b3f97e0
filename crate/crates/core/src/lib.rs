//! Gradient preconditioning: curvature matrices, compact representations,
//! solvers, and a unified gradient-maker interface over small MLPs.

pub mod curvature;
pub mod gradient_maker;
pub mod linalg;
pub mod network;
pub mod representation;
pub mod solvers;
