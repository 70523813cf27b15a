//! Adjacency graphs, Moran's I and the intrinsic CAR smoother.

mod car;
mod graph;
mod moran;

pub use car::{
    car_smooth, joint_objective, solve_phi, CarConfig, CarFit, CarMethod, CarSmoother, SlotResiduals, SpatialField,
};
pub use graph::{build_graph, AdjacencyGraph, GraphInput, GraphWarning};
pub use moran::{morans_i, morans_i_partial, MoranMethod, MoranResult};
