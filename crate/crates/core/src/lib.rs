//! Surface-aware model-based driving at desk scale.

pub mod dynamics;
pub mod eval;
pub mod gridmap;
pub mod mapper;
pub mod nn;
pub mod planner;
pub mod sim;
pub mod training;
