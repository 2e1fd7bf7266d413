pub mod band;
pub mod contact;
pub mod controller;
pub mod estimation;
pub mod geometry;
pub mod kinematics;
pub mod planner;
pub mod qp;
pub mod scenario;
pub mod worldsim;
