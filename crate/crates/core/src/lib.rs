pub mod linalg;
pub mod lp;
pub mod plant;
pub mod polytope;
pub mod sets;
pub mod qp;
pub mod mpc;
pub mod network;
pub mod closed_loop;
pub mod config;
pub mod experiment;
