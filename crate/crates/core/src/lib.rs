#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_report;
pub mod config;
pub mod flow_sim;
pub mod homoclinic;
pub mod manifolds;
pub mod orbit_tools;
pub mod phase;
pub mod return_map;
pub mod roots;
