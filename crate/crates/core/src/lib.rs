//! Differentially-private federated learning over wireless IoT links with
//! utility-driven device policies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod fl_core;
pub mod policy;
pub mod privacy;
pub mod report;
pub mod simulator;
pub mod wireless;
