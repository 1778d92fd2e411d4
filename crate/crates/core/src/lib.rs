//! Market clearing for storage with cycle-based degradation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dispatch;
pub mod equilibrium;
pub mod qp;
pub mod rainflow;
pub mod scenario;
pub mod selftest;
pub mod settlement;
pub mod storage;
