// Negated comparisons are used deliberately so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod motion;
pub mod neural;
pub mod parallel;
pub mod simulator;
pub mod uncertainty;
