// `!(x >= 0.0)` is the idiom for "negative or NaN" throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod barm;
pub mod config;
pub mod data;
pub mod evidential;
pub mod filters;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rgde;
pub mod uaed;
