#![no_std]
extern crate alloc;

pub mod env;
pub mod exec;
pub mod harness;
pub mod math;
pub mod motion;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod stats;
pub mod traversal;
pub mod vpr;
