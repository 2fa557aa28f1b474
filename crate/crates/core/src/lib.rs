#![no_std]
extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod forward;
pub mod grpo;
pub mod layout;
pub mod math;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod synthdata;
pub mod rewards;
pub mod rng;
pub mod tokenizer;
