#![no_std]
extern crate alloc;

pub mod codec;
pub mod crypto;
pub mod duobft;
pub mod messages;
pub mod minbft;
pub mod multichain;
pub mod quorum;
pub mod replica;
pub mod usig;
