//! Desk-scale experiment harness on synthetic adapters.

pub mod score;
pub mod sim;
pub mod storage;
pub mod synth;
pub mod timing;
