//! Differentially private GAN training laboratory.

pub mod grad_engine;
pub mod dp_optim;
pub mod rng;
pub mod accountant;
pub mod checkpoint;
pub mod gan;
pub mod data;
pub mod evaluation;
pub mod harness;
