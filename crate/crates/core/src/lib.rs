//! Neural architecture search with a recurrent controller trained by
//! policy gradients.

pub mod numeric;
pub mod arch;
pub mod compiler;
pub mod profile;
pub mod controller;
pub mod reinforce;
pub mod child;
pub mod dist;
pub mod report;
pub mod config;
