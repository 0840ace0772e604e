pub mod acoustics;
pub mod baselines;
pub mod embodiment;
pub mod grid;
pub mod harness;
pub mod policy;
pub mod renderer;
pub mod rewards;
pub mod rng;
pub mod world;
