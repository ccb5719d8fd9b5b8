pub mod autograd;
pub mod nets;
pub mod homography;
pub mod envs;
pub mod advantage;
pub mod focops;
pub mod safety;
pub mod trainer;
pub mod dynbench;
pub mod cli;
