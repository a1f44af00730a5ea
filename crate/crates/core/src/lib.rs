pub mod bev;
pub mod daf;
pub mod fusion;
pub mod model;
pub mod param;
pub mod pipeline;
pub mod geometry;
pub mod harness;
pub mod training;
pub mod tensor;
