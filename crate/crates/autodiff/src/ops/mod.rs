pub mod elementwise;
pub mod matmul;
pub mod nn;
pub mod reduce;
pub mod shape;
