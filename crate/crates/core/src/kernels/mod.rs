pub mod conv;
pub mod matmul;
pub mod norm;
pub mod sample;
