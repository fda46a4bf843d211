//! Raw forward/backward kernels over contiguous slices. Shape checking
//! happens in the graph layer; these functions trust their arguments.

pub mod conv;
pub mod pool;
pub mod resize;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeom, ConvGrads};
