mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use elementwise::broadcast_shapes;
pub use shape::softmax_array;
