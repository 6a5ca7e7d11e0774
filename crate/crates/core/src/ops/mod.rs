//! Deterministic dense-tensor kernels with paired adjoints.

pub mod conv;
pub mod distribution;
pub mod elementwise;
pub mod peaks;
pub mod pool;
pub mod shift;
pub mod window;

pub use conv::{conv2d, conv2d_backward, conv2d_strided, Padding};
pub use distribution::{normalize_distribution, normalize_distribution_backward};
pub use elementwise::{add, broadcast_add, broadcast_add_backward, mul, mul_backward, relu, relu_backward, sigmoid};
pub use peaks::{local_maxima, topk_local_peaks, topk_peaks};
pub use pool::{avg_pool, avg_pool_backward, max_pool, max_pool_backward, max_pool_with_indices};
pub use shift::{circular_shift, circular_shift_backward};
pub use window::{hanning1d, hanning2d};
