//! Volume and mask substrate: storage, file I/O, smoothing, decimation,
//! interpolation and rigid warping.

mod filter;
mod grid;
mod io;
mod transform;
mod warp;

pub use filter::{downsample, gaussian_kernel, gaussian_smooth};
pub use grid::{Dims, Mask, Volume};
pub use io::{load_volume, save_volume};
pub use transform::{
    euler_from_matrix, normalize_angle, rotation_matrix, Mat3, RigidTransform,
};
pub use warp::{apply_rigid, tricubic_sample, trilinear_sample, Interpolation};

pub(crate) use grid::ensure_same_dims;
pub(crate) use io::{payload_names, read_bytes, sibling, write_bytes, RawHeader, ORDER_X_FASTEST};
