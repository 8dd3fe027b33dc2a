//! Motion capture I/O and the gesture feature representation.

pub mod bvh;
pub mod process;
pub mod rotation;

pub use bvh::{parse_bvh, write_bvh, Bvh, Channel, Joint, Skeleton};
pub use process::{
    bvh_to_expmap, gesture_from_bvh, gesture_to_bvh, integrate_root, resample_fps, root_velocities,
    segment_clips, ClipPair, Standardizer, ROOT_CHANNELS,
};
pub use rotation::{euler_to_matrix, from_expmap, matrix_to_euler, to_expmap, Axis, RotationOrder};
