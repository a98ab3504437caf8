//! Point-cloud numerics: neighborhoods, local frames, density descriptors,
//! distances, suppression and mirror matching.

mod cloud;
mod lrf;
mod neighbors;
mod ops;
pub mod ply;
mod sdv;

pub use cloud::{apply, dist2, normalize_cloud, Point, PointCloud, SymmetryPlane};
pub use lrf::{estimate_lrf, lrf_from_neighbors, LocalReferenceFrame, EIGEN_RATIO_MIN};
pub use neighbors::{knn_all, radius_neighbors, NeighborGrid};
pub use ops::{
    chamfer_distance, geodesic_distances, nms, nms_with_tiebreak, random_rotation, rotation_from_rng,
    symmetric_pairs, GeodesicGraph, GEODESIC_K,
};
pub use sdv::{compute_sdv, sdv_from_neighbors, SdvDescriptor, DEFAULT_GRID, SIGMA_VOXELS, TRUNCATE_SIGMAS};

/// Default neighborhood radius for frames and descriptors.
pub const LRF_RADIUS: f32 = 0.3;
