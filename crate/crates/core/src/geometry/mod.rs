//! Point-cloud spatial structure: voxel binning, Morton serialization for
//! patch partitioning, stencil neighbor indexing, and synthetic scenes.

mod cloud;
mod morton;
mod neighbors;
mod partition;
mod scene;
mod voxel;

pub use cloud::PointCloud;
pub use morton::{morton_code, morton_order, serialize};
pub use neighbors::{build_neighbor_index, NeighborIndex};
pub use partition::{partition, PatchPartition};
pub use scene::{estimate_normals, generate_scene, Primitive, SceneClass, SceneSpec, SCENE_CHANNELS};
pub use voxel::{voxel_keys, voxelize, VoxelKey};
