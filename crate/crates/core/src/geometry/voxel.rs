use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Signed voxel indices: `floor(coord / voxel_size)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub x: i64,
    pub y: i64,
    pub z: i64,
}

impl VoxelKey {
    pub fn new(x: i64, y: i64, z: i64) -> Self {
        Self { x, y, z }
    }

    pub fn of(p: &[f64; 3], voxel_size: f64) -> Self {
        Self {
            x: (p[0] / voxel_size).floor() as i64,
            y: (p[1] / voxel_size).floor() as i64,
            z: (p[2] / voxel_size).floor() as i64,
        }
    }

    pub fn offset(self, d: [i64; 3]) -> Self {
        Self { x: self.x + d[0], y: self.y + d[1], z: self.z + d[2] }
    }
}

fn check_size(voxel_size: f64) -> Result<()> {
    if voxel_size > 0.0 && voxel_size.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("voxel size must be positive, got {voxel_size}")))
    }
}

pub fn voxel_keys(coords: &[[f64; 3]], voxel_size: f64) -> Result<Vec<VoxelKey>> {
    check_size(voxel_size)?;
    Ok(coords.iter().map(|p| VoxelKey::of(p, voxel_size)).collect())
}

/// Buckets every point into its voxel. Index lists are ascending.
pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<BTreeMap<VoxelKey, Vec<usize>>> {
    let mut map: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
    for (i, key) in voxel_keys(cloud.coords(), voxel_size)?.into_iter().enumerate() {
        map.entry(key).or_default().push(i);
    }
    Ok(map)
}
