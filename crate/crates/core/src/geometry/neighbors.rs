use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{voxel_keys, VoxelKey};

const EMPTY: u32 = u32::MAX;

/// For every point and every offset of a `k x k x k` voxel stencil, the
/// points whose voxel equals the point's voxel plus that offset.
///
/// Offsets are indexed `(dx+h)·k² + (dy+h)·k + (dz+h)` with `h = k/2`,
/// so the centre is `k³/2` and the opposite of offset `o` is `k³-1-o`.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    k: usize,
    voxel_size: f64,
    voxels: Vec<Vec<usize>>,
    /// `n * k³` voxel ids, `EMPTY` where the stencil voxel is unoccupied.
    slots: Vec<u32>,
}

impl NeighborIndex {
    pub fn build(coords: &[[f64; 3]], voxel_size: f64, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Argument(format!("stencil size must be odd, got {k}")));
        }
        let keys = voxel_keys(coords, voxel_size)?;
        let mut ids: BTreeMap<VoxelKey, u32> = BTreeMap::new();
        let mut voxels: Vec<Vec<usize>> = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            let id = *ids.entry(*key).or_insert_with(|| {
                voxels.push(Vec::new());
                (voxels.len() - 1) as u32
            });
            voxels[id as usize].push(i);
        }
        let offsets: Vec<[i64; 3]> = (0..k * k * k).map(|o| offset_of(o, k)).collect();
        let mut slots = Vec::with_capacity(keys.len() * offsets.len());
        for key in &keys {
            for d in &offsets {
                slots.push(ids.get(&key.offset(*d)).copied().unwrap_or(EMPTY));
            }
        }
        Ok(Self { k, voxel_size, voxels, slots })
    }

    pub fn len(&self) -> usize {
        self.slots.len() / self.num_offsets()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn num_offsets(&self) -> usize {
        self.k * self.k * self.k
    }

    pub fn num_voxels(&self) -> usize {
        self.voxels.len()
    }

    pub fn center(&self) -> usize {
        self.num_offsets() / 2
    }

    pub fn offset(&self, o: usize) -> [i64; 3] {
        offset_of(o, self.k)
    }

    pub fn offset_index(&self, d: [i64; 3]) -> Option<usize> {
        let h = (self.k / 2) as i64;
        if d.iter().any(|c| c.abs() > h) {
            return None;
        }
        let k = self.k as i64;
        Some((((d[0] + h) * k + (d[1] + h)) * k + (d[2] + h)) as usize)
    }

    pub fn opposite(&self, o: usize) -> usize {
        self.num_offsets() - 1 - o
    }

    /// Points in the voxel at stencil offset `o` from point `i`'s voxel.
    pub fn neighbors(&self, i: usize, o: usize) -> &[usize] {
        match self.slots[i * self.num_offsets() + o] {
            EMPTY => &[],
            id => &self.voxels[id as usize],
        }
    }
}

fn offset_of(o: usize, k: usize) -> [i64; 3] {
    let h = (k / 2) as i64;
    let (dx, rest) = (o / (k * k), o % (k * k));
    [dx as i64 - h, (rest / k) as i64 - h, (rest % k) as i64 - h]
}

pub fn build_neighbor_index(cloud: &crate::geometry::PointCloud, voxel_size: f64, k: usize) -> Result<NeighborIndex> {
    NeighborIndex::build(cloud.coords(), voxel_size, k)
}
