//! Z-order (Morton) serialization of voxel keys.

use crate::error::{Error, Result};
use crate::geometry::VoxelKey;

const AXIS_BITS: u32 = 21;
const AXIS_LIMIT: i64 = 1 << AXIS_BITS;

/// Spreads the low 21 bits of `v` so that bit `i` lands on bit `3i`.
fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// 63-bit Morton code; per level the bits are interleaved as z, y, x with
/// x least significant. Each axis must lie in `[0, 2^21)`.
pub fn morton_code(key: VoxelKey) -> Result<u64> {
    for (axis, v) in [("x", key.x), ("y", key.y), ("z", key.z)] {
        if !(0..AXIS_LIMIT).contains(&v) {
            return Err(Error::Range(format!("voxel {axis} index {v} outside [0, 2^21)")));
        }
    }
    Ok(spread_bits(key.x as u64) | (spread_bits(key.y as u64) << 1) | (spread_bits(key.z as u64) << 2))
}

/// Offsets keys by their per-axis minimum and returns the Morton codes.
fn shifted_codes(keys: &[VoxelKey]) -> Result<Vec<u64>> {
    let min = keys.iter().fold(
        VoxelKey::new(i64::MAX, i64::MAX, i64::MAX),
        |m, k| VoxelKey::new(m.x.min(k.x), m.y.min(k.y), m.z.min(k.z)),
    );
    keys.iter()
        .map(|k| morton_code(VoxelKey::new(k.x - min.x, k.y - min.y, k.z - min.z)))
        .collect()
}

/// Point order ascending by Morton code, keys first offset to be
/// non-negative; ties keep the original point order.
pub fn morton_order(keys: &[VoxelKey]) -> Result<Vec<usize>> {
    let codes = shifted_codes(keys)?;
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| (codes[i], i));
    Ok(order)
}

/// Morton order of points on a grid of `grid_size`, with points that
/// share a cell ordered by their exact coordinates before falling back to
/// the original index. The result depends only on the coordinate multiset
/// (up to exact duplicates), so permuting the input permutes the output
/// consistently.
pub fn serialize(coords: &[[f64; 3]], grid_size: f64) -> Result<Vec<usize>> {
    let keys = crate::geometry::voxel_keys(coords, grid_size)?;
    let codes = shifted_codes(&keys)?;
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by(|&a, &b| {
        codes[a]
            .cmp(&codes[b])
            .then_with(|| {
                let (pa, pb) = (coords[a], coords[b]);
                pa[0].total_cmp(&pb[0])
                    .then(pa[1].total_cmp(&pb[1]))
                    .then(pa[2].total_cmp(&pb[2]))
            })
            .then(a.cmp(&b))
    });
    Ok(order)
}
