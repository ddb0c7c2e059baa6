use crate::error::{Error, Result};
use crate::geometry::cloud::is_permutation;

/// Serialized point order chunked into patches of `patch_size` slots.
/// Only the final patch may hold padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPartition {
    pub order: Vec<usize>,
    pub patch_size: usize,
    pub num_patches: usize,
    /// One flag per slot (`num_patches * patch_size`); true for padding.
    pub pad_mask: Vec<bool>,
}

impl PatchPartition {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Real point indices of each patch, in serialized order.
    pub fn patches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.patch_size)
    }

    /// Patch id of every point, indexed by original point index.
    pub fn patch_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.order.len()];
        for (slot, &i) in self.order.iter().enumerate() {
            out[i] = slot / self.patch_size;
        }
        out
    }

    pub fn padded_slots(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| p).count()
    }
}

pub fn partition(order: Vec<usize>, n: usize, patch_size: usize) -> Result<PatchPartition> {
    if patch_size == 0 {
        return Err(Error::Argument("patch size must be at least 1".into()));
    }
    if !is_permutation(&order, n) {
        return Err(Error::contract(format!("order is not a permutation of 0..{n}")));
    }
    let num_patches = n.div_ceil(patch_size);
    let pad_mask = (0..num_patches * patch_size).map(|slot| slot >= n).collect();
    Ok(PatchPartition { order, patch_size, num_patches, pad_mask })
}
