use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NeighborTable, ParamStore, Real, Var};
use crate::geometry::VoxelGridSpec;
use crate::nn::{Conv, LayerNorm};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlendParams {
    pub conv: Conv,
    pub norm: LayerNorm,
}

impl BlendParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self { conv: Conv::new(store, &format!("{name}.conv"), 27, d, d, false, rng), norm: LayerNorm::new(store, &format!("{name}.norm"), d) }
    }
}

/// 3×3×3 neighbourhoods among `selected` voxels; rows and inputs both index
/// `selected`. Unselected neighbours carry a zero residual and are skipped.
pub fn masked_table(grid: &VoxelGridSpec, selected: &[usize]) -> NeighborTable {
    crate::backbones::submanifold_table(grid, selected)
}

/// Blends residual rows (one per selected voxel) with a submanifold convolution
/// and applies `LayerNorm(F + blended)` at the selected voxels only.
pub fn sparse_blend<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    p: &BlendParams,
    grid: &VoxelGridSpec,
    volume: Var<'g, T>,
    selected: &[usize],
    residual: Var<'g, T>,
) -> Var<'g, T> {
    if selected.is_empty() {
        return volume;
    }
    let table = Rc::new(masked_table(grid, selected));
    let blended = p.conv.forward(g, store, residual, table);
    let idx: Rc<[usize]> = selected.into();
    let updated = p.norm.forward(g, store, volume.gather_rows(idx.clone()).add(blended));
    volume.scatter_rows(idx, updated)
}
