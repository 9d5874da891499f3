//! Horizontal occupancy slices and entropy-mask overlays as PNG files.
//!
//! One pixel per voxel, scaled by `cell`; image rows follow the grid's
//! first axis (ego x) and columns its second (ego y). Category colours are
//! [`CATEGORY_COLORS`] scaled to 8 bits, empty is black. Mask overlays paint
//! selected voxels white on [`MASK_OFF`].

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::model::{argmax_labels, ModelPlan};
use super::train::{forward_seed, EVAL_EPOCH};
use crate::autograd::{Graph, Real};
use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::synthdata::{SceneSample, CATEGORY_COLORS};

pub const MASK_ON: [u8; 3] = [255, 255, 255];
pub const MASK_OFF: [u8; 3] = [48, 48, 48];

pub fn category_rgb(label: u8) -> [u8; 3] {
    CATEGORY_COLORS[label as usize].map(|c| (c * 255.0).round() as u8)
}

fn paint(grid: &VoxelGridSpec, z: usize, cell: usize, color: impl Fn(usize) -> [u8; 3]) -> RgbImage {
    let [h, w, _] = grid.dims;
    let cell = cell.max(1);
    RgbImage::from_fn((w * cell) as u32, (h * cell) as u32, |x, y| {
        let idx = grid.linear([y as usize / cell, x as usize / cell, z]);
        Rgb(color(idx))
    })
}

/// Labels of slice `z`.
pub fn label_slice(grid: &VoxelGridSpec, labels: &[u8], z: usize, cell: usize) -> RgbImage {
    paint(grid, z, cell, |i| category_rgb(labels[i]))
}

/// Voxels of slice `z` listed in `selected` (coarse-grid indices).
pub fn mask_slice(grid: &VoxelGridSpec, selected: &[usize], z: usize, cell: usize) -> RgbImage {
    let mut on = vec![false; grid.num_voxels()];
    for &v in selected {
        on[v] = true;
    }
    paint(grid, z, cell, |i| if on[i] { MASK_ON } else { MASK_OFF })
}

/// Slice with the most occupied voxels, lowest index on ties.
pub fn busiest_slice(grid: &VoxelGridSpec, labels: &[u8]) -> usize {
    let [h, w, zn] = grid.dims;
    let count = |z: usize| (0..h * w).filter(|&hw| labels[hw * zn + z] != 0).count();
    (0..zn).fold(0, |best, z| if count(z) > count(best) { z } else { best })
}

fn save(img: &RgbImage, path: PathBuf, files: &mut Vec<PathBuf>) -> Result<()> {
    img.save_with_format(&path, image::ImageFormat::Png).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    files.push(path);
    Ok(())
}

/// Writes ground-truth and prediction slices of the last frame of `frames`,
/// plus one overlay per fusion layer and attention variant. `z` indexes the
/// fine grid and defaults to [`busiest_slice`].
pub fn render_sample<T: Real>(ck: &Checkpoint<T>, frames: &[SceneSample], sample: usize, z: Option<usize>, cell: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let target = frames.last().ok_or_else(|| Error::invalid("empty sequence"))?;
    let cfg = &ck.header.config;
    let eff = cfg.effective();
    let fine = cfg.data.grid()?;
    if target.gt.grid != fine {
        return Err(Error::invalid("sample grid does not match the checkpoint's grid"));
    }
    let z = z.unwrap_or_else(|| busiest_slice(&fine, &target.gt.labels));
    if z >= fine.dims[2] {
        return Err(Error::invalid(format!("slice {z} outside the grid's {} levels", fine.dims[2])));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    save(&label_slice(&fine, &target.gt.labels, z, cell), out.join(format!("gt_z{z:02}.png")), &mut files)?;
    match ck.header.kind {
        CheckpointKind::Oracle => save(&label_slice(&fine, &target.gt.labels, z, cell), out.join(format!("pred_z{z:02}.png")), &mut files)?,
        CheckpointKind::Model => {
            let model = ck.header.model.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no model".into()))?;
            let plan = ModelPlan::<T>::new(&eff)?;
            let g = Graph::inference();
            let fwd = model.forward(&g, &ck.params, &plan, &eff, frames, forward_seed(&eff, EVAL_EPOCH, sample))?;
            let pred = argmax_labels(&fwd.logits.value());
            save(&label_slice(&fine, &pred, z, cell), out.join(format!("pred_z{z:02}.png")), &mut files)?;
            let zc = z / cfg.model.upsample;
            let coarse_cell = cell * cfg.model.upsample;
            for (l, rec) in fwd.current().iter().enumerate() {
                for (name, mask) in [("gsca", &rec.mask_g), ("ssca", &rec.mask_s)] {
                    if let Some(m) = mask {
                        save(&mask_slice(&plan.coarse, &m.selected, zc, coarse_cell), out.join(format!("mask_l{l}_{name}_z{zc:02}.png")), &mut files)?;
                    }
                }
            }
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::ParamStore;
    use crate::fusion::selection_count;
    use crate::synthdata::generate_sequence;
    use crate::trainer::{Model, RunConfig};

    fn on_cells(img: &RgbImage, cell: usize) -> usize {
        img.pixels().filter(|p| p.0 == MASK_ON).count() / (cell * cell)
    }

    #[test]
    fn empty_slice_is_uniform_background() {
        let grid = VoxelGridSpec::new([6, 5, 3], 0.5, [0.0; 3]).unwrap();
        let img = label_slice(&grid, &vec![0; grid.num_voxels()], 1, 3);
        assert_eq!(img.dimensions(), (15, 18));
        assert!(img.pixels().all(|p| p.0 == category_rgb(0)));
    }

    #[test]
    fn overlays_mark_exactly_the_selected_voxels() {
        let mut cfg = RunConfig::tiny();
        cfg.data.sequence_length = 1;
        let eff = cfg.effective();
        let frames = generate_sequence(&eff.data.scene_spec(3).unwrap()).unwrap();
        let plan = ModelPlan::<f32>::new(&eff).unwrap();
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &eff, &mut ChaCha8Rng::seed_from_u64(1));
        let g = Graph::inference();
        let fwd = model.forward(&g, &store, &plan, &eff, &frames, 0).unwrap();
        let coarse = &plan.coarse;
        let k = selection_count(eff.fusion.k_percent, coarse.num_voxels());
        for rec in fwd.current() {
            for m in [&rec.mask_g, &rec.mask_s].into_iter().flatten() {
                let per_slice: Vec<usize> = (0..coarse.dims[2]).map(|z| on_cells(&mask_slice(coarse, &m.selected, z, 2), 2)).collect();
                assert_eq!(per_slice.iter().sum::<usize>(), k);
                for (z, &n) in per_slice.iter().enumerate() {
                    assert_eq!(n, m.selected.iter().filter(|&&v| v % coarse.dims[2] == z).count());
                }
            }
        }
    }

    #[test]
    fn oracle_prediction_equals_ground_truth_pixelwise() {
        let cfg = RunConfig::tiny();
        let frames = generate_sequence(&cfg.data.scene_spec(cfg.data.sequence_seed(0)).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = render_sample(&Checkpoint::<f32>::oracle(&cfg), &frames, 0, None, 4, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let (gt, pred) = (image::open(&files[0]).unwrap().to_rgb8(), image::open(&files[1]).unwrap().to_rgb8());
        assert_eq!(gt, pred);
        let z = busiest_slice(&frames[0].gt.grid, &frames.last().unwrap().gt.labels);
        assert_eq!(files[0].file_name().unwrap().to_string_lossy(), format!("gt_z{z:02}.png"));
        assert!(render_sample(&Checkpoint::<f32>::oracle(&cfg), &frames, 0, Some(99), 4, dir.path()).is_err());
    }
}
