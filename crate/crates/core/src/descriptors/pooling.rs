//! Mask-guided pooling of patch features.

use crate::backends::{BinaryMask, PatchGrid};

use super::DescriptorError;

/// Downsample (or upsample) a mask to the feature grid. A cell is
/// foreground iff at least half of the pixel area it covers is foreground.
///
/// Cells cover equal fractions of the image; when the image size is not a
/// multiple of the grid size, boundary pixels contribute fractionally. The
/// area test is done in exact integer arithmetic.
pub fn resize_mask(mask: &BinaryMask, grid_h: usize, grid_w: usize) -> BinaryMask {
    assert!(grid_h > 0 && grid_w > 0, "grid dimensions must be positive");
    let (h, w) = (mask.height(), mask.width());
    if (h, w) == (grid_h, grid_w) {
        return mask.clone();
    }
    // Scale both axes so pixel and cell boundaries are integers: pixel r
    // spans [r*grid_h, (r+1)*grid_h) and cell i spans [i*h, (i+1)*h).
    let overlaps = |n_px: usize, n_cells: usize, cell: usize| -> Vec<(usize, u64)> {
        let (c0, c1) = (cell * n_px, (cell + 1) * n_px);
        let first = c0 / n_cells;
        let last = (c1 - 1) / n_cells;
        (first..=last)
            .map(|p| {
                let (p0, p1) = (p * n_cells, (p + 1) * n_cells);
                (p, (c1.min(p1) - c0.max(p0)) as u64)
            })
            .collect()
    };
    let row_overlaps: Vec<_> = (0..grid_h).map(|i| overlaps(h, grid_h, i)).collect();
    let col_overlaps: Vec<_> = (0..grid_w).map(|j| overlaps(w, grid_w, j)).collect();
    let cell_area = (h as u64) * (w as u64);

    let mut out = BinaryMask::filled(grid_h, grid_w, false);
    for (i, rows) in row_overlaps.iter().enumerate() {
        for (j, cols) in col_overlaps.iter().enumerate() {
            let mut fg = 0u64;
            for &(r, wy) in rows {
                for &(c, wx) in cols {
                    if mask.get(r, c) {
                        fg += wy * wx;
                    }
                }
            }
            out.set(i, j, 2 * fg >= cell_area);
        }
    }
    out
}

fn masked_mean(grid: &PatchGrid, cells: &BinaryMask, want: bool) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; grid.dim()];
    let mut n = 0usize;
    for i in 0..grid.grid_h() {
        for j in 0..grid.grid_w() {
            if cells.get(i, j) == want {
                for (a, v) in acc.iter_mut().zip(grid.cell(i, j)) {
                    *a += v;
                }
                n += 1;
            }
        }
    }
    (n > 0).then(|| acc.into_iter().map(|a| a / n as f64).collect())
}

fn nonzero(v: Vec<f64>) -> Result<Vec<f64>, DescriptorError> {
    if v.iter().any(|x| *x != 0.0) {
        Ok(v)
    } else {
        Err(DescriptorError::ZeroPrototype)
    }
}

/// Mean embedding over the foreground cells of the resized mask.
pub fn positive_prototype(grid: &PatchGrid, mask: &BinaryMask) -> Result<Vec<f64>, DescriptorError> {
    let cells = resize_mask(mask, grid.grid_h(), grid.grid_w());
    nonzero(masked_mean(grid, &cells, true).ok_or(DescriptorError::EmptyForeground)?)
}

/// Mean embedding over the background cells of the resized mask.
pub fn negative_prototype(grid: &PatchGrid, mask: &BinaryMask) -> Result<Vec<f64>, DescriptorError> {
    let cells = resize_mask(mask, grid.grid_h(), grid.grid_w());
    nonzero(masked_mean(grid, &cells, false).ok_or(DescriptorError::EmptyBackground)?)
}

/// Both prototypes of one sample from a single resized mask.
pub fn sample_prototypes(
    grid: &PatchGrid,
    mask: &BinaryMask,
) -> (Result<Vec<f64>, DescriptorError>, Result<Vec<f64>, DescriptorError>) {
    let cells = resize_mask(mask, grid.grid_h(), grid.grid_w());
    let pos = masked_mean(grid, &cells, true).ok_or(DescriptorError::EmptyForeground).and_then(nonzero);
    let neg = masked_mean(grid, &cells, false).ok_or(DescriptorError::EmptyBackground).and_then(nonzero);
    (pos, neg)
}
