//! Window partitioning, cyclic shifts, shift masks and relative-position
//! indices. Token grids are row-major `[side, side, dim]`; a batch of grids
//! is stacked along the leading axis.

use super::ModelError;
use crate::tensor::Tensor;

/// Additive mask value for token pairs that must not attend.
pub const MASK_VALUE: f64 = -1e4;

fn check_divides(side: usize, window: usize) -> Result<(), ModelError> {
    if window == 0 || side % window != 0 {
        return Err(ModelError::Window { side, window });
    }
    Ok(())
}

/// Gather map from window-major rows to grid rows for `batch` stacked grids,
/// with the grid first rolled by `-shift` on both axes. Row `r` of the
/// partitioned layout reads grid row `index[r]`.
pub fn partition_index(side: usize, window: usize, shift: usize, batch: usize) -> Result<Vec<usize>, ModelError> {
    check_divides(side, window)?;
    let per = side / window;
    let mut idx = Vec::with_capacity(batch * side * side);
    for b in 0..batch {
        for wy in 0..per {
            for wx in 0..per {
                for iy in 0..window {
                    for ix in 0..window {
                        let y = (wy * window + iy + shift) % side;
                        let x = (wx * window + ix + shift) % side;
                        idx.push(b * side * side + y * side + x);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of a permutation.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn grid_dims(t: &Tensor) -> Result<(usize, usize), ModelError> {
    match t.shape() {
        &[s, s2, d] if s == s2 => Ok((s, d)),
        other => Err(ModelError::Shape(format!("expected a square [S, S, D] grid, got {other:?}"))),
    }
}

/// `[S, S, D]` to `[(S/M)^2, M*M, D]`.
pub fn window_partition(grid: &Tensor, window: usize) -> Result<Tensor, ModelError> {
    let (side, dim) = grid_dims(grid)?;
    let idx = partition_index(side, window, 0, 1)?;
    let flat = grid.reshape(&[side * side, dim])?;
    let n = (side / window).pow(2);
    Ok(flat.gather_rows(&idx)?.reshape(&[n, window * window, dim])?)
}

/// `[(S/M)^2, M*M, D]` back to `[S, S, D]`.
pub fn window_reverse(windows: &Tensor, side: usize) -> Result<Tensor, ModelError> {
    let (n, mm, dim) = match windows.shape() {
        &[n, mm, d] => (n, mm, d),
        other => return Err(ModelError::Shape(format!("expected [windows, M*M, D], got {other:?}"))),
    };
    let window = (mm as f64).sqrt().round() as usize;
    if window * window != mm || n * mm != side * side {
        return Err(ModelError::Shape(format!("{n} windows of {mm} tokens cannot tile a {side}x{side} grid")));
    }
    let inv = invert(&partition_index(side, window, 0, 1)?);
    let flat = windows.reshape(&[n * mm, dim])?;
    Ok(flat.gather_rows(&inv)?.reshape(&[side, side, dim])?)
}

/// Toroidal roll: output `(y, x)` takes input `((y + offset) mod S, (x + offset) mod S)`,
/// so a positive offset moves tokens towards the origin. `cyclic_shift(x, -k)`
/// undoes `cyclic_shift(x, k)`.
pub fn cyclic_shift(grid: &Tensor, offset: isize) -> Result<Tensor, ModelError> {
    let (side, dim) = grid_dims(grid)?;
    if offset.unsigned_abs() >= side {
        return Err(ModelError::Shape(format!("shift {offset} not below grid side {side}")));
    }
    let s = offset.rem_euclid(side as isize) as usize;
    let idx: Vec<usize> = (0..side * side)
        .map(|i| ((i / side + s) % side) * side + (i % side + s) % side)
        .collect();
    Ok(grid.reshape(&[side * side, dim])?.gather_rows(&idx)?.reshape(&[side, side, dim])?)
}

/// Additive attention mask for shifted windows, `[(S/M)^2, M*M, M*M]`.
/// After the roll the grid holds up to three bands per axis that were not
/// adjacent before it; token pairs from different bands get [`MASK_VALUE`].
pub fn shift_mask(side: usize, window: usize, shift: usize) -> Result<Tensor, ModelError> {
    check_divides(side, window)?;
    let band = |c: usize| -> usize {
        if c < side - window {
            0
        } else if c < side - shift {
            1
        } else {
            2
        }
    };
    let per = side / window;
    let mm = window * window;
    let mut data = Vec::with_capacity(per * per * mm * mm);
    for wy in 0..per {
        for wx in 0..per {
            let region: Vec<usize> = (0..mm)
                .map(|i| {
                    let (y, x) = (wy * window + i / window, wx * window + i % window);
                    band(y) * 3 + band(x)
                })
                .collect();
            for &ri in &region {
                for &rj in &region {
                    data.push(if shift > 0 && ri != rj { MASK_VALUE } else { 0.0 });
                }
            }
        }
    }
    Ok(Tensor::new(&[per * per, mm, mm], data)?)
}

/// Index into the `(2M-1)^2`-row bias table for every (query, key) pair of
/// an `M x M` window, row-major over queries then keys.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let mm = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(mm * mm);
    for q in 0..mm {
        for k in 0..mm {
            let dy = q / window + window - 1 - k / window;
            let dx = q % window + window - 1 - k % window;
            idx.push(dy * span + dx);
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(side: usize, dim: usize) -> Tensor {
        Tensor::from_fn(&[side, side, dim], |i| i as f64)
    }

    #[test]
    fn four_windows_on_a_four_grid() {
        let g = grid(4, 1);
        let w = window_partition(&g, 2).unwrap();
        assert_eq!(w.shape(), &[4, 4, 1]);
        // first window is the top-left 2x2 block
        assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(window_reverse(&w, 4).unwrap(), g);
    }

    #[test]
    fn single_window_is_the_grid() {
        let g = grid(3, 2);
        let w = window_partition(&g, 3).unwrap();
        assert_eq!(w.data(), g.data());
    }

    #[test]
    fn indivisible_window_rejected() {
        assert!(matches!(window_partition(&grid(6, 1), 4), Err(ModelError::Window { .. })));
    }

    #[test]
    fn swin_layout_has_64_windows() {
        let w = window_partition(&grid(56, 1), 7).unwrap();
        assert_eq!(w.shape()[0], 64);
    }

    #[test]
    fn shift_moves_origin_to_far_corner() {
        let g = grid(4, 1);
        let s = cyclic_shift(&g, 1).unwrap();
        // original (0,0) value 0 now sits at (3,3)
        assert_eq!(s.data()[3 * 4 + 3], 0.0);
        assert_eq!(cyclic_shift(&s, -1).unwrap(), g);
        assert_eq!(cyclic_shift(&g, 0).unwrap(), g);
    }

    #[test]
    fn mask_blocks_wrapped_pairs_only() {
        let m = shift_mask(4, 2, 1).unwrap();
        // window 0 lies entirely in band (0, 0)
        assert!(m.data()[..16].iter().all(|&v| v == 0.0));
        // last window mixes bands 1 and 2 on both axes
        let last = &m.data()[3 * 16..];
        assert!(last.iter().any(|&v| v == MASK_VALUE));
        assert!((0..4).all(|i| last[i * 4 + i] == 0.0));
        assert!(shift_mask(4, 2, 0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_index_is_centered() {
        let idx = relative_position_index(2);
        // same token -> offset (0,0) -> center row (M-1)*(2M-1) + (M-1)
        assert_eq!(idx[0], 4);
        assert!(idx.iter().all(|&i| i < 9));
        assert_eq!(relative_position_index(7).len(), 49 * 49);
    }
}
