//! Square-grid helpers shared by the localization, segmentation and blending code.

/// Nearest-neighbour resampling of a row-major `from`×`from` grid to `to`×`to`.
/// Each output cell samples the input cell containing its center.
pub fn resample_nearest<T: Copy>(grid: &[T], from: usize, to: usize) -> Vec<T> {
    debug_assert_eq!(grid.len(), from * from);
    if from == to {
        return grid.to_vec();
    }
    let src = |d: usize| ((2 * d + 1) * from / (2 * to)).min(from - 1);
    let mut out = Vec::with_capacity(to * to);
    for y in 0..to {
        let sy = src(y);
        for x in 0..to {
            out.push(grid[sy * from + src(x)]);
        }
    }
    out
}

/// Mean pooling of a `from`×`from` grid by an integer factor.
pub fn mean_pool(grid: &[f64], from: usize, to: usize) -> Vec<f64> {
    debug_assert_eq!(from % to, 0);
    let f = from / to;
    let mut out = vec![0.0; to * to];
    for y in 0..from {
        for x in 0..from {
            out[(y / f) * to + x / f] += grid[y * from + x];
        }
    }
    let area = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    out
}

/// Integer square root for grid sizes; `None` when `n` is not a perfect square.
pub fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_replicates_blocks() {
        let g = [1, 2, 3, 4];
        assert_eq!(
            resample_nearest(&g, 2, 4),
            vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
        );
    }

    #[test]
    fn downsampling_then_upsampling_blocks_is_identity() {
        let g: Vec<u32> = resample_nearest(&[7, 8, 9, 10], 2, 8);
        assert_eq!(resample_nearest(&g, 8, 2), vec![7, 8, 9, 10]);
    }

    #[test]
    fn pooling_averages() {
        let g = [1.0, 3.0, 5.0, 7.0];
        assert_eq!(mean_pool(&g, 2, 1), vec![4.0]);
    }
}
