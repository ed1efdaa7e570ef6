//! Slice windows and square grid packing.

use crate::numerics::Tensor;

use super::{DataError, FusionMode, Modality, ScanRecord, Volume};

/// A packed `(√k·H) × (√k·W) × C` image with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub case_id: String,
    pub window_start: usize,
    pub k: usize,
}

impl GridSample {
    pub fn channels(&self) -> usize {
        self.image.shape()[2]
    }

    /// Grid side in cells, `√k`.
    pub fn side(&self) -> usize {
        integer_sqrt(self.k)
    }

    /// Per-slice extents `(H, W)`.
    pub fn slice_extents(&self) -> (usize, usize) {
        let s = self.side();
        (self.image.shape()[0] / s, self.image.shape()[1] / s)
    }
}

fn integer_sqrt(k: usize) -> usize {
    let mut r = (k as f64).sqrt() as usize;
    while r * r > k {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= k {
        r += 1;
    }
    r
}

pub fn is_perfect_square(k: usize) -> bool {
    k > 0 && integer_sqrt(k).pow(2) == k
}

/// Start indices of every `k`-slice window at the given stride.
///
/// Starts run `0, stride, 2·stride, …` up to the last one not exceeding `depth − k`.
pub fn extract_windows(depth: usize, k: usize, stride: usize) -> Result<Vec<usize>, DataError> {
    if k == 0 || stride == 0 {
        return Err(DataError::Validation(format!(
            "window size and stride must be positive (k = {k}, stride = {stride})"
        )));
    }
    if k > depth {
        return Err(DataError::InsufficientDepth { k, depth });
    }
    Ok((0..=depth - k).step_by(stride).collect())
}

/// Start of the central `k`-slice window; odd leftovers favour the lower index.
pub fn central_window(depth: usize, k: usize) -> Result<usize, DataError> {
    if k > depth {
        return Err(DataError::InsufficientDepth { k, depth });
    }
    Ok((depth - k) / 2)
}

/// Tiles `k` equally sized `[H, W]` slices into a `√k × √k` grid, row-major.
pub fn pack_grid(slices: &[Tensor<f32>]) -> Result<Tensor<f32>, DataError> {
    let k = slices.len();
    if !is_perfect_square(k) {
        return Err(DataError::Validation(format!(
            "cannot pack {k} slices into a square grid"
        )));
    }
    let side = integer_sqrt(k);
    let (h, w) = match slices[0].shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(DataError::Validation(format!(
                "slice must be 2-D, got {s:?}"
            )))
        }
    };
    if let Some(i) = slices.iter().position(|s| s.shape() != [h, w]) {
        return Err(DataError::Validation(format!(
            "ragged slices: slice {i} is {:?}, slice 0 is [{h}, {w}]",
            slices[i].shape()
        )));
    }
    let gw = side * w;
    let mut out = vec![0.0f32; k * h * w];
    for (idx, s) in slices.iter().enumerate() {
        let (gr, gc) = (idx / side, idx % side);
        for r in 0..h {
            let dst = (gr * h + r) * gw + gc * w;
            out[dst..dst + w].copy_from_slice(s.row(r));
        }
    }
    Ok(Tensor::from_vec(&[side * h, gw], out).expect("sized above"))
}

/// Extracts cell `index` (row-major) of channel `channel` from a packed grid.
///
/// Accepts `[GH, GW]` grids (channel must be 0) and `[GH, GW, C]` images.
pub fn grid_cell(
    grid: &Tensor<f32>,
    k: usize,
    index: usize,
    channel: usize,
) -> Result<Tensor<f32>, DataError> {
    if !is_perfect_square(k) || index >= k {
        return Err(DataError::Validation(format!(
            "cell {index} of a {k}-cell grid"
        )));
    }
    let (gh, gw, c) = match grid.shape() {
        [gh, gw] => (*gh, *gw, 1),
        [gh, gw, c] => (*gh, *gw, *c),
        s => {
            return Err(DataError::Validation(format!(
                "grid must be 2-D or 3-D, got {s:?}"
            )))
        }
    };
    let side = integer_sqrt(k);
    if channel >= c || gh % side != 0 || gw % side != 0 {
        return Err(DataError::Validation(format!(
            "cannot take channel {channel} cell {index} from grid {:?} with k = {k}",
            grid.shape()
        )));
    }
    let (h, w) = (gh / side, gw / side);
    let (gr, gc) = (index / side, index % side);
    let d = grid.data();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            out.push(d[((gr * h + r) * gw + gc * w + col) * c + channel]);
        }
    }
    Ok(Tensor::from_vec(&[h, w], out).expect("sized above"))
}

/// Stacks a T1 grid and a T2 grid as channels 0 and 1.
pub fn fuse_early(t1: &Tensor<f32>, t2: &Tensor<f32>) -> Result<Tensor<f32>, DataError> {
    if t1.shape() != t2.shape() || t1.ndim() != 2 {
        return Err(DataError::Validation(format!(
            "cannot fuse grids {:?} and {:?}",
            t1.shape(),
            t2.shape()
        )));
    }
    let (gh, gw) = (t1.shape()[0], t1.shape()[1]);
    let data = t1
        .data()
        .iter()
        .zip(t2.data())
        .flat_map(|(&a, &b)| [a, b])
        .collect();
    Ok(Tensor::from_vec(&[gh, gw, 2], data).expect("sized above"))
}

fn window_grid(v: &Volume, start: usize, k: usize) -> Result<Tensor<f32>, DataError> {
    if start + k > v.depth {
        return Err(DataError::InsufficientDepth {
            k: start + k,
            depth: v.depth,
        });
    }
    let slices: Vec<Tensor<f32>> = (start..start + k)
        .map(|z| {
            Tensor::from_vec(&[v.height, v.width], v.slice(z).to_vec()).expect("slice extents")
        })
        .collect();
    pack_grid(&slices)
}

/// Packs the window `[start, start + k)` of a record into a model input.
///
/// Single-modality modes give one channel; early and late fusion give
/// T1 in channel 0 and T2 in channel 1.
pub fn build_sample(
    record: &ScanRecord,
    start: usize,
    k: usize,
    fusion: FusionMode,
) -> Result<GridSample, DataError> {
    let single = |m: Modality| -> Result<Tensor<f32>, DataError> {
        let g = window_grid(record.volume(m), start, k)?;
        let (gh, gw) = (g.shape()[0], g.shape()[1]);
        Ok(g.reshape(&[gh, gw, 1]).expect("same length"))
    };
    let image = match fusion {
        FusionMode::T1 => single(Modality::T1)?,
        FusionMode::T2 => single(Modality::T2)?,
        FusionMode::Early | FusionMode::Late => fuse_early(
            &window_grid(&record.t1, start, k)?,
            &window_grid(&record.t2, start, k)?,
        )?,
    };
    Ok(GridSample {
        image,
        label: record.label,
        case_id: record.case_id.clone(),
        window_start: start,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slice(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Tensor<f32> {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::from_vec(&[h, w], data).unwrap()
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(extract_windows(12, 9, 1).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(extract_windows(9, 9, 1).unwrap(), vec![0]);
        assert_eq!(extract_windows(20, 9, 2).unwrap(), vec![0, 2, 4, 6, 8, 10]);
        let e = extract_windows(5, 9, 1).unwrap_err().to_string();
        assert!(e.contains('9') && e.contains('5'), "{e}");
        assert_eq!(central_window(9, 9).unwrap(), 0);
        assert_eq!(central_window(12, 9).unwrap(), 1);
        assert_eq!(central_window(100, 9).unwrap(), 45);
        assert!(matches!(
            central_window(4, 9),
            Err(DataError::InsufficientDepth { .. })
        ));
    }

    #[test]
    fn single_slice_grid_is_identity() {
        let s = slice(5, 3, |r, c| (r * 10 + c) as f32);
        assert_eq!(pack_grid(std::slice::from_ref(&s)).unwrap(), s);
    }

    #[test]
    fn cells_follow_row_major_order() {
        let slices: Vec<_> = (0..9).map(|i| slice(4, 4, move |_, _| i as f32)).collect();
        let g = pack_grid(&slices).unwrap();
        // cell (1, 2) is slice 5
        for r in 4..8 {
            for c in 8..12 {
                assert_eq!(g.data()[r * 12 + c], 5.0);
            }
        }
    }

    #[test]
    fn packing_matches_coordinate_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let slices: Vec<_> = (0..9).map(|_| slice(64, 64, |_, _| rng.random())).collect();
        let g = pack_grid(&slices).unwrap();
        for (s, sl) in slices.iter().enumerate() {
            for r in 0..64 {
                for c in 0..64 {
                    let (gr, gc) = ((s / 3) * 64 + r, (s % 3) * 64 + c);
                    assert_eq!(g.data()[gr * 192 + gc], sl.data()[r * 64 + c]);
                }
            }
        }
    }

    #[test]
    fn packing_rejects_bad_inputs() {
        let s = slice(2, 2, |_, _| 0.0);
        assert!(pack_grid(&vec![s.clone(); 3]).is_err());
        let mut v = vec![s; 4];
        v[2] = slice(2, 3, |_, _| 0.0);
        assert!(pack_grid(&v).is_err());
    }

    #[test]
    fn fusion_cases() {
        let z = slice(3, 3, |_, _| 0.0);
        let o = slice(3, 3, |_, _| 1.0);
        let f = fuse_early(&z, &o).unwrap();
        let mean = |c: usize| f.data().iter().skip(c).step_by(2).sum::<f32>() / 9.0;
        assert_eq!((mean(0), mean(1)), (0.0, 1.0));
        let g = slice(3, 3, |r, c| (r * 3 + c) as f32);
        let f = fuse_early(&g, &g).unwrap();
        assert!(f.data().chunks(2).all(|p| p[0] == p[1]));
        assert!(fuse_early(&g, &slice(3, 2, |_, _| 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn pack_then_extract_is_identity(side in 1usize..=4, h in 1usize..6, w in 1usize..6, seed: u64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = side * side;
            let slices: Vec<_> = (0..k).map(|_| slice(h, w, |_, _| rng.random())).collect();
            let g = pack_grid(&slices).unwrap();
            for (i, s) in slices.iter().enumerate() {
                prop_assert_eq!(&grid_cell(&g, k, i, 0).unwrap(), s);
            }
        }

        #[test]
        fn fusion_projection_recovers_inputs(h in 1usize..8, w in 1usize..8, seed: u64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = slice(h, w, |_, _| rng.random());
            let b = slice(h, w, |_, _| rng.random());
            let f = fuse_early(&a, &b).unwrap();
            prop_assert_eq!(&grid_cell(&f, 1, 0, 0).unwrap(), &a);
            prop_assert_eq!(&grid_cell(&f, 1, 0, 1).unwrap(), &b);
        }

        #[test]
        fn windows_are_evenly_spaced(depth in 1usize..40, k in 1usize..12, stride in 1usize..5) {
            prop_assume!(k <= depth);
            let w = extract_windows(depth, k, stride).unwrap();
            prop_assert_eq!(w[0], 0);
            prop_assert!(w.windows(2).all(|p| p[1] == p[0] + stride));
            let last = *w.last().unwrap();
            prop_assert!(last <= depth - k && last + stride > depth - k);
            if (depth - k) % stride == 0 {
                prop_assert_eq!(last, depth - k);
            }
        }
    }
}
