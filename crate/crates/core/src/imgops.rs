//! Small 2D raster kernels shared by the pipeline: resampling and
//! connected-component labeling.

use ndarray::{Array2, ArrayView2};

/// Source coordinate and blend weight for a half-pixel-centred linear resample.
fn linear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Index of the nearest source sample for a half-pixel-centred resample.
pub fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    pos.min(src_len - 1)
}

/// Bilinear resize with half-pixel centres (no corner alignment).
pub fn resize_bilinear(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let rows: Vec<_> = (0..out_h).map(|y| linear_taps(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| linear_taps(x, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] as f64 * (1.0 - fx) + src[[y0, x1]] as f64 * fx;
        let bottom = src[[y1, x0]] as f64 * (1.0 - fx) + src[[y1, x1]] as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Nearest-neighbour resize with half-pixel centres.
pub fn resize_nearest<T: Clone>(src: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        src[[nearest_index(y, h, out_h), nearest_index(x, w, out_w)]].clone()
    })
}

/// Linear interpolation weights along one axis, shared with volume resampling.
pub fn linear_axis_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    linear_taps(dst, src_len, dst_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Labels foreground components; background is 0 and components are
/// numbered from 1 in raster order of their first pixel. Returns the label
/// image and the pixel count of each component (index `label - 1`).
pub fn label_components(
    mask: ArrayView2<bool>,
    connectivity: Connectivity,
) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            let id = sizes.len() as u32 + 1;
            let mut size = 0usize;
            labels[[y, x]] = id;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                size += 1;
                for (ny, nx) in neighbours(cy, cx, h, w, connectivity) {
                    if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = id;
                        stack.push((ny, nx));
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

pub(crate) fn neighbours(
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    connectivity: Connectivity,
) -> impl Iterator<Item = (usize, usize)> {
    const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    const EIGHT: [(isize, isize); 8] = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    let offsets: &'static [(isize, isize)] = match connectivity {
        Connectivity::Four => &FOUR,
        Connectivity::Eight => &EIGHT,
    };
    offsets.iter().filter_map(move |&(dy, dx)| {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w)
            .then_some((ny as usize, nx as usize))
    })
}
