//! SLIC superpixels on a single grayscale slice.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::prompt::{BBox, PointPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicConfig {
    pub n_segments: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicConfig {
    fn default() -> Self {
        SlicConfig {
            n_segments: 64,
            compactness: 10.0,
            iterations: 10,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    y: f64,
    x: f64,
    v: f64,
}

fn grid_shape(h: usize, w: usize, n: usize) -> (usize, usize) {
    let n = n.max(1);
    let step = ((h * w) as f64 / n as f64).sqrt();
    let mut ny = ((h as f64 / step).round() as usize).clamp(1, h);
    let mut nx = ((w as f64 / step).round() as usize).clamp(1, w);
    while ny * nx > n {
        if ny >= nx && ny > 1 {
            ny -= 1;
        } else {
            nx -= 1;
        }
    }
    (ny, nx)
}

/// Partitions `image` (values in `[0, 255]`) into at most `n_segments`
/// 4-connected superpixels labelled `0..k`.
///
/// Intensity is rescaled to `[0, 100]` before clustering so `compactness`
/// has its usual meaning relative to a lightness channel.
pub fn slic(image: ArrayView2<f32>, config: &SlicConfig) -> Array2<u32> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Array2::zeros((h, w));
    }
    let feat = image.mapv(|v| v as f64 * 100.0 / 255.0);
    let (ny, nx) = grid_shape(h, w, config.n_segments);
    let (sy, sx) = (h as f64 / ny as f64, w as f64 / nx as f64);
    let step = (sy * sx).sqrt();
    let mut centers: Vec<Center> = (0..ny)
        .flat_map(|i| (0..nx).map(move |j| (i, j)))
        .map(|(i, j)| {
            let y = (i as f64 + 0.5) * sy;
            let x = (j as f64 + 0.5) * sx;
            Center {
                y,
                x,
                v: feat[[(y as usize).min(h - 1), (x as usize).min(w - 1)]],
            }
        })
        .collect();

    let spatial = (config.compactness / step).powi(2);
    let reach = (2.0 * step).ceil() as isize;
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut dist = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    for _ in 0..config.iterations.max(1) {
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cy, cx) = (c.y.round() as isize, c.x.round() as isize);
            let y0 = (cy - reach).max(0) as usize;
            let y1 = ((cy + reach) as usize).min(h - 1);
            let x0 = (cx - reach).max(0) as usize;
            let x1 = ((cx + reach) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dv = feat[[y, x]] - c.v;
                    let dy = y as f64 - c.y;
                    let dx = x as f64 - c.x;
                    let d = dv * dv + spatial * (dy * dy + dx * dx);
                    if d < dist[[y, x]] {
                        dist[[y, x]] = d;
                        labels[[y, x]] = k as u32;
                    }
                }
            }
        }
        // Pixels beyond every search window fall back to the nearest centre.
        for ((y, x), l) in labels.indexed_iter_mut() {
            if dist[[y, x]].is_infinite() {
                *l = nearest_center(&centers, y, x);
            }
        }
        let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); centers.len()];
        for ((y, x), &l) in labels.indexed_iter() {
            let a = &mut acc[l as usize];
            a.0 += y as f64;
            a.1 += x as f64;
            a.2 += feat[[y, x]];
            a.3 += 1;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                *c = Center {
                    y: a.0 / n,
                    x: a.1 / n,
                    v: a.2 / n,
                };
            }
        }
    }
    enforce_connectivity(&mut labels);
    relabel_sequential(&mut labels);
    labels
}

fn nearest_center(centers: &[Center], y: usize, x: usize) -> u32 {
    centers
        .iter()
        .enumerate()
        .map(|(k, c)| (k, (c.y - y as f64).powi(2) + (c.x - x as f64).powi(2)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k as u32)
        .unwrap_or(0)
}

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// 4-connected components of equal label: `(component id map, label of
/// each component, size of each component)`.
fn components(labels: &Array2<u32>) -> (Array2<usize>, Vec<u32>, Vec<usize>) {
    let (h, w) = labels.dim();
    let mut comp = Array2::from_elem((h, w), usize::MAX);
    let mut owner = Vec::new();
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if comp[[y, x]] != usize::MAX {
                continue;
            }
            let id = owner.len();
            let l = labels[[y, x]];
            comp[[y, x]] = id;
            queue.push_back((y, x));
            let mut size = 0;
            while let Some((cy, cx)) = queue.pop_front() {
                size += 1;
                for (dy, dx) in NEIGHBOURS {
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if comp[[ny, nx]] == usize::MAX && labels[[ny, nx]] == l {
                        comp[[ny, nx]] = id;
                        queue.push_back((ny, nx));
                    }
                }
            }
            owner.push(l);
            sizes.push(size);
        }
    }
    (comp, owner, sizes)
}

/// Keeps the largest component of every label and merges each stray
/// fragment into an adjacent kept component, so every label ends up as one
/// connected region.
fn enforce_connectivity(labels: &mut Array2<u32>) {
    let (h, w) = labels.dim();
    loop {
        let (comp, owner, sizes) = components(labels);
        let mut largest: std::collections::HashMap<u32, usize> = Default::default();
        for (c, (&l, &s)) in owner.iter().zip(&sizes).enumerate() {
            let e = largest.entry(l).or_insert(c);
            if sizes[*e] < s {
                *e = c;
            }
        }
        let kept: Vec<bool> = (0..owner.len()).map(|c| largest[&owner[c]] == c).collect();
        if kept.iter().all(|&k| k) {
            return;
        }
        let mut target: Vec<Option<u32>> = vec![None; owner.len()];
        for y in 0..h {
            for x in 0..w {
                let c = comp[[y, x]];
                if kept[c] || target[c].is_some() {
                    continue;
                }
                for (dy, dx) in NEIGHBOURS {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let n = comp[[ny as usize, nx as usize]];
                    if kept[n] {
                        target[c] = Some(owner[n]);
                        break;
                    }
                }
            }
        }
        for (l, &c) in labels.iter_mut().zip(comp.iter()) {
            if let Some(t) = target[c] {
                *l = t;
            }
        }
    }
}

fn relabel_sequential(labels: &mut Array2<u32>) {
    let mut map = std::collections::HashMap::new();
    for l in labels.iter_mut() {
        let next = map.len() as u32;
        *l = *map.entry(*l).or_insert(next);
    }
}

/// A superpixel that passed the intensity gate, with the prompts derived
/// from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelPrompt {
    pub label: u32,
    pub mean: f32,
    pub area: usize,
    /// Member pixel closest to the centroid (the centroid itself for convex
    /// regions).
    pub point: PointPrompt,
    pub bbox: BBox,
}

/// One point and one box per superpixel whose mean intensity is at least
/// `mean_min`.
pub fn superpixel_prompts(image: ArrayView2<f32>, config: &SlicConfig, mean_min: f32) -> Vec<SuperpixelPrompt> {
    let labels = slic(image, config);
    let k = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    struct Acc {
        sum: f64,
        n: usize,
        sy: f64,
        sx: f64,
        bbox: (usize, usize, usize, usize),
    }
    let mut acc: Vec<Acc> = (0..k)
        .map(|_| Acc {
            sum: 0.0,
            n: 0,
            sy: 0.0,
            sx: 0.0,
            bbox: (usize::MAX, usize::MAX, 0, 0),
        })
        .collect();
    for ((y, x), &l) in labels.indexed_iter() {
        let a = &mut acc[l as usize];
        a.sum += image[[y, x]] as f64;
        a.n += 1;
        a.sy += y as f64;
        a.sx += x as f64;
        a.bbox = (a.bbox.0.min(x), a.bbox.1.min(y), a.bbox.2.max(x), a.bbox.3.max(y));
    }
    let mut out = Vec::new();
    for (l, a) in acc.iter().enumerate() {
        if a.n == 0 {
            continue;
        }
        let mean = (a.sum / a.n as f64) as f32;
        if mean < mean_min {
            continue;
        }
        let (cy, cx) = (a.sy / a.n as f64, a.sx / a.n as f64);
        let (py, px) = labels
            .indexed_iter()
            .filter(|(_, &v)| v as usize == l)
            .map(|((y, x), _)| (y, x))
            .min_by(|p, q| {
                let dp = (p.0 as f64 - cy).powi(2) + (p.1 as f64 - cx).powi(2);
                let dq = (q.0 as f64 - cy).powi(2) + (q.1 as f64 - cx).powi(2);
                dp.total_cmp(&dq)
            })
            .expect("non-empty superpixel");
        out.push(SuperpixelPrompt {
            label: l as u32,
            mean,
            area: a.n,
            point: PointPrompt {
                x: px,
                y: py,
                foreground: true,
            },
            bbox: BBox::new(a.bbox.0, a.bbox.1, a.bbox.2, a.bbox.3),
        });
    }
    out
}
