//! Simple linear iterative clustering in CIELAB + xy.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::color::rgb_to_lab;
use super::BBox;
use crate::error::{Error, Result};

pub const DEFAULT_COMPACTNESS: f64 = 10.0;
const ITERATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    pub mean_rgb: [f64; 3],
    pub pixels: usize,
}

/// Region labels over the bounding box, row-major, ids `0..k_actual`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelMap {
    pub bbox: BBox,
    pub labels: Vec<u32>,
    pub k_target: usize,
    pub k_actual: usize,
    pub centroids: Vec<Centroid>,
}

impl SuperpixelMap {
    /// Absolute pixel coordinates of each region.
    pub fn masks(&self) -> Vec<Vec<(u32, u32)>> {
        let mut out = vec![Vec::new(); self.k_actual];
        let w = self.bbox.w as usize;
        for (i, &l) in self.labels.iter().enumerate() {
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            out[l as usize].push((self.bbox.x + x, self.bbox.y + y));
        }
        out
    }

    pub fn label_at(&self, x: u32, y: u32) -> u32 {
        self.labels[((y - self.bbox.y) * self.bbox.w + (x - self.bbox.x)) as usize]
    }
}

/// Seed grid `(nx, ny)` with `nx * ny` as close to `k` as possible, preferring
/// near-square cells among equally good counts.
fn seed_grid(k: usize, w: f64, h: f64) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_cost = (usize::MAX, f64::INFINITY);
    for nx in 1..=k {
        for ny in 1..=(2 * k / nx).max(1) {
            let count = nx * ny;
            if count == 0 || count > 2 * k {
                continue;
            }
            let aspect = ((w / nx as f64) / (h / ny as f64)).ln().abs();
            if aspect > 1.2f64.max((w / h).ln().abs()) + 1e-12 && count != k {
                continue;
            }
            let cost = (count.abs_diff(k), aspect);
            if cost.0 < best_cost.0 || (cost.0 == best_cost.0 && cost.1 < best_cost.1) {
                best_cost = cost;
                best = (nx, ny);
            }
        }
    }
    best
}

#[derive(Clone, Copy)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// Segment the bounding box of `frame` into roughly `k_target` superpixels.
pub fn slic_segment(frame: &RgbImage, bbox: BBox, k_target: usize, compactness: f64) -> Result<SuperpixelMap> {
    let area = bbox.area();
    if k_target == 0 || area < 100 * k_target {
        return Err(Error::RegionTooSmall { area, k_target });
    }
    if !bbox.fits(frame.width(), frame.height()) {
        return Err(Error::Config(format!("bbox {bbox:?} outside {}x{} frame", frame.width(), frame.height())));
    }
    let (w, h) = (bbox.w as usize, bbox.h as usize);
    let lab: Vec<[f64; 3]> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| rgb_to_lab(frame.get_pixel(bbox.x + x as u32, bbox.y + y as u32).0))
        .collect();

    let (nx, ny) = seed_grid(k_target, w as f64, h as f64);
    let (cw, ch) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let step = (area as f64 / (nx * ny) as f64).sqrt();
    let mut centers: Vec<Center> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| {
            let (x, y) = ((i as f64 + 0.5) * cw, (j as f64 + 0.5) * ch);
            let idx = (y as usize).min(h - 1) * w + (x as usize).min(w - 1);
            Center { lab: lab[idx], x, y }
        })
        .collect();

    let radius = step.max(cw).max(ch);
    let spatial_weight = (compactness / step).powi(2);
    let mut labels = vec![u32::MAX; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    for _ in 0..ITERATIONS {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = (c.x - radius).floor().max(0.0) as usize;
            let x1 = ((c.x + radius).ceil() as usize).min(w - 1);
            let y0 = (c.y - radius).floor().max(0.0) as usize;
            let y1 = ((c.y + radius).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * w + x;
                    let p = lab[i];
                    let dc = (p[0] - c.lab[0]).powi(2) + (p[1] - c.lab[1]).powi(2) + (p[2] - c.lab[2]).powi(2);
                    let ds = (x as f64 + 0.5 - c.x).powi(2) + (y as f64 + 0.5 - c.y).powi(2);
                    let d = dc + ds * spatial_weight;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = ci as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            let a = &mut acc[l as usize];
            a[0] += lab[i][0];
            a[1] += lab[i][1];
            a[2] += lab[i][2];
            a[3] += (i % w) as f64 + 0.5;
            a[4] += (i / w) as f64 + 0.5;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                *c = Center { lab: [a[0] / a[5], a[1] / a[5], a[2] / a[5]], x: a[3] / a[5], y: a[4] / a[5] };
            }
        }
    }
    // Pixels outside every search window join the spatially nearest centre.
    for (i, l) in labels.iter_mut().enumerate() {
        if *l == u32::MAX {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            *l = centers
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = (a.1.x - x).powi(2) + (a.1.y - y).powi(2);
                    let db = (b.1.x - x).powi(2) + (b.1.y - y).powi(2);
                    da.total_cmp(&db)
                })
                .map(|(ci, _)| ci as u32)
                .unwrap_or(0);
        }
    }

    let min_size = ((area / (nx * ny)) / 4).max(1);
    let labels = enforce_connectivity(&labels, w, h, min_size);
    Ok(finish(frame, bbox, k_target, labels))
}

/// 4-connected component labelling.
fn components(labels: &[u32], w: usize, h: usize) -> (Vec<usize>, usize) {
    let mut comp = vec![usize::MAX; labels.len()];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = n;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == labels[i] {
                    comp[j] = n;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        n += 1;
    }
    (comp, n)
}

/// Keep the largest component of each cluster when it is at least `min_size`;
/// every other component merges into its largest neighbour.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize, min_size: usize) -> Vec<usize> {
    let (comp, n) = components(labels, w, h);
    let mut size = vec![0usize; n];
    comp.iter().for_each(|&c| size[c] += 1);
    let mut comp_label = vec![0u32; n];
    for (i, &c) in comp.iter().enumerate() {
        comp_label[c] = labels[i];
    }
    let n_labels = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut largest = vec![usize::MAX; n_labels];
    for c in 0..n {
        let l = comp_label[c] as usize;
        if largest[l] == usize::MAX || size[c] > size[largest[l]] {
            largest[l] = c;
        }
    }
    let mut kept: Vec<bool> = (0..n).map(|c| largest[comp_label[c] as usize] == c && size[c] >= min_size).collect();

    // Adjacency between components.
    let mut adj: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && comp[i] != comp[i + 1] {
                adj[comp[i]].insert(comp[i + 1]);
                adj[comp[i + 1]].insert(comp[i]);
            }
            if y + 1 < h && comp[i] != comp[i + w] {
                adj[comp[i]].insert(comp[i + w]);
                adj[comp[i + w]].insert(comp[i]);
            }
        }
    }

    // Union-find over components.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut c: usize) -> usize {
        while parent[c] != c {
            parent[c] = parent[parent[c]];
            c = parent[c];
        }
        c
    }
    let mut orphans: Vec<usize> = (0..n).filter(|&c| !kept[c]).collect();
    orphans.sort_by_key(|&c| (size[c], c));
    let mut live = n;
    let mut members: Vec<Vec<usize>> = (0..n).map(|c| vec![c]).collect();
    loop {
        let mut progressed = false;
        for &o in &orphans {
            let root = find(&mut parent, o);
            if kept[root] || live == 1 {
                continue;
            }
            let mut neighbours = std::collections::BTreeSet::new();
            for &m in &members[root] {
                for &a in &adj[m] {
                    let r = find(&mut parent, a);
                    if r != root {
                        neighbours.insert(r);
                    }
                }
            }
            let target = neighbours
                .iter()
                .copied()
                .max_by(|&a, &b| (kept[a], size[a]).cmp(&(kept[b], size[b])).then(b.cmp(&a)));
            if let Some(t) = target {
                parent[root] = t;
                size[t] += size[root];
                // A union of fragments that reaches the minimum size stands on its own.
                kept[t] |= size[t] >= min_size;
                let moved = std::mem::take(&mut members[root]);
                members[t].extend(moved);
                live -= 1;
                progressed = true;
            } else {
                // Isolated orphan (whole box): keep it.
                kept[root] = true;
            }
        }
        if !progressed {
            break;
        }
    }
    comp.iter().map(|&c| find(&mut parent, c)).collect()
}

/// Canonical relabelling by centroid raster order, plus centroid statistics.
fn finish(frame: &RgbImage, bbox: BBox, k_target: usize, roots: Vec<usize>) -> SuperpixelMap {
    let w = bbox.w as usize;
    let mut stats: std::collections::BTreeMap<usize, [f64; 7]> = Default::default();
    for (i, &r) in roots.iter().enumerate() {
        let (x, y) = ((i % w) as u32, (i / w) as u32);
        let px = frame.get_pixel(bbox.x + x, bbox.y + y).0;
        let s = stats.entry(r).or_insert([0.0; 7]);
        s[0] += x as f64 + 0.5;
        s[1] += y as f64 + 0.5;
        s[2] += px[0] as f64;
        s[3] += px[1] as f64;
        s[4] += px[2] as f64;
        s[5] += 1.0;
        // First pixel index breaks exact ties.
        if s[5] == 1.0 {
            s[6] = i as f64;
        }
    }
    let mut order: Vec<(usize, [f64; 7])> = stats.into_iter().collect();
    order.sort_by(|a, b| {
        let key = |s: &[f64; 7]| ((s[1] / s[5]).round() as i64, (s[0] / s[5]).round() as i64, s[6] as i64);
        key(&a.1).cmp(&key(&b.1))
    });
    let remap: std::collections::BTreeMap<usize, u32> =
        order.iter().enumerate().map(|(new, (old, _))| (*old, new as u32)).collect();
    let labels = roots.iter().map(|r| remap[r]).collect();
    let centroids = order
        .iter()
        .map(|(_, s)| Centroid {
            x: bbox.x as f64 + s[0] / s[5],
            y: bbox.y as f64 + s[1] / s[5],
            mean_rgb: [s[2] / s[5], s[3] / s[5], s[4] / s[5]],
            pixels: s[5] as usize,
        })
        .collect::<Vec<_>>();
    SuperpixelMap { bbox, labels, k_target, k_actual: centroids.len(), centroids }
}
