//! SLIC superpixels: localized k-means over (L, a, b, x, y) with grid seeding,
//! followed by connectivity enforcement.

use crate::color::LabImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    /// Row-major label per pixel, contiguous in `0..count`.
    pub labels: Vec<u32>,
    pub count: usize,
    pub compactness: f64,
}

impl SuperpixelMap {
    /// Pixel indices belonging to each superpixel.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.count];
        for &l in &self.labels {
            out[l as usize] += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// Computes superpixels of a Lab image.
///
/// Seeds sit on a regular grid with spacing `S = sqrt(H*W / n_superpixels)`; each
/// center only competes for pixels in its `2S x 2S` neighbourhood. Distance is
/// `d_lab^2 + (d_xy / S)^2 * m^2` with `m = compactness`.
pub fn slic(
    image: &LabImage,
    n_superpixels: usize,
    compactness: f64,
    max_iters: usize,
) -> Result<SuperpixelMap> {
    let (w, h) = (image.width, image.height);
    let n_px = w * h;
    if n_superpixels == 0 || n_superpixels > n_px {
        return Err(Error::Parameter(format!(
            "n_superpixels must be in 1..={n_px}, got {n_superpixels}"
        )));
    }
    if !(compactness > 0.0 && compactness.is_finite()) {
        return Err(Error::Parameter(format!(
            "compactness must be positive, got {compactness}"
        )));
    }

    let step = (n_px as f64 / n_superpixels as f64).sqrt();
    let xstrips = ((w as f64 / step).round() as usize).clamp(1, w);
    let ystrips = ((h as f64 / step).round() as usize).clamp(1, h);
    let dx = w as f64 / xstrips as f64;
    let dy = h as f64 / ystrips as f64;

    let mut centers: Vec<Center> = Vec::with_capacity(xstrips * ystrips);
    for j in 0..ystrips {
        for i in 0..xstrips {
            let x = (i as f64 + 0.5) * dx - 0.5;
            let y = (j as f64 + 0.5) * dy - 0.5;
            let lab = image.at(x.round() as usize, y.round() as usize);
            centers.push(Center { lab, x, y });
        }
    }

    let spatial = (compactness / step).powi(2);
    let radius = step.ceil() as isize;
    let mut labels = vec![u32::MAX; n_px];
    let mut dist = vec![f64::INFINITY; n_px];

    for _ in 0..max_iters.max(1) {
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let cx = c.x.round() as isize;
            let cy = c.y.round() as isize;
            let y0 = (cy - radius).max(0) as usize;
            let y1 = (cy + radius).clamp(0, h as isize - 1) as usize;
            let x0 = (cx - radius).max(0) as usize;
            let x1 = (cx + radius).clamp(0, w as isize - 1) as usize;
            for y in y0..=y1 {
                let ddy = y as f64 - c.y;
                for x in x0..=x1 {
                    let i = y * w + x;
                    let p = image.data[i];
                    let dl = p[0] - c.lab[0];
                    let da = p[1] - c.lab[1];
                    let db = p[2] - c.lab[2];
                    let ddx = x as f64 - c.x;
                    let d = dl * dl + da * da + db * db + (ddx * ddx + ddy * ddy) * spatial;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }

        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l == u32::MAX {
                continue;
            }
            let p = image.data[i];
            let s = &mut sums[l as usize];
            s[0] += p[0];
            s[1] += p[1];
            s[2] += p[2];
            s[3] += (i % w) as f64;
            s[4] += (i / w) as f64;
            s[5] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                c.lab = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
                c.x = s[3] / s[5];
                c.y = s[4] / s[5];
            }
        }
    }

    let labels = enforce_connectivity(&labels, w, h);
    let count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(SuperpixelMap {
        width: w,
        height: h,
        labels,
        count,
        compactness,
    })
}

/// 4-connected components of a label image. Returns (component id per pixel, sizes).
pub(crate) fn connected_components(labels: &[u32], w: usize, h: usize) -> (Vec<u32>, Vec<usize>) {
    let mut comp = vec![u32::MAX; labels.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let lab = labels[start];
        comp[start] = id;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == u32::MAX && labels[j] == lab {
                    comp[j] = id;
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
        sizes.push(size);
    }
    (comp, sizes)
}

/// Keeps the largest 4-connected fragment of every label and merges all other
/// fragments into their largest adjacent settled region, then relabels to
/// `0..count` in scan order.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize) -> Vec<u32> {
    let (comp, sizes) = connected_components(labels, w, h);
    let n_comp = sizes.len();

    // Representative label and the largest component per label.
    let mut comp_label = vec![u32::MAX; n_comp];
    for (i, &c) in comp.iter().enumerate() {
        comp_label[c as usize] = labels[i];
    }
    let mut best: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for c in 0..n_comp {
        let l = comp_label[c];
        match best.get(&l) {
            Some(&b) if sizes[b] >= sizes[c] => {}
            _ => {
                best.insert(l, c);
            }
        }
    }
    let mut settled = vec![false; n_comp];
    for &c in best.values() {
        // unassigned pixels (never reached by any center) never anchor a superpixel
        if comp_label[c] != u32::MAX {
            settled[c] = true;
        }
    }

    // Adjacency between components.
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n_comp];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let a = comp[i];
            if x + 1 < w && comp[i + 1] != a {
                adj[a as usize].push(comp[i + 1]);
                adj[comp[i + 1] as usize].push(a);
            }
            if y + 1 < h && comp[i + w] != a {
                adj[a as usize].push(comp[i + w]);
                adj[comp[i + w] as usize].push(a);
            }
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }

    // Union-find over components; a merged fragment joins its host's root.
    let mut parent: Vec<usize> = (0..n_comp).collect();
    let mut root_size = sizes.clone();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }

    let mut pending: Vec<usize> = (0..n_comp).filter(|&c| !settled[c]).collect();
    if pending.len() == n_comp {
        // nothing anchored (degenerate); the whole image becomes one region
        return vec![0; labels.len()];
    }
    while !pending.is_empty() {
        let mut still = Vec::new();
        for &c in &pending {
            let mut host: Option<usize> = None;
            for &n in &adj[c] {
                let n = n as usize;
                if !settled[n] {
                    continue;
                }
                let r = find(&mut parent, n);
                host = match host {
                    Some(hr) if root_size[hr] >= root_size[r] => Some(hr),
                    _ => Some(r),
                };
            }
            match host {
                Some(r) => {
                    parent[c] = r;
                    root_size[r] += sizes[c];
                    settled[c] = true;
                }
                None => still.push(c),
            }
        }
        debug_assert!(still.len() < pending.len(), "orphan merge made no progress");
        pending = still;
    }

    let mut remap = vec![u32::MAX; n_comp];
    let mut next = 0u32;
    comp.iter()
        .map(|&c| {
            let r = find(&mut parent, c as usize);
            if remap[r] == u32::MAX {
                remap[r] = next;
                next += 1;
            }
            remap[r]
        })
        .collect()
}
