use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::Array2;

use super::entropy::EntropyMap;
use crate::error::{QpiError, Result};
use crate::imaging::{label_components, BoundingBox, Component};

/// Components of `entropy ≥ threshold`, 8-connected, in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: Array2<bool>,
    pub components: Vec<Component>,
}

pub fn segment_cells(em: &EntropyMap, threshold: f64) -> Result<Segmentation> {
    if !(threshold > 0.0) {
        return Err(QpiError::Domain(format!("entropy threshold must be positive, got {threshold}")));
    }
    let mask = em.values.mapv(|v| v >= threshold);
    let components = label_components(&mask);
    Ok(Segmentation { mask, components })
}

/// Drops components smaller than `min_area` pixels.
pub fn reject_artifacts(components: Vec<Component>, min_area: usize) -> Vec<Component> {
    components.into_iter().filter(|c| c.area() >= min_area).collect()
}

/// Stands in for infinity in the squared distance transform.
const FAR: f64 = 1e20;

/// Squared 1D distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] {
            v[0] = q;
            z[1] = f64::INFINITY;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Euclidean distance from every true pixel to the nearest false pixel,
/// with everything outside the raster counting as false.
pub fn distance_transform(mask: &Array2<bool>) -> Array2<f64> {
    let (rows, cols) = mask.dim();
    // Pad by one pixel so the raster edge acts as background.
    let (pr, pc) = (rows + 2, cols + 2);
    let mut g = Array2::from_shape_fn((pr, pc), |(r, c)| {
        let inside = r >= 1 && c >= 1 && r <= rows && c <= cols && mask[[r - 1, c - 1]];
        if inside {
            FAR
        } else {
            0.0
        }
    });
    let n = pr.max(pc);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for c in 0..pc {
        for r in 0..pr {
            f[r] = g[[r, c]];
        }
        edt_1d(&f[..pr], &mut out[..pr], &mut v, &mut z);
        for r in 0..pr {
            g[[r, c]] = out[r];
        }
    }
    for r in 0..pr {
        for c in 0..pc {
            f[c] = g[[r, c]];
        }
        edt_1d(&f[..pc], &mut out[..pc], &mut v, &mut z);
        for c in 0..pc {
            g[[r, c]] = out[c];
        }
    }
    Array2::from_shape_fn((rows, cols), |(r, c)| g[[r + 1, c + 1]].sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    /// Minimum distance between two seeds, in pixels.
    pub min_seed_separation_px: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            min_seed_separation_px: 10.0,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Queued {
    height: f64,
    order: usize,
    pos: (usize, usize),
    label: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.height
            .total_cmp(&other.height)
            .then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Seeds of a mask's distance transform: 3×3 local maxima, taken in
/// decreasing height and kept only when far enough from every stronger seed.
/// Positions are relative to the mask raster.
pub fn distance_seeds(dist: &Array2<f64>, min_separation: f64) -> Vec<(usize, usize)> {
    let (rows, cols) = dist.dim();
    let mut candidates = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let d = dist[[r, c]];
            if d <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nbr: for rr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                    if dist[[rr, cc]] > d {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if is_max {
                candidates.push((d, (r, c)));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut seeds: Vec<(usize, usize)> = Vec::new();
    let min2 = min_separation * min_separation;
    for (_, p) in candidates {
        let far = seeds.iter().all(|s| {
            let dr = s.0 as f64 - p.0 as f64;
            let dc = s.1 as f64 - p.1 as f64;
            dr * dr + dc * dc >= min2
        });
        if far {
            seeds.push(p);
        }
    }
    seeds
}

/// Separates touching cells: seeds from the distance transform, then
/// simultaneous growth from all seeds in order of decreasing distance, each
/// pixel joining the region of the neighbour that reached it first. A
/// component with one seed comes back unchanged.
pub fn split_touching(component: &Component, params: &SplitParams) -> Vec<Component> {
    let bbox = component.bbox;
    let local = Array2::from_shape_fn((bbox.height, bbox.width), |_| false);
    let mut local = local;
    for &(r, c) in &component.pixels {
        local[[r - bbox.row, c - bbox.col]] = true;
    }
    let dist = distance_transform(&local);
    let seeds = distance_seeds(&dist, params.min_seed_separation_px);
    if seeds.len() < 2 {
        return vec![component.clone()];
    }

    let (rows, cols) = local.dim();
    let mut label = Array2::<usize>::from_elem((rows, cols), usize::MAX);
    let mut heap = BinaryHeap::new();
    let mut order = 0usize;
    for (i, &p) in seeds.iter().enumerate() {
        label[p] = i;
        heap.push(Queued {
            height: dist[p],
            order,
            pos: p,
            label: i,
        });
        order += 1;
    }
    while let Some(q) = heap.pop() {
        let (r, c) = q.pos;
        for rr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                if local[[rr, cc]] && label[[rr, cc]] == usize::MAX {
                    label[[rr, cc]] = q.label;
                    heap.push(Queued {
                        height: dist[[rr, cc]],
                        order,
                        pos: (rr, cc),
                        label: q.label,
                    });
                    order += 1;
                }
            }
        }
    }

    let mut parts: Vec<Vec<(usize, usize)>> = vec![Vec::new(); seeds.len()];
    for &(r, c) in &component.pixels {
        let l = label[[r - bbox.row, c - bbox.col]];
        debug_assert!(l != usize::MAX, "component must be connected");
        parts[l.min(seeds.len() - 1)].push((r, c));
    }
    parts.into_iter().filter_map(Component::from_pixels).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapClass {
    Separable,
    Overlapping,
}

/// A split whose smallest fragment is under `fraction` of the median
/// single-cell area marks its parent as overlapping cells.
pub fn classify_overlap(parts: &[Component], median_cell_area: f64, fraction: f64) -> OverlapClass {
    if parts.len() < 2 {
        return OverlapClass::Separable;
    }
    let limit = fraction * median_cell_area;
    if parts.iter().any(|p| (p.area() as f64) < limit) {
        OverlapClass::Overlapping
    } else {
        OverlapClass::Separable
    }
}

/// Tight box of a component grown by `margin` and clamped to the raster.
pub fn patch_box(component: &Component, margin: usize, shape: (usize, usize)) -> BoundingBox {
    component.bbox.expanded(margin, shape.0, shape.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disks(shape: (usize, usize), disks: &[((f64, f64), f64)]) -> Array2<bool> {
        Array2::from_shape_fn(shape, |(r, c)| {
            disks.iter().any(|&((cy, cx), rad)| {
                (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= rad * rad
            })
        })
    }

    fn only_component(mask: &Array2<bool>) -> Component {
        let mut comps = label_components(mask);
        assert_eq!(comps.len(), 1);
        comps.pop().unwrap()
    }

    fn brute_edt(mask: &Array2<bool>) -> Array2<f64> {
        let (rows, cols) = mask.dim();
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            if !mask[[r, c]] {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for rr in -1..=rows as isize {
                for cc in -1..=cols as isize {
                    let inside = rr >= 0
                        && cc >= 0
                        && rr < rows as isize
                        && cc < cols as isize
                        && mask[[rr as usize, cc as usize]];
                    if !inside {
                        let d = ((rr - r as isize).pow(2) + (cc - c as isize).pow(2)) as f64;
                        best = best.min(d);
                    }
                }
            }
            best.sqrt()
        })
    }

    #[test]
    fn edt_matches_brute_force() {
        let mask = disks((30, 40), &[((12.0, 14.0), 9.0), ((18.0, 26.0), 7.5)]);
        let fast = distance_transform(&mask);
        let slow = brute_edt(&mask);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_entropy_gives_no_components() {
        let em = EntropyMap {
            values: Array2::zeros((32, 32)),
            window_px: 9,
            bin_count: 256,
        };
        assert!(segment_cells(&em, 1.0).unwrap().components.is_empty());
    }

    #[test]
    fn area_rule_boundary() {
        let strip = |n: usize| Component::from_pixels((0..n).map(|i| (i / 100, i % 100)).collect()).unwrap();
        assert!(reject_artifacts(vec![strip(1599)], 1600).is_empty());
        assert_eq!(reject_artifacts(vec![strip(1600)], 1600).len(), 1);
        assert!(reject_artifacts(Vec::new(), 1600).is_empty());
    }

    #[test]
    fn circle_is_not_split() {
        let comp = only_component(&disks((80, 80), &[((40.0, 40.0), 24.0)]));
        let parts = split_touching(&comp, &SplitParams::default());
        assert_eq!(parts, vec![comp]);
    }

    #[test]
    fn two_overlapping_circles_split_at_their_centres() {
        let r = 20.0;
        let a = (40.0, 35.0);
        let b = (40.0, 35.0 + 1.5 * r);
        let comp = only_component(&disks((80, 110), &[(a, r), (b, r)]));
        let parts = split_touching(&comp, &SplitParams::default());
        assert_eq!(parts.len(), 2);
        for center in [a, b] {
            let hits = parts
                .iter()
                .filter(|p| p.pixels.binary_search(&(center.0 as usize, center.1 as usize)).is_ok())
                .count();
            assert_eq!(hits, 1);
        }
        assert_eq!(classify_overlap(&parts, std::f64::consts::PI * r * r, 0.5), OverlapClass::Separable);
    }

    #[test]
    fn three_disk_chain_splits_in_three() {
        let r = 16.0;
        let centers = [(30.0, 25.0), (30.0, 25.0 + 1.6 * r), (30.0, 25.0 + 3.2 * r)];
        let mask = disks((60, 120), &centers.map(|c| (c, r)));
        let comp = only_component(&mask);
        assert_eq!(split_touching(&comp, &SplitParams::default()).len(), 3);
    }

    #[test]
    fn split_conserves_pixels() {
        let mask = disks((80, 110), &[((40.0, 35.0), 20.0), ((45.0, 68.0), 18.0)]);
        let comp = only_component(&mask);
        let parts = split_touching(&comp, &SplitParams::default());
        let mut all: Vec<_> = parts.iter().flat_map(|p| p.pixels.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, comp.pixels);
    }

    #[test]
    fn barely_touching_disks_are_separable() {
        let r = 24.0;
        let mask = disks((70, 120), &[((35.0, 30.0), r), ((35.0, 30.0 + 2.0 * r - 1.0), r)]);
        let comp = only_component(&mask);
        let parts = split_touching(&comp, &SplitParams::default());
        assert_eq!(parts.len(), 2);
        assert_eq!(classify_overlap(&parts, std::f64::consts::PI * r * r, 0.5), OverlapClass::Separable);
    }

    #[test]
    fn mostly_covered_cell_is_overlapping() {
        // A second cell lies 80% under the first; only a sliver protrudes.
        let r = 24.0;
        let mask = disks((80, 100), &[((40.0, 40.0), r), ((40.0, 40.0 + 0.8 * r + 10.0), 14.0)]);
        let comp = only_component(&mask);
        let parts = split_touching(&comp, &SplitParams::default());
        assert_eq!(parts.len(), 2);
        assert_eq!(
            classify_overlap(&parts, std::f64::consts::PI * r * r, 0.5),
            OverlapClass::Overlapping
        );
        assert_eq!(classify_overlap(&parts[..1], std::f64::consts::PI * r * r, 0.5), OverlapClass::Separable);
    }

    proptest! {
        #[test]
        fn larger_area_threshold_never_keeps_more(sizes in proptest::collection::vec(1usize..3000, 0..12), t in 0usize..3000, dt in 0usize..500) {
            let comps: Vec<Component> = sizes
                .iter()
                .map(|&n| Component::from_pixels((0..n).map(|i| (i / 100, i % 100)).collect()).unwrap())
                .collect();
            let a = reject_artifacts(comps.clone(), t).len();
            let b = reject_artifacts(comps, t + dt).len();
            prop_assert!(b <= a);
        }

        #[test]
        fn split_is_a_partition(dx in 20.0f64..50.0, dy in -10.0f64..10.0, r2 in 12.0f64..24.0) {
            let mask = disks((90, 130), &[((45.0, 35.0), 22.0), ((45.0 + dy, 35.0 + dx), r2)]);
            let comps = label_components(&mask);
            for comp in comps {
                let parts = split_touching(&comp, &SplitParams::default());
                let mut all: Vec<_> = parts.iter().flat_map(|p| p.pixels.iter().copied()).collect();
                let n = all.len();
                all.sort_unstable();
                all.dedup();
                prop_assert_eq!(n, all.len());
                prop_assert_eq!(all, comp.pixels.clone());
            }
        }
    }
}
