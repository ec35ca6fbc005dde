//! 8-connected component labeling, confidence scoring and filtering.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::otsu::normalize_min_max;
use super::BinaryMask;
use crate::attribution::SaliencyMap;
use crate::error::{Error, Result};

/// Labeled components of a binary mask. Ids run from 1 to `len()` in raster
/// order of each component's first pixel; label 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub labels: Array2<u32>,
    /// Pixel count per id (index `id − 1`).
    pub sizes: Vec<usize>,
    /// Confidence per id (index `id − 1`); empty until scored.
    pub confidences: Vec<f64>,
    /// Binarization threshold the mask came from, normalized units.
    pub threshold: f64,
    /// Kept ids in increasing order.
    pub kept: Vec<u32>,
    /// Set when no component passed the confidence threshold and the best
    /// one was kept anyway.
    pub fallback: bool,
    /// Set when the source map was constant.
    pub degenerate: bool,
}

struct UnionFind(Vec<u32>);

impl UnionFind {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.0[x as usize] != x {
            let p = self.0[x as usize];
            self.0[x as usize] = self.0[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi as usize] = lo;
        }
    }
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn is_scored(&self) -> bool {
        self.confidences.len() == self.sizes.len()
    }

    pub fn confidence(&self, id: u32) -> Option<f64> {
        self.confidences.get(id as usize - 1).copied()
    }

    /// Pixel coordinates of component `id` in raster order.
    pub fn pixels(&self, id: u32) -> Vec<(usize, usize)> {
        self.labels
            .indexed_iter()
            .filter(|&(_, &l)| l == id)
            .map(|(p, _)| p)
            .collect()
    }

    /// Union of the kept components.
    pub fn kept_mask(&self) -> BinaryMask {
        let mut keep = vec![false; self.len() + 1];
        for &id in &self.kept {
            keep[id as usize] = true;
        }
        BinaryMask::new(self.labels.mapv(|l| keep[l as usize]))
    }

    /// Drops components smaller than `min_size` pixels and relabels the rest
    /// contiguously, preserving order. Scores and kept ids are cleared.
    pub fn remove_small(&self, min_size: usize) -> ComponentSet {
        let mut remap = vec![0u32; self.len() + 1];
        let mut sizes = Vec::new();
        for (i, &s) in self.sizes.iter().enumerate() {
            if s >= min_size {
                sizes.push(s);
                remap[i + 1] = sizes.len() as u32;
            }
        }
        ComponentSet {
            labels: self.labels.mapv(|l| remap[l as usize]),
            sizes,
            confidences: Vec::new(),
            threshold: self.threshold,
            kept: Vec::new(),
            fallback: false,
            degenerate: self.degenerate,
        }
    }
}

/// Two-pass union-find labeling with 8-connectivity.
pub fn connected_components(mask: &BinaryMask) -> ComponentSet {
    let (h, w) = mask.dim();
    let mut provisional = Array2::<u32>::zeros((h, w));
    let mut uf = UnionFind(vec![0]);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut look = |rr: usize, cc: usize| {
                let l = provisional[[rr, cc]];
                if l != 0 {
                    neighbours[n] = l;
                    n += 1;
                }
            };
            if c > 0 {
                look(r, c - 1);
            }
            if r > 0 {
                if c > 0 {
                    look(r - 1, c - 1);
                }
                look(r - 1, c);
                if c + 1 < w {
                    look(r - 1, c + 1);
                }
            }
            let label = if n == 0 {
                let id = uf.0.len() as u32;
                uf.0.push(id);
                id
            } else {
                let m = *neighbours[..n].iter().min().unwrap();
                for &o in &neighbours[..n] {
                    uf.union(m, o);
                }
                m
            };
            provisional[[r, c]] = label;
        }
    }
    // Final ids follow the raster order in which roots are first met.
    let mut final_id = vec![0u32; uf.0.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut labels = Array2::<u32>::zeros((h, w));
    for ((r, c), &p) in provisional.indexed_iter() {
        if p == 0 {
            continue;
        }
        let root = uf.find(p) as usize;
        if final_id[root] == 0 {
            sizes.push(0);
            final_id[root] = sizes.len() as u32;
        }
        let id = final_id[root];
        sizes[id as usize - 1] += 1;
        labels[[r, c]] = id;
    }
    ComponentSet {
        labels,
        sizes,
        confidences: Vec::new(),
        threshold: 0.0,
        kept: Vec::new(),
        fallback: false,
        degenerate: false,
    }
}

/// Confidence of each component: mean min-max normalized saliency over its
/// pixels.
pub fn score_components(comps: &ComponentSet, sal: &SaliencyMap) -> Result<ComponentSet> {
    if comps.labels.dim() != sal.values.dim() {
        return Err(Error::Shape(format!(
            "components {:?} vs saliency {:?}",
            comps.labels.dim(),
            sal.values.dim()
        )));
    }
    let norm = normalize_min_max(&sal.values);
    let mut sums = vec![0.0; comps.len()];
    for (&l, &p) in comps.labels.iter().zip(norm.iter()) {
        if l != 0 {
            sums[l as usize - 1] += p;
        }
    }
    let mut out = comps.clone();
    out.confidences = sums
        .iter()
        .zip(&comps.sizes)
        .map(|(&s, &n)| (s / n as f64).clamp(0.0, 1.0))
        .collect();
    out.kept.clear();
    out.fallback = false;
    Ok(out)
}

/// Keeps components with confidence strictly above `eta_c`; if none pass,
/// keeps the single most confident one and sets the fallback flag.
pub fn filter_components(comps: &ComponentSet, eta_c: f64) -> Result<ComponentSet> {
    if !comps.is_scored() {
        return Err(Error::InvalidArgument("components must be scored before filtering".into()));
    }
    let mut out = comps.clone();
    out.kept = (1..=comps.len() as u32)
        .filter(|&id| comps.confidences[id as usize - 1] > eta_c)
        .collect();
    out.fallback = false;
    if out.kept.is_empty() && !comps.is_empty() {
        let mut best = 0;
        for (i, &c) in comps.confidences.iter().enumerate() {
            if c > comps.confidences[best] {
                best = i;
            }
        }
        out.kept = vec![best as u32 + 1];
        out.fallback = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn mask(v: Array2<u8>) -> BinaryMask {
        BinaryMask::new(v.mapv(|x| x != 0))
    }

    fn flood_fill(m: &BinaryMask) -> Array2<u32> {
        let (h, w) = m.dim();
        let mut labels = Array2::<u32>::zeros((h, w));
        let mut next = 0;
        for r in 0..h {
            for c in 0..w {
                if !m.get(r, c) || labels[[r, c]] != 0 {
                    continue;
                }
                next += 1;
                labels[[r, c]] = next;
                let mut q = VecDeque::from([(r, c)]);
                while let Some((y, x)) = q.pop_front() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let (ny, nx) = (ny as usize, nx as usize);
                            if m.get(ny, nx) && labels[[ny, nx]] == 0 {
                                labels[[ny, nx]] = next;
                                q.push_back((ny, nx));
                            }
                        }
                    }
                }
            }
        }
        labels
    }

    fn sal(v: Array2<f64>) -> SaliencyMap {
        SaliencyMap::from_values(v).unwrap()
    }

    #[test]
    fn diagonal_pixels_connect() {
        let cs = connected_components(&mask(array![[1, 0], [0, 1]]));
        assert_eq!(cs.len(), 1);
        let cs = connected_components(&mask(array![[1, 1], [0, 0], [1, 0]]));
        assert_eq!(cs.len(), 2);
        assert!(connected_components(&mask(Array2::zeros((3, 3)))).is_empty());
    }

    #[test]
    fn u_shape_merges_into_one_label() {
        let m = mask(array![[1, 0, 1], [1, 0, 1], [1, 1, 1]]);
        let cs = connected_components(&m);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.sizes, vec![7]);
    }

    #[test]
    fn matches_flood_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = rng.random_range(0.2..0.7);
            let m = BinaryMask::new(Array2::from_shape_simple_fn((16, 16), || rng.random_bool(p)));
            assert_eq!(connected_components(&m).labels, flood_fill(&m));
        }
    }

    #[test]
    fn confidence_is_mean_normalized_saliency() {
        // Normalization maps 0→0 and 1→1, so listed values are already normalized.
        let s = sal(array![[0.8, 0.6, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);
        let cs = connected_components(&mask(array![[1, 1, 0, 0], [0, 0, 0, 1]]));
        let scored = score_components(&cs, &s).unwrap();
        assert!((scored.confidences[0] - 0.7).abs() < 1e-12);
        assert_eq!(scored.confidences[1], 1.0);
        assert!(score_components(&cs, &sal(Array2::zeros((3, 3)))).is_err());
    }

    #[test]
    fn filtering_rules() {
        let mut cs = connected_components(&mask(array![[1, 0, 1]]));
        cs.confidences = vec![0.9, 0.3];
        let f = filter_components(&cs, 0.5).unwrap();
        assert_eq!(f.kept, vec![1]);
        assert!(!f.fallback);
        let f = filter_components(&cs, 0.95).unwrap();
        assert_eq!(f.kept, vec![1]);
        assert!(f.fallback);
        cs.confidences = vec![0.0, 0.3];
        assert_eq!(filter_components(&cs, 0.0).unwrap().kept, vec![2]);
        let unscored = connected_components(&mask(array![[1]]));
        assert!(filter_components(&unscored, 0.5).is_err());
    }

    #[test]
    fn small_components_are_removed() {
        let cs = connected_components(&mask(array![[1, 0, 1, 1], [0, 0, 1, 1]]));
        let big = cs.remove_small(2);
        assert_eq!(big.sizes, vec![4]);
        assert_eq!(big.labels[[0, 0]], 0);
        assert_eq!(big.labels[[1, 3]], 1);
    }

    proptest! {
        #[test]
        fn kept_components_pass_or_fallback(confs in prop::collection::vec(0.0f64..1.0, 1..10), eta in 0.0f64..1.0) {
            let n = confs.len();
            let m = BinaryMask::new(Array2::from_shape_fn((1, 2 * n), |(_, c)| c % 2 == 0));
            let mut cs = connected_components(&m);
            cs.confidences = confs.clone();
            let f = filter_components(&cs, eta).unwrap();
            if f.fallback {
                prop_assert_eq!(f.kept.len(), 1);
                prop_assert!(confs.iter().all(|&c| c <= eta));
            } else {
                prop_assert!(f.kept.iter().all(|&id| confs[id as usize - 1] > eta));
            }
        }

        #[test]
        fn scores_match_direct_sum(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = BinaryMask::new(Array2::from_shape_simple_fn((12, 12), || rng.random_bool(0.4)));
            let s = sal(Array2::from_shape_simple_fn((12, 12), || rng.random::<f64>()));
            let scored = score_components(&connected_components(&m), &s).unwrap();
            let (lo, hi) = s.values.iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            for id in 1..=scored.len() as u32 {
                let (mut num, mut den) = (0.0, 0.0);
                for ((r, c), &l) in scored.labels.indexed_iter() {
                    let y = (l == id) as u8 as f64;
                    num += (s.values[[r, c]] - lo) / (hi - lo) * y;
                    den += y;
                }
                prop_assert!((scored.confidence(id).unwrap() - num / den).abs() < 1e-9);
            }
        }
    }
}
