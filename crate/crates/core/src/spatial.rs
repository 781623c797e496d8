//! Exact nearest-neighbor and fixed-radius queries over 3-D point sets.

use std::collections::HashMap;

use crate::geometry::Vec3;

/// Euclidean distance with a fixed evaluation order. Every exact distance
/// comparison in the crate goes through this function so that indexed and
/// brute-force paths round identically.
#[inline]
pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    distance_sq(a, b).sqrt()
}

#[inline]
pub fn distance_sq(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Static k-d tree over a point set, built once and queried for the single
/// nearest neighbor.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    // original index of points[i]
    index: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut items: Vec<(Vec3, usize)> = points.iter().copied().zip(0..).collect();
        build_rec(&mut items, 0);
        let (points, index) = items.into_iter().unzip();
        Self { points, index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Returns the original index and squared distance of the point nearest
    /// to `q`, or `None` for an empty tree.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, self.points.len(), 0, q, &mut best);
        Some((self.index[best.0], best.1))
    }

    fn nearest_rec(&self, lo: usize, hi: usize, depth: usize, q: &Vec3, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        let d2 = distance_sq(p, q);
        if d2 < best.1 {
            *best = (mid, d2);
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(near.0, near.1, depth + 1, q, best);
        if diff * diff <= best.1 {
            self.nearest_rec(far.0, far.1, depth + 1, q, best);
        }
    }
}

fn build_rec(items: &mut [(Vec3, usize)], depth: usize) {
    if items.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]));
    let (left, right) = items.split_at_mut(mid);
    build_rec(left, depth + 1);
    build_rec(&mut right[1..], depth + 1);
}

/// Uniform hash grid used for "is anything closer than r" queries.
#[derive(Debug, Clone)]
pub struct UniformGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<Vec3>>,
}

impl UniformGrid {
    pub fn build(points: &[Vec3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        let mut cells: HashMap<[i64; 3], Vec<Vec3>> = HashMap::new();
        for p in points {
            cells.entry(Self::key(p, cell)).or_default().push(*p);
        }
        Self { cell, cells }
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// True if some stored point lies at a distance strictly below `r`.
    pub fn any_closer_than(&self, q: &Vec3, r: f64) -> bool {
        let lo = Self::key(&(q - Vec3::repeat(r)), self.cell);
        let hi = Self::key(&(q + Vec3::repeat(r)), self.cell);
        // one-cell pad absorbs rounding in the key computation
        for i in lo[0] - 1..=hi[0] + 1 {
            for j in lo[1] - 1..=hi[1] + 1 {
                for k in lo[2] - 1..=hi[2] + 1 {
                    if let Some(pts) = self.cells.get(&[i, j, k]) {
                        if pts.iter().any(|p| distance(p, q) < r) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn kdtree_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = cloud(&mut rng, 400);
        let tree = KdTree::build(&pts);
        for q in cloud(&mut rng, 200) {
            let (_, d2) = tree.nearest(&q).unwrap();
            let brute = pts.iter().map(|p| distance_sq(p, &q)).fold(f64::INFINITY, f64::min);
            assert_eq!(d2, brute);
        }
    }

    #[test]
    fn kdtree_handles_duplicates_and_empty() {
        assert!(KdTree::build(&[]).nearest(&Vec3::zeros()).is_none());
        let pts = vec![Vec3::new(1.0, 1.0, 1.0); 5];
        let (i, d2) = KdTree::build(&pts).nearest(&Vec3::zeros()).unwrap();
        assert!(i < 5);
        assert_eq!(d2, 3.0);
    }

    #[test]
    fn grid_radius_query_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = cloud(&mut rng, 300);
        for r in [0.05, 0.2, 0.5] {
            let grid = UniformGrid::build(&pts, r);
            for q in cloud(&mut rng, 300) {
                let brute = pts.iter().any(|p| distance(p, &q) < r);
                assert_eq!(grid.any_closer_than(&q, r), brute);
            }
        }
    }
}
