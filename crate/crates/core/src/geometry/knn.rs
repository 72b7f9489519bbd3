//! Exact k-nearest-neighbor search over a static kd-tree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{PointCloud, Vec3};
use crate::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Immutable kd-tree over a cloud's points.
///
/// Queries are exact. Results are ordered by squared Euclidean distance, ties
/// broken by lower point index, so the output is fully deterministic.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

impl KnnIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("cannot index an empty point set".into()));
        }
        let mut index = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        index.build_node(0, points.len());
        Ok(index)
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = self.points[self.order[start]];
        let mut hi = lo;
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let extent = hi - lo;
        let axis = extent.imax();
        if extent[axis] == 0.0 {
            // All points coincide; splitting cannot separate them.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Indices of the `min(k, point_count)` nearest points to `query`.
    ///
    /// `k = 0` yields an empty result.
    pub fn query(&self, query: &Vec3, k: usize) -> Vec<usize> {
        self.query_with_distances(query, k)
            .into_iter()
            .map(|(i, _)| i)
            .collect()
    }

    /// Like [`query`](Self::query) but also returns squared distances.
    pub fn query_with_distances(&self, query: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| (c.index, c.dist2))
            .collect()
    }

    fn search(&self, node: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    let c = Candidate {
                        dist2: dist2(q, &self.points[index]),
                        index,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap holds k > 0 items") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Equal distance must still be explored: a tie with a lower
                // index on the far side wins.
                let worst = heap.peek().map_or(f64::INFINITY, |c| c.dist2);
                if heap.len() < k || delta * delta <= worst {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive scan with the same (distance, index) ordering.
    fn brute_force(points: &[Vec3], q: &Vec3, k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = q - p;
                (d.x * d.x + d.y * d.y + d.z * d.z, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect()
    }

    #[test]
    fn single_point_and_empty() {
        let idx = KnnIndex::from_points(&[Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(idx.point_count(), 1);
        assert_eq!(idx.query(&Vec3::zeros(), 5), vec![0]);
        assert!(KnnIndex::from_points(&[]).is_err());
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 1000);
        let idx = KnnIndex::from_points(&pts).unwrap();
        for _ in 0..50 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let k = rng.random_range(1..40);
            assert_eq!(idx.query(&q, k), brute_force(&pts, &q, k));
        }
    }

    #[test]
    fn existing_point_is_its_own_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 200);
        let idx = KnnIndex::from_points(&pts).unwrap();
        assert_eq!(idx.query(&pts[37], 1), vec![37]);
    }

    #[test]
    fn grid_center_gets_axis_neighbors() {
        let pts: Vec<Vec3> = (0..3)
            .flat_map(|i| (0..3).map(move |j| Vec3::new(i as f64, j as f64, 0.0)))
            .collect();
        let idx = KnnIndex::from_points(&pts).unwrap();
        let got = idx.query(&Vec3::new(1.0, 1.0, 0.0), 5);
        assert_eq!(got, brute_force(&pts, &Vec3::new(1.0, 1.0, 0.0), 5));
        assert_eq!(got, vec![4, 1, 3, 5, 7]);
    }

    #[test]
    fn duplicates_tie_break_by_index() {
        let mut pts = vec![Vec3::new(5.0, 5.0, 5.0); 3];
        pts.extend((0..40).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)));
        pts.push(Vec3::new(5.0, 5.0, 5.0));
        let idx = KnnIndex::from_points(&pts).unwrap();
        assert_eq!(idx.query(&Vec3::new(5.0, 5.0, 5.0), 4), vec![0, 1, 2, 43]);
        assert_eq!(idx.query(&Vec3::new(5.0, 5.0, 5.0), 2), vec![0, 1]);
    }

    #[test]
    fn k_larger_than_cloud_returns_everything() {
        let pts = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        let idx = KnnIndex::from_points(&pts).unwrap();
        assert_eq!(idx.query(&Vec3::zeros(), 10), vec![0, 1, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn agrees_with_brute_force(seed in any::<u64>(), n in 1usize..2000, k in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Quantized coordinates force plenty of exact distance ties.
            let pts: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(
                    rng.random_range(0..20) as f64,
                    rng.random_range(0..20) as f64,
                    rng.random_range(0..3) as f64,
                ))
                .collect();
            let idx = KnnIndex::from_points(&pts).unwrap();
            for _ in 0..5 {
                let q = Vec3::new(rng.random_range(-1.0..21.0), rng.random_range(-1.0..21.0), 1.0);
                prop_assert_eq!(idx.query(&q, k), brute_force(&pts, &q, k));
            }
        }
    }
}
