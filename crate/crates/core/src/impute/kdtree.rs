use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Static k-d tree over points of a fixed runtime dimension.
///
/// Neighbors are ranked by `(squared distance, insertion index)`, a total
/// order, so results never depend on traversal order and match an exhaustive
/// scan exactly.
#[derive(Clone, Debug)]
pub struct KdTree {
    dim: usize,
    coords: Vec<f64>,
    /// Point indices in tree order: node `m` of range `lo..hi` sits at the median.
    order: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ranked {
    d2: f64,
    idx: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Squared Euclidean distance, summed in coordinate order.
#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdTree {
    /// `coords` holds `n·dim` values, point `i` at `coords[i*dim..(i+1)*dim]`.
    pub fn build(dim: usize, coords: Vec<f64>) -> Self {
        assert!(dim > 0 && coords.len().is_multiple_of(dim), "coordinate buffer not a multiple of dim");
        let n = coords.len() / dim;
        let mut tree = KdTree {
            dim,
            coords,
            order: (0..n).collect(),
        };
        tree.build_range(0, n, 0);
        tree
    }

    fn build_range(&mut self, lo: usize, hi: usize, depth: usize) {
        if hi - lo <= 1 {
            return;
        }
        let axis = depth % self.dim;
        let mid = lo + (hi - lo) / 2;
        let (dim, coords) = (self.dim, &self.coords);
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            coords[a * dim + axis]
                .total_cmp(&coords[b * dim + axis])
                .then(a.cmp(&b))
        });
        self.build_range(lo, mid, depth + 1);
        self.build_range(mid + 1, hi, depth + 1);
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// The `min(k, n)` nearest points as `(squared distance, index)`, nearest first.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<(f64, usize)> {
        assert_eq!(query.len(), self.dim, "query dimension");
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(0, self.len(), 0, query, k, &mut heap);
        }
        let mut out: Vec<Ranked> = heap.into_vec();
        out.sort();
        out.into_iter().map(|r| (r.d2, r.idx)).collect()
    }

    fn search(&self, lo: usize, hi: usize, depth: usize, q: &[f64], k: usize, heap: &mut BinaryHeap<Ranked>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let cand = Ranked {
            d2: dist2(self.point(idx), q),
            idx,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("heap is full") {
            heap.pop();
            heap.push(cand);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = depth % self.dim;
        let diff = q[axis] - self.point(idx)[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, q, k, heap);
        // A far-side point is at least |diff| away; skip only when that bound
        // is strictly worse than the current k-th best, so ties are still seen.
        let must_visit = heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |r| r.d2);
        if must_visit {
            self.search(far.0, far.1, depth + 1, q, k, heap);
        }
    }
}

/// Exhaustive counterpart of [`KdTree::nearest`].
pub fn nearest_brute(dim: usize, coords: &[f64], query: &[f64], k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = coords
        .chunks(dim)
        .enumerate()
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}
