//! Static 2-D k-d tree over a point slice, supporting k-nearest-neighbor and
//! radius queries with exact, index-tie-broken results that match the
//! brute-force distance matrix.

pub(crate) fn dist_sq(p: (f64, f64), q: (f64, f64)) -> f64 {
    let dx = p.0 - q.0;
    let dy = p.1 - q.1;
    dx * dx + dy * dy
}

fn coord(p: (f64, f64), axis: usize) -> f64 {
    if axis == 0 {
        p.0
    } else {
        p.1
    }
}

/// Median-split tree stored as an index permutation: the node covering
/// `order[lo..hi]` has its pivot at the middle slot and children in the
/// surrounding half-open ranges, axes alternating by depth.
pub(crate) struct KdTree<'a> {
    points: &'a [(f64, f64)],
    order: Vec<u32>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [(f64, f64)]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        build_rec(points, &mut order, 0);
        KdTree { points, order }
    }

    /// Indices of the k nearest points to `query`, excluding `exclude`,
    /// ordered by (squared distance, index).
    pub fn k_nearest(&self, query: (f64, f64), exclude: usize, k: usize) -> Vec<usize> {
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.knn_rec(0, self.order.len(), 0, query, exclude, k, &mut best);
        best.into_iter().map(|(_, i)| i as usize).collect()
    }

    /// Indices of all points with 0 < d(query, p) <= r, excluding `exclude`.
    pub fn within_radius(&self, query: (f64, f64), exclude: usize, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_rec(0, self.order.len(), 0, query, exclude, r * r, &mut out);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn knn_rec(
        &self,
        lo: usize,
        hi: usize,
        axis: usize,
        query: (f64, f64),
        exclude: usize,
        k: usize,
        best: &mut Vec<(f64, u32)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        if idx as usize != exclude {
            let cand = (dist_sq(query, self.points[idx as usize]), idx);
            if best.len() < k || cand < *best.last().unwrap() {
                let pos = best.partition_point(|b| *b < cand);
                best.insert(pos, cand);
                best.truncate(k);
            }
        }

        let pivot_c = coord(self.points[idx as usize], axis);
        let query_c = coord(query, axis);
        let (near, far) = if query_c <= pivot_c {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(near.0, near.1, axis ^ 1, query, exclude, k, best);
        let gap = query_c - pivot_c;
        // The far side can still hold an equal-distance candidate with a
        // smaller index, so prune only on strict inequality.
        if best.len() < k || gap * gap <= best.last().unwrap().0 {
            self.knn_rec(far.0, far.1, axis ^ 1, query, exclude, k, best);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn radius_rec(
        &self,
        lo: usize,
        hi: usize,
        axis: usize,
        query: (f64, f64),
        exclude: usize,
        r_sq: f64,
        out: &mut Vec<usize>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        if idx as usize != exclude {
            let d = dist_sq(query, self.points[idx as usize]);
            if d > 0.0 && d <= r_sq {
                out.push(idx as usize);
            }
        }
        let pivot_c = coord(self.points[idx as usize], axis);
        let query_c = coord(query, axis);
        let gap = query_c - pivot_c;
        // Left subtree holds coords <= pivot, right holds >= pivot.
        if gap <= 0.0 || gap * gap <= r_sq {
            self.radius_rec(lo, mid, axis ^ 1, query, exclude, r_sq, out);
        }
        if gap >= 0.0 || gap * gap <= r_sq {
            self.radius_rec(mid + 1, hi, axis ^ 1, query, exclude, r_sq, out);
        }
    }
}

fn build_rec(points: &[(f64, f64)], order: &mut [u32], axis: usize) {
    if order.len() <= 1 {
        return;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        (coord(points[a as usize], axis), a)
            .partial_cmp(&(coord(points[b as usize], axis), b))
            .unwrap()
    });
    let (left, rest) = order.split_at_mut(mid);
    build_rec(points, left, axis ^ 1);
    build_rec(points, &mut rest[1..], axis ^ 1);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points() -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push((i as f64 * 0.2, j as f64 * 0.2));
            }
        }
        pts
    }

    #[test]
    fn knn_matches_linear_scan() {
        let pts = grid_points();
        let tree = KdTree::build(&pts);
        for (u, &p) in pts.iter().enumerate() {
            let got = tree.k_nearest(p, u, 4);
            let mut want: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .filter(|&(v, _)| v != u)
                .map(|(v, &q)| (dist_sq(p, q), v))
                .collect();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = want.into_iter().take(4).map(|(_, v)| v).collect();
            assert_eq!(got, want, "node {u}");
        }
    }

    #[test]
    fn radius_inclusive_boundary() {
        let pts = vec![(0.0, 0.0), (0.3, 0.0), (0.7, 0.0)];
        let tree = KdTree::build(&pts);
        let near = tree.within_radius(pts[0], 0, 0.3);
        assert_eq!(near, vec![1]);
    }

    #[test]
    fn coincident_points_are_not_radius_neighbors() {
        let pts = vec![(0.1, 0.1), (0.1, 0.1), (0.5, 0.5)];
        let tree = KdTree::build(&pts);
        assert!(tree.within_radius(pts[0], 0, 0.2).is_empty());
    }
}
