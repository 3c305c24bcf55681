//! Static 3-d tree for exact nearest-neighbor queries.

use crate::voxel::dist2;

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    /// Point indices arranged as an implicit balanced tree over `[lo, hi)`.
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        Self::split(points, &mut order, &mut axes, 0, points.len());
        Self { points, order, axes }
    }

    fn split(points: &[[f64; 3]], order: &mut [usize], axes: &mut [u8], lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        // Split on the axis of widest spread.
        let mut axis = 0;
        let mut best = -1.0;
        for a in 0..3 {
            let (mn, mx) = order[lo..hi].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), &i| {
                (mn.min(points[i][a]), mx.max(points[i][a]))
            });
            if mx - mn > best {
                best = mx - mn;
                axis = a;
            }
        }
        let mid = (lo + hi) / 2;
        order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        axes[mid] = axis as u8;
        Self::split(points, order, axes, lo, mid);
        Self::split(points, order, axes, mid + 1, hi);
    }

    /// Squared distance and index of the nearest point; ties go to the lowest
    /// index. `None` for an empty tree.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(f64, usize)> {
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(q, 0, self.order.len(), &mut best);
        (best.1 != usize::MAX).then_some(best)
    }

    fn search(&self, q: &[f64; 3], lo: usize, hi: usize, best: &mut (f64, usize)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d = dist2(q, p);
        if d < best.0 || (d == best.0 && idx < best.1) {
            *best = (d, idx);
        }
        let axis = self.axes[mid] as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta <= 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, best);
        // `<=` keeps equal-distance candidates reachable for the tie rule.
        if delta * delta <= best.0 {
            self.search(q, far.0, far.1, best);
        }
    }
}
