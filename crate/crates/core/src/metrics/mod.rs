//! Generative evaluation: CD, exact EMD, 1-NNA, MMD, COV on point clouds and
//! IoU / F-score on voxel grids.
//!
//! Conventions: CD is the sum of the two per-set means of squared nearest
//! distances; EMD is the mean unsquared distance under the optimal bijection.
//! Nearest-neighbor ties always resolve to the lowest index.

mod assignment;
mod kdtree;

use std::thread;

use serde::{Deserialize, Serialize};

pub use assignment::min_cost_assignment;
pub use kdtree::KdTree;

use crate::error::{Error, Result};
use crate::voxel::{dist, dist2, sample_surface_raw, PointCloud, VoxelGrid};

/// Largest cloud the exact assignment solver accepts.
pub const EMD_MAX_POINTS: usize = 4096;
pub const DEFAULT_FSCORE_TAU: f64 = 0.01;
/// Surface samples per grid for the F-score.
pub const FSCORE_POINTS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Cd,
    Emd,
}

impl Distance {
    pub fn eval(self, x: &PointCloud, y: &PointCloud) -> Result<f64> {
        match self {
            Distance::Cd => chamfer(x, y),
            Distance::Emd => emd(x, y),
        }
    }
}

fn nonempty(x: &PointCloud) -> Result<()> {
    if x.is_empty() {
        Err(Error::EmptyCloud)
    } else {
        Ok(())
    }
}

fn mean_nearest_sq(from: &PointCloud, tree: &KdTree) -> f64 {
    from.points().iter().map(|p| tree.nearest(p).expect("nonempty").0).sum::<f64>() / from.len() as f64
}

pub fn chamfer(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    nonempty(x)?;
    nonempty(y)?;
    let tx = KdTree::build(x.points());
    let ty = KdTree::build(y.points());
    Ok(mean_nearest_sq(x, &ty) + mean_nearest_sq(y, &tx))
}

/// Double-loop Chamfer distance, the reference for the indexed version.
pub fn chamfer_brute(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    nonempty(x)?;
    nonempty(y)?;
    let one = |a: &PointCloud, b: &PointCloud| {
        a.points()
            .iter()
            .map(|p| b.points().iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(one(x, y) + one(y, x))
}

fn emd_sizes(x: &PointCloud, y: &PointCloud) -> Result<usize> {
    nonempty(x)?;
    if x.len() != y.len() {
        return Err(Error::SizeMismatch(format!("EMD needs equal sizes, got {} and {}", x.len(), y.len())));
    }
    if x.len() > EMD_MAX_POINTS {
        return Err(Error::SizeMismatch(format!("EMD supports at most {EMD_MAX_POINTS} points, got {}", x.len())));
    }
    Ok(x.len())
}

pub fn emd(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    let n = emd_sizes(x, y)?;
    let (px, py) = (x.points(), y.points());
    let assign = min_cost_assignment(n, |i, j| dist(&px[i], &py[j]));
    Ok(assign.iter().enumerate().map(|(i, &j)| dist(&px[i], &py[j])).sum::<f64>() / n as f64)
}

/// EMD by enumerating every bijection; only for `n ≤ 8`.
pub fn emd_brute(x: &PointCloud, y: &PointCloud) -> Result<f64> {
    let n = emd_sizes(x, y)?;
    if n > 8 {
        return Err(Error::InvalidArgument("brute-force EMD limited to 8 points".into()));
    }
    fn go(i: usize, used: &mut [bool], acc: f64, x: &[[f64; 3]], y: &[[f64; 3]], best: &mut f64) {
        if i == x.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..y.len() {
            if !used[j] {
                used[j] = true;
                go(i + 1, used, acc + dist(&x[i], &y[j]), x, y, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, &mut vec![false; n], 0.0, x.points(), y.points(), &mut best);
    Ok(best / n as f64)
}

/// `m[i][j] = d(a[i], b[j])`, rows partitioned across worker threads.
pub fn pairwise(a: &[PointCloud], b: &[PointCloud], d: Distance) -> Result<Vec<Vec<f64>>> {
    let workers = thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(a.len().max(1));
    let chunk = a.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = a
            .chunks(chunk)
            .map(|rows| s.spawn(move || rows.iter().map(|x| b.iter().map(|y| d.eval(x, y)).collect()).collect()))
            .collect();
        let mut out = Vec::with_capacity(a.len());
        for h in handles {
            let rows: Vec<Result<Vec<f64>>> = h.join().expect("metric worker panicked");
            for r in rows {
                out.push(r?);
            }
        }
        Ok(out)
    })
}

/// Index of the first minimum.
fn argmin(row: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in row.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Generated and reference sample sets.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub generated: Vec<PointCloud>,
    pub reference: Vec<PointCloud>,
}

/// Precomputed distances between and within the two sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceTables {
    pub gg: Vec<Vec<f64>>,
    pub gr: Vec<Vec<f64>>,
    pub rr: Vec<Vec<f64>>,
}

impl DistanceTables {
    pub fn compute(sets: &EvalSets, d: Distance) -> Result<Self> {
        Ok(Self {
            gg: pairwise(&sets.generated, &sets.generated, d)?,
            gr: pairwise(&sets.generated, &sets.reference, d)?,
            rr: pairwise(&sets.reference, &sets.reference, d)?,
        })
    }

    fn sizes(&self) -> (usize, usize) {
        (self.gg.len(), self.rr.len())
    }

    /// 1-NNA percentage. The union is indexed generated-first.
    pub fn one_nna(&self) -> Result<f64> {
        let (ng, nr) = self.sizes();
        if ng != nr || ng == 0 {
            return Err(Error::SizeMismatch(format!("1-NNA needs |S_g| = |S_r| >= 1, got {ng} and {nr}")));
        }
        let n = ng + nr;
        let dist = |i: usize, j: usize| match (i < ng, j < ng) {
            (true, true) => self.gg[i][j],
            (true, false) => self.gr[i][j - ng],
            (false, true) => self.gr[j][i - ng],
            (false, false) => self.rr[i - ng][j - ng],
        };
        let mut correct = 0usize;
        for i in 0..n {
            let nn = argmin((0..n).map(|j| if j == i { f64::INFINITY } else { dist(i, j) })).expect("n >= 2");
            if (nn < ng) == (i < ng) {
                correct += 1;
            }
        }
        Ok(100.0 * correct as f64 / n as f64)
    }

    pub fn mmd(&self) -> Result<f64> {
        let (ng, nr) = self.sizes();
        if ng == 0 || nr == 0 {
            return Err(Error::EmptySet);
        }
        Ok((0..nr).map(|r| (0..ng).map(|g| self.gr[g][r]).fold(f64::INFINITY, f64::min)).sum::<f64>() / nr as f64)
    }

    pub fn cov(&self) -> Result<f64> {
        let (ng, nr) = self.sizes();
        if ng == 0 || nr == 0 {
            return Err(Error::EmptySet);
        }
        let mut matched = vec![false; nr];
        for row in &self.gr {
            matched[argmin(row.iter().copied()).expect("nr >= 1")] = true;
        }
        Ok(100.0 * matched.iter().filter(|&&m| m).count() as f64 / nr as f64)
    }
}

pub fn one_nna(sets: &EvalSets, d: Distance) -> Result<f64> {
    if sets.generated.len() != sets.reference.len() || sets.generated.is_empty() {
        return Err(Error::SizeMismatch(format!(
            "1-NNA needs |S_g| = |S_r| >= 1, got {} and {}",
            sets.generated.len(),
            sets.reference.len()
        )));
    }
    DistanceTables::compute(sets, d)?.one_nna()
}

fn cross_table(sets: &EvalSets, d: Distance) -> Result<DistanceTables> {
    if sets.generated.is_empty() || sets.reference.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(DistanceTables {
        gg: vec![Vec::new(); sets.generated.len()],
        gr: pairwise(&sets.generated, &sets.reference, d)?,
        rr: vec![Vec::new(); sets.reference.len()],
    })
}

pub fn mmd(sets: &EvalSets, d: Distance) -> Result<f64> {
    cross_table(sets, d)?.mmd()
}

pub fn cov(sets: &EvalSets, d: Distance) -> Result<f64> {
    cross_table(sets, d)?.cov()
}

/// IoU of occupied voxels and F-score of surface samples at `tau`.
///
/// Both surfaces are sampled with the same seed and mapped through the
/// ground truth's canonical frame, so `tau` is relative to its radius.
/// An empty union gives IoU 1; an empty side gives F-score 0 unless both are
/// empty.
pub fn iou_fscore(pred: &VoxelGrid, gt: &VoxelGrid, tau: f64) -> Result<(f64, f64)> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.values().iter().zip(gt.values()) {
        let (a, b) = (*a >= 0.5, *b >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let (pe, ge) = (pred.occupied_count() == 0, gt.occupied_count() == 0);
    if pe || ge {
        return Ok((iou, if pe && ge { 1.0 } else { 0.0 }));
    }
    let gp = PointCloud::new(sample_surface_raw(gt, FSCORE_POINTS, 0)?)?;
    let pp = PointCloud::new(sample_surface_raw(pred, FSCORE_POINTS, 0)?)?;
    let frame = gp.canonical_frame();
    let (gp, pp) = (frame.apply(&gp), frame.apply(&pp));
    let t2 = tau * tau;
    let within = |from: &PointCloud, to: &PointCloud| {
        let tree = KdTree::build(to.points());
        from.points().iter().filter(|p| tree.nearest(p).expect("nonempty").0 <= t2).count() as f64 / from.len() as f64
    };
    let precision = within(&pp, &gp);
    let recall = within(&gp, &pp);
    let f = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok((iou, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(r: &mut crate::rng::Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect()).unwrap()
    }

    fn random_sets(seed: u64, ng: usize, nr: usize, pts: usize) -> EvalSets {
        let mut r = crate::rng::stream(seed, "metric-sets");
        EvalSets {
            generated: (0..ng).map(|_| random_cloud(&mut r, pts)).collect(),
            reference: (0..nr).map(|_| random_cloud(&mut r, pts)).collect(),
        }
    }

    fn brute_d(a: &PointCloud, b: &PointCloud) -> f64 {
        chamfer_brute(a, b).unwrap()
    }

    #[test]
    fn chamfer_cases() {
        let x = cloud(&[[0.0, 0.0, 0.0]]);
        let y = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&x, &y).unwrap(), 2.0);
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        assert!(matches!(chamfer(&cloud(&[]), &y), Err(Error::EmptyCloud)));
        let mut r = crate::rng::stream(1, "cd");
        for _ in 0..20 {
            let (a, b) = (random_cloud(&mut r, 32), random_cloud(&mut r, 32));
            assert!((chamfer(&a, &b).unwrap() - chamfer_brute(&a, &b).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn emd_cases() {
        let x = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let y = cloud(&[[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(emd(&x, &y).unwrap(), 0.0);
        assert_eq!(emd(&x, &x).unwrap(), 0.0);
        assert!(matches!(emd(&x, &cloud(&[[0.0; 3]])), Err(Error::SizeMismatch(_))));
        let mut r = crate::rng::stream(2, "emd");
        for _ in 0..100 {
            let (a, b) = (random_cloud(&mut r, 6), random_cloud(&mut r, 6));
            assert!((emd(&a, &b).unwrap() - emd_brute(&a, &b).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn emd_triangle_and_symmetry() {
        let mut r = crate::rng::stream(3, "tri");
        for _ in 0..30 {
            let (a, b, c) = (random_cloud(&mut r, 20), random_cloud(&mut r, 20), random_cloud(&mut r, 20));
            let (ab, bc, ac) = (emd(&a, &b).unwrap(), emd(&b, &c).unwrap(), emd(&a, &c).unwrap());
            assert!(ac <= ab + bc + 1e-9);
            assert!((ab - emd(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_nna_cases() {
        let sets = EvalSets { generated: vec![cloud(&[[0.0; 3]])], reference: vec![cloud(&[[1.0, 0.0, 0.0]])] };
        assert_eq!(one_nna(&sets, Distance::Cd).unwrap(), 0.0);

        let mut r = crate::rng::stream(4, "clusters");
        let near = |r: &mut crate::rng::Rng, c: f64| {
            PointCloud::new((0..8).map(|_| [c + 0.01 * r.gen::<f64>(), 0.01 * r.gen::<f64>(), 0.0]).collect()).unwrap()
        };
        let sets = EvalSets {
            generated: (0..5).map(|_| near(&mut r, 0.0)).collect(),
            reference: (0..5).map(|_| near(&mut r, 100.0)).collect(),
        };
        assert_eq!(one_nna(&sets, Distance::Cd).unwrap(), 100.0);
        assert!(one_nna(&random_sets(0, 2, 3, 4), Distance::Cd).is_err());
    }

    #[test]
    fn one_nna_matches_enumeration() {
        let sets = random_sets(5, 8, 8, 16);
        let all: Vec<(bool, &PointCloud)> =
            sets.generated.iter().map(|c| (true, c)).chain(sets.reference.iter().map(|c| (false, c))).collect();
        let mut correct = 0;
        for (i, (gi, ci)) in all.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (j, (_, cj)) in all.iter().enumerate() {
                let d = brute_d(ci, cj);
                if j != i && d < best.0 {
                    best = (d, j);
                }
            }
            if all[best.1].0 == *gi {
                correct += 1;
            }
        }
        let expect = 100.0 * correct as f64 / 16.0;
        assert!((one_nna(&sets, Distance::Cd).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mmd_cases() {
        let a = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0, 2.0, 0.0], [1.0, 1.0, 0.0]]);
        let same = EvalSets { generated: vec![a.clone(), b.clone()], reference: vec![a.clone(), b.clone()] };
        assert_eq!(mmd(&same, Distance::Cd).unwrap(), 0.0);
        let half = EvalSets { generated: vec![a.clone()], reference: vec![a.clone(), b.clone()] };
        let dab = chamfer(&a, &b).unwrap();
        assert!((mmd(&half, Distance::Cd).unwrap() - dab / 2.0).abs() < 1e-12);
        let empty = EvalSets { generated: vec![], reference: vec![a] };
        assert!(matches!(mmd(&empty, Distance::Cd), Err(Error::EmptySet)));

        let sets = random_sets(6, 6, 6, 12);
        let expect = sets
            .reference
            .iter()
            .map(|r| sets.generated.iter().map(|g| brute_d(g, r)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / 6.0;
        assert!((mmd(&sets, Distance::Cd).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn cov_cases() {
        let mut r = crate::rng::stream(7, "cov");
        let refs: Vec<PointCloud> = (0..4).map(|_| random_cloud(&mut r, 10)).collect();
        let all_same = EvalSets { generated: vec![refs[2].clone(); 5], reference: refs.clone() };
        assert_eq!(cov(&all_same, Distance::Cd).unwrap(), 25.0);
        let identical = EvalSets { generated: refs.clone(), reference: refs };
        assert_eq!(cov(&identical, Distance::Emd).unwrap(), 100.0);

        let sets = random_sets(8, 8, 8, 12);
        let mut matched = std::collections::BTreeSet::new();
        for g in &sets.generated {
            let mut best = (f64::INFINITY, 0);
            for (j, rc) in sets.reference.iter().enumerate() {
                let d = brute_d(g, rc);
                if d < best.0 {
                    best = (d, j);
                }
            }
            matched.insert(best.1);
        }
        assert_eq!(cov(&sets, Distance::Cd).unwrap(), 100.0 * matched.len() as f64 / 8.0);
    }

    #[test]
    fn cov_ties_pick_lowest_reference() {
        let a = cloud(&[[0.0; 3]]);
        let sets = EvalSets { generated: vec![a.clone()], reference: vec![a.clone(), a.clone()] };
        let t = DistanceTables::compute(&sets, Distance::Cd).unwrap();
        assert_eq!(argmin(t.gr[0].iter().copied()), Some(0));
        assert_eq!(t.cov().unwrap(), 50.0);
    }

    #[test]
    fn iou_fscore_cases() {
        let block = VoxelGrid::from_fn([8, 8, 8], |x, y, z| (2..6).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z));
        assert_eq!(iou_fscore(&block, &block, DEFAULT_FSCORE_TAU).unwrap(), (1.0, 1.0));
        let lower = VoxelGrid::from_fn([8, 8, 8], |x, y, z| {
            (2..6).contains(&x) && (2..6).contains(&y) && (2..4).contains(&z)
        });
        assert_eq!(iou_fscore(&lower, &block, DEFAULT_FSCORE_TAU).unwrap().0, 0.5);
        let other = VoxelGrid::from_fn([8, 8, 8], |x, _, _| x == 0);
        let (iou, f) = iou_fscore(&other, &block, DEFAULT_FSCORE_TAU).unwrap();
        assert_eq!(iou, 0.0);
        assert!(f < 0.05);
        let small = VoxelGrid::from_fn([4, 4, 4], |_, _, _| true);
        assert!(matches!(iou_fscore(&small, &block, 0.01), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn pairwise_independent_of_partitioning() {
        let sets = random_sets(10, 7, 3, 10);
        let m = pairwise(&sets.generated, &sets.reference, Distance::Emd).unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, emd(&sets.generated[i], &sets.reference[j]).unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn distances_symmetric_and_bounded(seed in 0u64..500, n in 1usize..24) {
            let mut r = crate::rng::stream(seed, "prop");
            let a = random_cloud(&mut r, n);
            let b = random_cloud(&mut r, n);
            let cd = chamfer(&a, &b).unwrap();
            prop_assert!((cd - chamfer(&b, &a).unwrap()).abs() < 1e-12);
            let paired: f64 = a.points().iter().zip(b.points()).map(|(p, q)| dist2(p, q)).sum::<f64>() / n as f64;
            prop_assert!(cd <= 2.0 * paired + 1e-12);
            let e = emd(&a, &b).unwrap();
            prop_assert!(e >= 0.0 && (e - emd(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn set_metrics_in_range(seed in 0u64..200, n in 1usize..5) {
            let sets = random_sets(seed, n, n, 6);
            let t = DistanceTables::compute(&sets, Distance::Cd).unwrap();
            let nna = t.one_nna().unwrap();
            prop_assert!((0.0..=100.0).contains(&nna));
            prop_assert!(t.mmd().unwrap() >= 0.0);
            let c = t.cov().unwrap();
            prop_assert!(c > 0.0 && c <= 100.0);
        }
    }
}
