//! Unsupervised object-discovery metrics, retrieval-based dense
//! segmentation, and PCA feature visualization.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pixel label map; ground-truth maps reserve id 0 for background.
pub type InstanceMap = Array2<u32>;

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub fg_ari: f64,
    pub mbo: f64,
    pub collapse_d: f64,
    pub supervised_fraction: f64,
    pub knn_miou: Option<f64>,
}

fn comb2(n: i128) -> i128 {
    n * (n - 1) / 2
}

/// Exact rational core of the adjusted Rand index: `(numerator,
/// denominator)` as integers, both scaled by `2 * C(n, 2)`.
pub fn ari_fraction(a: &[u32], b: &[u32]) -> Result<(i128, i128)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "label vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Shape("need at least 2 elements".into()));
    }
    let mut contingency: BTreeMap<(u32, u32), i128> = BTreeMap::new();
    let mut rows: BTreeMap<u32, i128> = BTreeMap::new();
    let mut cols: BTreeMap<u32, i128> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        *contingency.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let sum_ij: i128 = contingency.values().map(|&n| comb2(n)).sum();
    let sum_a: i128 = rows.values().map(|&n| comb2(n)).sum();
    let sum_b: i128 = cols.values().map(|&n| comb2(n)).sum();
    let c = comb2(a.len() as i128);
    let num = 2 * (c * sum_ij - sum_a * sum_b);
    let den = c * (sum_a + sum_b) - 2 * sum_a * sum_b;
    Ok((num, den))
}

/// Permutation-model adjusted Rand index between two clusterings.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> Result<f64> {
    let (num, den) = ari_fraction(a, b)?;
    if den == 0 {
        // both partitions trivial (all-singletons or single cluster)
        Ok(1.0)
    } else {
        Ok(num as f64 / den as f64)
    }
}

/// Adjusted Rand index restricted to pixels where the ground truth is
/// foreground (label != 0). `None` when no foreground exists.
pub fn fg_ari(gt: &InstanceMap, pred: &InstanceMap) -> Result<Option<f64>> {
    if gt.dim() != pred.dim() {
        return Err(Error::Shape(format!(
            "instance maps differ: {:?} vs {:?}",
            gt.dim(),
            pred.dim()
        )));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (g, p) in gt.iter().zip(pred.iter()) {
        if *g != 0 {
            a.push(*g);
            b.push(*p);
        }
    }
    if a.len() < 2 {
        return Ok(None);
    }
    Ok(Some(adjusted_rand_index(&a, &b)?))
}

/// Split an instance map into per-id pixel sets (flat indices, ascending).
pub fn masks_from_instance_map(map: &InstanceMap, skip_zero: bool) -> Vec<Vec<usize>> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (idx, &id) in map.iter().enumerate() {
        if skip_zero && id == 0 {
            continue;
        }
        by_id.entry(id).or_default().push(idx);
    }
    by_id.into_values().collect()
}

fn iou_sorted(a: &[usize], b: &[usize]) -> f64 {
    let mut inter = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over ground-truth masks of the best IoU achieved by any predicted
/// mask. Callers exclude the background ground-truth mask.
pub fn mean_best_overlap(gt_masks: &[Vec<usize>], pred_masks: &[Vec<usize>]) -> Result<f64> {
    if gt_masks.is_empty() {
        return Err(Error::Shape("no ground-truth masks".into()));
    }
    if pred_masks.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for gt in gt_masks {
        let best = pred_masks
            .iter()
            .map(|p| iou_sorted(gt, p))
            .fold(0.0f64, f64::max);
        total += best;
    }
    Ok(total / gt_masks.len() as f64)
}

fn cosine_distance<T: Scalar>(
    a: &ndarray::ArrayView1<'_, T>,
    b: &ndarray::ArrayView1<'_, T>,
) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x * y).to_f64s()).sum();
    let na: f64 = a.iter().map(|&x| (x * x).to_f64s()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x * x).to_f64s()).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        f64::INFINITY
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Per-query majority label among the `k` nearest memory rows under cosine
/// distance; ties broken toward the lower label.
pub fn knn_dense_segmentation<T: Scalar>(
    memory_feats: &Array2<T>,
    memory_labels: &[u32],
    query: &Array2<T>,
    k: usize,
) -> Result<Vec<u32>> {
    if memory_feats.nrows() != memory_labels.len() {
        return Err(Error::Shape("memory features/labels mismatch".into()));
    }
    if memory_feats.nrows() == 0 {
        return Err(Error::Shape("empty memory".into()));
    }
    let k = k.clamp(1, memory_feats.nrows());
    let mut out = Vec::with_capacity(query.nrows());
    for q in query.rows() {
        let mut dists: Vec<(f64, usize)> = (0..memory_feats.nrows())
            .map(|j| (cosine_distance(&q, &memory_feats.row(j)), j))
            .collect();
        dists.sort_by(|x, y| {
            x.0.partial_cmp(&y.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.1.cmp(&y.1))
        });
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &(_, j) in &dists[..k] {
            *votes.entry(memory_labels[j]).or_default() += 1;
        }
        // BTreeMap iterates ascending labels, so the first maximum wins ties.
        let (label, _) = votes.iter().fold((0u32, 0usize), |(bl, bc), (&l, &c)| {
            if c > bc {
                (l, c)
            } else {
                (bl, bc)
            }
        });
        out.push(label);
    }
    Ok(out)
}

/// Mean IoU over the classes present in either labeling.
pub fn mean_iou(pred: &[u32], gt: &[u32]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape("label vectors differ or are empty".into()));
    }
    let mut classes: Vec<u32> = gt.iter().chain(pred.iter()).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let pin = p == c;
            let gin = g == c;
            if pin && gin {
                inter += 1;
            }
            if pin || gin {
                union += 1;
            }
        }
        total += inter as f64 / union as f64;
    }
    Ok(total / classes.len() as f64)
}

/// Which principal-component triple to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaRange {
    /// Components 1-3.
    First,
    /// Components 4-6.
    Second,
}

impl PcaRange {
    pub fn start(&self) -> usize {
        match self {
            PcaRange::First => 0,
            PcaRange::Second => 3,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PcaRange::First => "1-3",
            PcaRange::Second => "4-6",
        }
    }
}

impl std::str::FromStr for PcaRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1-3" => Ok(PcaRange::First),
            "4-6" => Ok(PcaRange::Second),
            other => Err(Error::Config(format!(
                "unknown component range {other} (expected 1-3 or 4-6)"
            ))),
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// `(eigenvalues, eigenvectors)` sorted by descending eigenvalue;
/// eigenvectors are columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (mip, miq) = (m[[i, p]], m[[i, q]]);
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for i in 0..n {
                    let (mpi, mqi) = (m[[p, i]], m[[q, i]]);
                    m[[p, i]] = c * mpi - s * mqi;
                    m[[q, i]] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let (vip, viq) = (v[[i, p]], v[[i, q]]);
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    order.sort_by(|&i, &j| {
        evals[j]
            .partial_cmp(&evals[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut sorted_vecs = Array2::<f64>::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            sorted_vecs[[r, col]] = v[[r, i]];
        }
    }
    (sorted_vals, sorted_vecs)
}

/// Render a principal-component triple of centered patch features as an RGB
/// image at grid resolution; channels min-max normalized to `[0, 1]`,
/// degenerate components rendered as zeros.
pub fn pca_feature_map<T: Scalar>(
    features: &Array2<T>,
    range: PcaRange,
    grid: (usize, usize),
) -> Result<Array3<f64>> {
    let (gr, gc) = grid;
    let n = features.nrows();
    let d = features.ncols();
    if gr * gc != n {
        return Err(Error::Shape(format!(
            "grid {gr}x{gc} does not cover {n} patches"
        )));
    }
    if d < range.start() + 3 {
        return Err(Error::Shape(format!(
            "feature dim {d} too small for components up to {}",
            range.start() + 3
        )));
    }
    let feats: Array2<f64> = features.mapv(|x| x.to_f64s());
    let mean = feats.sum_axis(ndarray::Axis(0)) / n as f64;
    let centered = &feats - &mean.broadcast((n, d)).expect("broadcast");
    let cov = centered.t().dot(&centered) / n as f64;
    let (evals, evecs) = symmetric_eigen(&cov);
    let lead = evals.first().copied().unwrap_or(0.0).max(0.0);
    let tol = 1e-9 * lead.max(1e-30);

    let mut out = Array3::<f64>::zeros((gr, gc, 3));
    for ch in 0..3 {
        let comp = range.start() + ch;
        // Rank-deficient spectra (including fewer samples than components)
        // render as zeros.
        if comp >= evals.len() || evals[comp] <= tol || comp >= n {
            continue;
        }
        let axis = evecs.column(comp);
        let proj: Vec<f64> = (0..n).map(|i| centered.row(i).dot(&axis)).collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            continue;
        }
        for (i, &p) in proj.iter().enumerate() {
            out[[i / gc, i % gc, ch]] = (p - lo) / (hi - lo);
        }
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

    #[test]
    fn ari_examples() {
        let a = [0u32, 0, 1, 1];
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&a, &[5, 5, 5, 5]).unwrap(), 0.0);
        let ari = adjusted_rand_index(&a, &[0, 0, 1, 2]).unwrap();
        assert!((ari - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn ari_symmetric_and_relabel_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let n = rng.gen_range(2..40);
            let a: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let ab = adjusted_rand_index(&a, &b).unwrap();
            let ba = adjusted_rand_index(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-15);
            let relabeled: Vec<u32> = a.iter().map(|&x| 7 - x).collect();
            let rel = adjusted_rand_index(&relabeled, &b).unwrap();
            assert!((ab - rel).abs() < 1e-15);
        }
    }

    #[test]
    fn fg_ari_ignores_background() {
        let gt = array![[0u32, 0], [1, 2]];
        let perfect = array![[9u32, 9], [4, 7]];
        assert_eq!(fg_ari(&gt, &perfect).unwrap(), Some(1.0));
        // change predictions on background only
        let scribbled = array![[3u32, 5], [4, 7]];
        assert_eq!(fg_ari(&gt, &scribbled).unwrap(), Some(1.0));
        // no foreground -> flagged
        let empty = array![[0u32, 0], [0, 0]];
        assert_eq!(fg_ari(&empty, &perfect).unwrap(), None);
    }

    #[test]
    fn fg_ari_matches_worked_example() {
        // foreground pixels with gt (0,0,1,1) and pred (0,0,1,2) -> 4/7
        let gt = array![[1u32, 1, 2, 2]];
        let pred = array![[5u32, 5, 6, 7]];
        let v = fg_ari(&gt, &pred).unwrap().unwrap();
        assert!((v - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn mbo_examples() {
        let gt = vec![vec![0, 1, 2, 3]];
        assert_eq!(mean_best_overlap(&gt, &gt.clone()).unwrap(), 1.0);
        assert_eq!(mean_best_overlap(&gt, &[vec![9, 10]]).unwrap(), 0.0);
        let pred = vec![vec![3, 4, 5, 6], vec![8]];
        let v = mean_best_overlap(&[vec![1, 2, 3, 4]], &pred).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_best_overlap(&gt, &[]).unwrap(), 0.0);
    }

    #[test]
    fn mbo_monotone_in_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let make = |rng: &mut ChaCha8Rng| -> Vec<usize> {
                let mut v: Vec<usize> = (0..rng.gen_range(1..10))
                    .map(|_| rng.gen_range(0..30))
                    .collect();
                v.sort_unstable();
                v.dedup();
                v
            };
            let gt: Vec<Vec<usize>> = (0..3).map(|_| make(&mut rng)).collect();
            let mut pred: Vec<Vec<usize>> = (0..2).map(|_| make(&mut rng)).collect();
            let before = mean_best_overlap(&gt, &pred).unwrap();
            pred.push(gt[0].clone());
            let after = mean_best_overlap(&gt, &pred).unwrap();
            assert!(after >= before - 1e-15);
            assert!((0.0..=1.0).contains(&after));
        }
    }

    #[test]
    fn knn_segmentation_examples() {
        let memory = array![[1.0f64, 0.0], [0.0, 1.0], [0.7, 0.7]];
        let labels = [3u32, 5, 9];
        let pred = knn_dense_segmentation(&memory, &labels, &memory, 1).unwrap();
        assert_eq!(pred, vec![3, 5, 9]);

        let one_label = [4u32, 4, 4];
        let pred = knn_dense_segmentation(&memory, &one_label, &memory, 3).unwrap();
        assert_eq!(pred, vec![4, 4, 4]);

        // 2-d toy with majority vote
        let memory = array![[0.9f64, 0.1], [0.8, 0.2], [0.1, 0.9]];
        let labels = [1u32, 1, 2];
        let query = array![[1.0f64, 0.0]];
        let pred = knn_dense_segmentation(&memory, &labels, &query, 3).unwrap();
        assert_eq!(pred, vec![1]);
    }

    #[test]
    fn knn_vote_tie_takes_lower_label() {
        let memory = array![[1.0f64, 0.0], [0.0, 1.0]];
        let labels = [7u32, 2];
        let query = array![[0.7f64, 0.7]];
        let pred = knn_dense_segmentation(&memory, &labels, &query, 2).unwrap();
        assert_eq!(pred, vec![2]);
    }

    #[test]
    fn pca_degenerate_and_range() {
        // rank-1 features: first channel carries everything, others zero
        let feats = Array2::from_shape_fn((4, 6), |(i, _)| i as f64);
        let img = pca_feature_map(&feats, PcaRange::First, (2, 2)).unwrap();
        let ch0: Vec<f64> = (0..4).map(|i| img[[i / 2, i % 2, 0]]).collect();
        assert!(ch0.iter().cloned().fold(f64::NEG_INFINITY, f64::max) == 1.0);
        assert!(ch0.iter().cloned().fold(f64::INFINITY, f64::min) == 0.0);
        for ch in 1..3 {
            for i in 0..4 {
                assert_eq!(img[[i / 2, i % 2, ch]], 0.0);
            }
        }
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pca_one_hot_axes_separate() {
        // three one-hot directions: components 1-3 give maximally distinct
        // colors after min-max normalization
        let feats = array![
            [1.0f64, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0]
        ];
        let img = pca_feature_map(&feats, PcaRange::First, (1, 4)).unwrap();
        for ch in 0..3 {
            let col: Vec<f64> = (0..4).map(|i| img[[0, i, ch]]).collect();
            assert!((col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1.0).abs() < 1e-12);
            assert!(col.iter().cloned().fold(f64::INFINITY, f64::min).abs() < 1e-12);
        }
        // distinct colors per one-hot patch
        let colors: Vec<Vec<u8>> = (0..3)
            .map(|i| (0..3).map(|c| (img[[0, i, c]] * 255.0) as u8).collect())
            .collect();
        assert_ne!(colors[0], colors[1]);
        assert_ne!(colors[1], colors[2]);
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let raw = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
            let sym = (&raw + &raw.t()) / 2.0;
            let (vals, vecs) = symmetric_eigen(&sym);
            // A v_i = lambda_i v_i
            for i in 0..n {
                let v = vecs.column(i);
                let av = sym.dot(&v);
                for r in 0..n {
                    assert!((av[r] - vals[i] * v[r]).abs() < 1e-8);
                }
            }
            // descending order
            for i in 1..n {
                assert!(vals[i - 1] >= vals[i] - 1e-12);
            }
        }
    }

    #[test]
    fn mean_iou_basics() {
        let pred = [1u32, 1, 2, 2];
        let gt = [1u32, 1, 2, 2];
        assert_eq!(mean_iou(&pred, &gt).unwrap(), 1.0);
        let pred = [1u32, 2, 1, 2];
        let v = mean_iou(&pred, &gt).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ari_bounds(a in prop::collection::vec(0u32..4, 2..30),
                      b_seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(b_seed);
            let b: Vec<u32> = a.iter().map(|_| rng.gen_range(0..4)).collect();
            let v = adjusted_rand_index(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }
}
