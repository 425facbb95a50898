//! Quantitative slot-collapse measure.
//!
//! For a patch visible in both views at indices `i` (view 1) and `j`
//! (view 2), a content-coherent model reconstructs `q_{1,i}` closer to
//! `q_{2,j}` (same content) than to `q_{2,i}` (same position). The score is
//! the mean cosine-similarity gap over all correspondence pairs.

use ndarray::{Array2, ArrayView1};

use crate::geometry::CorrespondenceSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Default)]
pub struct CollapseReport {
    /// Mean similarity gap; `None` when no pairs were available.
    pub d: Option<f64>,
    pub num_pairs: usize,
    /// Per-image values for inspection (one entry per merged report).
    pub per_image: Vec<f64>,
}

fn cosine<T: Scalar>(a: &ArrayView1<'_, T>, b: &ArrayView1<'_, T>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x * y).to_f64s()).sum();
    let na: f64 = a.iter().map(|&x| (x * x).to_f64s()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x * x).to_f64s()).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Collapse score for one view pair's reconstructions.
pub fn collapse_score<T: Scalar>(
    q1: &Array2<T>,
    q2: &Array2<T>,
    corr: &CorrespondenceSet,
) -> CollapseReport {
    let n2 = q2.nrows();
    let mut sum = 0.0;
    let mut count = 0usize;
    for &(i, j) in &corr.pairs {
        if i >= q1.nrows() || j >= n2 || i >= n2 {
            // index i must be valid in view 2 as well (same-position term)
            continue;
        }
        sum += cosine(&q1.row(i), &q2.row(j)) - cosine(&q1.row(i), &q2.row(i));
        count += 1;
    }
    if count == 0 {
        CollapseReport {
            d: None,
            num_pairs: 0,
            per_image: Vec::new(),
        }
    } else {
        let d = sum / count as f64;
        CollapseReport {
            d: Some(d),
            num_pairs: count,
            per_image: vec![d],
        }
    }
}

/// Pool reports across a validation set: the aggregate `d` averages over all
/// pairs, per-image values are retained.
pub fn merge_reports(reports: &[CollapseReport]) -> CollapseReport {
    let mut weighted = 0.0;
    let mut pairs = 0usize;
    let mut per_image = Vec::new();
    for r in reports {
        if let Some(d) = r.d {
            weighted += d * r.num_pairs as f64;
            pairs += r.num_pairs;
        }
        per_image.extend_from_slice(&r.per_image);
    }
    CollapseReport {
        d: if pairs == 0 { None } else { Some(weighted / pairs as f64) },
        num_pairs: pairs,
        per_image,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_views_score_zero() {
        let q = array![[1.0f64, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let corr = CorrespondenceSet {
            pairs: (0..3).map(|i| (i, i)).collect(),
        };
        let r = collapse_score(&q, &q, &corr);
        assert_eq!(r.num_pairs, 3);
        assert!(r.d.unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_off_diagonal_pair() {
        let q1 = array![[1.0f64, 0.0], [0.5, 0.5]];
        let q2 = array![[0.0f64, 1.0], [1.0, 0.0]];
        let corr = CorrespondenceSet { pairs: vec![(0, 1)] };
        let r = collapse_score(&q1, &q2, &corr);
        assert!((r.d.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_features_score_zero() {
        let q1 = array![[1.0f64, 2.0], [3.0, 4.0]];
        let q2 = array![[0.3f64, 0.6], [0.3, 0.6]];
        let corr = CorrespondenceSet { pairs: vec![(0, 1), (1, 0)] };
        let r = collapse_score(&q1, &q2, &corr);
        assert!(r.d.unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_set_flagged() {
        let q = array![[1.0f64, 0.0]];
        let r = collapse_score(&q, &q, &CorrespondenceSet::default());
        assert_eq!(r.num_pairs, 0);
        assert!(r.d.is_none());
    }

    #[test]
    fn scale_invariance_of_rows() {
        let q1 = array![[1.0f64, 0.2], [0.4, 0.8]];
        let q2 = array![[0.5f64, 0.1], [0.6, 0.3]];
        let corr = CorrespondenceSet { pairs: vec![(0, 1), (1, 1)] };
        let base = collapse_score(&q1, &q2, &corr).d.unwrap();
        let scaled = collapse_score(&q1.mapv(|x| x * 7.0), &q2.mapv(|x| x * 0.01), &corr)
            .d
            .unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn merge_pools_pairs() {
        let a = CollapseReport { d: Some(1.0), num_pairs: 1, per_image: vec![1.0] };
        let b = CollapseReport { d: Some(0.0), num_pairs: 3, per_image: vec![0.0] };
        let m = merge_reports(&[a, b]);
        assert_eq!(m.num_pairs, 4);
        assert!((m.d.unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(m.per_image, vec![1.0, 0.0]);
    }
}
