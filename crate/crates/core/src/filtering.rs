//! Cross-view patch filtering and the alternative supervision strategies.
//!
//! A patch is supervised only when it is a mutual k-nearest neighbor of its
//! aligned counterpart in the other view's teacher features — a proxy for
//! target quality while the bootstrapped teacher is still uninformative.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMetric {
    Cosine,
    Euclidean,
}

impl std::str::FromStr for FilterMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(FilterMetric::Cosine),
            "euclidean" => Ok(FilterMetric::Euclidean),
            other => Err(Error::Config(format!("unknown filter metric {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisionStrategy {
    /// Mutual k-NN mask between aligned teacher features.
    CrossViewFilter,
    /// Supervise all patches with a weight ramped over the run.
    AllIncreasingWeight,
    /// Bernoulli keep-mask with keep probability ramped over the run.
    RandomDropDecay,
}

impl std::str::FromStr for SupervisionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_view_filter" => Ok(SupervisionStrategy::CrossViewFilter),
            "all_increasing_weight" => Ok(SupervisionStrategy::AllIncreasingWeight),
            "random_drop_decay" => Ok(SupervisionStrategy::RandomDropDecay),
            other => Err(Error::Config(format!("unknown supervision strategy {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub k: usize,
    pub metric: FilterMetric,
    pub strategy: SupervisionStrategy,
    /// Start/end of the strategy schedule (weight or keep probability).
    pub strategy_start: f64,
    pub strategy_end: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            k: 3,
            metric: FilterMetric::Cosine,
            strategy: SupervisionStrategy::CrossViewFilter,
            strategy_start: 0.1,
            strategy_end: 1.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("filter_k must be >= 1".into()));
        }
        for v in [self.strategy_start, self.strategy_end] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config("strategy weights must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Per-patch supervision weights in `[0, 1]` (binary for the cross-view
/// filter).
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionMask<T: Scalar> {
    pub weights: Array1<T>,
}

impl<T: Scalar> SupervisionMask<T> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn distance<T: Scalar>(a: &ndarray::ArrayView1<'_, T>, b: &ndarray::ArrayView1<'_, T>, metric: FilterMetric) -> f64 {
    match metric {
        FilterMetric::Cosine => {
            let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x * y).to_f64s()).sum();
            let na: f64 = a.iter().map(|&x| (x * x).to_f64s()).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|&x| (x * x).to_f64s()).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                // zero rows are maximally distant under cosine
                f64::INFINITY
            } else {
                1.0 - dot / (na * nb)
            }
        }
        FilterMetric::Euclidean => a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| {
                let d = (x - y).to_f64s();
                d * d
            })
            .sum::<f64>()
            .sqrt(),
    }
}

/// Indices of the `k` nearest rows of `b` for every row of `a`; ties broken
/// toward the lower index.
pub fn knn_sets<T: Scalar>(
    a: &Array2<T>,
    b: &Array2<T>,
    k: usize,
    metric: FilterMetric,
) -> Result<Vec<Vec<usize>>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if k == 0 || k > b.nrows() {
        return Err(Error::Config(format!(
            "k = {} out of range for {} rows",
            k,
            b.nrows()
        )));
    }
    let mut out = Vec::with_capacity(a.nrows());
    for i in 0..a.nrows() {
        let ai = a.row(i);
        let mut dists: Vec<(f64, usize)> = (0..b.nrows())
            .map(|j| (distance(&ai, &b.row(j), metric), j))
            .collect();
        dists.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal).then(x.1.cmp(&y.1)));
        out.push(dists[..k].iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Binary mutual-k-NN mask between aligned teacher patch features; symmetric
/// in its two inputs.
pub fn filter_mask<T: Scalar>(
    z_hat_t1: &Array2<T>,
    z_hat_t2: &Array2<T>,
    cfg: &FilterConfig,
) -> Result<SupervisionMask<T>> {
    if z_hat_t1.dim() != z_hat_t2.dim() {
        return Err(Error::Shape("aligned feature shapes differ".into()));
    }
    let n = z_hat_t1.nrows();
    let k = cfg.k.min(n);
    let fwd = knn_sets(z_hat_t1, z_hat_t2, k, cfg.metric)?;
    let bwd = knn_sets(z_hat_t2, z_hat_t1, k, cfg.metric)?;
    let weights = Array1::from_shape_fn(n, |i| {
        if fwd[i].contains(&i) && bwd[i].contains(&i) {
            T::one()
        } else {
            T::zero()
        }
    });
    Ok(SupervisionMask { weights })
}

/// Resolve the per-step supervision weights for the configured strategy.
pub fn supervision_weights<T: Scalar, R: Rng>(
    step: usize,
    steps_total: usize,
    mask: &SupervisionMask<T>,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Array1<T> {
    let frac = if steps_total == 0 {
        1.0
    } else {
        (step as f64 / steps_total as f64).clamp(0.0, 1.0)
    };
    let level = cfg.strategy_start + (cfg.strategy_end - cfg.strategy_start) * frac;
    match cfg.strategy {
        SupervisionStrategy::CrossViewFilter => mask.weights.clone(),
        SupervisionStrategy::AllIncreasingWeight => {
            Array1::from_elem(mask.len(), T::from_f64(level))
        }
        SupervisionStrategy::RandomDropDecay => Array1::from_shape_fn(mask.len(), |_| {
            if rng.gen::<f64>() < level {
                T::one()
            } else {
                T::zero()
            }
        }),
    }
}

/// Mean of the weight vector.
pub fn supervised_fraction<T: Scalar>(weights: &Array1<T>) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Shape("empty weight vector".into()));
    }
    Ok(weights.iter().map(|w| w.to_f64s()).sum::<f64>() / weights.len() as f64)
}
