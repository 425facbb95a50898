//! Projection heads, centered/sharpened distributions, the patch-level and
//! global cross-view losses, EMA updates, center updates, and the training
//! schedules.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{l2_normalize_rows, softmax_array, Graph, Var};
use crate::params::{trunc_normal, zeros, ParamSet};
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Output (prototype) dimension `L`.
    pub out_dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            out_dim: 256,
            hidden: 128,
            bottleneck: 64,
            layers: 3,
        }
    }
}

impl HeadConfig {
    pub fn paper() -> Self {
        HeadConfig {
            out_dim: 8192,
            hidden: 2048,
            bottleneck: 256,
            layers: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim < 2 {
            return Err(Error::Config("head out_dim must be >= 2".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("head layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sharpening/centering state plus loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState<T: Scalar> {
    /// Patch-level center, length `L`.
    pub center_patch: Array1<T>,
    /// Global-level center, length `L`.
    pub center_global: Array1<T>,
    /// Student temperature.
    pub tau: f64,
    /// Teacher temperature (live value; follows the warmup schedule).
    pub tau_t: f64,
    pub center_momentum: f64,
    pub lambda_oc: f64,
    pub lambda_global: f64,
}

impl<T: Scalar> DistillState<T> {
    pub fn new(out_dim: usize) -> Self {
        DistillState {
            center_patch: Array1::zeros(out_dim),
            center_global: Array1::zeros(out_dim),
            tau: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            lambda_oc: 1.0,
            lambda_global: 1.0,
        }
    }
}

/// Install a projection head under `prefix/` (MLP into a normalized
/// bottleneck, then a weight-normalized prototype layer).
pub fn init_head_params<T: Scalar, R: Rng>(
    rng: &mut R,
    cfg: &HeadConfig,
    in_dim: usize,
    prefix: &str,
    params: &mut ParamSet<T>,
) {
    let std = 0.02;
    let mut d = in_dim;
    for l in 0..cfg.layers {
        let out = if l + 1 == cfg.layers {
            cfg.bottleneck
        } else {
            cfg.hidden
        };
        params.insert(format!("{prefix}/mlp{l}/w"), trunc_normal(rng, &[d, out], std));
        params.insert(format!("{prefix}/mlp{l}/b"), zeros(&[1, out]));
        d = out;
    }
    // Direction vectors of the prototype layer; applied with unit row norm.
    params.insert(
        format!("{prefix}/proto"),
        trunc_normal(rng, &[cfg.out_dim, cfg.bottleneck], std),
    );
}

/// Tape forward pass of the projection head, applied row-wise.
pub fn project_vars<'g, T: Scalar>(
    g: &'g Graph<T>,
    feats: Var<'g, T>,
    params: &ParamSet<T>,
    cfg: &HeadConfig,
    prefix: &str,
) -> Var<'g, T> {
    let mut x = feats;
    for l in 0..cfg.layers {
        let w = g.param(&format!("{prefix}/mlp{l}/w"), params.get(&format!("{prefix}/mlp{l}/w")).clone());
        let b = g.param(&format!("{prefix}/mlp{l}/b"), params.get(&format!("{prefix}/mlp{l}/b")).clone());
        x = x.matmul(w).add_rowvec(b);
        if l + 1 < cfg.layers {
            x = x.gelu();
        }
    }
    x = l2_normalize_rows(x);
    let proto = g.param(&format!("{prefix}/proto"), params.get(&format!("{prefix}/proto")).clone());
    x.matmul(l2_normalize_rows(proto).transpose())
}

/// Project plain features to logits (`... x L`).
pub fn project<T: Scalar>(
    features: &Array2<T>,
    params: &ParamSet<T>,
    cfg: &HeadConfig,
) -> Array2<T> {
    let g: Graph<T> = Graph::new();
    let f = g.constant(features.clone().into_dyn());
    project_vars(&g, f, params, cfg, "head")
        .eval()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d")
}

/// Row-wise `softmax(logits / tau)`.
pub fn student_distribution<T: Scalar>(logits: &Array2<T>, tau: f64) -> Array2<T> {
    assert!(tau > 0.0, "tau must be positive");
    let inv = T::from_f64(1.0 / tau);
    let scaled = logits.mapv(|x| x * inv);
    softmax_array(&scaled.view(), 1)
}

/// Row-wise `softmax((logits - center) / tau_t)`; teacher outputs never
/// carry gradients, so this operates on plain arrays only.
pub fn teacher_distribution<T: Scalar>(
    logits: &Array2<T>,
    center: &Array1<T>,
    tau_t: f64,
) -> Array2<T> {
    assert!(tau_t > 0.0, "tau_t must be positive");
    let inv = T::from_f64(1.0 / tau_t);
    let mut shifted = logits.clone();
    for mut row in shifted.axis_iter_mut(Axis(0)) {
        row.zip_mut_with(center, |x, &c| *x = (*x - c) * inv);
    }
    softmax_array(&shifted.view(), 1)
}

/// `H(a, b) = sum_j -a_j log b_j`, with `b` clamped below at 1e-12.
pub fn cross_entropy<T: Scalar>(a: &ArrayView1<'_, T>, b: &ArrayView1<'_, T>) -> T {
    let clamp = T::from_f64(LOG_CLAMP);
    a.iter()
        .zip(b.iter())
        .map(|(&ai, &bi)| -ai * bi.max(clamp).ln())
        .sum()
}

fn check_same_shape<T: Scalar>(mats: &[&Array2<T>]) -> Result<()> {
    let dim = mats[0].dim();
    if mats.iter().any(|m| m.dim() != dim) {
        return Err(Error::Shape("distribution shapes differ".into()));
    }
    Ok(())
}

/// Masked patch-level self-distillation loss over aligned distributions.
///
/// With `cross_view` the teacher of one view supervises the student of the
/// other; otherwise teacher and student of the same view are paired. The
/// weighted sum is normalized by `max(sum weights, 1)`.
pub fn loss_object_centric<T: Scalar>(
    p1: &Array2<T>,
    p2: &Array2<T>,
    p_t1: &Array2<T>,
    p_t2: &Array2<T>,
    weights: &Array1<T>,
    cross_view: bool,
) -> Result<T> {
    check_same_shape(&[p1, p2, p_t1, p_t2])?;
    if weights.len() != p1.nrows() {
        return Err(Error::Shape(format!(
            "{} weights for {} patches",
            weights.len(),
            p1.nrows()
        )));
    }
    let (s1, s2) = if cross_view { (p2, p1) } else { (p1, p2) };
    let mut acc = T::zero();
    for i in 0..p1.nrows() {
        let w = weights[i];
        if w == T::zero() {
            continue;
        }
        acc = acc
            + w * (cross_entropy(&p_t1.row(i), &s1.row(i))
                + cross_entropy(&p_t2.row(i), &s2.row(i)));
    }
    let denom = weights.sum().max(T::one());
    Ok(T::from_f64(0.5) * acc / denom)
}

/// Cross-view global loss over single-row distributions.
pub fn loss_global<T: Scalar>(
    p1: &Array2<T>,
    p2: &Array2<T>,
    p_t1: &Array2<T>,
    p_t2: &Array2<T>,
) -> Result<T> {
    check_same_shape(&[p1, p2, p_t1, p_t2])?;
    Ok(T::from_f64(0.5)
        * (cross_entropy(&p_t1.row(0), &p2.row(0)) + cross_entropy(&p_t2.row(0), &p1.row(0))))
}

/// `lambda_oc * l_oc + lambda_global * l_global`.
pub fn total_loss<T: Scalar>(l_oc: T, l_global: T, state: &DistillState<T>) -> T {
    T::from_f64(state.lambda_oc) * l_oc + T::from_f64(state.lambda_global) * l_global
}

/// Tape-side weighted cross-entropy of constant teacher rows against
/// student logits: `-sum_i w_i sum_j a_ij log_softmax(x_i / tau)_j / norm`.
///
/// Numerically identical (up to the log clamp, which never binds for
/// softmax outputs above 1e-12) to composing [`student_distribution`] and
/// [`cross_entropy`].
pub fn masked_ce_vars<'g, T: Scalar>(
    _g: &'g Graph<T>,
    teacher_rows: &Array2<T>,
    student_logits: Var<'g, T>,
    tau: f64,
    weights: &Array1<T>,
    norm: T,
) -> Var<'g, T> {
    let logp = student_logits
        .scale(T::from_f64(1.0 / tau))
        .log_softmax_rows();
    let w_col = weights.clone().insert_axis(Axis(1)).into_dyn();
    logp.mul_const(&teacher_rows.clone().into_dyn())
        .sum_axis_keep(1)
        .mul_const(&w_col)
        .sum_all()
        .scale(-T::one() / norm)
}

/// `theta_t <- mu * theta_t + (1 - mu) * theta`, elementwise across all
/// entries present in the teacher set.
pub fn ema_update<T: Scalar>(
    teacher: &mut ParamSet<T>,
    student: &ParamSet<T>,
    momentum: f64,
) -> Result<()> {
    let mu = T::from_f64(momentum);
    let one_minus = T::from_f64(1.0 - momentum);
    for (name, t) in teacher.iter_mut() {
        if !student.contains(name) {
            return Err(Error::Shape(format!("student missing parameter {name}")));
        }
        let s = student.get(name);
        if s.shape() != t.shape() {
            return Err(Error::Shape(format!("parameter {name} shape differs")));
        }
        t.zip_mut_with(s, |tv, &sv| *tv = mu * *tv + one_minus * sv);
    }
    Ok(())
}

/// `center <- m_c * center + (1 - m_c) * mean(batch rows)`.
pub fn update_center<T: Scalar>(center: &mut Array1<T>, teacher_logits: &Array2<T>, m_c: f64) {
    if teacher_logits.nrows() == 0 {
        return;
    }
    let inv_n = T::from_f64(1.0 / teacher_logits.nrows() as f64);
    let mean = teacher_logits.sum_axis(Axis(0)).mapv(|x| x * inv_n);
    let mc = T::from_f64(m_c);
    let rest = T::from_f64(1.0 - m_c);
    center.zip_mut_with(&mean, |c, &m| *c = mc * *c + rest * m);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    TeacherMomentum,
    TauT,
    Lr,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_momentum" => Ok(ScheduleKind::TeacherMomentum),
            "tau_t" => Ok(ScheduleKind::TauT),
            "lr" => Ok(ScheduleKind::Lr),
            other => Err(Error::Config(format!("unknown schedule kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub lr_warmup_epochs: usize,
    pub teacher_momentum_start: f64,
    pub teacher_momentum_end: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    pub tau_t_warmup_epochs: usize,
    pub total_epochs: usize,
    pub sharpening_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 1e-3,
            lr_warmup_epochs: 5,
            teacher_momentum_start: 0.996,
            teacher_momentum_end: 1.0,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_epochs: 6,
            total_epochs: 60,
            sharpening_epochs: 20,
        }
    }
}

impl ScheduleConfig {
    pub fn paper() -> Self {
        ScheduleConfig {
            base_lr: 3e-4,
            lr_warmup_epochs: 10,
            teacher_momentum_start: 0.996,
            teacher_momentum_end: 1.0,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_epochs: 30,
            total_epochs: 300,
            sharpening_epochs: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.teacher_momentum_start
            && self.teacher_momentum_start <= 1.0
            && 0.0 < self.teacher_momentum_end
            && self.teacher_momentum_end <= 1.0)
        {
            return Err(Error::Config("teacher momentum must lie in (0, 1]".into()));
        }
        if self.lr_warmup_epochs > self.total_epochs + self.sharpening_epochs
            || self.tau_t_warmup_epochs > self.total_epochs
        {
            return Err(Error::Config("warmup longer than the schedule span".into()));
        }
        Ok(())
    }

    /// Epoch span of a schedule. The teacher momentum and teacher
    /// temperature run over the self-distillation stage only (the teacher is
    /// frozen during sharpening); the learning rate spans both stages.
    pub fn span_epochs(&self, kind: ScheduleKind) -> usize {
        match kind {
            ScheduleKind::Lr => self.total_epochs + self.sharpening_epochs,
            _ => self.total_epochs,
        }
    }
}

/// Value of a schedule at `step` out of `steps_total`, where `steps_total`
/// covers [`ScheduleConfig::span_epochs`] of the given kind.
pub fn schedule_value(
    kind: ScheduleKind,
    step: usize,
    steps_total: usize,
    cfg: &ScheduleConfig,
) -> f64 {
    let t = steps_total.max(1) as f64;
    let s = (step as f64).min(t);
    let steps_per_epoch = t / cfg.span_epochs(kind).max(1) as f64;
    match kind {
        ScheduleKind::TeacherMomentum => {
            let (a, b) = (cfg.teacher_momentum_start, cfg.teacher_momentum_end);
            b - (b - a) * (((std::f64::consts::PI * s / t).cos()) + 1.0) / 2.0
        }
        ScheduleKind::TauT => {
            let warm = (cfg.tau_t_warmup_epochs as f64 * steps_per_epoch).max(0.0);
            if warm == 0.0 || s >= warm {
                cfg.tau_t_end
            } else {
                cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * s / warm
            }
        }
        ScheduleKind::Lr => {
            let warm = cfg.lr_warmup_epochs as f64 * steps_per_epoch;
            if s < warm {
                cfg.base_lr * s / warm
            } else if t <= warm {
                cfg.base_lr
            } else {
                let progress = (s - warm) / (t - warm);
                cfg.base_lr * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_shapes() {
        let cfg = HeadConfig {
            out_dim: 16,
            hidden: 8,
            bottleneck: 4,
            layers: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps: ParamSet<f64> = ParamSet::new();
        init_head_params(&mut rng, &cfg, 6, "head", &mut ps);
        let feats = Array2::from_shape_fn((5, 6), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let out = project(&feats, &ps, &cfg);
        assert_eq!(out.dim(), (5, 16));
        let global = Array2::from_shape_fn((1, 6), |_| 0.3);
        assert_eq!(project(&global, &ps, &cfg).dim(), (1, 16));
    }

    #[test]
    fn student_distribution_examples() {
        let tau = 0.7;
        let p = student_distribution(&array![[0.0f64, 0.0]], tau);
        assert!((p[[0, 0]] - 0.5).abs() < 1e-12);

        // logits (tau ln 3, 0) -> (0.75, 0.25)
        let p = student_distribution(&array![[tau * 3.0f64.ln(), 0.0]], tau);
        assert!((p[[0, 0]] - 0.75).abs() < 1e-12);
        assert!((p[[0, 1]] - 0.25).abs() < 1e-12);

        let p = student_distribution(&array![[1.0f64, 1.0, 1.0]], 0.3);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn teacher_distribution_examples() {
        let logits = array![[0.4f64, 1.3, -0.2]];
        let center = Array1::from_vec(vec![0.4, 1.3, -0.2]);
        let p = teacher_distribution(&logits, &center, 0.07);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));

        let zero = Array1::zeros(3);
        let a = teacher_distribution(&logits, &zero, 0.07);
        let b = student_distribution(&logits, 0.07);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));

        let tau_t = 0.07;
        let logits = array![[1.0f64, 1.0 + tau_t * 2.0f64.ln()]];
        let p = teacher_distribution(&logits, &Array1::zeros(2), tau_t);
        assert!((p[[0, 0]] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[[0, 1]] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = array![1.0f64, 0.0];
        assert_eq!(cross_entropy(&one_hot.view(), &one_hot.view()), 0.0);
        let even = array![0.5f64, 0.5];
        let ce = cross_entropy(&one_hot.view(), &even.view());
        assert!((ce - 2.0f64.ln()).abs() < 1e-12);
        let l = 8;
        let u = Array1::from_elem(l, 1.0 / l as f64);
        let ce = cross_entropy(&u.view(), &u.view());
        assert!((ce - (l as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn object_centric_loss_examples() {
        let n = 4;
        let p = Array2::from_elem((n, 2), 0.5);
        let t = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let zero_w = Array1::zeros(n);
        let l = loss_object_centric(&p, &p, &t, &t, &zero_w, true).unwrap();
        assert_eq!(l, 0.0);

        // single patch worked example
        let p1 = array![[0.5f64, 0.5]];
        let p2 = array![[0.5f64, 0.5]];
        let t1 = array![[1.0f64, 0.0]];
        let t2 = array![[1.0f64, 0.0]];
        let w = array![1.0f64];
        let l = loss_object_centric(&p1, &p2, &t1, &t2, &w, true).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);

        // student equals teacher one-hots -> 0
        let hot = array![[1.0f64, 0.0], [0.0, 1.0]];
        let w = array![1.0f64, 1.0];
        let l = loss_object_centric(&hot, &hot, &hot, &hot, &w, true).unwrap();
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn oc_loss_within_view_pairs_same_view() {
        let p1 = array![[1.0f64, 0.0]];
        let p2 = array![[0.5f64, 0.5]];
        let t1 = array![[1.0f64, 0.0]];
        let t2 = array![[1.0f64, 0.0]];
        let w = array![1.0f64];
        // within-view: H(t1,p1)=0, H(t2,p2)=ln2 -> ln2/2
        let l = loss_object_centric(&p1, &p2, &t1, &t2, &w, false).unwrap();
        assert!((l - 0.5 * 2.0f64.ln()).abs() < 1e-12);
        // cross-view: H(t1,p2)=ln2, H(t2,p1)=0 -> ln2/2 too, but swapped roles
        let l = loss_object_centric(&p1, &p2, &t1, &t2, &w, true).unwrap();
        assert!((l - 0.5 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn global_loss_examples() {
        let hot = array![[1.0f64, 0.0]];
        assert!(loss_global(&hot, &hot, &hot, &hot).unwrap().abs() < 1e-12);
        let even = array![[0.5f64, 0.5]];
        let l = loss_global(&even, &even, &hot, &hot).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
        // view swap symmetry
        let a = array![[0.7f64, 0.3]];
        let b = array![[0.2f64, 0.8]];
        let ta = array![[0.6f64, 0.4]];
        let tb = array![[0.1f64, 0.9]];
        let l12 = loss_global(&a, &b, &ta, &tb).unwrap();
        let l21 = loss_global(&b, &a, &tb, &ta).unwrap();
        assert!((l12 - l21).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let mut state: DistillState<f64> = DistillState::new(4);
        assert!((total_loss(0.3, 0.5, &state) - 0.8).abs() < 1e-12);
        state.lambda_oc = 0.0;
        assert!((total_loss(0.3, 0.5, &state) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ema_update_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut teacher: ParamSet<f64> = ParamSet::new();
        teacher.insert("w", trunc_normal(&mut rng, &[3, 3], 1.0));
        let frozen = teacher.clone();
        let mut student: ParamSet<f64> = ParamSet::new();
        student.insert("w", trunc_normal(&mut rng, &[3, 3], 1.0));

        let mut t = teacher.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, frozen);

        let mut t = teacher.clone();
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.get("w"), student.get("w"));

        let mut t: ParamSet<f64> = ParamSet::new();
        t.insert("w", ndarray::ArrayD::ones(ndarray::IxDyn(&[1])));
        let mut s: ParamSet<f64> = ParamSet::new();
        s.insert("w", ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])));
        ema_update(&mut t, &s, 0.996).unwrap();
        assert!((t.get("w").as_slice().unwrap()[0] - 0.996).abs() < 1e-12);

        let mut bad: ParamSet<f64> = ParamSet::new();
        bad.insert("other", ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])));
        assert!(ema_update(&mut t, &bad, 0.5).is_err());
    }

    #[test]
    fn center_update_examples() {
        let mut c = Array1::from_vec(vec![1.0f64, 2.0]);
        let batch = array![[1.0f64, 2.0], [1.0, 2.0]];
        update_center(&mut c, &batch, 0.9);
        assert_eq!(c, Array1::from_vec(vec![1.0, 2.0]));

        let mut c = Array1::from_vec(vec![9.0f64, 9.0]);
        let batch = array![[2.0f64, 4.0]];
        update_center(&mut c, &batch, 0.0);
        assert_eq!(c, Array1::from_vec(vec![2.0, 4.0]));

        let mut c = Array1::zeros(2);
        update_center(&mut c, &array![[2.0f64, 4.0]], 0.9);
        assert!((c[0] - 0.2).abs() < 1e-12 && (c[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = ScheduleConfig::paper();
        let t = 30_000;
        let m0 = schedule_value(ScheduleKind::TeacherMomentum, 0, t, &cfg);
        let mt = schedule_value(ScheduleKind::TeacherMomentum, t, t, &cfg);
        let mh = schedule_value(ScheduleKind::TeacherMomentum, t / 2, t, &cfg);
        assert!((m0 - 0.996).abs() < 1e-9);
        assert!((mt - 1.0).abs() < 1e-9);
        assert!((mh - 0.998).abs() < 1e-9);

        // tau_t: 0.04 at epoch 0, 0.07 at/after epoch 30 of 300
        let steps_per_epoch = 100;
        let t = steps_per_epoch * cfg.total_epochs;
        assert!((schedule_value(ScheduleKind::TauT, 0, t, &cfg) - 0.04).abs() < 1e-12);
        let at30 = schedule_value(ScheduleKind::TauT, 30 * steps_per_epoch, t, &cfg);
        assert!((at30 - 0.07).abs() < 1e-12);
        let at200 = schedule_value(ScheduleKind::TauT, 200 * steps_per_epoch, t, &cfg);
        assert!((at200 - 0.07).abs() < 1e-12);

        // lr: 0 at step 0, base at warmup end, ~0 at the very end
        let t_lr = steps_per_epoch * cfg.span_epochs(ScheduleKind::Lr);
        assert_eq!(schedule_value(ScheduleKind::Lr, 0, t_lr, &cfg), 0.0);
        let at_warm = schedule_value(ScheduleKind::Lr, 10 * steps_per_epoch, t_lr, &cfg);
        assert!((at_warm - cfg.base_lr).abs() < 1e-12);
        let at_end = schedule_value(ScheduleKind::Lr, t_lr, t_lr, &cfg);
        assert!(at_end.abs() < 1e-12);
    }

    #[test]
    fn masked_ce_matches_plain_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let l = 5;
        let logits = Array2::from_shape_fn((n, l), |_| rand::Rng::gen_range(&mut rng, -2.0..2.0));
        let t_logits = Array2::from_shape_fn((n, l), |_| rand::Rng::gen_range(&mut rng, -2.0..2.0));
        let center = Array1::zeros(l);
        let weights = Array1::from_shape_fn(n, |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let tau = 0.1;
        let teacher = teacher_distribution(&t_logits, &center, 0.07);
        let norm = f64::max(weights.sum(), 1.0);

        let g: Graph<f64> = Graph::new();
        let sl = g.constant(logits.clone().into_dyn());
        let tape = masked_ce_vars(&g, &teacher, sl, tau, &weights, norm).scalar_value();

        let student = student_distribution(&logits, tau);
        let mut plain = 0.0;
        for i in 0..n {
            plain += weights[i] * cross_entropy(&teacher.row(i), &student.row(i));
        }
        plain /= norm;
        assert!((tape - plain).abs() < 1e-10, "{tape} vs {plain}");
    }

    proptest! {
        #[test]
        fn gibbs_inequality(raw_a in prop::collection::vec(0.01f64..1.0, 6),
                            raw_b in prop::collection::vec(0.01f64..1.0, 6)) {
            let sa: f64 = raw_a.iter().sum();
            let sb: f64 = raw_b.iter().sum();
            let a = Array1::from_vec(raw_a.iter().map(|x| x / sa).collect());
            let b = Array1::from_vec(raw_b.iter().map(|x| x / sb).collect());
            let h_ab = cross_entropy(&a.view(), &b.view());
            let h_aa = cross_entropy(&a.view(), &a.view());
            prop_assert!(h_ab >= h_aa - 1e-12);
        }

        #[test]
        fn distributions_are_rows_of_simplex(vals in prop::collection::vec(-5.0f64..5.0, 12)) {
            let logits = Array2::from_shape_vec((3, 4), vals).unwrap();
            for p in [student_distribution(&logits, 0.1),
                      teacher_distribution(&logits, &Array1::zeros(4), 0.04)] {
                for row in p.axis_iter(Axis(0)) {
                    let s: f64 = row.sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                    prop_assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
                }
            }
        }

        #[test]
        fn ema_stays_between_endpoints(t in -2.0f64..2.0, s in -2.0f64..2.0, mu in 0.0f64..1.0) {
            let mut teacher: ParamSet<f64> = ParamSet::new();
            teacher.insert("w", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), t));
            let mut student: ParamSet<f64> = ParamSet::new();
            student.insert("w", ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), s));
            ema_update(&mut teacher, &student, mu).unwrap();
            let v = teacher.get("w").as_slice().unwrap()[0];
            prop_assert!(v >= t.min(s) - 1e-12 && v <= t.max(s) + 1e-12);
        }
    }

    #[test]
    fn oc_loss_view_swap_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let l = 4;
        let mk = |rng: &mut ChaCha8Rng| {
            let logits = Array2::from_shape_fn((n, l), |_| rand::Rng::gen_range(rng, -2.0..2.0));
            student_distribution(&logits, 0.1)
        };
        let (p1, p2, t1, t2) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let w = Array1::from_shape_fn(n, |i| if i == 2 { 0.0 } else { 1.0 });
        let a: f64 = loss_object_centric(&p1, &p2, &t1, &t2, &w, true).unwrap();
        let b: f64 = loss_object_centric(&p2, &p1, &t2, &t1, &w, true).unwrap();
        assert!((a - b).abs() < 1e-6);
    }
}
