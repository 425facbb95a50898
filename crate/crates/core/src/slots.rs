//! Slot attention encoder and spatial-broadcast MLP decoder.
//!
//! Slots compete for patches through a softmax over the slot axis, are
//! updated through a gated recurrent unit plus a residual MLP, and are
//! decoded back to the patch grid with per-slot alpha masks composited by a
//! softmax over slots.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{concat_rows, layer_norm, Graph, Var};
use crate::params::{trunc_normal, zeros, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SlotConfig {
    pub num_slots: usize,
    pub slot_dim: usize,
    /// Slot-attention layers, each with its own parameters.
    pub num_layers: usize,
    pub mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig {
            num_slots: 4,
            slot_dim: 32,
            num_layers: 3,
            mlp_hidden: 128,
            decoder_hidden: 256,
            decoder_layers: 3,
        }
    }
}

impl SlotConfig {
    /// Sizes used by the full-scale recipe this model is scaled down from.
    pub fn paper() -> Self {
        SlotConfig {
            num_slots: 7,
            slot_dim: 256,
            num_layers: 3,
            mlp_hidden: 1024,
            decoder_hidden: 2048,
            decoder_layers: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_slots == 0 || self.slot_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config(
                "num_slots, slot_dim and num_layers must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A set of slot vectors (`s x d_s`).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSet<T: Scalar> {
    pub slots: Array2<T>,
}

/// Decoder output: reconstruction, per-patch slot masks, per-slot features.
#[derive(Debug, Clone)]
pub struct DecodeResult<T: Scalar> {
    /// `N x d` reconstruction of the input patch representations.
    pub reconstruction: Array2<T>,
    /// `s x N`, softmax-normalized over slots per patch.
    pub alpha: Array2<T>,
    /// Per-slot decoded features, `s` matrices of `N x d`.
    pub per_slot_features: Vec<Array2<T>>,
}

/// Install slot-attention and decoder parameters. `feature_dim` is the patch
/// feature dimension the module reads and reconstructs; `num_positions` the
/// patch count the decoder broadcasts to.
pub fn init_slot_params<T: Scalar, R: Rng>(
    rng: &mut R,
    cfg: &SlotConfig,
    feature_dim: usize,
    num_positions: usize,
    params: &mut ParamSet<T>,
) {
    let ds = cfg.slot_dim;
    let std = 0.02;
    params.insert("slots/mu", trunc_normal(rng, &[1, ds], std));
    params.insert("slots/logsigma", zeros(&[1, ds]));
    params.insert("slots/input_ln/g", crate::params::ones(&[1, feature_dim]));
    params.insert("slots/input_ln/b", zeros(&[1, feature_dim]));
    for l in 0..cfg.num_layers {
        let pre = format!("slots/layer{l}");
        params.insert(format!("{pre}/ln/g"), crate::params::ones(&[1, ds]));
        params.insert(format!("{pre}/ln/b"), zeros(&[1, ds]));
        params.insert(format!("{pre}/wq"), trunc_normal(rng, &[ds, ds], std));
        params.insert(format!("{pre}/wk"), trunc_normal(rng, &[feature_dim, ds], std));
        params.insert(format!("{pre}/wv"), trunc_normal(rng, &[feature_dim, ds], std));
        for gate in ["r", "z"] {
            params.insert(format!("{pre}/gru/wi{gate}"), trunc_normal(rng, &[ds, ds], std));
            params.insert(format!("{pre}/gru/wh{gate}"), trunc_normal(rng, &[ds, ds], std));
            params.insert(format!("{pre}/gru/b{gate}"), zeros(&[1, ds]));
        }
        params.insert(format!("{pre}/gru/win"), trunc_normal(rng, &[ds, ds], std));
        params.insert(format!("{pre}/gru/whn"), trunc_normal(rng, &[ds, ds], std));
        params.insert(format!("{pre}/gru/bin"), zeros(&[1, ds]));
        params.insert(format!("{pre}/gru/bhn"), zeros(&[1, ds]));
        params.insert(format!("{pre}/mlp_ln/g"), crate::params::ones(&[1, ds]));
        params.insert(format!("{pre}/mlp_ln/b"), zeros(&[1, ds]));
        params.insert(format!("{pre}/mlp/w1"), trunc_normal(rng, &[ds, cfg.mlp_hidden], std));
        params.insert(format!("{pre}/mlp/b1"), zeros(&[1, cfg.mlp_hidden]));
        params.insert(format!("{pre}/mlp/w2"), trunc_normal(rng, &[cfg.mlp_hidden, ds], std));
        params.insert(format!("{pre}/mlp/b2"), zeros(&[1, ds]));
    }
    params.insert("dec/pos", trunc_normal(rng, &[num_positions, ds], std));
    let mut in_dim = ds;
    for l in 0..cfg.decoder_layers {
        let out_dim = if l + 1 == cfg.decoder_layers {
            feature_dim + 1
        } else {
            cfg.decoder_hidden
        };
        params.insert(format!("dec/mlp{l}/w"), trunc_normal(rng, &[in_dim, out_dim], std));
        params.insert(format!("dec/mlp{l}/b"), zeros(&[1, out_dim]));
        in_dim = out_dim;
    }
}

/// Sample initial slots as `mu + exp(logsigma) * eps`, `eps` standard normal
/// per slot and dimension.
pub fn init_slots<T: Scalar, R: Rng>(
    rng: &mut R,
    cfg: &SlotConfig,
    learned_mu: &Array1<T>,
    learned_logsigma: &Array1<T>,
) -> SlotSet<T> {
    let eps = sample_slot_noise::<T, R>(rng, cfg.num_slots, cfg.slot_dim);
    let mut slots = Array2::<T>::zeros((cfg.num_slots, cfg.slot_dim));
    for s in 0..cfg.num_slots {
        for j in 0..cfg.slot_dim {
            slots[[s, j]] = learned_mu[j] + learned_logsigma[j].exp() * eps[[s, j]];
        }
    }
    SlotSet { slots }
}

/// The standard-normal draws behind [`init_slots`], exposed so the training
/// tape can reuse the exact noise while keeping `mu`/`logsigma` trainable.
pub fn sample_slot_noise<T: Scalar, R: Rng>(rng: &mut R, s: usize, ds: usize) -> Array2<T> {
    Array2::from_shape_fn((s, ds), |_| {
        T::from_f64(StandardNormal.sample(rng))
    })
}

/// Tape version of slot initialization; gradients flow to `mu`/`logsigma`.
pub fn init_slots_vars<'g, T: Scalar>(
    g: &'g Graph<T>,
    noise: &Array2<T>,
    params: &ParamSet<T>,
) -> Var<'g, T> {
    let s = noise.nrows();
    let mu = g.param("slots/mu", params.get("slots/mu").clone());
    let logsigma = g.param("slots/logsigma", params.get("slots/logsigma").clone());
    let eps = g.constant(noise.clone().into_dyn());
    mu.broadcast_rows(s)
        .add(logsigma.exp().broadcast_rows(s).mul(eps))
}

fn gru_cell<'g, T: Scalar>(
    g: &'g Graph<T>,
    x: Var<'g, T>,
    h: Var<'g, T>,
    params: &ParamSet<T>,
    pre: &str,
) -> Var<'g, T> {
    let p = |n: &str| g.param(&format!("{pre}/gru/{n}"), params.get(&format!("{pre}/gru/{n}")).clone());
    let r = x
        .matmul(p("wir"))
        .add(h.matmul(p("whr")))
        .add_rowvec(p("br"))
        .sigmoid();
    let z = x
        .matmul(p("wiz"))
        .add(h.matmul(p("whz")))
        .add_rowvec(p("bz"))
        .sigmoid();
    let n = x
        .matmul(p("win"))
        .add_rowvec(p("bin"))
        .add(r.mul(h.matmul(p("whn")).add_rowvec(p("bhn"))))
        .tanh();
    // h' = (1 - z) * n + z * h
    z.affine(T::from_f64(-1.0), T::one()).mul(n).add(z.mul(h))
}

/// Tape forward pass of the slot encoder. Returns final slots and the
/// per-layer attention over slots (each `s x N`, columns summing to 1).
pub fn slot_encode_vars<'g, T: Scalar>(
    g: &'g Graph<T>,
    patches: Var<'g, T>,
    initial: Var<'g, T>,
    params: &ParamSet<T>,
    cfg: &SlotConfig,
) -> (Var<'g, T>, Vec<Var<'g, T>>) {
    let inputs = layer_norm(
        patches,
        g.param("slots/input_ln/g", params.get("slots/input_ln/g").clone()),
        g.param("slots/input_ln/b", params.get("slots/input_ln/b").clone()),
    );
    let scale = T::from_f64(1.0 / (cfg.slot_dim as f64).sqrt());
    let eps = T::from_f64(1e-8);
    let mut slots = initial;
    let mut attn_maps = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let pre = format!("slots/layer{l}");
        let p = |n: &str| g.param(&format!("{pre}/{n}"), params.get(&format!("{pre}/{n}")).clone());
        let q = layer_norm(slots, p("ln/g"), p("ln/b")).matmul(p("wq"));
        let k = inputs.matmul(p("wk"));
        let v = inputs.matmul(p("wv"));
        let logits = q.matmul(k.transpose()).scale(scale);
        let attn = logits.softmax(0);
        attn_maps.push(attn);
        let shifted = attn.affine(T::one(), eps);
        let weights = shifted.div_colvec(shifted.sum_axis_keep(1));
        let updates = weights.matmul(v);
        slots = gru_cell(g, updates, slots, params, &pre);
        let m = layer_norm(slots, p("mlp_ln/g"), p("mlp_ln/b"))
            .matmul(p("mlp/w1"))
            .add_rowvec(p("mlp/b1"))
            .gelu()
            .matmul(p("mlp/w2"))
            .add_rowvec(p("mlp/b2"));
        slots = slots.add(m);
    }
    (slots, attn_maps)
}

/// Plain-array slot encoding.
pub fn slot_encode<T: Scalar>(
    patches: &Array2<T>,
    initial: &SlotSet<T>,
    params: &ParamSet<T>,
    cfg: &SlotConfig,
) -> Result<(SlotSet<T>, Vec<Array2<T>>)> {
    cfg.validate()?;
    if initial.slots.dim() != (cfg.num_slots, cfg.slot_dim) {
        return Err(Error::Shape(format!(
            "initial slots {:?} do not match config ({}, {})",
            initial.slots.dim(),
            cfg.num_slots,
            cfg.slot_dim
        )));
    }
    if patches.ncols() != params.get("slots/input_ln/g").len() {
        return Err(Error::Shape(format!(
            "patch dim {} does not match slot module input dim {}",
            patches.ncols(),
            params.get("slots/input_ln/g").len()
        )));
    }
    let g: Graph<T> = Graph::new();
    let p = g.constant(patches.clone().into_dyn());
    let init = g.constant(initial.slots.clone().into_dyn());
    let (slots, attn) = slot_encode_vars(&g, p, init, params, cfg);
    Ok((
        SlotSet {
            slots: slots.eval().into_dimensionality::<ndarray::Ix2>().expect("2-d"),
        },
        attn.into_iter()
            .map(|a| a.eval().into_dimensionality::<ndarray::Ix2>().expect("2-d"))
            .collect(),
    ))
}

/// Tape forward pass of the spatial-broadcast decoder.
pub fn slot_decode_vars<'g, T: Scalar>(
    g: &'g Graph<T>,
    slots: Var<'g, T>,
    num_positions: usize,
    params: &ParamSet<T>,
    cfg: &SlotConfig,
) -> (Var<'g, T>, Var<'g, T>, Vec<Var<'g, T>>) {
    let s = slots.shape()[0];
    let pos = g.param("dec/pos", params.get("dec/pos").clone());
    let mut tiles = Vec::with_capacity(s);
    for k in 0..s {
        tiles.push(slots.slice_rows(k, k + 1).broadcast_rows(num_positions).add(pos));
    }
    let mut x = concat_rows(g, &tiles);
    for l in 0..cfg.decoder_layers {
        let w = g.param(&format!("dec/mlp{l}/w"), params.get(&format!("dec/mlp{l}/w")).clone());
        let b = g.param(&format!("dec/mlp{l}/b"), params.get(&format!("dec/mlp{l}/b")).clone());
        x = x.matmul(w).add_rowvec(b);
        if l + 1 < cfg.decoder_layers {
            x = x.gelu();
        }
    }
    let d = x.shape()[1] - 1;
    let mut feats = Vec::with_capacity(s);
    let mut alpha_rows = Vec::with_capacity(s);
    for k in 0..s {
        let block = x.slice_rows(k * num_positions, (k + 1) * num_positions);
        feats.push(block.slice_cols(0, d));
        alpha_rows.push(block.slice_cols(d, d + 1).transpose());
    }
    let alpha = concat_rows(g, &alpha_rows).softmax(0);
    let mut recon = feats[0].mul_colvec(alpha.slice_rows(0, 1).transpose());
    for k in 1..s {
        recon = recon.add(feats[k].mul_colvec(alpha.slice_rows(k, k + 1).transpose()));
    }
    (recon, alpha, feats)
}

/// Plain-array decoding.
pub fn slot_decode<T: Scalar>(
    slots: &SlotSet<T>,
    num_positions: usize,
    params: &ParamSet<T>,
    cfg: &SlotConfig,
) -> DecodeResult<T> {
    let g: Graph<T> = Graph::new();
    let sv = g.constant(slots.slots.clone().into_dyn());
    let (recon, alpha, feats) = slot_decode_vars(&g, sv, num_positions, params, cfg);
    DecodeResult {
        reconstruction: recon.eval().into_dimensionality::<ndarray::Ix2>().expect("2-d"),
        alpha: alpha.eval().into_dimensionality::<ndarray::Ix2>().expect("2-d"),
        per_slot_features: feats
            .into_iter()
            .map(|f| f.eval().into_dimensionality::<ndarray::Ix2>().expect("2-d"))
            .collect(),
    }
}

/// Per-patch argmax over slots (ties to the lowest slot index), upsampled to
/// pixel resolution with nearest neighbor.
pub fn segmentation_from_alpha<T: Scalar>(
    alpha: &Array2<T>,
    grid: (usize, usize),
    image: (usize, usize),
) -> Array2<u32> {
    let (gr, gc) = grid;
    let n = alpha.ncols();
    assert_eq!(gr * gc, n, "grid dims must multiply to N");
    let mut patch_labels = vec![0u32; n];
    for i in 0..n {
        let mut best = 0usize;
        let mut best_v = alpha[[0, i]];
        for s in 1..alpha.nrows() {
            if alpha[[s, i]] > best_v {
                best_v = alpha[[s, i]];
                best = s;
            }
        }
        patch_labels[i] = best as u32;
    }
    let (h, w) = image;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let pr = (y * gr / h).min(gr - 1);
        let pc = (x * gc / w).min(gc - 1);
        patch_labels[pr * gc + pc]
    })
}

/// Column sums of alpha (softmax over slots) — diagnostics and tests.
pub fn alpha_column_sums<T: Scalar>(alpha: &Array2<T>) -> Array1<T> {
    alpha.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_cfg() -> SlotConfig {
        SlotConfig {
            num_slots: 2,
            slot_dim: 8,
            num_layers: 2,
            mlp_hidden: 8,
            decoder_hidden: 8,
            decoder_layers: 3,
        }
    }

    fn setup(cfg: &SlotConfig, d: usize, n: usize, seed: u64) -> (ParamSet<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        init_slot_params(&mut rng, cfg, d, n, &mut ps);
        let patches = Array2::from_shape_fn((n, d), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        (ps, patches)
    }

    #[test]
    fn init_slots_degenerate_sigma_and_determinism() {
        let cfg = SlotConfig {
            num_slots: 7,
            slot_dim: 256,
            ..SlotConfig::default()
        };
        let mu = Array1::from_elem(256, 0.5f64);
        let logsigma = Array1::from_elem(256, -80.0f64);
        let out = init_slots(&mut ChaCha8Rng::seed_from_u64(0), &cfg, &mu, &logsigma);
        assert_eq!(out.slots.dim(), (7, 256));
        assert!(out.slots.iter().all(|x| (x - 0.5).abs() < 1e-12));

        let logsigma = Array1::zeros(256);
        let a = init_slots(&mut ChaCha8Rng::seed_from_u64(9), &cfg, &mu, &logsigma);
        let b = init_slots(&mut ChaCha8Rng::seed_from_u64(9), &cfg, &mu, &logsigma);
        assert_eq!(a.slots, b.slots);
    }

    #[test]
    fn single_slot_attention_is_one() {
        let cfg = SlotConfig {
            num_slots: 1,
            slot_dim: 8,
            num_layers: 2,
            mlp_hidden: 8,
            decoder_hidden: 8,
            decoder_layers: 3,
        };
        let (ps, patches) = setup(&cfg, 6, 5, 3);
        let init = SlotSet {
            slots: Array2::from_elem((1, 8), 0.3),
        };
        let (_, attn) = slot_encode(&patches, &init, &ps, &cfg).unwrap();
        for a in attn {
            assert!(a.iter().all(|x| (x - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn identical_initial_slots_stay_identical() {
        let cfg = micro_cfg();
        let (ps, patches) = setup(&cfg, 6, 5, 4);
        let init = SlotSet {
            slots: Array2::from_elem((2, 8), 0.1),
        };
        let (out, _) = slot_encode(&patches, &init, &ps, &cfg).unwrap();
        for j in 0..8 {
            assert!((out.slots[[0, j]] - out.slots[[1, j]]).abs() < 1e-12);
        }
        let dec = slot_decode(&out, 5, &ps, &cfg);
        assert!(dec.alpha.iter().all(|a| (a - 0.5).abs() < 1e-9));
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = SlotConfig {
            num_slots: 4,
            slot_dim: 32,
            ..SlotConfig::default()
        };
        let (ps, patches) = setup(&cfg, 64, 64, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mu = ps.get("slots/mu").clone().into_dimensionality::<ndarray::Ix2>().unwrap().row(0).to_owned();
        let ls = ps.get("slots/logsigma").clone().into_dimensionality::<ndarray::Ix2>().unwrap().row(0).to_owned();
        let init = init_slots(&mut rng, &cfg, &mu, &ls);
        let (slots, attn) = slot_encode(&patches, &init, &ps, &cfg).unwrap();
        assert_eq!(slots.slots.dim(), (4, 32));
        assert_eq!(attn.len(), 3);
        for a in &attn {
            assert_eq!(a.dim(), (4, 64));
            // per-patch attention over slots sums to 1
            for i in 0..64 {
                let s: f64 = (0..4).map(|k| a[[k, i]]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            // renormalized per-slot weights over patches sum to 1
            let shifted = a.mapv(|x| x + 1e-8);
            for k in 0..4 {
                let row_sum: f64 = shifted.row(k).sum();
                let w: f64 = shifted.row(k).iter().map(|x| x / row_sum).sum();
                assert!((w - 1.0).abs() < 1e-9);
            }
        }
        let dec = slot_decode(&slots, 64, &ps, &cfg);
        assert_eq!(dec.reconstruction.dim(), (64, 64));
        assert_eq!(dec.alpha.dim(), (4, 64));
        assert_eq!(dec.per_slot_features.len(), 4);
        for s in alpha_column_sums(&dec.alpha) {
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(dec.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn slot_permutation_equivariance() {
        let cfg = SlotConfig {
            num_slots: 3,
            slot_dim: 8,
            num_layers: 2,
            mlp_hidden: 8,
            decoder_hidden: 8,
            decoder_layers: 3,
        };
        let (ps, patches) = setup(&cfg, 6, 5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let init = Array2::from_shape_fn((3, 8), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let perm = [2usize, 0, 1];
        let mut permuted = init.clone();
        for (i, &pi) in perm.iter().enumerate() {
            permuted.row_mut(i).assign(&init.row(pi));
        }
        let (out_a, attn_a) = slot_encode(&patches, &SlotSet { slots: init }, &ps, &cfg).unwrap();
        let (out_b, attn_b) =
            slot_encode(&patches, &SlotSet { slots: permuted }, &ps, &cfg).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((out_b.slots[[i, j]] - out_a.slots[[pi, j]]).abs() < 1e-6);
            }
            for l in 0..attn_a.len() {
                for c in 0..5 {
                    assert!((attn_b[l][[i, c]] - attn_a[l][[pi, c]]).abs() < 1e-6);
                }
            }
        }
        let dec_a = slot_decode(&out_a, 5, &ps, &cfg);
        let dec_b = slot_decode(&out_b, 5, &ps, &cfg);
        for (i, &pi) in perm.iter().enumerate() {
            for c in 0..5 {
                assert!((dec_b.alpha[[i, c]] - dec_a.alpha[[pi, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_slot_decode_alpha_is_one() {
        let cfg = SlotConfig {
            num_slots: 1,
            slot_dim: 8,
            num_layers: 1,
            mlp_hidden: 8,
            decoder_hidden: 8,
            decoder_layers: 3,
        };
        let (ps, _) = setup(&cfg, 6, 5, 9);
        let slots = SlotSet {
            slots: Array2::from_elem((1, 8), 0.2),
        };
        let dec = slot_decode(&slots, 5, &ps, &cfg);
        assert!(dec.alpha.iter().all(|a| (a - 1.0).abs() < 1e-12));
        for i in 0..5 {
            for j in 0..6 {
                assert!((dec.reconstruction[[i, j]] - dec.per_slot_features[0][[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segmentation_argmax_ties_and_upsampling() {
        let alpha = array![[1.0f64, 0.5, 0.2, 0.5], [0.0, 0.5, 0.8, 0.2], [0.0, 0.5, 0.0, 0.3]];
        let labels = segmentation_from_alpha(&alpha, (2, 2), (4, 4));
        // patch labels: argmax columns = [0, 0 (tie), 1, 0]
        let expect = [0u32, 0, 1, 0];
        for y in 0..4 {
            for x in 0..4 {
                let p = (y / 2) * 2 + (x / 2);
                assert_eq!(labels[[y, x]], expect[p]);
            }
        }
    }

    #[test]
    fn slot_module_gradients_match_finite_differences() {
        let cfg = micro_cfg();
        let (ps, patches) = setup(&cfg, 6, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = sample_slot_noise::<f64, _>(&mut rng, cfg.num_slots, cfg.slot_dim);
        let report = crate::gradcheck::check_params(&ps, 1e-5, |g, p| {
            let pv = g.constant(patches.clone().into_dyn());
            let init = init_slots_vars(g, &noise, p);
            let (slots, _) = slot_encode_vars(g, pv, init, p, &cfg);
            let (recon, alpha, _) = slot_decode_vars(g, slots, 4, p, &cfg);
            recon.tanh().mean_all().add(alpha.mul(alpha).mean_all())
        });
        assert!(
            report.max_rel_err < 1e-4,
            "gradcheck failed: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}
