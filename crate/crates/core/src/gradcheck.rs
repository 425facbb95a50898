//! Central finite-difference gradient checking against the tape.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{encode_vars, init_encoder_params, EncoderConfig};
use crate::distill::{
    init_head_params, masked_ce_vars, project_vars, teacher_distribution, HeadConfig,
};
use crate::error::Result;
use crate::filtering::supervised_fraction;
use crate::geometry::{alignment_map, apply_invaug, overlap_box, sample_view_pair, AugConfig};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::slots::{
    init_slot_params, init_slots_vars, sample_slot_noise, slot_decode_vars, slot_encode_vars,
    SlotConfig,
};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub entries_checked: usize,
}

/// Compare analytic gradients of `build`'s scalar loss against central
/// finite differences for every entry of every parameter.
///
/// `build` must be a pure function of the parameter set: the model forward
/// functions pull parameters from the set through [`Graph::param`], so
/// perturbing an entry and rebuilding re-evaluates the loss exactly.
pub fn check_params<F>(params: &ParamSet<f64>, eps: f64, build: F) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamSet<f64>) -> Var<'g, f64>,
{
    let graph = Graph::new();
    let loss = build(&graph, params);
    let grads = graph.backward(loss);

    let loss_of = |p: &ParamSet<f64>| -> f64 {
        let g = Graph::new();
        build(&g, p).scalar_value()
    };

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut entries = 0usize;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).len();
        let analytic: Vec<f64> = match grads.param(name) {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; n],
        };
        for idx in 0..n {
            let orig = work.get(name).as_slice().unwrap()[idx];
            work.get_mut(name).as_slice_mut().unwrap()[idx] = orig + eps;
            let plus = loss_of(&work);
            work.get_mut(name).as_slice_mut().unwrap()[idx] = orig - eps;
            let minus = loss_of(&work);
            work.get_mut(name).as_slice_mut().unwrap()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic[idx] - numeric).abs()
                / analytic[idx].abs().max(numeric.abs()).max(1e-6);
            entries += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{idx}]");
            }
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        params_checked: names.len(),
        entries_checked: entries,
    }
}

/// Identity adapter that coerces a closure to the higher-ranked builder
/// signature `check_params` expects.
fn for_any_graph<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamSet<f64>) -> Var<'g, f64>,
{
    f
}

/// Micro-model configuration used by the composite gradient check: encoder
/// depth 1 with d = 8 on a 2x2 patch grid, 2 slots of dimension 8, head
/// output dimension 16.
pub fn micro_configs() -> (EncoderConfig, SlotConfig, HeadConfig, AugConfig) {
    let encoder = EncoderConfig {
        depth: 1,
        embed_dim: 8,
        patch_size: 4,
        num_heads: 1,
        mlp_ratio: 2.0,
        image_size: 8,
        in_channels: 3,
        use_pos_embed: true,
    };
    let slots = SlotConfig {
        num_slots: 2,
        slot_dim: 8,
        num_layers: 2,
        mlp_hidden: 8,
        decoder_hidden: 8,
        decoder_layers: 3,
    };
    let head = HeadConfig {
        out_dim: 16,
        hidden: 8,
        bottleneck: 8,
        layers: 3,
    };
    let aug = AugConfig {
        output_size: 8,
        patch_size: 4,
        ..AugConfig::default()
    };
    (encoder, slots, head, aug)
}

/// Finite-difference check of the full composite training loss (masked
/// patch-level cross-view term plus global term) against the tape gradients,
/// over every student parameter, on the micro model at double precision.
pub fn micro_composite_gradcheck(eps: f64, seed: u64) -> Result<GradCheckReport> {
    let (enc_cfg, slot_cfg, head_cfg, aug_cfg) = micro_configs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut student: ParamSet<f64> = ParamSet::new();
    init_encoder_params(&mut rng, &enc_cfg, &mut student);
    init_slot_params(
        &mut rng,
        &slot_cfg,
        enc_cfg.embed_dim,
        enc_cfg.num_patches(),
        &mut student,
    );
    init_head_params(&mut rng, &head_cfg, enc_cfg.embed_dim, "head", &mut student);
    // Spread parameters to O(0.1) scale: at this width the training init
    // leaves activations so small that finite differences lose accuracy to
    // truncation, which would test conditioning rather than the adjoints.
    for (_, arr) in student.iter_mut() {
        arr.mapv_inplace(|x| x + 0.5 * (rng.gen::<f64>() - 0.5));
    }

    // Teacher: perturbed copy so targets differ from the student outputs.
    let mut teacher = student.clone();
    for (_, arr) in teacher.iter_mut() {
        arr.mapv_inplace(|x| x + 0.03 * (rng.gen::<f64>() - 0.5));
    }

    let image: Array3<f64> =
        Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(0.0..1.0));
    let (vp1, vp2) = sample_view_pair(&mut rng, 8, &aug_cfg)?;
    let overlap = overlap_box(&vp1, &vp2);
    let map1 = alignment_map(&vp1, &overlap, 4)?;
    let map2 = alignment_map(&vp2, &overlap, 4)?;
    let x1 = crate::data::render_view(&image, &vp1);
    let x2 = crate::data::render_view(&image, &vp2);
    let n = enc_cfg.num_patches();
    let s = slot_cfg.num_slots;
    let ds = slot_cfg.slot_dim;
    let noise1 = sample_slot_noise::<f64, _>(&mut rng, s, ds);
    let noise2 = sample_slot_noise::<f64, _>(&mut rng, s, ds);

    // Teacher targets are constants with respect to student parameters.
    let center_patch = Array1::from_shape_fn(head_cfg.out_dim, |_| rng.gen_range(-0.05..0.05));
    let center_global = Array1::from_shape_fn(head_cfg.out_dim, |_| rng.gen_range(-0.05..0.05));
    let tau = 0.1;
    let tau_t = 0.07;
    let teacher_logits = |img: &Array3<f64>| -> (Array2<f64>, Array2<f64>) {
        let g: Graph<f64> = Graph::new();
        let iv = g.constant(img.clone().into_dyn());
        let (glob, patches) = encode_vars(&g, iv, &teacher, &enc_cfg);
        let pl = project_vars(&g, patches, &teacher, &head_cfg, "head")
            .eval()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d");
        let gl = project_vars(&g, glob, &teacher, &head_cfg, "head")
            .eval()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d");
        (pl, gl)
    };
    let (tl1, tg1) = teacher_logits(&x1);
    let (tl2, tg2) = teacher_logits(&x2);
    let a1 = teacher_distribution(&apply_invaug(&tl1, &map1)?, &center_patch, tau_t);
    let a2 = teacher_distribution(&apply_invaug(&tl2, &map2)?, &center_patch, tau_t);
    let ag1 = teacher_distribution(&tg1, &center_global, tau_t);
    let ag2 = teacher_distribution(&tg2, &center_global, tau_t);

    // All patches supervised (mutual k-NN with k = N accepts everything).
    let weights = Array1::<f64>::ones(n);
    let _ = supervised_fraction(&weights)?;
    let norm = weights.sum().max(1.0);

    let builder = for_any_graph(move |g, params| {
        let mut student_logits = Vec::new();
        let mut student_global = Vec::new();
        for (img, noise, map) in [(&x1, &noise1, &map1), (&x2, &noise2, &map2)] {
            let iv = g.constant(img.clone().into_dyn());
            let (glob, patches) = encode_vars(g, iv, params, &enc_cfg);
            let init = init_slots_vars(g, noise, params);
            let (slots, _) = slot_encode_vars(g, patches, init, params, &slot_cfg);
            let (recon, _, _) = slot_decode_vars(g, slots, n, params, &slot_cfg);
            student_logits.push(
                project_vars(g, recon, params, &head_cfg, "head").apply_alignment(map),
            );
            student_global.push(project_vars(g, glob, params, &head_cfg, "head"));
        }
        let ce1 = masked_ce_vars(g, &a1, student_logits[1], tau, &weights, norm);
        let ce2 = masked_ce_vars(g, &a2, student_logits[0], tau, &weights, norm);
        let l_oc = ce1.add(ce2).scale(0.5);
        let one = Array1::<f64>::ones(1);
        let gce1 = masked_ce_vars(g, &ag1, student_global[1], tau, &one, 1.0);
        let gce2 = masked_ce_vars(g, &ag2, student_global[0], tau, &one, 1.0);
        let l_global = gce1.add(gce2).scale(0.5);
        l_oc.add(l_global)
    });

    Ok(check_params(&student, eps, builder))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_composite_loss_gradients_match() {
        let report = micro_composite_gradcheck(1e-5, 0).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_param
        );
        assert!(report.entries_checked > 1000);
    }
}
