//! Two-stage training orchestration: the self-distillation stage with
//! cross-view patch filtering, then the mask-sharpening stage with a frozen
//! teacher and an L2 reconstruction loss. Owns parameter state, optimizer,
//! centers, logging, checkpointing and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{encode_vars, init_encoder_params};
use crate::checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
use crate::collapse::{collapse_score, merge_reports, CollapseReport};
use crate::config::TrainConfig;
use crate::data::{
    load_dataset, photometric_augment, render_view, sample_photometric, Dataset, DatasetItem,
};
use crate::distill::{
    ema_update, init_head_params, masked_ce_vars, project_vars, schedule_value,
    teacher_distribution, update_center, DistillState, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::filtering::{filter_mask, supervised_fraction, supervision_weights};
use crate::geometry::{
    alignment_map, apply_invaug, overlap_box, patch_correspondences, sample_view_pair,
    AlignmentMap, ViewParams,
};
use crate::graph::Graph;
use crate::metrics::{fg_ari, masks_from_instance_map, mean_best_overlap, MetricsReport};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, stream};
use crate::slots::{
    init_slots, init_slots_vars, init_slot_params, sample_slot_noise, segmentation_from_alpha,
    slot_decode, slot_encode, slot_encode_vars, slot_decode_vars, SlotConfig, SlotSet,
};

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_oc: f64,
    pub loss_global: f64,
    pub supervised_fraction: f64,
    pub lr: f64,
    pub teacher_momentum: f64,
    pub tau_t: f64,
    pub eval: Option<MetricsReport>,
}

impl LogRecord {
    pub fn csv_header() -> &'static str {
        "step,epoch,loss_total,loss_oc,loss_global,supervised_fraction,lr,teacher_momentum,tau_t,fg_ari,mbo,collapse_d\n"
    }

    pub fn to_csv_row(&self) -> String {
        let eval = match &self.eval {
            Some(m) => format!("{},{},{}", m.fg_ari, m.mbo, m.collapse_d),
            None => ",,".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            self.step,
            self.epoch,
            self.loss_total,
            self.loss_oc,
            self.loss_global,
            self.supervised_fraction,
            self.lr,
            self.teacher_momentum,
            self.tau_t,
            eval
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<LogRecord> {
        let parts: Vec<&str> = line.trim_end().split(',').collect();
        if parts.len() < 9 {
            return None;
        }
        let eval = if parts.len() >= 12 && !parts[9].is_empty() {
            Some(MetricsReport {
                fg_ari: parts[9].parse().ok()?,
                mbo: parts[10].parse().ok()?,
                collapse_d: parts[11].parse().ok()?,
                supervised_fraction: parts[5].parse().ok()?,
                knn_miou: None,
            })
        } else {
            None
        };
        Some(LogRecord {
            step: parts[0].parse().ok()?,
            epoch: parts[1].parse().ok()?,
            loss_total: parts[2].parse().ok()?,
            loss_oc: parts[3].parse().ok()?,
            loss_global: parts[4].parse().ok()?,
            supervised_fraction: parts[5].parse().ok()?,
            lr: parts[6].parse().ok()?,
            teacher_momentum: parts[7].parse().ok()?,
            tau_t: parts[8].parse().ok()?,
            eval,
        })
    }
}

/// Per-image evaluation record (one CSV row).
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub image_id: usize,
    pub fg_ari: Option<f64>,
    pub mbo: f64,
    pub collapse_d: Option<f64>,
    pub supervised_fraction: f64,
}

struct ImageOut<T: Scalar> {
    grads: BTreeMap<String, ArrayD<T>>,
    loss_total: f64,
    loss_oc: f64,
    loss_global: f64,
    sup_frac: f64,
    teacher_patch_logits: Option<Array2<T>>,
    teacher_global_logits: Option<Array2<T>>,
}

struct ViewBundle<T: Scalar> {
    vp: ViewParams,
    image: Array3<T>,
    noise: Array2<T>,
    map: AlignmentMap,
}

/// Mutable training state for one run.
pub struct TrainSession<T: Scalar> {
    pub cfg: TrainConfig,
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub optimizer: crate::optim::AdamW<T>,
    pub state: DistillState<T>,
    pub step: usize,
    pub steps_per_epoch: usize,
}

fn global_head_prefix(cfg: &TrainConfig) -> &'static str {
    if cfg.separate_global_head {
        "headg"
    } else {
        "head"
    }
}

impl<T: Scalar> TrainSession<T> {
    pub fn new(cfg: TrainConfig, train_len: usize) -> Result<Self> {
        cfg.validate()?;
        if train_len == 0 {
            return Err(Error::Train("empty training dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::INIT, 0, 0));
        let mut student = ParamSet::new();
        init_encoder_params(&mut rng, &cfg.encoder, &mut student);
        init_slot_params(
            &mut rng,
            &cfg.slots,
            cfg.encoder.embed_dim,
            cfg.encoder.num_patches(),
            &mut student,
        );
        init_head_params(&mut rng, &cfg.head, cfg.encoder.embed_dim, "head", &mut student);
        if cfg.separate_global_head {
            init_head_params(&mut rng, &cfg.head, cfg.encoder.embed_dim, "headg", &mut student);
        }
        // The target encoder starts as an exact copy of the trainable one.
        let teacher = Self::teacher_view(&cfg, &student);
        let mut state = DistillState::new(cfg.head.out_dim);
        state.tau = cfg.tau;
        state.center_momentum = cfg.center_momentum;
        state.lambda_oc = cfg.lambda_oc;
        state.lambda_global = cfg.lambda_global;
        state.tau_t = cfg.schedule.tau_t_start;
        let steps_per_epoch = train_len.div_ceil(cfg.batch_size);
        Ok(TrainSession {
            optimizer: crate::optim::AdamW::new(cfg.optim.clone()),
            cfg,
            student,
            teacher,
            state,
            step: 0,
            steps_per_epoch,
        })
    }

    fn teacher_view(cfg: &TrainConfig, student: &ParamSet<T>) -> ParamSet<T> {
        let mut teacher = ParamSet::new();
        teacher.adopt_group(student, "enc/");
        teacher.adopt_group(student, "head/");
        if cfg.separate_global_head {
            teacher.adopt_group(student, "headg/");
        }
        teacher
    }

    pub fn stage1_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.epochs()
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * (self.cfg.epochs() + self.cfg.sharpening_epochs())
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch
    }

    pub fn in_sharpening_stage(&self) -> bool {
        self.step >= self.stage1_steps()
    }

    fn prepare_views(
        &self,
        item: &DatasetItem,
        rng: &mut ChaCha8Rng,
    ) -> Result<[ViewBundle<T>; 2]> {
        let source: Array3<T> = item.image_as();
        let (vp1, vp2) = sample_view_pair(rng, self.cfg.scene.image_size, &self.cfg.aug)?;
        let ph1 = sample_photometric(rng, &self.cfg.photo, 0);
        let ph2 = sample_photometric(rng, &self.cfg.photo, 1);
        let x1 = photometric_augment(&render_view(&source, &vp1), &ph1, rng);
        let x2 = photometric_augment(&render_view(&source, &vp2), &ph2, rng);
        let s = self.cfg.slots.num_slots;
        let ds = self.cfg.slots.slot_dim;
        let noise1 = sample_slot_noise::<T, _>(rng, s, ds);
        let noise2 = sample_slot_noise::<T, _>(rng, s, ds);
        let overlap = overlap_box(&vp1, &vp2);
        let map1 = alignment_map(&vp1, &overlap, self.cfg.aug.patch_size)?;
        let map2 = alignment_map(&vp2, &overlap, self.cfg.aug.patch_size)?;
        Ok([
            ViewBundle {
                vp: vp1,
                image: x1,
                noise: noise1,
                map: map1,
            },
            ViewBundle {
                vp: vp2,
                image: x2,
                noise: noise2,
                map: map2,
            },
        ])
    }

    /// Teacher features and head logits for one view (no gradients leave
    /// this function; the teacher runs on a throwaway tape).
    fn teacher_forward(&self, image: &Array3<T>, with_heads: bool) -> (Array2<T>, Option<(Array2<T>, Array2<T>)>) {
        let g: Graph<T> = Graph::new();
        let img = g.constant(image.clone().into_dyn());
        let (glob, patches) = encode_vars(&g, img, &self.teacher, &self.cfg.encoder);
        let patch_feats = patches
            .eval()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d");
        if !with_heads {
            return (patch_feats, None);
        }
        let patch_logits = project_vars(&g, patches, &self.teacher, &self.cfg.head, "head")
            .eval()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d");
        let global_logits = project_vars(
            &g,
            glob,
            &self.teacher,
            &self.cfg.head,
            global_head_prefix(&self.cfg),
        )
        .eval()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d");
        (patch_feats, Some((patch_logits, global_logits)))
    }

    fn distill_image(&self, item: &DatasetItem, seed: u64) -> Result<ImageOut<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views = self.prepare_views(item, &mut rng)?;

        let (zt1, heads1) = self.teacher_forward(&views[0].image, true);
        let (zt2, heads2) = self.teacher_forward(&views[1].image, true);
        let (tlog1, tglob1) = heads1.expect("heads requested");
        let (tlog2, tglob2) = heads2.expect("heads requested");

        let zt1h = apply_invaug(&zt1, &views[0].map)?;
        let zt2h = apply_invaug(&zt2, &views[1].map)?;
        let mask = filter_mask(&zt1h, &zt2h, &self.cfg.filter)?;
        let weights = supervision_weights(
            self.step,
            self.stage1_steps(),
            &mask,
            &self.cfg.filter,
            &mut rng,
        );
        let sup_frac = supervised_fraction(&weights)?;

        let tau_t = self.state.tau_t;
        let a1 = teacher_distribution(
            &apply_invaug(&tlog1, &views[0].map)?,
            &self.state.center_patch,
            tau_t,
        );
        let a2 = teacher_distribution(
            &apply_invaug(&tlog2, &views[1].map)?,
            &self.state.center_patch,
            tau_t,
        );
        let ag1 = teacher_distribution(&tglob1, &self.state.center_global, tau_t);
        let ag2 = teacher_distribution(&tglob2, &self.state.center_global, tau_t);

        let n = self.cfg.encoder.num_patches();
        let g: Graph<T> = Graph::new();
        let mut student_logits = Vec::with_capacity(2);
        let mut student_global = Vec::with_capacity(2);
        for view in &views {
            let img = g.constant(view.image.clone().into_dyn());
            let (glob, patches) = encode_vars(&g, img, &self.student, &self.cfg.encoder);
            let init = init_slots_vars(&g, &view.noise, &self.student);
            let (slots, _) = slot_encode_vars(&g, patches, init, &self.student, &self.cfg.slots);
            let (recon, _, _) = slot_decode_vars(&g, slots, n, &self.student, &self.cfg.slots);
            let logits = project_vars(&g, recon, &self.student, &self.cfg.head, "head")
                .apply_alignment(&view.map);
            student_logits.push(logits);
            student_global.push(project_vars(
                &g,
                glob,
                &self.student,
                &self.cfg.head,
                global_head_prefix(&self.cfg),
            ));
        }
        let norm = T::from_f64(weights.iter().map(|w| w.to_f64s()).sum::<f64>().max(1.0));
        let half = T::from_f64(0.5);
        let ce1 = masked_ce_vars(&g, &a1, student_logits[1], self.state.tau, &weights, norm);
        let ce2 = masked_ce_vars(&g, &a2, student_logits[0], self.state.tau, &weights, norm);
        let l_oc = ce1.add(ce2).scale(half);
        let one_w = Array1::<T>::ones(1);
        let gce1 = masked_ce_vars(&g, &ag1, student_global[1], self.state.tau, &one_w, T::one());
        let gce2 = masked_ce_vars(&g, &ag2, student_global[0], self.state.tau, &one_w, T::one());
        let l_global = gce1.add(gce2).scale(half);
        let loss = l_oc
            .scale(T::from_f64(self.state.lambda_oc))
            .add(l_global.scale(T::from_f64(self.state.lambda_global)));

        let loss_val = loss.scalar_value().to_f64s();
        if !loss_val.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss at step {} (image seed {seed})",
                self.step
            )));
        }
        let l_oc_val = l_oc.scalar_value().to_f64s();
        let l_global_val = l_global.scalar_value().to_f64s();
        let grads = g.backward(loss).into_param_map();

        // Raw (pre-alignment) teacher logits from both views feed the
        // center updates.
        let pooled_patches = ndarray::concatenate(Axis(0), &[tlog1.view(), tlog2.view()])
            .expect("same width");
        let pooled_global = ndarray::concatenate(Axis(0), &[tglob1.view(), tglob2.view()])
            .expect("same width");
        Ok(ImageOut {
            grads,
            loss_total: loss_val,
            loss_oc: l_oc_val,
            loss_global: l_global_val,
            sup_frac,
            teacher_patch_logits: Some(pooled_patches),
            teacher_global_logits: Some(pooled_global),
        })
    }

    fn sharpen_image(&self, item: &DatasetItem, seed: u64) -> Result<ImageOut<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views = self.prepare_views(item, &mut rng)?;
        let (zt1, _) = self.teacher_forward(&views[0].image, false);
        let (zt2, _) = self.teacher_forward(&views[1].image, false);

        // The filter fraction stays observable during sharpening even though
        // the L2 loss ignores it.
        let zt1h = apply_invaug(&zt1, &views[0].map)?;
        let zt2h = apply_invaug(&zt2, &views[1].map)?;
        let mask = filter_mask(&zt1h, &zt2h, &self.cfg.filter)?;
        let sup_frac = supervised_fraction(&mask.weights)?;

        let n = self.cfg.encoder.num_patches();
        let g: Graph<T> = Graph::new();
        let mut recons = Vec::with_capacity(2);
        for view in &views {
            let img = g.constant(view.image.clone().into_dyn());
            let (_, patches) = encode_vars(&g, img, &self.student, &self.cfg.encoder);
            let init = init_slots_vars(&g, &view.noise, &self.student);
            let (slots, _) = slot_encode_vars(&g, patches, init, &self.student, &self.cfg.slots);
            let (recon, _, _) = slot_decode_vars(&g, slots, n, &self.student, &self.cfg.slots);
            recons.push(recon);
        }
        let half = T::from_f64(0.5);
        let loss = if self.cfg.sharpening_cross_view {
            let t1 = g.constant(zt1h.clone().into_dyn());
            let t2 = g.constant(zt2h.clone().into_dyn());
            let r1 = recons[0].apply_alignment(&views[0].map);
            let r2 = recons[1].apply_alignment(&views[1].map);
            let e1 = r1.sub(t2);
            let e2 = r2.sub(t1);
            e1.mul(e1)
                .mean_all()
                .add(e2.mul(e2).mean_all())
                .scale(half)
        } else {
            let t1 = g.constant(zt1.clone().into_dyn());
            let t2 = g.constant(zt2.clone().into_dyn());
            let e1 = recons[0].sub(t1);
            let e2 = recons[1].sub(t2);
            e1.mul(e1)
                .mean_all()
                .add(e2.mul(e2).mean_all())
                .scale(half)
        };
        let loss_val = loss.scalar_value().to_f64s();
        if !loss_val.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss at step {} (image seed {seed})",
                self.step
            )));
        }
        let grads = g.backward(loss).into_param_map();
        Ok(ImageOut {
            grads,
            loss_total: loss_val,
            loss_oc: 0.0,
            loss_global: 0.0,
            sup_frac,
            teacher_patch_logits: None,
            teacher_global_logits: None,
        })
    }

    /// One optimization step over a batch. Dispatches to the
    /// self-distillation or sharpening stage based on the step counter.
    pub fn train_step(&mut self, batch: &[&DatasetItem]) -> Result<LogRecord> {
        if batch.is_empty() {
            return Err(Error::Train("empty batch".into()));
        }
        let sharpening = self.in_sharpening_stage();
        if !sharpening {
            self.state.tau_t =
                schedule_value(ScheduleKind::TauT, self.step, self.stage1_steps(), &self.cfg.schedule);
        }

        let outs: Vec<Result<ImageOut<T>>> = batch
            .par_iter()
            .enumerate()
            .map(|(idx, item)| {
                let seed = derive_seed(self.cfg.seed, stream::TRAIN_STEP, self.step as u64, idx as u64);
                if sharpening {
                    self.sharpen_image(item, seed)
                } else {
                    self.distill_image(item, seed)
                }
            })
            .collect();
        let mut outs_ok = Vec::with_capacity(outs.len());
        for o in outs {
            outs_ok.push(o?);
        }

        // Deterministic accumulation: sum per-image gradients in batch order.
        let inv_batch = T::from_f64(1.0 / outs_ok.len() as f64);
        let mut grads: BTreeMap<String, ArrayD<T>> = BTreeMap::new();
        for out in &outs_ok {
            for (name, g) in &out.grads {
                match grads.get_mut(name) {
                    Some(acc) => *acc += g,
                    None => {
                        grads.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * inv_batch);
        }

        let lr = schedule_value(ScheduleKind::Lr, self.step, self.total_steps(), &self.cfg.schedule);
        self.optimizer.step(&mut self.student, &grads, lr);

        let momentum = if sharpening {
            1.0
        } else {
            schedule_value(
                ScheduleKind::TeacherMomentum,
                self.step,
                self.stage1_steps(),
                &self.cfg.schedule,
            )
        };
        if !sharpening {
            ema_update(&mut self.teacher, &self.student, momentum)?;
            let patch_rows: Vec<_> = outs_ok
                .iter()
                .filter_map(|o| o.teacher_patch_logits.as_ref().map(|a| a.view()))
                .collect();
            let global_rows: Vec<_> = outs_ok
                .iter()
                .filter_map(|o| o.teacher_global_logits.as_ref().map(|a| a.view()))
                .collect();
            if !patch_rows.is_empty() {
                let pooled = ndarray::concatenate(Axis(0), &patch_rows).expect("same width");
                update_center(&mut self.state.center_patch, &pooled, self.state.center_momentum);
            }
            if !global_rows.is_empty() {
                let pooled = ndarray::concatenate(Axis(0), &global_rows).expect("same width");
                update_center(&mut self.state.center_global, &pooled, self.state.center_momentum);
            }
        }

        let nb = outs_ok.len() as f64;
        let record = LogRecord {
            step: self.step,
            epoch: self.epoch(),
            loss_total: outs_ok.iter().map(|o| o.loss_total).sum::<f64>() / nb,
            loss_oc: outs_ok.iter().map(|o| o.loss_oc).sum::<f64>() / nb,
            loss_global: outs_ok.iter().map(|o| o.loss_global).sum::<f64>() / nb,
            supervised_fraction: outs_ok.iter().map(|o| o.sup_frac).sum::<f64>() / nb,
            lr,
            teacher_momentum: momentum,
            tau_t: self.state.tau_t,
            eval: None,
        };
        self.step += 1;
        Ok(record)
    }

    /// Forward pass of the object-centric model on a full image, returning
    /// the decoded segmentation and reconstruction.
    fn segment_image(
        &self,
        image: &Array3<T>,
        num_slots: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(crate::metrics::InstanceMap, Array2<T>)> {
        let bundle = crate::backbone::encode(image, &self.student, &self.cfg.encoder)?;
        let eval_slots = SlotConfig {
            num_slots,
            ..self.cfg.slots.clone()
        };
        let mu = self
            .student
            .get("slots/mu")
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d")
            .row(0)
            .to_owned();
        let ls = self
            .student
            .get("slots/logsigma")
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d")
            .row(0)
            .to_owned();
        let init = init_slots(rng, &eval_slots, &mu, &ls);
        let (slots, _) = slot_encode(&bundle.patches, &init, &self.student, &eval_slots)?;
        let dec = slot_decode(&slots, self.cfg.encoder.num_patches(), &self.student, &eval_slots);
        let g = self.cfg.encoder.grid_size();
        let size = self.cfg.encoder.image_size;
        let labels = segmentation_from_alpha(&dec.alpha, (g, g), (size, size));
        Ok((labels, dec.reconstruction))
    }

    fn eval_image(&self, item: &DatasetItem, image_id: usize) -> Result<EvalRow> {
        let seed = derive_seed(self.cfg.seed, stream::EVAL, image_id as u64, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image: Array3<T> = item.image_as();
        let (pred, _) = self.segment_image(&image, self.cfg.num_slots_eval, &mut rng)?;
        let fg = fg_ari(&item.instances, &pred)?;
        let gt_masks = masks_from_instance_map(&item.instances, true);
        let pred_masks = masks_from_instance_map(&pred, false);
        let mbo = if gt_masks.is_empty() {
            0.0
        } else {
            mean_best_overlap(&gt_masks, &pred_masks)?
        };

        // Paired-view pass: collapse measure and supervised fraction.
        let views = self.prepare_views(item, &mut rng)?;
        let mut recons = Vec::with_capacity(2);
        for view in &views {
            let bundle = crate::backbone::encode(&view.image, &self.student, &self.cfg.encoder)?;
            let init = SlotSet {
                slots: view.noise.clone(),
            };
            let mu = self.student.get("slots/mu").clone();
            let ls = self.student.get("slots/logsigma").clone();
            let mut slots0 = init.slots;
            for s in 0..slots0.nrows() {
                for j in 0..slots0.ncols() {
                    let m = mu.as_slice().expect("contiguous")[j];
                    let l = ls.as_slice().expect("contiguous")[j];
                    slots0[[s, j]] = m + l.exp() * slots0[[s, j]];
                }
            }
            let (slots, _) = slot_encode(
                &bundle.patches,
                &SlotSet { slots: slots0 },
                &self.student,
                &self.cfg.slots,
            )?;
            let dec = slot_decode(&slots, self.cfg.encoder.num_patches(), &self.student, &self.cfg.slots);
            recons.push(dec.reconstruction);
        }
        let corr = patch_correspondences(&views[0].vp, &views[1].vp, self.cfg.aug.patch_size, 0.5);
        let collapse = collapse_score(&recons[0], &recons[1], &corr);

        let (zt1, _) = self.teacher_forward(&views[0].image, false);
        let (zt2, _) = self.teacher_forward(&views[1].image, false);
        let mask = filter_mask(
            &apply_invaug(&zt1, &views[0].map)?,
            &apply_invaug(&zt2, &views[1].map)?,
            &self.cfg.filter,
        )?;
        Ok(EvalRow {
            image_id,
            fg_ari: fg,
            mbo,
            collapse_d: collapse.d,
            supervised_fraction: supervised_fraction(&mask.weights)?,
        })
    }

    /// Evaluate on a validation set: per-image FG-ARI and mBO from the
    /// decoded masks, pooled collapse measure and supervised fraction from a
    /// paired-view pass.
    pub fn evaluate(&self, val: &Dataset) -> Result<(MetricsReport, Vec<EvalRow>)> {
        let rows: Vec<Result<EvalRow>> = val
            .items
            .par_iter()
            .enumerate()
            .map(|(i, item)| self.eval_image(item, i))
            .collect();
        let mut ok = Vec::with_capacity(rows.len());
        for r in rows {
            ok.push(r?);
        }
        let fg: Vec<f64> = ok.iter().filter_map(|r| r.fg_ari).collect();
        let collapse_reports: Vec<CollapseReport> = ok
            .iter()
            .map(|r| CollapseReport {
                d: r.collapse_d,
                num_pairs: if r.collapse_d.is_some() { 1 } else { 0 },
                per_image: r.collapse_d.into_iter().collect(),
            })
            .collect();
        let pooled = merge_reports(&collapse_reports);
        let report = MetricsReport {
            fg_ari: if fg.is_empty() {
                0.0
            } else {
                fg.iter().sum::<f64>() / fg.len() as f64
            },
            mbo: ok.iter().map(|r| r.mbo).sum::<f64>() / ok.len().max(1) as f64,
            collapse_d: pooled.d.unwrap_or(0.0),
            supervised_fraction: ok.iter().map(|r| r.supervised_fraction).sum::<f64>()
                / ok.len().max(1) as f64,
            knn_miou: None,
        };
        Ok((report, ok))
    }

    /// Collapse measure over the validation set with exact pair pooling.
    pub fn collapse_report(&self, val: &Dataset) -> Result<CollapseReport> {
        let reports: Vec<Result<CollapseReport>> = val
            .items
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                let seed = derive_seed(self.cfg.seed, stream::EVAL, i as u64, 1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let views = self.prepare_views(item, &mut rng)?;
                let mut recons = Vec::with_capacity(2);
                for view in &views {
                    let bundle =
                        crate::backbone::encode(&view.image, &self.student, &self.cfg.encoder)?;
                    let mu = self
                        .student
                        .get("slots/mu")
                        .clone()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2-d")
                        .row(0)
                        .to_owned();
                    let ls = self
                        .student
                        .get("slots/logsigma")
                        .clone()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2-d")
                        .row(0)
                        .to_owned();
                    let mut slots0 = view.noise.clone();
                    for s in 0..slots0.nrows() {
                        for j in 0..slots0.ncols() {
                            slots0[[s, j]] = mu[j] + ls[j].exp() * slots0[[s, j]];
                        }
                    }
                    let (slots, _) = slot_encode(
                        &bundle.patches,
                        &SlotSet { slots: slots0 },
                        &self.student,
                        &self.cfg.slots,
                    )?;
                    let dec = slot_decode(
                        &slots,
                        self.cfg.encoder.num_patches(),
                        &self.student,
                        &self.cfg.slots,
                    );
                    recons.push(dec.reconstruction);
                }
                let corr =
                    patch_correspondences(&views[0].vp, &views[1].vp, self.cfg.aug.patch_size, 0.5);
                Ok(collapse_score(&recons[0], &recons[1], &corr))
            })
            .collect();
        let mut ok = Vec::with_capacity(reports.len());
        for r in reports {
            ok.push(r?);
        }
        Ok(merge_reports(&ok))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut arrays = ParamSet::new();
        for (name, a) in self.student.iter() {
            arrays.insert(format!("student/{name}"), a.clone());
        }
        for (name, a) in self.teacher.iter() {
            arrays.insert(format!("teacher/{name}"), a.clone());
        }
        for (name, a) in &self.optimizer.m {
            arrays.insert(format!("optim/m/{name}"), a.clone());
        }
        for (name, a) in &self.optimizer.v {
            arrays.insert(format!("optim/v/{name}"), a.clone());
        }
        arrays.insert(
            "state/center_patch",
            self.state.center_patch.clone().into_dyn(),
        );
        arrays.insert(
            "state/center_global",
            self.state.center_global.clone().into_dyn(),
        );
        Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT_VERSION,
                step: self.step as u64,
                optimizer_steps: self.optimizer.t as u64,
                config_echo: self.cfg.echo(),
            },
            arrays,
        }
    }

    pub fn from_checkpoint(cfg: TrainConfig, ckpt: &Checkpoint<T>, train_len: usize) -> Result<Self> {
        let mut session = Self::new(cfg, train_len)?;
        let mut student = ParamSet::new();
        let mut teacher = ParamSet::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, a) in ckpt.arrays.iter() {
            if let Some(rest) = name.strip_prefix("student/") {
                student.insert(rest, a.clone());
            } else if let Some(rest) = name.strip_prefix("teacher/") {
                teacher.insert(rest, a.clone());
            } else if let Some(rest) = name.strip_prefix("optim/m/") {
                m.insert(rest.to_string(), a.clone());
            } else if let Some(rest) = name.strip_prefix("optim/v/") {
                v.insert(rest.to_string(), a.clone());
            }
        }
        if !student.same_structure(&session.student) {
            return Err(Error::Checkpoint(
                "checkpoint parameters do not match the configured model".into(),
            ));
        }
        session.student = student;
        session.teacher = teacher;
        session.optimizer.m = m;
        session.optimizer.v = v;
        session.optimizer.t = ckpt.meta.optimizer_steps as usize;
        session.step = ckpt.meta.step as usize;
        let center_patch = ckpt.arrays.get("state/center_patch").clone();
        let center_global = ckpt.arrays.get("state/center_global").clone();
        session.state.center_patch = center_patch
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::Checkpoint("center_patch shape".into()))?;
        session.state.center_global = center_global
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::Checkpoint("center_global shape".into()))?;
        if !session.in_sharpening_stage() {
            session.state.tau_t = schedule_value(
                ScheduleKind::TauT,
                session.step,
                session.stage1_steps(),
                &session.cfg.schedule,
            );
        }
        Ok(session)
    }
}

/// Artifacts produced by [`run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub stage1_checkpoint: Option<PathBuf>,
    pub final_eval: Option<MetricsReport>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SHUFFLE, epoch as u64, 0));
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Execute (or resume) a full two-stage run in `out_dir`. Resumes from
/// `checkpoints/latest.ckpt` when present. `stop_after_steps` stops the loop
/// early after that many global steps (checkpointing for later resume).
pub fn run<T: Scalar>(
    cfg: &TrainConfig,
    out_dir: &Path,
    stop_after_steps: Option<usize>,
) -> Result<RunSummary> {
    cfg.validate()?;
    let train = load_dataset(Path::new(&cfg.train_dir))
        .map_err(|e| Error::Train(format!("training dataset: {e}")))?;
    let val = load_dataset(Path::new(&cfg.val_dir))
        .map_err(|e| Error::Train(format!("validation dataset: {e}")))?;
    run_with_datasets::<T>(cfg, out_dir, &train, &val, stop_after_steps)
}

/// [`run`] with pre-loaded datasets (used by the dataset-size sweep).
pub fn run_with_datasets<T: Scalar>(
    cfg: &TrainConfig,
    out_dir: &Path,
    train: &Dataset,
    val: &Dataset,
    stop_after_steps: Option<usize>,
) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    let latest = out_dir.join("checkpoints").join("latest.ckpt");
    let mut session = if latest.exists() {
        let ckpt = Checkpoint::<T>::load(&latest)?;
        TrainSession::from_checkpoint(cfg.clone(), &ckpt, train.len())?
    } else {
        TrainSession::new(cfg.clone(), train.len())?
    };

    let log_path = out_dir.join("train_log.csv");
    let write_header = !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if write_header {
        log.write_all(LogRecord::csv_header().as_bytes())?;
    }
    if session.step == 0 {
        session.to_checkpoint().save(&out_dir.join("checkpoints").join("initial.ckpt"))?;
    }

    let total = session.total_steps();
    let stage1 = session.stage1_steps();
    let spe = session.steps_per_epoch;
    let stage1_path = out_dir.join("checkpoints").join("stage1.ckpt");
    let mut stopped_early = false;
    let mut steps_run = 0usize;
    let mut order: Option<(usize, Vec<usize>)> = None;
    while session.step < total {
        if let Some(limit) = stop_after_steps {
            if steps_run >= limit {
                stopped_early = true;
                break;
            }
        }
        let step = session.step;
        let epoch = step / spe;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(cfg.seed, epoch, train.len())));
        }
        let indices = &order.as_ref().expect("set above").1;
        let pos = step % spe;
        let lo = pos * cfg.batch_size;
        let hi = ((pos + 1) * cfg.batch_size).min(train.len());
        let batch: Vec<&DatasetItem> = indices[lo..hi].iter().map(|&i| &train.items[i]).collect();
        let mut record = session.train_step(&batch)?;
        steps_run += 1;

        let end_of_epoch = session.step % spe == 0;
        let finished_epoch = (session.step / spe).saturating_sub(1);
        if end_of_epoch && cfg.eval_every > 0 && (finished_epoch + 1) % cfg.eval_every == 0 {
            let (report, _) = session.evaluate(&val)?;
            record.eval = Some(report);
        }
        log.write_all(record.to_csv_row().as_bytes())?;
        log.flush()?;

        if session.step == stage1 {
            session.to_checkpoint().save(&stage1_path)?;
            session.to_checkpoint().save(&latest)?;
        }
        if end_of_epoch && cfg.eval_every > 0 && (finished_epoch + 1) % cfg.eval_every == 0 {
            let path = out_dir
                .join("checkpoints")
                .join(format!("step_{:07}.ckpt", session.step));
            session.to_checkpoint().save(&path)?;
            session.to_checkpoint().save(&latest)?;
        }
    }

    session.to_checkpoint().save(&latest)?;
    let final_path = out_dir.join("checkpoints").join("final.ckpt");
    let mut final_eval = None;
    if !stopped_early {
        session.to_checkpoint().save(&final_path)?;
        let (report, _) = session.evaluate(&val)?;
        let summary_path = out_dir.join("run_summary.txt");
        let mut f = fs::File::create(&summary_path)?;
        writeln!(f, "steps={}", session.step)?;
        writeln!(f, "epochs={}", cfg.epochs())?;
        writeln!(f, "sharpening_epochs={}", cfg.sharpening_epochs())?;
        writeln!(f, "fg_ari={}", report.fg_ari)?;
        writeln!(f, "mbo={}", report.mbo)?;
        writeln!(f, "collapse_d={}", report.collapse_d)?;
        writeln!(f, "supervised_fraction={}", report.supervised_fraction)?;
        final_eval = Some(report);
    }
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        log_path,
        final_checkpoint: if stopped_early { latest } else { final_path },
        stage1_checkpoint: if session.step >= stage1 {
            Some(stage1_path)
        } else {
            None
        },
        final_eval,
        steps_run,
        stopped_early,
    })
}

/// Majority shape class per patch (ties toward the lower class id).
pub fn patch_labels_from_map(map: &crate::metrics::InstanceMap, patch_size: usize) -> Vec<u32> {
    let (h, w) = map.dim();
    let (gr, gc) = (h / patch_size, w / patch_size);
    let mut out = Vec::with_capacity(gr * gc);
    for pr in 0..gr {
        for pc in 0..gc {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    *counts
                        .entry(map[[pr * patch_size + dy, pc * patch_size + dx]])
                        .or_default() += 1;
                }
            }
            let (label, _) = counts.iter().fold((0u32, 0usize), |(bl, bc), (&l, &c)| {
                if c > bc {
                    (l, c)
                } else {
                    (bl, bc)
                }
            });
            out.push(label);
        }
    }
    out
}

/// Retrieval-based dense segmentation protocol: fit a k-NN classifier on
/// patch features of a training subset (labeled by shape class) and report
/// mean IoU on the validation set, for each subsampling factor.
pub fn knn_retrieval_miou<T: Scalar>(
    session: &TrainSession<T>,
    train: &Dataset,
    val: &Dataset,
    factors: &[usize],
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let p = session.cfg.encoder.patch_size;
    let encode_patches = |item: &DatasetItem| -> Result<Array2<T>> {
        let image: Array3<T> = item.image_as();
        Ok(crate::backbone::encode(&image, &session.student, &session.cfg.encoder)?.patches)
    };
    // Validation features and patch labels are shared across factors.
    let val_data: Vec<Result<(Array2<T>, Vec<u32>)>> = val
        .items
        .par_iter()
        .map(|item| {
            let feats = encode_patches(item)?;
            let sem = crate::data::semantic_map_for_item(item, &val.config)?;
            Ok((feats, patch_labels_from_map(&sem, p)))
        })
        .collect();
    let mut val_feats = Vec::new();
    let mut val_labels = Vec::new();
    for r in val_data {
        let (f, l) = r?;
        val_feats.push(f);
        val_labels.extend(l);
    }
    let val_views: Vec<_> = val_feats.iter().map(|f| f.view()).collect();
    let query = ndarray::concatenate(Axis(0), &val_views).expect("same width");

    let mut out = Vec::new();
    for &factor in factors {
        let subset: Vec<&DatasetItem> = train.items.iter().step_by(factor.max(1)).collect();
        let mem_data: Vec<Result<(Array2<T>, Vec<u32>)>> = subset
            .par_iter()
            .map(|item| {
                let feats = encode_patches(item)?;
                let sem = crate::data::semantic_map_for_item(item, &train.config)?;
                Ok((feats, patch_labels_from_map(&sem, p)))
            })
            .collect();
        let mut mem_feats = Vec::new();
        let mut mem_labels = Vec::new();
        for r in mem_data {
            let (f, l) = r?;
            mem_feats.push(f);
            mem_labels.extend(l);
        }
        let mem_views: Vec<_> = mem_feats.iter().map(|f| f.view()).collect();
        let memory = ndarray::concatenate(Axis(0), &mem_views).expect("same width");
        let k_eff = k.min(memory.nrows());
        let pred =
            crate::metrics::knn_dense_segmentation(&memory, &mem_labels, &query, k_eff)?;
        let miou = crate::metrics::mean_iou(&pred, &val_labels)?;
        out.push((factor, miou));
    }
    Ok(out)
}

/// Read every record from a training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(LogRecord::parse_csv_row)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_dataset;
    use crate::data::SceneConfig;

    fn tiny_config(dir: &Path) -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.set("scene.image_size", "16").unwrap();
        cfg.set("aug.output_size", "16").unwrap();
        cfg.set("aug.patch_size", "4").unwrap();
        cfg.set("encoder.image_size", "16").unwrap();
        cfg.set("encoder.patch_size", "4").unwrap();
        cfg.set("encoder.depth", "1").unwrap();
        cfg.set("encoder.embed_dim", "16").unwrap();
        cfg.set("encoder.num_heads", "2").unwrap();
        cfg.set("slots.num_slots", "2").unwrap();
        cfg.set("slots.slot_dim", "8").unwrap();
        cfg.set("slots.num_layers", "1").unwrap();
        cfg.set("slots.mlp_hidden", "16").unwrap();
        cfg.set("slots.decoder_hidden", "16").unwrap();
        cfg.set("head.out_dim", "16").unwrap();
        cfg.set("head.hidden", "16").unwrap();
        cfg.set("head.bottleneck", "8").unwrap();
        cfg.set("batch_size", "4").unwrap();
        cfg.set("epochs", "2").unwrap();
        cfg.set("sharpening_epochs", "1").unwrap();
        cfg.set("schedule.lr_warmup_epochs", "1").unwrap();
        cfg.set("schedule.tau_t_warmup_epochs", "1").unwrap();
        cfg.set("eval_every", "0").unwrap();
        cfg.set("num_slots_eval", "2").unwrap();
        cfg.train_dir = dir.join("train").to_string_lossy().into_owned();
        cfg.val_dir = dir.join("val").to_string_lossy().into_owned();
        cfg
    }

    fn write_tiny_data(dir: &Path) -> TrainConfig {
        let cfg = tiny_config(dir);
        let scene = SceneConfig {
            image_size: 16,
            ..SceneConfig::default()
        };
        write_dataset(Path::new(&cfg.train_dir), &scene, 8, 1).unwrap();
        write_dataset(Path::new(&cfg.val_dir), &scene, 3, 2).unwrap();
        cfg
    }

    #[test]
    fn zero_lr_freezes_student_and_momentum_one_freezes_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = write_tiny_data(dir.path());
        cfg.set("schedule.base_lr", "0").unwrap();
        cfg.set("optim.weight_decay", "0").unwrap();
        cfg.set("schedule.teacher_momentum_start", "1.0").unwrap();
        cfg.set("schedule.teacher_momentum_end", "1.0").unwrap();
        let train = load_dataset(Path::new(&cfg.train_dir)).unwrap();
        let mut session: TrainSession<f64> = TrainSession::new(cfg, train.len()).unwrap();
        let student_before = session.student.clone();
        let teacher_before = session.teacher.clone();
        let batch: Vec<&DatasetItem> = train.items.iter().take(4).collect();
        session.train_step(&batch).unwrap();
        assert_eq!(session.student, student_before);
        assert_eq!(session.teacher, teacher_before);
    }

    #[test]
    fn deterministic_mode_repeats_log_records() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_tiny_data(dir.path());
        let out_a = dir.path().join("runa");
        let out_b = dir.path().join("runb");
        let sum_a = run::<f32>(&cfg, &out_a, Some(3)).unwrap();
        let sum_b = run::<f32>(&cfg, &out_b, Some(3)).unwrap();
        let log_a = fs::read_to_string(sum_a.log_path).unwrap();
        let log_b = fs::read_to_string(sum_b.log_path).unwrap();
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_tiny_data(dir.path());
        let full = dir.path().join("full");
        let split = dir.path().join("split");
        run::<f32>(&cfg, &full, None).unwrap();
        run::<f32>(&cfg, &split, Some(2)).unwrap();
        let resumed = run::<f32>(&cfg, &split, None).unwrap();
        assert!(!resumed.stopped_early);
        let log_full = fs::read_to_string(full.join("train_log.csv")).unwrap();
        let log_split = fs::read_to_string(split.join("train_log.csv")).unwrap();
        assert_eq!(log_full, log_split);
        // final checkpoints agree byte for byte
        let a = fs::read(full.join("checkpoints/final.ckpt")).unwrap();
        let b = fs::read(split.join("checkpoints/final.ckpt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sharpening_stage_freezes_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_tiny_data(dir.path());
        let train = load_dataset(Path::new(&cfg.train_dir)).unwrap();
        let mut session: TrainSession<f32> = TrainSession::new(cfg, train.len()).unwrap();
        // Skip to the sharpening stage.
        session.step = session.stage1_steps();
        let teacher_before = session.teacher.clone();
        let student_before = session.student.clone();
        let batch: Vec<&DatasetItem> = train.items.iter().take(4).collect();
        let record = session.train_step(&batch).unwrap();
        assert_eq!(session.teacher, teacher_before);
        assert_ne!(session.student, student_before);
        assert!(record.loss_total.is_finite());
        assert_eq!(record.loss_oc, 0.0);
    }

    #[test]
    fn view_swap_leaves_distill_loss_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_tiny_data(dir.path());
        let train = load_dataset(Path::new(&cfg.train_dir)).unwrap();
        let session: TrainSession<f64> = TrainSession::new(cfg, train.len()).unwrap();
        let item = &train.items[0];
        let seed = derive_seed(session.cfg.seed, stream::TRAIN_STEP, 0, 0);
        let out = session.distill_image(item, seed).unwrap();
        let swapped = session.distill_image_swapped_for_test(item, seed).unwrap();
        assert!(
            (out.loss_total - swapped.loss_total).abs() < 1e-6,
            "{} vs {}",
            out.loss_total,
            swapped.loss_total
        );
    }

    #[test]
    fn checkpoint_restores_session_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_tiny_data(dir.path());
        let train = load_dataset(Path::new(&cfg.train_dir)).unwrap();
        let mut session: TrainSession<f32> = TrainSession::new(cfg.clone(), train.len()).unwrap();
        let batch: Vec<&DatasetItem> = train.items.iter().take(4).collect();
        session.train_step(&batch).unwrap();
        session.train_step(&batch).unwrap();
        let ckpt = session.to_checkpoint();
        let restored = TrainSession::<f32>::from_checkpoint(cfg, &ckpt, train.len()).unwrap();
        assert_eq!(restored.student, session.student);
        assert_eq!(restored.teacher, session.teacher);
        assert_eq!(restored.step, session.step);
        assert_eq!(restored.optimizer.m, session.optimizer.m);
        assert_eq!(restored.to_checkpoint().to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn evaluate_produces_reasonable_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_tiny_data(dir.path());
        let train = load_dataset(Path::new(&cfg.train_dir)).unwrap();
        let val = load_dataset(Path::new(&cfg.val_dir)).unwrap();
        let session: TrainSession<f32> = TrainSession::new(cfg, train.len()).unwrap();
        let (report, rows) = session.evaluate(&val).unwrap();
        assert_eq!(rows.len(), val.len());
        assert!((0.0..=1.0).contains(&report.mbo));
        assert!((0.0..=1.0).contains(&report.supervised_fraction));
        // same seed, same checkpoint: identical report
        let (report2, _) = session.evaluate(&val).unwrap();
        assert_eq!(report.fg_ari, report2.fg_ari);
        assert_eq!(report.mbo, report2.mbo);
    }
}

#[cfg(test)]
impl<T: Scalar> TrainSession<T> {
    /// Test-only mirror of [`TrainSession::distill_image`] with the two
    /// views exchanged after sampling.
    fn distill_image_swapped_for_test(&self, item: &DatasetItem, seed: u64) -> Result<ImageOut<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views = self.prepare_views(item, &mut rng)?;
        let views = [views[1].clone_for_test(), views[0].clone_for_test()];

        let (zt1, heads1) = self.teacher_forward(&views[0].image, true);
        let (zt2, heads2) = self.teacher_forward(&views[1].image, true);
        let (tlog1, tglob1) = heads1.expect("heads requested");
        let (tlog2, tglob2) = heads2.expect("heads requested");

        let zt1h = apply_invaug(&zt1, &views[0].map)?;
        let zt2h = apply_invaug(&zt2, &views[1].map)?;
        let mask = filter_mask(&zt1h, &zt2h, &self.cfg.filter)?;
        let weights = supervision_weights(
            self.step,
            self.stage1_steps(),
            &mask,
            &self.cfg.filter,
            &mut rng,
        );
        let sup_frac = supervised_fraction(&weights)?;
        let tau_t = self.state.tau_t;
        let a1 = teacher_distribution(
            &apply_invaug(&tlog1, &views[0].map)?,
            &self.state.center_patch,
            tau_t,
        );
        let a2 = teacher_distribution(
            &apply_invaug(&tlog2, &views[1].map)?,
            &self.state.center_patch,
            tau_t,
        );
        let ag1 = teacher_distribution(&tglob1, &self.state.center_global, tau_t);
        let ag2 = teacher_distribution(&tglob2, &self.state.center_global, tau_t);

        let n = self.cfg.encoder.num_patches();
        let g: Graph<T> = Graph::new();
        let mut student_logits = Vec::with_capacity(2);
        let mut student_global = Vec::with_capacity(2);
        for view in &views {
            let img = g.constant(view.image.clone().into_dyn());
            let (glob, patches) = encode_vars(&g, img, &self.student, &self.cfg.encoder);
            let init = init_slots_vars(&g, &view.noise, &self.student);
            let (slots, _) = slot_encode_vars(&g, patches, init, &self.student, &self.cfg.slots);
            let (recon, _, _) = slot_decode_vars(&g, slots, n, &self.student, &self.cfg.slots);
            let logits = project_vars(&g, recon, &self.student, &self.cfg.head, "head")
                .apply_alignment(&view.map);
            student_logits.push(logits);
            student_global.push(project_vars(
                &g,
                glob,
                &self.student,
                &self.cfg.head,
                global_head_prefix(&self.cfg),
            ));
        }
        let norm = T::from_f64(weights.iter().map(|w| w.to_f64s()).sum::<f64>().max(1.0));
        let half = T::from_f64(0.5);
        let ce1 = masked_ce_vars(&g, &a1, student_logits[1], self.state.tau, &weights, norm);
        let ce2 = masked_ce_vars(&g, &a2, student_logits[0], self.state.tau, &weights, norm);
        let l_oc = ce1.add(ce2).scale(half);
        let one_w = Array1::<T>::ones(1);
        let gce1 = masked_ce_vars(&g, &ag1, student_global[1], self.state.tau, &one_w, T::one());
        let gce2 = masked_ce_vars(&g, &ag2, student_global[0], self.state.tau, &one_w, T::one());
        let l_global = gce1.add(gce2).scale(half);
        let loss = l_oc
            .scale(T::from_f64(self.state.lambda_oc))
            .add(l_global.scale(T::from_f64(self.state.lambda_global)));
        Ok(ImageOut {
            grads: BTreeMap::new(),
            loss_total: loss.scalar_value().to_f64s(),
            loss_oc: 0.0,
            loss_global: 0.0,
            sup_frac,
            teacher_patch_logits: None,
            teacher_global_logits: None,
        })
    }
}

#[cfg(test)]
impl<T: Scalar> ViewBundle<T> {
    fn clone_for_test(&self) -> ViewBundle<T> {
        ViewBundle {
            vp: self.vp,
            image: self.image.clone(),
            noise: self.noise.clone(),
            map: self.map.clone(),
        }
    }
}
