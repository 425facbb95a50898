//! Small vision-transformer encoder.
//!
//! Produces a global representation (class token) and one representation per
//! patch. The same architecture is instantiated twice: once as the trainable
//! encoder and once as its EMA target copy.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{concat_cols, concat_rows, im2col, layer_norm, Graph, Var};
use crate::params::{trunc_normal, zeros, ParamSet};
use crate::scalar::Scalar;

pub use crate::params::clone_parameters;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub image_size: usize,
    pub in_channels: usize,
    /// Ablation switch: drop the learned positional embeddings.
    pub use_pos_embed: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 3,
            embed_dim: 64,
            patch_size: 8,
            num_heads: 4,
            mlp_ratio: 4.0,
            image_size: 64,
            in_channels: 3,
            use_pos_embed: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patches per image.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Global plus per-patch representations from one encoder pass.
#[derive(Debug, Clone)]
pub struct FeatureBundle<T: Scalar> {
    pub global: Array1<T>,
    pub patches: Array2<T>,
}

impl<T: Scalar> FeatureBundle<T> {
    pub fn validate(&self) -> Result<()> {
        if self.global.iter().any(|x| !x.is_finite())
            || self.patches.iter().any(|x| !x.is_finite())
        {
            return Err(Error::Train("non-finite encoder output".into()));
        }
        Ok(())
    }
}

/// Install freshly initialized encoder parameters under `enc/` in `params`.
pub fn init_encoder_params<T: Scalar, R: Rng>(
    rng: &mut R,
    cfg: &EncoderConfig,
    params: &mut ParamSet<T>,
) {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let n = cfg.num_patches();
    let hidden = cfg.mlp_hidden();
    let std = 0.02;
    params.insert("enc/patch/w", trunc_normal(rng, &[p * p * cfg.in_channels, d], std));
    params.insert("enc/patch/b", zeros(&[1, d]));
    params.insert("enc/cls", trunc_normal(rng, &[1, d], std));
    params.insert("enc/pos", trunc_normal(rng, &[n + 1, d], std));
    for l in 0..cfg.depth {
        let pre = format!("enc/block{l}");
        params.insert(format!("{pre}/ln1/g"), crate::params::ones(&[1, d]));
        params.insert(format!("{pre}/ln1/b"), zeros(&[1, d]));
        params.insert(format!("{pre}/attn/wqkv"), trunc_normal(rng, &[d, 3 * d], std));
        params.insert(format!("{pre}/attn/bqkv"), zeros(&[1, 3 * d]));
        params.insert(format!("{pre}/attn/wo"), trunc_normal(rng, &[d, d], std));
        params.insert(format!("{pre}/attn/bo"), zeros(&[1, d]));
        params.insert(format!("{pre}/ln2/g"), crate::params::ones(&[1, d]));
        params.insert(format!("{pre}/ln2/b"), zeros(&[1, d]));
        params.insert(format!("{pre}/mlp/w1"), trunc_normal(rng, &[d, hidden], std));
        params.insert(format!("{pre}/mlp/b1"), zeros(&[1, hidden]));
        params.insert(format!("{pre}/mlp/w2"), trunc_normal(rng, &[hidden, d], std));
        params.insert(format!("{pre}/mlp/b2"), zeros(&[1, d]));
    }
    params.insert("enc/lnf/g", crate::params::ones(&[1, d]));
    params.insert("enc/lnf/b", zeros(&[1, d]));
}

fn attention<'g, T: Scalar>(
    g: &'g Graph<T>,
    x: Var<'g, T>,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
    pre: &str,
) -> Var<'g, T> {
    let d = cfg.embed_dim;
    let dh = d / cfg.num_heads;
    let wqkv = g.param(&format!("{pre}/attn/wqkv"), params.get(&format!("{pre}/attn/wqkv")).clone());
    let bqkv = g.param(&format!("{pre}/attn/bqkv"), params.get(&format!("{pre}/attn/bqkv")).clone());
    let qkv = x.matmul(wqkv).add_rowvec(bqkv);
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = qkv.slice_cols(h * dh, (h + 1) * dh);
        let k = qkv.slice_cols(d + h * dh, d + (h + 1) * dh);
        let v = qkv.slice_cols(2 * d + h * dh, 2 * d + (h + 1) * dh);
        let logits = q.matmul(k.transpose()).scale(scale);
        let attn = logits.softmax(1);
        heads.push(attn.matmul(v));
    }
    let merged = concat_cols(g, &heads);
    let wo = g.param(&format!("{pre}/attn/wo"), params.get(&format!("{pre}/attn/wo")).clone());
    let bo = g.param(&format!("{pre}/attn/bo"), params.get(&format!("{pre}/attn/bo")).clone());
    merged.matmul(wo).add_rowvec(bo)
}

fn ln<'g, T: Scalar>(
    g: &'g Graph<T>,
    x: Var<'g, T>,
    params: &ParamSet<T>,
    name: &str,
) -> Var<'g, T> {
    let gain = g.param(&format!("{name}/g"), params.get(&format!("{name}/g")).clone());
    let bias = g.param(&format!("{name}/b"), params.get(&format!("{name}/b")).clone());
    layer_norm(x, gain, bias)
}

/// Tape forward pass; returns `(global 1 x d, patches N x d)`.
pub fn encode_vars<'g, T: Scalar>(
    g: &'g Graph<T>,
    image: Var<'g, T>,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
) -> (Var<'g, T>, Var<'g, T>) {
    let n = cfg.num_patches();
    let wp = g.param("enc/patch/w", params.get("enc/patch/w").clone());
    let bp = g.param("enc/patch/b", params.get("enc/patch/b").clone());
    let tokens = im2col(image, cfg.patch_size).matmul(wp).add_rowvec(bp);
    let cls = g.param("enc/cls", params.get("enc/cls").clone());
    let mut x = concat_rows(g, &[cls, tokens]);
    if cfg.use_pos_embed {
        let pos = g.param("enc/pos", params.get("enc/pos").clone());
        x = x.add(pos);
    }
    for l in 0..cfg.depth {
        let pre = format!("enc/block{l}");
        let h = ln(g, x, params, &format!("{pre}/ln1"));
        x = x.add(attention(g, h, params, cfg, &pre));
        let h2 = ln(g, x, params, &format!("{pre}/ln2"));
        let w1 = g.param(&format!("{pre}/mlp/w1"), params.get(&format!("{pre}/mlp/w1")).clone());
        let b1 = g.param(&format!("{pre}/mlp/b1"), params.get(&format!("{pre}/mlp/b1")).clone());
        let w2 = g.param(&format!("{pre}/mlp/w2"), params.get(&format!("{pre}/mlp/w2")).clone());
        let b2 = g.param(&format!("{pre}/mlp/b2"), params.get(&format!("{pre}/mlp/b2")).clone());
        let m = h2.matmul(w1).add_rowvec(b1).gelu().matmul(w2).add_rowvec(b2);
        x = x.add(m);
    }
    x = ln(g, x, params, "enc/lnf");
    let global = x.slice_rows(0, 1);
    let patches = x.slice_rows(1, n + 1);
    (global, patches)
}

/// Deterministic encoder forward on plain arrays.
pub fn encode<T: Scalar>(
    image: &Array3<T>,
    params: &ParamSet<T>,
    cfg: &EncoderConfig,
) -> Result<FeatureBundle<T>> {
    cfg.validate()?;
    let (h, w, c) = image.dim();
    if h != cfg.image_size || w != cfg.image_size || c != cfg.in_channels {
        return Err(Error::Shape(format!(
            "image {h}x{w}x{c} does not match config {}x{}x{}",
            cfg.image_size, cfg.image_size, cfg.in_channels
        )));
    }
    if image.iter().any(|x| !x.is_finite()) {
        return Err(Error::Train("non-finite image values".into()));
    }
    let g: Graph<T> = Graph::new();
    let img = g.constant(image.clone().into_dyn());
    let (global, patches) = encode_vars(&g, img, params, cfg);
    let global = global
        .eval()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d")
        .row(0)
        .to_owned();
    let patches = patches
        .eval()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d");
    Ok(FeatureBundle { global, patches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_cfg() -> EncoderConfig {
        EncoderConfig {
            depth: 1,
            embed_dim: 8,
            patch_size: 4,
            num_heads: 1,
            mlp_ratio: 2.0,
            image_size: 8,
            in_channels: 3,
            use_pos_embed: true,
        }
    }

    fn rand_image(rng: &mut ChaCha8Rng, size: usize) -> Array3<f64> {
        Array3::from_shape_fn((size, size, 3), |_| rand::Rng::gen_range(rng, 0.0..1.0))
    }

    #[test]
    fn output_shapes_follow_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EncoderConfig {
            image_size: 64,
            patch_size: 8,
            ..EncoderConfig::default()
        };
        let mut ps: ParamSet<f64> = ParamSet::new();
        init_encoder_params(&mut rng, &cfg, &mut ps);
        let img = rand_image(&mut rng, 64);
        let out = encode(&img, &ps, &cfg).unwrap();
        assert_eq!(out.patches.dim(), (64, 64));
        assert_eq!(out.global.len(), 64);
        assert_eq!(cfg.num_patches(), 64);

        // 224/16 -> 196 patches, by shape arithmetic alone.
        let cfg224 = EncoderConfig {
            image_size: 224,
            patch_size: 16,
            ..EncoderConfig::default()
        };
        assert_eq!(cfg224.num_patches(), 196);
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = micro_cfg();
        let mut ps: ParamSet<f64> = ParamSet::new();
        init_encoder_params(&mut rng, &cfg, &mut ps);
        let img = rand_image(&mut rng, 8);
        let a = encode(&img, &ps, &cfg).unwrap();
        let b = encode(&img, &ps, &cfg).unwrap();
        assert_eq!(a.patches, b.patches);
        assert_eq!(a.global, b.global);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = micro_cfg();
        let mut ps: ParamSet<f64> = ParamSet::new();
        init_encoder_params(&mut rng, &cfg, &mut ps);
        let img = rand_image(&mut rng, 16);
        assert!(encode(&img, &ps, &cfg).is_err());
    }

    #[test]
    fn positional_embedding_controls_permutation_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = micro_cfg();
        let mut ps: ParamSet<f64> = ParamSet::new();
        init_encoder_params(&mut rng, &cfg, &mut ps);
        let img = rand_image(&mut rng, 8);
        // Swap the two left patches with the two right patches (2x2 grid of
        // 4x4 patches).
        let mut swapped = img.clone();
        for y in 0..8 {
            for x in 0..4 {
                for ch in 0..3 {
                    swapped[[y, x, ch]] = img[[y, x + 4, ch]];
                    swapped[[y, x + 4, ch]] = img[[y, x, ch]];
                }
            }
        }
        let perm = [1usize, 0, 3, 2];

        // Without positional embeddings the encoder is permutation
        // equivariant; with them it is not.
        cfg.use_pos_embed = false;
        let plain = encode(&img, &ps, &cfg).unwrap();
        let moved = encode(&swapped, &ps, &cfg).unwrap();
        for (i, &pi) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((moved.patches[[i, c]] - plain.patches[[pi, c]]).abs() < 1e-10);
            }
        }

        cfg.use_pos_embed = true;
        let plain = encode(&img, &ps, &cfg).unwrap();
        let moved = encode(&swapped, &ps, &cfg).unwrap();
        let mut max_dev: f64 = 0.0;
        for (i, &pi) in perm.iter().enumerate() {
            for c in 0..8 {
                max_dev = max_dev.max((moved.patches[[i, c]] - plain.patches[[pi, c]]).abs());
            }
        }
        assert!(max_dev > 1e-6, "positional information missing");
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = micro_cfg();
        let mut ps: ParamSet<f64> = ParamSet::new();
        init_encoder_params(&mut rng, &cfg, &mut ps);
        let img = rand_image(&mut rng, 8);
        let report = crate::gradcheck::check_params(&ps, 1e-5, |g, p| {
            let image = g.constant(img.clone().into_dyn());
            let (global, patches) = encode_vars(g, image, p, &cfg);
            global.tanh().sum_all().add(patches.tanh().mean_all())
        });
        assert!(
            report.max_rel_err < 1e-4,
            "gradcheck failed: {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}
