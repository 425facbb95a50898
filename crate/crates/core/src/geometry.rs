//! Paired-view crop geometry.
//!
//! Two random resized crops of the same image are guaranteed to overlap; the
//! overlap region, cut from each view and resampled back to the view's own
//! patch grid, aligns the two feature grids patch-to-patch. This module owns
//! the crop sampling, the overlap computation, the resampling maps, and exact
//! patch-footprint correspondences between views.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned box in source-image pixels. Zero width or height encodes
/// "no overlap".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Rect {
            x,
            y,
            width,
            height,
        }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn right(&self) -> f64 {
        self.x + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.height
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        let x = self.x.max(other.x);
        let y = self.y.max(other.y);
        let w = (self.right().min(other.right()) - x).max(0.0);
        let h = (self.bottom().min(other.bottom()) - y).max(0.0);
        Rect::new(x, y, w, h)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersect(other).area();
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Crop-and-flip geometry of one augmented view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub crop: Rect,
    pub hflip: bool,
    /// Side length of the square resized output, in pixels.
    pub output_size: usize,
}

impl ViewParams {
    /// Patch-grid side length for a given patch size.
    pub fn grid_size(&self, patch_size: usize) -> usize {
        self.output_size / patch_size
    }

    /// Map a continuous output-pixel coordinate into source-image pixels.
    pub fn output_to_source(&self, u: f64, v: f64) -> (f64, f64) {
        let os = self.output_size as f64;
        let u = if self.hflip { os - u } else { u };
        (
            self.crop.x + u / os * self.crop.width,
            self.crop.y + v / os * self.crop.height,
        )
    }

    /// Source-pixel footprint of patch `(row, col)`.
    pub fn patch_footprint(&self, row: usize, col: usize, patch_size: usize) -> Rect {
        let p = patch_size as f64;
        let (u0, u1) = (col as f64 * p, (col as f64 + 1.0) * p);
        let (v0, v1) = (row as f64 * p, (row as f64 + 1.0) * p);
        let (x0, y0) = self.output_to_source(u0, v0);
        let (x1, y1) = self.output_to_source(u1, v1);
        Rect::new(x0.min(x1), y0.min(y1), (x1 - x0).abs(), (y1 - y0).abs())
    }
}

/// Geometric augmentation settings; keys match the text config.
#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub hflip_prob: f64,
    pub output_size: usize,
    pub patch_size: usize,
    pub overlap_fallback_retries: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_scale_min: 0.4,
            crop_scale_max: 1.0,
            hflip_prob: 0.5,
            output_size: 64,
            patch_size: 8,
            overlap_fallback_retries: 10,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_scale_min > 0.0
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return Err(Error::Config(format!(
                "crop scale range ({}, {}) must satisfy 0 < min <= max <= 1",
                self.crop_scale_min, self.crop_scale_max
            )));
        }
        if self.patch_size == 0 || self.output_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "output_size {} must be divisible by patch_size {}",
                self.output_size, self.patch_size
            )));
        }
        Ok(())
    }
}

const ASPECT_MIN: f64 = 0.75;
const ASPECT_MAX: f64 = 4.0 / 3.0;

fn centered_crop(source: usize, scale: f64, output_size: usize) -> ViewParams {
    let s = source as f64;
    let side = (s * scale.sqrt()).min(s);
    ViewParams {
        crop: Rect::new((s - side) / 2.0, (s - side) / 2.0, side, side),
        hflip: false,
        output_size,
    }
}

fn sample_single_view<R: Rng>(rng: &mut R, source: usize, cfg: &AugConfig) -> ViewParams {
    let s = source as f64;
    let area = s * s;
    for _ in 0..10 {
        let target_area = area * rng.gen_range(cfg.crop_scale_min..=cfg.crop_scale_max);
        let aspect = (rng.gen_range(ASPECT_MIN.ln()..=ASPECT_MAX.ln())).exp();
        let w = (target_area * aspect).sqrt();
        let h = (target_area / aspect).sqrt();
        if w <= s && h <= s {
            let x = rng.gen_range(0.0..=(s - w));
            let y = rng.gen_range(0.0..=(s - h));
            let hflip = rng.gen::<f64>() < cfg.hflip_prob;
            return ViewParams {
                crop: Rect::new(x, y, w, h),
                hflip,
                output_size: cfg.output_size,
            };
        }
    }
    let mid = 0.5 * (cfg.crop_scale_min + cfg.crop_scale_max);
    let mut vp = centered_crop(source, mid, cfg.output_size);
    vp.hflip = rng.gen::<f64>() < cfg.hflip_prob;
    vp
}

/// Sample a pair of views whose crops intersect with positive area. After
/// `overlap_fallback_retries` rejected attempts, falls back to two identical
/// centered crops at mid scale.
pub fn sample_view_pair<R: Rng>(
    rng: &mut R,
    source_size: usize,
    cfg: &AugConfig,
) -> Result<(ViewParams, ViewParams)> {
    cfg.validate()?;
    if source_size == 0 {
        return Err(Error::Config("source_size must be positive".into()));
    }
    for _ in 0..cfg.overlap_fallback_retries.max(1) {
        let v1 = sample_single_view(rng, source_size, cfg);
        let v2 = sample_single_view(rng, source_size, cfg);
        if v1.crop.intersect(&v2.crop).area() > 0.0 {
            return Ok((v1, v2));
        }
    }
    let mid = 0.5 * (cfg.crop_scale_min + cfg.crop_scale_max);
    let vp = centered_crop(source_size, mid, cfg.output_size);
    Ok((vp, vp))
}

/// Rectangle intersection of two view crops in source coordinates.
pub fn overlap_box(vp1: &ViewParams, vp2: &ViewParams) -> Rect {
    vp1.crop.intersect(&vp2.crop)
}

/// One target cell of an [`AlignmentMap`]: the continuous source-grid
/// location it reads from, plus bilinear taps (border-clamped, weights sum
/// to 1).
#[derive(Debug, Clone)]
pub struct MapEntry {
    pub row: f64,
    pub col: f64,
    /// `(flat source index, weight)` over the 4 nearest grid cells.
    pub taps: [(usize, f64); 4],
}

/// Patch-grid resampling map realizing the inverse-augmentation cut of the
/// overlap region for one view.
#[derive(Debug, Clone)]
pub struct AlignmentMap {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub entries: Vec<MapEntry>,
}

impl AlignmentMap {
    pub fn num_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Identity map on a `g x g` grid.
    pub fn identity(g: usize) -> Self {
        let entries = (0..g * g)
            .map(|i| MapEntry {
                row: (i / g) as f64,
                col: (i % g) as f64,
                taps: [(i, 1.0), (i, 0.0), (i, 0.0), (i, 0.0)],
            })
            .collect();
        AlignmentMap {
            grid_rows: g,
            grid_cols: g,
            entries,
        }
    }
}

fn bilinear_taps(row: f64, col: f64, rows: usize, cols: usize) -> [(usize, f64); 4] {
    let clamp = |v: i64, hi: usize| -> usize { v.clamp(0, hi as i64 - 1) as usize };
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0i, c0i) = (r0 as i64, c0 as i64);
    let mut taps = [(0usize, 0.0f64); 4];
    let weights = [
        (0, 0, (1.0 - fr) * (1.0 - fc)),
        (0, 1, (1.0 - fr) * fc),
        (1, 0, fr * (1.0 - fc)),
        (1, 1, fr * fc),
    ];
    for (k, (dr, dc, w)) in weights.into_iter().enumerate() {
        let rr = clamp(r0i + dr, rows);
        let cc = clamp(c0i + dc, cols);
        taps[k] = (rr * cols + cc, w);
    }
    taps
}

/// Build the per-patch resampling map that cuts `overlap` out of `vp` and
/// stretches it back over the view's full patch grid. Bilinear over the 4
/// nearest grid cells, clamped at borders; horizontal coordinates mirror when
/// the view is flipped.
pub fn alignment_map(vp: &ViewParams, overlap: &Rect, patch_size: usize) -> Result<AlignmentMap> {
    if overlap.area() <= 0.0 {
        return Err(Error::Geometry("zero-area overlap".into()));
    }
    let g = vp.grid_size(patch_size);
    if g == 0 {
        return Err(Error::Config("patch grid is empty".into()));
    }
    let os = vp.output_size as f64;
    let p = patch_size as f64;
    let mut entries = Vec::with_capacity(g * g);
    for tr in 0..g {
        for tc in 0..g {
            let sx = overlap.x + (tc as f64 + 0.5) / g as f64 * overlap.width;
            let sy = overlap.y + (tr as f64 + 0.5) / g as f64 * overlap.height;
            let mut u = (sx - vp.crop.x) / vp.crop.width * os;
            let v = (sy - vp.crop.y) / vp.crop.height * os;
            if vp.hflip {
                u = os - u;
            }
            let col = u / p - 0.5;
            let row = v / p - 0.5;
            entries.push(MapEntry {
                row,
                col,
                taps: bilinear_taps(row, col, g, g),
            });
        }
    }
    Ok(AlignmentMap {
        grid_rows: g,
        grid_cols: g,
        entries,
    })
}

/// Back-project target cell `t` of `map` (built for `vp`) to source pixels.
pub fn backproject_cell(vp: &ViewParams, map: &AlignmentMap, t: usize) -> (f64, f64) {
    let e = &map.entries[t];
    let p = vp.output_size as f64 / map.grid_cols as f64;
    let mut u = (e.col + 0.5) * p;
    let v = (e.row + 0.5) * p;
    if vp.hflip {
        u = vp.output_size as f64 - u;
    }
    let os = vp.output_size as f64;
    (
        vp.crop.x + u / os * vp.crop.width,
        vp.crop.y + v / os * vp.crop.height,
    )
}

/// Resample a feature grid (`N x d`, rows in row-major grid order) through a
/// map. Panics on shape mismatch; use [`apply_invaug`] for the checked form.
pub fn resample_features<T: Scalar>(features: &ndarray::ArrayView2<'_, T>, map: &AlignmentMap) -> Array2<T> {
    assert_eq!(
        features.nrows(),
        map.num_cells(),
        "feature rows must match map cells"
    );
    let d = features.ncols();
    let mut out = Array2::<T>::zeros((map.num_cells(), d));
    for (t, entry) in map.entries.iter().enumerate() {
        let mut orow = out.row_mut(t);
        for &(src, w) in &entry.taps {
            if w == 0.0 {
                continue;
            }
            let w = T::from_f64(w);
            orow.zip_mut_with(&features.row(src), |o, &f| *o = *o + w * f);
        }
    }
    out
}

/// Inverse-augmentation resampling of a patch-feature grid.
pub fn apply_invaug<T: Scalar>(features: &Array2<T>, map: &AlignmentMap) -> Result<Array2<T>> {
    if features.nrows() != map.num_cells() {
        return Err(Error::Shape(format!(
            "feature grid has {} rows, map has {} cells",
            features.nrows(),
            map.num_cells()
        )));
    }
    Ok(resample_features(&features.view(), map))
}

/// Patch-index pairs `(i, j)` between two views; `i` indexes view 1's grid
/// and is unique within the set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Pairs of patches whose source-image footprints overlap with IoU at or
/// above `iou_threshold`; each view-1 patch keeps only its best match (ties
/// broken toward the lower index).
pub fn patch_correspondences(
    vp1: &ViewParams,
    vp2: &ViewParams,
    patch_size: usize,
    iou_threshold: f64,
) -> CorrespondenceSet {
    let g1 = vp1.grid_size(patch_size);
    let g2 = vp2.grid_size(patch_size);
    let feet2: Vec<Rect> = (0..g2 * g2)
        .map(|j| vp2.patch_footprint(j / g2, j % g2, patch_size))
        .collect();
    let mut pairs = Vec::new();
    for i in 0..g1 * g1 {
        let f1 = vp1.patch_footprint(i / g1, i % g1, patch_size);
        let mut best: Option<(usize, f64)> = None;
        for (j, f2) in feet2.iter().enumerate() {
            let iou = f1.iou(f2);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= iou_threshold {
                pairs.push((i, j));
            }
        }
    }
    CorrespondenceSet { pairs }
}
