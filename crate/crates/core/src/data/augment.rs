//! Weak (flip + crop) and strong (photometric + CutMix) views.
//!
//! The strong view is built on top of the weak view, so both share pixel
//! geometry and a pseudo-label computed on the weak view supervises the
//! strong view pixel for pixel. CutMix regions are returned so the caller
//! can mix pseudo-labels with the same mask.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip_prob: f64,
    /// Per-channel gain drawn from `1 ± jitter_gain`.
    pub jitter_gain: f64,
    /// Per-channel offset drawn from `± jitter_offset`.
    pub jitter_offset: f64,
    pub gray_prob: f64,
    /// Blend factor towards the channel mean when grayscale fires; 1 is a
    /// full collapse.
    pub gray_strength: f64,
    pub blur_prob: f64,
    pub cutmix_prob: f64,
    /// CutMix area fraction is drawn uniformly from this range.
    pub cutmix_area: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            crop_height: 16,
            crop_width: 16,
            flip_prob: 0.5,
            jitter_gain: 0.3,
            jitter_offset: 0.3,
            gray_prob: 0.2,
            gray_strength: 0.6,
            blur_prob: 0.3,
            cutmix_prob: 0.5,
            cutmix_area: (0.2, 0.5),
        }
    }
}

impl AugConfig {
    /// Strong augmentation that changes nothing.
    pub fn identity(crop_height: usize, crop_width: usize) -> Self {
        AugConfig {
            crop_height,
            crop_width,
            flip_prob: 0.0,
            jitter_gain: 0.0,
            jitter_offset: 0.0,
            gray_prob: 0.0,
            gray_strength: 0.0,
            blur_prob: 0.0,
            cutmix_prob: 0.0,
            cutmix_area: (0.2, 0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let (lo, hi) = self.cutmix_area;
        if self.crop_height == 0
            || self.crop_width == 0
            || ![self.flip_prob, self.gray_prob, self.blur_prob, self.cutmix_prob, self.gray_strength]
                .into_iter()
                .all(prob)
            || !(0.0 < lo && lo <= hi && hi <= 1.0)
            || !(0.0..1.0).contains(&self.jitter_gain)
            || !(self.jitter_offset >= 0.0)
        {
            return Err(Error::invalid(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Photometric {
    pub gains: Vec<f64>,
    pub offsets: Vec<f64>,
    /// Blend factor towards the channel mean, when grayscale fired.
    pub grayscale: Option<f64>,
    pub blur: bool,
}

/// Region pasted from the partner view: `rows` full rows of `cols` pixels
/// starting at `(top, left)`, then `remainder` pixels of the next row. The
/// region therefore covers exactly `round(fraction · h · w)` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutMixBox {
    pub partner: usize,
    pub fraction: f64,
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
    pub remainder: usize,
}

impl CutMixBox {
    fn sample(rng: &mut Rng, partner: usize, h: usize, w: usize, (lo, hi): (f64, f64)) -> Self {
        let fraction = if lo < hi { rng.random_range(lo..hi) } else { lo };
        let area = ((fraction * (h * w) as f64).round() as usize).clamp(1, h * w);
        // Aspect ratio in [1/2, 2], then fit the box inside the view.
        let aspect = 2f64.powf(rng.random_range(-1.0..1.0));
        let mut cols = ((area as f64 * aspect).sqrt().round() as usize).clamp(1, w);
        cols = cols.max(area.div_ceil(h));
        let (rows, remainder) = (area / cols, area % cols);
        let used_rows = rows + usize::from(remainder > 0);
        CutMixBox {
            partner,
            fraction,
            top: rng.random_range(0..=h - used_rows),
            left: rng.random_range(0..=w - cols),
            rows,
            cols,
            remainder,
        }
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols + self.remainder
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let in_cols = |n: usize| x >= self.left && x < self.left + n;
        if y >= self.top && y < self.top + self.rows {
            in_cols(self.cols)
        } else {
            y == self.top + self.rows && in_cols(self.remainder)
        }
    }

    /// Row-major `[h, w]` mask, `true` where the partner is pasted.
    pub fn mask(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|i| self.contains(i / w, i % w)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugRecord {
    pub flip: bool,
    pub crop: CropWindow,
    pub photometric: Option<Photometric>,
    pub cutmix: Option<CutMixBox>,
}

pub struct WeakView {
    pub image: Tensor,
    pub labels: Option<LabelMap>,
    pub record: AugRecord,
}

pub struct StrongView {
    pub image: Tensor,
    pub photometric: Photometric,
    pub cutmix: Option<CutMixBox>,
}

/// Mirrors a `[C, H, W]` image left to right.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = image.dims3("flip_horizontal")?;
    let src = image.data();
    let data = (0..c * h * w)
        .map(|i| {
            let (row, x) = (i / w, i % w);
            src[row * w + (w - 1 - x)]
        })
        .collect();
    Tensor::new(vec![c, h, w], data)
}

fn flip_labels(labels: &LabelMap) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let src = labels.data();
    let data = (0..labels.batch() * h * w)
        .map(|i| src[(i / w) * w + (w - 1 - i % w)])
        .collect();
    LabelMap::new(labels.batch(), h, w, data).expect("same size")
}

fn crop_check(record: &AugRecord, h: usize, w: usize) -> Result<()> {
    let c = record.crop;
    if c.height == 0 || c.width == 0 || c.top + c.height > h || c.left + c.width > w {
        return Err(Error::invalid(format!("crop {c:?} exceeds source {h}x{w}")));
    }
    Ok(())
}

/// Flip (if recorded) then crop a `[C, H, W]` image.
pub fn apply_geometry(record: &AugRecord, image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = image.dims3("apply_geometry")?;
    crop_check(record, h, w)?;
    let src = if record.flip { flip_horizontal(image)? } else { image.clone() };
    let CropWindow { top, left, height, width } = record.crop;
    let mut data = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in top..top + height {
            let base = (ch * h + y) * w;
            data.extend_from_slice(&src.data()[base + left..base + left + width]);
        }
    }
    Tensor::new(vec![c, height, width], data)
}

/// Same transform as [`apply_geometry`] for a label map.
pub fn apply_geometry_labels(record: &AugRecord, labels: &LabelMap) -> Result<LabelMap> {
    let (b, h, w) = (labels.batch(), labels.height(), labels.width());
    crop_check(record, h, w)?;
    let src = if record.flip { flip_labels(labels) } else { labels.clone() };
    let CropWindow { top, left, height, width } = record.crop;
    let mut data = Vec::with_capacity(b * height * width);
    for n in 0..b {
        for y in top..top + height {
            let base = (n * h + y) * w;
            data.extend_from_slice(&src.data()[base + left..base + left + width]);
        }
    }
    LabelMap::new(b, height, width, data)
}

/// Horizontal flip with `flip_prob`, then a uniformly placed crop of the
/// configured size. Labels, when given, get the identical geometry.
pub fn weak_augment(
    rng: &mut Rng,
    image: &Tensor,
    labels: Option<&LabelMap>,
    cfg: &AugConfig,
) -> Result<WeakView> {
    let [_, h, w] = image.dims3("weak_augment")?;
    if cfg.crop_height > h || cfg.crop_width > w {
        return Err(Error::invalid(format!(
            "crop {}x{} larger than source {h}x{w}",
            cfg.crop_height, cfg.crop_width
        )));
    }
    let flip = rng.random_bool(cfg.flip_prob);
    let crop = CropWindow {
        top: rng.random_range(0..=h - cfg.crop_height),
        left: rng.random_range(0..=w - cfg.crop_width),
        height: cfg.crop_height,
        width: cfg.crop_width,
    };
    let record = AugRecord {
        flip,
        crop,
        photometric: None,
        cutmix: None,
    };
    Ok(WeakView {
        image: apply_geometry(&record, image)?,
        labels: labels.map(|l| apply_geometry_labels(&record, l)).transpose()?,
        record,
    })
}

/// Pastes the `cutmix` region of `partner` into `image` (both `[C, H, W]`).
pub fn mix_with_box(image: &Tensor, partner: &Tensor, cutmix: &CutMixBox) -> Result<Tensor> {
    let [c, h, w] = image.dims3("cutmix")?;
    if partner.shape() != image.shape() {
        return Err(Error::invalid("cutmix partner shape differs"));
    }
    let mask = cutmix.mask(h, w);
    let mut out = image.clone();
    for ch in 0..c {
        for (p, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[ch * h * w + p] = partner.data()[ch * h * w + p];
            }
        }
    }
    Ok(out)
}

fn apply_photometric(image: &mut Tensor, ph: &Photometric) -> Result<()> {
    let [c, h, w] = image.dims3("photometric")?;
    let plane = h * w;
    let data = image.data_mut();
    for ch in 0..c {
        for v in &mut data[ch * plane..(ch + 1) * plane] {
            *v = ph.gains[ch] * *v + ph.offsets[ch];
        }
    }
    if let Some(s) = ph.grayscale {
        for p in 0..plane {
            let mean = (0..c).map(|ch| data[ch * plane + p]).sum::<f64>() / c as f64;
            for ch in 0..c {
                let v = &mut data[ch * plane + p];
                *v += s * (mean - *v);
            }
        }
    }
    if ph.blur {
        // 3x3 box mean over in-bounds neighbours.
        for ch in 0..c {
            let src = data[ch * plane..(ch + 1) * plane].to_vec();
            for y in 0..h {
                for x in 0..w {
                    let (mut acc, mut n) = (0.0, 0.0);
                    for yy in y.saturating_sub(1)..(y + 2).min(h) {
                        for xx in x.saturating_sub(1)..(x + 2).min(w) {
                            acc += src[yy * w + xx];
                            n += 1.0;
                        }
                    }
                    data[ch * plane + y * w + x] = acc / n;
                }
            }
        }
    }
    Ok(())
}

/// Strong view of a weak view: CutMix from `partner` (probability
/// `cutmix_prob`, only if `enable_cutmix`), then channel-wise affine jitter,
/// partial grayscale and box blur. Geometry is never changed.
pub fn strong_augment(
    rng: &mut Rng,
    weak: &Tensor,
    partner: &Tensor,
    partner_index: usize,
    enable_cutmix: bool,
    cfg: &AugConfig,
) -> Result<StrongView> {
    let [c, h, w] = weak.dims3("strong_augment")?;
    if partner.shape() != weak.shape() {
        return Err(Error::invalid("strong_augment: partner view shape differs"));
    }
    let cutmix = (enable_cutmix && rng.random_bool(cfg.cutmix_prob))
        .then(|| CutMixBox::sample(rng, partner_index, h, w, cfg.cutmix_area));
    let mut image = match &cutmix {
        Some(b) => mix_with_box(weak, partner, b)?,
        None => weak.clone(),
    };
    let draw = |rng: &mut Rng, mag: f64| if mag > 0.0 { rng.random_range(-mag..=mag) } else { 0.0 };
    let photometric = Photometric {
        gains: (0..c).map(|_| 1.0 + draw(rng, cfg.jitter_gain)).collect(),
        offsets: (0..c).map(|_| draw(rng, cfg.jitter_offset)).collect(),
        grayscale: rng.random_bool(cfg.gray_prob).then_some(cfg.gray_strength),
        blur: rng.random_bool(cfg.blur_prob),
    };
    apply_photometric(&mut image, &photometric)?;
    Ok(StrongView {
        image,
        photometric,
        cutmix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| i as f64 * 0.01).collect()).unwrap()
    }

    #[test]
    fn double_flip_restores_image() {
        let img = ramp(3, 5, 7);
        let rec = AugRecord {
            flip: true,
            crop: CropWindow { top: 0, left: 0, height: 5, width: 7 },
            photometric: None,
            cutmix: None,
        };
        let once = apply_geometry(&rec, &img).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply_geometry(&rec, &once).unwrap(), img);
    }

    #[test]
    fn identity_record_is_identity() {
        let img = ramp(2, 6, 6);
        let rec = AugRecord {
            flip: false,
            crop: CropWindow { top: 0, left: 0, height: 6, width: 6 },
            photometric: None,
            cutmix: None,
        };
        assert_eq!(apply_geometry(&rec, &img).unwrap(), img);
    }

    #[test]
    fn identity_strong_settings_leave_weak_view() {
        let img = ramp(3, 8, 8);
        let cfg = AugConfig::identity(8, 8);
        let mut rng = Rng::from_seed(2);
        for _ in 0..10 {
            let s = strong_augment(&mut rng, &img, &img.map(|v| -v), 1, false, &cfg).unwrap();
            assert_eq!(s.image, img);
            assert!(s.cutmix.is_none());
        }
    }

    #[test]
    fn cutmix_area_is_exact() {
        let mut rng = Rng::from_seed(3);
        let (h, w) = (16, 16);
        for _ in 0..2000 {
            let b = CutMixBox::sample(&mut rng, 0, h, w, (0.2, 0.5));
            let want = (b.fraction * (h * w) as f64).round() as usize;
            assert_eq!(b.area(), want);
            assert_eq!(b.mask(h, w).iter().filter(|&&m| m).count(), want);
        }
    }

    #[test]
    fn cutmix_pixels_come_from_partner() {
        let img = Tensor::full(vec![2, 10, 10], 1.0);
        let partner = Tensor::full(vec![2, 10, 10], -1.0);
        let mut cfg = AugConfig::identity(10, 10);
        cfg.cutmix_prob = 1.0;
        let s = strong_augment(&mut Rng::from_seed(4), &img, &partner, 7, true, &cfg).unwrap();
        let b = s.cutmix.unwrap();
        assert_eq!(b.partner, 7);
        let from_partner = s.image.data().iter().filter(|&&v| v == -1.0).count();
        assert_eq!(from_partner, 2 * b.area());
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let cfg = AugConfig {
            crop_height: 9,
            ..AugConfig::default()
        };
        assert!(weak_augment(&mut Rng::from_seed(0), &ramp(1, 8, 8), None, &cfg).is_err());
    }
}
