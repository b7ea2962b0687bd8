use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{LabelMap, Tensor};

/// Image features are clipped to this magnitude after noise.
pub const FEATURE_CLIP: f64 = 3.0;

/// How a foreground class is drawn. Extents are inclusive ranges.
#[derive(Clone, Debug, PartialEq)]
pub enum ShapeKind {
    Rect { min_side: usize, max_side: usize },
    Disk { min_radius: usize, max_radius: usize },
    /// Full-span horizontal or vertical band.
    Stripe { min_width: usize, max_width: usize },
}

/// Placement rule for one foreground class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRule {
    pub kind: ShapeKind,
    /// Relative frequency with which a placed shape gets this class.
    pub weight: f64,
}

/// Test-time domain shift: a constant added to every feature, and an
/// alternative set of class weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub feature_offset: f64,
    pub weights: Vec<f64>,
}

/// Generator settings. Class 0 is background; `classes[i]` describes class
/// `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub classes: Vec<ClassRule>,
    /// One feature vector per class (background first).
    pub signatures: Vec<Vec<f64>>,
    pub noise: f64,
    pub shapes_per_scene: (usize, usize),
    pub shift: DomainShift,
}

/// Zero-channel-mean signatures on a circle of radius `separation`.
///
/// All signatures sum to zero across channels, so the mean feature value of
/// an image does not depend on which classes it contains.
pub fn circle_signatures(num_classes: usize, in_channels: usize, separation: f64) -> Vec<Vec<f64>> {
    let e1 = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
    let e2 = [1.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt()];
    (0..num_classes)
        .map(|c| {
            let theta = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
            let mut s = vec![0.0; in_channels];
            for (k, v) in s.iter_mut().take(3).enumerate() {
                *v = separation * (theta.cos() * e1[k] + theta.sin() * e2[k]);
            }
            s
        })
        .collect()
}

impl SceneSpec {
    /// Desk-scale default: five classes, the last one rare.
    pub fn desk_default() -> Self {
        SceneSpec::desk(5, true, 0.15, 0.4)
    }

    /// Background plus `classes - 1` foreground classes. Common classes
    /// cycle through rectangle, disk and stripe rules; with `imbalance` the
    /// last class is a small disk drawn with `rare_weight`. In the shifted
    /// domain every common class gets weight 0.2 and the rare class
    /// `shifted_rare_weight`.
    pub fn desk(classes: usize, imbalance: bool, rare_weight: f64, shifted_rare_weight: f64) -> Self {
        let common = [
            (ShapeKind::Rect { min_side: 4, max_side: 9 }, 0.35),
            (ShapeKind::Disk { min_radius: 2, max_radius: 4 }, 0.3),
            (ShapeKind::Stripe { min_width: 2, max_width: 3 }, 0.2),
        ];
        let foreground = classes.saturating_sub(1);
        let n_common = if imbalance { foreground.saturating_sub(1) } else { foreground };
        let mut rules: Vec<ClassRule> = common
            .iter()
            .cycle()
            .take(n_common)
            .map(|(kind, weight)| ClassRule {
                kind: kind.clone(),
                weight: *weight,
            })
            .collect();
        let mut shifted = vec![0.2; n_common];
        if imbalance && foreground > 0 {
            rules.push(ClassRule {
                kind: ShapeKind::Disk { min_radius: 2, max_radius: 3 },
                weight: rare_weight,
            });
            shifted.push(shifted_rare_weight);
        }
        SceneSpec {
            height: 20,
            width: 20,
            in_channels: 3,
            signatures: circle_signatures(classes, 3, 1.0),
            shift: DomainShift {
                feature_offset: 0.5,
                weights: shifted,
            },
            classes: rules,
            noise: 0.8,
            shapes_per_scene: (1, 4),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "scene size {}x{} is below the 8x8 minimum",
                self.height, self.width
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("at least one foreground class is required"));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("scene needs at least one channel"));
        }
        if self.signatures.len() != self.num_classes()
            || self.signatures.iter().any(|s| s.len() != self.in_channels)
        {
            return Err(Error::invalid("one signature of length in_channels per class is required"));
        }
        let bad = |w: &f64| !w.is_finite() || *w < 0.0;
        if self.classes.iter().any(|c| bad(&c.weight)) || self.shift.weights.iter().any(bad) {
            return Err(Error::invalid("class weights must be finite and non-negative"));
        }
        if self.shift.weights.len() != self.classes.len() {
            return Err(Error::invalid("shifted weights need one entry per foreground class"));
        }
        if !(self.noise >= 0.0) || !self.shift.feature_offset.is_finite() {
            return Err(Error::invalid("noise must be >= 0 and the offset finite"));
        }
        if self.shapes_per_scene.0 > self.shapes_per_scene.1 {
            return Err(Error::invalid("shapes_per_scene range is empty"));
        }
        for c in &self.classes {
            let (lo, hi) = match c.kind {
                ShapeKind::Rect { min_side, max_side } => (min_side, max_side),
                ShapeKind::Disk { min_radius, max_radius } => (min_radius, max_radius),
                ShapeKind::Stripe { min_width, max_width } => (min_width, max_width),
            };
            if lo == 0 || lo > hi || hi > self.height.min(self.width) {
                return Err(Error::invalid(format!("shape extent range {lo}..={hi} does not fit")));
            }
        }
        Ok(())
    }

    /// Scene parameters of the shifted test domain.
    pub fn shifted(&self) -> SceneSpec {
        let mut s = self.clone();
        for (rule, &w) in s.classes.iter_mut().zip(&self.shift.weights) {
            rule.weight = w;
        }
        for sig in &mut s.signatures {
            sig.iter_mut().for_each(|v| *v += self.shift.feature_offset);
        }
        s.shift.feature_offset = 0.0;
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Rect { top: usize, left: usize, height: usize, width: usize },
    Disk { cy: usize, cx: usize, radius: usize },
    Stripe { horizontal: bool, start: usize, width: usize },
}

impl Geometry {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Geometry::Rect { top, left, height, width } => {
                (top..top + height).contains(&y) && (left..left + width).contains(&x)
            }
            Geometry::Disk { cy, cx, radius } => {
                let (dy, dx) = (y as isize - cy as isize, x as isize - cx as isize);
                dy * dy + dx * dx <= (radius * radius) as isize
            }
            Geometry::Stripe { horizontal, start, width } => {
                let v = if horizontal { y } else { x };
                (start..start + width).contains(&v)
            }
        }
    }
}

/// One placed shape; later shapes paint over earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub class: u32,
    pub geometry: Geometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[in_channels, H, W]`.
    pub image: Tensor,
    /// Batch-of-one label map `[1, H, W]`.
    pub labels: LabelMap,
}

/// Draws the shape list of one scene. Each shape's class is drawn from the
/// class weights; if they are all zero no shape is placed.
pub fn sample_layout(rng: &mut Rng, spec: &SceneSpec) -> Result<Vec<ShapeInstance>> {
    spec.validate()?;
    let weights: Vec<f64> = spec.classes.iter().map(|c| c.weight).collect();
    let (lo, hi) = spec.shapes_per_scene;
    let n = rng.random_range(lo..=hi);
    let Ok(picker) = WeightedIndex::new(&weights) else {
        return Ok(Vec::new());
    };
    let (h, w) = (spec.height, spec.width);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = picker.sample(rng);
        let geometry = match spec.classes[idx].kind {
            ShapeKind::Rect { min_side, max_side } => {
                let height = rng.random_range(min_side..=max_side);
                let width = rng.random_range(min_side..=max_side);
                Geometry::Rect {
                    top: rng.random_range(0..=h - height),
                    left: rng.random_range(0..=w - width),
                    height,
                    width,
                }
            }
            ShapeKind::Disk { min_radius, max_radius } => Geometry::Disk {
                radius: rng.random_range(min_radius..=max_radius),
                cy: rng.random_range(0..h),
                cx: rng.random_range(0..w),
            },
            ShapeKind::Stripe { min_width, max_width } => {
                let horizontal = rng.random_bool(0.5);
                let width = rng.random_range(min_width..=max_width);
                let span = if horizontal { h } else { w };
                Geometry::Stripe {
                    horizontal,
                    start: rng.random_range(0..=span - width),
                    width,
                }
            }
        };
        shapes.push(ShapeInstance {
            class: idx as u32 + 1,
            geometry,
        });
    }
    Ok(shapes)
}

/// Paints `layout` and draws the per-pixel features: class signature plus
/// Gaussian noise, clipped to `±FEATURE_CLIP`.
pub fn render_scene(rng: &mut Rng, spec: &SceneSpec, layout: &[ShapeInstance]) -> Result<Scene> {
    spec.validate()?;
    let (h, w, cin) = (spec.height, spec.width, spec.in_channels);
    let mut labels = vec![0u32; h * w];
    for shape in layout {
        if shape.class as usize >= spec.num_classes() {
            return Err(Error::invalid(format!("shape class {} out of range", shape.class)));
        }
        for y in 0..h {
            for x in 0..w {
                if shape.geometry.contains(y, x) {
                    labels[y * w + x] = shape.class;
                }
            }
        }
    }
    let mut image = vec![0.0; cin * h * w];
    for c in 0..cin {
        for p in 0..h * w {
            let mean = spec.signatures[labels[p] as usize][c];
            let noise = if spec.noise > 0.0 {
                spec.noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            image[c * h * w + p] = (mean + noise).clamp(-FEATURE_CLIP, FEATURE_CLIP);
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![cin, h, w], image)?,
        labels: LabelMap::new(1, h, w, labels)?,
    })
}

pub fn generate_scene(rng: &mut Rng, spec: &SceneSpec) -> Result<Scene> {
    let layout = sample_layout(rng, spec)?;
    render_scene(rng, spec, &layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_rectangle_carries_exact_signature() {
        let mut spec = SceneSpec::desk_default();
        spec.noise = 0.0;
        let layout = [ShapeInstance {
            class: 2,
            geometry: Geometry::Rect { top: 3, left: 5, height: 4, width: 6 },
        }];
        let s = render_scene(&mut Rng::from_seed(0), &spec, &layout).unwrap();
        let (h, w) = (spec.height, spec.width);
        for y in 0..h {
            for x in 0..w {
                let inside = (3..7).contains(&y) && (5..11).contains(&x);
                assert_eq!(*s.labels.get(0, y, x), if inside { 2 } else { 0 });
                let want = &spec.signatures[if inside { 2 } else { 0 }];
                for c in 0..3 {
                    assert_eq!(s.image.data()[c * h * w + y * w + x], want[c]);
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_pure_background() {
        let mut spec = SceneSpec::desk_default();
        spec.classes.iter_mut().for_each(|c| c.weight = 0.0);
        let mut rng = Rng::from_seed(3);
        for _ in 0..20 {
            let s = generate_scene(&mut rng, &spec).unwrap();
            assert!(s.labels.data().iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn too_small_scene_is_rejected() {
        let mut spec = SceneSpec::desk_default();
        spec.height = 7;
        assert!(generate_scene(&mut Rng::from_seed(0), &spec).is_err());
    }

    #[test]
    fn features_are_bounded_and_labels_in_range() {
        let mut spec = SceneSpec::desk_default();
        spec.noise = 2.5;
        let mut rng = Rng::from_seed(4);
        for _ in 0..20 {
            let s = generate_scene(&mut rng, &spec).unwrap();
            assert!(s.image.data().iter().all(|v| v.abs() <= FEATURE_CLIP));
            assert!(s.labels.data().iter().all(|&l| (l as usize) < spec.num_classes()));
        }
    }

    #[test]
    fn signatures_have_zero_channel_mean() {
        for s in circle_signatures(5, 3, 1.3) {
            assert!(s.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
