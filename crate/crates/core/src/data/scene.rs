//! Procedural exposure-bracketed scenes with saturation and object motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ExposureStack, HdrImage, ImageTensor, LdrImage, DEFAULT_GAMMA};
use crate::error::{Error, Result};

const MAX_OBJECTS: usize = 48;

/// Parameters of one synthetic scene. Identical specs render identical bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Maximum per-frame translation of foreground objects, in pixels.
    pub motion_magnitude: f32,
    /// Minimum fraction of pixels clipped in the longest exposure.
    pub saturation_fraction: f32,
    /// EVs of the three frames, strictly increasing; the middle is the reference.
    pub exposure_set: [f32; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            motion_magnitude: 4.0,
            saturation_fraction: 0.1,
            exposure_set: [-2.0, 0.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk { radius: f64 },
    Rect { half_h: f64, half_w: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    cy: f64,
    cx: f64,
    shape: Shape,
    color: [f64; 3],
    moving: bool,
}

impl Object {
    /// Anti-aliased coverage of pixel centre `(y, x)`.
    fn coverage(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.shape {
            Shape::Disk { radius } => (radius - (dy * dy + dx * dx).sqrt() + 0.5).clamp(0.0, 1.0),
            Shape::Rect { half_h, half_w } => {
                let a = (half_h - dy.abs() + 0.5).clamp(0.0, 1.0);
                let b = (half_w - dx.abs() + 0.5).clamp(0.0, 1.0);
                a * b
            }
        }
    }
}

struct Background {
    base: [f64; 3],
    gy: f64,
    gx: f64,
    freq: [f64; 2],
    phase: f64,
}

impl Background {
    fn at(&self, y: f64, x: f64, h: f64, w: f64, c: usize) -> f64 {
        let ramp = 0.4 + 0.6 * (self.gy * y / h + self.gx * x / w) / (self.gy + self.gx).max(1e-9);
        let texture =
            1.0 + 0.3 * (self.freq[0] * y + self.freq[1] * x + self.phase + c as f64).sin();
        self.base[c] * ramp * texture
    }
}

fn render_radiance(
    spec: &SceneSpec,
    bg: &Background,
    objects: &[Object],
    offset: (f64, f64),
) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = bg.at(fy, fx, h as f64, w as f64, c);
            }
            for o in objects {
                let (sy, sx) = if o.moving { offset } else { (0.0, 0.0) };
                let a = o.coverage(fy - sy, fx - sx);
                if a > 0.0 {
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - a) + o.color[c] * a;
                    }
                }
            }
            out.extend_from_slice(&px);
        }
    }
    out
}

fn random_object(rng: &mut ChaCha8Rng, h: f64, w: f64, bright: bool) -> Object {
    let min_side = h.min(w);
    let shape = if rng.random_bool(0.5) {
        Shape::Disk {
            radius: rng.random_range(0.08..0.22) * min_side,
        }
    } else {
        Shape::Rect {
            half_h: rng.random_range(0.06..0.2) * h,
            half_w: rng.random_range(0.06..0.2) * w,
        }
    };
    let level = if bright {
        rng.random_range(0.45..1.0)
    } else {
        rng.random_range(0.03..0.2)
    };
    let mut color = [0.0; 3];
    for c in &mut color {
        *c = level * rng.random_range(0.55..1.0);
    }
    Object {
        cy: rng.random_range(0.0..h),
        cx: rng.random_range(0.0..w),
        shape,
        color,
        moving: rng.random_bool(0.6),
    }
}

/// Renders a scene into an [`ExposureStack`] with reference-aligned ground truth.
///
/// Radiance is normalized by its maximum over all three frames so the ground
/// truth lies in `[0, 1]`; frame `i` is `clip(R_i * 2^ev_i)^(1/gamma)`.
pub fn generate_scene(spec: &SceneSpec) -> Result<ExposureStack> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::Generation("scene size must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.saturation_fraction) {
        return Err(Error::Generation(format!(
            "saturation fraction {} outside [0, 1)",
            spec.saturation_fraction
        )));
    }
    if !(spec.motion_magnitude >= 0.0 && spec.motion_magnitude.is_finite()) {
        return Err(Error::Generation(format!(
            "motion magnitude {} must be finite and non-negative",
            spec.motion_magnitude
        )));
    }
    let evs = spec.exposure_set;
    if !(evs[0] < evs[1] && evs[1] < evs[2]) {
        return Err(Error::Generation(format!(
            "exposure set {evs:?} must be strictly increasing"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let bg = Background {
        base: [
            rng.random_range(0.04..0.12),
            rng.random_range(0.04..0.12),
            rng.random_range(0.04..0.12),
        ],
        gy: rng.random_range(0.0..1.0),
        gx: rng.random_range(0.0..1.0),
        freq: [rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)],
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    };
    let m = spec.motion_magnitude as f64;
    let mut offsets = [(0.0, 0.0); 3];
    for (i, off) in offsets.iter_mut().enumerate() {
        if i != ExposureStack::REFERENCE_INDEX && m > 0.0 {
            *off = (rng.random_range(-m..=m), rng.random_range(-m..=m));
        }
    }

    let mut objects: Vec<Object> = (0..3)
        .map(|_| random_object(&mut rng, h, w, false))
        .collect();
    let mut first_bright = random_object(&mut rng, h, w, true);
    // anchors the normalization: the scene peak is exactly 1
    let peak = first_bright.color.iter().cloned().fold(0.0, f64::max);
    first_bright.color.iter_mut().for_each(|c| *c /= peak);
    objects.push(first_bright);

    let t_long = (evs[2] as f64).exp2();
    let n_px = spec.height * spec.width;
    loop {
        let fields: Vec<Vec<f64>> = offsets
            .iter()
            .map(|&o| render_radiance(spec, &bg, &objects, o))
            .collect();
        let max = fields
            .iter()
            .flat_map(|f| f.iter())
            .cloned()
            .fold(0.0, f64::max)
            .max(1e-12);
        let saturated = fields[2]
            .chunks_exact(3)
            .filter(|px| px.iter().any(|v| v / max * t_long >= 1.0))
            .count();
        let fraction = saturated as f64 / n_px as f64;
        if fraction >= spec.saturation_fraction as f64 {
            return assemble(spec, &fields, max);
        }
        if objects.len() >= MAX_OBJECTS {
            return Err(Error::Generation(format!(
                "saturation fraction {} unattainable: reached {fraction:.4} with {} objects",
                spec.saturation_fraction,
                objects.len()
            )));
        }
        objects.push(random_object(&mut rng, h, w, true));
    }
}

fn assemble(spec: &SceneSpec, fields: &[Vec<f64>], max: f64) -> Result<ExposureStack> {
    let (h, w) = (spec.height, spec.width);
    let inv_gamma = 1.0 / DEFAULT_GAMMA as f64;
    let frame = |i: usize| -> Result<LdrImage> {
        let t = (spec.exposure_set[i] as f64).exp2();
        let data = fields[i]
            .iter()
            .map(|v| ((v / max * t).clamp(0.0, 1.0)).powf(inv_gamma) as f32)
            .collect();
        LdrImage::new(ImageTensor::new(h, w, 3, data)?, spec.exposure_set[i])
    };
    let gt_data = fields[ExposureStack::REFERENCE_INDEX]
        .iter()
        .map(|v| (v / max).clamp(0.0, 1.0) as f32)
        .collect();
    let gt = HdrImage::new(ImageTensor::new(h, w, 3, gt_data)?)?;
    ExposureStack::new([frame(0)?, frame(1)?, frame(2)?], Some(gt))
}
