//! Procedural texture recipes and seeded defect injection.
//!
//! Each class name maps to a fixed recipe (smooth low-frequency
//! background plus a class-specific pattern) so that class names carry
//! real visual signal. Defects are hard-support perturbations — a color
//! blotch inside an ellipse, a windowed Gaussian bump or dent in depth —
//! whose ground-truth mask marks exactly the perturbed pixels.

use std::f64::consts::TAU;

use misdd_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::types::{DefectType, Mask, PairedSample};
use crate::{DataError, Result};

/// Standard deviation of the i.i.d. pixel noise added to every channel.
pub const NOISE_SIGMA: f64 = 0.01;

/// Smallest per-pixel change a defect is allowed to leave behind; the
/// injector nudges saturated pixels so the mask stays exact.
const MIN_PIXEL_DELTA: f64 = 1e-3;

/// Windowed-Gaussian cutoff: depth deltas below this are not applied,
/// which makes the bump's support (and hence the mask) finite and exact.
const BUMP_CUTOFF: f64 = 1e-3;

const RETRY_CAP: usize = 100;

pub fn known_classes() -> &'static [&'static str] {
    &["weave", "foam", "grid", "marble"]
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Low-frequency background: bilinear interpolation of a coarse grid of
/// uniform values in [lo, hi].
fn smooth_background(size: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    const GRID: usize = 5;
    let mut grid = [[0.0f64; GRID]; GRID];
    for row in grid.iter_mut() {
        for cell in row.iter_mut() {
            *cell = lo + (hi - lo) * rng.gen::<f64>();
        }
    }
    Tensor::from_fn(size, size, |r, c| {
        let gu = r as f64 / size as f64 * (GRID - 1) as f64;
        let gv = c as f64 / size as f64 * (GRID - 1) as f64;
        let (i, j) = (gu.floor() as usize, gv.floor() as usize);
        let (fu, fv) = (gu - i as f64, gv - j as f64);
        let (i1, j1) = ((i + 1).min(GRID - 1), (j + 1).min(GRID - 1));
        grid[i][j] * (1.0 - fu) * (1.0 - fv)
            + grid[i1][j] * fu * (1.0 - fv)
            + grid[i][j1] * (1.0 - fu) * fv
            + grid[i1][j1] * fu * fv
    })
}

struct TexturePlanes {
    rgb: [Tensor; 3],
    depth: Tensor,
}

fn weave_texture(size: usize, rng: &mut ChaCha8Rng) -> TexturePlanes {
    let bg: Vec<Tensor> = (0..3)
        .map(|_| smooth_background(size, rng, 0.35, 0.65))
        .collect();
    let f = 5.0 + 2.0 * rng.gen::<f64>();
    let phase_u: f64 = rng.gen();
    let phase_v: f64 = rng.gen();
    let amp = 0.10 + 0.04 * rng.gen::<f64>();
    let weights = [1.0, 0.75, 0.55];
    let stripes = |r: usize, c: usize| {
        let u = r as f64 / size as f64;
        let v = c as f64 / size as f64;
        let su = (TAU * (f * u + phase_u)).sin();
        let sv = (TAU * (f * v + phase_v)).sin();
        (su, sv)
    };
    let rgb: Vec<Tensor> = (0..3)
        .map(|k| {
            Tensor::from_fn(size, size, |r, c| {
                let (su, sv) = stripes(r, c);
                bg[k].get(r, c) + amp * weights[k] * su * sv
            })
        })
        .collect();
    let depth = Tensor::from_fn(size, size, |r, c| {
        let (su, sv) = stripes(r, c);
        0.5 + 1.6 * amp * (su.abs() - sv.abs())
    });
    TexturePlanes {
        rgb: rgb.try_into().unwrap(),
        depth,
    }
}

fn foam_texture(size: usize, rng: &mut ChaCha8Rng) -> TexturePlanes {
    let bg: Vec<Tensor> = (0..3)
        .map(|_| smooth_background(size, rng, 0.35, 0.65))
        .collect();
    let n_blobs = 14 + (rng.gen::<u64>() % 8) as usize;
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let cu: f64 = rng.gen();
            let cv: f64 = rng.gen();
            let sigma = 0.05 + 0.05 * rng.gen::<f64>();
            (cu, cv, sigma)
        })
        .collect();
    let bump = |r: usize, c: usize| {
        let u = r as f64 / size as f64;
        let v = c as f64 / size as f64;
        let mut total = 0.0;
        for &(cu, cv, sigma) in &blobs {
            let d2 = (u - cu).powi(2) + (v - cv).powi(2);
            total += (-d2 / (2.0 * sigma * sigma)).exp();
        }
        total.tanh()
    };
    let tint = [0.45, 0.85, 0.65];
    let rgb: Vec<Tensor> = (0..3)
        .map(|k| {
            Tensor::from_fn(size, size, |r, c| bg[k].get(r, c) + 0.12 * tint[k] * bump(r, c))
        })
        .collect();
    let depth = Tensor::from_fn(size, size, |r, c| 0.30 + 0.38 * bump(r, c));
    TexturePlanes {
        rgb: rgb.try_into().unwrap(),
        depth,
    }
}

fn grid_texture(size: usize, rng: &mut ChaCha8Rng) -> TexturePlanes {
    let bg: Vec<Tensor> = (0..3)
        .map(|_| smooth_background(size, rng, 0.40, 0.70))
        .collect();
    let period = 7 + (rng.gen::<u64>() % 3) as usize;
    let line_width = 1 + (rng.gen::<u64>() % 2) as usize;
    let off_r = (rng.gen::<u64>() % period as u64) as usize;
    let off_c = (rng.gen::<u64>() % period as u64) as usize;
    let on_line = move |r: usize, c: usize| {
        (r + off_r) % period < line_width || (c + off_c) % period < line_width
    };
    let tint = [1.0, 0.95, 0.70];
    let rgb: Vec<Tensor> = (0..3)
        .map(|k| {
            Tensor::from_fn(size, size, |r, c| {
                bg[k].get(r, c) - if on_line(r, c) { 0.18 * tint[k] } else { 0.0 }
            })
        })
        .collect();
    let depth = Tensor::from_fn(size, size, |r, c| {
        0.62 - if on_line(r, c) { 0.28 } else { 0.0 }
    });
    TexturePlanes {
        rgb: rgb.try_into().unwrap(),
        depth,
    }
}

fn marble_texture(size: usize, rng: &mut ChaCha8Rng) -> TexturePlanes {
    let bg: Vec<Tensor> = (0..3)
        .map(|_| smooth_background(size, rng, 0.35, 0.65))
        .collect();
    let a = 2.0 + rng.gen::<f64>();
    let b = 1.0 + rng.gen::<f64>();
    let phi: f64 = rng.gen();
    let psi: f64 = rng.gen();
    let vein = move |r: usize, c: usize, size: usize| {
        let u = r as f64 / size as f64;
        let v = c as f64 / size as f64;
        (TAU * (a * u + 0.35 * (TAU * (b * v + phi)).sin() + psi)).sin()
    };
    let tint = [0.9, 0.7, 1.0];
    let rgb: Vec<Tensor> = (0..3)
        .map(|k| {
            Tensor::from_fn(size, size, |r, c| {
                bg[k].get(r, c) + 0.13 * tint[k] * vein(r, c, size)
            })
        })
        .collect();
    let depth = Tensor::from_fn(size, size, |r, c| 0.42 + 0.24 * vein(r, c, size).abs());
    TexturePlanes {
        rgb: rgb.try_into().unwrap(),
        depth,
    }
}

/// Generate one normal sample for `class_name`. The texture recipe is
/// fixed per class; per-sample jitter and pixel noise come from `rng`.
pub fn generate_normal(
    id: &str,
    class_name: &str,
    image_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairedSample> {
    let mut planes = match class_name {
        "weave" => weave_texture(image_size, rng),
        "foam" => foam_texture(image_size, rng),
        "grid" => grid_texture(image_size, rng),
        "marble" => marble_texture(image_size, rng),
        other => {
            return Err(DataError::InvalidSpec {
                field: "classes".into(),
                reason: format!("unknown class `{other}`"),
            })
        }
    };
    // Pixel noise, then clamp into the valid range. Channel order is
    // fixed so the draw sequence is reproducible.
    for plane in planes.rgb.iter_mut().chain(std::iter::once(&mut planes.depth)) {
        for v in plane.data_mut() {
            *v = (*v + NOISE_SIGMA * gaussian(rng)).clamp(0.0, 1.0);
        }
    }
    let sample = PairedSample {
        id: id.to_string(),
        class_name: class_name.to_string(),
        rgb: planes.rgb,
        depth: planes.depth,
        gt_mask: Mask::zeros(image_size, image_size),
        label: 0,
    };
    sample.validate()?;
    Ok(sample)
}

/// Allowed defect area as a pixel-count interval: 0.5%..10% of the image.
fn area_bounds(image_size: usize) -> (usize, usize) {
    let n = (image_size * image_size) as f64;
    let lo = (0.005 * n).ceil() as usize;
    let hi = (0.10 * n).floor() as usize;
    (lo.max(1), hi)
}

/// Pixels inside a rotated ellipse, clipped to the image.
fn ellipse_support(
    size: usize,
    center: (f64, f64),
    radii: (f64, f64),
    theta: f64,
) -> Vec<(usize, usize)> {
    let (cr, cc) = center;
    let (a, b) = radii;
    let (sin_t, cos_t) = theta.sin_cos();
    let mut out = Vec::new();
    let r_max = a.max(b).ceil() as isize + 1;
    let r0 = ((cr.floor() as isize) - r_max).max(0) as usize;
    let r1 = (((cr.ceil() as isize) + r_max).max(0) as usize).min(size.saturating_sub(1));
    let c0 = ((cc.floor() as isize) - r_max).max(0) as usize;
    let c1 = (((cc.ceil() as isize) + r_max).max(0) as usize).min(size.saturating_sub(1));
    for r in r0..=r1 {
        for c in c0..=c1 {
            let dr = r as f64 - cr;
            let dc = c as f64 - cc;
            let x = (dc * cos_t + dr * sin_t) / a;
            let y = (-dc * sin_t + dr * cos_t) / b;
            if x * x + y * y <= 1.0 {
                out.push((r, c));
            }
        }
    }
    out
}

/// Pixels where a Gaussian of peak `amplitude` exceeds the cutoff,
/// clipped to the image; returned with the per-pixel delta magnitude.
fn bump_support(
    size: usize,
    center: (f64, f64),
    sigma: f64,
    amplitude: f64,
) -> Vec<(usize, usize, f64)> {
    let (cr, cc) = center;
    let cutoff_radius = sigma * (2.0 * (amplitude / BUMP_CUTOFF).ln()).sqrt();
    let r_max = cutoff_radius.ceil() as isize + 1;
    let r0 = ((cr.floor() as isize) - r_max).max(0) as usize;
    let r1 = (((cr.ceil() as isize) + r_max).max(0) as usize).min(size.saturating_sub(1));
    let c0 = ((cc.floor() as isize) - r_max).max(0) as usize;
    let c1 = (((cc.ceil() as isize) + r_max).max(0) as usize).min(size.saturating_sub(1));
    let mut out = Vec::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            let delta = amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
            if delta >= BUMP_CUTOFF {
                out.push((r, c, delta));
            }
        }
    }
    out
}

/// Scale factors for the defect geometry. Combined defects use smaller
/// parts so the union still fits under the 10% area cap.
struct GeometryScale {
    ellipse_radius: (f64, f64),
    bump_sigma: (f64, f64),
}

const FULL_SCALE: GeometryScale = GeometryScale {
    ellipse_radius: (0.06, 0.16),
    bump_sigma: (0.015, 0.045),
};
const HALF_SCALE: GeometryScale = GeometryScale {
    ellipse_radius: (0.05, 0.11),
    bump_sigma: (0.013, 0.032),
};

fn draw_in(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.gen::<f64>()
}

/// Apply a color blotch over an ellipse support. Returns the perturbed
/// pixels (== the support; saturated pixels are nudged).
fn apply_rgb_blotch(
    rgb: &mut [Tensor; 3],
    size: usize,
    scale: &GeometryScale,
    rng: &mut ChaCha8Rng,
    bounds: (usize, usize),
) -> Option<Vec<(usize, usize)>> {
    let s = size as f64;
    let center = (
        s * (0.2 + 0.6 * rng.gen::<f64>()),
        s * (0.2 + 0.6 * rng.gen::<f64>()),
    );
    let radii = (
        s * draw_in(rng, scale.ellipse_radius),
        s * draw_in(rng, scale.ellipse_radius),
    );
    let theta = TAU * rng.gen::<f64>();
    // Color target is drawn regardless of acceptance so the rng draw
    // count per attempt is fixed.
    let color_draws: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let blend = 0.65 + 0.25 * rng.gen::<f64>();

    let support = ellipse_support(size, center, radii, theta);
    if support.len() < bounds.0 || support.len() > bounds.1 {
        return None;
    }
    // High-contrast target: opposite side of the local mean per channel.
    let mut target = [0.0f64; 3];
    for k in 0..3 {
        let mean = support
            .iter()
            .map(|&(r, c)| rgb[k].get(r, c))
            .sum::<f64>()
            / support.len() as f64;
        target[k] = if mean > 0.5 {
            0.05 + 0.25 * color_draws[k]
        } else {
            0.70 + 0.25 * color_draws[k]
        };
    }
    for &(r, c) in &support {
        let mut changed = false;
        for k in 0..3 {
            let orig = rgb[k].get(r, c);
            let new = (orig + blend * (target[k] - orig)).clamp(0.0, 1.0);
            rgb[k].set(r, c, new);
            changed |= (new - orig).abs() >= MIN_PIXEL_DELTA / 10.0;
        }
        if !changed {
            let orig = rgb[0].get(r, c);
            let nudged = if orig > 0.5 {
                orig - MIN_PIXEL_DELTA
            } else {
                orig + MIN_PIXEL_DELTA
            };
            rgb[0].set(r, c, nudged);
        }
    }
    Some(support)
}

/// Apply a Gaussian bump or dent to the depth plane. Returns the
/// perturbed pixels (== the windowed support).
fn apply_depth_bump(
    depth: &mut Tensor,
    size: usize,
    scale: &GeometryScale,
    rng: &mut ChaCha8Rng,
    bounds: (usize, usize),
) -> Option<Vec<(usize, usize)>> {
    let s = size as f64;
    let center = (
        s * (0.2 + 0.6 * rng.gen::<f64>()),
        s * (0.2 + 0.6 * rng.gen::<f64>()),
    );
    let sigma = s * draw_in(rng, scale.bump_sigma);
    let magnitude = 0.28 + 0.17 * rng.gen::<f64>();

    let support = bump_support(size, center, sigma, magnitude);
    if support.len() < bounds.0 || support.len() > bounds.1 {
        return None;
    }
    // Dent raised surfaces, raise sunken ones — avoids clamping the
    // whole bump away at the [0,1] boundary.
    let mean = support
        .iter()
        .map(|&(r, c, _)| depth.get(r, c))
        .sum::<f64>()
        / support.len() as f64;
    let sign = if mean > 0.5 { -1.0 } else { 1.0 };
    let mut out = Vec::with_capacity(support.len());
    for &(r, c, delta) in &support {
        let orig = depth.get(r, c);
        let mut new = (orig + sign * delta).clamp(0.0, 1.0);
        if (new - orig).abs() < MIN_PIXEL_DELTA / 10.0 {
            new = if orig > 0.5 {
                orig - MIN_PIXEL_DELTA
            } else {
                orig + MIN_PIXEL_DELTA
            };
        }
        depth.set(r, c, new);
        out.push((r, c));
    }
    Some(out)
}

/// Inject a defect of the requested type into a normal sample,
/// returning the anomalous sample with an exact ground-truth mask.
/// Geometry violating the 0.5%–10% area constraint is resampled up to a
/// retry cap.
pub fn inject_defect(
    sample: &PairedSample,
    defect_type: DefectType,
    rng: &mut ChaCha8Rng,
) -> Result<PairedSample> {
    if sample.label != 0 {
        return Err(DataError::SampleInvalid {
            id: sample.id.clone(),
            detail: "defect injection requires a normal sample".into(),
        });
    }
    let size = sample.height();
    let bounds = area_bounds(size);

    for _attempt in 0..RETRY_CAP {
        let mut rgb = sample.rgb.clone();
        let mut depth = sample.depth.clone();
        let mut mask = Mask::zeros(size, size);

        let ok = match defect_type {
            DefectType::RgbOnly => {
                match apply_rgb_blotch(&mut rgb, size, &FULL_SCALE, rng, bounds) {
                    Some(px) => {
                        for (r, c) in px {
                            mask.set(r, c, true);
                        }
                        true
                    }
                    None => false,
                }
            }
            DefectType::DepthOnly => {
                match apply_depth_bump(&mut depth, size, &FULL_SCALE, rng, bounds) {
                    Some(px) => {
                        for (r, c) in px {
                            mask.set(r, c, true);
                        }
                        true
                    }
                    None => false,
                }
            }
            DefectType::Combined => {
                // Each part capped at roughly half the budget; the union
                // is re-checked against the full bounds below.
                let part_bounds = (bounds.0, bounds.1 / 2);
                let blotch = apply_rgb_blotch(&mut rgb, size, &HALF_SCALE, rng, part_bounds);
                let bump = apply_depth_bump(&mut depth, size, &HALF_SCALE, rng, part_bounds);
                match (blotch, bump) {
                    (Some(a), Some(b)) => {
                        for (r, c) in a.into_iter().chain(b) {
                            mask.set(r, c, true);
                        }
                        mask.count() >= bounds.0 && mask.count() <= bounds.1
                    }
                    _ => false,
                }
            }
        };

        if ok {
            let out = PairedSample {
                id: sample.id.clone(),
                class_name: sample.class_name.clone(),
                rgb,
                depth,
                gt_mask: mask,
                label: 1,
            };
            out.validate()?;
            return Ok(out);
        }
    }
    Err(DataError::DefectDegenerate {
        attempts: RETRY_CAP,
        reason: format!(
            "could not place a {} defect within {}..{} pixels",
            defect_type.as_str(),
            bounds.0,
            bounds.1
        ),
    })
}
