//! Seeded synthetic degradations and a synthetic clean-image generator.

use std::fmt;
use std::str::FromStr;

use echoir_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub enum DegradationKind {
    /// Additive N(0, std²) per value, std on the [0, 1] scale.
    GaussianNoise { std: f64 },
    RainStreaks {
        /// Streaks per pixel.
        density: f64,
        length: (f64, f64),
        /// Degrees from vertical.
        angle: (f64, f64),
        /// Alpha of a streak over the image.
        intensity: f64,
    },
    /// Normalized `kernel × kernel` box, edges replicated.
    BoxBlur { kernel: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub seed: u64,
}

impl DegradationSpec {
    /// Noise std given in 8-bit levels, e.g. 25 for 25/255.
    pub fn gaussian_levels(levels: f64, seed: u64) -> Self {
        DegradationSpec {
            kind: DegradationKind::GaussianNoise { std: levels / 255.0 },
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match &self.kind {
            DegradationKind::GaussianNoise { std } => *std >= 0.0 && std.is_finite(),
            DegradationKind::RainStreaks {
                density,
                length,
                angle,
                intensity,
            } => {
                *density >= 0.0
                    && length.0 > 0.0
                    && length.0 <= length.1
                    && angle.0 <= angle.1
                    && (0.0..=1.0).contains(intensity)
            }
            DegradationKind::BoxBlur { kernel } => *kernel >= 1 && kernel % 2 == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid degradation parameters: {self}"))
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DegradationSpec {
            kind: self.kind.clone(),
            seed,
        }
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            DegradationKind::GaussianNoise { std } => write!(f, "gaussian_noise:std={}", std * 255.0)?,
            DegradationKind::RainStreaks {
                density,
                length,
                angle,
                intensity,
            } => write!(
                f,
                "rain_streaks:density={density},length={}..{},angle={}..{},intensity={intensity}",
                length.0, length.1, angle.0, angle.1
            )?,
            DegradationKind::BoxBlur { kernel } => write!(f, "box_blur:kernel={kernel}")?,
        }
        write!(f, ",seed={}", self.seed)
    }
}

fn parse_range(v: &str) -> Result<(f64, f64), String> {
    let (a, b) = v.split_once("..").ok_or_else(|| format!("expected a range lo..hi, got '{v}'"))?;
    Ok((num(a)?, num(b)?))
}

fn num(v: &str) -> Result<f64, String> {
    v.trim().parse().map_err(|_| format!("not a number: '{v}'"))
}

/// `kind:key=value,...`; noise std is given in 8-bit levels.
impl FromStr for DegradationSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut seed = 0;
        let mut std = 25.0;
        let mut density = 0.004;
        let mut length = (4.0, 12.0);
        let mut angle = (-15.0, 15.0);
        let mut intensity = 0.6;
        let mut kernel = 5;
        for part in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got '{part}'"))?;
            match (kind, k.trim()) {
                (_, "seed") => seed = v.trim().parse().map_err(|_| format!("bad seed '{v}'"))?,
                ("gaussian_noise", "std") => std = num(v)?,
                ("rain_streaks", "density") => density = num(v)?,
                ("rain_streaks", "length") => length = parse_range(v)?,
                ("rain_streaks", "angle") => angle = parse_range(v)?,
                ("rain_streaks", "intensity") => intensity = num(v)?,
                ("box_blur", "kernel") => kernel = v.trim().parse().map_err(|_| format!("bad kernel '{v}'"))?,
                _ => return Err(format!("unknown parameter '{k}' for {kind}")),
            }
        }
        let kind = match kind {
            "gaussian_noise" => DegradationKind::GaussianNoise { std: std / 255.0 },
            "rain_streaks" => DegradationKind::RainStreaks {
                density,
                length,
                angle,
                intensity,
            },
            "box_blur" => DegradationKind::BoxBlur { kernel },
            other => return Err(format!("unknown degradation '{other}'")),
        };
        let spec = DegradationSpec { kind, seed };
        spec.validate()?;
        Ok(spec)
    }
}

fn extents(image: &Tensor) -> (usize, usize, usize) {
    match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => panic!("image must be [C, H, W], got {s:?}"),
    }
}

pub fn degrade(clean: &Tensor, spec: &DegradationSpec) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, h, w) = extents(clean);
    let src = clean.to_vec();
    let out = match &spec.kind {
        DegradationKind::GaussianNoise { std } => {
            if *std == 0.0 {
                src
            } else {
                let normal = Normal::new(0.0, *std).expect("finite std");
                src.iter().map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect()
            }
        }
        DegradationKind::RainStreaks {
            density,
            length,
            angle,
            intensity,
        } => {
            let mut alpha = vec![0.0f64; h * w];
            let count = (density * (h * w) as f64).round() as usize;
            for _ in 0..count {
                let y0 = rng.random_range(0.0..h as f64);
                let x0 = rng.random_range(0.0..w as f64);
                let len = rng.random_range(length.0..=length.1);
                let theta = rng.random_range(angle.0..=angle.1).to_radians();
                let a = intensity * rng.random_range(0.7..=1.0);
                let steps = (2.0 * len).ceil() as usize;
                for s in 0..=steps {
                    let t = s as f64 / steps.max(1) as f64 * len;
                    let y = (y0 + t * theta.cos()).floor();
                    let x = (x0 + t * theta.sin()).floor();
                    if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                        let i = y as usize * w + x as usize;
                        alpha[i] = alpha[i].max(a);
                    }
                }
            }
            let n = h * w;
            (0..c * n).map(|i| src[i] * (1.0 - alpha[i % n]) + alpha[i % n]).collect()
        }
        DegradationKind::BoxBlur { kernel } => {
            let r = (kernel / 2) as isize;
            let norm = (kernel * kernel) as f64;
            let mut out = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let mut acc = 0.0;
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                                let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                                acc += src[(ch * h + yy) * w + xx];
                            }
                        }
                        out[(ch * h + y as usize) * w + x as usize] = acc / norm;
                    }
                }
            }
            out
        }
    };
    Tensor::new(&[c, h, w], out, false).expect("same extents")
}

/// Piecewise-smooth RGB test image: a colour gradient with a few flat
/// rectangles and discs.
pub fn synthetic_clean(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    let base: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..0.8),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            )
        })
        .collect();
    for (c, &(b, gy, gx)) in base.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                data[c * n + y * w + x] = b + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
            }
        }
    }
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let colour: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(2.0..(h as f64 / 3.0).max(3.0));
        let rx = rng.random_range(2.0..(w as f64 / 3.0).max(3.0));
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for (c, v) in colour.iter().enumerate() {
                        data[c * n + y * w + x] = *v;
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&[3, h, w], data, false).expect("consistent extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize) -> Tensor {
        Tensor::new(&[3, h, w], vec![0.5; 3 * h * w], false).unwrap()
    }

    #[test]
    fn zero_noise_and_unit_box_are_identity() {
        let img = synthetic_clean(16, 16, 1);
        assert_eq!(degrade(&img, &DegradationSpec::gaussian_levels(0.0, 3)).to_vec(), img.to_vec());
        let blur = DegradationSpec {
            kind: DegradationKind::BoxBlur { kernel: 1 },
            seed: 0,
        };
        assert_eq!(degrade(&img, &blur).to_vec(), img.to_vec());
    }

    #[test]
    fn noise_sample_std() {
        let out = degrade(&gray(64, 64), &DegradationSpec::gaussian_levels(25.0, 7)).to_vec();
        let plane = &out[..64 * 64];
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (plane.len() - 1) as f64;
        let target = 25.0 / 255.0;
        assert!((var.sqrt() - target).abs() / target < 0.05, "{}", var.sqrt());
    }

    #[test]
    fn deterministic_per_seed() {
        let img = synthetic_clean(16, 16, 2);
        let spec: DegradationSpec = "rain_streaks:density=0.02,seed=5".parse().unwrap();
        assert_eq!(degrade(&img, &spec).to_vec(), degrade(&img, &spec).to_vec());
        assert_ne!(degrade(&img, &spec).to_vec(), degrade(&img, &spec.with_seed(6)).to_vec());
        assert_ne!(degrade(&img, &spec).to_vec(), img.to_vec());
    }

    #[test]
    fn box_blur_preserves_constants_and_mean_of_interior() {
        let spec = DegradationSpec {
            kind: DegradationKind::BoxBlur { kernel: 3 },
            seed: 0,
        };
        assert!(degrade(&gray(8, 8), &spec).to_vec().iter().all(|v| (v - 0.5).abs() < 1e-15));
        let mut d = vec![0.0; 3 * 25];
        d[12] = 9.0;
        let img = Tensor::new(&[3, 5, 5], d, false).unwrap();
        let out = degrade(&img, &spec).to_vec();
        assert!((out[6] - 1.0).abs() < 1e-15 && out[0] == 0.0);
    }

    #[test]
    fn descriptor_round_trip_and_errors() {
        let s: DegradationSpec = "gaussian_noise:std=50,seed=9".parse().unwrap();
        assert_eq!(s, DegradationSpec::gaussian_levels(50.0, 9));
        assert_eq!(s.to_string().parse::<DegradationSpec>().unwrap(), s);
        let r: DegradationSpec = "rain_streaks:length=3..9,angle=-5..5".parse().unwrap();
        assert_eq!(r.to_string().parse::<DegradationSpec>().unwrap(), r);
        assert!("box_blur:kernel=4".parse::<DegradationSpec>().is_err());
        assert!("gaussian_noise:std=-1".parse::<DegradationSpec>().is_err());
        assert!("sharpen".parse::<DegradationSpec>().is_err());
        assert!("box_blur:std=3".parse::<DegradationSpec>().is_err());
    }

    #[test]
    fn synthetic_images_in_range() {
        let img = synthetic_clean(32, 32, 4);
        assert!(img.to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(img.to_vec(), synthetic_clean(32, 32, 5).to_vec());
    }
}
