//! Synthetic dense-labelling data: filled ellipses and one-pixel polylines on a
//! flat background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::grid::{FeatureMap, LabelMap};

pub const BACKGROUND: u32 = 0;
pub const BLOB: u32 = 1;
pub const THIN: u32 = 2;
pub const CLASSES: usize = 3;

pub const MIN_SIZE: usize = 32;
pub const MIN_COLOR_SEPARATION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// 3 channels in `[0, 1]`.
    pub image: FeatureMap,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            noise_sigma: 0.02,
        }
    }
}

/// `count` square samples of side `size` with the default noise level.
pub fn gen_synthetic(seed: u64, count: usize, size: usize) -> Result<Vec<SyntheticSample>> {
    gen_synthetic_with(
        seed,
        count,
        &SynthConfig {
            size,
            ..SynthConfig::default()
        },
    )
}

pub fn gen_synthetic_with(seed: u64, count: usize, config: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    if config.size < MIN_SIZE {
        return Err(invalid!("synthetic images need side >= {MIN_SIZE}, got {}", config.size));
    }
    if !(config.noise_sigma >= 0.0) {
        return Err(invalid!("noise sigma must be non-negative"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
            sample(&mut rng, config)
        })
        .collect())
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn pick_color(rng: &mut impl Rng, taken: &[[f64; 3]]) -> [f64; 3] {
    loop {
        let c = [rng.gen(), rng.gen(), rng.gen()];
        if taken.iter().all(|&t| color_distance(c, t) >= MIN_COLOR_SEPARATION) {
            return c;
        }
    }
}

/// 8-connected raster line from `a` to `b`.
fn bresenham(a: (i64, i64), b: (i64, i64), out: &mut Vec<(usize, usize)>) {
    let (mut y, mut x) = a;
    let dy = -(b.0 - y).abs();
    let dx = (b.1 - x).abs();
    let sy = if y < b.0 { 1 } else { -1 };
    let sx = if x < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        out.push((y as usize, x as usize));
        if (y, x) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// True if any 2×2 block is entirely thin-line.
pub fn has_thick_line(labels: &LabelMap) -> bool {
    (1..labels.height()).any(|y| {
        (1..labels.width()).any(|x| {
            labels.get(y, x) == THIN
                && labels.get(y - 1, x) == THIN
                && labels.get(y, x - 1) == THIN
                && labels.get(y - 1, x - 1) == THIN
        })
    })
}

fn sample(rng: &mut ChaCha8Rng, config: &SynthConfig) -> SyntheticSample {
    let n = config.size;
    let bg = pick_color(rng, &[]);
    let mut colors = vec![bg];
    let mut rgb = vec![bg; n * n];
    let mut labels = LabelMap::filled(n, n, BACKGROUND);

    let blobs = rng.gen_range(1..=3);
    for _ in 0..blobs {
        let color = pick_color(rng, &colors);
        colors.push(color);
        let cy = rng.gen_range(0.0..n as f64);
        let cx = rng.gen_range(0.0..n as f64);
        let ry = rng.gen_range(n as f64 / 12.0..n as f64 / 5.0);
        let rx = rng.gen_range(n as f64 / 12.0..n as f64 / 5.0);
        let (sin, cos) = rng.gen_range(0.0..std::f64::consts::PI).sin_cos();
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                if u * u + v * v <= 1.0 {
                    labels.set(y, x, BLOB);
                    rgb[y * n + x] = color;
                }
            }
        }
    }

    let lines = rng.gen_range(1..=3);
    let mut path = Vec::new();
    for _ in 0..lines {
        let color = pick_color(rng, &colors);
        for _attempt in 0..32 {
            path.clear();
            let vertices = rng.gen_range(2..=4);
            let pts: Vec<(i64, i64)> = (0..vertices)
                .map(|_| (rng.gen_range(1..n as i64 - 1), rng.gen_range(1..n as i64 - 1)))
                .collect();
            for seg in pts.windows(2) {
                bresenham(seg[0], seg[1], &mut path);
            }
            let mut trial = labels.clone();
            for &(y, x) in &path {
                trial.set(y, x, THIN);
            }
            if has_thick_line(&trial) {
                continue;
            }
            labels = trial;
            for &(y, x) in &path {
                rgb[y * n + x] = color;
            }
            colors.push(color);
            break;
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let sigma = config.noise_sigma;
    let image = FeatureMap::from_fn(n, n, 3, |y, x, c| {
        let v = rgb[y * n + x][c];
        if sigma > 0.0 {
            (v + noise.sample(rng)).clamp(0.0, 1.0)
        } else {
            v
        }
    });
    SyntheticSample { image, labels }
}
