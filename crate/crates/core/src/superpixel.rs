//! Training-free hierarchical superpixels.
//!
//! Pixel features are colour plus scaled position. Each level average-pools the
//! previous level's features into seeds, assigns the previous level's pixels to
//! those seeds with identity projections, and keeps the argmax. Following the
//! winners down through every level gives full-resolution label maps.

use serde::{Deserialize, Serialize};

use crate::cluster::{hard_assign, soft_assign, AssignmentField, ClusteringConfig, ProjectionPair, SeedGrid, Similarity};
use crate::decode::compose_hard_labels;
use crate::error::{invalid, Error, Result};
use crate::grid::{Dims, Downsample, FeatureMap, LabelMap};

pub const MAX_LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorSpace {
    #[default]
    Lab,
    Rgb,
}

impl std::str::FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lab" => Ok(ColorSpace::Lab),
            "rgb" => Ok(ColorSpace::Rgb),
            other => Err(Error::InvalidConfig(format!("unknown colour space {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub levels: usize,
    pub tau: f64,
    pub similarity: Similarity,
    pub pos_weight: f64,
    pub color_space: ColorSpace,
    pub downsample: Downsample,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            tau: crate::cluster::DEFAULT_TAU,
            similarity: Similarity::NegSqEuclidean,
            pos_weight: 0.5,
            color_space: ColorSpace::Lab,
            downsample: Downsample::AvgPool,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_LEVELS).contains(&self.levels) {
            return Err(Error::InvalidConfig(format!(
                "levels must be between 1 and {MAX_LEVELS}, got {}",
                self.levels
            )));
        }
        if !(self.pos_weight >= 0.0 && self.pos_weight.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "position weight must be non-negative, got {}",
                self.pos_weight
            )));
        }
        self.clustering().validate()
    }

    fn clustering(&self) -> ClusteringConfig {
        ClusteringConfig {
            tau: self.tau,
            k_dim: FEATURE_CHANNELS,
            similarity: self.similarity,
            ..ClusteringConfig::default()
        }
    }
}

/// Colour triple plus two position channels.
pub const FEATURE_CHANNELS: usize = 5;

/// CIE L*a*b* (D65) of an sRGB triple in `[0, 1]`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    let [r, g, b] = lin;
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    const DELTA: f64 = 6.0 / 29.0;
    let f = |t: f64| {
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.950_47), f(y), f(z / 1.088_83));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Per-pixel features `[c1, c2, c3, λ·y/H, λ·x/W]`.
///
/// Lab values are divided by 100 so colour and position share a scale.
pub fn pixel_features(image: &FeatureMap, config: &PipelineConfig) -> Result<FeatureMap> {
    if image.channels() != 3 {
        return Err(invalid!("expected a 3-channel image, got {} channels", image.channels()));
    }
    let Dims { height, width } = image.dims();
    let lambda = config.pos_weight;
    let mut out = FeatureMap::zeros(height, width, FEATURE_CHANNELS);
    for i in 0..image.dims().len() {
        let px = image.pixel(i);
        let color = match config.color_space {
            ColorSpace::Rgb => [px[0], px[1], px[2]],
            ColorSpace::Lab => srgb_to_lab([px[0], px[1], px[2]]).map(|v| v / 100.0),
        };
        let (h, w) = image.dims().coords(i);
        let dst = out.pixel_mut(i);
        dst[..3].copy_from_slice(&color);
        dst[3] = lambda * h as f64 / height as f64;
        dst[4] = lambda * w as f64 / width as f64;
    }
    Ok(out)
}

/// One level of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    /// Soft assignment from the previous level's grid to this level's seeds.
    pub field: AssignmentField,
    /// Full-resolution labels; each value is a flat index into this level's seed grid.
    pub labels: LabelMap,
    pub seed_dims: Dims,
}

/// Runs the clustering at every level; result index 0 is the finest level.
pub fn hierarchical_superpixels(image: &FeatureMap, config: &PipelineConfig) -> Result<Vec<Level>> {
    config.validate()?;
    let min_side = 1usize << config.levels;
    if image.height() < min_side || image.width() < min_side {
        return Err(invalid!(
            "{} image is too small for {} levels; each side needs at least {min_side} pixels",
            image.dims(),
            config.levels
        ));
    }
    let cfg = config.clustering();
    let proj = ProjectionPair::identity(FEATURE_CHANNELS);
    let mut features = pixel_features(image, config)?;
    let mut hard_fields: Vec<AssignmentField> = Vec::with_capacity(config.levels);
    let mut levels = Vec::with_capacity(config.levels);
    for _ in 0..config.levels {
        let seeds = SeedGrid::from_fine(&features, config.downsample)?;
        let field = soft_assign(&features, &seeds, &proj, &cfg)?;
        let (hard, _) = hard_assign(&field);
        hard_fields.insert(0, hard);
        let labels = compose_hard_labels(&hard_fields)?;
        levels.push(Level {
            field,
            labels,
            seed_dims: seeds.dims(),
        });
        features = seeds.into_features();
    }
    Ok(levels)
}

/// Colour used for boundary pixels.
pub const BOUNDARY_COLOR: [f64; 3] = [1.0, 1.0, 0.0];

/// Recolours every pixel whose label differs from a 4-neighbour.
///
/// Grey images are expanded to three channels first.
pub fn overlay_boundaries(image: &FeatureMap, labels: &LabelMap) -> Result<FeatureMap> {
    if image.dims() != labels.dims() {
        return Err(invalid!("image is {} but labels are {}", image.dims(), labels.dims()));
    }
    let mut out = match image.channels() {
        3 => image.clone(),
        1 => FeatureMap::from_fn(image.height(), image.width(), 3, |h, w, _| image.get(h, w, 0)),
        c => return Err(invalid!("cannot overlay on a {c}-channel image")),
    };
    for (i, is_edge) in labels.boundary_mask().into_iter().enumerate() {
        if is_edge {
            out.pixel_mut(i).copy_from_slice(&BOUNDARY_COLOR);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::boundary_recall;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn white_is_l100() {
        let [l, a, b] = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((l - 100.0).abs() < 0.01, "{l}");
        assert!(a.abs() < 0.01 && b.abs() < 0.01, "{a} {b}");
        let [l, a, b] = srgb_to_lab([0.0, 0.0, 0.0]);
        assert_eq!((l, a, b), (0.0, 0.0, 0.0));
        // pure sRGB red, reference (53.24, 80.09, 67.20)
        let [l, a, b] = srgb_to_lab([1.0, 0.0, 0.0]);
        assert!((l - 53.24).abs() < 0.01 && (a - 80.09).abs() < 0.02 && (b - 67.20).abs() < 0.02);
    }

    #[test]
    fn features_without_position() {
        let img = FeatureMap::from_fn(4, 4, 3, |h, w, c| ((h + w + c) % 3) as f64 / 2.0);
        let cfg = PipelineConfig {
            pos_weight: 0.0,
            color_space: ColorSpace::Rgb,
            ..Default::default()
        };
        let f = pixel_features(&img, &cfg).unwrap();
        for i in 0..16 {
            assert_eq!(&f.pixel(i)[..3], img.pixel(i));
            assert_eq!(&f.pixel(i)[3..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn constant_image_differs_only_in_position() {
        let img = FeatureMap::filled(4, 6, 3, 0.3);
        let f = pixel_features(&img, &PipelineConfig::default()).unwrap();
        for i in 1..24 {
            assert_eq!(&f.pixel(i)[..3], &f.pixel(0)[..3]);
        }
        let (h, w) = (2, 3);
        let px = f.pixel(h * 6 + w);
        assert_eq!(px[3], 0.5 * 2.0 / 4.0);
        assert_eq!(px[4], 0.5 * 3.0 / 6.0);
        assert!(pixel_features(&FeatureMap::zeros(2, 2, 1), &PipelineConfig::default()).is_err());
    }

    #[test]
    fn one_level_on_two_by_two_is_one_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = FeatureMap::from_fn(2, 2, 3, |_, _, _| rng.gen());
        let cfg = PipelineConfig {
            levels: 1,
            ..Default::default()
        };
        let levels = hierarchical_superpixels(&img, &cfg).unwrap();
        assert_eq!(levels.len(), 1);
        assert!(levels[0].labels.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn too_small_or_bad_config() {
        let img = FeatureMap::zeros(7, 16, 3);
        assert!(matches!(
            hierarchical_superpixels(&img, &PipelineConfig::default()),
            Err(Error::InvalidInput(_))
        ));
        let cfg = PipelineConfig {
            levels: 6,
            ..Default::default()
        };
        assert!(matches!(hierarchical_superpixels(&FeatureMap::zeros(64, 64, 3), &cfg), Err(Error::InvalidConfig(_))));
        let cfg = PipelineConfig {
            tau: -1.0,
            ..Default::default()
        };
        assert!(hierarchical_superpixels(&FeatureMap::zeros(64, 64, 3), &cfg).is_err());
    }

    #[test]
    fn label_count_bounded_by_seed_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = FeatureMap::from_fn(37, 50, 3, |_, _, _| rng.gen());
        for levels in 1..=5 {
            let cfg = PipelineConfig {
                levels,
                ..Default::default()
            };
            let out = hierarchical_superpixels(&img, &cfg).unwrap();
            for lvl in &out {
                assert!(lvl.labels.distinct_count() <= lvl.seed_dims.len());
                assert!(lvl.field.max_row_sum_error() < 1e-9);
            }
            let last = out.last().unwrap();
            let bound = 37usize.div_ceil(1 << levels) * 50usize.div_ceil(1 << levels);
            assert!(last.labels.distinct_count() <= bound);
        }
    }

    #[test]
    fn labels_stay_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = FeatureMap::from_fn(32, 40, 3, |_, _, _| rng.gen());
        let cfg = PipelineConfig {
            levels: 4,
            ..Default::default()
        };
        let out = hierarchical_superpixels(&img, &cfg).unwrap();
        for (l, lvl) in out.iter().enumerate() {
            let bound = if l == 0 { 1 } else { 2 };
            for h in 0..32 {
                for w in 0..40 {
                    let (sy, sx) = lvl.seed_dims.coords(lvl.labels.get(h, w) as usize);
                    let (cy, cx) = (h >> (l + 1), w >> (l + 1));
                    assert!(sy.abs_diff(cy).max(sx.abs_diff(cx)) <= bound);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = FeatureMap::from_fn(24, 24, 3, |_, _, _| rng.gen());
        let a = hierarchical_superpixels(&img, &PipelineConfig::default()).unwrap();
        let b = hierarchical_superpixels(&img, &PipelineConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vertical_edge_is_followed() {
        let (h, w, edge) = (64, 64, 27);
        let img = FeatureMap::from_fn(h, w, 3, |_, x, c| if x < edge { [0.9, 0.2, 0.1][c] } else { [0.1, 0.3, 0.8][c] });
        let gt = LabelMap::from_fn(h, w, |_, x| (x >= edge) as u32);
        let cfg = PipelineConfig {
            levels: 3,
            pos_weight: 0.1,
            ..Default::default()
        };
        let out = hierarchical_superpixels(&img, &cfg).unwrap();
        let labels = &out.last().unwrap().labels;
        // rows where a label change sits within one pixel of the colour edge
        let mut good = 0;
        for y in 0..h {
            let near = (edge - 2..=edge).any(|x| labels.get(y, x) != labels.get(y, x + 1));
            good += near as usize;
        }
        assert!(good as f64 >= 0.95 * h as f64, "{good}/{h}");
        assert!(boundary_recall(labels, &gt, 2).unwrap() >= 0.95);
    }

    #[test]
    fn overlay_cases() {
        let img = FeatureMap::filled(4, 4, 3, 0.25);
        assert_eq!(overlay_boundaries(&img, &LabelMap::filled(4, 4, 7)).unwrap(), img);
        let split = LabelMap::from_fn(4, 4, |_, x| (x >= 2) as u32);
        let out = overlay_boundaries(&img, &split).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let yellow = out.pixel(y * 4 + x) == BOUNDARY_COLOR;
                assert_eq!(yellow, x == 1 || x == 2);
            }
        }
        assert!(overlay_boundaries(&img, &LabelMap::filled(3, 4, 0)).is_err());
    }

    #[test]
    fn overlay_matches_neighbor_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = LabelMap::from_fn(9, 11, |_, _| rng.gen_range(0..3));
        let img = FeatureMap::filled(9, 11, 1, 0.0);
        let out = overlay_boundaries(&img, &labels).unwrap();
        for y in 0..9i64 {
            for x in 0..11i64 {
                let l = labels.get(y as usize, x as usize);
                let mut edge = false;
                for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if (0..9).contains(&ny) && (0..11).contains(&nx) && labels.get(ny as usize, nx as usize) != l {
                        edge = true;
                    }
                }
                let px = out.pixel((y * 11 + x) as usize);
                assert_eq!(px == BOUNDARY_COLOR, edge);
            }
        }
    }
}
