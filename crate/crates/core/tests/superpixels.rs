mod support;

use hierspx::io::{read_image, read_labels, write_image, write_labels};
use hierspx::metrics::{asa, boundary_recall};
use hierspx::superpixel::{hierarchical_superpixels, overlay_boundaries, PipelineConfig, BOUNDARY_COLOR};
use hierspx::{FeatureMap, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_tone(h: usize, w: usize, edge: usize) -> (FeatureMap, LabelMap) {
    let image = FeatureMap::from_fn(h, w, 3, |_, x, c| if x < edge { [0.8, 0.1, 0.1][c] } else { [0.1, 0.2, 0.8][c] });
    let gt = LabelMap::from_fn(h, w, |_, x| (x >= edge) as u32);
    (image, gt)
}

#[test]
fn edge_image_beats_uniform_grid() {
    let (image, gt) = two_tone(64, 64, 27);
    let levels = hierarchical_superpixels(&image, &PipelineConfig::default()).unwrap();
    for (n, level) in levels.iter().enumerate() {
        let block = 2usize << n;
        let grid = LabelMap::from_fn(64, 64, |y, x| ((y / block) * (64 / block) + x / block) as u32);
        assert!(level.labels.distinct_count() <= grid.distinct_count());
        assert!(asa(&level.labels, &gt).unwrap() >= asa(&grid, &gt).unwrap());
        assert!(boundary_recall(&level.labels, &gt, 2).unwrap() >= 0.95);
    }
}

#[test]
fn labels_stay_near_their_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(16..40), rng.gen_range(16..40));
        let image = FeatureMap::from_fn(h, w, 3, |_, _, _| rng.gen());
        let cfg = PipelineConfig {
            levels: 3,
            ..PipelineConfig::default()
        };
        let levels = hierarchical_superpixels(&image, &cfg).unwrap();
        for (n, level) in levels.iter().enumerate() {
            let bound = if n == 0 { 1 } else { 2 };
            for y in 0..h {
                for x in 0..w {
                    let d = support::cell_distance(level.labels.get(y, x), level.seed_dims.width, y, x, n + 1);
                    assert!(d <= bound);
                }
            }
        }
    }
}

#[test]
fn outputs_survive_a_disk_round_trip() {
    let (image, _) = two_tone(32, 48, 20);
    let levels = hierarchical_superpixels(&image, &PipelineConfig::default()).unwrap();
    let overlay = overlay_boundaries(&image, &levels[0].labels).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_labels(&levels[0].labels, dir.path().join("l.csv")).unwrap();
    write_image(&overlay, dir.path().join("o.ppm")).unwrap();
    assert_eq!(read_labels(dir.path().join("l.csv")).unwrap(), levels[0].labels);
    let back = read_image(dir.path().join("o.ppm")).unwrap();
    let mask = levels[0].labels.boundary_mask();
    for (i, &edge) in mask.iter().enumerate() {
        if edge {
            assert_eq!(back.pixel(i), &BOUNDARY_COLOR);
        }
    }
}
