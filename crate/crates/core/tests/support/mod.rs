//! Brute-force reference implementations and random instance generators.
//!
//! Everything here is written the slow, obvious way and shares no code with
//! the library beyond its data types.
#![allow(dead_code)]

use hierspx::{AssignmentField, FeatureMap, LabelMap, Matrix, ProjectionPair};
use rand::Rng;

pub fn random_map(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_projection(rng: &mut impl Rng, k: usize, n: usize, m: usize) -> ProjectionPair {
    ProjectionPair::new(random_matrix(rng, k, n), random_matrix(rng, k, m)).unwrap()
}

/// Either independent noise over a few labels or a stack of painted rectangles.
pub fn random_labels(rng: &mut impl Rng, h: usize, w: usize) -> LabelMap {
    let k = rng.gen_range(1..=8u32);
    if rng.gen_bool(0.25) {
        return LabelMap::from_fn(h, w, |_, _| rng.gen_range(0..k));
    }
    let mut map = LabelMap::filled(h, w, rng.gen_range(0..k));
    for _ in 0..rng.gen_range(1..=10) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = (rng.gen_range(y0..h), rng.gen_range(x0..w));
        let l = rng.gen_range(0..k);
        for y in y0..=y1 {
            for x in x0..=x1 {
                map.set(y, x, l);
            }
        }
    }
    map
}

fn distinct(l: &LabelMap) -> Vec<u32> {
    let mut v = l.labels().to_vec();
    v.sort();
    v.dedup();
    v
}

fn count(pred: &LabelMap, gt: &LabelMap, f: impl Fn(u32, u32) -> bool) -> u64 {
    pred.labels().iter().zip(gt.labels()).filter(|(&p, &g)| f(p, g)).count() as u64
}

pub fn asa(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let mut hits = 0;
    for s in distinct(pred) {
        hits += distinct(gt).into_iter().map(|g| count(pred, gt, |p, q| p == s && q == g)).max().unwrap();
    }
    hits as f64 / pred.labels().len() as f64
}

fn is_boundary(l: &LabelMap, y: usize, x: usize) -> bool {
    let v = l.get(y, x);
    let mut diff = false;
    for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
        if ny >= 0 && nx >= 0 && (ny as usize) < l.height() && (nx as usize) < l.width() {
            diff |= l.get(ny as usize, nx as usize) != v;
        }
    }
    diff
}

pub fn boundary_recall(pred: &LabelMap, gt: &LabelMap, tol: usize) -> f64 {
    let (h, w) = (gt.height() as i64, gt.width() as i64);
    let t = tol as i64;
    let (mut total, mut hit) = (0u64, 0u64);
    for y in 0..h {
        for x in 0..w {
            if !is_boundary(gt, y as usize, x as usize) {
                continue;
            }
            total += 1;
            let mut found = false;
            for yy in y - t..=y + t {
                for xx in x - t..=x + t {
                    if yy >= 0 && xx >= 0 && yy < h && xx < w && is_boundary(pred, yy as usize, xx as usize) {
                        found = true;
                    }
                }
            }
            hit += found as u64;
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Undersegmentation error and the leakage mask.
pub fn undersegmentation(pred: &LabelMap, gt: &LabelMap) -> (f64, Vec<bool>) {
    let n = pred.labels().len();
    let mut total = 0;
    for g in distinct(gt) {
        for s in distinct(pred) {
            let inside = count(pred, gt, |p, q| p == s && q == g);
            if inside > 0 {
                let size = count(pred, gt, |p, _| p == s);
                total += inside.min(size - inside);
            }
        }
    }
    let mut leak = vec![false; n];
    for s in distinct(pred) {
        let mut best = (u32::MAX, 0);
        for g in distinct(gt) {
            let c = count(pred, gt, |p, q| p == s && q == g);
            if c > best.1 {
                best = (g, c);
            }
        }
        for i in 0..n {
            if pred.labels()[i] == s && gt.labels()[i] != best.0 {
                leak[i] = true;
            }
        }
    }
    (total as f64 / n as f64, leak)
}

/// Mean IoU over classes occurring in either map, and pixel accuracy.
pub fn miou_pixacc(pred: &LabelMap, gt: &LabelMap, classes: u32) -> (f64, f64) {
    let mut ious = Vec::new();
    for c in 0..classes {
        let tp = count(pred, gt, |p, g| p == c && g == c);
        let fp = count(pred, gt, |p, g| p == c && g != c);
        let fneg = count(pred, gt, |p, g| p != c && g == c);
        if tp + fp + fneg > 0 {
            ious.push(tp as f64 / (tp + fp + fneg) as f64);
        }
    }
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let acc = count(pred, gt, |p, g| p == g) as f64 / pred.labels().len() as f64;
    (miou, acc)
}

/// Row-major `pixels × seeds` matrix assembled slot by slot.
pub fn dense(field: &AssignmentField) -> Vec<f64> {
    let v = field.seed_dims().len();
    let mut m = vec![0.0; field.pixel_count() * v];
    for i in 0..field.pixel_count() {
        for (&j, &w) in field.seeds_of(i).iter().zip(field.weights_of(i)) {
            m[i * v + j as usize] += w;
        }
    }
    m
}

/// `dense · coarse` by the textbook triple loop.
pub fn dense_decode(field: &AssignmentField, coarse: &FeatureMap) -> FeatureMap {
    let m = dense(field);
    let v = field.seed_dims().len();
    let d = field.fine_dims();
    let c = coarse.channels();
    let mut out = FeatureMap::zeros(d.height, d.width, c);
    for i in 0..field.pixel_count() {
        for j in 0..v {
            for k in 0..c {
                out.pixel_mut(i)[k] += m[i * v + j] * coarse.pixel(j)[k];
            }
        }
    }
    out
}

/// Chebyshev distance between a label's seed cell at `level` and the pixel's own cell there.
pub fn cell_distance(label: u32, seed_width: usize, y: usize, x: usize, level: usize) -> usize {
    let (sy, sx) = (label as usize / seed_width, label as usize % seed_width);
    let (cy, cx) = (y >> level, x >> level);
    sy.abs_diff(cy).max(sx.abs_diff(cx))
}
