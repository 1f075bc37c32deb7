//! Superpixel and segmentation quality metrics.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::grid::{Dims, LabelMap};

pub const DEFAULT_BR_TOLERANCE: usize = 2;

fn check_dims(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(invalid!("prediction is {} but ground truth is {}", pred.dims(), gt.dims()));
    }
    Ok(())
}

/// Pixel counts of every (superpixel, gt region) overlap.
struct Overlaps {
    pairs: HashMap<(u32, u32), u64>,
    sizes: HashMap<u32, u64>,
}

impl Overlaps {
    fn new(pred: &LabelMap, gt: &LabelMap) -> Self {
        let mut pairs = HashMap::new();
        let mut sizes = HashMap::new();
        for (&s, &g) in pred.labels().iter().zip(gt.labels()) {
            *pairs.entry((s, g)).or_insert(0) += 1;
            *sizes.entry(s).or_insert(0) += 1;
        }
        Self { pairs, sizes }
    }

    /// Each superpixel's largest gt overlap as `(gt label, count)`; ties go to the lower label.
    fn majorities(&self) -> HashMap<u32, (u32, u64)> {
        let mut best: HashMap<u32, (u32, u64)> = HashMap::new();
        for (&(s, g), &n) in &self.pairs {
            let e = best.entry(s).or_insert((g, n));
            if n > e.1 || (n == e.1 && g < e.0) {
                *e = (g, n);
            }
        }
        best
    }
}

/// Achievable segmentation accuracy: the fraction of pixels labelled correctly
/// if every superpixel takes its majority ground-truth label.
pub fn asa(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    check_dims(pred, gt)?;
    let n = pred.labels().len();
    if n == 0 {
        return Ok(1.0);
    }
    let hits: u64 = Overlaps::new(pred, gt).majorities().values().map(|&(_, c)| c).sum();
    Ok(hits as f64 / n as f64)
}

/// 2-D inclusive prefix sums of a boolean mask.
struct Integral {
    width: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(mask: &[bool], dims: Dims) -> Self {
        let w1 = dims.width + 1;
        let mut sums = vec![0u32; (dims.height + 1) * w1];
        for h in 0..dims.height {
            for w in 0..dims.width {
                sums[(h + 1) * w1 + w + 1] = mask[h * dims.width + w] as u32 + sums[h * w1 + w + 1]
                    + sums[(h + 1) * w1 + w]
                    - sums[h * w1 + w];
            }
        }
        Self { width: w1, sums }
    }

    /// Count within the inclusive box `[h0, h1] × [w0, w1]`.
    fn count(&self, h0: usize, h1: usize, w0: usize, w1: usize) -> u32 {
        let s = |h: usize, w: usize| self.sums[h * self.width + w];
        s(h1 + 1, w1 + 1) + s(h0, w0) - s(h0, w1 + 1) - s(h1 + 1, w0)
    }
}

/// Fraction of `from` pixels with a `to` pixel within Chebyshev distance `tol`.
/// Empty `from` counts as fully matched.
fn matched_fraction(from: &[bool], to: &[bool], dims: Dims, tol: usize) -> f64 {
    let total = from.iter().filter(|&&b| b).count();
    if total == 0 {
        return 1.0;
    }
    let integral = Integral::new(to, dims);
    let mut hit = 0usize;
    for h in 0..dims.height {
        for w in 0..dims.width {
            if !from[h * dims.width + w] {
                continue;
            }
            let h0 = h.saturating_sub(tol);
            let h1 = (h + tol).min(dims.height - 1);
            let w0 = w.saturating_sub(tol);
            let w1 = (w + tol).min(dims.width - 1);
            if integral.count(h0, h1, w0, w1) > 0 {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

/// Fraction of ground-truth boundary pixels with a predicted boundary pixel
/// within Chebyshev distance `tolerance`. Boundaries use the 4-neighbour rule.
pub fn boundary_recall(pred: &LabelMap, gt: &LabelMap, tolerance: usize) -> Result<f64> {
    check_dims(pred, gt)?;
    Ok(matched_fraction(&gt.boundary_mask(), &pred.boundary_mask(), gt.dims(), tolerance))
}

/// Boundary F-score: harmonic mean of boundary precision and recall at `tolerance`.
pub fn boundary_f_score(pred: &LabelMap, gt: &LabelMap, tolerance: usize) -> Result<f64> {
    check_dims(pred, gt)?;
    let pb = pred.boundary_mask();
    let gb = gt.boundary_mask();
    let recall = matched_fraction(&gb, &pb, gt.dims(), tolerance);
    let precision = matched_fraction(&pb, &gb, gt.dims(), tolerance);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Undersegmentation {
    pub value: f64,
    /// True for pixels lying outside their superpixel's majority region.
    pub leakage: Vec<bool>,
}

impl Undersegmentation {
    pub fn leaked_pixels(&self) -> usize {
        self.leakage.iter().filter(|&&b| b).count()
    }
}

/// Undersegmentation error, `(1/N) Σ_G Σ_{S ∩ G ≠ ∅} min(|S ∩ G|, |S \ G|)`,
/// with the mask of leaked pixels.
pub fn undersegmentation_error(pred: &LabelMap, gt: &LabelMap) -> Result<Undersegmentation> {
    check_dims(pred, gt)?;
    let n = pred.labels().len();
    let overlaps = Overlaps::new(pred, gt);
    let mut total = 0u64;
    for (&(s, _), &inside) in &overlaps.pairs {
        let outside = overlaps.sizes[&s] - inside;
        total += inside.min(outside);
    }
    let majority = overlaps.majorities();
    let leakage = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .map(|(s, &g)| majority[s].0 != g)
        .collect();
    Ok(Undersegmentation {
        value: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        leakage,
    })
}

/// Class confusion counts, `counts[gt][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_dims(pred, gt)?;
        pred.check_bound(self.classes as u32)?;
        gt.check_bound(self.classes as u32)?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// IoU per class, `None` for classes absent from both prediction and ground truth.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn scores(&self) -> ClassScores {
        let ious = self.class_iou();
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        ClassScores {
            miou,
            pixel_acc: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
            class_iou: ious,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub miou: f64,
    pub pixel_acc: f64,
    pub class_iou: Vec<Option<f64>>,
}

/// Mean IoU over classes present in either map, and pixel accuracy.
pub fn miou_pixacc(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ClassScores> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.scores())
}

/// Every metric for one prediction / ground-truth pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub asa: f64,
    pub br: f64,
    pub br_tolerance: usize,
    pub ue: f64,
    pub leaked_pixels: usize,
    pub miou: f64,
    pub pixel_acc: f64,
    #[serde(skip)]
    pub leakage: Vec<bool>,
}

pub fn evaluate_pair(pred: &LabelMap, gt: &LabelMap, br_tolerance: usize) -> Result<MetricReport> {
    let ue = undersegmentation_error(pred, gt)?;
    let classes = pred.label_bound().max(gt.label_bound()) as usize;
    let scores = miou_pixacc(pred, gt, classes)?;
    Ok(MetricReport {
        asa: asa(pred, gt)?,
        br: boundary_recall(pred, gt, br_tolerance)?,
        br_tolerance,
        ue: ue.value,
        leaked_pixels: ue.leaked_pixels(),
        miou: scores.miou,
        pixel_acc: scores.pixel_acc,
        leakage: ue.leakage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn halves(h: usize, w: usize) -> LabelMap {
        LabelMap::from_fn(h, w, |_, x| (x >= w / 2) as u32)
    }

    #[test]
    fn perfect_prediction() {
        let gt = halves(4, 6);
        assert_eq!(asa(&gt, &gt).unwrap(), 1.0);
        assert_eq!(boundary_recall(&gt, &gt, 0).unwrap(), 1.0);
        let ue = undersegmentation_error(&gt, &gt).unwrap();
        assert_eq!(ue.value, 0.0);
        assert_eq!(ue.leaked_pixels(), 0);
        let s = miou_pixacc(&gt, &gt, 2).unwrap();
        assert_eq!((s.miou, s.pixel_acc), (1.0, 1.0));
    }

    #[test]
    fn single_superpixel_over_two_halves() {
        let gt = halves(4, 4);
        let pred = LabelMap::filled(4, 4, 0);
        assert_eq!(asa(&pred, &gt).unwrap(), 0.5);
        let ue = undersegmentation_error(&pred, &gt).unwrap();
        assert_eq!(ue.value, 1.0);
        assert_eq!(ue.leaked_pixels(), 8);
        // tie goes to gt label 0, so the right half leaks
        assert!(ue.leakage.iter().enumerate().all(|(i, &b)| b == (i % 4 >= 2)));
        assert_eq!(boundary_recall(&pred, &gt, 2).unwrap(), 0.0);
    }

    #[test]
    fn recall_without_gt_boundaries_is_one() {
        let gt = LabelMap::filled(3, 3, 4);
        assert_eq!(boundary_recall(&halves(3, 3), &gt, 1).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_class_has_zero_iou() {
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 0, 0, 0]).unwrap();
        let s = miou_pixacc(&pred, &gt, 3).unwrap();
        assert_eq!(s.class_iou, vec![Some(0.5), Some(0.0), None]);
        assert_eq!(s.miou, 0.25);
        assert_eq!(s.pixel_acc, 0.5);
        assert!(miou_pixacc(&pred, &gt, 1).is_err());
    }

    #[test]
    fn dims_must_match() {
        let a = LabelMap::filled(2, 3, 0);
        let b = LabelMap::filled(3, 2, 0);
        assert!(asa(&a, &b).is_err());
        assert!(boundary_recall(&a, &b, 2).is_err());
        assert!(undersegmentation_error(&a, &b).is_err());
    }

    #[test]
    fn boundary_f_score_cases() {
        let gt = halves(6, 6);
        assert_eq!(boundary_f_score(&gt, &gt, 1).unwrap(), 1.0);
        assert_eq!(boundary_f_score(&LabelMap::filled(6, 6, 0), &gt, 1).unwrap(), 0.0);
        // a shifted edge two columns away is outside a 1 px tolerance
        let shifted = LabelMap::from_fn(6, 6, |_, x| (x >= 5) as u32);
        assert_eq!(boundary_f_score(&shifted, &gt, 1).unwrap(), 0.5);
    }

    fn relabel(m: &LabelMap, f: impl Fn(u32) -> u32) -> LabelMap {
        LabelMap::new(m.height(), m.width(), m.labels().iter().map(|&l| f(l)).collect()).unwrap()
    }

    fn label_map(h: usize, w: usize, bound: u32) -> impl Strategy<Value = LabelMap> {
        proptest::collection::vec(0..bound, h * w).prop_map(move |v| LabelMap::new(h, w, v).unwrap())
    }

    proptest! {
        #[test]
        fn asa_ignores_relabeling(pred in label_map(8, 8, 6), gt in label_map(8, 8, 3)) {
            let a = asa(&pred, &gt).unwrap();
            let b = asa(&relabel(&pred, |l| 97 - 3 * l), &gt).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn splitting_never_lowers_asa(pred in label_map(8, 8, 4), gt in label_map(8, 8, 3), victim in 0u32..4, split_at in 0usize..64) {
            let mut split = pred.clone();
            for (i, l) in split.labels_mut().iter_mut().enumerate() {
                if *l == victim && i >= split_at {
                    *l = 100;
                }
            }
            prop_assert!(asa(&split, &gt).unwrap() >= asa(&pred, &gt).unwrap());
        }

        #[test]
        fn recall_grows_with_tolerance(pred in label_map(10, 10, 4), gt in label_map(10, 10, 3)) {
            let mut last = 0.0;
            for t in 0..5 {
                let r = boundary_recall(&pred, &gt, t).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
        }

        #[test]
        fn zero_ue_iff_nested(pred in label_map(6, 6, 5), gt in label_map(6, 6, 2)) {
            let ue = undersegmentation_error(&pred, &gt).unwrap();
            let mut owner: HashMap<u32, u32> = HashMap::new();
            let nested = pred.labels().iter().zip(gt.labels()).all(|(&s, &g)| *owner.entry(s).or_insert(g) == g);
            prop_assert_eq!(ue.value == 0.0, nested);
            prop_assert!(ue.value >= 0.0);
        }
    }
}
