//! Hand-derived adjoints for decoding and soft assignment, and a central
//! difference checker to verify them.

use crate::cluster::{embed, AssignmentField, ClusteringConfig, ProjectionPair, SeedGrid, Similarity, MAX_CANDIDATES};
use crate::error::{invalid, Error, Result};
use crate::grid::{project_backward, Dims, FeatureMap, Matrix};

/// Gradient with respect to the weights of an [`AssignmentField`], laid out
/// slot for slot like the field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradient {
    fine: Dims,
    counts: Vec<u8>,
    values: Vec<f64>,
}

impl FieldGradient {
    pub fn zeros_like(field: &AssignmentField) -> Self {
        let u = field.pixel_count();
        Self {
            fine: field.fine_dims(),
            counts: (0..u).map(|i| field.candidate_count(i) as u8).collect(),
            values: vec![0.0; u * MAX_CANDIDATES],
        }
    }

    /// Fills every slot from `f(pixel, slot)`.
    pub fn from_fn(field: &AssignmentField, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut g = Self::zeros_like(field);
        for i in 0..field.pixel_count() {
            for (slot, v) in g.of_mut(i).iter_mut().enumerate() {
                *v = f(i, slot);
            }
        }
        g
    }

    pub fn fine_dims(&self) -> Dims {
        self.fine
    }

    #[inline]
    pub fn of(&self, i: usize) -> &[f64] {
        &self.values[i * MAX_CANDIDATES..i * MAX_CANDIDATES + self.counts[i] as usize]
    }

    #[inline]
    pub fn of_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.counts[i] as usize;
        &mut self.values[i * MAX_CANDIDATES..i * MAX_CANDIDATES + n]
    }

    /// Values of the meaningful slots, pixel by pixel.
    pub fn flatten(&self) -> Vec<f64> {
        (0..self.counts.len()).flat_map(|i| self.of(i).to_vec()).collect()
    }

    fn matches(&self, field: &AssignmentField) -> bool {
        self.fine == field.fine_dims()
            && (0..self.counts.len()).all(|i| self.counts[i] as usize == field.candidate_count(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeAdjoint {
    pub d_coarse: FeatureMap,
    pub d_weights: FieldGradient,
}

/// Adjoint of [`decode_once`](crate::decode::decode_once).
pub fn backward_decode(
    field: &AssignmentField,
    coarse: &FeatureMap,
    upstream: &FeatureMap,
) -> Result<DecodeAdjoint> {
    if coarse.dims() != field.seed_dims() {
        return Err(invalid!("coarse map {} does not match seed grid {}", coarse.dims(), field.seed_dims()));
    }
    if upstream.dims() != field.fine_dims() || upstream.channels() != coarse.channels() {
        return Err(invalid!("upstream gradient does not match the decoded map"));
    }
    let mut d_coarse = FeatureMap::zeros(coarse.height(), coarse.width(), coarse.channels());
    let mut d_weights = FieldGradient::zeros_like(field);
    // Serial scatter keeps the summation order fixed.
    for i in 0..field.pixel_count() {
        let g = upstream.pixel(i);
        let dw = d_weights.of_mut(i);
        for ((&j, &w), dwj) in field.seeds_of(i).iter().zip(field.weights_of(i)).zip(dw.iter_mut()) {
            let j = j as usize;
            *dwj = crate::grid::dot(g, coarse.pixel(j));
            for (d, gv) in d_coarse.pixel_mut(j).iter_mut().zip(g) {
                *d += w * gv;
            }
        }
    }
    Ok(DecodeAdjoint { d_coarse, d_weights })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignAdjoint {
    pub d_fine: FeatureMap,
    pub d_seeds: FeatureMap,
    pub d_w_fine: Matrix,
    pub d_w_seed: Matrix,
}

/// Adjoint of [`soft_assign`](crate::cluster::soft_assign) given the gradient
/// of the loss with respect to the assignment weights.
///
/// Recomputes the forward pass. Seeds receive gradient only through the
/// similarity term; the caller adds whatever flows through the downsampling
/// path that produced them.
pub fn backward_soft_assign(
    fine: &FeatureMap,
    seeds: &SeedGrid,
    proj: &ProjectionPair,
    config: &ClusteringConfig,
    upstream: &FieldGradient,
) -> Result<SoftAssignAdjoint> {
    let emb = embed(fine, seeds, proj, config)?;
    if upstream.fine_dims() != fine.dims() {
        return Err(invalid!("upstream weight gradient does not match the fine grid"));
    }
    let field = AssignmentField::from_windows(fine.dims(), |_, _, _| {});
    if !upstream.matches(&field) {
        return Err(invalid!("upstream weight gradient has the wrong candidate layout"));
    }
    let k = emb.k;
    let u = fine.dims().len();
    let v = seeds.dims().len();
    let mode = config.similarity;
    let tau = config.tau;
    let eps = config.epsilon_norm;

    let mut d_p = vec![0.0; u * k];
    let mut d_q = vec![0.0; v * k];
    // cosine mode: per-seed accumulators for Σ dS·S, combined after the scan
    let mut seed_scalar = vec![0.0; v];

    let mut sims = [0.0f64; MAX_CANDIDATES];
    let mut probs = [0.0f64; MAX_CANDIDATES];
    for i in 0..u {
        let ids = field.seeds_of(i);
        let n = ids.len();
        for (s, &j) in sims.iter_mut().zip(ids) {
            *s = emb.sim(i, j as usize, mode);
        }
        probs[..n].copy_from_slice(&sims[..n]);
        crate::cluster::softmax_in_place(&mut probs[..n], tau);

        let g = upstream.of(i);
        let mean: f64 = probs[..n].iter().zip(g).map(|(a, b)| a * b).sum();
        let p_i = emb.fine_row(i);
        let dp_i = &mut d_p[i * k..(i + 1) * k];
        let mut pixel_scalar = 0.0;
        for slot in 0..n {
            let ds = probs[slot] * (g[slot] - mean) / tau;
            if ds == 0.0 {
                continue;
            }
            let j = ids[slot] as usize;
            let q_j = emb.seed_row(j);
            let dq_j = &mut d_q[j * k..(j + 1) * k];
            match mode {
                Similarity::Cosine => {
                    for t in 0..k {
                        dp_i[t] += ds * q_j[t];
                        dq_j[t] += ds * p_i[t];
                    }
                    pixel_scalar += ds * sims[slot];
                    seed_scalar[j] += ds * sims[slot];
                }
                Similarity::NegSqEuclidean => {
                    for t in 0..k {
                        let diff = p_i[t] - q_j[t];
                        dp_i[t] -= 2.0 * ds * diff;
                        dq_j[t] += 2.0 * ds * diff;
                    }
                }
            }
        }
        if mode == Similarity::Cosine {
            finish_cosine(dp_i, p_i, pixel_scalar, emb.fine_norms[i], eps);
        }
    }
    if mode == Similarity::Cosine {
        for j in 0..v {
            let q_j = emb.seed_row(j);
            finish_cosine(&mut d_q[j * k..(j + 1) * k], q_j, seed_scalar[j], emb.seed_norms[j], eps);
        }
    }

    let d_p = FeatureMap::from_vec(fine.height(), fine.width(), k, d_p)?;
    let d_q = FeatureMap::from_vec(seeds.dims().height, seeds.dims().width, k, d_q)?;
    let (d_fine, d_w_fine) = project_backward(fine, &proj.fine, &d_p)?;
    let (d_seeds, d_w_seed) = project_backward(seeds.features(), &proj.seed, &d_q)?;
    Ok(SoftAssignAdjoint {
        d_fine,
        d_seeds,
        d_w_fine,
        d_w_seed,
    })
}

/// Turns `Σ dS · q̂` into the gradient with respect to the raw projection.
///
/// With `n = max(‖p‖, ε)` and `p̂ = p / n`, the cosine derivative is
/// `(q̂ − S p̂) / n` when the norm exceeds ε and `q̂ / ε` otherwise.
#[inline]
fn finish_cosine(acc: &mut [f64], unit: &[f64], scalar: f64, norm: f64, eps: f64) {
    if norm > eps {
        for (a, &x) in acc.iter_mut().zip(unit) {
            *a = (*a - scalar * x) / norm;
        }
    } else {
        acc.iter_mut().for_each(|a| *a /= eps);
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
}

/// Compares an analytic gradient with central differences of `f` at `point`.
///
/// The error per coordinate is `|g_analytic − g_numeric| / max(1, |g_numeric|)`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    eps: f64,
) -> Result<GradCheck> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!("eps must lie in [1e-8, 1e-3], got {eps}")));
    }
    if analytic.len() != point.len() {
        return Err(invalid!(
            "analytic gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        ));
    }
    let mut x = point.to_vec();
    let mut result = GradCheck {
        max_rel_err: 0.0,
        worst_coordinate: 0,
    };
    for c in 0..x.len() {
        let orig = x[c];
        x[c] = orig + eps;
        let plus = f(&x);
        x[c] = orig - eps;
        let minus = f(&x);
        x[c] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical {
                coordinate: c,
                message: format!("objective evaluated to {plus} / {minus}"),
            });
        }
        if !analytic[c].is_finite() {
            return Err(Error::Numerical {
                coordinate: c,
                message: "analytic gradient is not finite".into(),
            });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[c] - numeric).abs() / numeric.abs().max(1.0);
        if err > result.max_rel_err {
            result = GradCheck {
                max_rel_err: err,
                worst_coordinate: c,
            };
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::soft_assign;
    use crate::decode::decode_once;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_field(rng: &mut impl Rng, fine: Dims) -> AssignmentField {
        AssignmentField::from_windows(fine, |_, _, out| {
            out.iter_mut().for_each(|w| *w = rng.gen_range(0.05..1.0));
            let s: f64 = out.iter().sum();
            out.iter_mut().for_each(|w| *w /= s);
        })
    }

    /// Field with the same layout as `field` but the given flat weights.
    fn with_weights(field: &AssignmentField, flat: &[f64]) -> AssignmentField {
        let mut f = field.clone();
        let mut at = 0;
        for i in 0..f.pixel_count() {
            for w in f.weights_of_mut(i) {
                *w = flat[at];
                at += 1;
            }
        }
        f
    }

    fn flat_weights(field: &AssignmentField) -> Vec<f64> {
        (0..field.pixel_count()).flat_map(|i| field.weights_of(i).to_vec()).collect()
    }

    #[test]
    fn quadratic_is_exact() {
        let point = [0.3, -1.2, 2.0];
        let analytic: Vec<f64> = point.iter().map(|x| 2.0 * x).collect();
        // central differences are exact for a quadratic; only rounding remains,
        // and that shrinks as eps grows
        let r = finite_diff_check(|x| x.iter().map(|v| v * v).sum(), &analytic, &point, 1e-3).unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }

    #[test]
    fn checker_rejects_bad_eps_and_reports_non_finite() {
        assert!(matches!(
            finite_diff_check(|_| 0.0, &[0.0], &[0.0], 1e-2),
            Err(Error::InvalidConfig(_))
        ));
        let r = finite_diff_check(|x| if x[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.0], &[0.0, 0.5], 1e-6);
        assert!(matches!(r, Err(Error::Numerical { coordinate: 1, .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = rand_field(&mut rng, Dims::new(6, 6));
        let coarse = FeatureMap::from_vec(3, 3, 2, rand_vec(&mut rng, 18)).unwrap();
        let adj = backward_decode(&field, &coarse, &FeatureMap::zeros(6, 6, 2)).unwrap();
        assert!(adj.d_coarse.data().iter().all(|&v| v == 0.0));
        assert!(adj.d_weights.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_adjoint_is_segment_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (hard, labels) = crate::cluster::hard_assign(&rand_field(&mut rng, Dims::new(8, 8)));
        let coarse = FeatureMap::from_vec(4, 4, 1, rand_vec(&mut rng, 16)).unwrap();
        let up = FeatureMap::from_vec(8, 8, 1, rand_vec(&mut rng, 64)).unwrap();
        let adj = backward_decode(&hard, &coarse, &up).unwrap();
        let mut sums = [0.0; 16];
        for i in 0..64 {
            sums[labels.labels()[i] as usize] += up.data()[i];
        }
        for j in 0..16 {
            assert!((adj.d_coarse.data()[j] - sums[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_upstream_gives_column_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = rand_field(&mut rng, Dims::new(7, 9));
        let coarse = FeatureMap::zeros(4, 5, 1);
        let adj = backward_decode(&field, &coarse, &FeatureMap::filled(7, 9, 1, 1.0)).unwrap();
        let dense = field.to_dense().unwrap();
        for j in 0..20 {
            let col: f64 = (0..63).map(|i| dense[i * 20 + j]).sum();
            assert!((adj.d_coarse.data()[j] - col).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = rand_field(&mut rng, Dims::new(6, 6));
        let coarse = FeatureMap::from_vec(3, 3, 2, rand_vec(&mut rng, 18)).unwrap();
        let up = FeatureMap::from_vec(6, 6, 2, rand_vec(&mut rng, 72)).unwrap();
        let adj = backward_decode(&field, &coarse, &up).unwrap();
        let objective = |f: &AssignmentField, c: &FeatureMap| -> f64 {
            crate::grid::dot(decode_once(f, c).unwrap().data(), up.data())
        };
        let r = finite_diff_check(
            |x| objective(&field, &FeatureMap::from_vec(3, 3, 2, x.to_vec()).unwrap()),
            adj.d_coarse.data(),
            coarse.data(),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
        let r = finite_diff_check(
            |x| objective(&with_weights(&field, x), &coarse),
            &adj.d_weights.flatten(),
            &flat_weights(&field),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    struct Instance {
        fine: FeatureMap,
        seeds: SeedGrid,
        proj: ProjectionPair,
    }

    fn instance(seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Instance {
            fine: FeatureMap::from_vec(6, 6, 3, rand_vec(&mut rng, 108)).unwrap(),
            seeds: SeedGrid::new(FeatureMap::from_vec(3, 3, 4, rand_vec(&mut rng, 36)).unwrap()),
            proj: ProjectionPair::new(
                Matrix::from_vec(5, 3, rand_vec(&mut rng, 15)).unwrap(),
                Matrix::from_vec(5, 4, rand_vec(&mut rng, 20)).unwrap(),
            )
            .unwrap(),
        }
    }

    fn check_soft_assign(inst: &Instance, cfg: &ClusteringConfig, upstream_of: impl Fn(&AssignmentField) -> FieldGradient, objective: impl Fn(&AssignmentField) -> f64) {
        let field = soft_assign(&inst.fine, &inst.seeds, &inst.proj, cfg).unwrap();
        let up = upstream_of(&field);
        let adj = backward_soft_assign(&inst.fine, &inst.seeds, &inst.proj, cfg, &up).unwrap();
        let eval = |fine: &FeatureMap, seeds: &SeedGrid, proj: &ProjectionPair| {
            objective(&soft_assign(fine, seeds, proj, cfg).unwrap())
        };
        let (fh, fw, fc) = (inst.fine.height(), inst.fine.width(), inst.fine.channels());
        let r = finite_diff_check(
            |x| eval(&FeatureMap::from_vec(fh, fw, fc, x.to_vec()).unwrap(), &inst.seeds, &inst.proj),
            adj.d_fine.data(),
            inst.fine.data(),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "d_fine {r:?}");
        let r = finite_diff_check(
            |x| eval(&inst.fine, &SeedGrid::new(FeatureMap::from_vec(3, 3, 4, x.to_vec()).unwrap()), &inst.proj),
            adj.d_seeds.data(),
            inst.seeds.features().data(),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "d_seeds {r:?}");
        let r = finite_diff_check(
            |x| {
                let p = ProjectionPair::new(Matrix::from_vec(5, 3, x.to_vec()).unwrap(), inst.proj.seed.clone()).unwrap();
                eval(&inst.fine, &inst.seeds, &p)
            },
            adj.d_w_fine.data(),
            inst.proj.fine.data(),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "d_w_fine {r:?}");
        let r = finite_diff_check(
            |x| {
                let p = ProjectionPair::new(inst.proj.fine.clone(), Matrix::from_vec(5, 4, x.to_vec()).unwrap()).unwrap();
                eval(&inst.fine, &inst.seeds, &p)
            },
            adj.d_w_seed.data(),
            inst.proj.seed.data(),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "d_w_seed {r:?}");
    }

    #[test]
    fn soft_assign_adjoint_matches_finite_differences() {
        for seed in 0..4 {
            let inst = instance(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let g: Vec<f64> = rand_vec(&mut rng, 36 * 9);
            for sim in [Similarity::Cosine, Similarity::NegSqEuclidean] {
                let cfg = ClusteringConfig::default().with_similarity(sim).with_tau(if sim == Similarity::Cosine { 0.07 } else { 1.0 });
                check_soft_assign(
                    &inst,
                    &cfg,
                    |f| FieldGradient::from_fn(f, |i, s| g[i * 9 + s]),
                    |f| (0..f.pixel_count()).map(|i| f.weights_of(i).iter().enumerate().map(|(s, w)| w * g[i * 9 + s]).sum::<f64>()).sum(),
                );
            }
        }
    }

    #[test]
    fn entropy_objective_matches_finite_differences() {
        let inst = instance(9);
        let cfg = ClusteringConfig::default();
        check_soft_assign(
            &inst,
            &cfg,
            |f| FieldGradient::from_fn(f, |i, s| -(f.weights_of(i)[s].ln() + 1.0)),
            |f| (0..f.pixel_count()).map(|i| f.weights_of(i).iter().map(|w| -w * w.ln()).sum::<f64>()).sum(),
        );
    }

    #[test]
    fn uniform_upstream_is_annihilated() {
        let inst = instance(5);
        let cfg = ClusteringConfig::default();
        let field = soft_assign(&inst.fine, &inst.seeds, &inst.proj, &cfg).unwrap();
        let up = FieldGradient::from_fn(&field, |i, _| i as f64 * 0.3 - 2.0);
        let adj = backward_soft_assign(&inst.fine, &inst.seeds, &inst.proj, &cfg, &up).unwrap();
        for m in [adj.d_fine.data(), adj.d_seeds.data(), adj.d_w_fine.data(), adj.d_w_seed.data()] {
            assert!(m.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn similarity_gradient_scales_with_inverse_tau() {
        // At a symmetric point (all features equal) the softmax is uniform
        // regardless of tau, so only the 1/tau factor changes.
        let fine = FeatureMap::from_fn(6, 6, 2, |h, w, c| 0.5 + 0.1 * ((h + w + c) % 3) as f64);
        let seeds = SeedGrid::new(FeatureMap::filled(3, 3, 2, 0.7));
        let proj = ProjectionPair::new(Matrix::identity(2), Matrix::identity(2)).unwrap();
        let base = ClusteringConfig::default().with_similarity(Similarity::NegSqEuclidean);
        let field = soft_assign(&fine, &seeds, &proj, &base.with_tau(0.1)).unwrap();
        let up = FieldGradient::from_fn(&field, |i, s| ((i * 7 + s * 3) % 5) as f64);
        let a = backward_soft_assign(&fine, &seeds, &proj, &base.with_tau(0.1), &up).unwrap();
        let b = backward_soft_assign(&fine, &seeds, &proj, &base.with_tau(0.2), &up).unwrap();
        for (x, y) in a.d_fine.data().iter().zip(b.d_fine.data()) {
            assert!((x - 2.0 * y).abs() < 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let inst = instance(6);
        let cfg = ClusteringConfig::default();
        let other = AssignmentField::uniform(Dims::new(4, 4));
        let up = FieldGradient::zeros_like(&other);
        assert!(backward_soft_assign(&inst.fine, &inst.seeds, &inst.proj, &cfg, &up).is_err());
        let field = AssignmentField::uniform(Dims::new(6, 6));
        assert!(backward_decode(&field, &FeatureMap::zeros(3, 3, 1), &FeatureMap::zeros(6, 6, 2)).is_err());
    }
}
