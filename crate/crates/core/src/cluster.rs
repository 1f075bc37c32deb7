//! Soft assignment of fine pixels to the seeds of a 2× downsampled grid.
//!
//! Each fine pixel only looks at the 3×3 block of seed cells around its own
//! cell. Cells falling off the seed grid are dropped and the softmax is
//! renormalised over the survivors, so border pixels have 4 or 6 candidates.
//! Candidate order is row-major over `(dy, dx)` and is part of the on-disk
//! format.

use std::io::{Read, Write};
use std::path::Path;

use arrayvec::ArrayVec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{dot, Dims, Downsample, FeatureMap, LabelMap, Matrix};

/// Upper bound on candidates per fine pixel.
pub const MAX_CANDIDATES: usize = 9;

/// Largest `U · V` the dense softmax oracle will materialise.
pub const DENSE_LIMIT: usize = 10_000_000;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_K: usize = 64;
pub const DEFAULT_EPSILON: f64 = 1e-12;

const MIN_PAR_PIXELS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    #[default]
    Cosine,
    /// `-‖a − b‖²`
    NegSqEuclidean,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "nse" | "neg-sq-euclidean" => Ok(Similarity::NegSqEuclidean),
            other => Err(Error::InvalidConfig(format!("unknown similarity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub tau: f64,
    pub k_dim: usize,
    pub similarity: Similarity,
    pub epsilon_norm: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            k_dim: DEFAULT_K,
            similarity: Similarity::Cosine,
            epsilon_norm: DEFAULT_EPSILON,
        }
    }
}

impl ClusteringConfig {
    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_similarity(mut self, similarity: Similarity) -> Self {
        self.similarity = similarity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.epsilon_norm > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon_norm must be positive, got {}",
                self.epsilon_norm
            )));
        }
        if self.k_dim == 0 {
            return Err(Error::InvalidConfig("k_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable projections into the shared K-dimensional similarity space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    /// K × N, applied to fine pixel features.
    pub fine: Matrix,
    /// K × M, applied to seed features.
    pub seed: Matrix,
}

impl ProjectionPair {
    pub fn new(fine: Matrix, seed: Matrix) -> Result<Self> {
        if fine.rows() != seed.rows() {
            return Err(invalid!(
                "projection row counts differ: {} vs {}",
                fine.rows(),
                seed.rows()
            ));
        }
        if !fine.is_finite() || !seed.is_finite() {
            return Err(Error::Numerical {
                coordinate: 0,
                message: "projection matrix has non-finite entries".into(),
            });
        }
        Ok(Self { fine, seed })
    }

    /// Identity projections for features that already live in a shared space.
    pub fn identity(channels: usize) -> Self {
        Self {
            fine: Matrix::identity(channels),
            seed: Matrix::identity(channels),
        }
    }

    pub fn k_dim(&self) -> usize {
        self.fine.rows()
    }
}

/// The downsampled map whose pixels act as cluster seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedGrid {
    features: FeatureMap,
}

impl SeedGrid {
    pub fn new(features: FeatureMap) -> Self {
        Self { features }
    }

    /// Seeds from a fine map with the given reduction.
    pub fn from_fine(fine: &FeatureMap, reduce: Downsample) -> Result<Self> {
        Ok(Self {
            features: reduce.apply(fine)?,
        })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn into_features(self) -> FeatureMap {
        self.features
    }

    pub fn dims(&self) -> Dims {
        self.features.dims()
    }
}

/// Flat seed indices of the in-bounds 3×3 window around fine pixel `(h, w)`.
pub fn candidate_seeds(h: usize, w: usize, fine: Dims) -> Result<ArrayVec<usize, MAX_CANDIDATES>> {
    if h >= fine.height || w >= fine.width {
        return Err(invalid!("pixel ({h}, {w}) lies outside the {fine} fine grid"));
    }
    Ok(window(h, w, fine.halved()))
}

#[inline]
fn window(h: usize, w: usize, seed: Dims) -> ArrayVec<usize, MAX_CANDIDATES> {
    let (ch, cw) = ((h / 2) as isize, (w / 2) as isize);
    let mut out = ArrayVec::new();
    for dy in -1..=1isize {
        let sy = ch + dy;
        if sy < 0 || sy >= seed.height as isize {
            continue;
        }
        for dx in -1..=1isize {
            let sx = cw + dx;
            if sx < 0 || sx >= seed.width as isize {
                continue;
            }
            out.push(sy as usize * seed.width + sx as usize);
        }
    }
    out
}

/// Similarity between two projected vectors.
pub fn similarity(a: &[f64], b: &[f64], config: &ClusteringConfig) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    match config.similarity {
        Similarity::Cosine => {
            let eps = config.epsilon_norm;
            let na = dot(a, a).sqrt().max(eps);
            let nb = dot(b, b).sqrt().max(eps);
            dot(a, b) / (na * nb)
        }
        Similarity::NegSqEuclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
    }
}

/// Per-pixel candidate lists with weights.
///
/// Storage is a fixed stride of [`MAX_CANDIDATES`] slots per fine pixel; only
/// the first `count` slots of each pixel are meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentField {
    fine: Dims,
    seed: Dims,
    counts: Vec<u8>,
    seeds: Vec<u32>,
    weights: Vec<f64>,
}

impl AssignmentField {
    /// Builds a field over the standard candidate windows, filling weights with `f(pixel, candidates, out)`.
    pub fn from_windows(fine: Dims, mut f: impl FnMut(usize, &[usize], &mut [f64])) -> Self {
        let seed = fine.halved();
        let u = fine.len();
        let mut counts = vec![0u8; u];
        let mut seeds = vec![0u32; u * MAX_CANDIDATES];
        let mut weights = vec![0.0; u * MAX_CANDIDATES];
        for i in 0..u {
            let (h, w) = fine.coords(i);
            let cands = window(h, w, seed);
            counts[i] = cands.len() as u8;
            let base = i * MAX_CANDIDATES;
            for (slot, &s) in cands.iter().enumerate() {
                seeds[base + slot] = s as u32;
            }
            f(i, &cands, &mut weights[base..base + cands.len()]);
        }
        Self {
            fine,
            seed,
            counts,
            seeds,
            weights,
        }
    }

    /// Uniform weights over every pixel's candidates.
    pub fn uniform(fine: Dims) -> Self {
        Self::from_windows(fine, |_, c, out| out.fill(1.0 / c.len() as f64))
    }

    pub fn fine_dims(&self) -> Dims {
        self.fine
    }

    pub fn seed_dims(&self) -> Dims {
        self.seed
    }

    pub fn pixel_count(&self) -> usize {
        self.fine.len()
    }

    #[inline]
    pub fn candidate_count(&self, i: usize) -> usize {
        self.counts[i] as usize
    }

    #[inline]
    pub fn seeds_of(&self, i: usize) -> &[u32] {
        let base = i * MAX_CANDIDATES;
        &self.seeds[base..base + self.counts[i] as usize]
    }

    #[inline]
    pub fn weights_of(&self, i: usize) -> &[f64] {
        let base = i * MAX_CANDIDATES;
        &self.weights[base..base + self.counts[i] as usize]
    }

    #[inline]
    pub fn weights_of_mut(&mut self, i: usize) -> &mut [f64] {
        let base = i * MAX_CANDIDATES;
        let n = self.counts[i] as usize;
        &mut self.weights[base..base + n]
    }

    /// Sum of candidate counts over all pixels.
    pub fn total_candidates(&self) -> usize {
        self.counts.iter().map(|&c| c as usize).sum()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.weights_of(i).iter().sum()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.pixel_count())
            .map(|i| (self.row_sum(i) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// True if every pixel has exactly one weight of 1 and the rest 0.
    pub fn is_one_hot(&self) -> bool {
        (0..self.pixel_count()).all(|i| {
            let w = self.weights_of(i);
            w.iter().filter(|&&x| x == 1.0).count() == 1 && w.iter().all(|&x| x == 0.0 || x == 1.0)
        })
    }

    /// Checks the row-stochastic and candidate-membership invariants.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.pixel_count() {
            let (h, w) = self.fine.coords(i);
            let cands = window(h, w, self.seed);
            let seeds = self.seeds_of(i);
            if seeds.len() != cands.len() || seeds.iter().zip(&cands).any(|(&a, &b)| a as usize != b) {
                return Err(invalid!("pixel {i} stores seeds outside its candidate window"));
            }
            let ws = self.weights_of(i);
            if ws.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(invalid!("pixel {i} has a weight outside [0, 1]"));
            }
            let err = (ws.iter().sum::<f64>() - 1.0).abs();
            if err > 1e-9 {
                return Err(invalid!("pixel {i} weights sum to 1 ± {err:e}"));
            }
        }
        Ok(())
    }

    /// Dense `U × V` row-major copy. Test and benchmark oracle only.
    pub fn to_dense(&self) -> Result<Vec<f64>> {
        let (u, v) = (self.fine.len(), self.seed.len());
        if u.saturating_mul(v) > DENSE_LIMIT {
            return Err(Error::ResourceLimit(format!(
                "dense assignment {u}x{v} exceeds {DENSE_LIMIT} entries"
            )));
        }
        let mut dense = vec![0.0; u * v];
        for i in 0..u {
            for (&s, &w) in self.seeds_of(i).iter().zip(self.weights_of(i)) {
                dense[i * v + s as usize] += w;
            }
        }
        Ok(dense)
    }

    const MAGIC: &'static [u8; 4] = b"ASF1";

    /// Little-endian binary: magic, fine dims, seed dims (u32 each), then per
    /// pixel a u8 count followed by `(u32 seed, f64 weight)` pairs.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(Self::MAGIC)?;
        for d in [self.fine.height, self.fine.width, self.seed.height, self.seed.width] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(1 + MAX_CANDIDATES * 12);
        for i in 0..self.pixel_count() {
            buf.clear();
            buf.push(self.counts[i]);
            for (&s, &w) in self.seeds_of(i).iter().zip(self.weights_of(i)) {
                buf.extend_from_slice(&s.to_le_bytes());
                buf.extend_from_slice(&w.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::ParseAt {
                offset: 0,
                message: e.to_string(),
            })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(4)? != Self::MAGIC {
            return Err(Error::ParseAt {
                offset: 0,
                message: "missing ASF1 magic".into(),
            });
        }
        let fine = Dims::new(cur.u32()? as usize, cur.u32()? as usize);
        let seed = Dims::new(cur.u32()? as usize, cur.u32()? as usize);
        if seed != fine.halved() {
            return Err(Error::ParseAt {
                offset: 12,
                message: format!("seed dims {seed} do not halve fine dims {fine}"),
            });
        }
        let u = fine.len();
        let mut counts = vec![0u8; u];
        let mut seeds = vec![0u32; u * MAX_CANDIDATES];
        let mut weights = vec![0.0; u * MAX_CANDIDATES];
        for i in 0..u {
            let at = cur.pos;
            let n = cur.take(1)?[0];
            if n as usize > MAX_CANDIDATES {
                return Err(Error::ParseAt {
                    offset: at,
                    message: format!("candidate count {n} exceeds {MAX_CANDIDATES}"),
                });
            }
            counts[i] = n;
            for slot in 0..n as usize {
                seeds[i * MAX_CANDIDATES + slot] = cur.u32()?;
                weights[i * MAX_CANDIDATES + slot] = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::ParseAt {
                offset: cur.pos,
                message: "trailing bytes after assignment field".into(),
            });
        }
        let field = Self {
            fine,
            seed,
            counts,
            seeds,
            weights,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::ParseAt {
                offset: self.pos,
                message: "truncated assignment field".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Projected features ready for similarity evaluation. For cosine mode the
/// vectors are divided by their ε-guarded norms.
pub(crate) struct Embedded {
    pub k: usize,
    pub fine: Vec<f64>,
    pub seeds: Vec<f64>,
    /// ε-guarded norms of the raw projections (cosine mode only).
    pub fine_norms: Vec<f64>,
    pub seed_norms: Vec<f64>,
}

fn check_shapes(fine: &FeatureMap, seeds: &SeedGrid, proj: &ProjectionPair) -> Result<()> {
    if proj.fine.rows() != proj.seed.rows() {
        return Err(invalid!("projection row counts differ"));
    }
    if fine.channels() != proj.fine.cols() {
        return Err(invalid!(
            "fine map has {} channels, projection expects {}",
            fine.channels(),
            proj.fine.cols()
        ));
    }
    if seeds.features().channels() != proj.seed.cols() {
        return Err(invalid!(
            "seed map has {} channels, projection expects {}",
            seeds.features().channels(),
            proj.seed.cols()
        ));
    }
    if seeds.dims() != fine.dims().halved() {
        return Err(invalid!(
            "seed grid {} does not match fine grid {} (expected {})",
            seeds.dims(),
            fine.dims(),
            fine.dims().halved()
        ));
    }
    Ok(())
}

fn embed_rows(map: &FeatureMap, w: &Matrix, config: &ClusteringConfig) -> (Vec<f64>, Vec<f64>) {
    let k = w.rows();
    let n = map.dims().len();
    let mut out = vec![0.0; n * k];
    let mut norms = Vec::new();
    out.par_chunks_mut(k)
        .with_min_len(MIN_PAR_PIXELS)
        .enumerate()
        .for_each(|(i, dst)| w.mul_vec_into(map.pixel(i), dst));
    if config.similarity == Similarity::Cosine {
        norms = out
            .par_chunks_mut(k)
            .with_min_len(MIN_PAR_PIXELS)
            .map(|v| {
                let nrm = dot(v, v).sqrt().max(config.epsilon_norm);
                v.iter_mut().for_each(|x| *x /= nrm);
                nrm
            })
            .collect();
    }
    (out, norms)
}

pub(crate) fn embed(
    fine: &FeatureMap,
    seeds: &SeedGrid,
    proj: &ProjectionPair,
    config: &ClusteringConfig,
) -> Result<Embedded> {
    config.validate()?;
    check_shapes(fine, seeds, proj)?;
    let (f, fine_norms) = embed_rows(fine, &proj.fine, config);
    let (s, seed_norms) = embed_rows(seeds.features(), &proj.seed, config);
    Ok(Embedded {
        k: proj.k_dim(),
        fine: f,
        seeds: s,
        fine_norms,
        seed_norms,
    })
}

impl Embedded {
    #[inline]
    pub fn fine_row(&self, i: usize) -> &[f64] {
        &self.fine[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn seed_row(&self, j: usize) -> &[f64] {
        &self.seeds[j * self.k..(j + 1) * self.k]
    }

    /// Similarity between embedded fine pixel `i` and seed `j`.
    #[inline]
    pub fn sim(&self, i: usize, j: usize, mode: Similarity) -> f64 {
        let a = self.fine_row(i);
        let b = self.seed_row(j);
        match mode {
            Similarity::Cosine => dot(a, b),
            Similarity::NegSqEuclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
        }
    }
}

/// Softmax of `scores / tau` in place.
#[inline]
pub(crate) fn softmax_in_place(scores: &mut [f64], tau: f64) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = ((*s - max) / tau).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

/// Restricted temperature-softmax assignment of fine pixels to nearby seeds.
pub fn soft_assign(
    fine: &FeatureMap,
    seeds: &SeedGrid,
    proj: &ProjectionPair,
    config: &ClusteringConfig,
) -> Result<AssignmentField> {
    let emb = embed(fine, seeds, proj, config)?;
    let mut field = AssignmentField::from_windows(fine.dims(), |_, _, _| {});
    let mode = config.similarity;
    let tau = config.tau;
    let AssignmentField {
        counts,
        seeds: seed_idx,
        weights,
        ..
    } = &mut field;
    weights
        .par_chunks_mut(MAX_CANDIDATES)
        .with_min_len(MIN_PAR_PIXELS)
        .enumerate()
        .for_each(|(i, ws)| {
            let n = counts[i] as usize;
            let ids = &seed_idx[i * MAX_CANDIDATES..i * MAX_CANDIDATES + n];
            let row = &mut ws[..n];
            for (w, &j) in row.iter_mut().zip(ids) {
                *w = emb.sim(i, j as usize, mode);
            }
            softmax_in_place(row, tau);
        });
    Ok(field)
}

/// Moves each pixel's full weight onto its largest candidate.
///
/// Exact ties go to the earliest candidate in window order. The returned
/// label map holds the winning seed's flat index.
pub fn hard_assign(field: &AssignmentField) -> (AssignmentField, LabelMap) {
    let mut hard = field.clone();
    let mut labels = Vec::with_capacity(field.pixel_count());
    for i in 0..field.pixel_count() {
        let ws = hard.weights_of_mut(i);
        let mut best = 0;
        for (slot, &w) in ws.iter().enumerate() {
            if w > ws[best] {
                best = slot;
            }
        }
        ws.fill(0.0);
        ws[best] = 1.0;
        labels.push(field.seeds_of(i)[best]);
    }
    let fine = field.fine_dims();
    let labels = LabelMap::new(fine.height, fine.width, labels).expect("one label per fine pixel");
    (hard, labels)
}

/// Dense `U × V` row-stochastic matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAssignment {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseAssignment {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Temperature softmax over every seed, without the window restriction.
pub fn full_soft_assign(
    fine: &FeatureMap,
    seeds: &SeedGrid,
    proj: &ProjectionPair,
    config: &ClusteringConfig,
) -> Result<DenseAssignment> {
    config.validate()?;
    check_shapes(fine, seeds, proj)?;
    let (u, v) = (fine.dims().len(), seeds.dims().len());
    if u.saturating_mul(v) > DENSE_LIMIT {
        return Err(Error::ResourceLimit(format!(
            "dense assignment {u}x{v} needs {} bytes in f32; limit is {DENSE_LIMIT} entries",
            dense_bytes_f32(fine.dims())
        )));
    }
    let emb = embed(fine, seeds, proj, config)?;
    let mut data = vec![0.0; u * v];
    for (i, row) in data.chunks_mut(v).enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            *w = emb.sim(i, j, config.similarity);
        }
        softmax_in_place(row, config.tau);
    }
    Ok(DenseAssignment { rows: u, cols: v, data })
}

/// Bytes a dense single-precision assignment would need for a fine grid.
pub fn dense_bytes_f32(fine: Dims) -> u128 {
    fine.len() as u128 * fine.halved().len() as u128 * 4
}

/// Bytes of the nine-candidate single-precision weights for a fine grid.
pub fn restricted_bytes_f32(fine: Dims) -> u128 {
    fine.len() as u128 * MAX_CANDIDATES as u128 * 4
}
