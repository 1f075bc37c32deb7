//! Dense grid containers and the resolution-changing primitives.
//!
//! Everything is stored row-major in `(h, w, c)` order so a pixel's feature
//! vector is a contiguous slice.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Spatial extent of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dimensions after one 2× reduction with ceiling division.
    pub const fn halved(&self) -> Self {
        Self {
            height: self.height.div_ceil(2),
            width: self.width.div_ceil(2),
        }
    }

    #[inline]
    pub const fn index(&self, h: usize, w: usize) -> usize {
        h * self.width + w
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.width, idx % self.width)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Dense `H × W × C` grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dims: Dims,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            dims: Dims::new(height, width),
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            dims: Dims::new(height, width),
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(invalid!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                coordinate: pos,
                message: "feature map value is not finite".into(),
            });
        }
        Ok(Self {
            dims: Dims::new(height, width),
            channels,
            data,
        })
    }

    /// Builds a map by evaluating `f(h, w, c)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for h in 0..height {
            for w in 0..width {
                for c in 0..channels {
                    data.push(f(h, w, c));
                }
            }
        }
        Self {
            dims: Dims::new(height, width),
            channels,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.dims.width + w) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, c: usize, v: f64) {
        self.data[(h * self.dims.width + w) * self.channels + c] = v;
    }

    /// Feature vector of the pixel at flat index `idx`.
    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &FeatureMap) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> FeatureMap {
        FeatureMap {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.dims != other.dims || self.channels != other.channels {
            return Err(invalid!(
                "shape mismatch: {}x{} vs {}x{}",
                self.dims,
                self.channels,
                other.dims,
                other.channels
            ));
        }
        Ok(())
    }
}

/// Dense `H × W` grid of non-negative integer labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(invalid!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            ));
        }
        Ok(Self {
            dims: Dims::new(height, width),
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            dims: Dims::new(height, width),
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for h in 0..height {
            for w in 0..width {
                labels.push(f(h, w));
            }
        }
        Self {
            dims: Dims::new(height, width),
            labels,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize) -> u32 {
        self.labels[h * self.dims.width + w]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, v: u32) {
        self.labels[h * self.dims.width + w] = v;
    }

    /// One past the largest label, i.e. the smallest valid declared label count.
    pub fn label_bound(&self) -> u32 {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn distinct_count(&self) -> usize {
        let mut seen: Vec<u32> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Fails if any label is `>= count`.
    pub fn check_bound(&self, count: u32) -> Result<()> {
        match self.labels.iter().position(|&l| l >= count) {
            Some(i) => Err(invalid!(
                "label {} at pixel {i} exceeds declared count {count}",
                self.labels[i]
            )),
            None => Ok(()),
        }
    }

    /// True where any 4-neighbour carries a different label.
    pub fn boundary_mask(&self) -> Vec<bool> {
        let Dims { height, width } = self.dims;
        let mut mask = vec![false; height * width];
        for h in 0..height {
            for w in 0..width {
                let l = self.get(h, w);
                mask[h * width + w] = (h > 0 && self.get(h - 1, w) != l)
                    || (h + 1 < height && self.get(h + 1, w) != l)
                    || (w > 0 && self.get(h, w - 1) != l)
                    || (w + 1 < width && self.get(h, w + 1) != l);
            }
        }
        mask
    }
}

/// Row-major `rows × cols` real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · v`.
    #[inline]
    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How a 2×2 block is reduced to a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Downsample {
    /// Mean of the covered block.
    #[default]
    AvgPool,
    /// Top-left pixel of the block.
    Strided,
}

impl Downsample {
    pub fn apply(self, map: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Downsample::AvgPool => avg_pool2(map),
            Downsample::Strided => subsample2(map),
        }
    }
}

fn check_poolable(map: &FeatureMap) -> Result<()> {
    if map.height() < 2 || map.width() < 2 {
        return Err(invalid!(
            "cannot downsample a {} map; both sides must be at least 2",
            map.dims()
        ));
    }
    Ok(())
}

/// 2×2 average pooling with ceiling division; border blocks shrink on odd sides.
pub fn avg_pool2(map: &FeatureMap) -> Result<FeatureMap> {
    check_poolable(map)?;
    let out_dims = map.dims().halved();
    let c = map.channels();
    let mut out = FeatureMap::zeros(out_dims.height, out_dims.width, c);
    for oh in 0..out_dims.height {
        let h_end = (2 * oh + 2).min(map.height());
        for ow in 0..out_dims.width {
            let w_end = (2 * ow + 2).min(map.width());
            let count = ((h_end - 2 * oh) * (w_end - 2 * ow)) as f64;
            let dst = out.pixel_mut(out_dims.index(oh, ow));
            for h in 2 * oh..h_end {
                for w in 2 * ow..w_end {
                    let src = map.pixel(map.dims().index(h, w));
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d /= count;
            }
        }
    }
    Ok(out)
}

/// Strided 2×2 subsample keeping the top-left pixel of each block.
pub fn subsample2(map: &FeatureMap) -> Result<FeatureMap> {
    check_poolable(map)?;
    let out_dims = map.dims().halved();
    let c = map.channels();
    let mut out = FeatureMap::zeros(out_dims.height, out_dims.width, c);
    for oh in 0..out_dims.height {
        for ow in 0..out_dims.width {
            let src = map.pixel(map.dims().index(2 * oh, 2 * ow));
            out.pixel_mut(out_dims.index(oh, ow)).copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Source taps for one output coordinate under the half-pixel convention.
#[inline]
fn bilinear_taps(out_idx: usize, factor: usize, in_len: usize) -> (usize, usize, f64) {
    let src = ((out_idx as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = src - i0 as f64;
    (i0, i1, frac)
}

/// Bilinear upsampling by an integer factor, align-corners = false.
pub fn bilinear_upsample(map: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(invalid!("upsampling factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let (ih, iw, c) = (map.height(), map.width(), map.channels());
    let (oh, ow) = (ih * factor, iw * factor);
    let mut out = FeatureMap::zeros(oh, ow, c);
    let col_taps: Vec<_> = (0..ow).map(|x| bilinear_taps(x, factor, iw)).collect();
    for y in 0..oh {
        let (y0, y1, fy) = bilinear_taps(y, factor, ih);
        for (x, &(x0, x1, fx)) in col_taps.iter().enumerate() {
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let p00 = map.pixel(y0 * iw + x0);
            let p01 = map.pixel(y0 * iw + x1);
            let p10 = map.pixel(y1 * iw + x0);
            let p11 = map.pixel(y1 * iw + x1);
            let dst = out.pixel_mut(y * ow + x);
            for k in 0..c {
                dst[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`]: scatters the fine gradient back onto the coarse grid.
pub fn bilinear_upsample_backward(
    coarse_dims: Dims,
    factor: usize,
    upstream: &FeatureMap,
) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(invalid!("upsampling factor must be at least 1"));
    }
    let (ih, iw) = (coarse_dims.height, coarse_dims.width);
    if upstream.height() != ih * factor || upstream.width() != iw * factor {
        return Err(invalid!(
            "upstream gradient {} does not match {} upsampled by {factor}",
            upstream.dims(),
            coarse_dims
        ));
    }
    if factor == 1 {
        return Ok(upstream.clone());
    }
    let c = upstream.channels();
    let ow = iw * factor;
    let mut grad = FeatureMap::zeros(ih, iw, c);
    let col_taps: Vec<_> = (0..ow).map(|x| bilinear_taps(x, factor, iw)).collect();
    for y in 0..ih * factor {
        let (y0, y1, fy) = bilinear_taps(y, factor, ih);
        for (x, &(x0, x1, fx)) in col_taps.iter().enumerate() {
            let g = upstream.pixel(y * ow + x).to_vec();
            let taps = [
                (y0 * iw + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * iw + x1, (1.0 - fy) * fx),
                (y1 * iw + x0, fy * (1.0 - fx)),
                (y1 * iw + x1, fy * fx),
            ];
            for (idx, wt) in taps {
                for (d, gv) in grad.pixel_mut(idx).iter_mut().zip(&g) {
                    *d += wt * gv;
                }
            }
        }
    }
    Ok(grad)
}

/// Applies `weights` (K × C) to every pixel's feature vector.
pub fn project(map: &FeatureMap, weights: &Matrix) -> Result<FeatureMap> {
    if weights.cols() != map.channels() {
        return Err(invalid!(
            "projection has {} columns but the map has {} channels",
            weights.cols(),
            map.channels()
        ));
    }
    let k = weights.rows();
    let mut out = FeatureMap::zeros(map.height(), map.width(), k);
    for i in 0..map.dims().len() {
        weights.mul_vec_into(map.pixel(i), out.pixel_mut(i));
    }
    Ok(out)
}

/// Adjoint of [`project`]: returns `(d map, d weights)`.
pub fn project_backward(
    map: &FeatureMap,
    weights: &Matrix,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, Matrix)> {
    if upstream.dims() != map.dims() || upstream.channels() != weights.rows() {
        return Err(invalid!("upstream gradient does not match projection output"));
    }
    if weights.cols() != map.channels() {
        return Err(invalid!("projection columns do not match map channels"));
    }
    let (k, n) = (weights.rows(), weights.cols());
    let mut d_map = FeatureMap::zeros(map.height(), map.width(), n);
    let mut d_w = Matrix::zeros(k, n);
    for i in 0..map.dims().len() {
        let x = map.pixel(i);
        let g = upstream.pixel(i);
        let dx = d_map.pixel_mut(i);
        for r in 0..k {
            let gr = g[r];
            if gr == 0.0 {
                continue;
            }
            let w_row = weights.row(r);
            let dw_row = &mut d_w.data[r * n..(r + 1) * n];
            for j in 0..n {
                dx[j] += w_row[j] * gr;
                dw_row[j] += gr * x[j];
            }
        }
    }
    Ok((d_map, d_w))
}
