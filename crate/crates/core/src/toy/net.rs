//! A five-layer fully convolutional net with clustering at both stride-2 layers.
//!
//! ```text
//! image ─conv1 3×3─▶ x1 (OS1, 16) ─down1 2×2/2─▶ s2 (OS2, 32)
//!       ─conv2 3×3─▶ x2 (OS2, 32) ─down2 2×2/2─▶ s4 (OS4, 64) ─head 1×1─▶ y4
//! ```
//!
//! The trunk is the same for both decoders. Cluster decoding carries `y4` back
//! through `soft_assign(x2, s4)` and then `soft_assign(x1, s2)`; the baseline
//! upsamples `y4` bilinearly by 4.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cluster::{soft_assign, AssignmentField, ClusteringConfig, ProjectionPair, SeedGrid};
use crate::decode::decode_once;
use crate::error::{invalid, Error, Result};
use crate::grad::{backward_decode, backward_soft_assign};
use crate::grid::{bilinear_upsample, bilinear_upsample_backward, FeatureMap, LabelMap, Matrix};

pub const TOY_K: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    Cluster,
    Bilinear,
}

impl Decoder {
    pub const ALL: [Decoder; 2] = [Decoder::Cluster, Decoder::Bilinear];
}

impl fmt::Display for Decoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decoder::Cluster => "cluster",
            Decoder::Bilinear => "bilinear",
        })
    }
}

impl FromStr for Decoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster" => Ok(Decoder::Cluster),
            "bilinear" => Ok(Decoder::Bilinear),
            other => Err(invalid!("unknown decoder {other:?}; expected cluster or bilinear")),
        }
    }
}

/// A square convolution over HWC maps. Weights are laid out `[ky][kx][ci][co]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn zeros(kernel: usize, stride: usize, pad: usize, cin: usize, cout: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cin,
            cout,
            weight: vec![0.0; kernel * kernel * cin * cout],
            bias: vec![0.0; cout],
        }
    }

    fn he(kernel: usize, stride: usize, pad: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut c = Self::zeros(kernel, stride, pad, cin, cout);
        let fan_in = (kernel * kernel * cin) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        c.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        c
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.kernel, self.stride, self.pad, self.cin, self.cout)
    }

    fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Input pixel under tap `(ky, kx)` of output `(oy, ox)`, if inside the map.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize, h: usize, w: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < h && ix < w).then_some(iy * w + ix)
    }

    /// Pre-activation output.
    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels() != self.cin {
            return Err(invalid!("conv expects {} channels, got {}", self.cin, x.channels()));
        }
        let (h, w) = (x.height(), x.width());
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(invalid!("input {} is smaller than the kernel", x.dims()));
        }
        let (oh, ow) = (self.out_len(h), self.out_len(w));
        let (cin, cout, k) = (self.cin, self.cout, self.kernel);
        let mut out = FeatureMap::zeros(oh, ow, cout);
        let xd = x.data();
        for (o_idx, o) in out.data_mut().chunks_mut(cout).enumerate() {
            let (oy, ox) = (o_idx / ow, o_idx % ow);
            o.copy_from_slice(&self.bias);
            for ky in 0..k {
                for kx in 0..k {
                    let Some(p) = self.tap(oy, ox, ky, kx, h, w) else { continue };
                    let xin = &xd[p * cin..(p + 1) * cin];
                    let base = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wr = &self.weight[base + ci * cout..base + (ci + 1) * cout];
                        for (ov, &wv) in o.iter_mut().zip(wr) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        x: &FeatureMap,
        d_out: &FeatureMap,
        grad: &mut Conv,
        want_input: bool,
    ) -> Option<FeatureMap> {
        let (h, w) = (x.height(), x.width());
        let ow = d_out.width();
        let (cin, cout, k) = (self.cin, self.cout, self.kernel);
        let mut d_x = want_input.then(|| FeatureMap::zeros(h, w, cin));
        let xd = x.data();
        for (o_idx, g) in d_out.data().chunks(cout).enumerate() {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (oy, ox) = (o_idx / ow, o_idx % ow);
            for (b, &gv) in grad.bias.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..k {
                for kx in 0..k {
                    let Some(p) = self.tap(oy, ox, ky, kx, h, w) else { continue };
                    let xin = &xd[p * cin..(p + 1) * cin];
                    let base = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let range = base + ci * cout..base + (ci + 1) * cout;
                        if xv != 0.0 {
                            for (gw, &gv) in grad.weight[range.clone()].iter_mut().zip(g) {
                                *gw += xv * gv;
                            }
                        }
                        if let Some(dx) = d_x.as_mut() {
                            dx.data_mut()[p * cin + ci] += crate::grid::dot(&self.weight[range], g);
                        }
                    }
                }
            }
        }
        d_x
    }
}

fn relu(mut m: FeatureMap) -> FeatureMap {
    m.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    m
}

/// Masks `grad` by the positive entries of a ReLU output.
fn relu_backward(out: &FeatureMap, mut grad: FeatureMap) -> FeatureMap {
    for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetParams {
    pub conv1: Conv,
    pub down1: Conv,
    pub conv2: Conv,
    pub down2: Conv,
    pub head: Conv,
    /// Clustering at the first stride-2 layer: K × 16 and K × 32.
    pub proj1: ProjectionPair,
    /// Clustering at the second stride-2 layer: K × 32 and K × 64.
    pub proj2: ProjectionPair,
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
    let mut m = Matrix::zeros(rows, cols);
    m.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
    m
}

impl ToyNetParams {
    pub fn init(seed: u64, classes: usize, k_dim: usize) -> Result<Self> {
        if classes == 0 || k_dim == 0 {
            return Err(Error::InvalidConfig("classes and k_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv::he(3, 1, 1, 3, 16, &mut rng);
        let down1 = Conv::he(2, 2, 0, 16, 32, &mut rng);
        let conv2 = Conv::he(3, 1, 1, 32, 32, &mut rng);
        let down2 = Conv::he(2, 2, 0, 32, 64, &mut rng);
        let head = Conv::he(1, 1, 0, 64, classes, &mut rng);
        let proj1 = ProjectionPair::new(random_matrix(k_dim, 16, &mut rng), random_matrix(k_dim, 32, &mut rng))?;
        let proj2 = ProjectionPair::new(random_matrix(k_dim, 32, &mut rng), random_matrix(k_dim, 64, &mut rng))?;
        Ok(Self {
            conv1,
            down1,
            conv2,
            down2,
            head,
            proj1,
            proj2,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let zero_pair = |p: &ProjectionPair| ProjectionPair {
            fine: Matrix::zeros(p.fine.rows(), p.fine.cols()),
            seed: Matrix::zeros(p.seed.rows(), p.seed.cols()),
        };
        Self {
            conv1: self.conv1.zeros_like(),
            down1: self.down1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            down2: self.down2.zeros_like(),
            head: self.head.zeros_like(),
            proj1: zero_pair(&self.proj1),
            proj2: zero_pair(&self.proj2),
        }
    }

    pub fn classes(&self) -> usize {
        self.head.cout
    }

    pub fn k_dim(&self) -> usize {
        self.proj1.k_dim()
    }

    /// Every parameter tensor with a stable name, in checkpoint order.
    pub fn sections(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("down1.weight", &self.down1.weight),
            ("down1.bias", &self.down1.bias),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
            ("down2.weight", &self.down2.weight),
            ("down2.bias", &self.down2.bias),
            ("head.weight", &self.head.weight),
            ("head.bias", &self.head.bias),
            ("proj1.fine", self.proj1.fine.data()),
            ("proj1.seed", self.proj1.seed.data()),
            ("proj2.fine", self.proj2.fine.data()),
            ("proj2.seed", self.proj2.seed.data()),
        ]
    }

    pub fn sections_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("conv1.weight", &mut self.conv1.weight),
            ("conv1.bias", &mut self.conv1.bias),
            ("down1.weight", &mut self.down1.weight),
            ("down1.bias", &mut self.down1.bias),
            ("conv2.weight", &mut self.conv2.weight),
            ("conv2.bias", &mut self.conv2.bias),
            ("down2.weight", &mut self.down2.weight),
            ("down2.bias", &mut self.down2.bias),
            ("head.weight", &mut self.head.weight),
            ("head.bias", &mut self.head.bias),
            ("proj1.fine", self.proj1.fine.data_mut()),
            ("proj1.seed", self.proj1.seed.data_mut()),
            ("proj2.fine", self.proj2.fine.data_mut()),
            ("proj2.seed", self.proj2.seed.data_mut()),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.sections().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.sections().into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(invalid!("expected {} parameters, got {}", self.param_count(), flat.len()));
        }
        let mut rest = flat;
        for (_, s) in self.sections_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.sections().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ToyNetParams) {
        for ((_, a), (_, b)) in self.sections_mut().into_iter().zip(other.sections()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }
}

/// Trunk activations, all after ReLU except the linear head output `y4`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub x1: FeatureMap,
    pub s2: FeatureMap,
    pub x2: FeatureMap,
    pub s4: FeatureMap,
    pub y4: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub trunk: Trunk,
    /// Fine-first fields `[x1 → s2, x2 → s4]`, present in cluster mode.
    pub fields: Option<[AssignmentField; 2]>,
    /// `y4` decoded to OS2, present in cluster mode.
    pub mid: Option<FeatureMap>,
    pub logits: FeatureMap,
}

pub fn cluster_config(k_dim: usize) -> ClusteringConfig {
    ClusteringConfig {
        k_dim,
        ..ClusteringConfig::default()
    }
}

pub fn trunk(params: &ToyNetParams, image: &FeatureMap) -> Result<Trunk> {
    if image.channels() != 3 {
        return Err(invalid!("the network takes 3-channel images, got {}", image.channels()));
    }
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(invalid!("image dims {} must be positive multiples of 4", image.dims()));
    }
    let x1 = relu(params.conv1.forward(image)?);
    let s2 = relu(params.down1.forward(&x1)?);
    let x2 = relu(params.conv2.forward(&s2)?);
    let s4 = relu(params.down2.forward(&x2)?);
    let y4 = params.head.forward(&s4)?;
    Ok(Trunk { x1, s2, x2, s4, y4 })
}

pub fn forward(params: &ToyNetParams, image: &FeatureMap, mode: Decoder) -> Result<ForwardPass> {
    let trunk = trunk(params, image)?;
    match mode {
        Decoder::Bilinear => {
            let logits = bilinear_upsample(&trunk.y4, 4)?;
            Ok(ForwardPass {
                trunk,
                fields: None,
                mid: None,
                logits,
            })
        }
        Decoder::Cluster => {
            let cfg = cluster_config(params.k_dim());
            let f1 = soft_assign(&trunk.x1, &SeedGrid::new(trunk.s2.clone()), &params.proj1, &cfg)?;
            let f2 = soft_assign(&trunk.x2, &SeedGrid::new(trunk.s4.clone()), &params.proj2, &cfg)?;
            let mid = decode_once(&f2, &trunk.y4)?;
            let logits = decode_once(&f1, &mid)?;
            Ok(ForwardPass {
                trunk,
                fields: Some([f1, f2]),
                mid: Some(mid),
                logits,
            })
        }
    }
}

/// Mean per-pixel softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &FeatureMap, labels: &LabelMap) -> Result<(f64, FeatureMap)> {
    if logits.dims() != labels.dims() {
        return Err(invalid!("logits {} vs labels {}", logits.dims(), labels.dims()));
    }
    let c = logits.channels();
    labels.check_bound(c as u32)?;
    let n = labels.labels().len() as f64;
    let mut grad = FeatureMap::zeros(logits.height(), logits.width(), c);
    let mut loss = 0.0;
    for (i, (&y, g)) in labels.labels().iter().zip(grad.data_mut().chunks_mut(c)).enumerate() {
        let z = logits.pixel(i);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let log_total = total.ln() + m;
        loss += log_total - z[y as usize];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (z[k] - log_total).exp() / n;
        }
        g[y as usize] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Per-pixel argmax of the logits; ties go to the lower class.
pub fn argmax_labels(logits: &FeatureMap) -> LabelMap {
    let c = logits.channels();
    let labels = logits
        .data()
        .chunks(c)
        .map(|z| {
            let mut best = 0;
            for k in 1..c {
                if z[k] > z[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::new(logits.height(), logits.width(), labels).expect("dims match by construction")
}

pub fn predict(params: &ToyNetParams, image: &FeatureMap, mode: Decoder) -> Result<LabelMap> {
    Ok(argmax_labels(&forward(params, image, mode)?.logits))
}

pub fn loss(params: &ToyNetParams, image: &FeatureMap, labels: &LabelMap, mode: Decoder) -> Result<f64> {
    Ok(cross_entropy(&forward(params, image, mode)?.logits, labels)?.0)
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ToyNetParams,
    image: &FeatureMap,
    labels: &LabelMap,
    mode: Decoder,
) -> Result<(f64, ToyNetParams)> {
    let fp = forward(params, image, mode)?;
    let (loss, d_logits) = cross_entropy(&fp.logits, labels)?;
    let t = &fp.trunk;
    let mut g = params.zeros_like();

    // gradients reaching x1, s2, x2 from the clustering branch, and y4 from either decoder
    let (d_y4, mut d_x1, mut d_s2, mut d_x2, mut d_s4) = match (&fp.fields, &fp.mid) {
        (Some([f1, f2]), Some(mid)) => {
            let cfg = cluster_config(params.k_dim());
            let top = backward_decode(f1, mid, &d_logits)?;
            let low = backward_decode(f2, &t.y4, &top.d_coarse)?;
            let a1 = backward_soft_assign(&t.x1, &SeedGrid::new(t.s2.clone()), &params.proj1, &cfg, &top.d_weights)?;
            let a2 = backward_soft_assign(&t.x2, &SeedGrid::new(t.s4.clone()), &params.proj2, &cfg, &low.d_weights)?;
            g.proj1 = ProjectionPair {
                fine: a1.d_w_fine,
                seed: a1.d_w_seed,
            };
            g.proj2 = ProjectionPair {
                fine: a2.d_w_fine,
                seed: a2.d_w_seed,
            };
            (low.d_coarse, a1.d_fine, a1.d_seeds, a2.d_fine, a2.d_seeds)
        }
        _ => {
            let d_y4 = bilinear_upsample_backward(t.y4.dims(), 4, &d_logits)?;
            let z = |m: &FeatureMap| FeatureMap::zeros(m.height(), m.width(), m.channels());
            (d_y4, z(&t.x1), z(&t.s2), z(&t.x2), z(&t.s4))
        }
    };

    let from_head = params.head.backward(&t.s4, &d_y4, &mut g.head, true).expect("input grad");
    d_s4.axpy(1.0, &from_head)?;
    let d_pre = relu_backward(&t.s4, d_s4);
    d_x2.axpy(1.0, &params.down2.backward(&t.x2, &d_pre, &mut g.down2, true).expect("input grad"))?;
    let d_pre = relu_backward(&t.x2, d_x2);
    d_s2.axpy(1.0, &params.conv2.backward(&t.s2, &d_pre, &mut g.conv2, true).expect("input grad"))?;
    let d_pre = relu_backward(&t.s2, d_s2);
    d_x1.axpy(1.0, &params.down1.backward(&t.x1, &d_pre, &mut g.down1, true).expect("input grad"))?;
    let d_pre = relu_backward(&t.x1, d_x1);
    params.conv1.backward(image, &d_pre, &mut g.conv1, false);
    Ok((loss, g))
}
