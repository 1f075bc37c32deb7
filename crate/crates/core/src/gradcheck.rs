//! Finite-difference verification of every hand-written adjoint, as one report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cluster::{soft_assign, AssignmentField, ClusteringConfig, ProjectionPair, SeedGrid, Similarity};
use crate::decode::decode_once;
use crate::error::{Error, Result};
use crate::grad::{backward_decode, backward_soft_assign, finite_diff_check, FieldGradient};
use crate::grid::{bilinear_upsample, bilinear_upsample_backward, dot, project, project_backward, Dims, FeatureMap, Matrix};
use crate::toy::net::{loss, loss_and_grad, Decoder, ToyNetParams, TOY_K};
use crate::toy::CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub eps: f64,
    pub threshold: f64,
    /// Random instances per small operation; the network loss is checked once per decoder.
    pub instances: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            eps: 1e-6,
            threshold: 1e-5,
            instances: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperationCheck {
    pub operation: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub operations: Vec<OperationCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &OperationCheck> {
        self.operations.iter().filter(|o| !o.passed)
    }
}

struct Tally {
    name: String,
    instances: usize,
    coordinates: usize,
    max: f64,
}

impl Tally {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            coordinates: 0,
            max: 0.0,
        }
    }

    fn record(&mut self, err: f64, coords: usize) {
        self.instances += 1;
        self.coordinates += coords;
        self.max = self.max.max(err);
    }

    fn finish(self, threshold: f64) -> OperationCheck {
        OperationCheck {
            passed: self.max < threshold,
            operation: self.name,
            instances: self.instances,
            coordinates: self.coordinates,
            max_rel_err: self.max,
        }
    }
}

fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite")
}

fn field_weights(f: &AssignmentField) -> Vec<f64> {
    (0..f.pixel_count()).flat_map(|i| f.weights_of(i).to_vec()).collect()
}

fn with_weights(f: &AssignmentField, flat: &[f64]) -> AssignmentField {
    let mut out = f.clone();
    let mut at = 0;
    for i in 0..out.pixel_count() {
        for w in out.weights_of_mut(i) {
            *w = flat[at];
            at += 1;
        }
    }
    out
}

fn check(
    tally: &mut Tally,
    f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    eps: f64,
) -> Result<()> {
    let r = finite_diff_check(f, analytic, point, eps)?;
    tally.record(r.max_rel_err, point.len());
    Ok(())
}

fn check_decode(rng: &mut ChaCha8Rng, eps: f64, coarse_t: &mut Tally, weight_t: &mut Tally) -> Result<()> {
    let field = AssignmentField::from_windows(Dims::new(6, 6), |_, _, out| {
        out.iter_mut().for_each(|w| *w = rng.gen_range(0.05..1.0));
        let s: f64 = out.iter().sum();
        out.iter_mut().for_each(|w| *w /= s);
    });
    let coarse = rand_map(rng, 3, 3, 2);
    let up = rand_map(rng, 6, 6, 2);
    let adj = backward_decode(&field, &coarse, &up)?;
    let obj = |f: &AssignmentField, c: &FeatureMap| dot(decode_once(f, c).expect("shapes fixed").data(), up.data());
    check(
        coarse_t,
        |x| obj(&field, &FeatureMap::from_vec(3, 3, 2, x.to_vec()).expect("finite")),
        adj.d_coarse.data(),
        coarse.data(),
        eps,
    )?;
    check(
        weight_t,
        |x| obj(&with_weights(&field, x), &coarse),
        &adj.d_weights.flatten(),
        &field_weights(&field),
        eps,
    )
}

fn check_soft_assign(rng: &mut ChaCha8Rng, cfg: &ClusteringConfig, eps: f64, tallies: &mut [Tally; 4]) -> Result<()> {
    let fine = rand_map(rng, 6, 6, 3);
    let seeds = rand_map(rng, 3, 3, 4);
    let proj = ProjectionPair::new(rand_matrix(rng, 5, 3), rand_matrix(rng, 5, 4))?;
    let field = soft_assign(&fine, &SeedGrid::new(seeds.clone()), &proj, cfg)?;
    let weights = FieldGradient::from_fn(&field, |_, _| rng.gen_range(-1.0..1.0));
    let upstream = weights.clone();
    let adj = backward_soft_assign(&fine, &SeedGrid::new(seeds.clone()), &proj, cfg, &upstream)?;
    let obj = |f: &FeatureMap, s: &FeatureMap, p: &ProjectionPair| -> f64 {
        let out = soft_assign(f, &SeedGrid::new(s.clone()), p, cfg).expect("shapes fixed");
        dot(&field_weights(&out), &weights.flatten())
    };
    let [tf, ts, twf, tws] = tallies;
    check(
        tf,
        |x| obj(&FeatureMap::from_vec(6, 6, 3, x.to_vec()).unwrap(), &seeds, &proj),
        adj.d_fine.data(),
        fine.data(),
        eps,
    )?;
    check(
        ts,
        |x| obj(&fine, &FeatureMap::from_vec(3, 3, 4, x.to_vec()).unwrap(), &proj),
        adj.d_seeds.data(),
        seeds.data(),
        eps,
    )?;
    check(
        twf,
        |x| {
            let p = ProjectionPair::new(Matrix::from_vec(5, 3, x.to_vec()).unwrap(), proj.seed.clone()).unwrap();
            obj(&fine, &seeds, &p)
        },
        adj.d_w_fine.data(),
        proj.fine.data(),
        eps,
    )?;
    check(
        tws,
        |x| {
            let p = ProjectionPair::new(proj.fine.clone(), Matrix::from_vec(5, 4, x.to_vec()).unwrap()).unwrap();
            obj(&fine, &seeds, &p)
        },
        adj.d_w_seed.data(),
        proj.seed.data(),
        eps,
    )
}

fn check_resampling(rng: &mut ChaCha8Rng, eps: f64, bil: &mut Tally, pm: &mut Tally, pw: &mut Tally) -> Result<()> {
    let coarse = rand_map(rng, 3, 4, 2);
    let up = rand_map(rng, 6, 8, 2);
    let d = bilinear_upsample_backward(coarse.dims(), 2, &up)?;
    check(
        bil,
        |x| dot(bilinear_upsample(&FeatureMap::from_vec(3, 4, 2, x.to_vec()).unwrap(), 2).unwrap().data(), up.data()),
        d.data(),
        coarse.data(),
        eps,
    )?;

    let map = rand_map(rng, 4, 4, 3);
    let w = rand_matrix(rng, 2, 3);
    let up = rand_map(rng, 4, 4, 2);
    let (dm, dw) = project_backward(&map, &w, &up)?;
    check(
        pm,
        |x| dot(project(&FeatureMap::from_vec(4, 4, 3, x.to_vec()).unwrap(), &w).unwrap().data(), up.data()),
        dm.data(),
        map.data(),
        eps,
    )?;
    check(
        pw,
        |x| dot(project(&map, &Matrix::from_vec(2, 3, x.to_vec()).unwrap()).unwrap().data(), up.data()),
        dw.data(),
        w.data(),
        eps,
    )
}

/// Cross-entropy of the toy network on a random 8×8 image, against every parameter.
fn check_network(seed: u64, mode: Decoder, eps: f64, tally: &mut Tally) -> Result<()> {
    let params = ToyNetParams::init(seed, CLASSES, TOY_K)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = FeatureMap::from_fn(8, 8, 3, |_, _, _| rng.gen());
    let labels = crate::grid::LabelMap::from_fn(8, 8, |_, _| rng.gen_range(0..CLASSES as u32));
    let (_, grad) = loss_and_grad(&params, &image, &labels, mode)?;
    let mut probe = params.clone();
    check(
        tally,
        |x| {
            probe.load_flat(x).expect("length fixed");
            loss(&probe, &image, &labels, mode).expect("shapes fixed")
        },
        &grad.flatten(),
        &params.flatten(),
        eps,
    )
}

pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.instances == 0 {
        return Err(Error::InvalidConfig("at least one instance per operation is needed".into()));
    }
    if !(config.threshold > 0.0) {
        return Err(Error::InvalidConfig("threshold must be positive".into()));
    }
    let eps = config.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut dc = Tally::new("decode.coarse");
    let mut dw = Tally::new("decode.weights");
    let names = ["fine", "seeds", "w_fine", "w_seed"];
    let mut cos = names.map(|n| Tally::new(format!("soft_assign.cosine.{n}")));
    let mut nse = names.map(|n| Tally::new(format!("soft_assign.nse.{n}")));
    let mut bil = Tally::new("bilinear_upsample");
    let mut pm = Tally::new("project.map");
    let mut pw = Tally::new("project.weights");
    let cos_cfg = ClusteringConfig::default().with_tau(0.07);
    // τ = 1 keeps squared-distance logits in a range where central differences are accurate
    let nse_cfg = ClusteringConfig::default()
        .with_similarity(Similarity::NegSqEuclidean)
        .with_tau(1.0);
    for _ in 0..config.instances {
        check_decode(&mut rng, eps, &mut dc, &mut dw)?;
        check_soft_assign(&mut rng, &cos_cfg, eps, &mut cos)?;
        check_soft_assign(&mut rng, &nse_cfg, eps, &mut nse)?;
        check_resampling(&mut rng, eps, &mut bil, &mut pm, &mut pw)?;
    }
    let mut net_c = Tally::new("toy_fcn.loss.cluster");
    let mut net_b = Tally::new("toy_fcn.loss.bilinear");
    check_network(config.seed, Decoder::Cluster, eps, &mut net_c)?;
    check_network(config.seed, Decoder::Bilinear, eps, &mut net_b)?;

    let operations: Vec<OperationCheck> = [dc, dw]
        .into_iter()
        .chain(cos)
        .chain(nse)
        .chain([bil, pm, pw, net_c, net_b])
        .map(|t| t.finish(config.threshold))
        .collect();
    Ok(GradcheckReport {
        config: *config,
        passed: operations.iter().all(|o| o.passed),
        operations,
    })
}
