//! Wall-clock comparison of sparse cluster decoding, bilinear upsampling and
//! a dense-matrix decode on synthetic assignment fields.

use std::time::Instant;

use hierspx::cluster::DENSE_LIMIT;
use hierspx::decode::decode_once_counted;
use hierspx::{bilinear_upsample, decode_hierarchy, AssignmentField, DecodePlan, Dims, Error, FeatureMap, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const DEFAULT_CHANNELS: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub trials: usize,
    pub channels: usize,
    /// Also time the parallel sparse path on this many threads (0 = all cores).
    pub threads: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 1024,
            width: 2048,
            levels: 2,
            trials: 100,
            channels: DEFAULT_CHANNELS,
            threads: None,
            seed: 42,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.levels == 0 || self.levels > 16 {
            return Err(Error::InvalidConfig(format!("levels must lie in 1..=16, got {}", self.levels)));
        }
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be positive".into()));
        }
        let block = 1usize << self.levels;
        if self.height == 0 || self.width == 0 || self.height % block != 0 || self.width % block != 0 {
            return Err(Error::InvalidConfig(format!(
                "{}x{} is not divisible by 2^{} = {block}",
                self.height, self.width, self.levels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelStats {
    pub kernel: String,
    pub threads: usize,
    pub trials: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub min_s: f64,
    pub checksum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedKernel {
    pub kernel: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub kernels: Vec<KernelStats>,
    pub skipped: Vec<SkippedKernel>,
    /// Multiply-adds counted by the instrumented decode.
    pub sparse_ops: u64,
    /// Fine pixels over all levels × their candidates × channels.
    pub expected_ops: u64,
    /// Largest elementwise gap between sparse and dense outputs, when dense ran.
    pub dense_max_abs_diff: Option<f64>,
}

impl BenchReport {
    pub fn kernel(&self, name: &str) -> Option<&KernelStats> {
        self.kernels.iter().find(|k| k.kernel == name)
    }
}

/// Summary statistics in seconds; `samples` must be nonempty.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    (mean, median, s[0])
}

fn checksum(map: &FeatureMap) -> f64 {
    map.data().iter().enumerate().map(|(i, v)| v * (1.0 + (i % 7) as f64)).sum()
}

/// Random row-stochastic fields, coarsest first, for an image of `fine` dims.
pub fn synth_fields(rng: &mut impl Rng, fine: Dims, levels: usize) -> Vec<AssignmentField> {
    let mut fields = Vec::with_capacity(levels);
    let mut dims = fine;
    for _ in 0..levels {
        fields.push(AssignmentField::from_windows(dims, |_, _, out| {
            out.iter_mut().for_each(|w| *w = rng.gen_range(0.01..1.0));
            let s: f64 = out.iter().sum();
            out.iter_mut().for_each(|w| *w /= s);
        }));
        dims = dims.halved();
    }
    fields.reverse();
    fields
}

fn time<T>(trials: usize, mut f: impl FnMut() -> Result<T>) -> Result<(Vec<f64>, T)> {
    let mut last = f()?; // warm-up, not recorded
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        last = f()?;
        samples.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    Ok((samples, last))
}

fn stats(kernel: &str, threads: usize, samples: &[f64], out: &FeatureMap) -> KernelStats {
    let (mean_s, median_s, min_s) = summarize(samples);
    KernelStats {
        kernel: kernel.into(),
        threads,
        trials: samples.len(),
        mean_s,
        median_s,
        min_s,
        checksum: checksum(out),
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::ResourceLimit(format!("cannot start thread pool: {e}")))
}

/// Dense matrices for every level, or the reason they are too large.
fn dense_levels(fields: &[AssignmentField]) -> std::result::Result<Vec<Vec<f64>>, String> {
    fields
        .iter()
        .map(|f| {
            let cells = f.pixel_count() as u128 * f.seed_dims().len() as u128;
            if cells > DENSE_LIMIT as u128 {
                Err(format!(
                    "a {}x{} assignment matrix exceeds the {DENSE_LIMIT}-entry limit",
                    f.pixel_count(),
                    f.seed_dims().len()
                ))
            } else {
                f.to_dense().map_err(|e| e.to_string())
            }
        })
        .collect()
}

fn dense_decode(fields: &[AssignmentField], mats: &[Vec<f64>], coarse: &FeatureMap) -> Result<FeatureMap> {
    let c = coarse.channels();
    let mut cur = coarse.clone();
    for (f, m) in fields.iter().zip(mats) {
        let (u, v) = (f.pixel_count(), f.seed_dims().len());
        let fine = f.fine_dims();
        let mut out = FeatureMap::zeros(fine.height, fine.width, c);
        for i in 0..u {
            let row = &m[i * v..(i + 1) * v];
            let dst = out.pixel_mut(i);
            for (j, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    for (d, s) in dst.iter_mut().zip(cur.pixel(j)) {
                        *d += w * s;
                    }
                }
            }
        }
        cur = out;
    }
    Ok(cur)
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fine = Dims::new(config.height, config.width);
    let fields = synth_fields(&mut rng, fine, config.levels);
    let coarse_dims = fields[0].seed_dims();
    let coarse = FeatureMap::from_fn(coarse_dims.height, coarse_dims.width, config.channels, |_, _, _| {
        rng.gen_range(-1.0..1.0)
    });
    let plan = DecodePlan::new(fields, 1)?;
    let fields = plan.fields();
    let trials = config.trials;

    let serial = pool(1)?;
    let (samples, sparse_out) = serial.install(|| time(trials, || decode_hierarchy(&plan, &coarse)))?;
    let mut kernels = vec![stats("sparse", 1, &samples, &sparse_out)];
    let (samples, bil_out) = serial.install(|| time(trials, || bilinear_upsample(&coarse, 1 << config.levels)))?;
    kernels.push(stats("bilinear", 1, &samples, &bil_out));

    if let Some(threads) = config.threads {
        let par = pool(threads)?;
        let n = par.current_num_threads();
        let (samples, out) = par.install(|| time(trials, || decode_hierarchy(&plan, &coarse)))?;
        kernels.push(stats("sparse_parallel", n, &samples, &out));
    }

    let mut skipped = Vec::new();
    let mut dense_max_abs_diff = None;
    match dense_levels(fields) {
        Ok(mats) => {
            let (samples, out) = time(trials, || dense_decode(fields, &mats, &coarse))?;
            dense_max_abs_diff = Some(out.max_abs_diff(&sparse_out));
            kernels.push(stats("dense", 1, &samples, &out));
        }
        Err(reason) => skipped.push(SkippedKernel {
            kernel: "dense".into(),
            reason,
        }),
    }

    let mut cur = coarse.clone();
    let mut sparse_ops = 0;
    let mut expected_ops = 0;
    for f in fields {
        let (next, ops) = decode_once_counted(f, &cur)?;
        sparse_ops += ops;
        expected_ops += (f.total_candidates() * config.channels) as u64;
        cur = next;
    }

    Ok(BenchReport {
        config: *config,
        kernels,
        skipped,
        sparse_ops,
        expected_ops,
        dense_max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(trials: usize) -> BenchConfig {
        BenchConfig {
            height: 16,
            width: 24,
            levels: 2,
            trials,
            channels: 3,
            threads: None,
            seed: 1,
        }
    }

    #[test]
    fn single_trial_statistics_coincide() {
        let r = run_bench(&small(1)).unwrap();
        for k in &r.kernels {
            assert_eq!(k.trials, 1);
            assert_eq!(k.mean_s, k.median_s);
            assert_eq!(k.median_s, k.min_s);
            assert!(k.min_s > 0.0);
        }
    }

    #[test]
    fn dense_agrees_with_sparse() {
        let r = run_bench(&small(3)).unwrap();
        assert!(r.skipped.is_empty());
        assert!(r.dense_max_abs_diff.unwrap() < 1e-12);
        let sparse = r.kernel("sparse").unwrap().checksum;
        let dense = r.kernel("dense").unwrap().checksum;
        assert!((sparse - dense).abs() < 1e-9);
    }

    #[test]
    fn counted_ops_match_candidate_total() {
        let r = run_bench(&small(1)).unwrap();
        assert_eq!(r.sparse_ops, r.expected_ops);
        assert!(r.sparse_ops <= ((16 * 24 + 8 * 12) * 9 * 3) as u64);
    }

    #[test]
    fn oversized_dense_is_skipped() {
        let cfg = BenchConfig {
            height: 256,
            width: 256,
            levels: 1,
            trials: 1,
            channels: 1,
            ..small(1)
        };
        let r = run_bench(&cfg).unwrap();
        assert_eq!(r.skipped.len(), 1);
        assert!(r.kernel("dense").is_none());
        assert!(r.dense_max_abs_diff.is_none());
    }

    #[test]
    fn parallel_path_is_reported() {
        let cfg = BenchConfig {
            threads: Some(2),
            ..small(2)
        };
        let r = run_bench(&cfg).unwrap();
        let par = r.kernel("sparse_parallel").unwrap();
        assert_eq!(par.threads, 2);
        assert_eq!(par.checksum, r.kernel("sparse").unwrap().checksum);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(run_bench(&BenchConfig { trials: 0, ..small(1) }).is_err());
        assert!(run_bench(&BenchConfig { height: 18, ..small(1) }).is_err());
        assert!(run_bench(&BenchConfig { levels: 0, ..small(1) }).is_err());
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(summarize(&[3.0, 1.0, 2.0]), (2.0, 2.0, 1.0));
        assert_eq!(summarize(&[4.0, 1.0, 2.0, 3.0]), (2.5, 2.5, 1.0));
    }
}
