//! Annealed Langevin dynamics: unconditional generation and guided
//! densification of sparse sweeps.
//!
//! Every batch element owns a ChaCha8 stream (`seed`, stream = element
//! index), so a trajectory does not depend on batch composition, chunking,
//! or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ProjectionConfig, RangeImage};
use crate::ingest::PixelMask;
use crate::model::ScoreModel;
use crate::tensor::Tensor;
use crate::training::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerVariant {
    /// Drift `gamma * sigma_i^2 / (2 sigma_L^2)`, noise `gamma * sigma_i / sigma_L`.
    AsPrinted,
    /// Step `alpha_i = gamma * sigma_i^2 / sigma_L^2`; drift `alpha_i / 2`,
    /// noise `sqrt(alpha_i)`.
    NcsnStandard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub steps_per_level: usize,
    pub seed: u64,
    pub variant: SamplerVariant,
    /// Clamp the final sample into `[0, 1]`.
    pub clamp_output: bool,
    /// Items per network call; `0` means the whole batch at once.
    pub chunk_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            step_size: 2e-6,
            steps_per_level: 5,
            seed: 0,
            variant: SamplerVariant::AsPrinted,
            clamp_output: true,
            chunk_size: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.steps_per_level == 0 {
            return Err(Error::InvalidConfig("steps_per_level must be >= 1".into()));
        }
        Ok(())
    }

    /// `(drift, noise)` coefficients at level `i`.
    pub fn coefficients(&self, schedule: &NoiseSchedule, i: usize) -> (f64, f64) {
        step_coefficients(
            self.variant,
            self.step_size,
            schedule.sigma(i),
            schedule.last(),
        )
    }
}

pub fn step_coefficients(
    variant: SamplerVariant,
    gamma: f64,
    sigma: f64,
    sigma_last: f64,
) -> (f64, f64) {
    let ratio = sigma / sigma_last;
    match variant {
        SamplerVariant::AsPrinted => (gamma * ratio * ratio / 2.0, gamma * ratio),
        SamplerVariant::NcsnStandard => {
            let alpha = gamma * ratio * ratio;
            (alpha / 2.0, alpha.sqrt())
        }
    }
}

/// Per-element random streams.
pub fn element_rngs(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|e| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(e as u64);
            r
        })
        .collect()
}

/// Langevin update `x + drift * s + noise_scale * z` with `z` drawn from
/// `rngs` (one per batch element).
pub fn langevin_step<M: ScoreModel + ?Sized>(
    x: &Tensor,
    net: &M,
    schedule: &NoiseSchedule,
    i: usize,
    cfg: &SamplerConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor> {
    let levels = vec![schedule.level(i); x.batch()];
    let s = net.score(x, &levels)?;
    let (drift, noise) = cfg.coefficients(schedule, i);
    let mut out = x.clone();
    for (e, rng) in rngs.iter_mut().enumerate().take(x.batch()) {
        for (v, sv) in out.sample_mut(e).iter_mut().zip(s.sample(e)) {
            let z: f64 = rng.sample(StandardNormal);
            *v += drift * sv + noise * z;
        }
    }
    check_finite(&out, i, 0)?;
    Ok(out)
}

fn check_finite(x: &Tensor, level: usize, step: usize) -> Result<()> {
    if let Some(pos) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            level,
            step,
            detail: format!("non-finite value at flat index {pos}"),
        });
    }
    Ok(())
}

/// Guidance toward an observation for one batch element.
#[derive(Debug, Clone)]
struct Guidance<'a> {
    y: &'a [f64],
    /// Per element of the sample (already broadcast over channels).
    m: Vec<bool>,
    lambda: f64,
    per_level_scaling: bool,
}

fn initial_state(shape: [usize; 4], sigma0: f64, rngs: &mut [ChaCha8Rng]) -> Tensor {
    let mut x = Tensor::zeros(shape);
    for (e, rng) in rngs.iter_mut().enumerate() {
        for v in x.sample_mut(e) {
            let u: f64 = rng.gen();
            let z: f64 = rng.sample(StandardNormal);
            *v = u + sigma0 * z;
        }
    }
    x
}

/// Runs the full annealed chain on `x` in place. Items with guidance use
/// the semi-implicit update
/// `x' = (x + c s + c l m y + eta z) / (1 + c l m)`, which is the explicit
/// update for `m = 0` and stays stable for any `c l`.
fn anneal<M: ScoreModel + ?Sized>(
    net: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    x: &mut Tensor,
    rngs: &mut [ChaCha8Rng],
    guidance: &[Option<Guidance<'_>>],
    evals: &mut usize,
) -> Result<()> {
    let n = x.batch();
    let chunk = if cfg.chunk_size == 0 {
        n
    } else {
        cfg.chunk_size
    };
    let sigma_last = schedule.last();
    for i in 0..schedule.len() {
        let (drift, noise) = cfg.coefficients(schedule, i);
        let sigma = schedule.sigma(i);
        for t in 0..cfg.steps_per_level {
            let mut start = 0;
            while start < n {
                let end = (start + chunk).min(n);
                let idx: Vec<usize> = (start..end).collect();
                let xb = x.select(&idx);
                let levels = vec![schedule.level(i); idx.len()];
                let s = net.score(&xb, &levels)?;
                *evals += 1;
                for (k, &e) in idx.iter().enumerate() {
                    let rng = &mut rngs[e];
                    let sv = s.sample(k);
                    let g = guidance[e].as_ref();
                    let lambda = g.map_or(0.0, |g| {
                        if g.per_level_scaling {
                            g.lambda * (sigma_last / sigma).powi(2)
                        } else {
                            g.lambda
                        }
                    });
                    let item = x.sample_mut(e);
                    for (p, v) in item.iter_mut().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        let free = *v + drift * sv[p] + noise * z;
                        *v = match g {
                            Some(g) if g.m[p] => {
                                let k = drift * lambda;
                                (free + k * g.y[p]) / (1.0 + k)
                            }
                            _ => free,
                        };
                    }
                }
                start = end;
            }
            check_finite(x, i, t)?;
        }
    }
    if cfg.clamp_output {
        x.clamp(0.0, 1.0);
    }
    Ok(())
}

/// Output of a sampling run.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub samples: Tensor,
    /// Number of network calls made.
    pub evaluations: usize,
}

/// Draws `n` unconditional samples of per-item shape `[c, h, w]`.
pub fn sample_tensor<M: ScoreModel + ?Sized>(
    net: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
    item_shape: [usize; 3],
) -> Result<SampleOutput> {
    cfg.validate()?;
    let shape = [n, item_shape[0], item_shape[1], item_shape[2]];
    let mut rngs = element_rngs(cfg.seed, n);
    let mut x = initial_state(shape, schedule.first(), &mut rngs);
    let guidance = vec![None; n];
    let mut evaluations = 0;
    anneal(
        net,
        schedule,
        cfg,
        &mut x,
        &mut rngs,
        &guidance,
        &mut evaluations,
    )?;
    Ok(SampleOutput {
        samples: x,
        evaluations,
    })
}

/// Draws `n` range images.
pub fn sample<M: ScoreModel + ?Sized>(
    net: &M,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
    projection: &ProjectionConfig,
) -> Result<Vec<RangeImage>> {
    let out = sample_tensor(
        net,
        schedule,
        cfg,
        n,
        [2, projection.height, projection.width],
    )?;
    RangeImage::batch_from_tensor(projection, &out.samples)
}

/// A sparse observation to densify.
#[derive(Debug, Clone)]
pub struct DensifyTask {
    /// `[1, 2, H, W]` observation (depth, intensity channels).
    pub observation: Tensor,
    /// True where the observation carries a return to honor.
    pub mask: PixelMask,
    pub lambda: f64,
    /// Multiply `lambda` by `sigma_L^2 / sigma_i^2` at level `i`.
    pub per_level_scaling: bool,
}

impl DensifyTask {
    pub fn new(observation: &RangeImage, mask: PixelMask, lambda: f64) -> Self {
        DensifyTask {
            observation: observation.to_tensor(),
            mask,
            lambda,
            per_level_scaling: false,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let [n, c, h, w] = self.observation.shape();
        if n != 1 || c != 2 || h != height || w != width {
            return Err(Error::ShapeMismatch {
                expected: format!("[1, 2, {height}, {width}]"),
                got: format!("{:?}", self.observation.shape()),
            });
        }
        if self.mask.height != height || self.mask.width != width || self.mask.data.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width} mask"),
                got: format!("{}x{}", self.mask.height, self.mask.width),
            });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    fn guidance(&self) -> Guidance<'_> {
        let plane = self.mask.data.len();
        Guidance {
            y: self.observation.data(),
            m: (0..2 * plane).map(|p| self.mask.data[p % plane]).collect(),
            lambda: self.lambda,
            per_level_scaling: self.per_level_scaling,
        }
    }
}

/// Densifies several observations at once; element `e` uses random stream
/// `e`, exactly as unconditional sampling does.
pub fn densify_batch<M: ScoreModel + ?Sized>(
    net: &M,
    tasks: &[DensifyTask],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let Some(first) = tasks.first() else {
        return Err(Error::InvalidConfig("no densification tasks".into()));
    };
    let [_, _, h, w] = first.observation.shape();
    for t in tasks {
        t.validate(h, w)?;
    }
    let n = tasks.len();
    let mut rngs = element_rngs(cfg.seed, n);
    let mut x = initial_state([n, 2, h, w], schedule.first(), &mut rngs);
    let guidance: Vec<Option<Guidance<'_>>> = tasks.iter().map(|t| Some(t.guidance())).collect();
    let mut evaluations = 0;
    anneal(
        net,
        schedule,
        cfg,
        &mut x,
        &mut rngs,
        &guidance,
        &mut evaluations,
    )?;
    Ok(x)
}

pub fn densify<M: ScoreModel + ?Sized>(
    net: &M,
    task: &DensifyTask,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    projection: &ProjectionConfig,
) -> Result<RangeImage> {
    let x = densify_batch(net, std::slice::from_ref(task), schedule, cfg)?;
    Ok(RangeImage::batch_from_tensor(projection, &x)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseLevel;
    use crate::toy::{GaussianScore, ZeroScore};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::geometric(1.0, 0.01, 6).unwrap()
    }

    #[test]
    fn zero_net_without_noise_is_identity() {
        let x = Tensor::filled([2, 1, 2, 2], 0.3);
        let cfg = SamplerConfig::default();
        let (drift, _) = cfg.coefficients(&schedule(), 2);
        let s = ZeroScore.score(&x, &[schedule().level(2); 2]).unwrap();
        let mut y = x.clone();
        for (v, sv) in y.data_mut().iter_mut().zip(s.data()) {
            *v += drift * sv;
        }
        assert_eq!(y, x);
    }

    #[test]
    fn zero_step_size_leaves_state_unchanged() {
        let x = Tensor::filled([1, 1, 1, 3], 0.7);
        let mut rngs = element_rngs(1, 1);
        let cfg = SamplerConfig {
            step_size: 0.0,
            ..SamplerConfig::default()
        };
        let sch = schedule();
        let y = langevin_step(
            &x,
            &GaussianScore {
                mean: 0.0,
                var: 1.0,
            },
            &sch,
            1,
            &cfg,
            &mut rngs,
        )
        .unwrap();
        assert_eq!(y, x);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variants_coincide_at_last_level() {
        let sch = schedule();
        for gamma in [2e-6, 0.1, 1.0] {
            let a = step_coefficients(SamplerVariant::AsPrinted, gamma, sch.last(), sch.last());
            let b = step_coefficients(SamplerVariant::NcsnStandard, gamma, sch.last(), sch.last());
            assert_eq!(a.0, b.0);
        }
    }

    #[test]
    fn stationary_variance_matches_discretization() {
        // x' = (1 - c) x + eta z has stationary variance eta^2 / (1 - (1 - c)^2)
        let sch = NoiseSchedule::from_values(vec![0.2, 0.1]).unwrap();
        for variant in [SamplerVariant::AsPrinted, SamplerVariant::NcsnStandard] {
            let cfg = SamplerConfig {
                step_size: 0.05,
                variant,
                ..SamplerConfig::default()
            };
            let net = GaussianScore {
                mean: 0.0,
                var: 1.0,
            };
            let (drift, noise) = cfg.coefficients(&sch, 1);
            let c = drift / (1.0 + 0.01);
            let predicted = noise * noise / (1.0 - (1.0 - c).powi(2));
            let mut rngs = element_rngs(3, 1);
            let mut x = Tensor::zeros([1, 1, 1, 1]);
            let (mut sum, mut sum2, mut n) = (0.0, 0.0, 0.0);
            for t in 0..100_000 {
                x = langevin_step(&x, &net, &sch, 1, &cfg, &mut rngs).unwrap();
                if t >= 1000 {
                    let v = x.data()[0];
                    sum += v;
                    sum2 += v * v;
                    n += 1.0;
                }
            }
            let var = sum2 / n - (sum / n).powi(2);
            assert!(
                (var / predicted - 1.0).abs() < 0.1,
                "{variant:?}: {var} vs {predicted}"
            );
        }
    }

    struct Counting(AtomicUsize);
    impl ScoreModel for Counting {
        fn score(&self, x: &Tensor, _levels: &[NoiseLevel]) -> Result<Tensor> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(Tensor::zeros(x.shape()))
        }
    }

    #[test]
    fn sampling_uses_l_times_t_evaluations_and_clamps() {
        let net = Counting(AtomicUsize::new(0));
        let cfg = SamplerConfig {
            steps_per_level: 3,
            ..SamplerConfig::default()
        };
        let out = sample_tensor(&net, &schedule(), &cfg, 4, [2, 2, 4]).unwrap();
        assert_eq!(net.0.load(Ordering::SeqCst), 6 * 3);
        assert_eq!(out.evaluations, 18);
        assert!(out.samples.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sampling_is_reproducible_and_chunk_independent() {
        let net = GaussianScore {
            mean: 0.5,
            var: 0.1,
        };
        let cfg = SamplerConfig {
            step_size: 1e-4,
            seed: 9,
            ..SamplerConfig::default()
        };
        let a = sample_tensor(&net, &schedule(), &cfg, 5, [2, 3, 4])
            .unwrap()
            .samples;
        let b = sample_tensor(&net, &schedule(), &cfg, 5, [2, 3, 4])
            .unwrap()
            .samples;
        assert_eq!(a, b);
        let chunked = SamplerConfig {
            chunk_size: 2,
            ..cfg.clone()
        };
        let c = sample_tensor(&net, &schedule(), &chunked, 5, [2, 3, 4])
            .unwrap()
            .samples;
        assert_eq!(a, c);
        let prefix = sample_tensor(&net, &schedule(), &cfg, 2, [2, 3, 4])
            .unwrap()
            .samples;
        assert_eq!(prefix.sample(1), a.sample(1));
    }

    fn observation(h: usize, w: usize) -> Tensor {
        Tensor::from_vec(
            [1, 2, h, w],
            (0..2 * h * w).map(|i| (i as f64 * 0.37).fract()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn large_lambda_pins_observed_pixels() {
        let (h, w) = (4, 8);
        let task = DensifyTask {
            observation: observation(h, w),
            mask: PixelMask::filled(h, w, true),
            lambda: 1e6,
            per_level_scaling: false,
        };
        let cfg = SamplerConfig {
            step_size: 1e-4,
            ..SamplerConfig::default()
        };
        let net = GaussianScore {
            mean: 0.5,
            var: 0.1,
        };
        let x = densify_batch(&net, std::slice::from_ref(&task), &schedule(), &cfg).unwrap();
        assert!(x.max_abs_diff(&task.observation) < 0.01);
    }

    #[test]
    fn empty_mask_matches_unconditional_trajectory() {
        let (h, w) = (4, 8);
        let task = DensifyTask {
            observation: observation(h, w),
            mask: PixelMask::filled(h, w, false),
            lambda: 5.0,
            per_level_scaling: true,
        };
        let cfg = SamplerConfig {
            step_size: 1e-4,
            seed: 2,
            ..SamplerConfig::default()
        };
        let net = GaussianScore {
            mean: 0.5,
            var: 0.1,
        };
        let x = densify_batch(&net, &[task], &schedule(), &cfg).unwrap();
        let u = sample_tensor(&net, &schedule(), &cfg, 1, [2, h, w])
            .unwrap()
            .samples;
        assert_eq!(x, u);
    }

    #[test]
    fn observed_residual_shrinks_with_lambda() {
        let (h, w) = (4, 8);
        let mut mask = PixelMask::filled(h, w, false);
        mask.data[..w].fill(true);
        let cfg = SamplerConfig {
            step_size: 1e-4,
            seed: 5,
            clamp_output: false,
            ..SamplerConfig::default()
        };
        let net = GaussianScore {
            mean: 0.5,
            var: 0.1,
        };
        let y = observation(h, w);
        let residual = |lambda: f64| {
            let task = DensifyTask {
                observation: y.clone(),
                mask: mask.clone(),
                lambda,
                per_level_scaling: false,
            };
            let x = densify_batch(&net, &[task], &schedule(), &cfg).unwrap();
            (0..2)
                .flat_map(|c| (0..w).map(move |col| (c, col)))
                .map(|(c, col)| (x.at(0, c, 0, col) - y.at(0, c, 0, col)).abs())
                .fold(0.0, f64::max)
        };
        let r: Vec<f64> = [0.1, 1.0, 10.0].iter().map(|&l| residual(l)).collect();
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
    }

    #[test]
    fn densify_rejects_mismatched_tasks() {
        let task = DensifyTask {
            observation: observation(4, 8),
            mask: PixelMask::filled(4, 4, true),
            lambda: 1.0,
            per_level_scaling: false,
        };
        assert!(
            densify_batch(&ZeroScore, &[task], &schedule(), &SamplerConfig::default()).is_err()
        );
        assert!(densify_batch(&ZeroScore, &[], &schedule(), &SamplerConfig::default()).is_err());
    }
}
