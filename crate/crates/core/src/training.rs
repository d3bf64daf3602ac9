//! Geometric noise schedule, multi-scale denoising score matching, and the
//! Adam training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NoiseLevel, ScoreModel, TrainableScore};
use crate::tensor::Tensor;

/// Geometrically spaced, strictly decreasing noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    values: Vec<f64>,
}

impl NoiseSchedule {
    /// `sigma_i = sigma_first * (sigma_last / sigma_first)^(i / (levels - 1))`.
    /// The endpoints are stored exactly.
    pub fn geometric(sigma_first: f64, sigma_last: f64, levels: usize) -> Result<Self> {
        if !(sigma_first.is_finite() && sigma_last.is_finite()) {
            return Err(Error::InvalidConfig("noise levels must be finite".into()));
        }
        if !(sigma_first > sigma_last && sigma_last > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "need sigma_first > sigma_last > 0, got {sigma_first} and {sigma_last}"
            )));
        }
        if levels < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 levels, got {levels}"
            )));
        }
        let log_ratio = (sigma_last / sigma_first).ln();
        let last = levels - 1;
        let values = (0..levels)
            .map(|i| match i {
                0 => sigma_first,
                i if i == last => sigma_last,
                i => sigma_first * (log_ratio * i as f64 / last as f64).exp(),
            })
            .collect();
        Ok(NoiseSchedule { values })
    }

    /// Builds a schedule from explicit values (positive and strictly
    /// decreasing; a single level is allowed).
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("need at least 1 level".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || values.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::InvalidConfig(
                "noise levels must be positive and strictly decreasing".into(),
            ));
        }
        Ok(NoiseSchedule { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("schedule is non-empty")
    }

    pub fn level(&self, i: usize) -> NoiseLevel {
        NoiseLevel {
            index: i,
            sigma: self.values[i],
        }
    }
}

pub fn make_schedule(sigma_first: f64, sigma_last: f64, levels: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::geometric(sigma_first, sigma_last, levels)
}

/// A perturbed batch: the levels drawn for each item and `x_tilde - x`.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub levels: Vec<NoiseLevel>,
    pub noise: Tensor,
}

/// Draws one level per item uniformly and Gaussian noise scaled by it.
pub fn perturb(x: &Tensor, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Perturbation {
    let n = x.batch();
    let levels: Vec<NoiseLevel> = (0..n)
        .map(|_| schedule.level(rng.gen_range(0..schedule.len())))
        .collect();
    let mut noise = Tensor::zeros(x.shape());
    for (i, lv) in levels.iter().enumerate() {
        for v in noise.sample_mut(i) {
            *v = lv.sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Perturbation { levels, noise }
}

/// Per-item loss `sigma^2 / 2 * ||s + (x_tilde - x) / sigma^2||^2` and its
/// gradient with respect to `s`, divided by the batch size.
fn residual_terms(score: &Tensor, p: &Perturbation) -> (Vec<f64>, Tensor) {
    let n = score.batch() as f64;
    let mut grad = Tensor::zeros(score.shape());
    let mut per_item = Vec::with_capacity(score.batch());
    for (i, lv) in p.levels.iter().enumerate() {
        let s2 = lv.sigma * lv.sigma;
        let mut acc = 0.0;
        let g = grad.sample_mut(i);
        for ((gv, &sv), &dv) in g.iter_mut().zip(score.sample(i)).zip(p.noise.sample(i)) {
            let r = sv + dv / s2;
            acc += r * r;
            *gv = s2 * r / n;
        }
        per_item.push(0.5 * s2 * acc);
    }
    (per_item, grad)
}

/// Loss of one perturbed batch, with per-item contributions.
#[derive(Debug, Clone)]
pub struct DsmEval {
    pub loss: f64,
    pub per_item: Vec<f64>,
    pub levels: Vec<NoiseLevel>,
}

/// Multi-scale denoising score-matching loss on a batch of clean images.
pub fn dsm_loss<M: ScoreModel + ?Sized>(
    net: &M,
    x: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    let p = perturb(x, schedule, rng);
    dsm_loss_with(net, x, &p).map(|e| e.loss)
}

/// Loss for a fixed perturbation.
pub fn dsm_loss_with<M: ScoreModel + ?Sized>(
    net: &M,
    x: &Tensor,
    p: &Perturbation,
) -> Result<DsmEval> {
    if x.batch() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut xt = x.clone();
    xt.add_assign(&p.noise);
    let score = net.score(&xt, &p.levels)?;
    let (per_item, _) = residual_terms(&score, p);
    Ok(DsmEval {
        loss: per_item.iter().sum::<f64>() / x.batch() as f64,
        per_item,
        levels: p.levels.clone(),
    })
}

/// Loss and flat parameter gradient for a fixed perturbation.
pub fn dsm_loss_and_grad<M: TrainableScore>(
    net: &M,
    x: &Tensor,
    p: &Perturbation,
) -> Result<(DsmEval, Vec<f64>)> {
    if x.batch() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut xt = x.clone();
    xt.add_assign(&p.noise);
    let (score, tape) = net.forward_taped(&xt, &p.levels)?;
    let (per_item, grad_out) = residual_terms(&score, p);
    let grad = net.backward(tape, &grad_out);
    Ok((
        DsmEval {
            loss: per_item.iter().sum::<f64>() / x.batch() as f64,
            per_item,
            levels: p.levels.clone(),
        },
        grad,
    ))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, num_params: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Zero the wall-time column so logs are bitwise reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: Some(1.0),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and steps must be >= 1".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("grad_clip must be > 0".into()));
            }
        }
        Ok(())
    }
}

pub const LOSS_BUCKETS: usize = 4;

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean loss of the items whose level falls in each quarter of the
    /// schedule (coarsest first); `None` when no item landed there.
    pub buckets: [Option<f64>; LOSS_BUCKETS],
    pub grad_norm: f64,
    pub wall_time: f64,
}

fn bucket_losses(eval: &DsmEval, levels: usize) -> [Option<f64>; LOSS_BUCKETS] {
    let mut sum = [0.0; LOSS_BUCKETS];
    let mut count = [0usize; LOSS_BUCKETS];
    for (l, lv) in eval.per_item.iter().zip(&eval.levels) {
        let b = (lv.index * LOSS_BUCKETS / levels).min(LOSS_BUCKETS - 1);
        sum[b] += l;
        count[b] += 1;
    }
    std::array::from_fn(|b| (count[b] > 0).then(|| sum[b] / count[b] as f64))
}

/// Source of clean training images.
pub trait Dataset: Sync {
    fn len(&self) -> usize;

    /// Stacks the given items into one batch tensor.
    fn batch(&self, indices: &[usize]) -> Result<Tensor>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for Tensor {
    fn len(&self) -> usize {
        self.batch()
    }

    fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.batch()) {
            return Err(Error::OutOfRange(format!("dataset index {i}")));
        }
        Ok(self.select(indices))
    }
}

/// Full loss history of a run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "step,loss")?;
        for b in 0..LOSS_BUCKETS {
            write!(w, ",loss_q{b}")?;
        }
        writeln!(w, ",grad_norm,wall_time")?;
        for r in &self.records {
            write!(w, "{},{:e}", r.step, r.loss)?;
            for b in &r.buckets {
                match b {
                    Some(v) => write!(w, ",{v:e}")?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w, ",{:e},{:.6}", r.grad_norm, r.wall_time)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w)?;
        w.flush().map_err(|e| Error::at_path(path, e))?;
        Ok(())
    }

    /// Mean loss over the records with `step` in `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let sel: Vec<f64> = self
            .records
            .iter()
            .filter(|r| range.contains(&r.step))
            .map(|r| r.loss)
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

/// Optimizes `net` with Adam on the multi-scale DSM loss. `on_checkpoint`
/// is called every `cfg.checkpoint_every` steps and after the final step
/// with the number of completed steps.
pub fn train<M, D>(
    net: &mut M,
    data: &D,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &M) -> Result<()>,
) -> Result<TrainLog>
where
    M: TrainableScore,
    D: Dataset + ?Sized,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = net.parameters();
    let mut adam = Adam::new(cfg.learning_rate, params.len());
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        let x = data.batch(&indices)?;
        let p = perturb(&x, schedule, &mut rng);
        let (eval, mut grad) = dsm_loss_and_grad(net, &x, &p)?;
        if !eval.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let level = eval
                .per_item
                .iter()
                .zip(&eval.levels)
                .find(|(l, _)| !l.is_finite())
                .map_or(eval.levels[0].index, |(_, lv)| lv.index);
            return Err(Error::NanLoss {
                step,
                level,
                last_loss,
            });
        }
        let grad_norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut grad, c),
            None => grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        };
        adam.step(&mut params, &grad);
        net.set_parameters(&params)?;
        last_loss = eval.loss;
        log.records.push(LossRecord {
            step,
            loss: eval.loss,
            buckets: bucket_losses(&eval, schedule.len()),
            grad_norm,
            wall_time: if cfg.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
        });
        let done = step + 1;
        if done == cfg.steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            on_checkpoint(done, net)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{LinearScore, ZeroScore};

    #[test]
    fn schedule_endpoints_and_ratio() {
        let s = make_schedule(50.0, 0.01, 232).unwrap();
        assert_eq!(s.len(), 232);
        assert_eq!(s.first(), 50.0);
        assert_eq!(s.sigma(231), 0.01);
        let r0 = s.sigma(0) / s.sigma(1);
        for w in s.values().windows(2) {
            assert!(((w[0] / w[1]) / r0 - 1.0).abs() < 1e-12);
        }
        let s = make_schedule(1.0, 1e-2, 3).unwrap();
        assert_eq!(s.values()[0], 1.0);
        assert!((s.values()[1] - 0.1).abs() < 1e-15);
        assert_eq!(s.values()[2], 0.01);
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(make_schedule(0.01, 50.0, 10).is_err());
        assert!(make_schedule(1.0, 0.0, 10).is_err());
        assert!(make_schedule(1.0, 0.1, 1).is_err());
        assert!(make_schedule(f64::NAN, 0.1, 4).is_err());
        assert!(NoiseSchedule::from_values(vec![1.0, 1.0]).is_err());
        assert!(NoiseSchedule::from_values(vec![]).is_err());
        assert_eq!(NoiseSchedule::from_values(vec![0.5]).unwrap().last(), 0.5);
    }

    #[test]
    fn zero_net_loss_is_noise_energy() {
        let x = Tensor::filled([1, 1, 2, 3], 0.25);
        let schedule = make_schedule(2.0, 0.5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = perturb(&x, &schedule, &mut rng);
        let eval = dsm_loss_with(&ZeroScore, &x, &p).unwrap();
        let s = p.levels[0].sigma;
        let expected = p.noise.sum_sq() / (2.0 * s * s);
        assert!((eval.loss - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn perfect_score_has_zero_loss() {
        struct Oracle(Tensor);
        impl ScoreModel for Oracle {
            fn score(&self, xt: &Tensor, levels: &[NoiseLevel]) -> Result<Tensor> {
                let mut s = xt.clone();
                for (i, lv) in levels.iter().enumerate() {
                    let clean = self.0.sample(i);
                    for (v, c) in s.sample_mut(i).iter_mut().zip(clean) {
                        *v = -(*v - c) / (lv.sigma * lv.sigma);
                    }
                }
                Ok(s)
            }
        }
        let x = Tensor::from_vec([2, 1, 1, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let schedule = make_schedule(1.0, 0.1, 5).unwrap();
        let oracle = Oracle(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = dsm_loss(&oracle, &x, &schedule, &mut rng).unwrap();
        assert!(loss.abs() < 1e-20);
    }

    #[test]
    fn zero_net_loss_is_level_independent() {
        let x = Tensor::zeros([4000, 1, 1, 4]);
        let s_hi = NoiseSchedule::from_values(vec![50.0, 49.0]).unwrap();
        let s_lo = NoiseSchedule::from_values(vec![0.011, 0.01]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = dsm_loss(&ZeroScore, &x, &s_hi, &mut rng).unwrap();
        let b = dsm_loss(&ZeroScore, &x, &s_lo, &mut rng).unwrap();
        // E||z||^2 / 2 = 2 for four elements; standard error ~ 0.022
        assert!((a - 2.0).abs() < 0.1 && (b - 2.0).abs() < 0.1, "{a} {b}");
        assert!((a - b).abs() < 0.15);
    }

    #[test]
    fn linear_model_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x =
            Tensor::from_vec([6, 1, 1, 1], (0..6).map(|i| 0.3 * i as f64 - 0.5).collect()).unwrap();
        let schedule = make_schedule(1.0, 0.2, 4).unwrap();
        let p = perturb(&x, &schedule, &mut rng);
        let net = LinearScore::new(-0.7, 0.2);
        let (_, grad) = dsm_loss_and_grad(&net, &x, &p).unwrap();
        for k in 0..2 {
            let eps = 1e-6;
            let mut plus = net.clone();
            let mut q = plus.parameters();
            q[k] += eps;
            plus.set_parameters(&q).unwrap();
            let mut minus = net.clone();
            q[k] -= 2.0 * eps;
            minus.set_parameters(&q).unwrap();
            let fd = (dsm_loss_with(&plus, &x, &p).unwrap().loss
                - dsm_loss_with(&minus, &x, &p).unwrap().loss)
                / (2.0 * eps);
            assert!(
                (fd - grad[k]).abs() / fd.abs().max(1e-8) < 1e-4,
                "{k}: {fd} vs {}",
                grad[k]
            );
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(0.05, 2);
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            adam.step(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let data =
            Tensor::from_vec([50, 1, 1, 1], (0..50).map(|i| (i as f64) * 0.02).collect()).unwrap();
        let schedule = make_schedule(1.0, 0.1, 5).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            steps: 30,
            seed: 4,
            checkpoint_every: 10,
            grad_clip: Some(1.0),
            deterministic: true,
        };
        let run = || {
            let mut net = LinearScore::new(0.0, 0.0);
            let mut seen = Vec::new();
            let log = train(&mut net, &data, &schedule, &cfg, |s, _| {
                seen.push(s);
                Ok(())
            })
            .unwrap();
            let mut csv = Vec::new();
            log.write_csv(&mut csv).unwrap();
            (csv, net.parameters(), seen)
        };
        let (a, pa, seen) = run();
        let (b, pb, _) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(seen, vec![10, 20, 30]);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("step,loss,loss_q0"));
        assert_eq!(text.lines().count(), 31);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let data = Tensor::filled([4, 1, 1, 1], f64::NAN);
        let schedule = make_schedule(1.0, 0.1, 3).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut net = LinearScore::new(1.0, 0.0);
        let err = train(&mut net, &data, &schedule, &cfg, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NanLoss { step: 0, .. }));
    }
}
