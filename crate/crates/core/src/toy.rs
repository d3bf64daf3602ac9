//! Small score models with known answers: analytic Gaussian and
//! Gaussian-mixture scores, a linear model, and a ten-parameter per-pixel MLP.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{NoiseLevel, ScoreModel, TrainableScore};
use crate::tensor::Tensor;

/// Always returns zeros.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroScore;

impl ScoreModel for ZeroScore {
    fn score(&self, x: &Tensor, _levels: &[NoiseLevel]) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }
}

/// `s(x) = a * x + b` elementwise, independent of the noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScore {
    pub a: f64,
    pub b: f64,
}

impl LinearScore {
    pub fn new(a: f64, b: f64) -> Self {
        LinearScore { a, b }
    }
}

impl ScoreModel for LinearScore {
    fn score(&self, x: &Tensor, _levels: &[NoiseLevel]) -> Result<Tensor> {
        Ok(x.map(|v| self.a * v + self.b))
    }
}

impl TrainableScore for LinearScore {
    type Tape = Tensor;

    fn forward_taped(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<(Tensor, Tensor)> {
        Ok((self.score(x, levels)?, x.clone()))
    }

    fn backward(&self, x: Tensor, grad_out: &Tensor) -> Vec<f64> {
        let da = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(x, g)| x * g)
            .sum();
        let db = grad_out.data().iter().sum();
        vec![da, db]
    }

    fn parameters(&self) -> Vec<f64> {
        vec![self.a, self.b]
    }

    fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        match p {
            [a, b] => {
                self.a = *a;
                self.b = *b;
                Ok(())
            }
            _ => Err(Error::ShapeMismatch {
                expected: "2 parameters".into(),
                got: p.len().to_string(),
            }),
        }
    }
}

/// Per-pixel two-layer network on two-channel inputs:
/// `s = W2 tanh(W1 u + b1)` with `W1, W2` 2x2 and `b1` of length 2.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMlp {
    pub w1: [f64; 4],
    pub b1: [f64; 2],
    pub w2: [f64; 4],
}

pub struct PixelMlpTape {
    x: Tensor,
    hidden: Tensor,
}

impl PixelMlp {
    pub const NUM_PARAMS: usize = 10;

    pub fn random(rng: &mut impl Rng) -> Self {
        let mut p = [0.0; Self::NUM_PARAMS];
        p.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let mut m = PixelMlp {
            w1: [0.0; 4],
            b1: [0.0; 2],
            w2: [0.0; 4],
        };
        m.set_parameters(&p).expect("ten parameters");
        m
    }

    fn check(x: &Tensor) -> Result<()> {
        if x.channels() != 2 {
            return Err(Error::ShapeMismatch {
                expected: "2 channels".into(),
                got: x.channels().to_string(),
            });
        }
        Ok(())
    }

    fn run(&self, x: &Tensor) -> (Tensor, Tensor) {
        let mut hidden = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            for p in 0..x.plane_len() {
                let u = [x.plane(n, 0)[p], x.plane(n, 1)[p]];
                let h = [
                    (self.w1[0] * u[0] + self.w1[1] * u[1] + self.b1[0]).tanh(),
                    (self.w1[2] * u[0] + self.w1[3] * u[1] + self.b1[1]).tanh(),
                ];
                hidden.plane_mut(n, 0)[p] = h[0];
                hidden.plane_mut(n, 1)[p] = h[1];
                out.plane_mut(n, 0)[p] = self.w2[0] * h[0] + self.w2[1] * h[1];
                out.plane_mut(n, 1)[p] = self.w2[2] * h[0] + self.w2[3] * h[1];
            }
        }
        (out, hidden)
    }
}

impl ScoreModel for PixelMlp {
    fn score(&self, x: &Tensor, _levels: &[NoiseLevel]) -> Result<Tensor> {
        Self::check(x)?;
        Ok(self.run(x).0)
    }
}

impl TrainableScore for PixelMlp {
    type Tape = PixelMlpTape;

    fn forward_taped(&self, x: &Tensor, _levels: &[NoiseLevel]) -> Result<(Tensor, PixelMlpTape)> {
        Self::check(x)?;
        let (out, hidden) = self.run(x);
        Ok((
            out,
            PixelMlpTape {
                x: x.clone(),
                hidden,
            },
        ))
    }

    fn backward(&self, tape: PixelMlpTape, g: &Tensor) -> Vec<f64> {
        let mut w1 = [0.0; 4];
        let mut b1 = [0.0; 2];
        let mut w2 = [0.0; 4];
        let x = &tape.x;
        for n in 0..x.batch() {
            for p in 0..x.plane_len() {
                let u = [x.plane(n, 0)[p], x.plane(n, 1)[p]];
                let h = [tape.hidden.plane(n, 0)[p], tape.hidden.plane(n, 1)[p]];
                let go = [g.plane(n, 0)[p], g.plane(n, 1)[p]];
                w2[0] += go[0] * h[0];
                w2[1] += go[0] * h[1];
                w2[2] += go[1] * h[0];
                w2[3] += go[1] * h[1];
                for k in 0..2 {
                    let gh = (self.w2[k] * go[0] + self.w2[2 + k] * go[1]) * (1.0 - h[k] * h[k]);
                    w1[2 * k] += gh * u[0];
                    w1[2 * k + 1] += gh * u[1];
                    b1[k] += gh;
                }
            }
        }
        w1.iter().chain(&b1).chain(&w2).copied().collect()
    }

    fn parameters(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .copied()
            .collect()
    }

    fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != Self::NUM_PARAMS {
            return Err(Error::ShapeMismatch {
                expected: "10 parameters".into(),
                got: p.len().to_string(),
            });
        }
        self.w1.copy_from_slice(&p[0..4]);
        self.b1.copy_from_slice(&p[4..6]);
        self.w2.copy_from_slice(&p[6..10]);
        Ok(())
    }
}

/// Score of `N(mean, var)` convolved with `N(0, sigma^2)`, applied
/// elementwise: `-(x - mean) / (var + sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianScore {
    pub mean: f64,
    pub var: f64,
}

impl ScoreModel for GaussianScore {
    fn score(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<Tensor> {
        let mut out = x.clone();
        for (i, lv) in levels.iter().enumerate() {
            let v = self.var + lv.sigma * lv.sigma;
            out.sample_mut(i)
                .iter_mut()
                .for_each(|x| *x = -(*x - self.mean) / v);
        }
        Ok(out)
    }
}

/// One axis-aligned 2-D Gaussian component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component2 {
    pub weight: f64,
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

/// Mixture of axis-aligned 2-D Gaussians. Points are batch items of shape
/// `[1, 2, 1, 1]` (two channels); the score is that of the mixture
/// perturbed by `N(0, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture2 {
    pub components: Vec<Component2>,
}

impl GaussianMixture2 {
    pub fn new(components: Vec<Component2>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.is_empty()
            || components
                .iter()
                .any(|c| !(c.weight > 0.0) || c.var.iter().any(|v| !(*v > 0.0)))
            || (total - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig(
                "mixture weights must be positive and sum to 1, variances positive".into(),
            ));
        }
        Ok(GaussianMixture2 { components })
    }

    /// Score of the perturbed mixture at a point.
    pub fn score_at(&self, x: [f64; 2], sigma: f64) -> [f64; 2] {
        let s2 = sigma * sigma;
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let mut l = c.weight.ln();
                for d in 0..2 {
                    let v = c.var[d] + s2;
                    let r = x[d] - c.mean[d];
                    l -= 0.5 * (r * r / v + v.ln());
                }
                l
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut s = [0.0; 2];
        for (c, wk) in self.components.iter().zip(&w) {
            for d in 0..2 {
                s[d] -= wk / z * (x[d] - c.mean[d]) / (c.var[d] + s2);
            }
        }
        s
    }

    /// Draws `n` points directly from the unperturbed mixture.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| {
                let mut u: f64 = rng.gen();
                let mut pick = self.components.last().expect("non-empty");
                for c in &self.components {
                    if u < c.weight {
                        pick = c;
                        break;
                    }
                    u -= c.weight;
                }
                std::array::from_fn(|d| {
                    pick.mean[d] + pick.var[d].sqrt() * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect()
    }
}

impl ScoreModel for GaussianMixture2 {
    fn score(&self, x: &Tensor, levels: &[NoiseLevel]) -> Result<Tensor> {
        if x.sample_len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: "two values per item".into(),
                got: x.sample_len().to_string(),
            });
        }
        let mut out = x.clone();
        for (i, lv) in levels.iter().enumerate() {
            let item = out.sample_mut(i);
            let s = self.score_at([item[0], item[1]], lv.sigma);
            item.copy_from_slice(&s);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PixelMlp::random(&mut rng);
        let x = Tensor::from_vec(
            [2, 2, 1, 3],
            (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let g = Tensor::from_vec(
            [2, 2, 1, 3],
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let lv = vec![
            NoiseLevel {
                index: 0,
                sigma: 1.0
            };
            2
        ];
        let (_, tape) = net.forward_taped(&x, &lv).unwrap();
        let grad = net.backward(tape, &g);
        let f = |p: &[f64]| {
            let mut m = net.clone();
            m.set_parameters(p).unwrap();
            let y = m.score(&x, &lv).unwrap();
            y.data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let base = net.parameters();
        for k in 0..PixelMlp::NUM_PARAMS {
            let mut p = base.clone();
            p[k] += 1e-6;
            let fp = f(&p);
            p[k] -= 2e-6;
            let fm = f(&p);
            let fd = (fp - fm) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-6 * fd.abs().max(1.0), "{k}");
        }
    }

    #[test]
    fn mixture_score_matches_numeric_log_density_gradient() {
        let mix = GaussianMixture2::new(vec![
            Component2 {
                weight: 0.3,
                mean: [-1.0, 0.5],
                var: [0.2, 0.1],
            },
            Component2 {
                weight: 0.7,
                mean: [1.0, -0.5],
                var: [0.3, 0.4],
            },
        ])
        .unwrap();
        let sigma = 0.4;
        let log_p = |x: [f64; 2]| -> f64 {
            mix.components
                .iter()
                .map(|c| {
                    let mut p = c.weight;
                    for d in 0..2 {
                        let v = c.var[d] + sigma * sigma;
                        p *= (-(x[d] - c.mean[d]).powi(2) / (2.0 * v)).exp()
                            / (2.0 * std::f64::consts::PI * v).sqrt();
                    }
                    p
                })
                .sum::<f64>()
                .ln()
        };
        for x in [[0.0, 0.0], [-1.2, 0.3], [2.0, 1.0]] {
            let s = mix.score_at(x, sigma);
            for d in 0..2 {
                let mut a = x;
                let mut b = x;
                a[d] += 1e-6;
                b[d] -= 1e-6;
                let fd = (log_p(a) - log_p(b)) / 2e-6;
                assert!((fd - s[d]).abs() < 1e-6, "{x:?} {d}: {fd} vs {}", s[d]);
            }
        }
        assert!(GaussianMixture2::new(vec![]).is_err());
    }

    #[test]
    fn gaussian_score_is_perturbed_linear() {
        let g = GaussianScore {
            mean: 2.0,
            var: 3.0,
        };
        let x = Tensor::filled([1, 1, 1, 1], 5.0);
        let s = g
            .score(
                &x,
                &[NoiseLevel {
                    index: 0,
                    sigma: 1.0,
                }],
            )
            .unwrap();
        assert_eq!(s.data()[0], -0.75);
    }
}
