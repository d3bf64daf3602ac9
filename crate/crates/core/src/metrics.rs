//! Two-sample evaluation: BEV histograms, MMD, JSD, Fréchet distance over
//! feature activations, and densification error.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, ProjectionConfig, RangeImage};
use crate::ingest::PixelMask;
use crate::model::NoiseLevel;
use crate::par;
use crate::scorenet::ScoreNet;
use crate::tensor::Tensor;

/// Counts points on a regular grid over `[x0, x1] x [y0, y1]`, row-major
/// with `y` as the row. Points outside the window are dropped; points on
/// the upper edge fall into the last bin.
pub fn histogram_2d(
    points: impl IntoIterator<Item = [f64; 2]>,
    bins: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> Vec<f64> {
    let mut counts = vec![0.0; bins * bins];
    let bin = |v: f64, (lo, hi): (f64, f64)| -> Option<usize> {
        if !(v >= lo && v <= hi) {
            return None;
        }
        Some((((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1))
    };
    for [x, y] in points {
        if let (Some(ix), Some(iy)) = (bin(x, x_range), bin(y, y_range)) {
            counts[iy * bins + ix] += 1.0;
        }
    }
    counts
}

/// Ground-plane occupancy over `[-extent, extent]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevHistogram {
    pub bins: usize,
    pub extent: f64,
    /// Raw counts, `bins * bins`, row-major with `y` as the row.
    pub counts: Vec<f64>,
}

impl BevHistogram {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Counts divided by the total; all zeros for an empty cloud.
    pub fn normalized(&self) -> Vec<f64> {
        let t = self.total();
        if t > 0.0 {
            self.counts.iter().map(|c| c / t).collect()
        } else {
            vec![0.0; self.counts.len()]
        }
    }
}

pub fn bev_histogram(pc: &PointCloud, bins: usize, extent: f64) -> Result<BevHistogram> {
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be >= 1".into()));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "extent must be > 0, got {extent}"
        )));
    }
    let counts = histogram_2d(
        pc.positions().iter().map(|p| [p[0], p[1]]),
        bins,
        (-extent, extent),
        (-extent, extent),
    );
    Ok(BevHistogram {
        bins,
        extent,
        counts,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_mean(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> f64 {
    let inv = 1.0 / (2.0 * h * h);
    let total = par::ordered_sum(a.len(), |i| {
        b.iter().map(|bj| (-sq_dist(&a[i], bj) * inv).exp()).sum()
    });
    total / (a.len() * b.len()) as f64
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidConfig("MMD needs non-empty sets".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: format!("vectors of length {d}"),
            got: "mixed lengths".into(),
        });
    }
    Ok(d)
}

/// Biased MMD^2 estimate with a Gaussian kernel of bandwidth `h`
/// (diagonal terms included).
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> Result<f64> {
    check_sets(a, b)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "bandwidth must be > 0, got {h}"
        )));
    }
    Ok(kernel_mean(a, a, h) - 2.0 * kernel_mean(a, b, h) + kernel_mean(b, b, h))
}

/// Median pairwise Euclidean distance between distinct members of `set`.
pub fn median_heuristic(set: &[Vec<f64>]) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::InvalidConfig(
            "median heuristic needs >= 2 items".into(),
        ));
    }
    let mut d: Vec<f64> = (0..set.len())
        .flat_map(|i| (i + 1..set.len()).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(&set[i], &set[j]).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::OutOfRange(
            "reference set has zero median distance".into(),
        ))
    }
}

const MASS_TOLERANCE: f64 = 1e-6;

/// Jensen-Shannon divergence (natural log) between normalized histograms.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bins", p.len()),
            got: format!("{}", q.len()),
        });
    }
    for (name, h) in [("P", p), ("Q", q)] {
        let mass: f64 = h.iter().sum();
        if h.iter().any(|v| !(*v >= 0.0)) || (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::OutOfRange(format!(
                "{name} is not a normalized histogram (mass {mass})"
            )));
        }
    }
    let kl_half = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_half(a, m) + 0.5 * kl_half(b, m)
        })
        .sum())
}

/// Mean and covariance of a set of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{0}x{0} covariance", mean.len()),
                got: format!("{}x{}", cov.nrows(), cov.ncols()),
            });
        }
        Ok(GaussianMoments { mean, cov })
    }

    /// Sample mean and unbiased covariance.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::InvalidConfig("need >= 2 feature vectors".into()));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::ShapeMismatch {
                expected: format!("features of length {d}"),
                got: "mixed lengths".into(),
            });
        }
        let n = features.len() as f64;
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n;
        let mut centered = DMatrix::zeros(features.len(), d);
        for (i, f) in features.iter().enumerate() {
            for k in 0..d {
                centered[(i, k)] = f[k] - mean[k];
            }
        }
        let cov = centered.transpose() * &centered / (n - 1.0);
        Ok(GaussianMoments { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

const NEG_EIGEN_TOLERANCE: f64 = 1e-8;

/// Square root of a symmetric PSD matrix via eigendecomposition. Slightly
/// negative eigenvalues are clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -NEG_EIGEN_TOLERANCE {
            return Err(Error::OutOfRange(format!(
                "matrix is not positive semidefinite (eigenvalue {v:e})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the trace of the
/// cross term taken as `Tr((S1^(1/2) S2 S1^(1/2))^(1/2))`.
pub fn frechet_distance(g1: &GaussianMoments, g2: &GaussianMoments) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("dimension {}", g1.dim()),
            got: format!("{}", g2.dim()),
        });
    }
    let diff = &g1.mean - &g2.mean;
    let root1 = psd_sqrt(&g1.cov)?;
    psd_sqrt(&g2.cov)?;
    let inner = &root1 * &g2.cov * &root1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -NEG_EIGEN_TOLERANCE {
            return Err(Error::OutOfRange(format!(
                "covariance product has negative eigenvalue {v:e}"
            )));
        }
        cross += v.max(0.0).sqrt();
    }
    Ok(diff.norm_squared() + g1.cov.trace() + g2.cov.trace() - 2.0 * cross)
}

/// Maps a batch of range images to a set of fixed-length feature vectors.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> String;

    fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>>;
}

/// Per-pixel channel vectors of the input itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn name(&self) -> String {
        "pixels".into()
    }

    fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let [n, c, h, w] = images.shape();
        Ok((0..n)
            .flat_map(|i| (0..h * w).map(move |p| (i, p)))
            .map(|(i, p)| (0..c).map(|ch| images.plane(i, ch)[p]).collect())
            .collect())
    }
}

/// Bottleneck activations of a score network at a fixed noise level.
pub struct NetworkFeatures<'a> {
    pub net: &'a ScoreNet,
    pub level: NoiseLevel,
}

impl FeatureExtractor for NetworkFeatures<'_> {
    fn name(&self) -> String {
        format!(
            "scorenet-bottleneck(level={}, sigma={})",
            self.level.index, self.level.sigma
        )
    }

    fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let levels = vec![self.level; images.batch()];
        self.net.bottleneck_features(images, &levels)
    }
}

pub const FRD_SUBSAMPLE: usize = 4096;
pub const FRD_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrdResult {
    pub value: f64,
    pub extractor: String,
    pub samples_a: usize,
    pub samples_b: usize,
    /// True when a ridge was added to rank-deficient covariances.
    pub ridge_added: bool,
}

fn subsample(features: Vec<Vec<f64>>, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if features.len() <= count {
        return features;
    }
    let mut idx = sample_indices(rng, features.len(), count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| features[i].clone()).collect()
}

fn rank_deficient(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    min <= 1e-12 * max.max(1.0)
}

/// Fréchet distance between Gaussians fitted to (at most `subsample_count`)
/// randomly chosen activations of each image set.
pub fn frd(
    a: &Tensor,
    b: &Tensor,
    extractor: &dyn FeatureExtractor,
    subsample_count: usize,
    seed: u64,
) -> Result<FrdResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fa = subsample(extractor.features(a)?, subsample_count, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fb = subsample(extractor.features(b)?, subsample_count, &mut rng);
    let mut ga = GaussianMoments::fit(&fa)?;
    let mut gb = GaussianMoments::fit(&fb)?;
    let ridge_added = rank_deficient(&ga.cov) || rank_deficient(&gb.cov);
    if ridge_added {
        let eye = DMatrix::identity(ga.dim(), ga.dim()) * FRD_RIDGE;
        ga.cov += &eye;
        gb.cov += &eye;
    }
    Ok(FrdResult {
        value: frechet_distance(&ga, &gb)?,
        extractor: extractor.name(),
        samples_a: fa.len(),
        samples_b: fb.len(),
        ridge_added,
    })
}

/// Mean absolute depth error in meters over `eval_mask`.
pub fn mae_densification(
    predicted: &RangeImage,
    reference: &RangeImage,
    eval_mask: &PixelMask,
    cfg: &ProjectionConfig,
) -> Result<f64> {
    let (h, w) = (reference.height(), reference.width());
    if predicted.height() != h
        || predicted.width() != w
        || eval_mask.height != h
        || eval_mask.width != w
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{h}x{w}"),
            got: format!(
                "prediction {}x{}, mask {}x{}",
                predicted.height(),
                predicted.width(),
                eval_mask.height,
                eval_mask.width
            ),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &m) in eval_mask.data.iter().enumerate() {
        if m {
            let p = cfg.decode_depth(predicted.depth()[i] as f64)?;
            let r = cfg.decode_depth(reference.depth()[i] as f64)?;
            sum += (p - r).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidConfig("evaluation mask is empty".into()));
    }
    Ok(sum / n as f64)
}

/// Held-out pixels that carry a return in the reference.
pub fn heldout_eval_mask(reference: &RangeImage, visible: &PixelMask) -> PixelMask {
    visible.inverted().and(reference.mask())
}

/// Fills every row with a copy of the nearest kept row (ties go to the
/// upper row).
pub fn nearest_row_baseline(
    sparse: &RangeImage,
    kept_rows: &BTreeSet<usize>,
) -> Result<RangeImage> {
    let (h, w) = (sparse.height(), sparse.width());
    if kept_rows.is_empty() || kept_rows.iter().any(|&r| r >= h) {
        return Err(Error::InvalidConfig(
            "kept rows must be non-empty and in range".into(),
        ));
    }
    let mut out = sparse.clone();
    for row in 0..h {
        let src = *kept_rows
            .iter()
            .min_by_key(|&&k| (k.abs_diff(row), k))
            .expect("non-empty");
        for col in 0..w {
            let (d, i, m) = sparse.pixel(src, col);
            if m {
                out.set_pixel(row, col, d as f64, i as f64);
            } else {
                out.clear_pixel(row, col);
            }
        }
    }
    Ok(out)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

/// Hash over the sorted `(name, file hash)` list of an input set.
pub fn manifest_sha256(paths: &[impl AsRef<Path>]) -> Result<String> {
    let mut entries = paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, file_sha256(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    let mut hasher = Sha256::new();
    for (name, h) in entries {
        hasher.update(name.as_bytes());
        hasher.update(b"\0");
        hasher.update(h.as_bytes());
        hasher.update(b"\n");
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub mmd_bins: usize,
    pub jsd_bins: usize,
    pub extent: f64,
    /// MMD bandwidth; `None` selects the median heuristic on the reference set.
    pub bandwidth: Option<f64>,
    pub frd_subsample: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            mmd_bins: 50,
            jsd_bins: 100,
            extent: 80.0,
            bandwidth: None,
            frd_subsample: FRD_SUBSAMPLE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mmd: f64,
    pub mmd_bandwidth: f64,
    pub jsd: f64,
    pub frd: Option<FrdResult>,
    pub config: MetricConfig,
    pub reference_count: usize,
    pub candidate_count: usize,
    pub reference_manifest_sha256: Option<String>,
    pub candidate_manifest_sha256: Option<String>,
}

/// Pooled normalized BEV histogram of a set of clouds.
pub fn pooled_bev(clouds: &[PointCloud], bins: usize, extent: f64) -> Result<Vec<f64>> {
    let mut total = vec![0.0; bins * bins];
    for pc in clouds {
        let h = bev_histogram(pc, bins, extent)?;
        total.iter_mut().zip(&h.counts).for_each(|(t, c)| *t += c);
    }
    let mass: f64 = total.iter().sum();
    if mass == 0.0 {
        return Err(Error::InvalidConfig(
            "no points inside the BEV extent".into(),
        ));
    }
    Ok(total.into_iter().map(|c| c / mass).collect())
}

/// MMD over per-cloud BEV mass histograms and JSD over the pooled BEV
/// distributions of two sets of clouds.
pub fn compare_clouds(
    reference: &[PointCloud],
    candidate: &[PointCloud],
    cfg: &MetricConfig,
) -> Result<(f64, f64, f64)> {
    let hist = |set: &[PointCloud]| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .map(|pc| bev_histogram(pc, cfg.mmd_bins, cfg.extent).map(|h| h.normalized()))
            .collect()
    };
    let ha = hist(reference)?;
    let hb = hist(candidate)?;
    let h = match cfg.bandwidth {
        Some(h) => h,
        None => median_heuristic(&ha)?,
    };
    let m = mmd(&ha, &hb, h)?;
    let j = jsd(
        &pooled_bev(reference, cfg.jsd_bins, cfg.extent)?,
        &pooled_bev(candidate, cfg.jsd_bins, cfg.extent)?,
    )?;
    Ok((m, h, j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_sets(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
            .collect()
    }

    #[test]
    fn histogram_examples() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 1.0]], vec![0.0]).unwrap();
        for bins in [1, 2, 5, 50] {
            let h = bev_histogram(&pc, bins, 10.0).unwrap();
            assert_eq!(h.total(), 1.0);
            let nz: Vec<usize> = (0..h.counts.len()).filter(|&i| h.counts[i] > 0.0).collect();
            assert_eq!(nz, vec![(bins / 2) * bins + bins / 2]);
        }
        let empty = PointCloud::with_capacity(0);
        let h = bev_histogram(&empty, 4, 1.0).unwrap();
        assert!(h.normalized().iter().all(|&v| v == 0.0));
        assert!(bev_histogram(&pc, 0, 1.0).is_err());
        assert!(bev_histogram(&pc, 2, 0.0).is_err());
    }

    #[test]
    fn uniform_quadrants_within_binomial_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 0.0])
            .collect();
        let pc = PointCloud::new(pts, vec![0.0; 1000]).unwrap();
        let h = bev_histogram(&pc, 2, 5.0).unwrap();
        let sd = (1000.0f64 * 0.25 * 0.75).sqrt();
        for c in &h.counts {
            assert!((c - 250.0).abs() <= 4.0 * sd);
        }
    }

    #[test]
    fn mmd_properties() {
        let a = random_sets(1, 6, 5);
        let b = random_sets(2, 4, 5);
        assert!(mmd(&a, &a, 0.7).unwrap().abs() <= 1e-12);
        let ab = mmd(&a, &b, 0.7).unwrap();
        let ba = mmd(&b, &a, 0.7).unwrap();
        assert!((ab - ba).abs() < 1e-12 && ab > 0.0);
        assert!(mmd(&a, &b, 0.0).is_err());
        assert!(mmd(&a, &[], 1.0).is_err());
    }

    #[test]
    fn median_heuristic_odd_and_even() {
        let set = vec![vec![0.0], vec![1.0], vec![3.0]];
        // distances 1, 3, 2
        assert_eq!(median_heuristic(&set).unwrap(), 2.0);
        let set = vec![vec![0.0], vec![1.0], vec![3.0], vec![7.0]];
        // 1 3 7 2 6 4 -> 1 2 3 4 6 7
        assert_eq!(median_heuristic(&set).unwrap(), 3.5);
    }

    #[test]
    fn jsd_properties() {
        let p = [0.2, 0.3, 0.5];
        let q = [0.5, 0.25, 0.25];
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert!((jsd(&p, &q).unwrap() - jsd(&q, &p).unwrap()).abs() < 1e-15);
        assert!(jsd(&p, &q).unwrap() <= std::f64::consts::LN_2);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() <= 1e-12);
        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let g = GaussianMoments::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        assert!(frechet_distance(&g, &g).unwrap().abs() < 1e-8);
        let a = GaussianMoments::new(
            DVector::from_vec(vec![0.0, 0.0, 0.0]),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let b = GaussianMoments::new(
            DVector::from_vec(vec![1.0, -2.0, 0.5]),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 5.25).abs() < 1e-8);
        let bad = GaussianMoments::new(
            DVector::zeros(2),
            DMatrix::from_diagonal_element(2, 2, -1.0),
        )
        .unwrap();
        assert!(frechet_distance(&bad, &g).is_err());
        assert!(frechet_distance(&a, &g).is_err());
    }

    #[test]
    fn frd_identity_extractor_constant_images() {
        let a = Tensor::filled([3, 2, 2, 4], 0.2);
        let b = Tensor::filled([3, 2, 2, 4], 0.5);
        let same = frd(&a, &a, &PixelFeatures, FRD_SUBSAMPLE, 1).unwrap();
        assert!(same.value.abs() < 1e-12);
        let r = frd(&a, &b, &PixelFeatures, FRD_SUBSAMPLE, 1).unwrap();
        assert!(r.ridge_added);
        assert!((r.value - 2.0 * 0.09).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn frd_subsamples_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_vec([2, 2, 8, 8], (0..256).map(|_| rng.gen()).collect()).unwrap();
        let b = Tensor::from_vec([2, 2, 8, 8], (0..256).map(|_| rng.gen()).collect()).unwrap();
        let r1 = frd(&a, &b, &PixelFeatures, 40, 5).unwrap();
        let r2 = frd(&a, &b, &PixelFeatures, 40, 5).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.samples_a, 40);
        assert!(!r1.ridge_added);
    }

    #[test]
    fn mae_examples() {
        let cfg = ProjectionConfig::small();
        let mut reference = RangeImage::empty(cfg.height, cfg.width);
        let mut predicted = reference.clone();
        for col in 0..cfg.width {
            reference.set_pixel(3, col, cfg.encode_depth(10.0).unwrap(), 0.5);
            predicted.set_pixel(3, col, cfg.encode_depth(11.0).unwrap(), 0.5);
        }
        let mut mask = PixelMask::filled(cfg.height, cfg.width, false);
        mask.data[3 * cfg.width..4 * cfg.width].fill(true);
        assert_eq!(
            mae_densification(&reference, &reference, &mask, &cfg).unwrap(),
            0.0
        );
        let e = mae_densification(&predicted, &reference, &mask, &cfg).unwrap();
        assert!((e - 1.0).abs() < 1e-4, "{e}");
        let empty = PixelMask::filled(cfg.height, cfg.width, false);
        assert!(mae_densification(&predicted, &reference, &empty, &cfg).is_err());
    }

    #[test]
    fn nearest_row_copies_closest_kept_row() {
        let mut img = RangeImage::empty(5, 2);
        img.set_pixel(0, 0, 0.1, 0.0);
        img.set_pixel(4, 1, 0.9, 0.0);
        let kept: BTreeSet<usize> = [0, 4].into_iter().collect();
        let out = nearest_row_baseline(&img, &kept).unwrap();
        assert_eq!(out.pixel(1, 0).0, 0.1);
        assert_eq!(out.pixel(2, 0).0, 0.1);
        assert!(!out.pixel(2, 1).2);
        assert_eq!(out.pixel(3, 1).0, 0.9);
        assert!(nearest_row_baseline(&img, &BTreeSet::new()).is_err());
    }
}
