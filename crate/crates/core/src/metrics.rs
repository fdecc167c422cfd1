//! Generative-evaluation metrics: Fréchet distance and its crop/full-image
//! variants, kernel MMD (KID), embedding cosine similarity, SSIM, PSNR,
//! Dice/IoU and k-NN balanced accuracy.
//!
//! Feature extraction for the FID family goes through the `FeatureExtractor`
//! trait; the default toy extractor reuses the condition embedder with a
//! distinct seed so metrics never share weights with the conditioning path.

use crate::embedder::{cosine, Embedder, EmbedderConfig};
use crate::error::{Error, Result};
use crate::imagebuf::ImageTensor;
use crate::rng::derive_rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sufficient statistics of a feature set for the Fréchet distance.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f32>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::InsufficientSamples(format!(
                "feature stats need >= 2 samples, got {}",
                features.len()
            )));
        }
        let d = features[0].len();
        let n = features.len();
        let mut mu = DVector::<f64>::zeros(d);
        for f in features {
            if f.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "feature dimensions".into(),
                    lhs: vec![d],
                    rhs: vec![f.len()],
                });
            }
            for i in 0..d {
                mu[i] += f[i] as f64;
            }
        }
        mu /= n as f64;
        let mut sigma = DMatrix::<f64>::zeros(d, d);
        for f in features {
            for i in 0..d {
                let di = f[i] as f64 - mu[i];
                for j in i..d {
                    let dj = f[j] as f64 - mu[j];
                    sigma[(i, j)] += di * dj;
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = sigma[(i, j)] / (n as f64 - 1.0);
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }
        Ok(Self { mu, sigma, n })
    }
}

/// ‖μa−μb‖² + Tr(Σa + Σb − 2·(Σa Σb)^{1/2}), with the matrix square root
/// taken through the symmetric form Σa^{1/2} Σb Σa^{1/2}.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats, eps_reg: f64) -> Result<f64> {
    if a.mu.len() != b.mu.len() {
        return Err(Error::ShapeMismatch {
            context: "frechet dimensions".into(),
            lhs: vec![a.mu.len()],
            rhs: vec![b.mu.len()],
        });
    }
    let d = a.mu.len();
    let reg = DMatrix::<f64>::identity(d, d) * eps_reg;
    let sa = &a.sigma + &reg;
    let sb = &b.sigma + &reg;

    let sa_sqrt = sym_sqrt(&sa)?;
    let inner = &sa_sqrt * &sb * &sa_sqrt;
    let tr_sqrt = sym_sqrt_trace(&inner)?;

    let mean_term: f64 = (&a.mu - &b.mu).norm_squared();
    Ok(mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt)
}

fn sym_eigen(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    Ok((eig.eigenvectors, eig.eigenvalues))
}

fn clamp_eigs(vals: &DVector<f64>) -> Result<DVector<f64>> {
    let mut out = vals.clone();
    for v in out.iter_mut() {
        if *v < -1e-6 {
            return Err(Error::NotPsd(*v));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vecs, vals) = sym_eigen(m)?;
    let vals = clamp_eigs(&vals)?;
    let sqrt_diag = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Ok(&vecs * sqrt_diag * vecs.transpose())
}

fn sym_sqrt_trace(m: &DMatrix<f64>) -> Result<f64> {
    let (_, vals) = sym_eigen(m)?;
    let vals = clamp_eigs(&vals)?;
    Ok(vals.iter().map(|&v| v.sqrt()).sum())
}

/// Default covariance regularizer.
pub const DEFAULT_EPS_REG: f64 = 1e-6;

/// Maps whole images to feature vectors for the FID family.
pub trait FeatureExtractor {
    fn features(&self, img: &ImageTensor) -> Vec<f32>;
    fn id(&self) -> String;
}

/// The condition embedder reused with its own seed, so evaluation features
/// are decoupled from the conditioning path.
pub struct ToyFeatureExtractor {
    embedder: Embedder,
}

impl ToyFeatureExtractor {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            embedder: Embedder::new(EmbedderConfig { dim, seed }),
        }
    }
}

impl Default for ToyFeatureExtractor {
    fn default() -> Self {
        // distinct from the conditioning default seed
        Self::new(9001, 32)
    }
}

impl FeatureExtractor for ToyFeatureExtractor {
    fn features(&self, img: &ImageTensor) -> Vec<f32> {
        self.embedder.embed_patch(img)
    }

    fn id(&self) -> String {
        format!(
            "toy-embed(dim={},seed={})",
            self.embedder.dim(),
            self.embedder.config().seed
        )
    }
}

/// A metric value plus the protocol needed to reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub protocol: serde_json::Value,
}

pub fn extract_stats(
    images: &[ImageTensor],
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureStats> {
    let features: Vec<Vec<f32>> = images.iter().map(|i| extractor.features(i)).collect();
    FeatureStats::from_features(&features)
}

/// FID over whole-image features.
pub fn full_image_fid(
    a: &[ImageTensor],
    b: &[ImageTensor],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    frechet_distance(
        &extract_stats(a, extractor)?,
        &extract_stats(b, extractor)?,
        DEFAULT_EPS_REG,
    )
}

/// FID between seeded random crops of large images and a set of reference
/// patches.
pub fn crop_fid(
    big_images: &[ImageTensor],
    real_patches: &[ImageTensor],
    crop_size: usize,
    n_crops: usize,
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<f64> {
    if big_images.is_empty() || real_patches.is_empty() {
        return Err(Error::EmptyInput("crop_fid image sets".into()));
    }
    for img in big_images {
        if crop_size > img.height() || crop_size > img.width() {
            return Err(Error::InvalidDims(format!(
                "crop size {crop_size} larger than image {}x{}",
                img.height(),
                img.width()
            )));
        }
    }
    // degenerate crop: every crop is the whole image, so use each image
    // exactly once and the result coincides with the plain FID
    if big_images
        .iter()
        .all(|i| i.height() == crop_size && i.width() == crop_size)
    {
        return full_image_fid(big_images, real_patches, extractor);
    }
    let mut rng = derive_rng(seed, &["crop-fid"]);
    let mut crop_features = Vec::with_capacity(n_crops);
    for _ in 0..n_crops {
        let img = &big_images[rng.gen_range(0..big_images.len())];
        let y = if img.height() == crop_size {
            0
        } else {
            rng.gen_range(0..=img.height() - crop_size)
        };
        let x = if img.width() == crop_size {
            0
        } else {
            rng.gen_range(0..=img.width() - crop_size)
        };
        let crop = img.crop(y, x, crop_size, crop_size)?;
        crop_features.push(extractor.features(&crop));
    }
    let real_features: Vec<Vec<f32>> = real_patches.iter().map(|i| extractor.features(i)).collect();
    frechet_distance(
        &FeatureStats::from_features(&crop_features)?,
        &FeatureStats::from_features(&real_features)?,
        DEFAULT_EPS_REG,
    )
}

/// Unbiased polynomial-kernel MMD² averaged over seeded subsets.
pub fn kid(
    features_a: &[Vec<f32>],
    features_b: &[Vec<f32>],
    degree: u32,
    subset_size: usize,
    subsets: usize,
    seed: u64,
) -> Result<f64> {
    if features_a.len() < subset_size || features_b.len() < subset_size {
        return Err(Error::InsufficientSamples(format!(
            "kid subset size {subset_size} exceeds set sizes {} / {}",
            features_a.len(),
            features_b.len()
        )));
    }
    if subset_size < 2 || subsets == 0 {
        return Err(Error::Config("kid needs subset_size >= 2 and subsets >= 1".into()));
    }
    let d = features_a[0].len() as f64;
    let kernel = |x: &[f32], y: &[f32]| -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(&a, &b)| (a as f64) * (b as f64)).sum();
        (dot / d + 1.0).powi(degree as i32)
    };
    let mut total = 0.0f64;
    for s in 0..subsets {
        let mut rng = derive_rng(seed, &["kid-subset", &s.to_string()]);
        let xa = sample_without_replacement(features_a, subset_size, &mut rng);
        let xb = sample_without_replacement(features_b, subset_size, &mut rng);
        let m = subset_size as f64;
        let mut kxx = 0.0;
        let mut kyy = 0.0;
        let mut kxy = 0.0;
        for i in 0..subset_size {
            for j in 0..subset_size {
                if i != j {
                    kxx += kernel(xa[i], xa[j]);
                    kyy += kernel(xb[i], xb[j]);
                }
                kxy += kernel(xa[i], xb[j]);
            }
        }
        total += kxx / (m * (m - 1.0)) + kyy / (m * (m - 1.0)) - 2.0 * kxy / (m * m);
    }
    Ok(total / subsets as f64)
}

fn sample_without_replacement<'a, T>(
    items: &'a [T],
    k: usize,
    rng: &mut impl Rng,
) -> Vec<&'a T> {
    let mut indices: Vec<usize> = (0..items.len()).collect();
    for i in 0..k {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    indices[..k].iter().map(|&i| &items[i]).collect()
}

/// Mean cosine similarity between paired real/synthetic images.
pub fn embedding_similarity(
    real: &[ImageTensor],
    synth: &[ImageTensor],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if real.len() != synth.len() || real.is_empty() {
        return Err(Error::InsufficientSamples(format!(
            "embedding_similarity needs equal non-empty sets, got {} / {}",
            real.len(),
            synth.len()
        )));
    }
    let mut acc = 0.0f64;
    for (r, s) in real.iter().zip(synth) {
        acc += cosine(&extractor.features(r), &extractor.features(s));
    }
    Ok(acc / real.len() as f64)
}

/// Mean local SSIM with square sliding windows, dynamic range 1.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, window: usize, k1: f64, k2: f64) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            context: "ssim".into(),
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    let w = window.min(a.height()).min(a.width());
    let c1 = (k1 * 1.0).powi(2);
    let c2 = (k2 * 1.0).powi(2);
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ch in 0..3 {
        for y0 in 0..=a.height() - w {
            for x0 in 0..=a.width() - w {
                let mut ma = 0.0f64;
                let mut mb = 0.0f64;
                for dy in 0..w {
                    for dx in 0..w {
                        ma += a.pixel(y0 + dy, x0 + dx)[ch] as f64;
                        mb += b.pixel(y0 + dy, x0 + dx)[ch] as f64;
                    }
                }
                let n = (w * w) as f64;
                ma /= n;
                mb /= n;
                let mut va = 0.0f64;
                let mut vb = 0.0f64;
                let mut cov = 0.0f64;
                for dy in 0..w {
                    for dx in 0..w {
                        let da = a.pixel(y0 + dy, x0 + dx)[ch] as f64 - ma;
                        let db = b.pixel(y0 + dy, x0 + dx)[ch] as f64 - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n - 1.0;
                vb /= n - 1.0;
                cov /= n - 1.0;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// 10·log10(max²/MSE); identical inputs return the 100 dB sentinel.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch {
            context: "psnr".into(),
            lhs: vec![a.height(), a.width()],
            rhs: vec![b.height(), b.width()],
        });
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x as f64) - (y as f64)).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(100.0))
}

/// Set-overlap scores for binary masks (values must be 0 or 1).
/// empty ∪ empty is defined as dice = iou = 1.
pub fn dice_iou(pred: &[u8], gt: &[u8]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            context: "dice_iou".into(),
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    if pred.iter().chain(gt).any(|&v| v > 1) {
        return Err(Error::Config("dice_iou input must be binary 0/1".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    let mut tn = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => tn += 1,
        }
    }
    let dice = if tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fneg as f64)
    };
    let iou = if tp + fp + fneg == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp + fneg) as f64
    };
    let accuracy = (tp + tn) as f64 / pred.len() as f64;
    Ok((dice, iou, accuracy))
}

/// Majority vote among the k nearest train points by cosine distance; vote
/// ties break toward the smallest class index. Balanced accuracy is the
/// mean per-class recall.
pub fn knn_balanced_accuracy(
    train: &[(Vec<f32>, usize)],
    test: &[(Vec<f32>, usize)],
    k: usize,
) -> Result<f64> {
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!(
            "k = {k} invalid for train size {}",
            train.len()
        )));
    }
    let classes: std::collections::BTreeSet<usize> =
        train.iter().map(|(_, c)| *c).collect();
    if classes.len() < 2 {
        return Err(Error::Config("knn needs >= 2 train classes".into()));
    }
    if test.is_empty() {
        return Err(Error::EmptyInput("knn test set".into()));
    }
    let n_classes = classes.iter().max().unwrap() + 1;
    let mut per_class_correct = vec![0usize; n_classes];
    let mut per_class_total = vec![0usize; n_classes];
    for (feat, label) in test {
        let mut dists: Vec<(f64, usize)> = train
            .iter()
            .map(|(tf, tc)| (1.0 - cosine(feat, tf), *tc))
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; n_classes];
        for &(_, c) in dists.iter().take(k) {
            votes[c] += 1;
        }
        let best = votes.iter().max().copied().unwrap();
        let predicted = votes.iter().position(|&v| v == best).unwrap();
        per_class_total[*label] += 1;
        if predicted == *label {
            per_class_correct[*label] += 1;
        }
    }
    let mut recall_sum = 0.0;
    let mut class_count = 0usize;
    for c in 0..n_classes {
        if per_class_total[c] > 0 {
            recall_sum += per_class_correct[c] as f64 / per_class_total[c] as f64;
            class_count += 1;
        }
    }
    if class_count == 0 {
        return Err(Error::EmptyInput("no test class has samples".into()));
    }
    Ok(recall_sum / class_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_1d(mu: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mu: DVector::from_vec(vec![mu]),
            sigma: DMatrix::from_vec(1, 1, vec![var]),
            n: 2,
        }
    }

    #[test]
    fn frechet_identical_is_zero() {
        let a = stats_1d(0.3, 1.2);
        assert!(frechet_distance(&a, &a, 0.0).unwrap().abs() < 1e-8);
    }

    #[test]
    fn frechet_1d_mean_shift() {
        let a = stats_1d(0.0, 1.0);
        let b = stats_1d(1.0, 1.0);
        assert!((frechet_distance(&a, &b, 0.0).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn frechet_1d_variance_gap() {
        let a = stats_1d(0.0, 1.0);
        let b = stats_1d(0.0, 4.0);
        // 1 + 4 - 2*2 = 1
        assert!((frechet_distance(&a, &b, 0.0).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn frechet_symmetric() {
        let mut rng = derive_rng(3, &["fid-sym"]);
        let fa: Vec<Vec<f32>> = (0..40)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let fb: Vec<Vec<f32>> = (0..40)
            .map(|_| (0..3).map(|_| rng.gen_range(-0.5..1.5)).collect())
            .collect();
        let a = FeatureStats::from_features(&fa).unwrap();
        let b = FeatureStats::from_features(&fb).unwrap();
        let ab = frechet_distance(&a, &b, 1e-9).unwrap();
        let ba = frechet_distance(&b, &a, 1e-9).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= 0.0);
    }

    #[test]
    fn kid_unit_shift_matches_brute_force() {
        // 1-D features, subset = whole set, single subset: the estimator is
        // the plain unbiased MMD² double sum.
        let xa: Vec<Vec<f32>> = (0..50).map(|i| vec![i as f32 * 0.01]).collect();
        let xb: Vec<Vec<f32>> = (0..50).map(|i| vec![1.0 + i as f32 * 0.01]).collect();
        let got = kid(&xa, &xb, 3, 50, 1, 0).unwrap();

        let kern = |x: f64, y: f64| (x * y + 1.0).powi(3);
        let m = 50.0f64;
        let mut kxx = 0.0;
        let mut kyy = 0.0;
        let mut kxy = 0.0;
        for i in 0..50 {
            for j in 0..50 {
                let (xi, xj) = (xa[i][0] as f64, xa[j][0] as f64);
                let (yi, yj) = (xb[i][0] as f64, xb[j][0] as f64);
                if i != j {
                    kxx += kern(xi, xj);
                    kyy += kern(yi, yj);
                }
                kxy += kern(xi, yj);
            }
        }
        let want = kxx / (m * (m - 1.0)) + kyy / (m * (m - 1.0)) - 2.0 * kxy / (m * m);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn kid_deterministic_under_seed() {
        let mut rng = derive_rng(5, &["kid-det"]);
        let xa: Vec<Vec<f32>> = (0..30).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let xb: Vec<Vec<f32>> = (0..30).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let a = kid(&xa, &xb, 3, 10, 4, 7).unwrap();
        let b = kid(&xa, &xb, 3, 10, 4, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ssim_identical_is_one() {
        let img = ImageTensor::new(8, 8, (0..192).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        assert!((ssim(&img, &img, 8, 0.01, 0.03).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_vs_negation_matches_hand_formula() {
        let a = ImageTensor::new(8, 8, vec![0.0; 192]).unwrap();
        let b = ImageTensor::new(8, 8, vec![1.0; 192]).unwrap();
        let got = ssim(&a, &b, 8, 0.01, 0.03).unwrap();
        // constant windows: (2·0·1 + C1)·C2 / ((0+1+C1)·C2) = C1/(1+C1)
        let c1 = 0.01f64.powi(2);
        let want = c1 / (1.0 + c1);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ssim_symmetric() {
        let mut rng = derive_rng(6, &["ssim-sym"]);
        let a = ImageTensor::new(8, 8, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let b = ImageTensor::new(8, 8, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let ab = ssim(&a, &b, 8, 0.01, 0.03).unwrap();
        let ba = ssim(&b, &a, 8, 0.01, 0.03).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn psnr_cases() {
        let a = ImageTensor::new(2, 2, vec![0.5; 12]).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        // MSE 0.01 -> 20 dB
        let b = ImageTensor::new(2, 2, vec![0.6; 12]).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn psnr_matches_scalar_recomputation() {
        let mut rng = derive_rng(7, &["psnr"]);
        let a = ImageTensor::new(4, 4, (0..48).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let b = ImageTensor::new(4, 4, (0..48).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let got = psnr(&a, &b, 1.0).unwrap();
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / 48.0;
        assert!((got - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn dice_iou_cases() {
        assert_eq!(dice_iou(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap(), (1.0, 1.0, 1.0));
        let (d, i, _) = dice_iou(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert_eq!((d, i), (0.0, 0.0));
        assert_eq!(dice_iou(&[0, 0], &[0, 0]).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn dice_iou_half_overlap_matches_enumeration() {
        // 2x2: pred covers left column, gt covers top row
        let pred = [1, 0, 1, 0];
        let gt = [1, 1, 0, 0];
        let (d, i, a) = dice_iou(&pred, &gt).unwrap();
        // tp=1, fp=1, fn=1, tn=1
        assert!((d - 2.0 / 4.0).abs() < 1e-12);
        assert!((i - 1.0 / 3.0).abs() < 1e-12);
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dice_iou_rejects_non_binary() {
        assert!(dice_iou(&[2, 0], &[1, 0]).is_err());
    }

    #[test]
    fn knn_exact_duplicates_are_perfect_at_k1() {
        let train = vec![
            (vec![1.0, 0.0], 0),
            (vec![0.9, 0.1], 0),
            (vec![0.0, 1.0], 1),
            (vec![0.1, 0.9], 1),
        ];
        let acc = knn_balanced_accuracy(&train, &train, 1).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn knn_hand_instance_matches_enumeration() {
        // 6 points on the unit circle; nearest-by-cosine worked out by hand
        let train = vec![
            (vec![1.0, 0.0], 0),
            (vec![0.95, 0.31], 0),
            (vec![0.0, 1.0], 1),
            (vec![-0.31, 0.95], 1),
        ];
        let test = vec![
            (vec![0.99, 0.14], 0),  // nearest: class 0, 0, then 1
            (vec![-0.14, 0.99], 1), // nearest: class 1, 1, then 0
        ];
        let acc = knn_balanced_accuracy(&train, &test, 3).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn knn_separated_blobs() {
        let mut rng = derive_rng(8, &["knn-blobs"]);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..200 {
            let class = i % 2;
            let center = if class == 0 { [3.0, 0.0] } else { [0.0, 3.0] };
            let f = vec![
                center[0] + rng.gen_range(-0.5..0.5f32),
                center[1] + rng.gen_range(-0.5..0.5f32),
            ];
            if i < 140 {
                train.push((f, class));
            } else {
                test.push((f, class));
            }
        }
        let acc = knn_balanced_accuracy(&train, &test, 5).unwrap();
        assert!(acc > 0.95, "{acc}");
    }

    use crate::rng::derive_rng;
    use rand::Rng;
}
