//! Evaluation kernels: ranking metrics, distribution distances in latent or
//! embedding space, and gap-stratified reporting.

use crate::error::{Error, Result};
use crate::seed::rng;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// AUROC as the concordance probability with ties counted one half,
/// computed from average ranks (Mann-Whitney).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary_inputs(scores, labels, 0)?;
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = n as f64 - n_pos;
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l)
        .map(|(_, r)| r)
        .sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Area under the precision-recall curve via step-wise integration over
/// descending unique score thresholds.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary_inputs(scores, labels, 0)?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let precision = tp / (tp + fp);
        let recall = tp / n_pos;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

fn check_binary_inputs(scores: &[f64], labels: &[bool], label_index: usize) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels length mismatch"));
    }
    if scores.is_empty() {
        return Err(Error::data("empty inputs"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::data(format!(
            "label {label_index} has a single class; metric undefined"
        )));
    }
    Ok(())
}

/// Macro-averaged metric over L label columns; errors name the offending
/// label index.
pub fn macro_metric(
    scores: &ArrayView2<f64>,
    labels: &ArrayView2<bool>,
    metric: fn(&[f64], &[bool]) -> Result<f64>,
) -> Result<f64> {
    if scores.dim() != labels.dim() {
        return Err(Error::shape("scores/labels shape mismatch"));
    }
    let l = scores.ncols();
    let mut total = 0.0;
    for c in 0..l {
        let s: Vec<f64> = scores.column(c).to_vec();
        let y: Vec<bool> = labels.column(c).to_vec();
        check_binary_inputs(&s, &y, c)?;
        total += metric(&s, &y)?;
    }
    Ok(total / l as f64)
}

fn covariance(x: &ArrayView2<f64>, mean: &ArrayView1<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in x.rows() {
        let centered: Vec<f64> = row.iter().zip(mean.iter()).map(|(a, m)| a - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[[i, j]] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[[i, j]] = cov[[j, i]];
        }
        for j in i..d {
            cov[[i, j]] /= denom;
            if j > i {
                cov[[j, i]] = cov[[i, j]];
            }
        }
    }
    cov
}

fn sqrt_psd(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&sqrt_vals)
        * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fit to two sample sets (rows are
/// samples). Covariances are ridge-regularized when a set has fewer rows
/// than dimensions+1.
pub fn frechet_distance(samples_a: &ArrayView2<f64>, samples_b: &ArrayView2<f64>) -> Result<f64> {
    let (na, d) = samples_a.dim();
    let (nb, db) = samples_b.dim();
    if d != db {
        return Err(Error::shape("sample sets have different dimensionality"));
    }
    if na < 2 || nb < 2 {
        return Err(Error::data("need at least 2 samples per set"));
    }
    let mean_a = samples_a.mean_axis(ndarray::Axis(0)).unwrap();
    let mean_b = samples_b.mean_axis(ndarray::Axis(0)).unwrap();
    let mut cov_a = covariance(samples_a, &mean_a.view());
    let mut cov_b = covariance(samples_b, &mean_b.view());
    // Ill-posed covariance: regularize towards a small isotropic ridge.
    let ridge = 1e-6;
    if na <= d {
        for i in 0..d {
            cov_a[[i, i]] += ridge;
        }
    }
    if nb <= d {
        for i in 0..d {
            cov_b[[i, i]] += ridge;
        }
    }
    let ca = nalgebra::DMatrix::from_row_slice(d, d, cov_a.as_slice().unwrap());
    let cb = nalgebra::DMatrix::from_row_slice(d, d, cov_b.as_slice().unwrap());
    let sa = sqrt_psd(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(inner);
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term: f64 = mean_a
        .iter()
        .zip(mean_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let dist = mean_term + ca.trace() + cb.trace() - 2.0 * trace_sqrt;
    Ok(dist.max(0.0))
}

/// Exact 1-d 2-Wasserstein distance between empirical measures with uniform
/// weights (quantile-function matching; handles unequal sample counts).
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xb.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut level = 0.0f64;
    let mut acc = 0.0;
    while i < xa.len() && j < xb.len() {
        let next_a = (i + 1) as f64 / n;
        let next_b = (j + 1) as f64 / m;
        let next = next_a.min(next_b);
        let width = next - level;
        let diff = xa[i] - xb[j];
        acc += width * diff * diff;
        level = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.max(0.0).sqrt()
}

/// Sliced 2-Wasserstein distance: mean of exact 1-d distances over seeded
/// random unit projections.
pub fn sliced_wasserstein(
    samples_a: &ArrayView2<f64>,
    samples_b: &ArrayView2<f64>,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    let (na, d) = samples_a.dim();
    let (nb, db) = samples_b.dim();
    if d != db {
        return Err(Error::shape("sample sets have different dimensionality"));
    }
    if na == 0 || nb == 0 {
        return Err(Error::data("empty sample set"));
    }
    if n_projections == 0 {
        return Err(Error::config("need at least one projection"));
    }
    let mut r = rng(seed);
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            dir = (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
            norm = 1.0;
        }
        for x in dir.iter_mut() {
            *x /= norm;
        }
        let proj = |rows: &ArrayView2<f64>| -> Vec<f64> {
            rows.rows()
                .into_iter()
                .map(|row| row.iter().zip(&dir).map(|(a, b)| a * b).sum())
                .collect()
        };
        total += wasserstein_1d(&proj(samples_a), &proj(samples_b));
    }
    Ok(total / n_projections as f64)
}

/// Pluggable image-to-vector map for Fréchet-style image metrics.
pub trait ImageEmbedder {
    fn embed(&self, pixels: &Array2<f64>) -> Vec<f64>;
}

/// Identity embedding: flattened pixels.
pub struct FlattenEmbedder;

impl ImageEmbedder for FlattenEmbedder {
    fn embed(&self, pixels: &Array2<f64>) -> Vec<f64> {
        pixels.iter().copied().collect()
    }
}

/// Fréchet distance over embedded image sets.
pub fn fid(
    images_a: &[Array2<f64>],
    images_b: &[Array2<f64>],
    embedder: &dyn ImageEmbedder,
) -> Result<f64> {
    let embed_all = |imgs: &[Array2<f64>]| -> Result<Array2<f64>> {
        if imgs.is_empty() {
            return Err(Error::data("empty image set"));
        }
        let rows: Vec<Vec<f64>> = imgs.iter().map(|im| embedder.embed(im)).collect();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((imgs.len(), d), flat)
            .map_err(|e| Error::shape(format!("inconsistent embedding dims: {e}")))
    };
    let ea = embed_all(images_a)?;
    let eb = embed_all(images_b)?;
    frechet_distance(&ea.view(), &eb.view())
}

/// Pearson correlation between two equal-length slices.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::data("pearson needs two equal-length series (n >= 2)"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().sum::<f64>() / n,
        b.iter().sum::<f64>() / n,
    );
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::data("pearson undefined for constant series"));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// One prediction run: macro scores per sample, tagged with its seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    /// n_samples x L' probabilities.
    pub scores: Array2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StratumMetrics {
    pub stratum: String,
    pub count: usize,
    /// Fraction of positive labels (averaged over label columns).
    pub prevalence: f64,
    /// Absent when the stratum is empty or single-class for every label.
    pub auroc_mean: Option<f64>,
    pub auroc_std: Option<f64>,
    pub auprc_mean: Option<f64>,
    pub auprc_std: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StratifiedReport {
    pub seeds: Vec<u64>,
    pub strata: Vec<StratumMetrics>,
}

/// Gap strata (hours): [0,12), [12,24), [24,36), [36, inf), plus overall.
pub const STRATA: [(&str, i64, i64); 5] = [
    ("overall", 0, i64::MAX),
    ("delta<12", 0, 12),
    ("12<=delta<24", 12, 24),
    ("24<=delta<36", 24, 36),
    ("delta>=36", 36, i64::MAX),
];

/// Per-stratum mean and std (over seeds) of macro AUROC/AUPRC.
pub fn stratified_eval(
    runs: &[SeedRun],
    labels: &ArrayView2<bool>,
    gap_delta: &[i64],
) -> Result<StratifiedReport> {
    if runs.is_empty() {
        return Err(Error::data("no prediction runs"));
    }
    let n = labels.nrows();
    for run in runs {
        if run.scores.nrows() != n || run.scores.ncols() != labels.ncols() {
            return Err(Error::shape("run scores do not match labels"));
        }
    }
    if gap_delta.len() != n {
        return Err(Error::shape("gap_delta does not match sample count"));
    }
    let mut strata = Vec::new();
    for (name, lo, hi) in STRATA {
        let idx: Vec<usize> = (0..n)
            .filter(|&i| {
                let d = gap_delta[i].max(0);
                name == "overall" || (d >= lo && (hi == i64::MAX || d < hi))
            })
            .collect();
        let count = idx.len();
        let l = labels.ncols();
        let prevalence = if count == 0 {
            0.0
        } else {
            idx.iter()
                .map(|&i| {
                    (0..l).filter(|&c| labels[[i, c]]).count() as f64 / l as f64
                })
                .sum::<f64>()
                / count as f64
        };
        let mut aurocs = Vec::new();
        let mut auprcs = Vec::new();
        for run in runs {
            let mut roc_acc = Vec::new();
            let mut prc_acc = Vec::new();
            for c in 0..l {
                let s: Vec<f64> = idx.iter().map(|&i| run.scores[[i, c]]).collect();
                let y: Vec<bool> = idx.iter().map(|&i| labels[[i, c]]).collect();
                if y.iter().any(|&v| v) && y.iter().any(|&v| !v) {
                    roc_acc.push(auroc(&s, &y)?);
                    prc_acc.push(auprc(&s, &y)?);
                }
            }
            if !roc_acc.is_empty() {
                aurocs.push(roc_acc.iter().sum::<f64>() / roc_acc.len() as f64);
                auprcs.push(prc_acc.iter().sum::<f64>() / prc_acc.len() as f64);
            }
        }
        let summarize = |v: &[f64]| -> (Option<f64>, Option<f64>) {
            if v.is_empty() {
                return (None, None);
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            (Some(m), Some(std))
        };
        let (auroc_mean, auroc_std) = summarize(&aurocs);
        let (auprc_mean, auprc_std) = summarize(&auprcs);
        strata.push(StratumMetrics {
            stratum: name.to_string(),
            count,
            prevalence,
            auroc_mean,
            auroc_std,
            auprc_mean,
            auprc_std,
        });
    }
    Ok(StratifiedReport {
        seeds: runs.iter().map(|r| r.seed).collect(),
        strata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn auroc_matches_hand_oracle() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        // 3 of 4 positive/negative pairs concordant.
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.75);

        let perfect = auroc(&[0.0, 0.1, 0.9, 1.0], &[false, false, true, true]).unwrap();
        assert_eq!(perfect, 1.0);
        assert_eq!(
            auprc(&[0.0, 0.1, 0.9, 1.0], &[false, false, true, true]).unwrap(),
            1.0
        );

        let ties = auroc(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]).unwrap();
        assert_eq!(ties, 0.5);
    }

    #[test]
    fn single_class_errors_name_the_label() {
        let err = auroc(&[0.1, 0.2], &[true, true]).unwrap_err();
        assert!(err.to_string().contains("label 0"));
        let scores = arr2(&[[0.1, 0.3], [0.9, 0.2]]);
        let labels = arr2(&[[true, true], [false, true]]);
        let err = macro_metric(&scores.view(), &labels.view(), auroc).unwrap_err();
        assert!(err.to_string().contains("label 1"));
    }

    fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    fn brute_force_auprc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s >= t && **l)
                .count() as f64;
            let fp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s >= t && !**l)
                .count() as f64;
            let precision = tp / (tp + fp);
            let recall = tp / n_pos;
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    #[test]
    fn ranking_metrics_equal_brute_force_on_random_suite() {
        let mut r = crate::seed::rng(1234);
        use rand::Rng;
        for _ in 0..1000 {
            let n = r.gen_range(2..=10);
            let scores: Vec<f64> = (0..n)
                .map(|_| (r.gen_range(0..8) as f64) / 7.0) // many ties
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| r.gen::<bool>()).collect();
            let n_pos = labels.iter().filter(|&&l| l).count();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let brute = brute_force_auroc(&scores, &labels);
            assert_eq!(fast, brute, "auroc mismatch on {scores:?} {labels:?}");
            let fast_p = auprc(&scores, &labels).unwrap();
            let brute_p = brute_force_auprc(&scores, &labels);
            assert_eq!(fast_p, brute_p, "auprc mismatch on {scores:?} {labels:?}");
        }
    }

    #[test]
    fn frechet_basics() {
        let a = arr2(&[[0.0, 1.0], [1.0, 0.0], [0.5, 0.5], [0.2, 0.8]]);
        assert!(frechet_distance(&a.view(), &a.view()).unwrap() < 1e-8);

        // 1-d closed form: (mean diff)^2 + (std diff)^2 with equal stds.
        let x = arr2(&[[-1.0], [0.0], [1.0]]);
        let y = arr2(&[[0.0], [1.0], [2.0]]);
        let d = frechet_distance(&x.view(), &y.view()).unwrap();
        assert!((d - 1.0).abs() < 1e-10);

        let too_few = arr2(&[[1.0]]);
        assert!(frechet_distance(&too_few.view(), &x.view()).is_err());
    }

    #[test]
    fn frechet_symmetry_and_nonnegativity() {
        let mut r = crate::seed::rng(7);
        for _ in 0..10 {
            let a = Array2::from_shape_fn((12, 3), |_| {
                rand_distr::Distribution::<f64>::sample(&StandardNormal, &mut r)
            });
            let b = Array2::from_shape_fn((9, 3), |_| {
                rand_distr::Distribution::<f64>::sample(&StandardNormal, &mut r) + 0.5
            });
            let ab = frechet_distance(&a.view(), &b.view()).unwrap();
            let ba = frechet_distance(&b.view(), &a.view()).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() < 1e-8);
        }
    }

    /// Independent route: trace sqrtm(Ca*Cb) from the (symmetrized)
    /// Denman-Beavers iteration instead of the eigendecomposition path.
    #[test]
    fn frechet_matches_matrix_sqrt_iteration_oracle() {
        let mut r = crate::seed::rng(99);
        let a = Array2::from_shape_fn((40, 3), |_| {
            rand_distr::Distribution::<f64>::sample(&StandardNormal, &mut r)
        });
        let b = Array2::from_shape_fn((35, 3), |_| {
            2.0 * rand_distr::Distribution::<f64>::sample(&StandardNormal, &mut r) + 1.0
        });
        let fast = frechet_distance(&a.view(), &b.view()).unwrap();

        let mean = |x: &Array2<f64>| x.mean_axis(ndarray::Axis(0)).unwrap();
        let (ma, mb) = (mean(&a), mean(&b));
        let ca = covariance(&a.view(), &ma.view());
        let cb = covariance(&b.view(), &mb.view());
        let d = 3;
        let na_ca = nalgebra::DMatrix::from_row_slice(d, d, ca.as_slice().unwrap());
        let na_cb = nalgebra::DMatrix::from_row_slice(d, d, cb.as_slice().unwrap());
        let prod = &na_ca * &na_cb;
        // Denman-Beavers iteration for the matrix square root.
        let mut y = prod.clone();
        let mut z = nalgebra::DMatrix::<f64>::identity(d, d);
        for _ in 0..60 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            let y_next = (&y + &zi) * 0.5;
            let z_next = (&z + &yi) * 0.5;
            y = y_next;
            z = z_next;
        }
        let mean_term: f64 = ma
            .iter()
            .zip(mb.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let oracle = mean_term + na_ca.trace() + na_cb.trace() - 2.0 * y.trace();
        assert!(
            (fast - oracle).abs() < 1e-6,
            "frechet {fast} vs iteration oracle {oracle}"
        );
    }

    #[test]
    fn wasserstein_properties() {
        let a = arr2(&[[0.0]]);
        let b = arr2(&[[3.0]]);
        let d = sliced_wasserstein(&a.view(), &b.view(), 1, 0).unwrap();
        assert!((d - 3.0).abs() < 1e-12);

        let x = arr2(&[[0.0], [1.0], [2.0]]);
        assert_eq!(sliced_wasserstein(&x.view(), &x.view(), 8, 0).unwrap(), 0.0);

        let shifted = arr2(&[[0.7], [1.7], [2.7]]);
        let d = sliced_wasserstein(&x.view(), &shifted.view(), 4, 1).unwrap();
        assert!((d - 0.7).abs() < 1e-12);

        let empty = Array2::<f64>::zeros((0, 1));
        assert!(sliced_wasserstein(&empty.view(), &x.view(), 4, 0).is_err());
    }

    #[test]
    fn wasserstein_1d_unequal_sizes() {
        // Quantile coupling of {0,1} (w 1/2 each) vs {0,0,3} (w 1/3 each):
        // segments: [0,1/3):(0,0) [1/3,1/2):(0,0) [1/2,2/3):(1,0) [2/3,1):(1,3)
        let d = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.0, 3.0]);
        let expect = ((1.0 / 6.0) * 1.0 + (1.0 / 3.0) * 4.0f64).sqrt();
        assert!((d - expect).abs() < 1e-12);
    }

    #[test]
    fn sliced_wasserstein_permutation_invariance() {
        let a = arr2(&[[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]);
        let a_perm = arr2(&[[4.0, 5.0], [0.0, 1.0], [2.0, 3.0]]);
        let b = arr2(&[[1.0, 1.0], [3.0, 2.0], [0.0, 4.0]]);
        let b_perm = arr2(&[[3.0, 2.0], [0.0, 4.0], [1.0, 1.0]]);
        let d1 = sliced_wasserstein(&a.view(), &b.view(), 16, 5).unwrap();
        let d2 = sliced_wasserstein(&a_perm.view(), &b_perm.view(), 16, 5).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn fid_reduces_to_pixel_frechet_with_flatten() {
        let imgs_a: Vec<Array2<f64>> = (0..4)
            .map(|i| Array2::from_elem((2, 2), i as f64 * 0.1))
            .collect();
        let imgs_b: Vec<Array2<f64>> = (0..4)
            .map(|i| Array2::from_elem((2, 2), 0.5 + i as f64 * 0.1))
            .collect();
        let f = fid(&imgs_a, &imgs_b, &FlattenEmbedder).unwrap();
        let flat = |v: &[Array2<f64>]| {
            Array2::from_shape_vec(
                (v.len(), 4),
                v.iter().flat_map(|im| im.iter().copied()).collect(),
            )
            .unwrap()
        };
        let direct =
            frechet_distance(&flat(&imgs_a).view(), &flat(&imgs_b).view()).unwrap();
        assert_eq!(f, direct);
        assert!(fid(&imgs_a, &imgs_a, &FlattenEmbedder).unwrap() < 1e-8);
    }

    #[test]
    fn stratified_eval_partitions_and_degenerates() {
        let n = 8;
        let labels = Array2::from_shape_fn((n, 1), |(i, _)| i % 2 == 0);
        let gap: Vec<i64> = vec![0, 5, 13, 20, 30, 30, 40, 50];
        let scores = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / n as f64);
        let runs: Vec<SeedRun> = (0..5)
            .map(|s| SeedRun {
                seed: s,
                scores: scores.clone(),
            })
            .collect();
        let rep = stratified_eval(&runs, &labels.view(), &gap).unwrap();
        let overall = &rep.strata[0];
        assert_eq!(overall.count, n);
        let sum: usize = rep.strata[1..].iter().map(|s| s.count).sum();
        assert_eq!(sum, n);
        // 5 identical runs -> zero std.
        assert_eq!(overall.auroc_std, Some(0.0));

        // All samples in the first stratum -> others empty/absent.
        let gap0 = vec![0i64; n];
        let rep0 = stratified_eval(&runs, &labels.view(), &gap0).unwrap();
        assert_eq!(rep0.strata[1].count, n);
        assert_eq!(rep0.strata[1].auroc_mean, rep0.strata[0].auroc_mean);
        assert_eq!(rep0.strata[2].count, 0);
        assert!(rep0.strata[2].auroc_mean.is_none());
    }

    #[test]
    fn pearson_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [4.0, 3.0, 2.0, 1.0];
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }
}
