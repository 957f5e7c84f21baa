//! Synthetic-set measurements on oracle features: per-class recognizability
//! (F1), diversity, alignment FID, plus the two-model flip ratio.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datagen::ImageDataset;
use crate::downstream::{dataset_features, Classify, EvalReport, TrainedClassifier};
use crate::error::{Error, Result};

/// Ridge added to both covariances before the FID matrix square root.
pub const FID_EPS: f64 = 1e-6;

pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// One-vs-rest F1 per class; `None` for classes with no labelled image.
pub fn per_class_f1(predicted: &[usize], labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            let mut present = false;
            for (&p, &y) in predicted.iter().zip(labels) {
                present |= y == c;
                match (p == c, y == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            present.then(|| f1_score(tp, fp, fn_))
        })
        .collect()
}

/// Oracle F1 per class on a labelled synthetic set.
pub fn recognizability<C: Classify + ?Sized>(oracle: &C, synthetic: &ImageDataset) -> Result<Vec<Option<f64>>> {
    let pixels: Vec<f32> = synthetic.items().iter().flat_map(|i| i.pixels.iter().copied()).collect();
    let predicted = oracle.predict(&pixels, synthetic.len())?;
    let labels: Vec<usize> = synthetic.items().iter().map(|i| i.label).collect();
    Ok(per_class_f1(&predicted, &labels, oracle.num_classes()))
}

/// Mean over dimensions of the per-dimension population standard deviation
/// of `n × d` row-major features.
pub fn feature_diversity(features: &[f64], n: usize, d: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InsufficientData(format!("diversity needs at least 2 samples, got {n}")));
    }
    if features.len() != n * d || d == 0 {
        return Err(Error::shape("features", format!("{n}x{d}"), features.len()));
    }
    let stds: Vec<f64> = (0..d)
        .map(|j| {
            let mean = exact_sum((0..n).map(|i| features[i * d + j])) / n as f64;
            let var = exact_sum((0..n).map(|i| (features[i * d + j] - mean).powi(2))) / n as f64;
            var.sqrt()
        })
        .collect();
    Ok(exact_sum(stds) / d as f64)
}

/// Correctly rounded sum (Shewchuk partials, as in Python's `math.fsum`).
/// Independent of order, so duplicating or permuting rows leaves the
/// diversity bit-identical.
fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for i in 0..partials.len() {
            let mut y = partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // round-half-even correction when the remaining partials push past a tie
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

pub fn diversity(oracle: &TrainedClassifier, images: &[&[f32]]) -> Result<f64> {
    let f = dataset_features(oracle, images)?;
    let f: Vec<f64> = f.iter().map(|&x| x as f64).collect();
    feature_diversity(&f, images.len(), oracle.feature_dim())
}

fn moments(features: &[f64], n: usize, d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let x = DMatrix::from_row_slice(n, d, features);
    let mean = x.row_mean().transpose();
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / n as f64 + DMatrix::identity(d, d) * FID_EPS;
    (mean, cov)
}

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(m, 1e-14, 10_000).ok_or(Error::EigenNoConvergence)?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted (population moments, ridge
/// [`FID_EPS`]) to two `n × d` feature sets.
pub fn fid_from_features(a: &[f64], n_a: usize, b: &[f64], n_b: usize, d: usize) -> Result<f64> {
    if n_a < 2 || n_b < 2 {
        return Err(Error::InsufficientData("FID needs at least 2 samples per side".into()));
    }
    if a.len() != n_a * d || b.len() != n_b * d {
        return Err(Error::shape("features", format!("rows of {d}"), format!("{} and {}", a.len(), b.len())));
    }
    let (mu1, s1) = moments(a, n_a, d);
    let (mu2, s2) = moments(b, n_b, d);
    let r1 = psd_sqrt(s1.clone())?;
    let mut inner = &r1 * &s2 * &r1;
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(inner, 1e-14, 10_000).ok_or(Error::EigenNoConvergence)?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let fid = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(fid.max(0.0))
}

pub fn alignment_fid(oracle: &TrainedClassifier, synthetic: &[&[f32]], real: &[&[f32]]) -> Result<f64> {
    let d = oracle.feature_dim();
    let to64 = |v: Vec<f32>| v.into_iter().map(|x| x as f64).collect::<Vec<_>>();
    let a = to64(dataset_features(oracle, synthetic)?);
    let b = to64(dataset_features(oracle, real)?);
    fid_from_features(&a, synthetic.len(), &b, real.len(), d)
}

/// Fraction of test points where exactly one of the two models is correct.
pub fn flip_ratio(a: &EvalReport, b: &EvalReport) -> Result<f64> {
    if a.correct.len() != b.correct.len() {
        return Err(Error::shape("flip ratio", a.correct.len(), b.correct.len()));
    }
    if a.correct.is_empty() {
        return Err(Error::InsufficientData("empty reports".into()));
    }
    let flips = a.correct.iter().zip(&b.correct).filter(|(x, y)| x != y).count();
    Ok(flips as f64 / a.correct.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub class: usize,
    pub recognizability: Option<f64>,
    pub diversity: f64,
    pub fid: f64,
    pub accuracy: Option<f64>,
    pub n_synthetic: usize,
    pub n_real: usize,
}

/// Per-class metrics of one synthetic set against real class images.
pub fn class_metrics(
    method: &str,
    oracle: &TrainedClassifier,
    synthetic: &ImageDataset,
    real: &ImageDataset,
    downstream: Option<&EvalReport>,
) -> Result<Vec<MetricsRecord>> {
    let f1 = recognizability(oracle, synthetic)?;
    let classes = f1.len();
    (0..classes)
        .map(|c| {
            let syn: Vec<&[f32]> = synthetic.of_class(c).map(|i| i.pixels.as_slice()).collect();
            let re: Vec<&[f32]> = real.of_class(c).map(|i| i.pixels.as_slice()).collect();
            Ok(MetricsRecord {
                method: method.to_string(),
                class: c,
                recognizability: f1[c],
                diversity: diversity(oracle, &syn)?,
                fid: alignment_fid(oracle, &syn, &re)?,
                accuracy: downstream.and_then(|r| r.per_class.get(c).copied().flatten()),
                n_synthetic: syn.len(),
                n_real: re.len(),
            })
        })
        .collect()
}

pub const SCATTER_HEADER: &str = "method,class,recognizability,diversity,fid,accuracy,n_synthetic,n_real";

/// One row per (method, class), sorted by method then class.
pub fn export_scatter(records: &[MetricsRecord]) -> String {
    let mut rows: Vec<&MetricsRecord> = records.iter().collect();
    rows.sort_by(|a, b| (&a.method, a.class).cmp(&(&b.method, b.class)));
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(SCATTER_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{},{}\n",
            r.method,
            r.class,
            opt(r.recognizability),
            r.diversity,
            r.fid,
            opt(r.accuracy),
            r.n_synthetic,
            r.n_real
        ));
    }
    out
}
