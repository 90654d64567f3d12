//! Generative-evaluation numerics on precomputed feature vectors.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
pub const FEATURE_VERSION: u8 = 1;
pub const DEFAULT_K: usize = 5;

/// Tolerance below zero for eigenvalues treated as rounding noise.
pub const EIGEN_TOLERANCE: f64 = 1e-8;

/// `n` feature vectors of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Argument("feature dimension must be positive".into()));
        }
        if data.len() != n * d {
            return Err(Error::Argument(format!(
                "{} values do not form {n} rows of dimension {d}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature in row {}", i / d)));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Argument("rows have different lengths".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }
}

/// `"FEAT"`, version byte, `u32` n, `u32` d, then `n·d` f32, all little-endian.
pub fn write_features<W: Write>(mut w: W, f: &FeatureSet) -> Result<()> {
    let n = u32::try_from(f.n).map_err(|_| Error::Argument("too many rows".into()))?;
    let d = u32::try_from(f.d).map_err(|_| Error::Argument("dimension too large".into()))?;
    let mut buf = Vec::with_capacity(13 + 4 * f.data.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.push(FEATURE_VERSION);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    for &v in &f.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 13 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("not a feature file".into()));
    }
    if bytes[4] != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {}", bytes[4])));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let body = &bytes[13..];
    if body.len() as u64 != 4 * n as u64 * d as u64 {
        return Err(Error::Format(format!(
            "feature body has {} bytes, header declares {n}x{d}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureSet::new(n, d, data)
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    read_features(std::io::BufReader::new(file))
}

pub fn save_features(path: &Path, f: &FeatureSet) -> Result<()> {
    let mut buf = Vec::new();
    write_features(&mut buf, f)?;
    std::fs::write(path, buf).map_err(|e| Error::io_at(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// `d x d`, row-major, symmetric.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.len() != d * d {
            return Err(Error::Argument(format!(
                "covariance of {} values does not match mean of dimension {d}",
                cov.len()
            )));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian statistics".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Sample mean and unbiased covariance, symmetrized.
pub fn fit_gaussian(features: &FeatureSet) -> Result<GaussianStats> {
    let (n, d) = (features.n, features.d);
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 samples, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for row in features.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for row in features.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    GaussianStats::new(mean, cov)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, clamped at zero. Values below
/// `-EIGEN_TOLERANCE` (relative to the spectrum scale) are rejected.
fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = symmetrize(m);
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} has non-finite entries")));
    }
    let mut eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("eigendecomposition of {what} failed")));
        }
        if *v < -EIGEN_TOLERANCE * scale {
            return Err(Error::Numeric(format!(
                "{what} is not positive semi-definite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m, what)?;
    let root = eig.eigenvalues.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + tr Σ₁ + tr Σ₂ − 2·tr((Σ₁^½ Σ₂ Σ₁^½)^½)`, clamped to `≥ 0`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (s1, s2) = (a.cov_matrix(), b.cov_matrix());
    let root1 = sqrt_psd(&s1, "first covariance")?;
    let inner = &root1 * &s2 * &root1;
    let cross: f64 = clamped_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let fid = mean_term + s1.trace() + s2.trace() - 2.0 * cross;
    if !fid.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(fid.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrdcReport {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub k: usize,
}

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance from each point to its k-th nearest neighbour in the same set,
/// excluding itself by index.
pub fn knn_radii(set: &FeatureSet, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k >= set.n {
        return Err(Error::Argument(format!("k = {k} requires 1 <= k < n = {}", set.n)));
    }
    Ok(par::map_range(set.n, |i| {
        let mut d: Vec<f64> = (0..set.n)
            .filter(|&j| j != i)
            .map(|j| euclidean(set.row(i), set.row(j)))
            .collect();
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
        d[k - 1]
    }))
}

/// Precision, recall, density and coverage with k-NN balls; a point exactly
/// on a ball's boundary counts as inside.
pub fn prdc(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<PrdcReport> {
    if real.d != fake.d {
        return Err(Error::Argument(format!(
            "dimension mismatch: real {} vs fake {}",
            real.d, fake.d
        )));
    }
    if k == 0 || k >= real.n.min(fake.n) {
        return Err(Error::Argument(format!(
            "k = {k} must satisfy 1 <= k < min(n_real, n_fake) = {}",
            real.n.min(fake.n)
        )));
    }
    let real_r = knn_radii(real, k)?;
    let fake_r = knn_radii(fake, k)?;

    // Per fake point: (inside some real ball, number of real balls containing it).
    let per_fake = par::map_range(fake.n, |f| {
        let mut hits = 0usize;
        for (r, radius) in real_r.iter().enumerate() {
            if euclidean(fake.row(f), real.row(r)) <= *radius {
                hits += 1;
            }
        }
        hits
    });
    let per_real = par::map_range(real.n, |r| {
        let recalled = (0..fake.n).any(|f| euclidean(real.row(r), fake.row(f)) <= fake_r[f]);
        let covered = (0..fake.n).any(|f| euclidean(fake.row(f), real.row(r)) <= real_r[r]);
        (recalled, covered)
    });

    let precision = per_fake.iter().filter(|&&h| h > 0).count() as f64 / fake.n as f64;
    let density = per_fake.iter().sum::<usize>() as f64 / (k as f64 * fake.n as f64);
    let recall = per_real.iter().filter(|p| p.0).count() as f64 / real.n as f64;
    let coverage = per_real.iter().filter(|p| p.1).count() as f64 / real.n as f64;
    Ok(PrdcReport {
        precision,
        recall,
        density,
        coverage,
        k,
    })
}

/// Mean over rows of `100 · max(cos(image_i, text_i), 0)`.
pub fn paired_cosine_score(image_feats: &FeatureSet, text_feats: &FeatureSet) -> Result<f64> {
    if image_feats.n != text_feats.n || image_feats.d != text_feats.d {
        return Err(Error::Argument(format!(
            "paired sets differ in shape: {}x{} vs {}x{}",
            image_feats.n, image_feats.d, text_feats.n, text_feats.d
        )));
    }
    if image_feats.n == 0 {
        return Err(Error::Argument("no pairs to score".into()));
    }
    let mut total = 0.0;
    for i in 0..image_feats.n {
        let (a, b) = (image_feats.row(i), text_feats.row(i));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Numeric(format!("row {i} has zero norm")));
        }
        let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        total += 100.0 * cos.max(0.0);
    }
    Ok(total / image_feats.n as f64)
}
