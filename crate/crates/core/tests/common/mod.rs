//! Independent oracles and random-instance helpers shared by integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use t2i_forge::metrics::FeatureSet;
use t2i_forge::rng::SplitMix64;

pub type Mat = Vec<Vec<f64>>;

pub fn identity(n: usize) -> Mat {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; p]; n];
    for i in 0..n {
        for k in 0..m {
            for j in 0..p {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut aug: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, pivot);
        let p = aug[col][col];
        assert!(p.abs() > 1e-300, "singular matrix");
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    let pivot_row = aug[col].clone();
                    for (v, p) in aug[r].iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn trace(a: &Mat) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

/// Principal square root by the Denman-Beavers iteration; valid for
/// matrices with eigenvalues off the closed negative real axis.
pub fn sqrtm_denman_beavers(m: &Mat) -> Mat {
    let n = m.len();
    let mut y = m.clone();
    let mut z = identity(n);
    for _ in 0..100 {
        let (yi, zi) = (inverse(&y), inverse(&z));
        let ny: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        let delta: f64 = ny.iter().flatten().zip(y.iter().flatten()).map(|(a, b)| (a - b).abs()).sum();
        y = ny;
        z = nz;
        if delta < 1e-15 * n as f64 {
            break;
        }
    }
    y
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2·(Σ₁Σ₂)^½)` with the non-symmetric product.
pub fn fid_oracle(m1: &[f64], c1: &Mat, m2: &[f64], c2: &Mat) -> f64 {
    let mean: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    let root = sqrtm_denman_beavers(&matmul(c1, c2));
    mean + trace(c1) + trace(c2) - 2.0 * trace(&root)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Random symmetric positive-definite `d x d` matrix `A·Aᵀ + εI`.
pub fn random_spd(rng: &mut SplitMix64, d: usize, eps: f64) -> Mat {
    let a: Mat = (0..d).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let mut s = matmul(&a, &transpose(&a));
    for (i, row) in s.iter_mut().enumerate() {
        row[i] += eps;
    }
    s
}

pub fn random_features(rng: &mut SplitMix64, n: usize, d: usize, scale: f64, shift: f64) -> FeatureSet {
    let data = (0..n * d).map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal)).collect();
    FeatureSet::new(n, d, data).unwrap()
}

/// Features on a small integer lattice, so exact distance ties are common.
pub fn lattice_features(rng: &mut SplitMix64, n: usize, d: usize) -> FeatureSet {
    let data = (0..n * d).map(|_| rng.random_range(-3..=3) as f64).collect();
    FeatureSet::new(n, d, data).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrdcOracle {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

fn rows(f: &FeatureSet) -> Vec<Vec<f64>> {
    (0..f.n()).map(|i| f.row(i).to_vec()).collect()
}

fn kth_radius(points: &[Vec<f64>], i: usize, k: usize) -> f64 {
    let mut all: Vec<f64> = Vec::new();
    for (j, p) in points.iter().enumerate() {
        if j != i {
            all.push(dist(&points[i], p));
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all[k - 1]
}

/// Brute-force PRDC: full sort for each k-NN radius, `≤` on every ball test.
pub fn prdc_oracle(real: &FeatureSet, fake: &FeatureSet, k: usize) -> PrdcOracle {
    let (r, f) = (rows(real), rows(fake));
    let rr: Vec<f64> = (0..r.len()).map(|i| kth_radius(&r, i, k)).collect();
    let fr: Vec<f64> = (0..f.len()).map(|i| kth_radius(&f, i, k)).collect();
    let mut precision = 0usize;
    let mut density = 0usize;
    for fp in &f {
        let mut inside_any = false;
        for (i, rp) in r.iter().enumerate() {
            if dist(fp, rp) <= rr[i] {
                inside_any = true;
                density += 1;
            }
        }
        if inside_any {
            precision += 1;
        }
    }
    let mut recall = 0usize;
    let mut coverage = 0usize;
    for (i, rp) in r.iter().enumerate() {
        if f.iter().enumerate().any(|(j, fp)| dist(rp, fp) <= fr[j]) {
            recall += 1;
        }
        if f.iter().any(|fp| dist(fp, rp) <= rr[i]) {
            coverage += 1;
        }
    }
    PrdcOracle {
        precision: precision as f64 / f.len() as f64,
        recall: recall as f64 / r.len() as f64,
        density: density as f64 / (k as f64 * f.len() as f64),
        coverage: coverage as f64 / r.len() as f64,
    }
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_rotation(rng: &mut SplitMix64, d: usize) -> Mat {
    let mut q: Mat = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q
}

pub fn apply_isometry(f: &FeatureSet, rot: &Mat, shift: &[f64]) -> FeatureSet {
    let d = f.d();
    let mut data = Vec::with_capacity(f.n() * d);
    for i in 0..f.n() {
        let row = f.row(i);
        for r in 0..d {
            data.push(shift[r] + (0..d).map(|c| rot[r][c] * row[c]).sum::<f64>());
        }
    }
    FeatureSet::new(f.n(), d, data).unwrap()
}
