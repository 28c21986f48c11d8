//! Kernel two-sample distances: squared maximum mean discrepancy with RBF or
//! cubic-polynomial kernels, the subset-averaged polynomial variant, and a
//! label-permutation significance test.

use crate::metrics::features::FeatureEmbedding;
use crate::parallel::par_map_indexed;
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    /// Gaussian kernel; bandwidth from the median pairwise distance of the
    /// pooled sample unless fixed.
    Rbf { bandwidth: Option<f64> },
    /// (u.v / d + 1)^3, the usual polynomial choice for feature distances.
    Poly3,
}

fn check_dims(x: &FeatureEmbedding, y: &FeatureEmbedding) -> Result<()> {
    if x.dim != y.dim {
        return Err(Error::DimMismatch(x.dim, y.dim));
    }
    if x.vectors.is_empty() || y.vectors.is_empty() {
        return Err(Error::InvalidRange("empty sample in MMD".into()));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Median pairwise Euclidean distance over the pooled rows.
fn median_heuristic(pooled: &[&[f64]]) -> f64 {
    let n = pooled.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

struct Gram {
    n: usize,
    m: usize,
    /// Full (n+m) x (n+m) kernel matrix over the pooled sample.
    k: Vec<f64>,
}

impl Gram {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.k[i * (self.n + self.m) + j]
    }
}

fn build_gram(x: &FeatureEmbedding, y: &FeatureEmbedding, kernel: Kernel) -> Gram {
    let pooled: Vec<&[f64]> = x
        .vectors
        .iter()
        .chain(y.vectors.iter())
        .map(|v| v.as_slice())
        .collect();
    let total = pooled.len();
    let d = x.dim as f64;
    let bandwidth = match kernel {
        Kernel::Rbf { bandwidth } => bandwidth.unwrap_or_else(|| median_heuristic(&pooled)),
        Kernel::Poly3 => 1.0,
    };
    let inv_two_bw2 = 1.0 / (2.0 * bandwidth * bandwidth);
    // Rows in parallel, assembled in index order.
    let rows = par_map_indexed(total, |i| {
        let mut row = vec![0.0; total];
        for j in 0..total {
            row[j] = match kernel {
                Kernel::Rbf { .. } => (-sq_dist(pooled[i], pooled[j]) * inv_two_bw2).exp(),
                Kernel::Poly3 => {
                    let v = dot(pooled[i], pooled[j]) / d + 1.0;
                    v * v * v
                }
            };
        }
        row
    });
    Gram {
        n: x.vectors.len(),
        m: y.vectors.len(),
        k: rows.concat(),
    }
}

/// MMD^2 from a Gram matrix under a label assignment: `labels[i]` true means
/// pooled item i belongs to the X sample. Unbiased U-statistic.
fn mmd2_from_gram(gram: &Gram, labels: &[bool]) -> f64 {
    let total = gram.n + gram.m;
    debug_assert_eq!(labels.len(), total);
    let n = labels.iter().filter(|&&l| l).count();
    let m = total - n;
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..total {
        for j in 0..total {
            if i == j {
                continue;
            }
            let kij = gram.at(i, j);
            match (labels[i], labels[j]) {
                (true, true) => kxx += kij,
                (false, false) => kyy += kij,
                (true, false) => kxy += kij,
                (false, true) => {}
            }
        }
    }
    kxx / (n * (n - 1)) as f64 + kyy / (m * (m - 1)) as f64 - 2.0 * kxy / (n * m) as f64
}

/// Unbiased U-statistic estimator of squared MMD.
pub fn mmd2_unbiased(x: &FeatureEmbedding, y: &FeatureEmbedding, kernel: Kernel) -> Result<f64> {
    check_dims(x, y)?;
    if x.vectors.len() < 2 || y.vectors.len() < 2 {
        return Err(Error::InvalidRange(
            "unbiased MMD needs at least 2 samples per side".into(),
        ));
    }
    let gram = build_gram(x, y, kernel);
    let labels: Vec<bool> = (0..gram.n + gram.m).map(|i| i < gram.n).collect();
    Ok(mmd2_from_gram(&gram, &labels))
}

/// Biased V-statistic (includes diagonal terms); exactly zero for identical
/// sample sets.
pub fn mmd2_biased(x: &FeatureEmbedding, y: &FeatureEmbedding, kernel: Kernel) -> Result<f64> {
    check_dims(x, y)?;
    let gram = build_gram(x, y, kernel);
    let (n, m) = (gram.n, gram.m);
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            kxx += gram.at(i, j);
        }
    }
    for i in 0..m {
        for j in 0..m {
            kyy += gram.at(n + i, n + j);
        }
    }
    for i in 0..n {
        for j in 0..m {
            kxy += gram.at(i, n + j);
        }
    }
    Ok(kxx / (n * n) as f64 + kyy / (m * m) as f64 - 2.0 * kxy / (n * m) as f64)
}

/// Polynomial-kernel MMD^2 averaged over `subsets` random subsets of size
/// `min(n, m, subset_cap)` drawn without replacement from each side.
pub fn kid(
    x: &FeatureEmbedding,
    y: &FeatureEmbedding,
    subsets: usize,
    subset_cap: usize,
    rng: &mut Stream,
) -> Result<f64> {
    check_dims(x, y)?;
    let size = x.vectors.len().min(y.vectors.len()).min(subset_cap);
    if size < 2 {
        return Err(Error::InvalidRange("KID subset size below 2".into()));
    }
    let mut total = 0.0;
    for _ in 0..subsets {
        let xi = sample_without_replacement(x.vectors.len(), size, rng);
        let yi = sample_without_replacement(y.vectors.len(), size, rng);
        let xs = FeatureEmbedding {
            dim: x.dim,
            vectors: xi.iter().map(|&i| x.vectors[i].clone()).collect(),
            featurizer: x.featurizer.clone(),
        };
        let ys = FeatureEmbedding {
            dim: y.dim,
            vectors: yi.iter().map(|&i| y.vectors[i].clone()).collect(),
            featurizer: y.featurizer.clone(),
        };
        total += mmd2_unbiased(&xs, &ys, Kernel::Poly3)?;
    }
    Ok(total / subsets as f64)
}

fn sample_without_replacement(n: usize, k: usize, rng: &mut Stream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.next_below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Result of the label-permutation test.
#[derive(Clone, Debug)]
pub struct PermutationTest {
    pub statistic: f64,
    /// Fraction of permuted statistics at least as large as the observed one.
    pub p_value: f64,
    /// 95th percentile of the permutation null.
    pub null_q95: f64,
}

/// Two-sample permutation test on the unbiased MMD^2 statistic. The Gram
/// matrix is computed once (bandwidth from the pooled sample) and labels are
/// reshuffled `permutations` times.
pub fn permutation_test(
    x: &FeatureEmbedding,
    y: &FeatureEmbedding,
    kernel: Kernel,
    permutations: usize,
    rng: &mut Stream,
) -> Result<PermutationTest> {
    check_dims(x, y)?;
    if x.vectors.len() < 2 || y.vectors.len() < 2 {
        return Err(Error::InvalidRange(
            "permutation test needs at least 2 samples per side".into(),
        ));
    }
    let gram = build_gram(x, y, kernel);
    let total = gram.n + gram.m;
    let base_labels: Vec<bool> = (0..total).map(|i| i < gram.n).collect();
    let statistic = mmd2_from_gram(&gram, &base_labels);
    let mut null = Vec::with_capacity(permutations);
    let mut labels = base_labels;
    for _ in 0..permutations {
        // Fisher-Yates over the pooled labels.
        for i in (1..total).rev() {
            let j = rng.next_below(i as u64 + 1) as usize;
            labels.swap(i, j);
        }
        null.push(mmd2_from_gram(&gram, &labels));
    }
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    // Add-one correction keeps the p-value away from an exact zero.
    let p_value = (exceed + 1) as f64 / (permutations + 1) as f64;
    null.sort_by(f64::total_cmp);
    let q_idx = ((permutations as f64) * 0.95) as usize;
    let null_q95 = null[q_idx.min(permutations - 1)];
    Ok(PermutationTest {
        statistic,
        p_value,
        null_q95,
    })
}
