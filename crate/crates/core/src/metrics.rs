//! Similarity between an original attribution `z` and a perturbed one `z'`:
//! top-k intersection, Spearman rank correlation, center-of-mass dislocation
//! and cosine distance, plus the log-budget AUC used to aggregate them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{normalize_map, AttributionError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("degenerate attribution (all scores zero)")]
    Degenerate,
    #[error("undefined correlation: constant ranking")]
    UndefinedCorrelation,
    #[error("maps have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("k = {k} outside 1..={d}")]
    InvalidK { k: usize, d: usize },
    #[error("geometry covers {geometry} features, map has {map}")]
    GeometryMismatch { geometry: usize, map: usize },
    #[error("log-AUC needs at least two points")]
    TooFewPoints,
    #[error("duplicate budget {0} in curve")]
    DuplicateBudget(f64),
    #[error("budgets must be positive, got {0}")]
    NonPositiveBudget(f64),
}

impl From<AttributionError> for MetricError {
    fn from(_: AttributionError) -> Self {
        MetricError::Degenerate
    }
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Layout of features, used for spatial centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridGeometry {
    /// Row-major `height × width` image; coordinates are (row, col).
    Grid { height: usize, width: usize },
    /// Coordinate of feature `i` is `i`.
    Flat { len: usize },
}

impl GridGeometry {
    pub fn len(&self) -> usize {
        match *self {
            GridGeometry::Grid { height, width } => height * width,
            GridGeometry::Flat { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coordinates(&self, i: usize) -> Vec<f64> {
        match *self {
            GridGeometry::Grid { width, .. } => vec![(i / width) as f64, (i % width) as f64],
            GridGeometry::Flat { .. } => vec![i as f64],
        }
    }

    /// Coordinate axes as rows: `axes × d`, row-major.
    pub fn coordinate_matrix(&self) -> (usize, Vec<f64>) {
        let d = self.len();
        let axes = match self {
            GridGeometry::Grid { .. } => 2,
            GridGeometry::Flat { .. } => 1,
        };
        let mut m = vec![0.0; axes * d];
        for i in 0..d {
            for (a, c) in self.coordinates(i).into_iter().enumerate() {
                m[a * d + i] = c;
            }
        }
        (axes, m)
    }
}

fn same_len(z: &[f64], z_adv: &[f64]) -> Result<()> {
    if z.len() != z_adv.len() {
        return Err(MetricError::LengthMismatch(z.len(), z_adv.len()));
    }
    Ok(())
}

/// Indices of the `k` largest entries of `n(z)`; ties go to the smaller index.
pub fn top_k_indices(z: &[f64], k: usize) -> Result<Vec<usize>> {
    let n = normalize_map(z)?;
    if k == 0 || k > n.len() {
        return Err(MetricError::InvalidK { k, d: n.len() });
    }
    let mut idx: Vec<usize> = (0..n.len()).collect();
    idx.sort_by(|&a, &b| n[b].total_cmp(&n[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Mass of `n(z')` on the top-k features of `n(z)`.
pub fn topk_intersection(z: &[f64], z_adv: &[f64], k: usize) -> Result<f64> {
    same_len(z, z_adv)?;
    let top = top_k_indices(z, k)?;
    let n_adv = normalize_map(z_adv)?;
    Ok(top.iter().map(|&i| n_adv[i]).sum())
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            ranks[i] = avg;
        }
        start = end + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(MetricError::UndefinedCorrelation);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Which values are ranked by [`spearman_correlation_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBasis {
    /// Normalized absolute scores `n(z)`.
    #[default]
    Normalized,
    /// Signed scores as given.
    Raw,
}

/// Spearman correlation of `n(z)` and `n(z')`.
pub fn spearman_correlation(z: &[f64], z_adv: &[f64]) -> Result<f64> {
    spearman_correlation_with(z, z_adv, RankBasis::Normalized)
}

pub fn spearman_correlation_with(z: &[f64], z_adv: &[f64], basis: RankBasis) -> Result<f64> {
    same_len(z, z_adv)?;
    if z.len() < 2 {
        return Err(MetricError::UndefinedCorrelation);
    }
    let (a, b) = match basis {
        RankBasis::Normalized => (normalize_map(z)?, normalize_map(z_adv)?),
        RankBasis::Raw => (z.to_vec(), z_adv.to_vec()),
    };
    pearson(&average_ranks(&a), &average_ranks(&b))
}

/// `Σᵢ n(z)ᵢ · coord(i)`.
pub fn mass_center(z: &[f64], geom: GridGeometry) -> Result<Vec<f64>> {
    if geom.len() != z.len() {
        return Err(MetricError::GeometryMismatch { geometry: geom.len(), map: z.len() });
    }
    let n = normalize_map(z)?;
    let mut center = vec![0.0; geom.coordinates(0).len()];
    for (i, w) in n.iter().enumerate() {
        for (c, v) in center.iter_mut().zip(geom.coordinates(i)) {
            *c += w * v;
        }
    }
    Ok(center)
}

/// Euclidean distance between the mass centers, in grid units.
pub fn center_dislocation(z: &[f64], z_adv: &[f64], geom: GridGeometry) -> Result<f64> {
    same_len(z, z_adv)?;
    let (a, b) = (mass_center(z, geom)?, mass_center(z_adv, geom)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `1 − ⟨z, z'⟩ / (‖z‖ ‖z'‖)` on the signed scores.
pub fn cosine_distance(z: &[f64], z_adv: &[f64]) -> Result<f64> {
    same_len(z, z_adv)?;
    let dot: f64 = z.iter().zip(z_adv).map(|(a, b)| a * b).sum();
    let na = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = z_adv.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::Degenerate);
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

/// Trapezoidal area under `value` against `log₂ ε`.
pub fn log_auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(MetricError::TooFewPoints);
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for p in &sorted {
        if !(p.0 > 0.0) {
            return Err(MetricError::NonPositiveBudget(p.0));
        }
    }
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(MetricError::DuplicateBudget(w[0].0));
        }
    }
    Ok(sorted
        .windows(2)
        .map(|w| (w[1].0.log2() - w[0].0.log2()) * 0.5 * (w[0].1 + w[1].1))
        .sum())
}

/// All four similarities between an original and a perturbed map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub k_in: f64,
    pub cor: f64,
    pub cdl: f64,
    pub cosd: f64,
}

impl MetricValues {
    pub fn compute(z: &[f64], z_adv: &[f64], k: usize, geom: GridGeometry) -> Result<Self> {
        Ok(Self {
            k_in: topk_intersection(z, z_adv, k)?,
            cor: spearman_correlation(z, z_adv)?,
            cdl: center_dislocation(z, z_adv, geom)?,
            cosd: cosine_distance(z, z_adv)?,
        })
    }

    /// Values for an unperturbed map compared with itself.
    pub fn identity(z: &[f64], k: usize) -> Result<Self> {
        Ok(Self { k_in: topk_intersection(z, z, k)?, cor: 1.0, cdl: 0.0, cosd: 0.0 })
    }

    pub fn mean(values: &[MetricValues]) -> Option<MetricValues> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mut acc = MetricValues { k_in: 0.0, cor: 0.0, cdl: 0.0, cosd: 0.0 };
        for v in values {
            acc.k_in += v.k_in;
            acc.cor += v.cor;
            acc.cdl += v.cdl;
            acc.cosd += v.cosd;
        }
        Some(MetricValues { k_in: acc.k_in / n, cor: acc.cor / n, cdl: acc.cdl / n, cosd: acc.cosd / n })
    }
}
