//! Linear probing, latent ranking and selection, and the latent-quality
//! estimators: KDE mutual information, AMSE, two-nearest-neighbour intrinsic
//! dimension and cross-distractor trajectory overlap.
//!
//! Sample matrices are `N × d` with one sample per row.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LatentSequence;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("too few samples: {0}")]
    TooFew(String),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

/// Reported in place of a divergent MI estimate for an exactly (affinely)
/// dependent pair.
pub const DETERMINISTIC_MI: f64 = 10.0;

/// Floor applied to reported MI values; raw estimates may dip below zero by
/// about this much on independent data.
pub const MI_FLOOR: f64 = -0.02;

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ProbeError::NonFinite(what))
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

/// Subtracts column means. A column whose centred norm is at roundoff level
/// relative to the original is constant and becomes exactly zero.
fn centered(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        let scale = col.norm();
        col.add_scalar_mut(-means[j]);
        if col.norm() <= 1e-12 * scale {
            col.fill(0.0);
        }
    }
    c
}

// ----- linear probe ------------------------------------------------------

/// Least-squares map `ŝ = wᵀ z + b` from latents to state variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `d_z × d_s`.
    pub w: DMatrix<f64>,
    pub intercept: DVector<f64>,
    /// Per state variable; `0` for a constant target.
    pub r2: Vec<f64>,
    /// Mean over samples of the squared residual norm.
    pub amse: f64,
    /// Set when the normal equations were rank deficient and the ridge
    /// fallback was used.
    pub ridge: bool,
}

impl LinearProbe {
    pub fn predict(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = z * &self.w;
        for mut row in out.row_iter_mut() {
            row += self.intercept.transpose();
        }
        out
    }

    pub fn mean_r2(&self) -> f64 {
        self.r2.iter().sum::<f64>() / self.r2.len() as f64
    }
}

/// Relative size below which an `R` diagonal entry marks a dependent column.
const RANK_TOL: f64 = 1e-10;

/// Fits `S ≈ Z w + b` by least squares on centred columns.
///
/// Uses a thin QR factorisation when `T > d_z` and the centred design has full
/// column rank; otherwise ridge with `λ = 1e-8·trace(ZᵀZ)`.
pub fn fit_linear_probe(z: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<LinearProbe> {
    let (t, dz, ds) = (z.nrows(), z.ncols(), s.ncols());
    if s.nrows() != t {
        return Err(ProbeError::Shape(format!("{t} latent rows vs {} state rows", s.nrows())));
    }
    if t < 2 || dz == 0 || ds == 0 {
        return Err(ProbeError::TooFew(format!("{t} samples of {dz} latent and {ds} state dims")));
    }
    check_finite(z, "latents")?;
    check_finite(s, "states")?;
    let (zm, sm) = (column_means(z), column_means(s));
    let (zc, sc) = (centered(z, &zm), centered(s, &sm));

    let qr_solution = if t > dz {
        let qr = zc.clone().qr();
        let r = qr.r();
        let diag: Vec<f64> = (0..dz).map(|i| r[(i, i)].abs()).collect();
        let largest = diag.iter().copied().fold(0.0, f64::max);
        if largest > 0.0 && diag.iter().all(|&d| d > RANK_TOL * largest) {
            let qts = qr.q().transpose() * &sc;
            r.solve_upper_triangular(&qts)
        } else {
            None
        }
    } else {
        None
    };
    let ridge = qr_solution.is_none();
    let w = match qr_solution {
        Some(w) => w,
        None => {
            let gram = zc.transpose() * &zc;
            let lambda = 1e-8 * gram.trace();
            if lambda > 0.0 {
                let reg = gram + DMatrix::identity(dz, dz) * lambda;
                let chol = reg
                    .cholesky()
                    .ok_or_else(|| ProbeError::Degenerate("ridge system not positive definite".into()))?;
                chol.solve(&(zc.transpose() * &sc))
            } else {
                DMatrix::zeros(dz, ds)
            }
        }
    };
    let resid = &sc - &zc * &w;
    let amse = resid.iter().map(|v| v * v).sum::<f64>() / t as f64;
    let r2 = (0..ds)
        .map(|j| {
            let tot = sc.column(j).norm_squared();
            if tot > 0.0 {
                1.0 - resid.column(j).norm_squared() / tot
            } else {
                0.0
            }
        })
        .collect();
    let intercept = &sm - w.transpose() * &zm;
    Ok(LinearProbe {
        w,
        intercept,
        r2,
        amse,
        ridge,
    })
}

// ----- ranking and selection ---------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    R2,
    Mi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Latent dims, best first.
    pub order: Vec<usize>,
    /// Score of each latent dim (indexed by dim, not rank).
    pub scores: Vec<f64>,
}

/// Squared correlation, i.e. the single-regressor R² with intercept.
fn r2_single(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa > 0.0 && sbb > 0.0 {
        (sab * sab / (saa * sbb)).min(1.0)
    } else {
        0.0
    }
}

/// Orders latent dims by their best score against any state variable,
/// descending, ties broken by ascending dim index.
///
/// Under [`Criterion::Mi`] a pair whose entropy is undefined (a constant
/// column) scores 0.
pub fn rank_dimensions(z: &DMatrix<f64>, s: &DMatrix<f64>, criterion: Criterion) -> Result<Ranking> {
    if z.nrows() != s.nrows() {
        return Err(ProbeError::Shape(format!("{} latent rows vs {} state rows", z.nrows(), s.nrows())));
    }
    let zcols: Vec<Vec<f64>> = z.column_iter().map(|c| c.iter().copied().collect()).collect();
    let scols: Vec<Vec<f64>> = s.column_iter().map(|c| c.iter().copied().collect()).collect();
    let mut scores = Vec::with_capacity(zcols.len());
    for zc in &zcols {
        let mut best = f64::NEG_INFINITY;
        for sc in &scols {
            let v = match criterion {
                Criterion::R2 => r2_single(zc, sc),
                Criterion::Mi => match mutual_information(zc, sc) {
                    Ok(m) => m.value,
                    Err(ProbeError::Degenerate(_)) => 0.0,
                    Err(e) => return Err(e),
                },
            };
            best = best.max(v);
        }
        scores.push(best);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(Ranking { order, scores })
}

/// How many top-ranked dims to keep: `d_select` when given, else the count
/// before the largest drop between consecutive sorted scores.
pub fn selection_count(ranking: &Ranking, d_select: Option<usize>) -> usize {
    let n = ranking.order.len();
    if let Some(k) = d_select {
        return k.clamp(1, n.max(1));
    }
    if n <= 1 {
        return n;
    }
    let sorted: Vec<f64> = ranking.order.iter().map(|&d| ranking.scores[d]).collect();
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..n - 1 {
        let gap = sorted[i] - sorted[i + 1];
        if gap > best.1 {
            best = (i, gap);
        }
    }
    best.0 + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub ranking: Ranking,
    /// Selected dims in rank order.
    pub selected: Vec<usize>,
    /// Probe fitted on the selected dims only.
    pub probe: LinearProbe,
}

/// Columns `dims` of `m`, in that order.
pub fn select_columns(m: &DMatrix<f64>, dims: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), dims.len(), |r, c| m[(r, dims[c])])
}

/// Ranks latent dims, keeps the top ones and fits a probe on them.
pub fn probe_latents(
    z: &DMatrix<f64>,
    s: &DMatrix<f64>,
    criterion: Criterion,
    d_select: Option<usize>,
) -> Result<ProbeResult> {
    let ranking = rank_dimensions(z, s, criterion)?;
    let k = selection_count(&ranking, d_select);
    let selected: Vec<usize> = ranking.order[..k].to_vec();
    let probe = fit_linear_probe(&select_columns(z, &selected), s)?;
    Ok(ProbeResult {
        ranking,
        selected,
        probe,
    })
}

// ----- KDE entropy and mutual information --------------------------------

fn sample_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Resubstitution entropy of whitened 1-D or 2-D samples with an isotropic
/// Gaussian kernel of standard deviation `h`, in whitened units.
fn whitened_entropy(points: &[[f64; 2]], k: usize, h: f64) -> f64 {
    let n = points.len();
    let inv = 1.0 / (2.0 * h * h);
    let mut dens = vec![0.0; n];
    for i in 0..n {
        dens[i] += 1.0;
        for j in i + 1..n {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            let kv = (-(dx * dx + dy * dy) * inv).exp();
            dens[i] += kv;
            dens[j] += kv;
        }
    }
    let log_norm = (n as f64).ln() + 0.5 * k as f64 * (2.0 * std::f64::consts::PI * h * h).ln();
    dens.iter().map(|d| log_norm - d.ln()).sum::<f64>() / n as f64
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Entropy of one column with kernel width `factor·σ`.
fn entropy_1d(x: &[f64], factor: f64) -> Result<f64> {
    let sd = sample_std(x);
    if sd.is_nan() || sd <= 0.0 {
        return Err(ProbeError::Degenerate("zero-variance dimension".into()));
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let pts: Vec<[f64; 2]> = x.iter().map(|v| [(v - m) / sd, 0.0]).collect();
    Ok(whitened_entropy(&pts, 1, factor) + sd.ln())
}

/// Silverman's rule `0.9·min(σ, IQR/1.34)·N^(-1/5)`, as a multiple of σ.
fn silverman_factor(x: &[f64]) -> f64 {
    let sd = sample_std(x);
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread / sd * (x.len() as f64).powf(-0.2)
}

/// Entropy of a pair with kernel covariance `factor²·Σ̂`: the samples are
/// whitened by the Cholesky factor of their covariance, so the kernel follows
/// the joint's correlation.
fn entropy_2d(a: &[f64], b: &[f64], factor: f64) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        saa += dx * dx;
        sab += dx * dy;
        sbb += dy * dy;
    }
    let (saa, sab, sbb) = (saa / (n - 1.0), sab / (n - 1.0), sbb / (n - 1.0));
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(ProbeError::Degenerate("zero-variance dimension".into()));
    }
    let l11 = saa.sqrt();
    let l21 = sab / l11;
    let l22sq = sbb - l21 * l21;
    if l22sq <= 0.0 {
        return Err(ProbeError::Degenerate("singular joint covariance".into()));
    }
    let l22 = l22sq.sqrt();
    let pts: Vec<[f64; 2]> = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let u = (x - ma) / l11;
            [u, ((y - mb) - l21 * u) / l22]
        })
        .collect();
    Ok(whitened_entropy(&pts, 2, factor) + (l11 * l22).ln())
}

/// Resubstitution KDE estimate of differential entropy, in nats.
///
/// One dimension uses Silverman's width `0.9·min(σ, IQR/1.34)·N^(-1/5)`;
/// the plain normal-reference width `1.06·σ·N^(-1/5)` over-smooths bounded
/// densities enough to bias a uniform sample's entropy by about +0.055 nats
/// at N = 5000. Two dimensions use
/// Scott's factor `N^(-1/6)` on the sample covariance (equal to a per-axis
/// `σ_d·N^(-1/6)` width for uncorrelated axes).
pub fn kde_entropy(x: &DMatrix<f64>) -> Result<f64> {
    let (n, k) = (x.nrows(), x.ncols());
    if n < 50 {
        return Err(ProbeError::TooFew(format!("{n} samples; KDE entropy needs at least 50")));
    }
    check_finite(x, "entropy samples")?;
    let col = |j: usize| -> Vec<f64> { x.column(j).iter().copied().collect() };
    match k {
        1 => {
            let c = col(0);
            let factor = silverman_factor(&c);
            entropy_1d(&c, factor)
        }
        2 => entropy_2d(&col(0), &col(1), (n as f64).powf(-1.0 / 6.0)),
        _ => Err(ProbeError::Shape(format!("KDE entropy supports 1 or 2 dims, got {k}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// `max(raw, MI_FLOOR)`, or [`DETERMINISTIC_MI`] for a deterministic pair.
    pub value: f64,
    pub raw: f64,
    /// The pair is an exact affine function of each other.
    pub deterministic: bool,
}

/// `I(a; b) = H(a) + H(b) − H(a, b)` in nats.
///
/// All three entropies share Scott's factor `N^(-1/6)`, so kernel smoothing
/// inflates each marginal and the joint consistently and cancels for Gaussian
/// data. The pair is put in a canonical order first, which makes the estimate
/// exactly symmetric.
pub fn mutual_information(a: &[f64], b: &[f64]) -> Result<MiEstimate> {
    let n = a.len();
    if b.len() != n {
        return Err(ProbeError::Shape(format!("{n} vs {} samples", b.len())));
    }
    if n < 50 {
        return Err(ProbeError::TooFew(format!("{n} samples; MI needs at least 50")));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(ProbeError::NonFinite("MI samples"));
    }
    let (a, b) = match a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()) {
        Some(std::cmp::Ordering::Greater) => (b, a),
        _ => (a, b),
    };
    let r2 = {
        let (sa, sb) = (sample_std(a), sample_std(b));
        if !(sa > 0.0 && sb > 0.0) {
            return Err(ProbeError::Degenerate("zero-variance dimension".into()));
        }
        r2_single(a, b)
    };
    if 1.0 - r2 < 1e-12 {
        return Ok(MiEstimate {
            value: DETERMINISTIC_MI,
            raw: DETERMINISTIC_MI,
            deterministic: true,
        });
    }
    let factor = (n as f64).powf(-1.0 / 6.0);
    let raw = entropy_1d(a, factor)? + entropy_1d(b, factor)? - entropy_2d(a, b, factor)?;
    Ok(MiEstimate {
        value: raw.max(MI_FLOOR),
        raw,
        deterministic: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiResult {
    /// `d_z × d_s` reported (floored) values.
    pub pairwise: DMatrix<f64>,
    pub raw: DMatrix<f64>,
    /// `(latent, state)` pairs that were deterministic.
    pub deterministic: Vec<(usize, usize)>,
    /// Sum of `pairwise`.
    pub total: f64,
}

/// Sum over every (latent, state) pair of [`mutual_information`].
///
/// This adds pairwise terms literally, so information shared between several
/// latents and one variable is counted once per latent.
pub fn total_mi(z: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<MiResult> {
    if z.nrows() != s.nrows() {
        return Err(ProbeError::Shape(format!("{} latent rows vs {} state rows", z.nrows(), s.nrows())));
    }
    let (dz, ds) = (z.ncols(), s.ncols());
    let mut pairwise = DMatrix::zeros(dz, ds);
    let mut raw = DMatrix::zeros(dz, ds);
    let mut deterministic = Vec::new();
    let scols: Vec<Vec<f64>> = s.column_iter().map(|c| c.iter().copied().collect()).collect();
    for i in 0..dz {
        let zc: Vec<f64> = z.column(i).iter().copied().collect();
        for (j, sc) in scols.iter().enumerate() {
            let m = mutual_information(&zc, sc)?;
            pairwise[(i, j)] = m.value;
            raw[(i, j)] = m.raw;
            if m.deterministic {
                deterministic.push((i, j));
            }
        }
    }
    let total = pairwise.sum();
    Ok(MiResult {
        pairwise,
        raw,
        deterministic,
        total,
    })
}

// ----- intrinsic dimension -----------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdResult {
    /// Estimate on all distinct samples.
    pub d_hat: f64,
    /// `r₂/r₁` per distinct sample, in input order.
    pub ratios: Vec<f64>,
    pub duplicates_dropped: usize,
    /// Estimates on three disjoint random thirds, when each has at least 10
    /// samples.
    pub splits: Option<[f64; 3]>,
}

impl IdResult {
    /// Mean and sample standard deviation of the split estimates.
    pub fn split_summary(&self) -> Option<(f64, f64)> {
        self.splits.map(|s| mean_std(&s))
    }
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(ratios, d̂)` over distinct rows. Log ratios are summed in sorted order so
/// the estimate does not depend on sample order.
fn two_nn(rows: &[&[f64]]) -> Result<(Vec<f64>, f64)> {
    let n = rows.len();
    if n < 3 {
        return Err(ProbeError::TooFew(format!("{n} distinct samples; 2-NN needs at least 3")));
    }
    let mut logs = Vec::with_capacity(n);
    let mut ratios = Vec::with_capacity(n);
    for i in 0..n {
        let (mut r1, mut r2) = (f64::INFINITY, f64::INFINITY);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = sq_dist(rows[i], rows[j]);
            if d < r1 {
                r2 = r1;
                r1 = d;
            } else if d < r2 {
                r2 = d;
            }
        }
        let lr = 0.5 * (r2.ln() - r1.ln());
        logs.push(lr);
        ratios.push((r2 / r1).sqrt());
    }
    logs.sort_by(f64::total_cmp);
    let total: f64 = logs.iter().sum();
    if total <= 0.0 {
        return Err(ProbeError::Degenerate("every first and second neighbour are equidistant".into()));
    }
    Ok((ratios, n as f64 / total))
}

/// Two-nearest-neighbour intrinsic dimension `N / Σ log(r₂/r₁)` with
/// Euclidean distances. Exact duplicate rows are dropped first; `seed` only
/// affects the three split estimates.
pub fn intrinsic_dimension_2nn(z: &DMatrix<f64>, seed: u64) -> Result<IdResult> {
    check_finite(z, "intrinsic-dimension samples")?;
    let all: Vec<Vec<f64>> = z.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut seen = std::collections::HashSet::new();
    let mut rows: Vec<&[f64]> = Vec::with_capacity(all.len());
    for r in &all {
        let key: Vec<u64> = r.iter().map(|v| (v + 0.0).to_bits()).collect();
        if seen.insert(key) {
            rows.push(r);
        }
    }
    let duplicates_dropped = all.len() - rows.len();
    if rows.len() == 1 && all.len() > 1 {
        return Err(ProbeError::Degenerate("all points are identical".into()));
    }
    let (ratios, d_hat) = two_nn(&rows)?;
    let splits = if rows.len() >= 30 {
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let third = rows.len() / 3;
        let mut out = [0.0; 3];
        for (k, slot) in out.iter_mut().enumerate() {
            let part: Vec<&[f64]> = idx[k * third..(k + 1) * third].iter().map(|&i| rows[i]).collect();
            *slot = two_nn(&part)?.1;
        }
        Some(out)
    } else {
        None
    };
    Ok(IdResult {
        d_hat,
        ratios,
        duplicates_dropped,
        splits,
    })
}

// ----- distractor invariance ---------------------------------------------

fn latent_matrix(seq: &LatentSequence, dims: &[usize]) -> Result<DMatrix<f64>> {
    if let Some(&bad) = dims.iter().find(|&&d| d >= seq.dim) {
        return Err(ProbeError::Shape(format!("dim {bad} out of range for {}-dim latents", seq.dim)));
    }
    Ok(DMatrix::from_fn(seq.frames, dims.len(), |r, c| seq.data[r * seq.dim + dims[c]]))
}

/// How far the selected-latent trajectories of several renderings of one
/// state trajectory sit from the first after affine alignment.
///
/// Each later run is mapped onto the first by least squares; the mean per-step
/// Euclidean residual is divided by the first run's radius of gyration and
/// averaged over runs. `0` means the runs coincide up to an affine map.
pub fn disentanglement_overlap(runs: &[LatentSequence], selected: &[usize]) -> Result<f64> {
    if runs.len() < 2 {
        return Err(ProbeError::TooFew(format!("{} runs; overlap needs at least 2", runs.len())));
    }
    if selected.is_empty() {
        return Err(ProbeError::Shape("no latent dims selected".into()));
    }
    let frames = runs[0].frames;
    if runs.iter().any(|r| r.frames != frames) {
        return Err(ProbeError::Shape("runs differ in length".into()));
    }
    let reference = latent_matrix(&runs[0], selected)?;
    check_finite(&reference, "latent trajectory")?;
    let centre = column_means(&reference);
    let gyration = (centered(&reference, &centre).norm_squared() / frames as f64).sqrt();
    if gyration <= 0.0 {
        return Err(ProbeError::Degenerate("reference trajectory has zero extent".into()));
    }
    let mut total = 0.0;
    for run in &runs[1..] {
        let x = latent_matrix(run, selected)?;
        let fit = fit_linear_probe(&x, &reference)?;
        let aligned = fit.predict(&x);
        let mean_dist = (0..frames)
            .map(|t| (aligned.row(t) - reference.row(t)).norm())
            .sum::<f64>()
            / frames as f64;
        total += mean_dist / gyration;
    }
    Ok(total / (runs.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_probe() {
        let z = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let s = DMatrix::from_row_slice(3, 1, &[2.0, 4.0, 6.0]);
        let p = fit_linear_probe(&z, &s).unwrap();
        assert!((p.w[(0, 0)] - 2.0).abs() < 1e-12);
        assert!(p.amse < 1e-24);
        assert!((p.r2[0] - 1.0).abs() < 1e-12);
        assert!(!p.ridge);
    }

    #[test]
    fn constant_latent_takes_ridge_path() {
        let z = DMatrix::from_element(10, 2, 3.0);
        let s = DMatrix::from_fn(10, 1, |r, _| r as f64);
        let p = fit_linear_probe(&z, &s).unwrap();
        assert!(p.ridge);
        assert_eq!(p.w, DMatrix::zeros(2, 1));
        assert_eq!(p.r2, vec![0.0]);
    }

    #[test]
    fn elbow_picks_largest_gap() {
        let r = Ranking {
            order: vec![0, 1, 2, 3],
            scores: vec![0.9, 0.85, 0.1, 0.05],
        };
        assert_eq!(selection_count(&r, None), 2);
        assert_eq!(selection_count(&r, Some(3)), 3);
    }

    #[test]
    fn line_example() {
        let z = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        let id = intrinsic_dimension_2nn(&z, 0).unwrap();
        assert_eq!(id.ratios, vec![3.0, 2.0, 1.5]);
        assert!(id.splits.is_none());
    }
}
