//! Datasets for the ridge-regression experiments and their spectral
//! decomposition.
//!
//! Raw data arrives from [`gen_gaussian_synthetic`], [`load_csv`] or
//! [`random_features`], is mapped into `[0, 1]` by [`minmax_scale`] using the
//! global extrema of the whole array, and is then decomposed by [`spectral`]
//! into the reduced coordinates used by the diffusion and bound modules.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// Default rescaling of the ReLU used for random features.
pub const DEFAULT_RELU_SCALE: f64 = std::f64::consts::SQRT_2;

/// Singular values below `RANK_TOLERANCE * lambda_1` count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Raw (unscaled) regression data together with any non-fatal warnings
/// raised while producing it.
#[derive(Debug, Clone)]
pub struct RawData {
    pub x: DMatrix<f64>,
    pub b: DVector<f64>,
    pub warnings: Vec<String>,
}

/// Result of global min-max scaling.
#[derive(Debug, Clone)]
pub struct MinMax {
    pub scaled: DMatrix<f64>,
    pub min: f64,
    pub max: f64,
}

/// `A = (raw - min) / (max - min)` with scalar extrema over the whole array.
pub fn minmax_scale(raw: &DMatrix<f64>) -> Result<MinMax> {
    if raw.is_empty() {
        return Err(Error::DegenerateInput("empty matrix".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("matrix contains non-finite entries".into()));
    }
    let min = raw.min();
    let max = raw.max();
    if max <= min {
        return Err(Error::DegenerateInput(format!(
            "constant matrix (all entries equal {min})"
        )));
    }
    let span = max - min;
    let scaled = raw.map(|v| ((v - min) / span).clamp(0.0, 1.0));
    Ok(MinMax { scaled, min, max })
}

/// An ERM instance: scaled design matrix `A` (n x d) and responses `b`.
///
/// Immutable after construction. A row-major copy of `A` is kept because the
/// SGD inner loop walks rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    a: DMatrix<f64>,
    b: DVector<f64>,
    rows: Vec<f64>,
    scale_min: f64,
    scale_max: f64,
    response_scaled: bool,
}

impl Dataset {
    /// Wraps an already-scaled matrix. `scale_min`/`scale_max` record the
    /// extrema of the matrix itself.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let (min, max) = if a.is_empty() { (0.0, 0.0) } else { (a.min(), a.max()) };
        Self::with_metadata(a, b, min, max, false)
    }

    /// Scales `raw` globally into `[0, 1]`. With `scale_response` the
    /// responses are mapped by the same affine transform.
    pub fn from_raw(raw: &DMatrix<f64>, b: &DVector<f64>, scale_response: bool) -> Result<Self> {
        let mm = minmax_scale(raw)?;
        let b = if scale_response {
            b.map(|v| (v - mm.min) / (mm.max - mm.min))
        } else {
            b.clone()
        };
        Self::with_metadata(mm.scaled, b, mm.min, mm.max, scale_response)
    }

    fn with_metadata(
        a: DMatrix<f64>,
        b: DVector<f64>,
        scale_min: f64,
        scale_max: f64,
        response_scaled: bool,
    ) -> Result<Self> {
        let (n, d) = a.shape();
        if n == 0 || d == 0 {
            return Err(Error::DegenerateInput(format!("dataset shape {n}x{d}")));
        }
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: b.len() });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("dataset contains non-finite entries".into()));
        }
        let mut rows = Vec::with_capacity(n * d);
        for i in 0..n {
            rows.extend(a.row(i).iter().copied());
        }
        Ok(Self { a, b, rows, scale_min, scale_max, response_scaled })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// Row `i` of `A` as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn scale_min(&self) -> f64 {
        self.scale_min
    }

    pub fn scale_max(&self) -> f64 {
        self.scale_max
    }

    pub fn response_scaled(&self) -> bool {
        self.response_scaled
    }

    /// Residual `a_i . x - b_i`.
    pub fn residual(&self, i: usize, x: &[f64]) -> f64 {
        dot(self.row(i), x) - self.b[i]
    }

    /// `L(x) = ||Ax - b||^2 / 2`.
    pub fn loss(&self, x: &[f64]) -> f64 {
        0.5 * (0..self.n()).map(|i| self.residual(i, x).powi(2)).sum::<f64>()
    }

    /// Full ridge gradient `(1/n) A^T (Ax - b) + delta x`.
    pub fn gradient(&self, x: &[f64], delta: f64) -> DVector<f64> {
        let n = self.n();
        let mut g = DVector::zeros(self.d());
        for i in 0..n {
            let r = self.residual(i, x);
            axpy(r / n as f64, self.row(i), g.as_mut_slice());
        }
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj += delta * xj;
        }
        g
    }

    /// Ridge minimizer `(A^T A / n + delta I)^{-1} A^T b / n`.
    pub fn ridge_solution(&self, delta: f64) -> Result<DVector<f64>> {
        let n = self.n() as f64;
        let mut h = self.a.transpose() * &self.a / n;
        for j in 0..self.d() {
            h[(j, j)] += delta;
        }
        let rhs = self.a.transpose() * &self.b / n;
        h.cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::AssumptionViolation("ridge Hessian is not positive definite".into()))
    }

    /// SHA-256 over shape, `A` (row-major) and `b`, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        h.update((self.d() as u64).to_le_bytes());
        for v in self.rows.iter().chain(self.b.iter()) {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Isotropic Gaussian regression data: rows `chi_i ~ N(0, I_d)`, hidden
/// weights `x ~ N(0, 3 I_d)` and responses `b_i ~ N(chi_i . x, 3)`.
pub fn gen_gaussian_synthetic(n: usize, d: usize, seed: u64) -> Result<RawData> {
    if n == 0 || d == 0 {
        return Err(Error::DegenerateInput(format!("synthetic shape {n}x{d}")));
    }
    let mut warnings = Vec::new();
    if n <= d {
        warnings.push(format!(
            "n = {n} <= d = {d}: the design matrix cannot have d positive singular values"
        ));
    }
    let mut rng = rng_from_seed(seed);
    let x = DMatrix::from_row_iterator(n, d, (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let three = Normal::new(0.0, 3f64.sqrt()).expect("valid normal");
    let hidden = DVector::from_iterator(d, (0..d).map(|_| three.sample(&mut rng)));
    let mean = &x * &hidden;
    let b = DVector::from_iterator(n, mean.iter().map(|m| m + three.sample(&mut rng)));
    Ok(RawData { x, b, warnings })
}

/// `ReLU(x) * scale`, elementwise.
pub fn rescaled_relu(v: f64, scale: f64) -> f64 {
    v.max(0.0) * scale
}

/// Random-feature map `sigma(Y W / sqrt(n0))` for a given weight matrix
/// `W` (n0 x d).
pub fn random_features_with_weights(
    y: &DMatrix<f64>,
    w: &DMatrix<f64>,
    relu_scale: f64,
) -> Result<DMatrix<f64>> {
    if y.ncols() != w.nrows() {
        return Err(Error::DimensionMismatch { expected: y.ncols(), found: w.nrows() });
    }
    let n0 = y.ncols() as f64;
    Ok((y * w / n0.sqrt()).map(|v| rescaled_relu(v, relu_scale)))
}

/// Random-feature map with `W` drawn from `N(0, 1)` entries using `seed`.
pub fn random_features(y: &DMatrix<f64>, d: usize, seed: u64, relu_scale: f64) -> Result<DMatrix<f64>> {
    if y.ncols() == 0 || d == 0 {
        return Err(Error::DegenerateInput("random features need n0 >= 1 and d >= 1".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("feature input contains non-finite entries".into()));
    }
    let n0 = y.ncols();
    let mut rng = rng_from_seed(seed);
    let w = DMatrix::from_row_iterator(n0, d, (0..n0 * d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    random_features_with_weights(y, &w, relu_scale)
}

/// Reads a rectangular numeric CSV. Column `response_column` becomes `b`,
/// the remaining columns (in order) become the raw data matrix. A first
/// row containing any non-numeric cell is treated as a header.
pub fn load_csv(path: impl AsRef<Path>, response_column: usize) -> Result<RawData> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut records: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect()))
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyCsv { path: path.to_path_buf() });
    }
    if records[0].1.iter().any(|c| c.parse::<f64>().is_err()) {
        records.remove(0);
    }
    if records.is_empty() {
        return Err(Error::EmptyCsv { path: path.to_path_buf() });
    }
    let width = records[0].1.len();
    if response_column >= width {
        return Err(Error::Domain(format!(
            "response column {response_column} out of range for {width} columns"
        )));
    }
    if width < 2 {
        return Err(Error::DegenerateInput("CSV needs at least one feature column".into()));
    }
    let n = records.len();
    let mut data = Vec::with_capacity(n * (width - 1));
    let mut b = Vec::with_capacity(n);
    for (line, cells) in &records {
        if cells.len() != width {
            return Err(Error::RaggedCsv {
                path: path.to_path_buf(),
                row: *line,
                expected: width,
                found: cells.len(),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumericCsv {
                path: path.to_path_buf(),
                row: *line,
                column: col + 1,
                cell: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumericCsv {
                    path: path.to_path_buf(),
                    row: *line,
                    column: col + 1,
                    cell: cell.to_string(),
                });
            }
            if col == response_column {
                b.push(v);
            } else {
                data.push(v);
            }
        }
    }
    Ok(RawData {
        x: DMatrix::from_row_slice(n, width - 1, &data),
        b: DVector::from_vec(b),
        warnings: Vec::new(),
    })
}

/// Thin SVD `A = P Sigma Q^T` with the quantities derived from it.
///
/// `alpha` is the constant in the drift of the centred principal
/// components `Y = Q^T (X - x*)`, i.e. `dY = -gamma[(lambda^2/n + delta) Y - alpha] dt + ...`,
/// which works out to `alpha = -delta Q^T x*`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    p: DMatrix<f64>,
    sigma: Vec<f64>,
    q: DMatrix<f64>,
    x_star: DVector<f64>,
    alpha: DVector<f64>,
    beta: f64,
    trace_ata: f64,
    delta: f64,
    n: usize,
}

impl Spectrum {
    /// SVD plus `x*`, `alpha`, `beta`. Fails on rank deficiency but does not
    /// require `beta > 0`; use [`spectral`] for the full assumption check.
    pub fn decompose(ds: &Dataset, delta: f64) -> Result<Self> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::Domain(format!("regularization delta = {delta} must be >= 0")));
        }
        let (n, d) = (ds.n(), ds.d());
        if n < d {
            return Err(Error::AssumptionViolation(format!(
                "n = {n} < d = {d}: singular value lambda_{} is zero",
                n + 1
            )));
        }
        let svd = ds.a().clone().svd(true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V^T");
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

        let mut p = DMatrix::zeros(n, d);
        let mut q = DMatrix::zeros(d, d);
        let mut sigma = Vec::with_capacity(d);
        for (k, &src) in order.iter().enumerate() {
            let mut qc = v_t.row(src).transpose();
            let mut pc = u.column(src).into_owned();
            if let Some(first) = qc.iter().find(|v| v.abs() > 1e-14) {
                if *first < 0.0 {
                    qc.neg_mut();
                    pc.neg_mut();
                }
            }
            q.set_column(k, &qc);
            p.set_column(k, &pc);
            sigma.push(svd.singular_values[src].max(0.0));
        }

        let lambda1 = sigma[0];
        if !(lambda1 > 0.0) {
            return Err(Error::AssumptionViolation("lambda_1 = 0: design matrix is zero".into()));
        }
        if let Some(k) = sigma.iter().position(|&s| s < RANK_TOLERANCE * lambda1) {
            return Err(Error::AssumptionViolation(format!(
                "rank-deficient design: lambda_{} = {:e} < {RANK_TOLERANCE:e} * lambda_1",
                k + 1,
                sigma[k]
            )));
        }

        let pt_b = p.transpose() * ds.b();
        let coords = DVector::from_iterator(d, pt_b.iter().zip(&sigma).map(|(c, s)| c / s));
        let x_star = &q * &coords;
        let projected = &p * &pt_b;
        let beta = (ds.b() - projected).norm_squared();
        let alpha = -(q.transpose() * &x_star) * delta;
        let trace_ata = sigma.iter().map(|s| s * s).sum();

        Ok(Self { p, sigma, q, x_star, alpha, beta, trace_ata, delta, n })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Singular values, non-increasing.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Dominant right singular vector.
    pub fn q1(&self) -> DVectorView<'_, f64> {
        self.q.column(0)
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.x_star
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// `||(I - P P^T) b||^2`.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn trace_ata(&self) -> f64 {
        self.trace_ata
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn lambda1(&self) -> f64 {
        self.sigma[0]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.sigma.len()
    }

    /// Assumption 1: all singular values positive and `b` outside the column
    /// space of `A` (`beta > 0`).
    pub fn check_assumption(&self) -> Result<()> {
        let scale = (self.beta + self.p.nrows() as f64).max(1.0);
        if !(self.beta > 1e-12 * scale) {
            return Err(Error::AssumptionViolation(format!(
                "b lies in the column space of A (beta = {:e})",
                self.beta
            )));
        }
        Ok(())
    }

    pub fn report(&self) -> SpectrumReport {
        SpectrumReport {
            n: self.n,
            d: self.d(),
            lambda: self.sigma.clone(),
            beta: self.beta,
            x_star: self.x_star.iter().copied().collect(),
            trace_ata: self.trace_ata,
        }
    }
}

/// Decomposes the dataset and enforces Assumption 1.
pub fn spectral(ds: &Dataset, delta: f64) -> Result<Spectrum> {
    let spec = Spectrum::decompose(ds, delta)?;
    spec.check_assumption()?;
    Ok(spec)
}

/// Audit export of a [`Spectrum`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpectrumReport {
    pub n: usize,
    pub d: usize,
    pub lambda: Vec<f64>,
    pub beta: f64,
    pub x_star: Vec<f64>,
    #[serde(rename = "trace_AtA")]
    pub trace_ata: f64,
}
