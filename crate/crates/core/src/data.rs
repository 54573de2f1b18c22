//! Datasets, CSV I/O, synthetic generation and second-moment statistics.
//!
//! The quadratic loss of every training batch is summarized by the averaged
//! second-moment matrix `phi = (1/N) Σ x xᵀ` and cross-moment `r = (1/N) Σ y x`.
//! Leave-one-out batches are obtained from the full-batch statistics by an
//! exact rank-one downdate instead of a fresh pass over the data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input/label pairs. Rows of `inputs` are the samples `xᵢᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    labels: DVector<f64>,
}

impl Dataset {
    /// Builds a dataset, checking shapes and finiteness.
    ///
    /// Requires at least one sample and one feature; stricter requirements
    /// (for example two samples for leave-one-out) are checked where needed.
    pub fn new(inputs: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::InvalidDataset(format!(
                "shape {}x{} is empty",
                inputs.nrows(),
                inputs.ncols()
            )));
        }
        if inputs.iter().chain(labels.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite entry".into()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Sample `i` as a column vector.
    pub fn input(&self, i: usize) -> DVector<f64> {
        self.inputs.row(i).transpose()
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    /// The rows listed in `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let inputs = self.inputs.select_rows(indices.iter());
        let labels = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.labels[i]));
        Self::new(inputs, labels)
    }

    /// `(1/N) Σ yᵢ²`, the constant term of the averaged quadratic loss.
    pub fn label_energy(&self) -> f64 {
        self.labels.norm_squared() / self.n_samples() as f64
    }

    /// Writes a header `x0,…,x{P−1},y`, then one row per sample: features
    /// then label. Values use the shortest representation that parses back
    /// to the same `f64`.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        let mut line: String = (0..self.dim()).map(|k| format!("x{k},")).collect();
        line.push_str("y\n");
        out.write_all(line.as_bytes()).map_err(io_err)?;
        for i in 0..self.n_samples() {
            line.clear();
            for v in self.inputs.row(i).iter() {
                line.push_str(&format!("{v},"));
            }
            line.push_str(&format!("{}\n", self.labels[i]));
            out.write_all(line.as_bytes()).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// Reads a dataset written as `x₁,…,x_P,y` per line.
///
/// With `has_header` the first line is skipped. Line numbers in errors are
/// 1-based and count the header.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let mut width: Option<usize> = None;
    let mut values = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None if record.len() < 2 => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: "need at least one feature and a label".into(),
                })
            }
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected {w} fields, found {}", record.len()),
                })
            }
            Some(_) => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("non-finite value: {field:?}"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }

    let Some(width) = width else {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    };
    let all = DMatrix::from_row_slice(rows, width, &values);
    let inputs = all.columns(0, width - 1).into_owned();
    let labels = all.column(width - 1).into_owned();
    Dataset::new(inputs, labels)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Averaged second moments of a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub phi: DMatrix<f64>,
    pub r: DVector<f64>,
    pub count: usize,
}

impl SufficientStats {
    pub fn dim(&self) -> usize {
        self.r.len()
    }

    /// `‖r‖_∞`: the smallest Lasso penalty whose solution is identically zero.
    pub fn lambda_max(&self) -> f64 {
        self.r.amax()
    }

    /// Adds one sample back in; the inverse of [`loo_downdate`].
    pub fn rank_one_update(&self, x: &DVector<f64>, y: f64) -> Result<Self> {
        check_dim(self.dim(), x.len())?;
        let n = self.count as f64;
        let mut phi = &self.phi * n;
        phi.ger(1.0, x, x, 1.0);
        let r = (&self.r * n + x * y) / (n + 1.0);
        Ok(Self {
            phi: phi / (n + 1.0),
            r,
            count: self.count + 1,
        })
    }
}

/// `phi = (1/N) Σ xᵢxᵢᵀ`, `r = (1/N) Σ yᵢxᵢ`.
pub fn compute_stats(d: &Dataset) -> SufficientStats {
    let n = d.n_samples() as f64;
    let x = d.inputs();
    let mut phi = x.tr_mul(x) / n;
    symmetrize(&mut phi);
    let r = x.tr_mul(d.labels()) / n;
    SufficientStats {
        phi,
        r,
        count: d.n_samples(),
    }
}

/// Removes sample `(x_j, y_j)` from the aggregate:
/// `phi_j = (N·phi − x_j x_jᵀ)/(N−1)`, `r_j = (N·r − y_j x_j)/(N−1)`.
pub fn loo_downdate(s: &SufficientStats, x_j: &DVector<f64>, y_j: f64) -> Result<SufficientStats> {
    if s.count < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            have: s.count,
        });
    }
    check_dim(s.dim(), x_j.len())?;
    let n = s.count as f64;
    let mut phi = &s.phi * n;
    phi.ger(-1.0, x_j, x_j, 1.0);
    phi /= n - 1.0;
    symmetrize(&mut phi);
    let r = (&s.r * n - x_j * y_j) / (n - 1.0);
    Ok(SufficientStats {
        phi,
        r,
        count: s.count - 1,
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub const SPECTRAL_TOL: f64 = 1e-6;
const SPECTRAL_MAX_ITERS: usize = 10_000;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Starts from the normalized all-ones vector and stops once the Rayleigh
/// quotient changes by less than `tol` relative. If the iteration lands below
/// the largest diagonal entry (a lower bound on ρ for PSD matrices), the start
/// vector was deficient in the top eigendirection and the iteration is
/// restarted from the corresponding basis vector.
pub fn spectral_radius(phi: &DMatrix<f64>, tol: f64) -> Result<f64> {
    if phi.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument {
            name: "tol",
            reason: format!("must be positive, got {tol}"),
        });
    }
    let p = phi.nrows();
    let (imax, dmax) =
        phi.diagonal()
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );

    let ones = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let est = power_iterate(phi, ones, tol);
    if est >= dmax * (1.0 - tol) {
        return Ok(est);
    }
    let mut e = DVector::zeros(p);
    e[imax] = 1.0;
    Ok(power_iterate(phi, e, tol).max(est))
}

fn power_iterate(phi: &DMatrix<f64>, mut v: DVector<f64>, tol: f64) -> f64 {
    let mut w = DVector::zeros(v.len());
    let mut rayleigh = 0.0;
    for _ in 0..SPECTRAL_MAX_ITERS {
        w.gemv(1.0, phi, &v, 0.0);
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v.copy_from(&w);
        v /= norm;
        if (next - rayleigh).abs() <= tol * next.abs() {
            return next;
        }
        rayleigh = next;
    }
    rayleigh
}

/// Generative model for the synthetic regression experiments.
///
/// Inputs are i.i.d. standard normal; the nonzero entries of the true weight
/// vector are standard normal on a uniformly random support; the label noise
/// is Gaussian with variance `‖w_true‖² / snr`, so that the power ratio of
/// `w_trueᵀx` to noise equals `snr`. `snr = inf` gives noiseless labels.
///
/// With `group_size > 1` the support consists of `sparsity / group_size`
/// whole contiguous groups of that size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub sparsity: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub snr: f64,
    pub seed: u64,
    pub group_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 100,
            sparsity: 10,
            n_train: 200,
            n_test: 2000,
            snr: 0.3,
            seed: 0,
            group_size: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(Error::InvalidArgument { name, reason });
        if self.dim == 0 {
            return bad("dim", "must be at least 1".into());
        }
        if self.sparsity > self.dim {
            return bad(
                "sparsity",
                format!("sparsity = {} exceeds dim = {}", self.sparsity, self.dim),
            );
        }
        if self.n_train < 2 {
            return bad(
                "n_train",
                format!("must be at least 2, got {}", self.n_train),
            );
        }
        if self.n_test == 0 {
            return bad("n_test", "must be at least 1".into());
        }
        if !(self.snr > 0.0) {
            return bad("snr", format!("must be positive, got {}", self.snr));
        }
        if self.group_size == 0 || !self.dim.is_multiple_of(self.group_size) {
            return bad(
                "group_size",
                format!(
                    "group_size = {} must divide dim = {}",
                    self.group_size, self.dim
                ),
            );
        }
        if !self.sparsity.is_multiple_of(self.group_size) {
            return bad(
                "group_size",
                format!(
                    "sparsity = {} must be a multiple of group_size = {}",
                    self.sparsity, self.group_size
                ),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub w_true: DVector<f64>,
}

// Independent ChaCha8 streams under one seed, one per random quantity.
const STREAM_SUPPORT: u64 = 1;
const STREAM_VALUES: u64 = 2;
const STREAM_TRAIN_INPUTS: u64 = 3;
const STREAM_TRAIN_NOISE: u64 = 4;
const STREAM_TEST_INPUTS: u64 = 5;
const STREAM_TEST_NOISE: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws train and test sets from the same linear-Gaussian model.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let p = spec.dim;

    let n_groups = p / spec.group_size;
    let active_groups = spec.sparsity / spec.group_size;
    let mut support: Vec<usize> = sample(
        &mut stream(spec.seed, STREAM_SUPPORT),
        n_groups,
        active_groups,
    )
    .into_iter()
    .flat_map(|g| (g * spec.group_size)..((g + 1) * spec.group_size))
    .collect();
    support.sort_unstable();

    let mut values = stream(spec.seed, STREAM_VALUES);
    let mut w_true = DVector::zeros(p);
    for &n in &support {
        w_true[n] = values.sample::<f64, _>(StandardNormal);
    }

    let noise_std = if spec.snr.is_infinite() {
        0.0
    } else {
        (w_true.norm_squared() / spec.snr).sqrt()
    };

    let draw = |n: usize, inputs_stream: u64, noise_stream: u64| -> Result<Dataset> {
        let mut rng = stream(spec.seed, inputs_stream);
        let inputs = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut noise = stream(spec.seed, noise_stream);
        let mut labels = &inputs * &w_true;
        for y in labels.iter_mut() {
            *y += noise_std * noise.sample::<f64, _>(StandardNormal);
        }
        Dataset::new(inputs, labels)
    };

    Ok(SyntheticData {
        train: draw(spec.n_train, STREAM_TRAIN_INPUTS, STREAM_TRAIN_NOISE)?,
        test: draw(spec.n_test, STREAM_TEST_INPUTS, STREAM_TEST_NOISE)?,
        w_true,
    })
}
