//! Synthetic tasks and CSV ingestion.
//!
//! Samples are columns: `x` is `N_x×P`, `y` is `N_y×P`. Classification
//! datasets carry one-hot `y` plus the integer labels.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{param, Error, Result};
use crate::linalg::random_orthogonal;
use crate::matrix::{matmul, Matrix};
use crate::net::one_hot;
use crate::rng::Rng;

/// Ground truth of a planted-spectrum task: `Σ^{yx} = u · diag(s) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpectrum {
    pub values: Vec<f64>,
    /// `N_y×N_y` orthogonal.
    pub u: Matrix,
    /// `N_x×N_x` orthogonal.
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub labels: Option<Vec<usize>>,
    pub planted: Option<PlantedSpectrum>,
    /// Teacher weight of a teacher-student task.
    pub teacher: Option<Matrix>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.cols() != y.cols() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        Ok(Self {
            x,
            y,
            labels: None,
            planted: None,
            teacher: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.y.rows()
    }

    /// `Σ^{yx} = Σ_μ y_μ x_μᵀ`.
    pub fn correlation(&self) -> Matrix {
        crate::matrix::matmul_nt(&self.y, &self.x).expect("dataset columns agree")
    }

    /// `Σ^{xx} = Σ_μ x_μ x_μᵀ`.
    pub fn input_covariance(&self) -> Matrix {
        crate::matrix::matmul_nt(&self.x, &self.x).expect("dataset columns agree")
    }

    /// Columns `indices` of `x` and `y`.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Matrix) {
        let pick = |m: &Matrix| Matrix::from_fn(m.rows(), indices.len(), |i, j| m.get(i, indices[j]));
        (pick(&self.x), pick(&self.y))
    }
}

/// Orthogonal-input regression task whose correlation matrix has the given
/// singular values. Inputs are the standard basis (`P = N_x`), so
/// `Σ^{xx} = I` exactly and column `μ` of `y` is column `μ` of `Σ^{yx}`.
pub fn make_planted_task(nx: usize, ny: usize, spectrum: &[f64], rng: &Rng) -> Result<Dataset> {
    if nx == 0 || ny == 0 {
        return param("task dimensions must be positive");
    }
    if spectrum.len() > nx.min(ny) {
        return param(format!(
            "spectrum of length {} does not fit a {ny}x{nx} correlation",
            spectrum.len()
        ));
    }
    if spectrum.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return param("planted singular values must be finite and >= 0");
    }
    let u = random_orthogonal(ny, &mut rng.substream_named("planted-u"));
    let v = random_orthogonal(nx, &mut rng.substream_named("planted-v"));
    let mut s = Matrix::zeros(ny, nx);
    for (i, &val) in spectrum.iter().enumerate() {
        s.set(i, i, val);
    }
    let sigma = crate::matrix::matmul_nt(&matmul(&u, &s)?, &v)?;
    let mut ds = Dataset::new(Matrix::identity(nx), sigma)?;
    ds.planted = Some(PlantedSpectrum {
        values: spectrum.to_vec(),
        u,
        v,
    });
    Ok(ds)
}

/// `s_i = a · i` for `i = 1..=n`.
pub fn linear_spectrum(a: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|i| a * i as f64).collect()
}

/// Regression against an exact rank-`r_star` linear teacher with unit
/// spectral norm: `y = W_T x + σ·ξ` with Gaussian `x` and `ξ`.
pub fn make_teacher_student(
    nx: usize,
    ny: usize,
    r_star: usize,
    samples: usize,
    noise: f64,
    rng: &Rng,
) -> Result<Dataset> {
    if r_star == 0 || r_star > nx.min(ny) {
        return param(format!("teacher rank {r_star} outside 1..={}", nx.min(ny)));
    }
    if samples == 0 {
        return param("need at least one sample");
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return param("noise scale must be finite and >= 0");
    }
    let mut t = rng.substream_named("teacher");
    let a = Matrix::from_fn(ny, r_star, |_, _| t.gaussian());
    let b = Matrix::from_fn(r_star, nx, |_, _| t.gaussian());
    let w = matmul(&a, &b)?;
    let top = crate::linalg::svd(&w, 1)?.s[0];
    let teacher = w.scale(1.0 / top);

    let mut xs = rng.substream_named("inputs");
    let x = Matrix::from_fn(nx, samples, |_, _| xs.gaussian());
    let mut y = matmul(&teacher, &x)?;
    if noise > 0.0 {
        let mut ns = rng.substream_named("noise");
        let xi = Matrix::from_fn(ny, samples, |_, _| ns.gaussian());
        y.axpy(noise, &xi)?;
    }
    let mut ds = Dataset::new(x, y)?;
    ds.teacher = Some(teacher);
    Ok(ds)
}

/// Isotropic Gaussian clusters. Class `c` is centered at `separation · e_c`
/// when `n_classes ≤ dim`, otherwise at `separation` times a random unit
/// vector. Samples are shuffled.
pub fn make_blobs(
    n_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    spread: f64,
    rng: &Rng,
) -> Result<Dataset> {
    if n_classes < 2 || dim == 0 || per_class == 0 {
        return param("blobs need >= 2 classes, dim >= 1 and per_class >= 1");
    }
    if !(separation.is_finite() && spread.is_finite() && spread >= 0.0) {
        return param("blob separation and spread must be finite");
    }
    let mut cr = rng.substream_named("centers");
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            if n_classes <= dim {
                (0..dim).map(|i| if i == c { separation } else { 0.0 }).collect()
            } else {
                let g: Vec<f64> = (0..dim).map(|_| cr.gaussian()).collect();
                let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                g.iter().map(|x| separation * x / n).collect()
            }
        })
        .collect();
    let n = n_classes * per_class;
    let mut order: Vec<usize> = (0..n).collect();
    rng.substream_named("order").shuffle(&mut order);
    let mut sr = rng.substream_named("samples");
    let mut x = Matrix::zeros(dim, n);
    let mut labels = vec![0; n];
    for (k, &slot) in order.iter().enumerate() {
        let c = k / per_class;
        labels[slot] = c;
        for i in 0..dim {
            x.set(i, slot, centers[c][i] + spread * sr.gaussian());
        }
    }
    let y = one_hot(&labels, n_classes)?;
    let mut ds = Dataset::new(x, y)?;
    ds.labels = Some(labels);
    Ok(ds)
}

/// Expected layout of a classification CSV.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvSchema {
    /// Number of classes; inferred as `max(label) + 1` when absent.
    pub n_classes: Option<usize>,
    /// Feature count; inferred from the header when absent.
    pub dim: Option<usize>,
}

/// Reads `feat_0,…,feat_{d−1},label` rows.
pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = reader.records();

    let header = match records.next() {
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
        Some(Err(e)) => return Err(csv_error(e, 1)),
        Some(Ok(h)) => h,
    };
    let width = header.len();
    if width < 2 {
        return Err(Error::Parse { line: 1, msg: "header needs at least one feature and a label".into() });
    }
    for (i, name) in header.iter().take(width - 1).enumerate() {
        if name.trim() != format!("feat_{i}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column 'feat_{i}', found '{name}'"),
            });
        }
    }
    if header.get(width - 1).map(str::trim) != Some("label") {
        return Err(Error::Parse { line: 1, msg: "last column must be 'label'".into() });
    }
    let dim = width - 1;
    if let Some(d) = schema.dim {
        if d != dim {
            return Err(Error::Schema(format!("expected {d} features, header has {dim}")));
        }
    }

    let mut features: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| csv_error(e, line))?;
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for field in rec.iter().take(dim) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("non-finite value '{field}'") });
            }
            features.push(v);
        }
        let raw = rec.get(dim).unwrap_or("").trim();
        let label: i64 = raw.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad label '{raw}'"),
        })?;
        if label < 0 || schema.n_classes.is_some_and(|n| label as usize >= n) {
            return Err(Error::Schema(format!(
                "line {line}: label {label} outside [0, {})",
                schema.n_classes.map_or("?".to_string(), |n| n.to_string())
            )));
        }
        labels.push(label as usize);
    }
    if labels.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    let n = labels.len();
    let classes = schema
        .n_classes
        .unwrap_or_else(|| labels.iter().max().copied().unwrap_or(0) + 1)
        .max(2);
    let x = Matrix::from_fn(dim, n, |i, j| features[j * dim + i]);
    let y = one_hot(&labels, classes)?;
    let mut ds = Dataset::new(x, y)?;
    ds.labels = Some(labels);
    Ok(ds)
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback_line);
    Error::Parse { line, msg: e.to_string() }
}

/// Writes a labelled dataset in the layout [`load_csv`] reads.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Usage("only labelled datasets can be written as CSV".into()))?;
    let mut out = String::new();
    let dim = ds.input_dim();
    let header: Vec<String> = (0..dim).map(|i| format!("feat_{i}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for (j, label) in labels.iter().enumerate() {
        for i in 0..dim {
            out.push_str(&format!("{},", ds.x.get(i, j)));
        }
        out.push_str(&format!("{label}\n"));
    }
    let mut f = File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}
