//! Loading, preprocessing and partitioning of regression datasets.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{dot, gram, matvec, matvec_t, vec_norm, Cholesky, Matrix};
use crate::rng::stream;

/// Collective data `(A, B)` together with its known minimizer, if any.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub a: Matrix,
    pub b: Vec<f64>,
    pub x_star: Option<Vec<f64>>,
    /// `B` lies in the range of `A`, so every individual cost shares the
    /// minimizer.
    pub consistent: bool,
    pub provenance: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, a: Matrix, b: Vec<f64>) -> Result<Self> {
        if a.rows() != b.len() {
            return Err(Error::invalid(format!(
                "input matrix has {} rows but output vector has {} entries",
                a.rows(),
                b.len()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("output vector has non-finite entries"));
        }
        Ok(Dataset {
            name: name.into(),
            a,
            b,
            x_star: None,
            consistent: false,
            provenance: String::new(),
        })
    }

    pub fn with_provenance(mut self, p: impl Into<String>) -> Self {
        self.provenance = p.into();
        self
    }

    /// Marks the dataset consistent with the given minimizer, checking
    /// `‖A·x* − B‖ ≤ 1e-8·‖B‖`.
    pub fn with_consistent_minimizer(mut self, x_star: Vec<f64>) -> Result<Self> {
        let resid = matvec(&self.a, &x_star)?
            .iter()
            .zip(&self.b)
            .map(|(p, b)| (p - b) * (p - b))
            .sum::<f64>()
            .sqrt();
        if resid > 1e-8 * vec_norm(&self.b) {
            return Err(Error::invalid(format!(
                "claimed minimizer leaves residual {resid:e}"
            )));
        }
        self.x_star = Some(x_star);
        self.consistent = true;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.a.rows()
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    /// The minimizer, either as recorded or from a direct solve.
    pub fn minimizer(&self) -> Result<Vec<f64>> {
        match &self.x_star {
            Some(x) => Ok(x.clone()),
            None => least_squares_oracle(self),
        }
    }

    /// Returns the dataset with `x_star` filled in from [`least_squares_oracle`]
    /// if it was absent.
    pub fn solved(mut self) -> Result<Self> {
        if self.x_star.is_none() {
            self.x_star = Some(least_squares_oracle(&self)?);
        }
        Ok(self)
    }
}

/// Contiguous equal row blocks, one per agent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub blocks: Vec<Range<usize>>,
}

impl Partition {
    pub fn agents(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_size(&self) -> usize {
        self.blocks.first().map_or(0, Range::len)
    }

    pub fn total_rows(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end)
    }
}

/// Splits the rows of `ds` into `m` contiguous blocks of equal size.
pub fn partition(ds: &Dataset, m: usize) -> Result<Partition> {
    partition_rows(ds.n_rows(), m)
}

pub fn partition_rows(n_rows: usize, m: usize) -> Result<Partition> {
    if m == 0 || n_rows == 0 || n_rows % m != 0 {
        return Err(Error::invalid(format!(
            "cannot split N = {n_rows} rows evenly among m = {m} agents"
        )));
    }
    let n = n_rows / m;
    Ok(Partition {
        blocks: (0..m).map(|i| i * n..(i + 1) * n).collect(),
    })
}

/// Grayscale image with row-major pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }
}

pub fn avg_intensity(img: &Image) -> f64 {
    if img.pixels.is_empty() {
        return 0.0;
    }
    img.pixels.iter().sum::<f64>() / img.pixels.len() as f64
}

/// Negated mean absolute difference between the image and its left-right
/// mirror.
pub fn avg_symmetry(img: &Image) -> f64 {
    if img.pixels.is_empty() {
        return 0.0;
    }
    let w = img.width;
    let total: f64 = img
        .pixels
        .chunks_exact(w)
        .flat_map(|row| row.iter().zip(row.iter().rev()).map(|(p, q)| (p - q).abs()))
        .sum();
    -total / img.pixels.len() as f64
}

/// Raw MNIST design matrix `[a1, a2, a1², a1·a2, a2²]`.
pub fn mnist_features(intensity: &[f64], symmetry: &[f64]) -> Result<Matrix> {
    if intensity.len() != symmetry.len() {
        return Err(Error::invalid(format!(
            "{} intensities but {} symmetries",
            intensity.len(),
            symmetry.len()
        )));
    }
    let data = intensity
        .iter()
        .zip(symmetry)
        .flat_map(|(&a1, &a2)| [a1, a2, a1 * a1, a1 * a2, a2 * a2])
        .collect();
    Matrix::from_row_major(intensity.len(), 5, data)
}

/// Centers each column and scales it to unit population standard deviation.
pub fn standardize_columns(a: &Matrix) -> Result<Matrix> {
    let n = a.rows() as f64;
    let mut out = a.clone();
    for j in 0..a.cols() {
        let col = a.column(j);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(std > 1e-14 * scale) {
            return Err(Error::invalid(format!(
                "column {j} is constant and cannot be standardized"
            )));
        }
        for (i, v) in col.iter().enumerate() {
            out[(i, j)] = (v - mean) / std;
        }
    }
    Ok(out)
}

pub fn append_ones(a: &Matrix) -> Matrix {
    let cols = a.cols() + 1;
    let mut data = Vec::with_capacity(a.rows() * cols);
    for i in 0..a.rows() {
        data.extend_from_slice(a.row(i));
        data.push(1.0);
    }
    Matrix::from_row_major(a.rows(), cols, data).expect("finite by construction")
}

/// `(B, x*)` with `x*` the all-ones vector and `B = A·x*`.
pub fn synth_output(a: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let x_star = vec![1.0; a.cols()];
    let b = a.row_iter().map(|r| r.iter().sum()).collect();
    (b, x_star)
}

/// Solves the normal equations `AᵀA·x = AᵀB` by Cholesky.
pub fn least_squares_oracle(ds: &Dataset) -> Result<Vec<f64>> {
    let g = gram(&ds.a);
    let rhs = matvec_t(&ds.a, &ds.b)?;
    let chol = Cholesky::new(&g).map_err(|_| {
        Error::Assumption(format!(
            "A^T A of dataset '{}' is not positive definite",
            ds.name
        ))
    })?;
    let x = chol.solve_vec(&rhs)?;
    let resid: Vec<f64> = matvec(&g, &x)?
        .iter()
        .zip(&rhs)
        .map(|(p, r)| p - r)
        .collect();
    if vec_norm(&resid) > 1e-8 * vec_norm(&rhs).max(f64::MIN_POSITIVE) {
        return Err(Error::Assumption(format!(
            "A^T A of dataset '{}' is too ill-conditioned for a reliable solve (residual {:e})",
            ds.name,
            vec_norm(&resid)
        )));
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Matrix Market

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MmFormat {
    Coordinate,
    Array,
}

/// Reads a real Matrix Market file into a dense matrix.
pub fn load_matrix_market(path: &Path) -> Result<Matrix> {
    let file = fs::File::open(path)?;
    parse_matrix_market(BufReader::new(file), path)
}

/// Parses Matrix Market text; `origin` is only used in error messages.
pub fn parse_matrix_market<R: Read>(reader: BufReader<R>, origin: &Path) -> Result<Matrix> {
    let fail = |line: usize, msg: String| Error::Format {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (lno, header) = match lines.next() {
        Some((n, l)) => (n, l?),
        None => return Err(fail(1, "empty file".into())),
    };
    let tokens: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(fail(lno, format!("bad banner '{header}'")));
    }
    let format = match tokens[2].as_str() {
        "coordinate" => MmFormat::Coordinate,
        "array" => MmFormat::Array,
        other => return Err(fail(lno, format!("unsupported format '{other}'"))),
    };
    match tokens[3].as_str() {
        "real" | "integer" | "double" => {}
        other => return Err(fail(lno, format!("unsupported field '{other}'"))),
    }
    let symmetric = match tokens[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(fail(lno, format!("unsupported symmetry '{other}'"))),
    };

    let mut body = lines.filter_map(|(n, l)| match l {
        Ok(s) => {
            let t = s.trim();
            if t.is_empty() || t.starts_with('%') {
                None
            } else {
                Some(Ok((n, t.to_string())))
            }
        }
        Err(e) => Some(Err(e)),
    });

    let (size_line, size) = body
        .next()
        .transpose()?
        .ok_or_else(|| fail(lno, "missing size line".into()))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| fail(size_line, format!("bad size line: {e}")))?;
    let expected = if format == MmFormat::Coordinate { 3 } else { 2 };
    if dims.len() != expected {
        return Err(fail(size_line, format!("size line needs {expected} integers")));
    }
    let (rows, cols) = (dims[0], dims[1]);
    if symmetric && rows != cols {
        return Err(fail(size_line, "symmetric matrix must be square".into()));
    }
    let mut m = Matrix::zeros(rows, cols);

    let parse_real = |n: usize, t: &str| -> Result<f64> {
        let v: f64 = t
            .parse()
            .map_err(|_| fail(n, format!("cannot parse value '{t}'")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(fail(n, format!("non-finite value '{t}'")))
        }
    };

    match format {
        MmFormat::Coordinate => {
            let nnz = dims[2];
            let mut seen = std::collections::HashSet::with_capacity(nnz);
            let mut count = 0;
            for item in body {
                let (n, line) = item?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(fail(n, format!("expected 'row col value', got '{line}'")));
                }
                let i: usize = parts[0]
                    .parse()
                    .map_err(|_| fail(n, format!("bad row index '{}'", parts[0])))?;
                let j: usize = parts[1]
                    .parse()
                    .map_err(|_| fail(n, format!("bad column index '{}'", parts[1])))?;
                if i == 0 || j == 0 || i > rows || j > cols {
                    return Err(fail(n, format!("index ({i}, {j}) outside {rows}x{cols}")));
                }
                let v = parse_real(n, parts[2])?;
                let (r, c) = (i - 1, j - 1);
                if !seen.insert((r, c)) || (symmetric && r != c && seen.contains(&(c, r))) {
                    return Err(fail(n, format!("duplicate entry ({i}, {j})")));
                }
                m[(r, c)] = v;
                if symmetric {
                    m[(c, r)] = v;
                }
                count += 1;
            }
            if count != nnz {
                return Err(fail(
                    size_line,
                    format!("declared {nnz} entries but found {count}"),
                ));
            }
        }
        MmFormat::Array => {
            // column-major; symmetric storage lists the lower triangle only
            let positions: Vec<(usize, usize)> = (0..cols)
                .flat_map(|j| {
                    let start = if symmetric { j } else { 0 };
                    (start..rows).map(move |i| (i, j))
                })
                .collect();
            let mut idx = 0;
            for item in body {
                let (n, line) = item?;
                for tok in line.split_whitespace() {
                    let &(i, j) = positions
                        .get(idx)
                        .ok_or_else(|| fail(n, "more values than the declared size".into()))?;
                    let v = parse_real(n, tok)?;
                    m[(i, j)] = v;
                    if symmetric {
                        m[(j, i)] = v;
                    }
                    idx += 1;
                }
            }
            if idx != positions.len() {
                return Err(fail(
                    size_line,
                    format!("expected {} values, found {idx}", positions.len()),
                ));
            }
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Named pipelines

/// Matrix from a sparse-matrix collection file with the synthetic all-ones
/// minimizer.
pub fn collection_dataset(name: &str, path: &Path) -> Result<Dataset> {
    let a = load_matrix_market(path)?;
    let (b, x_star) = synth_output(&a);
    Dataset::new(name, a, b)?
        .with_provenance(format!("{} (B = A·1)", path.display()))
        .with_consistent_minimizer(x_star)
}

/// Label rule for binary targets: values above zero map to `+1`, the rest
/// to `−1`.
pub fn binary_label(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Digest of the selected raw rows, so a run records exactly which subset
/// it used.
pub fn rows_checksum<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for r in rows {
        for v in r {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>()
}

/// Tabular CSV with a header row. Rows with an empty or unparsable field
/// (the UCI files use `?` for missing values) are dropped before the first
/// `take` complete rows are kept in file order.
pub struct TabularCsv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub dropped: usize,
}

pub fn read_tabular_csv(path: &Path) -> Result<TabularCsv> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let parsed: Option<Vec<f64>> = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        match parsed {
            Some(r) if r.len() == header.len() => rows.push(r),
            _ => dropped += 1,
        }
    }
    Ok(TabularCsv {
        header,
        rows,
        dropped,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Classification table turned into a standardized regression problem:
/// features standardized column-wise, a ones column appended, labels mapped
/// by [`binary_label`].
pub fn tabular_dataset(name: &str, path: &Path, label_column: &str, take: usize) -> Result<Dataset> {
    let table = read_tabular_csv(path)?;
    let label_idx = table
        .header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::invalid(format!("no column named '{label_column}' in {}", path.display())))?;
    if table.rows.len() < take {
        return Err(Error::invalid(format!(
            "{} has only {} complete rows, {take} requested",
            path.display(),
            table.rows.len()
        )));
    }
    let selected = &table.rows[..take];
    let features: Vec<Vec<f64>> = selected
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .filter(|&(j, _)| j != label_idx)
                .map(|(_, &v)| v)
                .collect()
        })
        .collect();
    let b = selected.iter().map(|r| binary_label(r[label_idx])).collect();
    let a = append_ones(&standardize_columns(&Matrix::from_rows(&features)?)?);
    let checksum = rows_checksum(selected.iter().map(Vec::as_slice));
    Dataset::new(name, a, b)?
        .with_provenance(format!(
            "{}: first {take} complete rows ({} incomplete dropped), label '{label_column}' > 0 -> +1, population-std standardization, sha256 {checksum}",
            path.display(),
            table.dropped
        ))
        .solved()
}

/// One labelled 28x28 digit, pixels scaled to `[0, 1]`.
pub struct Digit {
    pub label: u8,
    pub image: Image,
}

/// Reads an MNIST CSV (label first, 784 pixel columns in 0..=255). A header
/// row is skipped if its first field is not numeric. Only digits in `keep`
/// are retained, up to `limit` rows.
pub fn read_mnist_csv(path: &Path, keep: &[u8], limit: usize) -> Result<Vec<Digit>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        if out.len() >= limit {
            break;
        }
        let line = line?;
        let mut fields = line.split(',').map(str::trim);
        let Some(first) = fields.next() else { continue };
        let label: u8 = match first.parse() {
            Ok(l) => l,
            Err(_) if idx == 0 => continue,
            Err(_) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: format!("bad label '{first}'"),
                })
            }
        };
        if !keep.contains(&label) {
            continue;
        }
        let pixels = fields
            .map(|f| f.parse::<f64>().map(|p| p / 255.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("bad pixel: {e}"),
            })?;
        if pixels.len() != 784 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("expected 784 pixels, got {}", pixels.len()),
            });
        }
        out.push(Digit {
            label,
            image: Image::new(28, 28, pixels)?,
        });
    }
    Ok(out)
}

/// Digit one versus digit five from intensity and symmetry features.
pub fn mnist_dataset(path: &Path, take: usize) -> Result<Dataset> {
    let digits = read_mnist_csv(path, &[1, 5], take)?;
    if digits.len() < take {
        return Err(Error::invalid(format!(
            "{} holds only {} images of digits 1 and 5, {take} requested",
            path.display(),
            digits.len()
        )));
    }
    let a1: Vec<f64> = digits.iter().map(|d| avg_intensity(&d.image)).collect();
    let a2: Vec<f64> = digits.iter().map(|d| avg_symmetry(&d.image)).collect();
    let raw = mnist_features(&a1, &a2)?;
    let a = append_ones(&standardize_columns(&raw)?);
    let b = digits
        .iter()
        .map(|d| if d.label == 1 { 1.0 } else { -1.0 })
        .collect();
    let checksum = rows_checksum(digits.iter().map(|d| d.image.pixels.as_slice()));
    Dataset::new("mnist", a, b)?
        .with_provenance(format!(
            "{}: first {take} images of digits 1 (+1) and 5 (-1), left-right mirror symmetry, population-std standardization, sha256 {checksum}",
            path.display()
        ))
        .solved()
}

/// Gaussian design with `B = A·x_true + noise·ε`.
pub fn synthetic_dataset(name: &str, rows: usize, cols: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = stream(seed, 0xda7a);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    let a = Matrix::from_row_major(rows, cols, data)?;
    let x_true: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
    let mut b = matvec(&a, &x_true)?;
    for v in &mut b {
        *v += noise * rng.sample::<f64, _>(StandardNormal);
    }
    let ds = Dataset::new(name, a, b)?.with_provenance(format!(
        "synthetic gaussian {rows}x{cols}, noise {noise}, seed {seed}"
    ));
    if noise == 0.0 {
        ds.with_consistent_minimizer(x_true)
    } else {
        ds.solved()
    }
}

/// Writes a dense matrix as Matrix Market `array general`.
pub fn write_matrix_market(path: &Path, m: &Matrix) -> Result<()> {
    use std::fmt::Write as _;
    let mut s = String::from("%%MatrixMarket matrix array real general\n");
    let _ = writeln!(s, "{} {}", m.rows(), m.cols());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            let _ = writeln!(s, "{}", m[(i, j)]);
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn data_path(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}

/// Sum of squared residuals, `‖A·x − B‖²`.
pub fn residual_sq(ds: &Dataset, x: &[f64]) -> f64 {
    ds.a
        .row_iter()
        .zip(&ds.b)
        .map(|(r, b)| {
            let e = dot(r, x) - b;
            e * e
        })
        .sum()
}
