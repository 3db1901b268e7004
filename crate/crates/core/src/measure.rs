//! Equal-weight particle clouds standing in for measures in `P₂(ℝᵈ)`.
//!
//! Every functional here is an exact finite sum over particles. Sums go
//! through [`pairwise_sum`], so values do not depend on how callers
//! parallelize around them.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, quad_form_slice};

/// An empirical measure `(1/N) Σ δ_{xᵢ}` on `ℝᵈ`. Points are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    data: Vec<f64>,
}

/// Affine map `x ↦ K x + k` from `ℝᵈ` to `ℝᵐ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub linear: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineMap {
    pub fn new(linear: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        if linear.nrows() != offset.len() {
            return Err(Error::DimensionMismatch {
                what: "affine map offset",
                expected: linear.nrows(),
                found: offset.len(),
            });
        }
        Ok(Self { linear, offset })
    }

    pub fn zero(input_dim: usize, output_dim: usize) -> Self {
        Self {
            linear: DMatrix::zeros(output_dim, input_dim),
            offset: DVector::zeros(output_dim),
        }
    }

    pub fn constant(input_dim: usize, value: DVector<f64>) -> Self {
        Self {
            linear: DMatrix::zeros(value.len(), input_dim),
            offset: value,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            linear: DMatrix::identity(dim, dim),
            offset: DVector::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.linear.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.linear.nrows()
    }

    /// Writes `K x + k` into `out`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = self.offset[r];
            for (c, xc) in x.iter().enumerate() {
                acc += self.linear[(r, c)] * xc;
            }
            *o = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.output_dim());
        self.apply_into(x, out.as_mut_slice());
        out
    }

    /// Pointwise difference `self − other`.
    pub fn sub(&self, other: &AffineMap) -> AffineMap {
        AffineMap {
            linear: &self.linear - &other.linear,
            offset: &self.offset - &other.offset,
        }
    }
}

impl EmpiricalMeasure {
    /// Builds a cloud from explicit points.
    pub fn new(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidMeasure("no particles".into()))?;
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "particle",
                    expected: dim,
                    found: p.len(),
                });
            }
            data.extend_from_slice(p);
        }
        Self::from_flat(dim, data)
    }

    /// Builds a cloud from a row-major buffer of `N·d` coordinates.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be at least 1".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidMeasure(format!(
                "buffer of length {} does not hold a whole number of {dim}-dimensional particles",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMeasure(format!(
                "non-finite coordinate at particle {}",
                bad / dim
            )));
        }
        Ok(Self { dim, data })
    }

    /// One-dimensional cloud from scalars.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_flat(1, values.to_vec())
    }

    /// `n` copies of `x`.
    pub fn point_mass(x: &[f64], n: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(n * x.len());
        for _ in 0..n {
            data.extend_from_slice(x);
        }
        Self::from_flat(x.len(), data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of particles `N`.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Particle average of a scalar function of the points.
    pub fn average<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        pairwise_sum(self.len(), |i| f(self.point(i))) / self.len() as f64
    }

    /// `μ̄ = ∫ x μ(dx)`.
    pub fn mean(&self) -> DVector<f64> {
        let n = self.len() as f64;
        DVector::from_fn(self.dim, |j, _| {
            pairwise_sum(self.len(), |i| self.data[i * self.dim + j]) / n
        })
    }

    fn check_square(&self, m: &DMatrix<f64>, what: &'static str) -> Result<()> {
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.dim,
                found: m.nrows().max(m.ncols()),
            });
        }
        Ok(())
    }

    /// `μ̄₂(L) = ∫ xᵀ L x μ(dx)`.
    pub fn quad_moment(&self, l: &DMatrix<f64>) -> Result<f64> {
        self.check_square(l, "quadratic moment")?;
        Ok(self.average(|x| quad_form_slice(x, l)))
    }

    /// `Var(μ)(L) = μ̄₂(L) − μ̄ᵀ L μ̄`.
    pub fn variance_form(&self, l: &DMatrix<f64>) -> Result<f64> {
        let m2 = self.quad_moment(l)?;
        let mean = self.mean();
        Ok(m2 - quad_form_slice(mean.as_slice(), l))
    }

    /// Image measure `a ⋆ μ`.
    pub fn pushforward(&self, a: &AffineMap) -> Result<EmpiricalMeasure> {
        if a.input_dim() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "pushforward map input",
                expected: self.dim,
                found: a.input_dim(),
            });
        }
        let m = a.output_dim();
        let mut data = vec![0.0; self.len() * m];
        for (x, out) in self.points().zip(data.chunks_exact_mut(m)) {
            a.apply_into(x, out);
        }
        EmpiricalMeasure::from_flat(m, data)
    }

    /// Shifts every particle by `c`.
    pub fn translate(&self, c: &[f64]) -> Result<EmpiricalMeasure> {
        if c.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: "translation",
                expected: self.dim,
                found: c.len(),
            });
        }
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(k, v)| v + c[k % self.dim])
            .collect();
        EmpiricalMeasure::from_flat(self.dim, data)
    }

    /// `‖μ‖₂ = (∫ |x|² μ(dx))^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        self.average(|x| x.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    /// Writes the cloud as CSV with header `x0,...,x{d-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for p in self.points() {
            let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty particle file".into()))??;
        let dim = header.split(',').count();
        let mut data = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
            if row.len() != dim {
                return Err(Error::Parse(format!(
                    "line {}: expected {dim} columns, found {}",
                    lineno + 2,
                    row.len()
                )));
            }
            data.extend(row);
        }
        Self::from_flat(dim, data)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Exact `W₂` between two equal-size clouds on the real line, via the sorted
/// (monotone) coupling.
pub fn w2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != 1 || nu.dim() != 1 {
        return Err(Error::Unsupported(
            "W2 is only implemented for one-dimensional clouds".into(),
        ));
    }
    if mu.len() != nu.len() {
        return Err(Error::DimensionMismatch {
            what: "W2 particle count",
            expected: mu.len(),
            found: nu.len(),
        });
    }
    let mut xs = mu.as_flat().to_vec();
    let mut ys = nu.as_flat().to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let sq = pairwise_sum(xs.len(), |i| (xs[i] - ys[i]).powi(2)) / xs.len() as f64;
    Ok(sq.sqrt())
}
