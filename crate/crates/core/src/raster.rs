//! Georeferenced rasters, boolean masks, ASCII grid I/O, tiling and stripe
//! splitting.
//!
//! Grids are stored row-major with row 0 at the northern edge. The header
//! keeps the lower-left corner exactly as it appears in the ASCII grid
//! format, so that writing and re-reading a raster is bit-exact; the
//! upper-left corner is derived on demand.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sentinel for cells without a valid value.
pub const DEFAULT_NODATA: f64 = -9999.0;

/// Grid geometry shared by rasters and masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub rows: usize,
    pub cols: usize,
    /// Easting of the lower-left corner, meters.
    pub xll: f64,
    /// Northing of the lower-left corner, meters.
    pub yll: f64,
    pub cell_size: f64,
}

impl GridHeader {
    pub fn new(rows: usize, cols: usize, xll: f64, yll: f64, cell_size: f64) -> Result<Self> {
        let header = GridHeader {
            rows,
            cols,
            xll,
            yll,
            cell_size,
        };
        header.validate()?;
        Ok(header)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidInput(format!(
                "grid must have at least one row and column, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(Error::InvalidInput(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        if !self.xll.is_finite() || !self.yll.is_finite() {
            return Err(Error::InvalidInput("grid corner must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Easting of the upper-left corner.
    pub fn origin_x(&self) -> f64 {
        self.xll
    }

    /// Northing of the upper-left corner.
    pub fn origin_y(&self) -> f64 {
        self.yll + self.rows as f64 * self.cell_size
    }

    /// Planar coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.xll + (col as f64 + 0.5) * self.cell_size;
        let y = self.yll + ((self.rows - row) as f64 - 0.5) * self.cell_size;
        (x, y)
    }

    /// Header of the `rows x cols` window whose upper-left cell is
    /// `(row0, col0)`.
    pub fn window(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> GridHeader {
        GridHeader {
            rows,
            cols,
            xll: self.xll + col0 as f64 * self.cell_size,
            yll: self.yll + (self.rows - row0 - rows) as f64 * self.cell_size,
            cell_size: self.cell_size,
        }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub(crate) fn ensure_same(&self, other: &GridHeader, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::HeaderMismatch(format!(
                "{what}: {}x{} @ ({}, {}) / {} vs {}x{} @ ({}, {}) / {}",
                self.rows,
                self.cols,
                self.xll,
                self.yll,
                self.cell_size,
                other.rows,
                other.cols,
                other.xll,
                other.yll,
                other.cell_size
            )));
        }
        Ok(())
    }
}

/// Scalar raster: heights in meters or image radiance.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster2D {
    header: GridHeader,
    nodata: f64,
    values: Vec<f64>,
}

impl Raster2D {
    pub fn new(header: GridHeader, nodata: f64, values: Vec<f64>) -> Result<Self> {
        header.validate()?;
        if !nodata.is_finite() {
            return Err(Error::InvalidInput("nodata sentinel must be finite".into()));
        }
        if values.len() != header.len() {
            return Err(Error::Structure(format!(
                "expected {} values for a {}x{} grid, got {}",
                header.len(),
                header.rows,
                header.cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at cell {} (row {}, col {})",
                bad,
                bad / header.cols,
                bad % header.cols
            )));
        }
        Ok(Raster2D {
            header,
            nodata,
            values,
        })
    }

    pub fn filled(header: GridHeader, value: f64, nodata: f64) -> Result<Self> {
        Raster2D::new(header, nodata, vec![value; header.len()])
    }

    pub fn nodata_like(header: GridHeader, nodata: f64) -> Result<Self> {
        Raster2D::filled(header, nodata, nodata)
    }

    /// Builds a raster by evaluating `f(row, col)` for every cell; non-finite
    /// results become nodata.
    pub fn from_fn(
        header: GridHeader,
        nodata: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        header.validate()?;
        let mut values = Vec::with_capacity(header.len());
        for r in 0..header.rows {
            for c in 0..header.cols {
                let v = f(r, c);
                values.push(if v.is_finite() { v } else { nodata });
            }
        }
        Raster2D::new(header, nodata, values)
    }

    pub fn header(&self) -> &GridHeader {
        &self.header
    }

    pub fn rows(&self) -> usize {
        self.header.rows
    }

    pub fn cols(&self) -> usize {
        self.header.cols
    }

    pub fn cell_size(&self) -> f64 {
        self.header.cell_size
    }

    pub fn nodata(&self) -> f64 {
        self.nodata
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.header.index(row, col)]
    }

    #[inline]
    pub fn is_nodata_value(&self, v: f64) -> bool {
        v == self.nodata
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.get(row, col) != self.nodata
    }

    #[inline]
    pub fn valid(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.get(row, col);
        (v != self.nodata).then_some(v)
    }

    /// Stores `value`; non-finite values are stored as nodata.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let i = self.header.index(row, col);
        self.values[i] = if value.is_finite() { value } else { self.nodata };
    }

    pub fn set_nodata(&mut self, row: usize, col: usize) {
        let i = self.header.index(row, col);
        self.values[i] = self.nodata;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != self.nodata).count()
    }

    pub fn has_nodata(&self) -> bool {
        self.values.iter().any(|&v| v == self.nodata)
    }

    /// Applies `f` to every valid cell, leaving nodata untouched.
    pub fn map_valid(&self, mut f: impl FnMut(f64) -> f64) -> Raster2D {
        let nodata = self.nodata;
        let values = self
            .values
            .iter()
            .map(|&v| {
                if v == nodata {
                    v
                } else {
                    let out = f(v);
                    if out.is_finite() {
                        out
                    } else {
                        nodata
                    }
                }
            })
            .collect();
        Raster2D {
            header: self.header,
            nodata,
            values,
        }
    }

    /// Mean over valid cells.
    pub fn valid_mean(&self) -> Option<f64> {
        let (sum, n) = self
            .values
            .iter()
            .filter(|&&v| v != self.nodata)
            .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// Copies the `size x size` window at `(row0, col0)`; the window's
    /// corner moves by `(col0, row0) * cell_size`.
    pub fn extract_tile(&self, row0: usize, col0: usize, size: usize) -> Result<Raster2D> {
        self.extract_window(row0, col0, size, size)
    }

    pub fn extract_window(
        &self,
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Raster2D> {
        check_window(&self.header, row0, col0, rows, cols)?;
        let header = self.header.window(row0, col0, rows, cols);
        let mut values = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            let start = self.header.index(r, col0);
            values.extend_from_slice(&self.values[start..start + cols]);
        }
        Ok(Raster2D {
            header,
            nodata: self.nodata,
            values,
        })
    }

    /// Writes `tile` back at `(row0, col0)`.
    pub fn paste(&mut self, tile: &Raster2D, row0: usize, col0: usize) -> Result<()> {
        check_window(&self.header, row0, col0, tile.rows(), tile.cols())?;
        for r in 0..tile.rows() {
            for c in 0..tile.cols() {
                let v = tile.get(r, c);
                let v = if v == tile.nodata { self.nodata } else { v };
                let i = self.header.index(row0 + r, col0 + c);
                self.values[i] = v;
            }
        }
        Ok(())
    }

    /// Reads a raster in ASCII grid format.
    pub fn read_ascii(path: impl AsRef<Path>) -> Result<Raster2D> {
        read_ascii_grid(path)
    }

    pub fn write_ascii(&self, path: impl AsRef<Path>) -> Result<()> {
        write_ascii_grid(self, path)
    }
}

fn check_window(header: &GridHeader, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 || row0 + rows > header.rows || col0 + cols > header.cols {
        return Err(Error::Bounds {
            requested: format!(
                "rows {}..{}, cols {}..{}",
                row0,
                row0 + rows,
                col0,
                col0 + cols
            ),
            available: format!("rows 0..{}, cols 0..{}", header.rows, header.cols),
        });
    }
    Ok(())
}

/// Boolean annotation of a grid (building footprints, exclusions, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    header: GridHeaderBits,
    values: Vec<bool>,
}

// `GridHeader` holds floats; masks compare headers bitwise so that `Mask`
// can be `Eq`.
#[derive(Debug, Clone, Copy)]
struct GridHeaderBits(GridHeader);

impl PartialEq for GridHeaderBits {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (&self.0, &other.0);
        a.rows == b.rows
            && a.cols == b.cols
            && a.xll.to_bits() == b.xll.to_bits()
            && a.yll.to_bits() == b.yll.to_bits()
            && a.cell_size.to_bits() == b.cell_size.to_bits()
    }
}

impl Eq for GridHeaderBits {}

impl Mask {
    pub fn new(header: GridHeader, values: Vec<bool>) -> Result<Self> {
        header.validate()?;
        if values.len() != header.len() {
            return Err(Error::Structure(format!(
                "expected {} mask cells, got {}",
                header.len(),
                values.len()
            )));
        }
        Ok(Mask {
            header: GridHeaderBits(header),
            values,
        })
    }

    pub fn empty(header: GridHeader) -> Result<Self> {
        Mask::new(header, vec![false; header.len()])
    }

    pub fn full(header: GridHeader) -> Result<Self> {
        Mask::new(header, vec![true; header.len()])
    }

    pub fn from_fn(header: GridHeader, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        header.validate()?;
        let mut values = Vec::with_capacity(header.len());
        for r in 0..header.rows {
            for c in 0..header.cols {
                values.push(f(r, c));
            }
        }
        Mask::new(header, values)
    }

    /// True wherever the raster holds a valid non-zero value.
    pub fn from_raster(raster: &Raster2D) -> Mask {
        let values = raster
            .values()
            .iter()
            .map(|&v| v != raster.nodata() && v != 0.0)
            .collect();
        Mask {
            header: GridHeaderBits(*raster.header()),
            values,
        }
    }

    pub fn to_raster(&self) -> Raster2D {
        let values = self.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Raster2D {
            header: self.header.0,
            nodata: DEFAULT_NODATA,
            values,
        }
    }

    pub fn header(&self) -> &GridHeader {
        &self.header.0
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[self.header.0.index(row, col)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let i = self.header.0.index(row, col);
        self.values[i] = value;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> Mask {
        Mask {
            header: self.header,
            values: self.values.iter().map(|&b| !b).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.header().ensure_same(other.header(), "mask and")?;
        Ok(Mask {
            header: self.header,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.header().ensure_same(other.header(), "mask or")?;
        Ok(Mask {
            header: self.header,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    pub fn extract_tile(&self, row0: usize, col0: usize, size: usize) -> Result<Mask> {
        self.extract_window(row0, col0, size, size)
    }

    pub fn extract_window(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Mask> {
        let h = self.header.0;
        check_window(&h, row0, col0, rows, cols)?;
        let mut values = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            let start = h.index(r, col0);
            values.extend_from_slice(&self.values[start..start + cols]);
        }
        Ok(Mask {
            header: GridHeaderBits(h.window(row0, col0, rows, cols)),
            values,
        })
    }
}

/// Grows `mask` by `radius` cells with a square structuring element: a cell
/// is set iff some set input cell lies within Chebyshev distance `radius`.
pub fn dilate_mask(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let h = *mask.header();
    // The square element is separable: dilate rows, then columns.
    let mut horizontal = vec![false; h.len()];
    for r in 0..h.rows {
        let row = &mask.values[r * h.cols..(r + 1) * h.cols];
        // distance to the nearest set cell on the left / right, via running
        // positions of the last seen set cell.
        let mut last: Option<usize> = None;
        for c in 0..h.cols {
            if row[c] {
                last = Some(c);
            }
            if matches!(last, Some(l) if c - l <= radius) {
                horizontal[r * h.cols + c] = true;
            }
        }
        let mut next: Option<usize> = None;
        for c in (0..h.cols).rev() {
            if row[c] {
                next = Some(c);
            }
            if matches!(next, Some(n) if n - c <= radius) {
                horizontal[r * h.cols + c] = true;
            }
        }
    }
    let mut out = vec![false; h.len()];
    for c in 0..h.cols {
        let mut last: Option<usize> = None;
        for r in 0..h.rows {
            if horizontal[r * h.cols + c] {
                last = Some(r);
            }
            if matches!(last, Some(l) if r - l <= radius) {
                out[r * h.cols + c] = true;
            }
        }
        let mut next: Option<usize> = None;
        for r in (0..h.rows).rev() {
            if horizontal[r * h.cols + c] {
                next = Some(r);
            }
            if matches!(next, Some(n) if n - r <= radius) {
                out[r * h.cols + c] = true;
            }
        }
    }
    Mask {
        header: mask.header,
        values: out,
    }
}

/// Splits `cols` columns into `k` contiguous stripes whose widths differ by
/// at most one; the leftmost stripes absorb the remainder.
pub fn stripe_split(cols: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 {
        return Err(Error::Size("stripe count must be at least 1".into()));
    }
    if cols < k {
        return Err(Error::Size(format!("cannot split {cols} columns into {k} stripes")));
    }
    let base = cols / k;
    let extra = cols % k;
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let width = base + usize::from(i < extra);
            let range = start..start + width;
            start += width;
            range
        })
        .collect())
}

const HEADER_KEYS: [&str; 6] = [
    "NCOLS",
    "NROWS",
    "XLLCORNER",
    "YLLCORNER",
    "CELLSIZE",
    "NODATA_VALUE",
];

/// Parses an ASCII grid: six `KEY value` header lines followed by `NROWS`
/// lines of `NCOLS` values, north to south.
pub fn parse_ascii_grid(text: &str) -> Result<Raster2D> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut fields = [0.0f64; 6];
    for (slot, key) in HEADER_KEYS.iter().enumerate() {
        let (lineno, line) = lines.next().ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing header key {key}"),
        })?;
        let mut parts = line.split_whitespace();
        let found = parts.next().unwrap_or_default();
        if !found.eq_ignore_ascii_case(key) {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected header key {key}, found `{found}`"),
            });
        }
        let value = parts.next().ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("header key {key} has no value"),
        })?;
        if parts.next().is_some() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("trailing tokens after {key}"),
            });
        }
        fields[slot] = value.parse::<f64>().map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: format!("bad value `{value}` for {key}: {e}"),
        })?;
    }
    let as_count = |v: f64, key: &str| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(Error::Parse {
                line: 0,
                msg: format!("{key} must be a positive integer, got {v}"),
            })
        }
    };
    let cols = as_count(fields[0], "NCOLS")?;
    let rows = as_count(fields[1], "NROWS")?;
    let header = GridHeader::new(rows, cols, fields[2], fields[3], fields[4])?;
    let nodata = fields[5];

    let mut values = Vec::with_capacity(header.len());
    let mut data_rows = 0;
    for (lineno, line) in lines {
        data_rows += 1;
        let before = values.len();
        for tok in line.split_whitespace() {
            let v = tok.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: format!("bad value `{tok}`: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("non-finite value `{tok}`"),
                });
            }
            values.push(v);
        }
        let got = values.len() - before;
        if got != cols {
            return Err(Error::Structure(format!(
                "line {}: expected {} values, found {}",
                lineno + 1,
                cols,
                got
            )));
        }
    }
    if data_rows != rows {
        return Err(Error::Structure(format!(
            "expected {rows} data rows, found {data_rows}"
        )));
    }
    Raster2D::new(header, nodata, values)
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<Raster2D> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ascii_grid(&text)
}

/// Formats a raster; values use the shortest representation that parses
/// back to the identical `f64`.
pub fn format_ascii_grid(raster: &Raster2D) -> String {
    let h = raster.header();
    let mut out = String::with_capacity(h.len() * 8 + 128);
    let _ = writeln!(out, "NCOLS {}", h.cols);
    let _ = writeln!(out, "NROWS {}", h.rows);
    let _ = writeln!(out, "XLLCORNER {}", h.xll);
    let _ = writeln!(out, "YLLCORNER {}", h.yll);
    let _ = writeln!(out, "CELLSIZE {}", h.cell_size);
    let _ = writeln!(out, "NODATA_VALUE {}", raster.nodata());
    for r in 0..h.rows {
        for c in 0..h.cols {
            if c > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", raster.get(r, c));
        }
        out.push('\n');
    }
    out
}

pub fn write_ascii_grid(raster: &Raster2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_ascii_grid(raster)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(Mask::from_raster(&read_ascii_grid(path)?))
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_ascii_grid(&mask.to_raster(), path)
}
