use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"ENVM";

/// Texel-center directions and exact solid angles of a lat-long grid.
/// Row 0 is the `+z` pole; `phi` runs counterclockwise from `+x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadrature<T> {
    pub rows: usize,
    pub cols: usize,
    pub dirs: Vec<[T; 3]>,
    pub weights: Vec<T>,
}

impl<T: Scalar> Quadrature<T> {
    pub fn lat_long(rows: usize, cols: usize) -> Self {
        let mut dirs = Vec::with_capacity(rows * cols);
        let mut weights = Vec::with_capacity(rows * cols);
        let dphi = 2.0 * std::f64::consts::PI / cols as f64;
        for i in 0..rows {
            let t0 = std::f64::consts::PI * i as f64 / rows as f64;
            let t1 = std::f64::consts::PI * (i + 1) as f64 / rows as f64;
            let theta = 0.5 * (t0 + t1);
            let w = (t0.cos() - t1.cos()) * dphi;
            for j in 0..cols {
                let phi = (j as f64 + 0.5) * dphi;
                dirs.push([
                    T::lit(theta.sin() * phi.cos()),
                    T::lit(theta.sin() * phi.sin()),
                    T::lit(theta.cos()),
                ]);
                weights.push(T::lit(w));
            }
        }
        Quadrature {
            rows,
            cols,
            dirs,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }
}

/// Nonnegative RGB radiance on a lat-long grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap<T> {
    radiance: Vec<T>,
    quad: Arc<Quadrature<T>>,
}

impl<T: Scalar> EnvironmentMap<T> {
    /// `radiance` holds `rows * cols` RGB triples in row-major order.
    pub fn new(rows: usize, cols: usize, radiance: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("environment map", "empty grid"));
        }
        if radiance.len() != rows * cols * 3 {
            return Err(Error::invalid(
                "environment map",
                format!("{} values for a {rows}x{cols} grid", radiance.len()),
            ));
        }
        if let Some(bad) = radiance.iter().find(|x| !x.is_finite() || **x < T::zero()) {
            return Err(Error::invalid("environment map", format!("radiance must be finite and >= 0, got {bad}")));
        }
        Ok(EnvironmentMap {
            radiance,
            quad: Arc::new(Quadrature::lat_long(rows, cols)),
        })
    }

    pub fn constant(rows: usize, cols: usize, rgb: [T; 3]) -> Result<Self> {
        Self::new(rows, cols, rgb.repeat(rows * cols))
    }

    /// Samples `f` at every texel-center direction.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        let quad = Quadrature::<f64>::lat_long(rows, cols);
        let radiance = quad.dirs.iter().flat_map(|d| f(*d)).map(T::lit).collect();
        Self::new(rows, cols, radiance)
    }

    pub fn rows(&self) -> usize {
        self.quad.rows
    }

    pub fn cols(&self) -> usize {
        self.quad.cols
    }

    pub fn texels(&self) -> usize {
        self.quad.len()
    }

    /// Flat RGB radiance, three values per texel.
    pub fn radiance(&self) -> &[T] {
        &self.radiance
    }

    pub fn quadrature(&self) -> &Arc<Quadrature<T>> {
        &self.quad
    }

    /// Same grid with radiance multiplied by `s >= 0`.
    pub fn scaled(&self, s: T) -> Result<Self> {
        Self::new(self.rows(), self.cols(), self.radiance.iter().map(|&x| x * s).collect())
    }

    pub fn cast<U: Scalar>(&self) -> EnvironmentMap<U> {
        EnvironmentMap {
            radiance: self.radiance.iter().map(|x| U::lit(x.as_f64())).collect(),
            quad: Arc::new(Quadrature::lat_long(self.rows(), self.cols())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.radiance.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols() as u32).to_le_bytes());
        for x in &self.radiance {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        out
    }

    /// Parses the binary format, or the text format when the magic is
    /// absent: a `rows cols` line followed by one `r g b` line per texel.
    /// Blank lines and `#` comments are ignored.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.starts_with(MAGIC) {
            return Self::from_binary(bytes, path);
        }
        match std::str::from_utf8(bytes) {
            Ok(text) => Self::from_text(text, path),
            Err(_) => Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "ENVM",
            }),
        }
    }

    fn from_binary(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |section: &str| Error::Truncated {
            path: path.to_path_buf(),
            section: section.to_string(),
        };
        if bytes.len() < 12 {
            return Err(truncated("header"));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|t| t.checked_mul(12))
            .ok_or_else(|| malformed(path, "grid size overflows"))?;
        let body = &bytes[12..];
        if body.len() < n {
            return Err(truncated("radiance"));
        }
        if body.len() > n {
            return Err(malformed(path, "trailing bytes after radiance"));
        }
        let radiance = body
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Self::new(rows, cols, radiance).map_err(|e| malformed(path, e.to_string()))
    }

    fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            section: "header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| malformed(path, format!("bad header `{header}`"))))
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(malformed(path, format!("header must be `rows cols`, got `{header}`")));
        };
        let mut radiance = Vec::with_capacity(rows * cols * 3);
        for line in lines {
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| malformed(path, format!("bad number `{tok}`")))?;
                radiance.push(T::lit(v));
            }
        }
        if radiance.len() < rows * cols * 3 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                section: "radiance".into(),
            });
        }
        Self::new(rows, cols, radiance).map_err(|e| malformed(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}
