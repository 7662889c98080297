//! Dense 2-D grids: images in the unknown domain and sinograms in the
//! tomographic measurement domain, plus file I/O (16-bit PGM and CSV).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A dense real-valued image, row-major, nominal range `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "image data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("image contains non-finite entries"));
        }
        Ok(Image { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at row `r`, column `c`.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.width + c]
    }

    /// Writes a 16-bit binary PGM (P5, maxval 65535). Values are clamped to
    /// `[0,1]` and scaled; samples are big-endian per the PGM spec.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.data.len() * 2);
        for &v in &self.data {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    /// Reads a 16-bit binary PGM written by [`Image::write_pgm`].
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let header_err = || Error::param(format!("{}: not a 16-bit P5 PGM", path.display()));
        // Header: three whitespace-separated tokens after the magic.
        if !bytes.starts_with(b"P5") {
            return Err(header_err());
        }
        let mut pos = 2;
        let mut fields = Vec::new();
        while fields.len() < 3 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| header_err())?
                    .parse::<usize>()
                    .map_err(|_| header_err())?,
            );
        }
        pos += 1; // single whitespace after maxval
        let (width, height, maxval) = (fields[0], fields[1], fields[2]);
        if maxval != 65535 {
            return Err(header_err());
        }
        let n = width * height;
        if bytes.len() < pos + 2 * n {
            return Err(Error::param(format!("{}: truncated PGM", path.display())));
        }
        let data = (0..n)
            .map(|i| {
                let hi = bytes[pos + 2 * i] as u16;
                let lo = bytes[pos + 2 * i + 1] as u16;
                ((hi << 8) | lo) as f64 / 65535.0
            })
            .collect();
        Image::new(width, height, data)
    }

    /// Writes the image as a CSV grid, one image row per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_grid(path, self.height, self.width, &self.data)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (rows, cols, data) = read_csv_grid(path)?;
        Image::new(cols, rows, data)
    }
}

/// Projection data for a set of angles, row-major with one angle per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_detectors: usize,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_angles: usize, n_detectors: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_angles * n_detectors {
            return Err(Error::shape(format!(
                "sinogram data length {} != {}x{}",
                data.len(),
                n_angles,
                n_detectors
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("sinogram contains non-finite entries"));
        }
        Ok(Sinogram { n_angles, n_detectors, data })
    }

    pub fn zeros(n_angles: usize, n_detectors: usize) -> Self {
        Sinogram { n_angles, n_detectors, data: vec![0.0; n_angles * n_detectors] }
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value for angle index `a`, detector bin `d`.
    pub fn at(&self, a: usize, d: usize) -> f64 {
        self.data[a * self.n_detectors + d]
    }

    /// Writes the sinogram as CSV, one angle per row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_grid(path, self.n_angles, self.n_detectors, &self.data)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (rows, cols, data) = read_csv_grid(path)?;
        Sinogram::new(rows, cols, data)
    }
}

fn write_csv_grid(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| format!("{}", data[r * cols + c])).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

fn read_csv_grid(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for line in f.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::param(format!("bad number {:?} in {}", s, path.display())))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::shape(format!("ragged CSV grid in {}", path.display())))
            }
            _ => {}
        }
        data.extend_from_slice(&vals);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::param(format!("empty CSV grid {}", path.display())))?;
    Ok((rows, cols, data))
}
