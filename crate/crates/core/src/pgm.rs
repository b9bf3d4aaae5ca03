//! Binary PGM (P5) reading and writing, 8- and 16-bit.
//!
//! Written files use the canonical header `P5\n<w> <h>\n<maxval>\n`; 16-bit
//! samples are big-endian as the format requires.

use crate::error::{Error, Result};
use crate::tensor::Grid;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Pgm {
    pub fn from_u8(grid: &Grid<u8>) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            maxval: 255,
            samples: grid.data().iter().map(|&v| v as u16).collect(),
        }
    }

    pub fn from_u16(grid: &Grid<u16>) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            maxval: 65535,
            samples: grid.data().to_vec(),
        }
    }

    pub fn to_u8(&self) -> Result<Grid<u8>> {
        if self.maxval > 255 {
            return Err(Error::Pgm(format!(
                "maxval {} does not fit 8 bits",
                self.maxval
            )));
        }
        Grid::from_vec(
            self.height,
            self.width,
            self.samples.iter().map(|&v| v as u8).collect(),
        )
    }

    pub fn to_u16(&self) -> Grid<u16> {
        Grid::from_vec(self.height, self.width, self.samples.clone()).expect("dims match samples")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&v| v as u8));
        } else {
            for &v in &self.samples {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        if magic != "P5" {
            return Err(Error::Pgm(format!("expected P5 magic, got {magic:?}")));
        }
        let width = number(bytes, &mut pos)?;
        let height = number(bytes, &mut pos)?;
        let maxval = number(bytes, &mut pos)?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Pgm(format!("maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Pgm("missing whitespace after maxval".into()));
        }
        pos += 1;
        let n = width * height;
        let bps = if maxval < 256 { 1 } else { 2 };
        let raster = &bytes[pos..];
        if raster.len() != n * bps {
            return Err(Error::Pgm(format!(
                "raster has {} bytes, expected {}",
                raster.len(),
                n * bps
            )));
        }
        let samples: Vec<u16> = if bps == 1 {
            raster.iter().map(|&b| b as u16).collect()
        } else {
            raster
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]))
                .collect()
        };
        if samples.iter().any(|&s| s as usize > maxval) {
            return Err(Error::Pgm("sample exceeds maxval".into()));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pgm("truncated header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Pgm("non-ASCII header".into()))
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    t.parse()
        .map_err(|_| Error::Pgm(format!("bad header number {t:?}")))
}
