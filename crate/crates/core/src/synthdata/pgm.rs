//! 8-bit binary PGM (P5) encoding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Frame, GridDims, Image};

pub fn write_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Parses a P5 file with maxval 255 into a canonical-frame image.
pub fn read_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |reason: &str| Error::PgmParse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(err("magic number is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != width * height {
        return Err(err("raster size does not match the header"));
    }
    let data = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::from_vec(GridDims::new(height, width), data, Frame::Canonical))
}
