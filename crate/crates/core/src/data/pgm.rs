//! Binary greyscale PGM (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit greyscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a `P5` file with maxval 255; `#` comments in the header are skipped.
pub fn decode(bytes: &[u8]) -> std::result::Result<Gray, String> {
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
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("not a binary PGM (magic {:?})", fields[0]));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad header field {s:?}"))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err("zero extent".into());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(format!(
            "expected {n} pixels, found {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok(Gray {
        width,
        height,
        pixels: bytes[pos..pos + n].to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Gray> {
    let bytes = fs::read(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    decode(&bytes).map_err(|msg| Error::Data {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn write(path: &Path, img: &Gray) -> Result<()> {
    fs::write(path, encode(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let g = Gray {
            width: 3,
            height: 2,
            pixels: vec![0, 10, 255, 32, 9, 1],
        };
        assert_eq!(decode(&encode(&g)).unwrap(), g);
        let mut commented = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        commented.extend_from_slice(&g.pixels);
        assert_eq!(decode(&commented).unwrap(), g);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
