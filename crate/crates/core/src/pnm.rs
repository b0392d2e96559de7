//! Binary portable graymap (`P5`) and pixmap (`P6`) files, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Raw 8-bit raster: one channel for `P5`, three interleaved for `P6`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PNM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic `{m}`"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM number `{s}`")));
    let width = num(token(bytes, &mut pos)?)?;
    let height = num(token(bytes, &mut pos)?)?;
    let maxval = num(token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PNM files are supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width * height * channels;
    if bytes.len() < pos + len {
        return Err(Error::Format("PNM raster truncated".into()));
    }
    Ok(Raster { width, height, channels, data: bytes[pos..pos + len].to_vec() })
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
