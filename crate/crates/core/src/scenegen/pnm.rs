//! Binary PPM (P6) and PGM (P5) with maxval 255.
//!
//! Writers emit exactly `"P6\n{w} {h}\n255\n"` / `"P5\n{w} {h}\n255\n"`. Readers
//! also accept comments and arbitrary whitespace in the header.

use std::path::Path;

use super::SceneError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    Pgm,
    Ppm,
}

impl PnmKind {
    fn magic(self) -> &'static str {
        match self {
            PnmKind::Pgm => "P5",
            PnmKind::Ppm => "P6",
        }
    }

    fn channels(self) -> usize {
        match self {
            PnmKind::Pgm => 1,
            PnmKind::Ppm => 3,
        }
    }
}

pub fn encode(kind: PnmKind, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height * kind.channels());
    let mut out = format!("{}\n{} {}\n255\n", kind.magic(), width, height).into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PNM of the given kind, returning `(width, height, pixels)`.
/// `path` is used for error messages only.
pub fn decode(kind: PnmKind, bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>), SceneError> {
    if bytes.len() < 2 || &bytes[..2] != kind.magic().as_bytes() {
        return Err(SceneError::BadMagic { path: path.to_path_buf(), expected: kind.magic() });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and `#` comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(SceneError::Truncated(path.to_path_buf())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(SceneError::Header { path: path.to_path_buf(), detail: "expected a number".into() });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SceneError::Header { path: path.to_path_buf(), detail: "number out of range".into() })?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(SceneError::Header { path: path.to_path_buf(), detail: format!("maxval {maxval}, expected 255") });
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(SceneError::Truncated(path.to_path_buf())),
    }
    let len = width * height * kind.channels();
    let raster = bytes.get(pos..pos + len).ok_or_else(|| SceneError::Truncated(path.to_path_buf()))?;
    Ok((width, height, raster.to_vec()))
}
