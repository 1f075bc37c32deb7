//! Binary netpbm images (P5/P6, maxval 255), CSV label maps and JSON reports.
//!
//! Every writer goes through [`write_atomic`], so a reader never observes a
//! half-written file.

use std::path::Path;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::{FeatureMap, LabelMap};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| invalid!("{} has no file name", path.display()))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::ParseAt {
        offset,
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a binary P6 (3 channels) or P5 (1 channel) image; values are `byte / 255`.
pub fn decode_netpbm(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(parse_err(0, "missing netpbm magic"));
    }
    let channels = match bytes[1] {
        b'6' => 3,
        b'5' => 1,
        other => {
            return Err(parse_err(
                1,
                format!("unsupported netpbm format P{}", other as char),
            ))
        }
    };
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    hdr.skip_space_and_comments();
    let max_at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(max_at, format!("maxval {maxval} is not supported; only 255")));
    }
    if hdr.pos >= bytes.len() || !bytes[hdr.pos].is_ascii_whitespace() {
        return Err(parse_err(hdr.pos, "expected a single whitespace byte before the payload"));
    }
    let start = hdr.pos + 1;
    let needed = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| parse_err(2, "image dimensions overflow"))?;
    let payload = &bytes[start..];
    if payload.len() < needed {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: expected {needed} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > needed {
        return Err(parse_err(start + needed, "trailing bytes after payload"));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    FeatureMap::from_vec(height, width, channels, data)
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes a 3-channel map as P6 or a 1-channel map as P5.
pub fn encode_netpbm(map: &FeatureMap) -> Result<Vec<u8>> {
    let magic = match map.channels() {
        3 => "P6",
        1 => "P5",
        c => return Err(invalid!("cannot write a {c}-channel image; need 1 or 3")),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes)
}

pub fn write_image(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_netpbm(map)?)
}

/// Parses `H` lines of `W` comma-separated non-negative integers.
pub fn parse_labels(text: &str) -> Result<LabelMap> {
    let mut labels = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let before = labels.len();
        for field in line.split(',') {
            let v = field.trim().parse::<u32>().map_err(|_| Error::ParseLine {
                line: line_no,
                message: format!("{:?} is not a non-negative integer", field.trim()),
            })?;
            labels.push(v);
        }
        let row = labels.len() - before;
        match width {
            None => width = Some(row),
            Some(w) if w != row => {
                return Err(Error::ParseLine {
                    line: line_no,
                    message: format!("row has {row} fields, expected {w}"),
                })
            }
            _ => {}
        }
        height += 1;
    }
    LabelMap::new(height, width.unwrap_or(0), labels)
}

pub fn format_labels(labels: &LabelMap) -> String {
    let mut out = String::with_capacity(labels.labels().len() * 4);
    for row in labels.labels().chunks(labels.width().max(1)) {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), format_labels(labels).as_bytes())
}

/// Pretty-printed UTF-8 JSON; key order follows the struct definition.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize infallibly");
    s.push('\n');
    s
}

pub fn write_report<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), to_json(value).as_bytes())
}
