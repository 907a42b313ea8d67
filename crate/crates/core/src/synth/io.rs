//! Binary PGM/PPM rasters and the `poses.txt` record format.

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};
use crate::geom::{Quat, Se3Pose};

pub(crate) const POSES_HEADER: &str = "# epose-v1";

/// Writes an 8-bit binary PGM (one channel) or PPM (three channels).
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let plane = img.width() * img.height();
    for p in 0..plane {
        for c in 0..img.channels() {
            let v = img.data()[c * plane + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM or PPM with a maximum value of at most 255.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::parse(path, 1, msg);
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        // Skip whitespace and comments between header tokens.
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated raster header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the pixels.
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported raster type `{other}` (expected P5 or P6)"))),
    };
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| bad(&format!("invalid {what} `{s}`")))
    };
    let (w, h, max) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maximum value")?);
    if max == 0 || max > 255 {
        return Err(bad(&format!("maximum value {max} outside 1..=255")));
    }
    let plane = w * h;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != plane * channels {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            plane * channels,
            payload.len()
        )));
    }
    let mut data = vec![0.0; plane * channels];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = payload[p * channels + c] as f64 / max as f64;
        }
    }
    Image::new(w, h, channels, data)
}

/// Writes `poses.txt`: a version line, then `path tx ty tz qw qx qy qz` per
/// record with round-trip precision.
pub fn write_poses(path: &Path, records: &[(String, Se3Pose)]) -> Result<()> {
    let mut out = String::from(POSES_HEADER);
    out.push('\n');
    for (name, pose) in records {
        out.push_str(name);
        for v in pose.t.iter().chain(pose.q.as_array().iter()) {
            out.push_str(&format!(" {v:.16e}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses `poses.txt`. Quaternions must be unit within `1e-6`; they are
/// returned normalized to the `w >= 0` hemisphere.
pub fn read_poses(path: &Path) -> Result<Vec<(String, Se3Pose)>> {
    Ok(parse_poses(path)?.into_iter().map(|(_, n, p)| (n, p)).collect())
}

/// Records with their 1-based line numbers.
pub(crate) fn parse_poses(path: &Path) -> Result<Vec<(usize, String, Se3Pose)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == POSES_HEADER => {}
        _ => return Err(Error::parse(path, 1, format!("missing `{POSES_HEADER}` header"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::parse(path, i + 1, msg);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 7];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("invalid number `{f}`")))?;
        }
        let q = [v[3], v[4], v[5], v[6]];
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(err(format!("quaternion norm {norm} is not 1")));
        }
        let q = Quat::new(q).map_err(|e| err(e.to_string()))?;
        out.push((i + 1, fields[0].to_string(), Se3Pose::new([v[0], v[1], v[2]], q)));
    }
    Ok(out)
}
