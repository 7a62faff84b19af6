//! Binary Netpbm frames (P5 grayscale, P6 RGB) and plain-text sequence manifests.

use std::path::{Path, PathBuf};

use cascade_tensor::Tensor;

use crate::error::{Error, Result};
use crate::synth::VideoSequence;

/// Decodes a P5/P6 image into a `[C,H,W]` tensor scaled to `[0,1]`.
///
/// Accepts any maxval in `1..=65535`; samples are one byte below 256 and two
/// big-endian bytes otherwise.
pub fn decode_pnm(bytes: &[u8], source: &str) -> Result<Tensor> {
    let err = |offset: usize, detail: String| Error::Image { path: source.to_owned(), offset, detail };
    let mut pos = 0usize;
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(err(0, "missing `P5`/`P6` magic".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        other => return Err(err(1, format!("unsupported format `P{}`", other as char))),
    };
    pos += 2;

    let mut header = [0usize; 3];
    for (i, field) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and `#` comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(err(start, format!("expected {field}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        header[i] = text.parse().map_err(|_| err(start, format!("{field} `{text}` out of range")))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err(err(pos, format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err(pos, format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected single whitespace after maxval".into())),
    }

    let bps = if maxval < 256 { 1 } else { 2 };
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| err(pos, "image extents overflow".into()))?;
    let need = count.checked_mul(bps).ok_or_else(|| err(pos, "image extents overflow".into()))?;
    let avail = bytes.len() - pos;
    if avail < need {
        return Err(err(bytes.len(), format!("truncated pixel data: need {need} bytes, have {avail}")));
    }
    if avail > need {
        return Err(err(pos + need, format!("{} trailing bytes", avail - need)));
    }

    let scale = 1.0 / maxval as f64;
    let plane = width * height;
    let mut data = vec![0.0; count];
    for i in 0..count {
        let at = pos + i * bps;
        let raw = if bps == 1 { bytes[at] as usize } else { (bytes[at] as usize) << 8 | bytes[at + 1] as usize };
        if raw > maxval {
            return Err(err(at, format!("sample {raw} exceeds maxval {maxval}")));
        }
        // interleaved RGB → planar
        let (pix, c) = (i / channels, i % channels);
        data[c * plane + pix] = raw as f64 * scale;
    }
    Ok(Tensor::new(vec![channels, height, width], data)?)
}

/// Encodes a `[1,H,W]` or `[3,H,W]` tensor as 16-bit P5/P6. Values are clamped to `[0,1]`.
pub fn encode_pnm(frame: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = frame.dims3("encode_pnm")?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::param(format!("cannot store {c}-channel frame as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n65535\n").into_bytes();
    out.reserve(c * h * w * 2);
    let plane = h * w;
    let data = frame.data();
    for pix in 0..plane {
        for ch in 0..c {
            let v = data[ch * plane + pix];
            let q = if v.is_nan() { 0 } else { (v.clamp(0.0, 1.0) * 65535.0).round() as u16 };
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, &path.display().to_string())
}

pub fn write_frame(path: impl AsRef<Path>, frame: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(frame)?).map_err(|e| Error::io(path, e))
}

/// Parses a manifest: one frame path per line, `#` comments and blank lines skipped.
/// Relative paths resolve against `base`. Existence is not checked here.
pub fn parse_manifest(text: &str, base: &Path, source: &str) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lower = line.to_ascii_lowercase();
        if !(lower.ends_with(".pgm") || lower.ends_with(".ppm")) {
            return Err(Error::Line {
                path: source.to_owned(),
                line: i + 1,
                detail: format!("`{line}` is not a .pgm or .ppm path"),
            });
        }
        let p = Path::new(line);
        frames.push(if p.is_relative() { base.join(p) } else { p.to_path_buf() });
    }
    Ok(frames)
}

/// Loads every frame listed in a manifest. Needs at least three frames of one shape.
pub fn load_sequence(manifest: impl AsRef<Path>) -> Result<VideoSequence> {
    let manifest = manifest.as_ref();
    let source = manifest.display().to_string();
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let paths = parse_manifest(&text, base, &source)?;
    // re-walk the lines so missing files can be reported by line number
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim().starts_with('#'))
        .map(|(i, _)| i + 1)
        .collect();
    let mut frames = Vec::with_capacity(paths.len());
    for (path, &line) in paths.iter().zip(&lines) {
        if !path.is_file() {
            return Err(Error::Line { path: source.clone(), line, detail: format!("frame `{}` not found", path.display()) });
        }
        let f = read_frame(path)?;
        if let Some(first) = frames.first().map(|t: &Tensor| t.shape().to_vec()) {
            if f.shape() != first.as_slice() {
                return Err(Error::Line {
                    path: source.clone(),
                    line,
                    detail: format!("frame shape {:?} differs from first frame {:?}", f.shape(), first),
                });
            }
        }
        frames.push(f);
    }
    if frames.len() < 3 {
        return Err(Error::param(format!("{source}: need at least 3 frames, got {}", frames.len())));
    }
    VideoSequence::new(frames)
}

/// Writes frames as `frame_NNNN.p?m` plus a `manifest.txt` listing them.
pub fn save_sequence(seq: &VideoSequence, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, f) in seq.frames.iter().enumerate() {
        let ext = if f.shape()[0] == 1 { "pgm" } else { "ppm" };
        let name = format!("frame_{i:04}.{ext}");
        write_frame(dir.join(&name), f)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
