//! Binary PPM (P6) images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: msg.into(),
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Decodes a P6 file to `[3, H, W]` with values in `[0, 1]`. `path` is
/// only used in error messages.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    match token(bytes, &mut pos) {
        Some(b"P6") => {}
        Some(m) if m.len() == 2 && m[0] == b'P' => {
            return Err(bad(
                path,
                format!(
                    "unsupported PPM format {} (only binary P6 is supported)",
                    String::from_utf8_lossy(m)
                ),
            ))
        }
        _ => return Err(bad(path, "not a PPM file (missing P6 magic)")),
    }
    let mut field = |name: &str| -> Result<usize> {
        let t = token(bytes, &mut pos).ok_or_else(|| bad(path, format!("header ends before {name}")))?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(path, format!("invalid {name} `{}`", String::from_utf8_lossy(t))))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval > 65535 {
        return Err(bad(path, format!("maxval {maxval} exceeds 65535")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let sample = if maxval < 256 { 1 } else { 2 };
    let n = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < n * sample {
        return Err(bad(
            path,
            format!("raster has {} bytes, expected {}", raster.len(), n * sample),
        ));
    }
    let scale = maxval as f64;
    let mut out = Tensor::zeros([3, height, width]);
    let data = out.data_mut();
    for p in 0..width * height {
        for c in 0..3 {
            let k = p * 3 + c;
            let v = if sample == 1 {
                raster[k] as f64
            } else {
                u16::from_be_bytes([raster[2 * k], raster[2 * k + 1]]) as f64
            };
            data[c * width * height + p] = v / scale;
        }
    }
    Ok(out)
}

/// Encodes a `[3, H, W]` tensor as 8-bit P6, clamping to `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::dim(format!("P6 needs a 3×H×W image, got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(quantize(data[c * h * w + p]));
        }
    }
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| bad(path, format!("cannot read: {e}")))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Every `*.ppm` file in `dir`, in lexicographic order. All images must
/// share one size.
pub fn load_images(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| bad(dir, format!("cannot list directory: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(bad(dir, "no .ppm files found"));
    }
    let mut images: Vec<Tensor> = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = read_ppm(p)?;
        if let Some(first) = images.first() {
            if first.shape() != img.shape() {
                return Err(bad(
                    p,
                    format!(
                        "size {}×{} differs from {}×{} of {}",
                        img.shape()[2],
                        img.shape()[1],
                        first.shape()[2],
                        first.shape()[1],
                        paths[0].display()
                    ),
                ));
            }
        }
        images.push(img);
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_255_is_ones() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let t = decode_ppm(&bytes, Path::new("a.ppm")).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn p5_is_unsupported() {
        let err = decode_ppm(b"P5\n1 1\n255\n\0", Path::new("g.pgm")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("g.pgm") && msg.contains("P5"), "{msg}");
    }

    #[test]
    fn comments_and_truncation() {
        let mut ok = b"P6 # comment\n1 1\n255\n".to_vec();
        ok.extend([0, 128, 255]);
        let t = decode_ppm(&ok, Path::new("c.ppm")).unwrap();
        assert_eq!(t.data()[2], 1.0);
        assert!(decode_ppm(b"P6\n4 4\n255\n\0\0", Path::new("t.ppm")).is_err());
        assert!(decode_ppm(b"P6\nx 4\n255\n", Path::new("t.ppm")).is_err());
    }
}
