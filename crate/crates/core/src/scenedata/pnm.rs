use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data(format!("{}: {}", path.display(), reason.into()))
}

/// Write a single-channel tensor with values in [0, 1] as binary 8-bit PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    if image.channels() != 1 {
        return Err(Error::shape(format!("PGM needs one channel, got {}", image.shape())));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.data().iter().map(|&v| quantize(v)));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a three-channel tensor with values in [0, 1] as binary 8-bit PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape(format!("PPM needs three channels, got {}", image.shape())));
    }
    let plane = image.height() * image.width();
    let mut bytes = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(image.data()[c * plane + i]));
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a binary PGM (P5, maxval ≤ 255) into a `1×H×W` tensor scaled to [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
            return Err(bad(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad(path, format!("unsupported magic `{}` (need P5)", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(path, format!("bad header field `{s}`")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad(path, format!("unsupported maxval {maxval}")));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(bad(path, format!("expected {} pixel bytes, found {}", w * h, body.len())));
    }
    let data = body.iter().map(|&b| b as f64 / maxval as f64).collect();
    Tensor::from_vec(Shape::new(1, h, w), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let t = Tensor::from_fn(Shape::new(1, 5, 7), |_, y, x| (y * 7 + x) as f64 / 34.0);
        write_pgm(&p, &t).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
        let mask = Tensor::from_fn(Shape::new(1, 3, 3), |_, y, _| (y % 2) as f64);
        write_pgm(&p, &mask).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), mask);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(read_pgm(&p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pgm");
        std::fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&p).is_err());
        std::fs::write(&p, b"P5\n4 4\n255\n\x00\x00").unwrap();
        assert!(read_pgm(&p).is_err());
        assert!(read_pgm(&dir.path().join("missing.pgm")).is_err());
        assert!(write_pgm(&p, &Tensor::zeros(Shape::new(2, 2, 2))).is_err());
    }

    #[test]
    fn ppm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.ppm");
        let t = Tensor::from_fn(Shape::new(3, 1, 2), |c, _, x| if c == x { 1.0 } else { 0.0 });
        write_ppm(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.ends_with(&[255, 0, 0, 0, 255, 0]));
    }
}
