//! Bit-exact binary PGM/PPM readers and writers.
//!
//! Depth maps are stored as 16-bit PGM (P5, maxval 65535) holding millimeters
//! (big-endian sample order per the format). Images are 8-bit binary PPM
//! (P6). Headers are exactly `P5\n<w> <h>\n65535\n` / `P6\n<w> <h>\n255\n`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, ValidMask};
use crate::numcore::Array;

/// Depth in meters -> u16 millimeters, clamped.
fn depth_to_mm(v: f32) -> u16 {
    (v * 1000.0).round().clamp(0.0, 65535.0) as u16
}

pub fn write_depth_pgm16(depth: &DepthMap, path: &Path) -> Result<()> {
    let (h, w) = (depth.h(), depth.w());
    let mut buf = Vec::with_capacity(32 + 2 * h * w);
    write!(buf, "P5\n{w} {h}\n65535\n")?;
    for v in depth.values() {
        buf.extend_from_slice(&depth_to_mm(v).to_be_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_depth_pgm16(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path)?;
    let (w, h, maxval, data) = parse_pnm(&bytes, b"P5")?;
    if maxval != 65535 {
        return Err(Error::Config(format!("expected 16-bit PGM, maxval {maxval}")));
    }
    if data.len() != 2 * w * h {
        return Err(Error::Config("truncated PGM payload".into()));
    }
    let values = data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 1000.0)
        .collect();
    Ok(DepthMap::from_vec(values, h, w))
}

/// Image values in [0, 1] -> 8-bit binary PPM.
pub fn write_image_ppm(image: &Array, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_image_ppm",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 3],
        });
    }
    let (h, w) = (s[0], s[1]);
    let mut buf = Vec::with_capacity(32 + 3 * h * w);
    write!(buf, "P6\n{w} {h}\n255\n")?;
    for v in image.data().iter() {
        buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_image_ppm(path: &Path) -> Result<Array> {
    let bytes = std::fs::read(path)?;
    let (w, h, maxval, data) = parse_pnm(&bytes, b"P6")?;
    if maxval != 255 || data.len() != 3 * w * h {
        return Err(Error::Config("unsupported or truncated PPM".into()));
    }
    let values = data.iter().map(|&b| b as f32 / 255.0).collect();
    Array::from_vec(values, &[h, w, 3])
}

/// Validity mask as an 8-bit PGM of 0/255.
pub fn write_mask_pgm(mask: &ValidMask, path: &Path) -> Result<()> {
    let (h, w) = (mask.h(), mask.w());
    let mut buf = Vec::with_capacity(32 + h * w);
    write!(buf, "P5\n{w} {h}\n255\n")?;
    for r in 0..h {
        for c in 0..w {
            buf.push(if mask.get(r, c) { 255 } else { 0 });
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_mask_pgm(path: &Path) -> Result<ValidMask> {
    let bytes = std::fs::read(path)?;
    let (w, h, maxval, data) = parse_pnm(&bytes, b"P5")?;
    if maxval != 255 || data.len() != w * h {
        return Err(Error::Config("unsupported or truncated mask PGM".into()));
    }
    Ok(ValidMask::new(data.iter().map(|&b| b != 0).collect(), h, w))
}

/// Parse `<magic>\n<w> <h>\n<maxval>\n` followed by the raw payload.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, u32, &'a [u8])> {
    let bad = |m: &str| Error::Config(format!("bad PNM file: {m}"));
    if bytes.len() < magic.len() + 1 || &bytes[..magic.len()] != magic {
        return Err(bad("magic"));
    }
    let mut pos = magic.len();
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header parse"))?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("header terminator"));
    }
    pos += 1;
    Ok((fields[0] as usize, fields[1] as usize, fields[2], &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("spatialgen-pnm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn depth_header_and_fixed_point_rule() {
        let d = DepthMap::from_vec(vec![10.0, 1.234, 0.0, 9.9995], 2, 2);
        let p = tmp("depth.pgm");
        write_depth_pgm16(&d, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n65535\n"));
        // 10.0 m -> 10000; stored big-endian after the header.
        let payload = &bytes[b"P5\n2 2\n65535\n".len()..];
        assert_eq!(u16::from_be_bytes([payload[0], payload[1]]), 10_000);
    }

    #[test]
    fn depth_round_trip_within_half_mm() {
        let mut rng = crate::numcore::Rng::new(0);
        let vals: Vec<f32> = (0..64).map(|_| rng.range_f32(0.5, 12.0)).collect();
        let d = DepthMap::from_vec(vals.clone(), 8, 8);
        let p = tmp("depth_rt.pgm");
        write_depth_pgm16(&d, &p).unwrap();
        let back = read_depth_pgm16(&p).unwrap();
        for (a, b) in vals.iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.0005 + 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn ppm_header_and_round_trip() {
        let img = Array::from_vec(
            vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1, 0.9, 0.2, 0.6, 0.4, 0.8, 0.3],
            &[2, 2, 3],
        )
        .unwrap();
        let p = tmp("img.ppm");
        write_image_ppm(&img, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        let back = read_image_ppm(&p).unwrap();
        for (a, b) in img.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn writes_are_byte_stable() {
        let d = DepthMap::from_vec(vec![1.5; 16], 4, 4);
        let (p1, p2) = (tmp("stable1.pgm"), tmp("stable2.pgm"));
        write_depth_pgm16(&d, &p1).unwrap();
        write_depth_pgm16(&d, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn mask_round_trip() {
        let m = ValidMask::new(vec![true, false, false, true], 2, 2);
        let p = tmp("mask.pgm");
        write_mask_pgm(&m, &p).unwrap();
        let back = read_mask_pgm(&p).unwrap();
        assert_eq!(back.count(), 2);
        assert!(back.get(0, 0) && !back.get(0, 1));
    }

    #[test]
    fn truncated_file_is_clean_error() {
        let p = tmp("trunc.pgm");
        std::fs::write(&p, b"P5\n4 4\n655").unwrap();
        assert!(read_depth_pgm16(&p).is_err());
    }
}
