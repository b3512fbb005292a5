//! Grayscale image file I/O: binary PGM (P5) read/write, PNG read.

use std::fs;
use std::path::Path;

use crate::aug::Image;
use crate::error::{Error, Result};

/// Write an image as binary PGM with maxval 255; intensities are rounded to
/// the nearest integer and clamped.
pub fn write_pgm(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(img.width() * img.height() + 32);
    buf.extend_from_slice(format!("P5\n{} {}\n255\n", img.width(), img.height()).as_bytes());
    for &p in img.pixels() {
        buf.push(p.round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, buf).map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

/// Read a binary PGM (P5) file. Header whitespace and `#` comments are
/// handled; maxval must be 255.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes =
        fs::read(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
    parse_pgm(&bytes, &path.display().to_string())
}

fn parse_pgm(bytes: &[u8], name: &str) -> Result<Image> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!("{name}: truncated PGM header")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    if magic != "P5" {
        return Err(Error::Data(format!("{name}: not a binary PGM (magic {magic})")));
    }
    let width: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data(format!("{name}: bad PGM width")))?;
    let height: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data(format!("{name}: bad PGM height")))?;
    let maxval: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data(format!("{name}: bad PGM maxval")))?;
    if maxval != 255 {
        return Err(Error::Data(format!("{name}: unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = pos + 1;
    let need = width * height;
    if bytes.len() < data_start + need {
        return Err(Error::Data(format!(
            "{name}: PGM raster truncated ({} of {need} bytes)",
            bytes.len().saturating_sub(data_start)
        )));
    }
    let pixels = bytes[data_start..data_start + need].iter().map(|&b| b as f64).collect();
    Image::new(width, height, pixels, name)
}

/// Read any supported image file as grayscale. Multi-channel sources are
/// converted by averaging the channels.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ext) if ext == "pgm" => read_pgm(path),
        Some(ext) if ext == "png" => {
            let img = image::open(path)
                .map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let pixels = rgb
                .pixels()
                .map(|p| (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / 3.0)
                .collect();
            Image::new(w, h, pixels, path.display().to_string())
        }
        _ => Err(Error::Data(format!(
            "unsupported image format: {} (expected .pgm or .png)",
            path.display()
        ))),
    }
}

/// True when the filename looks like an image this crate can load.
pub fn is_supported_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("pgm") | Some("png")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_preserves_rounded_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let mut img = Image::filled(9, 8, 0.0, "t").unwrap();
        for (i, p) in img.pixels_mut().iter_mut().enumerate() {
            *p = (i % 256) as f64 + 0.4; // fractional parts round away
        }
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.width(), 9);
        assert_eq!(back.height(), 8);
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            assert_eq!(*a, b.round().min(255.0));
        }
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# a comment\n8 8\n# another\n255\n".to_vec();
        bytes.extend(std::iter::repeat(7u8).take(64));
        let img = parse_pgm(&bytes, "mem").unwrap();
        assert_eq!(img.width(), 8);
        assert!(img.pixels().iter().all(|&p| p == 7.0));
    }

    #[test]
    fn truncated_pgm_is_a_data_error() {
        let bytes = b"P5\n8 8\n255\nshort".to_vec();
        assert!(matches!(parse_pgm(&bytes, "mem"), Err(Error::Data(_))));
    }

    #[test]
    fn png_reads_as_channel_average() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut rgb = image::RgbImage::new(8, 8);
        for p in rgb.pixels_mut() {
            p.0 = [30, 60, 90];
        }
        rgb.save(&path).unwrap();
        let img = read_image(&path).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 60.0));
    }

    #[test]
    fn unsupported_extension_rejected() {
        assert!(matches!(
            read_image(Path::new("x.bmp")),
            Err(Error::Data(_))
        ));
    }
}
