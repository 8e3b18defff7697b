//! Lossless image export/import for inspection dumps: PGM/PPM (binary)
//! and 8-bit PNG. Tensors are [C,H,W] on the [0,255] scale with C in {1,3}.

use super::DataError;
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFileFormat {
    Pgm,
    Ppm,
    Png,
}

impl ImageFileFormat {
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "pgm" => Some(ImageFileFormat::Pgm),
            "ppm" => Some(ImageFileFormat::Ppm),
            "png" => Some(ImageFileFormat::Png),
            _ => None,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn to_bytes(x: &Tensor) -> (usize, usize, usize, Vec<u8>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    // interleave channels for the file formats
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let v = x.data()[ch * h * w + y * w + xx];
                bytes.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    (c, h, w, bytes)
}

pub fn export_image(x: &Tensor, path: &Path, format: ImageFileFormat) -> Result<(), DataError> {
    assert_eq!(x.shape().len(), 3, "export expects [C,H,W]");
    let (c, h, w, bytes) = to_bytes(x);
    match format {
        ImageFileFormat::Pgm | ImageFileFormat::Ppm => {
            let (tag, want) = if format == ImageFileFormat::Pgm {
                ("P5", 1)
            } else {
                ("P6", 3)
            };
            if c != want {
                return Err(DataError::Inconsistent(format!(
                    "{tag} needs {want} channel(s), image has {c}"
                )));
            }
            let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
            write!(f, "{tag}\n{w} {h}\n255\n").map_err(|e| io_err(path, e))?;
            f.write_all(&bytes).map_err(|e| io_err(path, e))?;
            Ok(())
        }
        ImageFileFormat::Png => {
            let color = match c {
                1 => image::ColorType::L8,
                3 => image::ColorType::Rgb8,
                _ => {
                    return Err(DataError::Inconsistent(format!(
                        "png export supports 1 or 3 channels, got {c}"
                    )))
                }
            };
            image::save_buffer(path, &bytes, w as u32, h as u32, color).map_err(|e| {
                DataError::Parse {
                    path: path.display().to_string(),
                    offset: 0,
                    msg: e.to_string(),
                }
            })
        }
    }
}

pub fn import_image(path: &Path, format: ImageFileFormat) -> Result<Tensor, DataError> {
    match format {
        ImageFileFormat::Pgm | ImageFileFormat::Ppm => import_pnm(path, format),
        ImageFileFormat::Png => {
            let img = image::open(path).map_err(|e| DataError::Parse {
                path: path.display().to_string(),
                offset: 0,
                msg: e.to_string(),
            })?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            match img {
                image::DynamicImage::ImageLuma8(buf) => {
                    let data: Vec<f64> = buf.into_raw().iter().map(|&b| b as f64).collect();
                    Ok(Tensor::new(vec![1, h, w], data).expect("png shape"))
                }
                other => {
                    let rgb = other.to_rgb8();
                    let raw = rgb.into_raw();
                    let mut data = vec![0.0; 3 * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            for ch in 0..3 {
                                data[ch * h * w + y * w + x] = raw[(y * w + x) * 3 + ch] as f64;
                            }
                        }
                    }
                    Ok(Tensor::new(vec![3, h, w], data).expect("png shape"))
                }
            }
        }
    }
}

fn import_pnm(path: &Path, format: ImageFileFormat) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let perr = |offset: usize, msg: &str| DataError::Parse {
        path: path.display().to_string(),
        offset,
        msg: msg.to_string(),
    };
    let want_tag = if format == ImageFileFormat::Pgm { b"P5" } else { b"P6" };
    if bytes.len() < 2 || &bytes[..2] != want_tag {
        return Err(perr(0, "bad PNM magic"));
    }
    // header: three whitespace-separated integers after the tag
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(perr(pos, "truncated PNM header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| perr(start, "bad PNM header field"))?;
        fields.push(v);
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(perr(pos, "only maxval 255 supported"));
    }
    let c = if format == ImageFileFormat::Pgm { 1 } else { 3 };
    if bytes.len() < pos + c * w * h {
        return Err(perr(bytes.len(), "truncated PNM payload"));
    }
    let raw = &bytes[pos..pos + c * w * h];
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[ch * h * w + y * w + x] = raw[(y * w + x) * c + ch] as f64;
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], data).expect("pnm shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(c: usize) -> Tensor {
        let (h, w) = (4, 5);
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[ch * h * w + y * w + x] = if (x + y) % 2 == 0 { 255.0 } else { 17.0 };
                }
            }
        }
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn round_trip_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        for (fmt, c, name) in [
            (ImageFileFormat::Pgm, 1, "a.pgm"),
            (ImageFileFormat::Ppm, 3, "a.ppm"),
            (ImageFileFormat::Png, 1, "a1.png"),
            (ImageFileFormat::Png, 3, "a3.png"),
        ] {
            let img = checker(c);
            let p = dir.path().join(name);
            export_image(&img, &p, fmt).unwrap();
            let back = import_image(&p, fmt).unwrap();
            assert_eq!(back.shape(), img.shape());
            assert_eq!(back.data(), img.data(), "{name}");
        }
    }

    #[test]
    fn all_zero_image_is_all_black() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        export_image(&Tensor::zeros(&[1, 3, 3]), &p, ImageFileFormat::Pgm).unwrap();
        let back = import_image(&p, ImageFileFormat::Pgm).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn malformed_pnm_is_typed_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        std::fs::write(&p, b"P5\n3 3\n255\nxx").unwrap();
        assert!(matches!(
            import_image(&p, ImageFileFormat::Pgm).unwrap_err(),
            DataError::Parse { .. }
        ));
    }
}
