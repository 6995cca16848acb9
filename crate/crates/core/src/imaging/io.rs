use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use super::ImageTensor;
use crate::error::{Error, Result};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Load an 8-bit grayscale or RGB PNG, mapping bytes to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || bytes[..8] != PNG_SIGNATURE {
        return Err(Error::NotPng(path.to_path_buf()));
    }
    let decode_err = |e: png::DecodingError| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut reader = png::Decoder::new(Cursor::new(&bytes)).read_info().map_err(decode_err)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("bit depth {depth:?}, only 8-bit is supported"),
        });
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("color type {other:?}, only grayscale and RGB are supported"),
            })
        }
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        detail: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let buf = &buf[..frame.buffer_size()];

    // interleaved HWC -> planar CHW
    let mut data = vec![0.0f32; channels * h * w];
    for y in 0..h {
        let row = &buf[y * frame.line_size..][..w * channels];
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = row[x * channels + c] as f32 / 255.0;
            }
        }
    }
    ImageTensor::new(channels, h, w, data)
}

/// Quantize a value in `[0, 1]` to a byte, rounding halves up.
pub(crate) fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) } as f64;
    (v * 255.0 + 0.5).floor() as u8
}

/// Write an 8-bit PNG; values are clamped to `[0, 1]` first.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.shape();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "cannot save a {c}-channel image as PNG"
            )))
        }
    };
    let mut interleaved = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                interleaved[(y * w + x) * c + ch] = quantize(img.get(ch, y, x));
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encode_err = |e: png::EncodingError| Error::Encode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&interleaved).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.2), 255);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(0.0), 0);
    }

    #[test]
    fn white_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.png");
        save_image(&ImageTensor::filled(3, 64, 64, 1.0), &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), (3, 64, 64));
        assert!(back.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gray_value_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        save_image(&ImageTensor::filled(1, 8, 8, 0.5), &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.channels(), 1);
        assert!((back.get(0, 3, 3) - 128.0 / 255.0).abs() < 1e-7);
        assert!((back.get(0, 3, 3) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn zero_image_is_black() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.png");
        save_image(&ImageTensor::filled(3, 8, 8, 0.0), &p).unwrap();
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_image(&missing), Err(Error::MissingFile(_))));

        let text = dir.path().join("text.png");
        fs::write(&text, b"definitely not a png").unwrap();
        assert!(matches!(load_image(&text), Err(Error::NotPng(_))));

        let good = dir.path().join("good.png");
        save_image(&ImageTensor::filled(3, 16, 16, 0.25), &good).unwrap();
        let bytes = fs::read(&good).unwrap();
        let truncated = dir.path().join("trunc.png");
        fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&truncated), Err(Error::Decode { .. })));

        let deep = dir.path().join("deep.png");
        {
            let f = fs::File::create(&deep).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 4, 4);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 32]).unwrap();
        }
        assert!(matches!(load_image(&deep), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn unwritable_path() {
        let img = ImageTensor::filled(1, 8, 8, 0.0);
        let err = save_image(&img, "/nonexistent-dir/x/y.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_round_trip_within_one_level(
            vals in proptest::collection::vec(-0.5f32..1.5, 3 * 8 * 8)
        ) {
            let img = ImageTensor::new(3, 8, 8, vals).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.png");
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            for (a, b) in img.clamped().data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-7);
            }
        }
    }
}
