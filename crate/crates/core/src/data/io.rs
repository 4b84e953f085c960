//! Binary PPM/PGM and 8-bit PNG reading and writing.
//!
//! Image values map to `[0, 1]` as `k / maxval`; writing quantizes with
//! `round(255 v)`, so an image already on the `k / 255` grid survives a round
//! trip exactly.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Decoded 8-bit raster, interleaved channels.
struct Raster {
    channels: usize,
    height: usize,
    width: usize,
    maxval: u16,
    bytes: Vec<u8>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(path, bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(path, &bytes)
    } else {
        Err(format_err(path, "unsupported format; expected binary PPM/PGM or PNG"))
    }
}

fn decode_png(path: &Path, bytes: Vec<u8>) -> Result<Raster> {
    let png_err = |e: png::DecodingError| format_err(path, e.to_string());
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(format_err(path, format!("unsupported color type {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let row = width * channels;
    let mut out = Vec::with_capacity(row * height);
    for y in 0..height {
        out.extend_from_slice(&buf[y * info.line_size..y * info.line_size + row]);
    }
    Ok(Raster {
        channels,
        height,
        width,
        maxval: 255,
        bytes: out,
    })
}

fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_err(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, "malformed header"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, "malformed header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format_err(path, "zero image extent"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(format_err(
            path,
            format!("unsupported maxval {maxval}; only 8-bit files are read"),
        ));
    }
    let len = width * height * channels;
    let data = bytes
        .get(pos..pos + len)
        .ok_or_else(|| format_err(path, "truncated raster"))?;
    Ok(Raster {
        channels,
        height,
        width,
        maxval: maxval as u16,
        bytes: data.to_vec(),
    })
}

/// Reads an image as a `[c, H, W]` tensor with `c ∈ {1, 3}`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let r = read_raster(path)?;
    let (c, h, w) = (r.channels, r.height, r.width);
    let mut data = vec![0.0; c * h * w];
    let scale = f64::from(r.maxval);
    for (i, &b) in r.bytes.iter().enumerate() {
        let (pixel, ch) = (i / c, i % c);
        data[ch * h * w + pixel] = f64::from(b) / scale;
    }
    Tensor::new(&[c, h, w], data)
}

/// Reads a single-channel label map; returns `(labels, height, width)`.
pub fn load_labels(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let r = read_raster(path)?;
    if r.channels != 1 {
        return Err(format_err(path, "label maps must be single-channel"));
    }
    Ok((r.bytes, r.height, r.width))
}

/// Loads an image and its label map, checking that their extents agree.
pub fn load_labeled(image_path: &Path, label_path: &Path) -> Result<LabeledImage> {
    let image = load_image(image_path)?;
    let (labels, lh, lw) = load_labels(label_path)?;
    let (ih, iw) = (image.shape()[1], image.shape()[2]);
    if (ih, iw) != (lh, lw) {
        return Err(Error::FileExtentMismatch {
            image: image_path.to_path_buf(),
            image_size: (ih, iw),
            labels: label_path.to_path_buf(),
            label_size: (lh, lw),
        });
    }
    let id = image_path.file_stem().map_or_else(
        || image_path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    LabeledImage::new(id, image, labels)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn write_raster(path: &Path, channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    if is_png(path) {
        let file = BufWriter::new(fs::File::create(path)?);
        let mut enc = png::Encoder::new(file, width as u32, height as u32);
        enc.set_color(if channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| format_err(path, e.to_string());
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(bytes).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    } else {
        let magic = if channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
        out.extend_from_slice(bytes);
        fs::write(path, out)?;
    }
    Ok(())
}

/// Writes a `[c, H, W]` tensor (`c ∈ {1, 3}`) as PNG when the extension is
/// `.png`, otherwise as binary PGM/PPM.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if image.rank() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::Shape {
            op: "save image",
            left: s.to_vec(),
            right: vec![3],
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut bytes = vec![0u8; c * h * w];
    for (i, b) in bytes.iter_mut().enumerate() {
        let v = src[(i % c) * h * w + i / c];
        *b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    write_raster(path, c, h, w, &bytes)
}

/// Writes a label map as 8-bit grayscale PNG or PGM.
pub fn save_labels(path: &Path, labels: &[u8], height: usize, width: usize) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::Shape {
            op: "save labels",
            left: vec![height, width],
            right: vec![labels.len()],
        });
    }
    write_raster(path, 1, height, width, labels)
}

/// RGB color per class index.
pub type Palette = Vec<[u8; 3]>;

/// Writes a color visualization of a label map.
pub fn save_color_png(path: &Path, labels: &[u8], height: usize, width: usize, palette: &Palette) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * 3);
    for &l in labels {
        let color = palette
            .get(l as usize)
            .ok_or_else(|| Error::Config(format!("palette has {} colors, label {l} needs more", palette.len())))?;
        bytes.extend_from_slice(color);
    }
    if labels.len() != height * width {
        return Err(Error::Shape {
            op: "save color",
            left: vec![height, width],
            right: vec![labels.len()],
        });
    }
    write_raster(path, 3, height, width, &bytes)
}

/// Reads `image<TAB>labels` lines; relative paths resolve against the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(img), Some(lbl), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format_err(path, format!("line {}: expected `image<TAB>labels`", n + 1)));
        };
        entries.push((base.join(img.trim()), base.join(lbl.trim())));
    }
    Ok(entries)
}

/// Writes manifest lines with paths as given.
pub fn write_manifest(path: &Path, entries: &[(PathBuf, PathBuf)]) -> Result<()> {
    let mut text = String::new();
    for (img, lbl) in entries {
        text.push_str(&format!("{}\t{}\n", img.display(), lbl.display()));
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_values_are_k_over_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 128, 254, 255]);
        fs::write(&path, bytes).unwrap();
        let t = load_image(&path).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        let expect = [0.0, 128.0, 1.0, 254.0, 2.0, 255.0].map(|k| k / 255.0);
        assert_eq!(t.data(), &expect);
    }

    #[test]
    fn png_and_pnm_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let img = Tensor::new(&[3, 4, 5], data).unwrap();
        for name in ["x.png", "x.ppm"] {
            let p = dir.path().join(name);
            save_image(&p, &img).unwrap();
            assert_eq!(load_image(&p).unwrap(), img, "{name}");
        }
        let labels: Vec<u8> = (0..20).map(|i| (i % 3) as u8).collect();
        for name in ["l.png", "l.pgm"] {
            let p = dir.path().join(name);
            save_labels(&p, &labels, 4, 5).unwrap();
            assert_eq!(load_labels(&p).unwrap(), (labels.clone(), 4, 5));
        }
    }

    #[test]
    fn mismatched_pair_names_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.png");
        let lbl = dir.path().join("lbl.png");
        save_image(&img, &Tensor::zeros(&[1, 4, 4])).unwrap();
        save_labels(&lbl, &[0; 12], 3, 4).unwrap();
        let err = load_labeled(&img, &lbl).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::FileExtentMismatch { .. }));
        assert!(msg.contains("img.png") && msg.contains("lbl.png"), "{msg}");
    }

    #[test]
    fn rejects_unsupported_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        fs::write(&p, b"P6\n2 2\n65535\n").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
        fs::write(&p, b"GIF89a").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
        fs::write(&p, b"P5\n4 4\n255\n\x00").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.tsv");
        write_manifest(&m, &[("i/0.png".into(), "l/0.png".into())]).unwrap();
        let entries = read_manifest(&m).unwrap();
        assert_eq!(entries, vec![(dir.path().join("i/0.png"), dir.path().join("l/0.png"))]);
        fs::write(&m, "only-one-column\n").unwrap();
        assert!(read_manifest(&m).is_err());
    }

    #[test]
    fn color_output_needs_enough_colors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let palette = vec![[0, 0, 0], [255, 0, 0]];
        save_color_png(&p, &[0, 1, 1, 0], 2, 2, &palette).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.data()[1], 1.0);
        assert!(save_color_png(&p, &[2, 0, 0, 0], 2, 2, &palette).is_err());
    }
}
