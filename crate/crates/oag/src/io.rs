//! File formats: binary PPM and PNG images (quantized to 8-bit only at the
//! disk boundary), a flat little-endian checkpoint format for model weights,
//! TOML sidecars, and the dataset manifest CSV.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::{DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Round-and-clamp a pixel value to one byte. This is the only place where
/// real-valued images lose precision.
pub fn quantize_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn to_bytes(image: &ImageTensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.shape();
    if c != 3 {
        return Err(Error::config(format!("expected 3 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize_u8(image.get(ch, y, x)));
            }
        }
    }
    Ok(out)
}

fn from_bytes(bytes: &[u8], h: usize, w: usize) -> ImageTensor {
    let mut img = ImageTensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                img.set(ch, y, x, bytes[(y * w + x) * 3 + ch] as f64);
            }
        }
    }
    img
}

pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    let (_, h, w) = image.shape();
    let body = to_bytes(image)?;
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write!(f, "P6\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(&body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Header: three whitespace-separated tokens after the magic, then a single
    // whitespace byte, then the binary payload.
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    if token(&raw)? != "P6" {
        return Err(Error::format(path, "not a binary PPM (P6) file"));
    }
    let w: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::format(path, "bad width"))?;
    let h: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::format(path, "bad height"))?;
    let maxval: usize = token(&raw)?
        .parse()
        .map_err(|_| Error::format(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace separating header from payload
    let need = h * w * 3;
    if raw.len() < pos + need {
        return Err(Error::format(path, "payload shorter than header promises"));
    }
    Ok(from_bytes(&raw[pos..pos + need], h, w))
}

pub fn write_png(path: &Path, image: &ImageTensor) -> Result<()> {
    let (_, h, w) = image.shape();
    let body = to_bytes(image)?;
    let buf: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, body)
        .ok_or_else(|| Error::config("pixel buffer size mismatch"))?;
    buf.save(path)
        .map_err(|e| Error::format(path, format!("png encode failed: {e}")))
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(from_bytes(img.as_raw(), h as usize, w as usize))
}

/// Write either format based on the file extension.
pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => write_ppm(path, image),
        Some("png") => write_png(path, image),
        other => Err(Error::config(format!("unsupported image extension {other:?}"))),
    }
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        Some("png") => read_png(path),
        other => Err(Error::config(format!("unsupported image extension {other:?}"))),
    }
}

const CKPT_MAGIC: &[u8; 8] = b"OAGFLT1\n";

/// Flat weight checkpoint: 8-byte magic, u64 little-endian count, then that
/// many f64 little-endian values. Structure lives in the TOML sidecar.
pub fn write_flat_checkpoint(path: &Path, values: &[f64]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(CKPT_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&(values.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    for v in values {
        f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_flat_checkpoint(path: &Path) -> Result<Vec<f64>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let mut lenb = [0u8; 8];
    f.read_exact(&mut lenb).map_err(|e| Error::io(path, e))?;
    let n = u64::from_le_bytes(lenb) as usize;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != n * 8 {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", n * 8, payload.len()),
        ));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::config(format!("toml encode failed: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, format!("toml decode failed: {e}")))
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    wtr.write_record(["path", "label", "split"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for r in &manifest.records {
        wtr.write_record([r.path.as_str(), &r.label.to_string(), r.split.as_str()])
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    // Class names sit next to the manifest, one per line in label order.
    let names_path = path.with_extension("classes");
    fs::write(&names_path, manifest.class_names.join("\n") + "\n")
        .map_err(|e| Error::io(&names_path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    {
        let headers = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?;
        if headers != vec!["path", "label", "split"] {
            return Err(Error::format(
                path,
                format!("unexpected manifest header {headers:?}"),
            ));
        }
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        if row.len() != 3 {
            return Err(Error::format(path, format!("bad manifest row {row:?}")));
        }
        records.push(ManifestRecord {
            path: row[0].to_string(),
            label: row[1]
                .parse()
                .map_err(|_| Error::format(path, format!("bad label '{}'", &row[1])))?,
            split: Split::parse(&row[2])?,
        });
    }
    let names_path = path.with_extension("classes");
    let class_names = match fs::read_to_string(&names_path) {
        Ok(text) => text.lines().map(|l| l.to_string()).collect(),
        Err(_) => Vec::new(),
    };
    Ok(DatasetManifest {
        records,
        class_names,
    })
}
