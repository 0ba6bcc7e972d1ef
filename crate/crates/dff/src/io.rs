//! File formats: PFM and 16-bit PNG depth, PNG images, JSON manifests, NPY
//! probability maps. Every writer goes through [`write_atomic`].

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use dff_core::{DepthMap, FocalStack, FocusProbabilityMap, Image};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

/// Default PNG depth unit: one count per millimeter.
pub const PNG_DEPTH_SCALE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}", path.display())]
    File { path: PathBuf, source: std::io::Error },
    #[error("{}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: malformed {what}: {detail}", path.display())]
    Format {
        path: PathBuf,
        what: &'static str,
        detail: String,
    },
    #[error("{}", path.display())]
    Core { path: PathBuf, source: dff_core::Error },
    #[error(transparent)]
    Invalid(#[from] dff_core::Error),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, what: &'static str, detail: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        what,
        detail: detail.into(),
    }
}

fn core_err(path: &Path) -> impl FnOnce(dff_core::Error) -> IoError + '_ {
    move |source| IoError::Core {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, creating missing parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(file_err(path))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(file_err(path))?;
    tmp.write_all(bytes).map_err(file_err(path))?;
    tmp.as_file().sync_all().map_err(file_err(path))?;
    tmp.persist(path).map_err(|e| file_err(path)(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------- PFM

/// Encodes a single-channel little-endian PFM. Rows run bottom to top.
pub fn encode_pfm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(values.len() * 4);
    for y in (0..height).rev() {
        for v in &values[y * width..(y + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn pfm_token(reader: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8];
        if reader.read(&mut b).map_err(file_err(path))? == 0 {
            return Err(format_err(path, "PFM header", "unexpected end of file"));
        }
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return String::from_utf8(tok).map_err(|_| format_err(path, "PFM header", "not ASCII"));
        }
        tok.push(b[0]);
        if tok.len() > 32 {
            return Err(format_err(path, "PFM header", "token too long"));
        }
    }
}

/// Decodes a single-channel PFM of either byte order, returning rows top to
/// bottom.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut reader = BufReader::new(bytes);
    let magic = pfm_token(&mut reader, path)?;
    if magic == "PF" {
        return Err(format_err(path, "PFM header", "three-channel PFM is not a depth map"));
    }
    if magic != "Pf" {
        return Err(format_err(path, "PFM header", format!("bad magic {magic:?}")));
    }
    let parse_dim = |s: String| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format_err(path, "PFM header", format!("bad dimension {s:?}")))
    };
    let width = parse_dim(pfm_token(&mut reader, path)?)?;
    let height = parse_dim(pfm_token(&mut reader, path)?)?;
    let scale_tok = pfm_token(&mut reader, path)?;
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| format_err(path, "PFM header", format!("bad scale {scale_tok:?}")))?;
    let little = scale < 0.0;
    let mut data = Vec::new();
    reader.read_to_end(&mut data).map_err(file_err(path))?;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| format_err(path, "PFM header", "dimensions overflow"))?;
    if data.len() != n * 4 {
        return Err(format_err(
            path,
            "PFM body",
            format!("expected {} bytes, found {}", n * 4, data.len()),
        ));
    }
    let mut values = vec![0.0f32; n];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (x, row) = (i % width, i / width);
        values[(height - 1 - row) * width + x] = v;
    }
    Ok((width, height, values))
}

// ---------------------------------------------------------------- depth

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

/// Loads a depth map from `.pfm` (meters) or 16-bit `.png` (`scale` meters
/// per count). Non-positive and non-finite values are masked invalid.
pub fn load_depth(path: &Path, png_scale: f64) -> Result<DepthMap> {
    match extension(path).as_str() {
        "pfm" => {
            let bytes = fs::read(path).map_err(file_err(path))?;
            let (w, h, v) = decode_pfm(&bytes, path)?;
            DepthMap::new(w, h, v.into_iter().map(f64::from).collect()).map_err(core_err(path))
        }
        "png" => {
            let img = image::open(path).map_err(|source| IoError::Image {
                path: path.to_path_buf(),
                source,
            })?;
            let DynamicImage::ImageLuma16(buf) = img else {
                return Err(format_err(path, "depth PNG", "expected 16-bit single-channel"));
            };
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let values = buf.into_raw().into_iter().map(|c| c as f64 * png_scale).collect();
            DepthMap::new(w, h, values).map_err(core_err(path))
        }
        other => Err(format_err(
            path,
            "depth file",
            format!("unsupported extension {other:?}"),
        )),
    }
}

/// Saves a depth map as `.pfm` (32-bit float) or 16-bit `.png`. Invalid
/// pixels are written as 0 unless their stored value already reads back as
/// invalid.
pub fn save_depth(map: &DepthMap, path: &Path, png_scale: f64) -> Result<()> {
    let (w, h) = map.dims();
    let values = map
        .values()
        .iter()
        .zip(map.mask())
        .map(|(&v, &m)| if m || !(v.is_finite() && v > 0.0) { v } else { 0.0 });
    let bytes = match extension(path).as_str() {
        "pfm" => encode_pfm(w, h, &values.map(|v| v as f32).collect::<Vec<_>>()),
        "png" => {
            let counts: Vec<u16> = values
                .map(|v| {
                    if v.is_finite() && v > 0.0 {
                        (v / png_scale).round().clamp(1.0, 65535.0) as u16
                    } else {
                        0
                    }
                })
                .collect();
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w as u32, h as u32, counts).expect("sizes agree");
            encode_png(DynamicImage::ImageLuma16(buf), path)?
        }
        other => {
            return Err(format_err(
                path,
                "depth file",
                format!("unsupported extension {other:?}"),
            ))
        }
    };
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------- images

fn encode_png(img: DynamicImage, path: &Path) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|source| IoError::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(out.into_inner())
}

/// Loads a PNG (8 or 16 bit, gray or RGB; alpha dropped) scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| IoError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = !img.color().has_color();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = img.color().bytes_per_pixel() / img.color().channel_count() as u8 > 1;
    let (channels, data): (usize, Vec<f64>) = match (gray, sixteen) {
        (true, false) => (
            1,
            img.into_luma8()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect(),
        ),
        (true, true) => (
            1,
            img.into_luma16()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
        ),
        (false, false) => (
            3,
            img.into_rgb8()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect(),
        ),
        (false, true) => (
            3,
            img.into_rgb16()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
        ),
    };
    Image::new(w, h, channels, data).map_err(core_err(path))
}

/// Saves a one- or three-channel image as a 16-bit PNG.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let counts: Vec<u16> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma16(ImageBuffer::from_raw(w, h, counts).expect("sizes agree")),
        3 => DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, Vec<u16>>::from_raw(w, h, counts).expect("sizes agree")),
        c => return Err(dff_core::Error::UnsupportedChannels(c).into()),
    };
    let bytes = encode_png(dynamic, path)?;
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------- manifests

/// One focal stack on disk. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub images: Vec<PathBuf>,
    pub focal_distances_m: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    pub scene_id: String,
}

impl StackManifest {
    /// Checks the manifest's own invariants without touching the files.
    pub fn validate(&self) -> dff_core::Result<()> {
        if self.images.len() != self.focal_distances_m.len() {
            return Err(dff_core::Error::CountMismatch {
                expected: self.images.len(),
                found: self.focal_distances_m.len(),
            });
        }
        dff_core::types::validate_focal_distances(&self.focal_distances_m)
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: StackManifest,
    pub base: PathBuf,
}

impl LoadedManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn load_stack(&self) -> Result<FocalStack> {
        load_stack(&self.manifest, &self.base)
    }

    pub fn load_depth(&self) -> Result<Option<DepthMap>> {
        self.manifest
            .depth
            .as_ref()
            .map(|p| load_depth(&self.resolve(p), PNG_DEPTH_SCALE))
            .transpose()
    }
}

pub fn read_manifest(path: &Path) -> Result<LoadedManifest> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let manifest: StackManifest = serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    manifest.validate().map_err(core_err(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedManifest { manifest, base })
}

pub fn write_manifest(manifest: &StackManifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Reads and validates every plane of `manifest`.
pub fn load_stack(manifest: &StackManifest, base: &Path) -> Result<FocalStack> {
    manifest.validate()?;
    let planes = manifest
        .images
        .iter()
        .map(|p| {
            let path = if p.is_absolute() { p.clone() } else { base.join(p) };
            load_image(&path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FocalStack::new(planes, manifest.focal_distances_m.clone())?)
}

// ---------------------------------------------------------------- NPY

/// Encodes a probability map as a C-order `float64` array of shape
/// `(height, width, planes)`.
pub fn encode_probs(p: &FocusProbabilityMap) -> Vec<u8> {
    use npyz::WriterBuilder;
    let shape = [p.height() as u64, p.width() as u64, p.planes() as u64];
    let mut out = Vec::new();
    {
        let mut w = npyz::WriteOptions::<f64>::new()
            .default_dtype()
            .shape(&shape)
            .writer(&mut out)
            .begin_nd()
            .expect("in-memory write");
        w.extend(p.probs().iter().copied()).expect("in-memory write");
        w.finish().expect("in-memory write");
    }
    out
}

pub fn save_probs(p: &FocusProbabilityMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_probs(p))
}

/// Loads a `(height, width, planes)` probability array and validates it.
pub fn load_probs(path: &Path) -> Result<FocusProbabilityMap> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| format_err(path, "NPY", e.to_string()))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 3 {
        return Err(format_err(
            path,
            "NPY",
            format!("expected 3 dimensions, found shape {shape:?}"),
        ));
    }
    if npy.order() != npyz::Order::C {
        return Err(format_err(path, "NPY", "Fortran order is not supported"));
    }
    let values: Vec<f64> = npy.into_vec().map_err(|e| format_err(path, "NPY", e.to_string()))?;
    let (h, w, n) = (shape[0] as usize, shape[1] as usize, shape[2] as usize);
    FocusProbabilityMap::new(w, h, n, values).map_err(core_err(path))
}
