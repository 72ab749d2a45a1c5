//! Scan, image and environment-map persistence.
//!
//! Float images are stored as little-endian PFM, previews as gamma-encoded
//! 8-bit PNG. A scan directory holds `manifest.json`, a mask and one image
//! per light.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EnvMap;
use crate::scan::{OlatScan, ScanMeta};
use crate::stage::{round_sig9, LightStage};
use crate::{Error, Image, Result, Vec3};

pub const MANIFEST: &str = "manifest.json";

pub fn write_pfm(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_pfm(image)?)
}

/// PFM bytes, little-endian, rows stored bottom to top.
pub fn encode_pfm(image: &Image) -> Result<Vec<u8>> {
    let tag = match image.channels() {
        3 => "PF",
        1 => "Pf",
        c => return Err(Error::ShapeMismatch(format!("PFM stores 1 or 3 channels, got {c}"))),
    };
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut bytes = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    bytes.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        let row = &image.data()[y * w * c..(y + 1) * w * c];
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes, path)
}

/// Parses PFM bytes held in memory.
pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    parse_pfm(bytes, Path::new("<memory>"))
}

fn parse_pfm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |m: &str| Error::malformed(path, m);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    // header: tag, width, height, scale separated by whitespace, then one
    // whitespace byte before the raster
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(bad(&format!("unknown tag {t:?}"))),
    };
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f32 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("bad scale"));
    }
    let little = scale < 0.0;
    let count = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if bytes.len() < pos || bytes.len() - pos != count * 4 {
        return Err(bad(&format!(
            "expected {} raster bytes, found {}",
            count * 4,
            bytes.len().saturating_sub(pos)
        )));
    }
    let raster = &bytes[pos..];
    let mut data = vec![0.0f32; count];
    let row_len = w * channels;
    for (file_row, chunk) in raster.chunks_exact(row_len * 4).enumerate() {
        let y = h - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            data[y * row_len + i] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Image::from_vec(w, h, channels, data).map_err(|e| bad(&e.to_string()))
}

/// Tone maps `exposure * value`, clamps to `[0, 1]` and applies gamma 1/2.2.
pub fn encode_png_bytes(image: &Image, exposure: f32) -> Result<Vec<u8>> {
    let encode = |v: f32| -> u8 {
        let x = (exposure * v).clamp(0.0, 1.0);
        let x = if x.is_nan() { 0.0 } else { x };
        (x.powf(1.0 / 2.2) * 255.0).round() as u8
    };
    let pixels: Vec<u8> = image.data().iter().map(|&v| encode(v)).collect();
    let color = match image.channels() {
        3 => image::ExtendedColorType::Rgb8,
        1 => image::ExtendedColorType::L8,
        c => return Err(Error::ShapeMismatch(format!("PNG export of {c} channels"))),
    };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &pixels,
        image.width() as u32,
        image.height() as u32,
        color,
    )
    .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
    Ok(out)
}

pub fn write_png(path: &Path, image: &Image, exposure: f32) -> Result<()> {
    write_atomic(path, &encode_png_bytes(image, exposure)?)
}

/// Saves by extension: `.pfm` lossless, `.png` tone mapped at exposure 1.
pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    match extension(path).as_deref() {
        Some("pfm") => write_pfm(path, image),
        Some("png") => write_png(path, image, 1.0),
        _ => Err(Error::InvalidArgument(format!(
            "{}: unsupported image extension (use .pfm or .png)",
            path.display()
        ))),
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    match extension(path).as_deref() {
        Some("pfm") => read_pfm(path),
        _ => Err(Error::InvalidArgument(format!(
            "{}: only PFM images can be loaded",
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

pub fn save_env(path: &Path, env: &EnvMap) -> Result<()> {
    write_pfm(path, &env.clone().into_image())
}

pub fn load_env(path: &Path) -> Result<EnvMap> {
    let img = read_pfm(path)?;
    EnvMap::from_image(img).map_err(|e| Error::malformed(path, e.to_string()))
}

/// Writes through a sibling temporary file so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    width: usize,
    height: usize,
    mask: String,
    lights: Vec<ManifestLight>,
    triangles: Vec<[usize; 3]>,
    meta: ScanMeta,
}

#[derive(Serialize, Deserialize)]
struct ManifestLight {
    id: usize,
    dir: [f64; 3],
    image: String,
}

fn light_file(i: usize, n: usize) -> String {
    let digits = n.saturating_sub(1).to_string().len().max(3);
    format!("light_{i:0digits$}.pfm")
}

/// Writes a scan into `dir`, creating it if needed.
pub fn save_scan(dir: &Path, scan: &OlatScan) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stage = scan.stage();
    let n = stage.n();
    write_pfm(&dir.join("mask.pfm"), scan.mask())?;
    let mut lights = Vec::with_capacity(n);
    for i in 0..n {
        let file = light_file(i, n);
        write_pfm(&dir.join(&file), scan.image(i))?;
        let l = stage.light(i);
        lights.push(ManifestLight {
            id: i,
            dir: [l.x, l.y, l.z].map(round_sig9),
            image: file,
        });
    }
    let manifest = Manifest {
        name: scan.meta.name.clone(),
        width: scan.width(),
        height: scan.height(),
        mask: "mask.pfm".into(),
        lights,
        triangles: stage.triangles().to_vec(),
        meta: scan.meta.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &json)
}

/// Loads a scan from a directory or a manifest path.
pub fn load_scan(path: &Path) -> Result<OlatScan> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;
    for (pos, l) in m.lights.iter().enumerate() {
        if l.id != pos {
            return Err(Error::malformed(
                &manifest_path,
                format!("light ids must be 0..n in order, entry {pos} has id {}", l.id),
            ));
        }
    }
    let dirs: Vec<Vec3> = m.lights.iter().map(|l| Vec3::new(l.dir[0], l.dir[1], l.dir[2])).collect();
    let stage = LightStage::from_parts(dirs, m.triangles.clone())
        .map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;
    let check = |img: Image, file: &str| -> Result<Image> {
        if img.width() != m.width || img.height() != m.height {
            return Err(Error::malformed(
                &manifest_path,
                format!(
                    "{file} is {}x{}, manifest says {}x{}",
                    img.width(),
                    img.height(),
                    m.width,
                    m.height
                ),
            ));
        }
        Ok(img)
    };
    let mask = check(read_pfm(&root.join(&m.mask))?, &m.mask)?;
    let images = m
        .lights
        .iter()
        .map(|l| check(read_pfm(&root.join(&l.image))?, &l.image))
        .collect::<Result<Vec<_>>>()?;
    OlatScan::new(stage, images, mask, m.meta).map_err(|e| Error::malformed(&manifest_path, e.to_string()))
}
