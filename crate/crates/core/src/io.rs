//! Scene and camera documents, PFM/PNG images, atomic file output.
//!
//! Scene and camera files are JSON. Floats are written in shortest
//! round-trip form and parsed exactly, so save/load is bit-exact.

use std::io::Write;
use std::path::Path;

use image::ImageEncoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldImage;
use crate::scene::{Aabb, Camera, GaussianParticle, Scene};

pub const SCENE_VERSION: &str = "gdgs-scene-v1";
pub const CAMERAS_VERSION: &str = "gdgs-cams-v1";

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    version: String,
    bounds: Aabb,
    dc_model: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    laplacian_density: Option<f64>,
    particles: Vec<GaussianParticle>,
}

#[derive(Serialize, Deserialize)]
struct CameraDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    world_to_camera: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CamerasDoc {
    version: String,
    cameras: Vec<CameraDoc>,
}

/// Write `bytes` to a temporary file next to `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn scene_to_string(scene: &Scene) -> Result<String> {
    scene.validate()?;
    let doc = SceneDoc {
        version: SCENE_VERSION.to_string(),
        bounds: scene.bounds,
        dc_model: scene.dc_model.clone(),
        laplacian_density: scene.laplacian_density,
        particles: scene.particles.clone(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::InvalidScene(e.to_string()))
}

pub fn scene_from_str(text: &str, path: &Path) -> Result<Scene> {
    let doc: SceneDoc = serde_json::from_str(text)
        .map_err(|e| Error::parse(path, format!("line {} column {}: {e}", e.line(), e.column())))?;
    if doc.version != SCENE_VERSION {
        return Err(Error::parse(
            path,
            format!("version: expected {SCENE_VERSION}, found {:?}", doc.version),
        ));
    }
    let scene = Scene {
        particles: doc.particles,
        bounds: doc.bounds,
        dc_model: doc.dc_model,
        laplacian_density: doc.laplacian_density,
    };
    scene.validate().map_err(|e| match e {
        Error::InvalidParticle { index, reason } => Error::parse(path, format!("particles[{index}]: {reason}")),
        other => Error::parse(path, other.to_string()),
    })?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    write_atomic(path, scene_to_string(scene)?.as_bytes())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    scene_from_str(&read_to_string(path)?, path)
}

pub fn cameras_to_string(cameras: &[Camera]) -> Result<String> {
    let doc = CamerasDoc {
        version: CAMERAS_VERSION.to_string(),
        cameras: cameras
            .iter()
            .map(|c| CameraDoc {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                world_to_camera: c.world_to_camera.to_vec(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::InvalidCamera(e.to_string()))
}

pub fn cameras_from_str(text: &str, path: &Path) -> Result<Vec<Camera>> {
    let doc: CamerasDoc = serde_json::from_str(text)
        .map_err(|e| Error::parse(path, format!("line {} column {}: {e}", e.line(), e.column())))?;
    if doc.version != CAMERAS_VERSION {
        return Err(Error::parse(
            path,
            format!("version: expected {CAMERAS_VERSION}, found {:?}", doc.version),
        ));
    }
    doc.cameras
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let m: [f64; 16] = c.world_to_camera.try_into().map_err(|v: Vec<f64>| {
                Error::parse(path, format!("cameras[{i}].world_to_camera: expected 16 values, found {}", v.len()))
            })?;
            let cam = Camera {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                world_to_camera: m,
            };
            cam.validate()
                .map_err(|e| Error::parse(path, format!("cameras[{i}]: {e}")))?;
            Ok(cam)
        })
        .collect()
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    write_atomic(path, cameras_to_string(cameras)?.as_bytes())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    cameras_from_str(&read_to_string(path)?, path)
}

/// Encode a 1- or 3-channel field as little-endian PFM (rows bottom to top).
pub fn encode_pfm(img: &FieldImage) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Contract(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * ch * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..ch {
                out.extend_from_slice(&(img.get(x, y, c) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FieldImage> {
    let bad = |m: &str| Error::parse(path, format!("PFM: {m}"));
    // header tokens: magic, width, height, scale
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
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
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // exactly one whitespace byte separates the header from the data
    pos += 1;
    let channels = match tokens[0] {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("bad magic")),
    };
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let need = w * h * channels * 4;
    let data = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated data"))?;
    let mut img = FieldImage::zeros(w, h, channels);
    let mut it = data.chunks_exact(4);
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                let b: [u8; 4] = it.next().unwrap().try_into().unwrap();
                let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
                img.set(x, y, c, v as f64);
            }
        }
    }
    Ok(img)
}

pub fn save_pfm(img: &FieldImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pfm(img)?)
}

pub fn load_pfm(path: &Path) -> Result<FieldImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

/// Linear mapping from field values to 8-bit PNG samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PngMapping {
    pub gain: f64,
    pub offset: f64,
}

impl PngMapping {
    /// Images with values in [0, 1].
    pub const UNIT: PngMapping = PngMapping {
        gain: 255.0,
        offset: 0.0,
    };
    /// Signed fields: `v * 128 + 128`.
    pub const SIGNED_PREVIEW: PngMapping = PngMapping {
        gain: 128.0,
        offset: 128.0,
    };
}

pub fn encode_png(img: &FieldImage, mapping: PngMapping) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let quant = |v: f64| (v * mapping.gain + mapping.offset).round().clamp(0.0, 255.0) as u8;
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Contract(format!("PNG output supports 1 or 3 channels, got {c}"))),
    };
    let ch = img.channels();
    let mut raw = Vec::with_capacity(img.len());
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..ch {
                raw.push(quant(img.get(x, y, c)));
            }
        }
    }
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&raw, w, h, color)
        .map_err(|e| Error::Image {
            path: "<png>".into(),
            source: e,
        })?;
    Ok(out)
}

pub fn save_png(img: &FieldImage, mapping: PngMapping, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img, mapping)?)
}

/// Load an 8-bit image as a field in [0, 1]. Gray images give one channel,
/// everything else three (alpha is dropped).
pub fn load_png(path: &Path) -> Result<FieldImage> {
    let dynimg = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    Ok(from_dynamic(&dynimg))
}

pub fn decode_png(bytes: &[u8]) -> Result<FieldImage> {
    let dynimg = image::load_from_memory(bytes).map_err(|e| Error::Image {
        path: "<memory>".into(),
        source: e,
    })?;
    Ok(from_dynamic(&dynimg))
}

fn from_dynamic(dynimg: &image::DynamicImage) -> FieldImage {
    use image::ColorType;
    let gray = matches!(dynimg.color(), ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16);
    if gray {
        let g = dynimg.to_luma8();
        FieldImage::from_fn(g.width() as usize, g.height() as usize, 1, |x, y, _| {
            g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
        })
    } else {
        let rgb = dynimg.to_rgb8();
        FieldImage::from_fn(rgb.width() as usize, rgb.height() as usize, 3, |x, y, c| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Scene {
        Scene {
            particles: vec![GaussianParticle {
                center: [0.1, -0.2, 0.3],
                rotation: [0.5, 0.5, 0.5, 0.5],
                log_scale: [-2.0, -1.0, 0.1],
                amplitude: vec![0.1 + 0.2, -1e-300, 3.0],
                opacity_logit: 0.7,
            }],
            bounds: Aabb::new([-1.0; 3], [1.0; 3]),
            dc_model: vec![0.25, 0.5, 1.0 / 3.0],
            laplacian_density: Some(37.5),
        }
    }

    #[test]
    fn scene_roundtrip_single() {
        let s = scene();
        let text = scene_to_string(&s).unwrap();
        assert!(text.contains(SCENE_VERSION));
        assert_eq!(scene_from_str(&text, Path::new("x")).unwrap(), s);
    }

    #[test]
    fn nan_center_is_parse_error() {
        let text = scene_to_string(&scene()).unwrap().replacen("0.1,", "NaN,", 1);
        let err = scene_from_str(&text, Path::new("s.json")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn invalid_particle_reports_field_path() {
        let text = scene_to_string(&scene())
            .unwrap()
            .replace("\"opacity_logit\": 0.7", "\"opacity_logit\": 1e999");
        let err = scene_from_str(&text, Path::new("s.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s.json"), "{msg}");
    }

    #[test]
    fn cameras_roundtrip_and_validation() {
        let cams = vec![
            Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 40.0, 32, 24).unwrap(),
            Camera::identity(12.5, 8, 8),
        ];
        let text = cameras_to_string(&cams).unwrap();
        assert_eq!(cameras_from_str(&text, Path::new("c")).unwrap(), cams);
        let broken = text.replacen("\"fx\": 40.0", "\"fx\": -40.0", 1);
        let err = cameras_from_str(&broken, Path::new("c")).unwrap_err();
        assert!(err.to_string().contains("cameras[0]"), "{err}");
    }

    #[test]
    fn pfm_roundtrip() {
        let img = FieldImage::from_fn(5, 3, 3, |x, y, c| x as f64 * 0.5 - y as f64 + c as f64 * 0.25);
        let back = decode_pfm(&encode_pfm(&img).unwrap(), Path::new("p")).unwrap();
        assert_eq!(back, img);
        let gray = img.channel(1);
        assert_eq!(decode_pfm(&encode_pfm(&gray).unwrap(), Path::new("p")).unwrap(), gray);
    }

    #[test]
    fn pfm_rejects_truncated() {
        let img = FieldImage::zeros(4, 4, 1);
        let bytes = encode_pfm(&img).unwrap();
        assert!(decode_pfm(&bytes[..bytes.len() - 1], Path::new("p")).is_err());
    }

    #[test]
    fn png_preview_mapping() {
        let img = FieldImage::from_planar(3, 1, 1, vec![-2.0, 0.0, 0.5]).unwrap();
        let back = decode_png(&encode_png(&img, PngMapping::SIGNED_PREVIEW).unwrap()).unwrap();
        let bytes: Vec<u8> = back.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(bytes, vec![0, 128, 192]);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
