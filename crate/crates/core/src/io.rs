//! File formats: 8-bit RGB PNG, little-endian PFM depth, 16-bit PNG depth
//! with a JSON sidecar, colour-mapped depth previews and ASCII PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RgbdImage};

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `height * width * 3` colours in `[0, 1]` as an 8-bit PNG.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::ShapeMismatch {
            op: "write_rgb_png",
            lhs: vec![height, width, 3],
            rhs: vec![rgb.len()],
        });
    }
    let bytes: Vec<u8> = rgb.iter().map(|&v| quantize_u8(v)).collect();
    let img = RgbImage::from_raw(width as u32, height as u32, bytes).expect("buffer length checked");
    img.save(path)?;
    Ok(())
}

/// Reads an 8-bit PNG (any colour type) into RGB values in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let rgb = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok((w as usize, h as usize, rgb))
}

/// Writes a single-channel PFM (`Pf`, scale −1.0 = little-endian). Rows are
/// stored bottom-to-top as the format requires.
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pfm_to(&mut w, width, height, values)?;
    w.flush()?;
    Ok(())
}

pub fn write_pfm_to<W: Write>(w: &mut W, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "write_pfm",
            lhs: vec![height, width],
            rhs: vec![values.len()],
        });
    }
    write!(w, "Pf\n{width} {height}\n-1.0\n")?;
    for y in (0..height).rev() {
        for &v in &values[y * width..(y + 1) * width] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    read_pfm_from(&mut BufReader::new(File::open(path)?))
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            break;
        }
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b[0]);
    }
    String::from_utf8(tok).map_err(|_| Error::format("pfm", "non-ascii header"))
}

pub fn read_pfm_from<R: BufRead>(r: &mut R) -> Result<(usize, usize, Vec<f64>)> {
    let magic = header_token(r)?;
    if magic != "Pf" {
        return Err(Error::format("pfm", format!("expected single-channel 'Pf', got {magic:?}")));
    }
    let parse = |s: String, what: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::format("pfm", format!("bad {what} {s:?}")))
    };
    let width = parse(header_token(r)?, "width")? as usize;
    let height = parse(header_token(r)?, "height")? as usize;
    let scale = parse(header_token(r)?, "scale")?;
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::format("pfm", "truncated pixel data"))?;
    let mut values = vec![0.0; width * height];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
        let (row, col) = (height - 1 - i / width, i % width);
        values[row * width + col] = v as f64;
    }
    Ok((width, height, values))
}

/// Linear normalisation used by 16-bit depth PNGs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthPngSidecar {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
}

/// Writes depth as 16-bit PNG, `v = round((d - min) / (max - min) * 65535)`,
/// plus `<path>.json` recording the normalisation.
pub fn write_depth_png16(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<DepthPngSidecar> {
    if depth.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "write_depth_png16",
            lhs: vec![height, width],
            rhs: vec![depth.len()],
        });
    }
    let (min, max) = min_max(depth);
    let span = if max > min { max - min } else { 1.0 };
    let px: Vec<u16> = depth
        .iter()
        .map(|&d| (((d - min) / span).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, px).expect("buffer length checked");
    img.save(path)?;
    let sidecar = DepthPngSidecar { width, height, min, max };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(sidecar)
}

pub fn read_depth_png16(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let sidecar: DepthPngSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let img = image::open(path)?.to_luma16();
    let span = if sidecar.max > sidecar.min { sidecar.max - sidecar.min } else { 1.0 };
    let depth = img
        .into_raw()
        .into_iter()
        .map(|v| sidecar.min + span * v as f64 / 65535.0)
        .collect();
    Ok((sidecar.width, sidecar.height, depth))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Viridis control points at t = 0, 1/8, .., 1.
const VIRIDIS: [[f64; 3]; 9] = [
    [0.267004, 0.004874, 0.329415],
    [0.275191, 0.194905, 0.496005],
    [0.212395, 0.359683, 0.551710],
    [0.153364, 0.497000, 0.557724],
    [0.122312, 0.633153, 0.530398],
    [0.288921, 0.758394, 0.428426],
    [0.626579, 0.854645, 0.223353],
    [0.993248, 0.906157, 0.143936],
    [0.993248, 0.906157, 0.143936],
];

/// Viridis-style colour for `t` in `[0, 1]`.
pub fn viridis(t: f64) -> [f64; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 } * 7.0;
    let i = (t.floor() as usize).min(6);
    let f = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2])]
}

/// Depth preview: min–max normalised per image, then colour mapped.
pub fn depth_colormap(depth: &[f64]) -> Vec<f64> {
    let (min, max) = min_max(depth);
    let span = if max > min { max - min } else { 1.0 };
    depth.iter().flat_map(|&d| viridis((d - min) / span)).collect()
}

pub fn write_depth_colormap_png(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    write_rgb_png(path, width, height, &depth_colormap(depth))
}

/// ASCII PLY with float positions and 8-bit colours.
pub fn write_ply<W: Write>(pc: &PointCloud, w: &mut W) -> Result<()> {
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        pc.len()
    )?;
    for (p, c) in pc.points.iter().zip(&pc.colors) {
        writeln!(
            w,
            "{} {} {} {} {} {}",
            p.x as f32,
            p.y as f32,
            p.z as f32,
            quantize_u8(c[0]),
            quantize_u8(c[1]),
            quantize_u8(c[2])
        )?;
    }
    Ok(())
}

pub fn export_ply(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply(pc, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses the ASCII PLY layout written by [`write_ply`].
pub fn read_ply<R: BufRead>(r: R) -> Result<PointCloud> {
    let mut lines = r.lines();
    let mut count = None;
    for line in lines.by_ref() {
        let line = line?;
        let line = line.trim();
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| Error::format("ply", "bad vertex count"))?);
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| Error::format("ply", "missing vertex element"))?;
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| Error::format("ply", "truncated vertex list"))??;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::format("ply", format!("expected 6 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format("ply", format!("bad number {s:?}")));
        points.push(Vector3::new(num(f[0])?, num(f[1])?, num(f[2])?));
        colors.push([num(f[3])? / 255.0, num(f[4])? / 255.0, num(f[5])? / 255.0]);
    }
    PointCloud::new(points, colors)
}

/// Pose JSON stored next to each view's PNG and PFM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewMeta {
    pub latent_id: String,
    pub pose: CameraPose,
}

fn with_ext(prefix: &Path, ext: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

/// Writes `<prefix>.png`, `<prefix>.pfm` and `<prefix>.json`.
pub fn write_view(prefix: &Path, img: &RgbdImage, meta: &ViewMeta) -> Result<()> {
    write_rgb_png(&with_ext(prefix, "png"), img.width(), img.height(), img.rgb())?;
    write_pfm(&with_ext(prefix, "pfm"), img.width(), img.height(), img.depth())?;
    std::fs::write(with_ext(prefix, "json"), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

/// Reads a triplet written by [`write_view`]. Colours come back quantised
/// to 8 bits and depths to float32.
pub fn read_view(prefix: &Path) -> Result<(RgbdImage, ViewMeta)> {
    let (w, h, rgb) = read_rgb_png(&with_ext(prefix, "png"))?;
    let (dw, dh, depth) = read_pfm(&with_ext(prefix, "pfm"))?;
    if (dw, dh) != (w, h) {
        return Err(Error::ShapeMismatch {
            op: "read_view",
            lhs: vec![h, w],
            rhs: vec![dh, dw],
        });
    }
    let meta: ViewMeta = serde_json::from_slice(&std::fs::read(with_ext(prefix, "json"))?)?;
    Ok((RgbdImage::new(w, h, rgb, depth)?, meta))
}

/// Prefixes of every `*.json` in `dir` that has a matching PNG and PFM,
/// sorted by name.
pub fn list_views(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let prefix = path.with_extension("");
            if with_ext(&prefix, "png").is_file() && with_ext(&prefix, "pfm").is_file() {
                out.push(prefix);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_single_point_golden() {
        let pc = PointCloud::new(vec![Vector3::new(0.5, -1.25, 2.0)], vec![[1.0, 0.5, 0.0]]).unwrap();
        let mut buf = Vec::new();
        write_ply(&pc, &mut buf).unwrap();
        let golden = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
                      property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0.5 -1.25 2 255 128 0\n";
        assert_eq!(String::from_utf8(buf).unwrap(), golden);
    }

    #[test]
    fn ply_round_trip_within_quantization() {
        let pc = PointCloud::new(
            vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(-1.0, 3.5, 1e-3)],
            vec![[0.11, 0.5, 0.97], [0.0, 1.0, 0.33]],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_ply(&pc, &mut buf).unwrap();
        let back = read_ply(&buf[..]).unwrap();
        for (a, b) in back.points.iter().zip(&pc.points) {
            assert!((a - b).amax() < 1e-6);
        }
        for (a, b) in back.colors.iter().zip(&pc.colors) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn pfm_round_trip_and_layout() {
        let vals: Vec<f64> = (0..6).map(|i| i as f64 * 0.25).collect();
        let mut buf = Vec::new();
        write_pfm_to(&mut buf, 3, 2, &vals).unwrap();
        assert!(buf.starts_with(b"Pf\n3 2\n-1.0\n"));
        // first stored row is the bottom image row
        let first = f32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]);
        assert_eq!(first, 0.75);
        let (w, h, back) = read_pfm_from(&mut &buf[..]).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, vals);
        assert!(read_pfm_from(&mut &b"PF\n1 1\n-1\n"[..]).is_err());
        assert!(read_pfm_from(&mut &b"Pf\n2 2\n-1\n\0\0"[..]).is_err());
    }

    #[test]
    fn png16_depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let depth: Vec<f64> = (0..12).map(|i| 0.5 + 0.1 * i as f64).collect();
        let sc = write_depth_png16(&p, 4, 3, &depth).unwrap();
        assert_eq!((sc.min, sc.max), (0.5, 0.5 + 1.1));
        let (w, h, back) = read_depth_png16(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in back.iter().zip(&depth) {
            assert!((a - b).abs() < 1.1 / 65535.0);
        }
    }

    #[test]
    fn rgb_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let rgb: Vec<f64> = (0..2 * 2 * 3).map(|i| i as f64 / 11.0).collect();
        write_rgb_png(&p, 2, 2, &rgb).unwrap();
        let (w, h, back) = read_rgb_png(&p).unwrap();
        assert_eq!((w, h), (2, 2));
        for (a, b) in back.iter().zip(&rgb) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(viridis(0.0), VIRIDIS[0]);
        assert_eq!(viridis(1.0), VIRIDIS[7]);
        let cm = depth_colormap(&[1.0, 2.0, 3.0]);
        assert_eq!(&cm[..3], &VIRIDIS[0]);
        assert_eq!(&cm[6..], &VIRIDIS[7]);
    }
    #[test]
    fn view_triplet_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let img = RgbdImage::new(2, 2, rgb, vec![0.5, 0.75, 1.0, 1.25]).unwrap();
        let meta = ViewMeta {
            latent_id: "z3".into(),
            pose: CameraPose::from_degrees(10.0, -5.0, 1.0).unwrap(),
        };
        write_view(&dir.path().join("view_0000"), &img, &meta).unwrap();
        std::fs::write(dir.path().join("stray.json"), "{}").unwrap();
        let prefixes = list_views(dir.path()).unwrap();
        assert_eq!(prefixes, vec![dir.path().join("view_0000")]);
        let (back, m) = read_view(&prefixes[0]).unwrap();
        assert_eq!(back.depth(), img.depth());
        assert_eq!(m.latent_id, "z3");
        assert!((m.pose.azimuth - meta.pose.azimuth).abs() < 1e-12);
        for (a, b) in back.rgb().iter().zip(img.rgb()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
