//! File formats: TUM trajectory text, the DPR1 depth raster, the STVW weight
//! container, grayscale PNG images, and TUM-RGBD style index files.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::diff::{DenseArray, WeightStore};
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::lie::{Pose, Rotation};
use nalgebra::Vector3;

/// Parse TUM trajectory text: per line `timestamp tx ty tz qx qy qz qw`,
/// '#' comments and blank lines skipped.
pub fn read_tum_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path)?;
    let mut traj = Trajectory::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::MalformedFile {
                path: path.to_path_buf(),
                reason: format!("line {}: expected 8 fields, got {}", ln + 1, fields.len()),
            });
        }
        let nums: Vec<f64> = fields
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedFile {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", ln + 1),
            })?;
        let pose = Pose::new(
            Rotation::from_quaternion(nums[7], nums[4], nums[5], nums[6]),
            Vector3::new(nums[1], nums[2], nums[3]),
        );
        traj.push(nums[0], pose)?;
    }
    Ok(traj)
}

pub fn write_tum_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in traj.entries() {
        let (w, x, y, z) = pose.rotation.quaternion();
        let p = pose.translation;
        out.push_str(&format!(
            "{t:.6} {:.9} {:.9} {:.9} {x:.9} {y:.9} {z:.9} {w:.9}\n",
            p.x, p.y, p.z
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// DPR1 depth raster: magic "DPR1", u32 LE height, u32 LE width, then
/// height*width f32 LE row-major meters. The layout is normative.
pub fn write_dpr1(path: &Path, width: usize, height: usize, depths: &[f64]) -> Result<()> {
    if depths.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} depths for {width}x{height}",
            depths.len()
        )));
    }
    let mut buf = Vec::with_capacity(12 + depths.len() * 4);
    buf.extend_from_slice(b"DPR1");
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for d in depths {
        buf.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_dpr1(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    if !path.exists() {
        return Err(Error::MissingDepthFile(path.to_path_buf()));
    }
    let bad = |reason: &str| Error::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let buf = fs::read(path)?;
    if buf.len() < 12 || &buf[0..4] != b"DPR1" {
        return Err(bad("missing DPR1 magic"));
    }
    let height = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() != 12 + width * height * 4 {
        return Err(bad("truncated payload"));
    }
    let depths = buf[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((width, height, depths))
}

/// STVW weight container: magic "STVW", u32 LE tensor count, then per tensor
/// u16 LE name length, utf-8 name, u8 rank, dims as u32 LE, f64 LE values.
pub fn write_stvw(path: &Path, store: &WeightStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"STVW");
    let count = store.iter().count() as u32;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in store.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.shape().len() as u8);
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_stvw(path: &Path) -> Result<WeightStore> {
    let bad = |reason: String| Error::MalformedFile { path: path.to_path_buf(), reason };
    let mut file = fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[0..4] != b"STVW" {
        return Err(bad("missing STVW magic".into()));
    }
    let count = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    let mut store = WeightStore::new(0, "loaded");
    let mut pos = 8usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(Error::MalformedFile {
                path: path.to_path_buf(),
                reason: "truncated tensor record".into(),
            });
        }
        let s = &buf[pos..pos + n];
        pos += n;
        Ok(s)
    };
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|e| bad(format!("tensor name: {e}")))?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(&name, DenseArray::from_vec(&shape, data)?);
    }
    Ok(store)
}

/// Write a grayscale image (values in [0, 1]) as 8-bit PNG.
pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let pixels: Vec<u8> =
        values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::BadDimensions(format!("{width}x{height} image")))?;
    img.save(path)?;
    Ok(())
}

/// Load an image as a grayscale [1, H, W] array with values in [0, 1].
pub fn read_gray_image(path: &Path) -> Result<DenseArray> {
    if !path.exists() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img.into_raw().into_iter().map(|p| p as f64 / 255.0).collect();
    DenseArray::from_vec(&[1, h, w], data)
}

/// Parse a TUM-RGBD style index: lines `timestamp filename`, '#' comments.
/// Entries are returned sorted by timestamp regardless of file order.
pub fn read_index(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|_| {
        Error::MalformedIndex(format!("cannot read index {}", path.display()))
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(ts), Some(name)) = (fields.next(), fields.next()) else {
            return Err(Error::MalformedIndex(format!("line {}: expected 2 fields", ln + 1)));
        };
        let ts: f64 = ts
            .parse()
            .map_err(|e| Error::MalformedIndex(format!("line {}: {e}", ln + 1)))?;
        entries.push((ts, base.join(name)));
    }
    if entries.is_empty() {
        return Err(Error::MalformedIndex(format!("{} lists no frames", path.display())));
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(entries)
}

/// Read `calibration.txt`: a single line `fx fy cx cy` at input resolution.
pub fn read_calibration(path: &Path) -> Result<(f64, f64, f64, f64)> {
    let text = fs::read_to_string(path).map_err(|_| Error::MalformedFile {
        path: path.to_path_buf(),
        reason: "cannot read calibration".into(),
    })?;
    let nums: Vec<f64> = text
        .split_whitespace()
        .map(|f| f.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::MalformedFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if nums.len() != 4 {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("expected 4 numbers, got {}", nums.len()),
        });
    }
    Ok((nums[0], nums[1], nums[2], nums[3]))
}

pub fn write_calibration(path: &Path, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<()> {
    fs::write(path, format!("{fx} {fy} {cx} {cy}\n"))?;
    Ok(())
}
