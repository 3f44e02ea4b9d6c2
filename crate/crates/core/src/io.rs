//! Binary map and grid files, plus JSON helpers for cameras and scenes.
//!
//! `.fmap`: `DIVASFM1`, then u32 width, height, channels (LE), then
//! `width·height·channels` f32 LE values, row-major with channels interleaved.
//!
//! `.vgrid`: `DIVASVG1`, u32 resolution, 6 f32 bounds (min xyz, max xyz),
//! u8 unbounded flag, then `resolution³` f32 LE probabilities, x fastest.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::OccupancyGrid;
use crate::geometry::{Camera, SceneBounds, VoxelGrid};
use crate::render::{PixelMap, ViewGeometry};
use crate::scene::Scene;

pub const FMAP_MAGIC: &[u8; 8] = b"DIVASFM1";
pub const VGRID_MAGIC: &[u8; 8] = b"DIVASVG1";

/// A multi-channel float image.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn from_scalar(map: &PixelMap<f32>) -> Self {
        Self {
            width: map.width,
            height: map.height,
            channels: 1,
            data: map.data.clone(),
        }
    }

    pub fn from_rgb(map: &PixelMap<[f32; 3]>) -> Self {
        Self {
            width: map.width,
            height: map.height,
            channels: 3,
            data: map.data.iter().flatten().copied().collect(),
        }
    }

    /// Ray statistics of a view. Channels: D_min, D_max, D_exp, N_samples,
    /// max-weight depth.
    pub fn from_view_stats(view: &ViewGeometry) -> Result<Self> {
        let n = view.n_samples.map(|n| n as f32);
        Self::stack(&[&view.d_min, &view.d_max, &view.d_exp, &n, &view.depth])
    }

    /// Stacks single-channel maps of equal size into one interleaved map.
    pub fn stack(maps: &[&PixelMap<f32>]) -> Result<Self> {
        let first = maps.first().ok_or(Error::Empty("maps"))?;
        if maps.iter().any(|m| !m.same_shape(first)) {
            return Err(Error::DimensionMismatch("stacked maps differ in size".into()));
        }
        let n = first.data.len();
        let data = (0..n).flat_map(|i| maps.iter().map(move |m| m.data[i])).collect();
        Ok(Self {
            width: first.width,
            height: first.height,
            channels: maps.len() as u32,
            data,
        })
    }

    pub fn channel(&self, c: u32) -> Result<PixelMap<f32>> {
        if c >= self.channels {
            return Err(Error::DimensionMismatch(format!("channel {c} of {}", self.channels)));
        }
        let data = self.data.iter().skip(c as usize).step_by(self.channels as usize).copied().collect();
        PixelMap::from_vec(self.width, self.height, data)
    }
}

fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        format,
        reason: reason.into(),
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], format: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(format, "truncated"),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, format: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, format)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize, format: &'static str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact_or(r, &mut bytes, format)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn expect_end(r: &mut impl Read, format: &'static str) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(format_err(format, "trailing bytes")),
    }
}

pub fn write_fmap(map: &FloatMap, mut w: impl Write) -> Result<()> {
    if map.data.len() != map.width as usize * map.height as usize * map.channels as usize {
        return Err(Error::DimensionMismatch("float map size".into()));
    }
    let mut buf = Vec::with_capacity(20 + map.data.len() * 4);
    buf.extend_from_slice(FMAP_MAGIC);
    for v in [map.width, map.height, map.channels] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &map.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_fmap(mut r: impl Read) -> Result<FloatMap> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, "fmap")?;
    if &magic != FMAP_MAGIC {
        return Err(format_err("fmap", "bad magic"));
    }
    let width = read_u32(&mut r, "fmap")?;
    let height = read_u32(&mut r, "fmap")?;
    let channels = read_u32(&mut r, "fmap")?;
    let n = (width as u64) * (height as u64) * (channels as u64);
    if n > (1 << 31) {
        return Err(format_err("fmap", "implausibly large"));
    }
    let data = read_f32s(&mut r, n as usize, "fmap")?;
    expect_end(&mut r, "fmap")?;
    Ok(FloatMap {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_vgrid(grid: &OccupancyGrid, mut w: impl Write) -> Result<()> {
    grid.validate()?;
    let mut buf = Vec::with_capacity(41 + grid.probs.len() * 4);
    buf.extend_from_slice(VGRID_MAGIC);
    buf.extend_from_slice(&(grid.grid.resolution as u32).to_le_bytes());
    for v in grid.bounds.min.iter().chain(&grid.bounds.max) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf.push(grid.bounds.unbounded as u8);
    for p in &grid.probs {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a grid; the voxel layout is rebuilt from the stored bounds, and the
/// version is not stored (reads as 0).
pub fn read_vgrid(mut r: impl Read) -> Result<OccupancyGrid> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, "vgrid")?;
    if &magic != VGRID_MAGIC {
        return Err(format_err("vgrid", "bad magic"));
    }
    let res = read_u32(&mut r, "vgrid")? as usize;
    if res == 0 || res > 2048 {
        return Err(format_err("vgrid", format!("resolution {res}")));
    }
    let b = read_f32s(&mut r, 6, "vgrid")?;
    let mut flag = [0u8; 1];
    read_exact_or(&mut r, &mut flag, "vgrid")?;
    if flag[0] > 1 {
        return Err(format_err("vgrid", "unbounded flag must be 0 or 1"));
    }
    let bounds = SceneBounds::new(
        [b[0] as f64, b[1] as f64, b[2] as f64],
        [b[3] as f64, b[4] as f64, b[5] as f64],
        flag[0] == 1,
    )?;
    let grid = VoxelGrid::enclosing(&bounds, res)?;
    let probs = read_f32s(&mut r, grid.len(), "vgrid")?;
    expect_end(&mut r, "vgrid")?;
    let out = OccupancyGrid {
        grid,
        bounds,
        probs,
        version: 0,
    };
    out.validate()?;
    Ok(out)
}

pub fn save_vgrid(grid: &OccupancyGrid, path: impl AsRef<Path>) -> Result<()> {
    write_vgrid(grid, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_vgrid(path: impl AsRef<Path>) -> Result<OccupancyGrid> {
    read_vgrid(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_fmap(map: &FloatMap, path: impl AsRef<Path>) -> Result<()> {
    write_fmap(map, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_fmap(path: impl AsRef<Path>) -> Result<FloatMap> {
    read_fmap(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    Scene::from_json(&std::fs::read_to_string(path)?)
}

pub fn load_camera(path: impl AsRef<Path>) -> Result<Camera> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn camera_to_json(camera: &Camera) -> Result<String> {
    Ok(serde_json::to_string_pretty(camera)?)
}
