//! BEV feature maps over a metric grid: pillar voxelization of point clouds
//! and alignment of historical maps into the current frame by inverse-warp
//! resampling in continuous cell coordinates.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_inverse, PointCloud, Pose};

/// Normalization cap for the pillar point-count channel.
pub const PILLAR_POINT_CAP: f64 = 32.0;

/// Continuous cell coordinates closer than this to an integer snap to it, so
/// that identity and whole-cell warps reproduce stored values exactly.
const SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BevError {
    #[error("invalid grid configuration: {0}")]
    Config(String),
    #[error("feature map grids do not match")]
    GridMismatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("feature map data length {got} does not match {want}")]
    DataLength { got: usize, want: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad .bevf header: {0}")]
    Header(String),
}

/// Metric extents and cell size mapping world coordinates to BEV indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub cell: f64,
    pub channels: usize,
}

impl GridConfig {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        z_min: f64,
        z_max: f64,
        cell: f64,
        channels: usize,
    ) -> Result<Self, BevError> {
        let grid = GridConfig {
            x_min,
            x_max,
            y_min,
            y_max,
            z_min,
            z_max,
            cell,
            channels,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Default grid for desk-scale runs: 64x64 cells of 0.6 m, 16 channels.
    pub fn desk() -> Self {
        GridConfig::new(-19.2, 19.2, -19.2, 19.2, -3.0, 3.0, 0.6, 16).unwrap()
    }

    /// Full-scale preset: 180x180 cells of 0.6 m over +-54 m, 128 channels.
    pub fn full_scale() -> Self {
        GridConfig::new(-54.0, 54.0, -54.0, 54.0, -5.0, 3.0, 0.6, 128).unwrap()
    }

    pub fn validate(&self) -> Result<(), BevError> {
        if !(self.cell > 0.0) {
            return Err(BevError::Config(format!("cell must be > 0, got {}", self.cell)));
        }
        if self.channels == 0 {
            return Err(BevError::Config("channels must be > 0".into()));
        }
        for (name, lo, hi) in [
            ("x", self.x_min, self.x_max),
            ("y", self.y_min, self.y_max),
            ("z", self.z_min, self.z_max),
        ] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(BevError::Config(format!("bad {name} extent [{lo}, {hi}]")));
            }
        }
        for (name, lo, hi) in [("x", self.x_min, self.x_max), ("y", self.y_min, self.y_max)] {
            let dim = (hi - lo) / self.cell;
            if (dim - dim.round()).abs() > 1e-9 || dim.round() < 1.0 {
                return Err(BevError::Config(format!(
                    "{name} extent is not a positive whole number of cells ({dim})"
                )));
            }
        }
        Ok(())
    }

    /// Number of columns (cells along x).
    pub fn cols(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell).round() as usize
    }

    /// Number of rows (cells along y).
    pub fn rows(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell).round() as usize
    }

    /// World xy to continuous (col, row) cell coordinates. Cell centers sit
    /// at integer coordinates; (x_min, y_min) is the (-0.5, -0.5) corner.
    pub fn world_to_grid(&self, xy: [f64; 2]) -> [f64; 2] {
        [
            (xy[0] - self.x_min) / self.cell - 0.5,
            (xy[1] - self.y_min) / self.cell - 0.5,
        ]
    }

    /// Continuous (col, row) cell coordinates back to world xy.
    pub fn grid_to_world(&self, col_row: [f64; 2]) -> [f64; 2] {
        [
            self.x_min + (col_row[0] + 0.5) * self.cell,
            self.y_min + (col_row[1] + 0.5) * self.cell,
        ]
    }
}

/// Dense BEV tensor of shape channels x rows x cols over a metric grid.
///
/// `channels` may differ from `grid.channels`: the grid's channel count is
/// what `voxelize` produces, while maps carrying other payloads (semantic
/// rasters, fused features) keep their own width on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Vec<f64>,
    channels: usize,
    rows: usize,
    cols: usize,
    pub grid: GridConfig,
    pub frame_offset: u32,
}

impl FeatureMap {
    pub fn zeros(grid: &GridConfig, channels: usize, frame_offset: u32) -> Self {
        let (rows, cols) = (grid.rows(), grid.cols());
        FeatureMap {
            data: vec![0.0; channels * rows * cols],
            channels,
            rows,
            cols,
            grid: *grid,
            frame_offset,
        }
    }

    pub fn from_data(
        grid: &GridConfig,
        channels: usize,
        frame_offset: u32,
        data: Vec<f64>,
    ) -> Result<Self, BevError> {
        let (rows, cols) = (grid.rows(), grid.cols());
        if data.len() != channels * rows * cols {
            return Err(BevError::DataLength {
                got: data.len(),
                want: channels * rows * cols,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(BevError::NonFinite("feature map"));
        }
        Ok(FeatureMap {
            data,
            channels,
            rows,
            cols,
            grid: *grid,
            frame_offset,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.rows + row) * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        self.data[(channel * self.rows + row) * self.cols + col] = value;
    }

    /// One channel plane, row-major.
    pub fn channel(&self, channel: usize) -> &[f64] {
        let plane = self.rows * self.cols;
        &self.data[channel * plane..(channel + 1) * plane]
    }

    /// The map as a constant (untracked) tensor of shape [channels, rows, cols].
    pub fn to_tensor(&self) -> crate::tensor::Tensor {
        crate::tensor::Tensor::constant(self.data.clone(), &[self.channels, self.rows, self.cols])
            .expect("feature maps hold finite values")
    }

    pub fn from_tensor(
        t: &crate::tensor::Tensor,
        grid: &GridConfig,
        frame_offset: u32,
    ) -> Result<Self, BevError> {
        let [channels, rows, cols] = t.shape()[..] else {
            return Err(BevError::DataLength {
                got: t.len(),
                want: 0,
            });
        };
        if rows != grid.rows() || cols != grid.cols() {
            return Err(BevError::GridMismatch);
        }
        FeatureMap::from_data(grid, channels, frame_offset, t.data().to_vec())
    }
}

/// Pillar featurizer: channel 0 is point count / [`PILLAR_POINT_CAP`],
/// channel 1 mean intensity, channel 2 mean z normalized into [0, 1] by the
/// grid's z extent; any further channels stay zero. Points outside the x/y
/// half-open extents or the closed z extent are dropped.
pub fn voxelize(pts: &PointCloud, grid: &GridConfig) -> Result<FeatureMap, BevError> {
    grid.validate()?;
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut count = vec![0.0f64; rows * cols];
    let mut intensity_sum = vec![0.0f64; rows * cols];
    let mut z_sum = vec![0.0f64; rows * cols];

    for (p, &i) in pts.points.iter().zip(&pts.intensities) {
        if p.x < grid.x_min || p.x >= grid.x_max || p.y < grid.y_min || p.y >= grid.y_max {
            continue;
        }
        if p.z < grid.z_min || p.z > grid.z_max {
            continue;
        }
        let col = ((p.x - grid.x_min) / grid.cell).floor() as usize;
        let row = ((p.y - grid.y_min) / grid.cell).floor() as usize;
        // floor() can land on the upper edge through rounding; clamp to range
        let col = col.min(cols - 1);
        let row = row.min(rows - 1);
        let idx = row * cols + col;
        count[idx] += 1.0;
        intensity_sum[idx] += i as f64;
        z_sum[idx] += p.z;
    }

    let mut out = FeatureMap::zeros(grid, grid.channels, pts.timestamp_index);
    let z_span = grid.z_max - grid.z_min;
    for row in 0..rows {
        for col in 0..cols {
            let idx = row * cols + col;
            if count[idx] == 0.0 {
                continue;
            }
            out.set(0, row, col, count[idx] / PILLAR_POINT_CAP);
            if grid.channels > 1 {
                out.set(1, row, col, intensity_sum[idx] / count[idx]);
            }
            if grid.channels > 2 {
                out.set(2, row, col, (z_sum[idx] / count[idx] - grid.z_min) / z_span);
            }
        }
    }
    Ok(out)
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= SNAP_TOL {
        r
    } else {
        v
    }
}

/// Bilinear sample at continuous (col, row) coordinates; neighbors outside
/// the grid contribute the fill value 0.
pub fn bilinear_sample(fm: &FeatureMap, pos: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; fm.channels];
    sample_into(fm, pos, &mut out);
    out
}

fn sample_into(fm: &FeatureMap, pos: [f64; 2], out: &mut [f64]) {
    let (col, row) = (snap(pos[0]), snap(pos[1]));
    let c0 = col.floor();
    let r0 = row.floor();
    let fc = col - c0;
    let fr = row - r0;
    let (c0, r0) = (c0 as i64, r0 as i64);
    let weights = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1, (1.0 - fr) * fc),
        (r0 + 1, c0, fr * (1.0 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ];
    let (rows, cols) = (fm.rows as i64, fm.cols as i64);
    for v in out.iter_mut() {
        *v = 0.0;
    }
    for (r, c, w) in weights {
        if w == 0.0 || r < 0 || r >= rows || c < 0 || c >= cols {
            continue;
        }
        let base = (r as usize) * fm.cols + c as usize;
        let plane = fm.rows * fm.cols;
        for (ch, v) in out.iter_mut().enumerate() {
            *v += w * fm.data[ch * plane + base];
        }
    }
}

/// Warps a historical feature map into the current frame's grid.
///
/// Each output cell center is lifted to a 3D point at z = 0, carried into
/// the historical frame through the inverse of `t_hist_to_cur`, projected
/// back onto the ground plane, and sampled bilinearly from `hist`.
pub fn align_bev(
    hist: &FeatureMap,
    t_hist_to_cur: &Pose,
    grid: &GridConfig,
) -> Result<FeatureMap, BevError> {
    if hist.grid != *grid {
        return Err(BevError::GridMismatch);
    }
    let (rows, cols, channels) = (hist.rows, hist.cols, hist.channels);
    let cur_to_hist = pose_inverse(t_hist_to_cur);

    // Row-parallel inverse warp; rows are independent, so the parallel
    // result is bit-identical to a sequential pass.
    let row_blocks: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|row| {
            let mut block = vec![0.0; cols * channels];
            let mut sample = vec![0.0; channels];
            for col in 0..cols {
                let [wx, wy] = grid.grid_to_world([col as f64, row as f64]);
                let p_hist = cur_to_hist.apply(&nalgebra::Vector3::new(wx, wy, 0.0));
                let pos = grid.world_to_grid([p_hist.x, p_hist.y]);
                sample_into(hist, pos, &mut sample);
                for ch in 0..channels {
                    block[ch * cols + col] = sample[ch];
                }
            }
            block
        })
        .collect();

    let mut out = FeatureMap::zeros(grid, channels, hist.frame_offset);
    let plane = rows * cols;
    for (row, block) in row_blocks.iter().enumerate() {
        for ch in 0..channels {
            out.data[ch * plane + row * cols..ch * plane + (row + 1) * cols]
                .copy_from_slice(&block[ch * cols..(ch + 1) * cols]);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct BevfHeader {
    channels: usize,
    rows: usize,
    cols: usize,
    grid: GridConfig,
    frame_offset: u32,
    dtype: String,
}

/// Writes the `.bevf` container: one JSON header line, then the channel-major
/// row-major payload as little-endian f32.
pub fn write_bevf(fm: &FeatureMap, path: &Path) -> Result<(), BevError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = BevfHeader {
        channels: fm.channels,
        rows: fm.rows,
        cols: fm.cols,
        grid: fm.grid,
        frame_offset: fm.frame_offset,
        dtype: "f32".into(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| BevError::Header(e.to_string()))?;
    w.write_all(b"\n")?;
    for &v in &fm.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bevf(path: &Path) -> Result<FeatureMap, BevError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: BevfHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| BevError::Header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(BevError::Header(format!("unsupported dtype {}", header.dtype)));
    }
    let n = header.channels * header.rows * header.cols;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let fm = FeatureMap::from_data(&header.grid, header.channels, header.frame_offset, data)?;
    if fm.rows != header.rows || fm.cols != header.cols {
        return Err(BevError::Header("grid dims disagree with header".into()));
    }
    Ok(fm)
}
