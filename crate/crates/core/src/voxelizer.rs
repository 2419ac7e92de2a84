//! Dynamic pillar voxelization.
//!
//! Points are binned into vertical bird's-eye-view columns ("pillars") on a
//! regular grid. Each point keeps its own offset from the pillar center and
//! from the mean of its pillar; embeddings are max-pooled into a pseudo-image
//! and grid features can be gathered back to points.

use std::cmp::Ordering;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::geometry::Vec3;

/// Width of the raw per-point feature vector:
/// `[x, y, z, cluster_dx, cluster_dy, cluster_dz, center_dx, center_dy]`.
pub const POINT_FEATURE_DIM: usize = 8;

/// Value held by pseudo-image cells that contain no point.
pub const EMPTY_CELL_FILL: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub extent_x: f64,
    pub extent_y: f64,
    pub resolution: f64,
    /// World xy of the lower corner of cell (0, 0).
    pub origin: [f64; 2],
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for GridConfig {
    /// 512×512 pillars of 0.2 m over a 102.4 m square centered on the sensor.
    fn default() -> Self {
        Self::centered(102.4, 0.2)
    }
}

impl GridConfig {
    /// Square map of side `extent` centered on the sensor, z crop [-3, 3] m.
    pub fn centered(extent: f64, resolution: f64) -> Self {
        Self {
            extent_x: extent,
            extent_y: extent,
            resolution,
            origin: [-extent / 2.0, -extent / 2.0],
            z_min: -3.0,
            z_max: 3.0,
        }
    }

    /// `n`×`n` cells of `resolution`, centered on the sensor.
    pub fn square(n: usize, resolution: f64) -> Self {
        Self::centered(n as f64 * resolution, resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.extent_x, self.extent_y, self.resolution, self.origin[0], self.origin[1], self.z_min, self.z_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("grid parameters must be finite".into()));
        }
        if self.resolution <= 0.0 || self.extent_x <= 0.0 || self.extent_y <= 0.0 {
            return Err(Error::Config("grid extent and resolution must be positive".into()));
        }
        if self.z_min >= self.z_max {
            return Err(Error::Config(format!("z crop [{}, {}) is empty", self.z_min, self.z_max)));
        }
        for (name, extent) in [("extent_x", self.extent_x), ("extent_y", self.extent_y)] {
            let cells = extent / self.resolution;
            if (cells - cells.round()).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "{name} {extent} is not a whole number of {} m cells",
                    self.resolution
                )));
            }
        }
        Ok(())
    }

    /// Number of rows (y cells).
    pub fn height(&self) -> usize {
        (self.extent_y / self.resolution).round() as usize
    }

    /// Number of columns (x cells).
    pub fn width(&self) -> usize {
        (self.extent_x / self.resolution).round() as usize
    }

    pub fn num_cells(&self) -> usize {
        self.height() * self.width()
    }

    pub fn z_mid(&self) -> f64 {
        0.5 * (self.z_min + self.z_max)
    }

    /// Cell index along one axis with half-open cells; ties go up.
    fn axis_cell(&self, v: f64, origin: f64, count: usize) -> Option<usize> {
        let mut c = ((v - origin) / self.resolution).floor();
        // Correct for rounding in the division so that lo <= v < hi holds with
        // lo/hi computed exactly as below.
        if origin + (c + 1.0) * self.resolution <= v {
            c += 1.0;
        } else if origin + c * self.resolution > v {
            c -= 1.0;
        }
        (c >= 0.0 && c < count as f64).then_some(c as usize)
    }

    /// (row, col) of the pillar holding `p`, or `None` outside the region.
    pub fn cell_of(&self, p: &Vec3) -> Option<(usize, usize)> {
        if !(p.z >= self.z_min && p.z < self.z_max) {
            return None;
        }
        let col = self.axis_cell(p.x, self.origin[0], self.width())?;
        let row = self.axis_cell(p.y, self.origin[1], self.height())?;
        Some((row, col))
    }

    /// Center of pillar (row, col), with z at the crop midpoint.
    pub fn cell_center(&self, row: usize, col: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + (col as f64 + 0.5) * self.resolution,
            self.origin[1] + (row as f64 + 0.5) * self.resolution,
            self.z_mid(),
        )
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.cell_of(p).is_some()
    }
}

/// Point→pillar map. Row `i` of every field belongs to input point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarAssignment {
    /// Row-major cell id, `-1` when the point lies outside the region.
    pub pillar_index: Vec<i64>,
    pub center_offset: Vec<Vec3>,
    pub cluster_offset: Vec<Vec3>,
    pub valid_mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl PillarAssignment {
    pub fn len(&self) -> usize {
        self.pillar_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pillar_index.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Indices of valid points, ascending.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid_mask[i]).collect()
    }

    /// Cell ids of the valid points, in `valid_indices` order.
    pub fn valid_cells(&self) -> Vec<usize> {
        self.pillar_index.iter().filter(|&&c| c >= 0).map(|&c| c as usize).collect()
    }

    pub fn cell_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.num_cells()];
        for &c in self.pillar_index.iter().filter(|&&c| c >= 0) {
            counts[c as usize] += 1;
        }
        counts
    }
}

/// Order-independent key so that per-pillar sums do not depend on the input
/// point order.
fn coord_cmp(a: &Vec3, b: &Vec3) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

pub fn assign_pillars(points: &[Vec3], grid: &GridConfig) -> Result<PillarAssignment> {
    grid.validate()?;
    let n = points.len();
    let width = grid.width();
    let mut pillar_index = vec![-1i64; n];
    let mut center_offset = vec![Vec3::zeros(); n];
    let mut valid_mask = vec![false; n];

    for (i, p) in points.iter().enumerate() {
        if let Some((row, col)) = grid.cell_of(p) {
            pillar_index[i] = (row * width + col) as i64;
            center_offset[i] = p - grid.cell_center(row, col);
            valid_mask[i] = true;
        }
    }

    let mut members: Vec<usize> = (0..n).filter(|&i| valid_mask[i]).collect();
    members.sort_unstable_by(|&a, &b| {
        pillar_index[a].cmp(&pillar_index[b]).then_with(|| coord_cmp(&points[a], &points[b]))
    });

    let mut cluster_offset = vec![Vec3::zeros(); n];
    for group in members.chunk_by(|&a, &b| pillar_index[a] == pillar_index[b]) {
        let sum = group.iter().fold(Vec3::zeros(), |acc, &i| acc + points[i]);
        let mean = sum / group.len() as f64;
        for &i in group {
            cluster_offset[i] = points[i] - mean;
        }
    }

    Ok(PillarAssignment {
        pillar_index,
        center_offset,
        cluster_offset,
        valid_mask,
        height: grid.height(),
        width,
    })
}

/// Raw per-point features, N × [`POINT_FEATURE_DIM`] row-major. Rows of
/// invalid points are zero and flagged `false` in `valid`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PointFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * POINT_FEATURE_DIM..(i + 1) * POINT_FEATURE_DIM]
    }
}

pub fn compute_point_features(points: &[Vec3], assignment: &PillarAssignment) -> Result<PointFeatures> {
    if points.len() != assignment.len() {
        return Err(validation(format!(
            "{} points but assignment covers {}",
            points.len(),
            assignment.len()
        )));
    }
    let mut data = vec![0.0; points.len() * POINT_FEATURE_DIM];
    for (i, p) in points.iter().enumerate() {
        if !assignment.valid_mask[i] {
            continue;
        }
        let cl = &assignment.cluster_offset[i];
        let ce = &assignment.center_offset[i];
        data[i * POINT_FEATURE_DIM..(i + 1) * POINT_FEATURE_DIM]
            .copy_from_slice(&[p.x, p.y, p.z, cl.x, cl.y, cl.z, ce.x, ce.y]);
    }
    Ok(PointFeatures { data, valid: assignment.valid_mask.clone() })
}

/// Sentinel in a max-pool argmax table for cells with no point.
pub const NO_SOURCE: u32 = u32::MAX;

/// Channelwise max of `rows` (n × `channels`) into `num_cells` × `channels`
/// cells. `cells[k]` is the cell of row `k`. Returns the pooled grid and, per
/// (cell, channel), the row that produced the max (lowest row on ties).
pub fn scatter_max_rows<F: Float>(
    rows: &[F],
    channels: usize,
    cells: &[usize],
    num_cells: usize,
) -> (Vec<F>, Vec<u32>) {
    debug_assert_eq!(rows.len(), cells.len() * channels);
    let mut out = vec![F::neg_infinity(); num_cells * channels];
    let mut argmax = vec![NO_SOURCE; num_cells * channels];
    for (k, &cell) in cells.iter().enumerate() {
        let src = &rows[k * channels..(k + 1) * channels];
        let base = cell * channels;
        for c in 0..channels {
            if argmax[base + c] == NO_SOURCE || src[c] > out[base + c] {
                out[base + c] = src[c];
                argmax[base + c] = k as u32;
            }
        }
    }
    let fill = F::from(EMPTY_CELL_FILL).unwrap();
    for (v, &a) in out.iter_mut().zip(&argmax) {
        if a == NO_SOURCE {
            *v = fill;
        }
    }
    (out, argmax)
}

/// Bird's-eye-view feature grid, H×W×C row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub occupancy: Vec<bool>,
}

impl PseudoImage {
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }
}

pub fn scatter_max(
    embeddings: &[f32],
    channels: usize,
    assignment: &PillarAssignment,
    grid: &GridConfig,
) -> Result<PseudoImage> {
    if embeddings.len() != assignment.len() * channels {
        return Err(validation(format!(
            "embedding buffer has {} values, expected {} × {channels}",
            embeddings.len(),
            assignment.len()
        )));
    }
    if grid.height() != assignment.height || grid.width() != assignment.width {
        return Err(validation("grid does not match the assignment"));
    }
    if let Some(i) = embeddings.iter().position(|v| !v.is_finite()) {
        return Err(validation(format!("embedding value {i} is not finite")));
    }
    let valid = assignment.valid_indices();
    let mut rows = Vec::with_capacity(valid.len() * channels);
    for &i in &valid {
        rows.extend_from_slice(&embeddings[i * channels..(i + 1) * channels]);
    }
    let cells = assignment.valid_cells();
    let (data, _) = scatter_max_rows(&rows, channels, &cells, assignment.num_cells());
    let mut occupancy = vec![false; assignment.num_cells()];
    for c in cells {
        occupancy[c] = true;
    }
    Ok(PseudoImage { height: assignment.height, width: assignment.width, channels, data, occupancy })
}

/// Per-point rows gathered from an H×W×C grid. Invalid points get zero rows
/// and `false` in the returned mask.
pub fn gather_per_point<F: Float>(
    grid: &[F],
    channels: usize,
    assignment: &PillarAssignment,
) -> Result<(Vec<F>, Vec<bool>)> {
    let num_cells = assignment.num_cells();
    if grid.len() != num_cells * channels {
        return Err(validation(format!(
            "feature grid has {} values, expected {}×{}×{channels}",
            grid.len(),
            assignment.height,
            assignment.width
        )));
    }
    let mut out = vec![F::zero(); assignment.len() * channels];
    for (i, &cell) in assignment.pillar_index.iter().enumerate() {
        if cell < 0 {
            continue;
        }
        let cell = cell as usize;
        if cell >= num_cells {
            return Err(Error::Internal(format!("pillar index {cell} out of range for {num_cells} cells")));
        }
        out[i * channels..(i + 1) * channels].copy_from_slice(&grid[cell * channels..(cell + 1) * channels]);
    }
    Ok((out, assignment.valid_mask.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridConfig {
        GridConfig::square(16, 0.2)
    }

    #[test]
    fn default_grid_is_512() {
        let g = GridConfig::default();
        g.validate().unwrap();
        assert_eq!((g.height(), g.width()), (512, 512));
    }

    #[test]
    fn fractional_extent_rejected() {
        let mut g = grid();
        g.extent_x = 3.3;
        assert!(g.validate().is_err());
    }

    #[test]
    fn centered_singleton() {
        let g = grid();
        let p = g.cell_center(5, 7);
        let a = assign_pillars(&[p], &g).unwrap();
        assert_eq!(a.pillar_index, vec![(5 * 16 + 7) as i64]);
        assert_eq!(a.center_offset[0], Vec3::zeros());
        assert_eq!(a.cluster_offset[0], Vec3::zeros());
    }

    #[test]
    fn symmetric_pair_cluster_offsets_negate() {
        let g = grid();
        let c = g.cell_center(3, 3);
        let d = Vec3::new(0.05, -0.03, 0.4);
        let a = assign_pillars(&[c + d, c - d], &g).unwrap();
        assert_eq!(a.pillar_index[0], a.pillar_index[1]);
        assert!((a.cluster_offset[0] + a.cluster_offset[1]).norm() < 1e-12);
        assert!((a.cluster_offset[0] - d).norm() < 1e-12);
    }

    #[test]
    fn empty_input_is_empty_assignment() {
        let a = assign_pillars(&[], &grid()).unwrap();
        assert!(a.is_empty());
        assert_eq!(a.num_valid(), 0);
    }

    #[test]
    fn boundary_rules() {
        let g = grid();
        let hi = g.origin[0] + g.extent_x;
        // Upper ROI edge is outside.
        assert_eq!(g.cell_of(&Vec3::new(hi, 0.0, 0.0)), None);
        assert_eq!(g.cell_of(&Vec3::new(g.origin[0], g.origin[1], 0.0)), Some((0, 0)));
        // Interior cell edges go to the higher cell.
        for k in 1..16 {
            let x = g.origin[0] + k as f64 * g.resolution;
            assert_eq!(g.cell_of(&Vec3::new(x, 0.05, 0.0)).unwrap().1, k, "edge {k}");
        }
        // z crop is half-open too.
        assert!(g.contains(&Vec3::new(0.0, 0.0, g.z_min)));
        assert!(!g.contains(&Vec3::new(0.0, 0.0, g.z_max)));
    }

    #[test]
    fn out_of_roi_marked_invalid() {
        let g = grid();
        let a = assign_pillars(&[Vec3::new(100.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.0)], &g).unwrap();
        assert_eq!(a.pillar_index[0], -1);
        assert!(!a.valid_mask[0]);
        assert!(a.valid_mask[1]);
        let f = compute_point_features(&[Vec3::new(100.0, 0.0, 0.0), Vec3::zeros()], &a).unwrap();
        assert!(f.row(0).iter().all(|&v| v == 0.0));
        assert!(!f.valid[0]);
    }

    #[test]
    fn centered_features() {
        let g = grid();
        let p = g.cell_center(2, 9);
        let a = assign_pillars(&[p], &g).unwrap();
        let f = compute_point_features(&[p], &a).unwrap();
        assert_eq!(&f.row(0)[..3], &[p.x, p.y, p.z]);
        assert!(f.row(0)[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_length_mismatch() {
        let a = assign_pillars(&[Vec3::zeros()], &grid()).unwrap();
        assert!(compute_point_features(&[], &a).is_err());
    }

    #[test]
    fn scatter_single_and_duplicate() {
        let g = grid();
        let p = Vec3::new(0.1, 0.1, 0.0);
        let a = assign_pillars(&[p], &g).unwrap();
        let e = [1.5f32, -2.0, 0.25];
        let img = scatter_max(&e, 3, &a, &g).unwrap();
        let (r, c) = g.cell_of(&p).unwrap();
        assert_eq!(img.cell(r, c), &e);
        assert_eq!(img.occupancy.iter().filter(|&&o| o).count(), 1);
        assert!(img.data.iter().enumerate().all(|(k, &v)| k / 3 == r * 16 + c || v == EMPTY_CELL_FILL));

        let a2 = assign_pillars(&[p, p], &g).unwrap();
        let img2 = scatter_max(&[e, e].concat(), 3, &a2, &g).unwrap();
        assert_eq!(img, img2);
    }

    #[test]
    fn scatter_rejects_non_finite() {
        let g = grid();
        let a = assign_pillars(&[Vec3::zeros()], &g).unwrap();
        assert!(scatter_max(&[f32::NAN], 1, &a, &g).is_err());
    }

    #[test]
    fn gather_roundtrip_and_shared_cell() {
        let g = grid();
        let pts = [Vec3::new(0.01, 0.01, 0.0), Vec3::new(0.6, -0.5, 1.0), Vec3::new(0.15, 0.12, -0.5)];
        let a = assign_pillars(&pts, &g).unwrap();
        assert_eq!(a.pillar_index[0], a.pillar_index[2]);
        let e: Vec<f32> = vec![1.0, 2.0, 3.0, 4.0, 0.5, 9.0];
        let img = scatter_max(&e, 2, &a, &g).unwrap();
        let (rows, mask) = gather_per_point(&img.data, 2, &a).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert_eq!(&rows[2..4], &e[2..4]);
        assert_eq!(&rows[0..2], &rows[4..6]);
        assert_eq!(&rows[0..2], &[1.0, 9.0]);
    }

    #[test]
    fn gather_out_of_range_is_internal_error() {
        let g = grid();
        let mut a = assign_pillars(&[Vec3::zeros()], &g).unwrap();
        a.pillar_index[0] = 10_000;
        let grid_vals = vec![0.0f32; 256];
        assert!(matches!(gather_per_point(&grid_vals, 1, &a), Err(Error::Internal(_))));
    }
}
