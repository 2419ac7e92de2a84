use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{validation, Result};
use crate::geometry::Vec3;
use crate::voxelizer::{assign_pillars, compute_point_features, gather_per_point, scatter_max, GridConfig, PillarAssignment, POINT_FEATURE_DIM};

/// Voxelizer timing summary. Informational only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n_points: usize,
    pub repeats: usize,
    pub median_s: f64,
    pub p95_s: f64,
    pub points_per_s: f64,
    /// Peak resident set size of the process, when the OS reports it.
    pub peak_memory_kib: Option<u64>,
    pub valid_points: usize,
    /// Sampled points and cells agreed with a brute-force search.
    pub oracle_ok: bool,
}

/// `VmHWM` from `/proc/self/status`.
pub fn peak_memory_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn random_points(n: usize, grid: &GridConfig, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, y0) = (grid.origin[0], grid.origin[1]);
    // A margin outside the grid exercises the out-of-range path.
    let (mx, my) = (0.05 * grid.extent_x, 0.05 * grid.extent_y);
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(x0 - mx..x0 + grid.extent_x + mx),
                rng.random_range(y0 - my..y0 + grid.extent_y + my),
                rng.random_range(grid.z_min - 0.5..grid.z_max + 0.5),
            )
        })
        .collect()
}

fn voxelize(points: &[Vec3], grid: &GridConfig) -> Result<(PillarAssignment, Vec<f32>, Vec<f32>)> {
    let a = assign_pillars(points, grid)?;
    let feats = compute_point_features(points, &a)?;
    let emb: Vec<f32> = feats.data.iter().map(|&v| v as f32).collect();
    let image = scatter_max(&emb, POINT_FEATURE_DIM, &a, grid)?;
    let (gathered, _) = gather_per_point(&image.data, POINT_FEATURE_DIM, &a)?;
    Ok((a, emb, gathered))
}

fn brute_cell(p: &Vec3, grid: &GridConfig) -> Option<usize> {
    if !(p.z >= grid.z_min && p.z < grid.z_max) {
        return None;
    }
    let r = grid.resolution;
    for row in 0..grid.height() {
        for col in 0..grid.width() {
            let lo = [grid.origin[0] + col as f64 * r, grid.origin[1] + row as f64 * r];
            if lo[0] <= p.x && p.x < grid.origin[0] + (col + 1) as f64 * r && lo[1] <= p.y && p.y < grid.origin[1] + (row + 1) as f64 * r {
                return Some(row * grid.width() + col);
            }
        }
    }
    None
}

fn spot_check(points: &[Vec3], grid: &GridConfig, a: &PillarAssignment, emb: &[f32], gathered: &[f32]) -> bool {
    let step = (points.len() / 64).max(1);
    let c = POINT_FEATURE_DIM;
    for i in (0..points.len()).step_by(step) {
        let cell = brute_cell(&points[i], grid);
        if cell.map_or(-1, |v| v as i64) != a.pillar_index[i] {
            return false;
        }
        let Some(cell) = cell else { continue };
        for ch in 0..c {
            let mx = (0..points.len())
                .filter(|&j| a.pillar_index[j] == cell as i64)
                .map(|j| emb[j * c + ch])
                .fold(f32::NEG_INFINITY, f32::max);
            if mx != gathered[i * c + ch] {
                return false;
            }
        }
    }
    true
}

/// Time assignment, point features, scatter-max and gather on `n_points`
/// uniform random points.
pub fn bench_voxelizer(n_points: usize, grid: &GridConfig, repeats: usize, seed: u64) -> Result<BenchReport> {
    if n_points == 0 {
        return Err(validation("n_points must be at least 1"));
    }
    if repeats == 0 {
        return Err(validation("repeats must be at least 1"));
    }
    grid.validate()?;
    let points = random_points(n_points, grid, seed);
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let start = Instant::now();
        let out = voxelize(&points, grid)?;
        times.push(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    let (a, emb, gathered) = last.expect("at least one repeat");
    times.sort_by(f64::total_cmp);
    let pick = |q: f64| times[((q * (times.len() - 1) as f64).round() as usize).min(times.len() - 1)];
    let median = pick(0.5);
    Ok(BenchReport {
        n_points,
        repeats,
        median_s: median,
        p95_s: pick(0.95),
        points_per_s: n_points as f64 / median.max(1e-12),
        peak_memory_kib: peak_memory_kib(),
        valid_points: a.num_valid(),
        oracle_ok: spot_check(&points, grid, &a, &emb, &gathered),
    })
}
