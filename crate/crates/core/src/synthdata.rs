//! Synthetic street scenes with exact ground-truth flow.
//!
//! A scene is a corridor between two walls with a few static boxes, some
//! moving boxes (cars and pedestrians) and some parked ones. Every surface is
//! sampled independently in both sweeps, so no point correspondences leak
//! into `cloud_t1`. A mover displaced by `v·dt` in the frame of sweep `t+1`
//! gives `gt_flow = ego_flow + v·dt`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::geometry::{ego_flow, PointCloud, RigidTransform, Vec3};
use crate::metrics::MetricConfig;

/// Mixture of two uniform speed ranges, in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedMixture {
    pub slow_weight: f64,
    pub slow: [f64; 2],
    pub fast: [f64; 2],
}

impl Default for SpeedMixture {
    fn default() -> Self {
        Self { slow_weight: 0.7, slow: [0.5, 2.0], fast: [2.0, 15.0] }
    }
}

impl SpeedMixture {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let [lo, hi] = if rng.random::<f64>() < self.slow_weight { self.slow } else { self.fast };
        uniform(rng, lo, hi)
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Side of the square region (m) centered on the sensor.
    pub extent: f64,
    /// Points on static structures per sweep.
    pub n_background: usize,
    pub n_static_boxes: usize,
    pub n_movers: usize,
    /// Foreground boxes that do not move.
    pub n_parked: usize,
    pub points_per_mover: usize,
    pub speed: SpeedMixture,
    /// Fixed heading (rad) for every mover; random when unset.
    pub mover_heading: Option<f64>,
    /// When set, mover speeds are chosen so that the share of points in the
    /// slow / medium / fast loss buckets matches these fractions.
    pub bucket_fractions: Option<[f64; 3]>,
    /// Ego forward speed range (m/s).
    pub ego_speed: [f64; 2],
    /// Maximum absolute ego yaw rate (rad/s).
    pub ego_yaw_rate: f64,
    pub dt: f64,
    /// Standard deviation of isotropic position noise (m).
    pub noise: f64,
    pub ground_z: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 12.8,
            n_background: 1200,
            n_static_boxes: 2,
            n_movers: 4,
            n_parked: 1,
            points_per_mover: 100,
            speed: SpeedMixture::default(),
            mover_heading: None,
            bucket_fractions: None,
            ego_speed: [0.0, 10.0],
            ego_yaw_rate: 0.3,
            dt: 0.1,
            noise: 0.0,
            ground_z: -1.6,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let finite = [self.extent, self.ego_yaw_rate, self.dt, self.noise, self.ground_z, self.speed.slow_weight]
            .iter()
            .chain(&self.speed.slow)
            .chain(&self.speed.fast)
            .chain(&self.ego_speed)
            .all(|v| v.is_finite());
        if !finite {
            return bad("scene parameters must be finite");
        }
        if self.extent < 4.0 {
            return bad("extent must be at least 4 m");
        }
        if self.dt <= 0.0 || self.noise < 0.0 || self.ego_yaw_rate < 0.0 {
            return bad("dt must be positive; noise and ego_yaw_rate non-negative");
        }
        if !(0.0..=1.0).contains(&self.speed.slow_weight) {
            return bad("speed.slow_weight must lie in [0, 1]");
        }
        for [lo, hi] in [self.speed.slow, self.speed.fast, self.ego_speed] {
            if lo < 0.0 || hi < lo {
                return bad("speed ranges must satisfy 0 <= lo <= hi");
            }
        }
        if self.ground_z < -3.0 || self.ground_z + 2.5 > 3.0 {
            return bad("ground_z must keep objects inside the [-3, 3] m height crop");
        }
        if self.n_movers + self.n_parked > 0 && self.points_per_mover == 0 {
            return bad("points_per_mover must be positive when there are movers");
        }
        if let Some(f) = self.bucket_fractions {
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("bucket_fractions must be non-negative and sum to 1");
            }
        }
        Ok(())
    }

    pub fn points_per_sweep(&self) -> usize {
        self.n_background + (self.n_movers + self.n_parked) * self.points_per_mover
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    fn standing(cx: f64, cy: f64, size: Vec3, ground_z: f64) -> Self {
        Self::new(Vec3::new(cx - size.x / 2.0, cy - size.y / 2.0, ground_z), Vec3::new(cx + size.x / 2.0, cy + size.y / 2.0, ground_z + size.z))
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    /// xy-footprints closer than `margin`.
    pub fn overlaps_xy(&self, other: &Aabb, margin: f64) -> bool {
        self.min.x - margin < other.max.x && other.min.x - margin < self.max.x && self.min.y - margin < other.max.y && other.min.y - margin < self.max.y
    }

    /// Area of the sampled surface: the four sides plus the top.
    pub fn surface_area(&self) -> f64 {
        let s = self.size();
        2.0 * (s.x + s.y) * s.z + s.x * s.y
    }

    /// Uniform sample on the sides and top.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        let s = self.size();
        let faces = [s.y * s.z, s.y * s.z, s.x * s.z, s.x * s.z, s.x * s.y];
        let total: f64 = faces.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut face = faces.len() - 1;
        for (i, &a) in faces.iter().enumerate() {
            if pick < a {
                face = i;
                break;
            }
            pick -= a;
        }
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        let lerp = |lo: f64, hi: f64, t: f64| lo + (hi - lo) * t;
        match face {
            0 => Vec3::new(self.min.x, lerp(self.min.y, self.max.y, u), lerp(self.min.z, self.max.z, v)),
            1 => Vec3::new(self.max.x, lerp(self.min.y, self.max.y, u), lerp(self.min.z, self.max.z, v)),
            2 => Vec3::new(lerp(self.min.x, self.max.x, u), self.min.y, lerp(self.min.z, self.max.z, v)),
            3 => Vec3::new(lerp(self.min.x, self.max.x, u), self.max.y, lerp(self.min.z, self.max.z, v)),
            _ => Vec3::new(lerp(self.min.x, self.max.x, u), lerp(self.min.y, self.max.y, v), self.max.z),
        }
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }

    /// Euclidean distance from `p` to the box boundary.
    pub fn distance_to_surface(&self, p: &Vec3) -> f64 {
        if self.contains(p, 0.0) {
            (0..3).map(|k| (p[k] - self.min[k]).min(self.max[k] - p[k])).fold(f64::INFINITY, f64::min)
        } else {
            let d = Vec3::from_fn(|k, _| (self.min[k] - p[k]).max(0.0).max(p[k] - self.max[k]));
            d.norm()
        }
    }
}

/// A foreground box and its velocity, expressed in the frame of sweep `t+1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mover {
    /// Extent at time `t`, in the frame of sweep `t`.
    pub bounds: Aabb,
    pub velocity: Vec3,
}

/// Two consecutive sweeps with annotations on the first.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    /// Carries `gt_flow` and `foreground_mask`.
    pub cloud_t: PointCloud,
    pub cloud_t1: PointCloud,
    pub ego: RigidTransform,
}

impl FramePair {
    pub fn validate(&self) -> Result<()> {
        self.cloud_t.validate()?;
        self.cloud_t1.validate()
    }

    /// Copy with every stored value rounded to `f32`, the precision of the
    /// on-disk format.
    pub fn quantized(&self) -> FramePair {
        let q = |v: &Vec3| v.map(|x| x as f32 as f64);
        let qc = |c: &PointCloud| PointCloud {
            positions: c.positions.iter().map(q).collect(),
            gt_flow: c.gt_flow.as_ref().map(|f| f.iter().map(q).collect()),
            foreground_mask: c.foreground_mask.clone(),
            ground_mask: None,
        };
        FramePair { cloud_t: qc(&self.cloud_t.without_ground()), cloud_t1: qc(&self.cloud_t1.without_ground()), ego: self.ego }
    }

    /// `gt_flow − ego_flow` per point of `cloud_t`.
    pub fn gt_residual(&self) -> Result<Vec<Vec3>> {
        let gt = self.cloud_t.gt_flow.as_ref().ok_or_else(|| validation("frame pair has no gt_flow"))?;
        Ok(gt.iter().zip(ego_flow(&self.ego, &self.cloud_t.positions)).map(|(g, e)| g - e).collect())
    }
}

/// A generated pair plus the scene description it was sampled from.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub pair: FramePair,
    pub static_boxes: Vec<Aabb>,
    pub movers: Vec<Mover>,
    /// For each point of `cloud_t`, the index into `movers` it was sampled
    /// from, if any.
    pub mover_of_point: Vec<Option<usize>>,
}

const MAX_LAYOUT_TRIES: usize = 200;
const MAX_PLACEMENT_TRIES: usize = 200;

fn bucket_speed(rng: &mut impl Rng, bucket: usize) -> f64 {
    match bucket {
        0 => rng.random_range(0.05..0.35),
        1 => rng.random_range(0.45..0.95),
        _ => rng.random_range(1.1..8.0),
    }
}

fn mover_speeds(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let Some(f) = cfg.bucket_fractions else {
        return Ok((0..cfg.n_movers).map(|_| cfg.speed.sample(rng)).collect());
    };
    let per = cfg.points_per_mover.max(1) as f64;
    let total = cfg.points_per_sweep() as f64;
    let n_fast = (f[2] * total / per).round() as usize;
    let n_med = (f[1] * total / per).round() as usize;
    if n_fast + n_med > cfg.n_movers {
        return Err(Error::Config(format!(
            "bucket_fractions need {} moving boxes, only {} configured",
            n_fast + n_med,
            cfg.n_movers
        )));
    }
    let mut buckets: Vec<usize> = std::iter::repeat_n(2, n_fast).chain(std::iter::repeat_n(1, n_med)).collect();
    buckets.resize(cfg.n_movers, 0);
    buckets.shuffle(rng);
    Ok(buckets.into_iter().map(|b| bucket_speed(rng, b)).collect())
}

fn sample_boxes(boxes: &[Aabb], n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    if boxes.is_empty() {
        return Vec::new();
    }
    let areas: Vec<f64> = boxes.iter().map(Aabb::surface_area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut k = boxes.len() - 1;
            for (i, &a) in areas.iter().enumerate() {
                if pick < a {
                    k = i;
                    break;
                }
                pick -= a;
            }
            boxes[k].sample_surface(rng)
        })
        .collect()
}

/// Generate one pair. The same `(config, seed)` always yields the same pair.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<GeneratedScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cfg.extent / 2.0;
    let g = cfg.ground_z;

    let forward = uniform(&mut rng, cfg.ego_speed[0], cfg.ego_speed[1]) * cfg.dt;
    let yaw = uniform(&mut rng, -cfg.ego_yaw_rate, cfg.ego_yaw_rate) * cfg.dt;
    // The sensor moves forward, so static points move backwards in its frame.
    let ego = RigidTransform::from_yaw(-yaw, Vec3::new(-forward, 0.0, 0.0));

    let wall = 0.3;
    let mut static_boxes = vec![
        Aabb::new(Vec3::new(-half, half - 0.5 - wall, g), Vec3::new(half, half - 0.5, g + 2.5)),
        Aabb::new(Vec3::new(-half, -half + 0.5, g), Vec3::new(half, -half + 0.5 + wall, g + 2.5)),
    ];
    let road = half - 0.5 - wall;

    let static_sizes: Vec<Vec3> = (0..cfg.n_static_boxes)
        .map(|_| Vec3::new(rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(1.0..2.5)))
        .collect();
    let speeds = mover_speeds(cfg, &mut rng)?;
    let mut mover_specs = Vec::new();
    for k in 0..cfg.n_movers + cfg.n_parked {
        let size = if rng.random::<f64>() < 0.6 {
            Vec3::new(rng.random_range(3.6..4.6), rng.random_range(1.7..2.0), rng.random_range(1.4..1.8))
        } else {
            Vec3::new(rng.random_range(0.5..0.8), rng.random_range(0.5..0.8), rng.random_range(1.5..1.9))
        };
        let random_heading = rng.random_range(0.0..std::f64::consts::TAU);
        let heading = cfg.mover_heading.unwrap_or(random_heading);
        let speed = speeds.get(k).copied().unwrap_or(0.0);
        mover_specs.push((size, Vec3::new(heading.cos(), heading.sin(), 0.0) * speed));
    }

    // (size, displacement over dt) for every box; placed largest first.
    let specs: Vec<(Vec3, Vec3)> = static_sizes
        .iter()
        .map(|&s| (s, Vec3::zeros()))
        .chain(mover_specs.iter().map(|&(s, v)| (s, v * cfg.dt)))
        .collect();
    let mut order: Vec<usize> = (0..specs.len()).collect();
    let swept_area = |k: usize| (specs[k].0.x + specs[k].1.x.abs()) * (specs[k].0.y + specs[k].1.y.abs());
    order.sort_by(|&i, &j| swept_area(j).total_cmp(&swept_area(i)).then(i.cmp(&j)));
    let bounds = [half - 0.2, road - 0.2];
    let mut ranges = Vec::with_capacity(specs.len());
    for &(size, d) in &specs {
        let r: Vec<(f64, f64)> = (0..2).map(|k| (-bounds[k] + size[k] / 2.0 - d[k].min(0.0), bounds[k] - size[k] / 2.0 - d[k].max(0.0))).collect();
        if r.iter().any(|(lo, hi)| lo >= hi) {
            return Err(Error::Config(format!("extent {} m is too small for a {:.1}×{:.1} m box", cfg.extent, size.x, size.y)));
        }
        ranges.push((r[0], r[1]));
    }
    let swept = |b: &Aabb, d: Vec3| Aabb::new(b.min + d.map(|v| v.min(0.0)), b.max + d.map(|v| v.max(0.0)));
    let mut placed: Option<Vec<Aabb>> = None;
    'layout: for _ in 0..MAX_LAYOUT_TRIES {
        let mut boxes = vec![Aabb::new(Vec3::zeros(), Vec3::zeros()); specs.len()];
        let mut done: Vec<usize> = Vec::new();
        for &k in &order {
            let (size, d) = specs[k];
            let ((x0, x1), (y0, y1)) = ranges[k];
            let mut ok = false;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let b = Aabb::standing(rng.random_range(x0..x1), rng.random_range(y0..y1), size, g);
                let sb = swept(&b, d);
                if done.iter().all(|&o| !sb.overlaps_xy(&swept(&boxes[o], specs[o].1), 0.2)) {
                    boxes[k] = b;
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'layout;
            }
            done.push(k);
        }
        placed = Some(boxes);
        break;
    }
    let placed = placed.ok_or_else(|| Error::Config(format!("extent {} m is too small to place all boxes without overlap", cfg.extent)))?;
    static_boxes.extend_from_slice(&placed[..cfg.n_static_boxes]);
    let movers: Vec<Mover> = mover_specs
        .iter()
        .zip(&placed[cfg.n_static_boxes..])
        .map(|(&(_, velocity), &bounds)| Mover { bounds, velocity })
        .collect();

    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = |p: Vec3, rng: &mut ChaCha8Rng| {
        if cfg.noise > 0.0 {
            p + Vec3::from_fn(|_, _| noise.sample(rng))
        } else {
            p
        }
    };

    let mut pos_t = Vec::new();
    let mut gt = Vec::new();
    let mut fg = Vec::new();
    let mut mover_of_point = Vec::new();
    let static_t = sample_boxes(&static_boxes, cfg.n_background, &mut rng);
    for p in static_t {
        gt.push(ego.apply_point(&p) - p);
        pos_t.push(jitter(p, &mut rng));
        fg.push(false);
        mover_of_point.push(None);
    }
    for (k, m) in movers.iter().enumerate() {
        for _ in 0..cfg.points_per_mover {
            let p = m.bounds.sample_surface(&mut rng);
            gt.push(ego.apply_point(&p) - p + m.velocity * cfg.dt);
            pos_t.push(jitter(p, &mut rng));
            fg.push(true);
            mover_of_point.push(Some(k));
        }
    }

    let mut pos_t1 = Vec::new();
    for p in sample_boxes(&static_boxes, cfg.n_background, &mut rng) {
        pos_t1.push(jitter(ego.apply_point(&p), &mut rng));
    }
    for m in &movers {
        for _ in 0..cfg.points_per_mover {
            let p = m.bounds.sample_surface(&mut rng);
            pos_t1.push(jitter(ego.apply_point(&p) + m.velocity * cfg.dt, &mut rng));
        }
    }

    let cloud_t = PointCloud { positions: pos_t, gt_flow: Some(gt), foreground_mask: Some(fg), ground_mask: None };
    let pair = FramePair { cloud_t, cloud_t1: PointCloud::new(pos_t1), ego };
    Ok(GeneratedScene { pair, static_boxes, movers, mover_of_point })
}

pub fn generate_frame_pair(cfg: &SceneConfig, seed: u64) -> Result<FramePair> {
    generate_scene(cfg, seed).map(|s| s.pair)
}

/// Seed of pair `index` in a dataset generated from `base`.
pub fn pair_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` pairs seeded from `cfg.seed`.
pub fn generate_dataset(cfg: &SceneConfig, count: usize) -> Result<Vec<FramePair>> {
    (0..count).map(|i| generate_frame_pair(cfg, pair_seed(cfg.seed, i))).collect()
}

/// Histogram of ego-compensated ground-truth displacement over dynamic points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionHistogram {
    pub edges: Vec<f64>,
    /// `counts[i]` covers `[edges[i], edges[i+1])`.
    pub counts: Vec<u64>,
    /// Dynamic points below the first edge.
    pub underflow: u64,
    /// Dynamic points at or above the last edge.
    pub overflow: u64,
}

impl MotionHistogram {
    /// Every dynamic point, including under- and overflow.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// Share of dynamic points with displacement strictly below `limit`,
    /// counted per bin. `limit` must be an edge.
    pub fn fraction_below(&self, limit: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let below: u64 = self.underflow + self.edges.windows(2).zip(&self.counts).filter(|(e, _)| e[1] <= limit).map(|(_, &c)| c).sum::<u64>();
        below as f64 / total as f64
    }
}

pub fn motion_histogram(pairs: &[FramePair], edges: &[f64]) -> Result<MotionHistogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(validation("histogram edges must be at least two strictly increasing values"));
    }
    let threshold = MetricConfig::default().dynamic_threshold;
    let mut h = MotionHistogram { edges: edges.to_vec(), counts: vec![0; edges.len() - 1], underflow: 0, overflow: 0 };
    for pair in pairs {
        for d in pair.gt_residual()? {
            let d = d.norm();
            if d <= threshold {
                continue;
            }
            if d < edges[0] {
                h.underflow += 1;
            } else if d >= edges[edges.len() - 1] {
                h.overflow += 1;
            } else {
                let bin = edges.partition_point(|&e| e <= d) - 1;
                h.counts[bin] += 1;
            }
        }
    }
    Ok(h)
}
