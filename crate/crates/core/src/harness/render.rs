use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::geometry::{FlowEstimate, Vec3};
use crate::synthdata::{FramePair, MotionHistogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Side length of the square output in pixels.
    pub image_size: u32,
    /// Flow magnitude (m per frame) that reaches full saturation.
    pub s_max: f64,
    /// Saturation ceiling in [0, 1].
    pub saturation_cap: f64,
    /// Color by the residual (ego motion removed) instead of the total flow.
    pub compensate: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { image_size: 512, s_max: 2.0, saturation_cap: 1.0, compensate: true }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size > 8192 {
            return Err(Error::Config(format!("render.image_size {} outside [8, 8192]", self.image_size)));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(Error::Config("render.s_max must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.saturation_cap) {
            return Err(Error::Config("render.saturation_cap must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Color-wheel encoding of a flow vector: hue from its heading in the xy
/// plane, saturation from its magnitude, full value.
pub fn flow_color(flow: &Vec3, cfg: &RenderConfig) -> [u8; 3] {
    let hue = flow.y.atan2(flow.x).to_degrees();
    let sat = (flow.norm() / cfg.s_max).min(1.0) * cfg.saturation_cap;
    hsv_to_rgb(hue, sat, 1.0)
}

/// Top-down scatter of `cloud_t` colored by `flow` on a black background.
/// The view is the square bounding the points.
pub fn render_bev_image(pair: &FramePair, flow: &FlowEstimate, cfg: &RenderConfig) -> Result<RgbImage> {
    cfg.validate()?;
    let pts = &pair.cloud_t.positions;
    if flow.len() != pts.len() {
        return Err(validation(format!("flow has {} rows, cloud has {} points", flow.len(), pts.len())));
    }
    let size = cfg.image_size;
    let mut img = RgbImage::new(size, size);
    if pts.is_empty() {
        return Ok(img);
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        lo = [lo[0].min(p.x), lo[1].min(p.y)];
        hi = [hi[0].max(p.x), hi[1].max(p.y)];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
    let scale = (size - 1) as f64 / span;
    let colors: Vec<Vec3> = if cfg.compensate { flow.residual.clone() } else { flow.total() };
    for (p, f) in pts.iter().zip(&colors) {
        let px = ((p.x - lo[0]) * scale).round() as u32;
        // Image rows grow downward, y grows upward.
        let py = (size - 1) - ((p.y - lo[1]) * scale).round() as u32;
        img.put_pixel(px.min(size - 1), py.min(size - 1), Rgb(flow_color(f, cfg)));
    }
    Ok(img)
}

pub fn render_bev_flow(pair: &FramePair, flow: &FlowEstimate, cfg: &RenderConfig, path: &Path) -> Result<()> {
    let img = render_bev_image(pair, flow, cfg)?;
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Bar chart of the histogram counts, one bar per bin, white on black.
pub fn render_histogram(hist: &MotionHistogram, width: u32, height: u32, path: &Path) -> Result<()> {
    if hist.counts.is_empty() || width < hist.counts.len() as u32 || height < 2 {
        return Err(validation("histogram image too small for its bins"));
    }
    let mut img = RgbImage::new(width, height);
    let peak = hist.counts.iter().copied().max().unwrap_or(0).max(1);
    let bar = width / hist.counts.len() as u32;
    for (i, &c) in hist.counts.iter().enumerate() {
        let h = ((c as f64 / peak as f64) * (height - 1) as f64).round() as u32;
        let x0 = i as u32 * bar;
        for x in x0..x0 + bar.saturating_sub(1).max(1) {
            for y in (height - h)..height {
                img.put_pixel(x, y, Rgb([230, 230, 230]));
            }
        }
    }
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ego_flow, PointCloud, RigidTransform};

    fn pair(n: usize) -> FramePair {
        let positions: Vec<Vec3> = (0..n).map(|i| Vec3::new(i as f64 * 0.37 % 5.0, (i * i) as f64 * 0.11 % 4.0, 0.0)).collect();
        let cloud = PointCloud::new(positions);
        FramePair { cloud_t: cloud.clone(), cloud_t1: cloud, ego: RigidTransform::identity() }
    }

    #[test]
    fn primary_hues() {
        let cfg = RenderConfig::default();
        assert_eq!(flow_color(&Vec3::new(2.0, 0.0, 0.0), &cfg), [255, 0, 0]);
        assert_eq!(flow_color(&Vec3::new(-5.0, 0.0, 0.0), &cfg), [0, 255, 255]);
        assert_eq!(flow_color(&Vec3::new(0.0, 2.0, 0.0), &cfg), [128, 255, 0]);
        assert_eq!(flow_color(&Vec3::zeros(), &cfg), [255, 255, 255]);
    }

    #[test]
    fn zero_flow_is_desaturated() {
        let p = pair(200);
        let n = p.cloud_t.len();
        let flow = FlowEstimate::new(vec![Vec3::zeros(); n], vec![Vec3::zeros(); n]).unwrap();
        let img = render_bev_image(&p, &flow, &RenderConfig::default()).unwrap();
        let lit: Vec<_> = img.pixels().filter(|px| px.0 != [0, 0, 0]).collect();
        assert!(!lit.is_empty());
        assert!(lit.iter().all(|px| px.0 == [255, 255, 255]));
    }

    #[test]
    fn uniform_flow_single_hue_at_cap() {
        let p = pair(200);
        let n = p.cloud_t.len();
        let cfg = RenderConfig { saturation_cap: 0.6, ..RenderConfig::default() };
        let flow = FlowEstimate::new(vec![Vec3::zeros(); n], vec![Vec3::new(1.0, 0.0, 0.0); n]).unwrap();
        let img = render_bev_image(&p, &flow, &cfg).unwrap();
        let expect = hsv_to_rgb(0.0, 0.5 * 0.6, 1.0);
        assert!(img.pixels().all(|px| px.0 == [0, 0, 0] || px.0 == expect));
        let cfg = RenderConfig { s_max: 1.0, ..cfg };
        let img = render_bev_image(&p, &flow, &cfg).unwrap();
        let expect = hsv_to_rgb(0.0, 0.6, 1.0);
        assert!(img.pixels().all(|px| px.0 == [0, 0, 0] || px.0 == expect));
    }

    #[test]
    fn compensation_switch() {
        let mut p = pair(50);
        p.ego = RigidTransform::from_translation(Vec3::new(0.0, 3.0, 0.0));
        let ego = ego_flow(&p.ego, &p.cloud_t.positions);
        let flow = FlowEstimate::new(ego, vec![Vec3::zeros(); 50]).unwrap();
        let white = render_bev_image(&p, &flow, &RenderConfig::default()).unwrap();
        assert!(white.pixels().all(|px| px.0 == [0, 0, 0] || px.0 == [255, 255, 255]));
        let raw = render_bev_image(&p, &flow, &RenderConfig { compensate: false, ..RenderConfig::default() }).unwrap();
        assert!(raw.pixels().any(|px| px.0 == [128, 255, 0]));
    }

    #[test]
    fn length_mismatch_rejected() {
        let p = pair(10);
        let flow = FlowEstimate::new(vec![Vec3::zeros(); 3], vec![Vec3::zeros(); 3]).unwrap();
        assert!(render_bev_image(&p, &flow, &RenderConfig::default()).unwrap_err().is_validation());
    }
}
