//! Run configuration, training and evaluation loops, benchmarks and plots.

mod bench;
mod render;
mod train;

use serde::{Deserialize, Serialize};

pub use self::bench::{bench_voxelizer, peak_memory_kib, BenchReport};
pub use self::render::{flow_color, render_bev_flow, render_bev_image, render_histogram, RenderConfig};
pub use self::train::{
    evaluate, evaluate_network, evaluate_pairs, load_network, prepare_pair, train, train_pairs, Adam, LogRecord, PreparedPair,
    TrainOutcome, CHECKPOINT_FILE, LOG_FILE, REPORT_FILE,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::MetricConfig;
use crate::network::NetworkConfig;
use crate::synthdata::SceneConfig;
use crate::voxelizer::GridConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    /// Double precision; slow, meant for numerical checks.
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Frame pairs per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Evaluate on the training pairs every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Stop once a periodic evaluation reports a mean EPE below this value.
    pub early_stop_epe: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 1, epochs: 10, max_steps: None, eval_every: 0, checkpoint_every: 0, early_stop_epe: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Omit wall-clock times from logs so repeated runs are byte-identical.
    pub deterministic: bool,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub metrics: MetricConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small grid and channels, trainable on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            deterministic: false,
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            metrics: MetricConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            render: RenderConfig::default(),
        }
    }

    /// Full-scale settings: 512×512 pillars of 0.2 m, Adam at 2e-6, batch 80,
    /// 50 epochs, four GRU iterations. Not practical without an accelerator.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.network.grid = GridConfig::centered(102.4, 0.2);
        c.network.gru_iters = 4;
        c.optimizer.lr = 2e-6;
        c.train.batch_size = 80;
        c.train.epochs = 50;
        c.scene.extent = 102.4;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.scene.validate()?;
        self.render.validate()?;
        let m = &self.metrics;
        if ![m.dynamic_threshold, m.relax_abs, m.relax_rel, m.strict_abs, m.strict_rel].iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Config("metric thresholds must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite() && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0, 1), eps > 0".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.train.early_stop_epe.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::Config("train.early_stop_epe must be positive".into()));
        }
        if (self.loss.dt - self.scene.dt).abs() > 1e-12 {
            return Err(Error::Config(format!("loss.dt ({}) and scene.dt ({}) differ", self.loss.dt, self.scene.dt)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `key = value` overrides addressed by dotted paths such as
    /// `optimizer.lr` or `network.grid.resolution`. Values are parsed as TOML
    /// literals, falling back to plain strings.
    pub fn with_overrides<K: AsRef<str>, V: AsRef<str>>(&self, overrides: &[(K, V)]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Internal(e.to_string()))?;
        for (key, value) in overrides {
            let (key, value) = (key.as_ref(), value.as_ref());
            let parsed = parse_literal(value);
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
            let mut table = &mut root;
            for p in parts {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a section")))?;
            }
            table.insert(last.to_string(), parsed);
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::DecoderKind;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = RunConfig::paper();
        p.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&p.to_toml()).unwrap(), p);
        assert_eq!(p.network.grid.height(), 512);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[optimizer]\nlearning_rate = 1.0"), Err(Error::Config(_))));
        assert!(RunConfig::default().with_overrides(&[("network.gru_iterations", "2")]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::default()
            .with_overrides(&[
                ("optimizer.lr", "2e-6"),
                ("network.decoder", "fastflow3d"),
                ("network.gru_iters", "8"),
                ("train.max_steps", "5"),
                ("loss.scheme", "speed"),
                ("metrics.dynamic_threshold", "0.1"),
                ("network.unet_channels", "[8, 16]"),
            ])
            .unwrap();
        assert_eq!(c.optimizer.lr, 2e-6);
        assert_eq!(c.network.decoder, DecoderKind::Fastflow3d);
        assert_eq!(c.network.gru_iters, 8);
        assert_eq!(c.train.max_steps, Some(5));
        assert_eq!(c.metrics.dynamic_threshold, 0.1);
        assert_eq!(c.network.unet_channels, vec![8, 16]);
        assert!(matches!(RunConfig::default().with_overrides(&[("network.decoder", "mlp")]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::default().with_overrides(&[("network.gru_iters", "0")]), Err(Error::Config(_))));
    }

    #[test]
    fn presets() {
        assert_eq!(RunConfig::preset("paper").unwrap().optimizer.lr, 2e-6);
        assert_eq!(RunConfig::preset("desk").unwrap().optimizer.lr, 1e-3);
        assert!(RunConfig::preset("gpu").is_err());
    }
}
