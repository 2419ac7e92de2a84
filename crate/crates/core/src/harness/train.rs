use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OptimizerConfig, Precision, RunConfig};
use crate::autodiff::{Real, Tape};
use crate::dataio::load_dataset;
use crate::error::{validation, Error, Result};
use crate::geometry::{ego_flow, Vec3};
use crate::losses::{point_weights, LossConfig, ResidualTargets};
use crate::metrics::{aggregate, evaluate_frame, render_key_values, EvalReport, MetricConfig};
use crate::network::{load_checkpoint, prepare_frame, save_checkpoint, Checkpoint, Network, NetworkConfig, ParamSet, PreparedFrame};
use crate::synthdata::FramePair;

pub const CHECKPOINT_FILE: &str = "checkpoint.sfck";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.toml";

/// A frame pair voxelized once, with its supervision.
#[derive(Debug, Clone)]
pub struct PreparedPair<F> {
    pub t: PreparedFrame<F>,
    pub t1: PreparedFrame<F>,
    /// Ground-truth residual of the valid points, flattened `N_valid × 3`.
    pub target: Vec<F>,
    /// Loss weight of each valid point.
    pub weights: Vec<F>,
}

pub fn prepare_pair<F: Real>(pair: &FramePair, net: &NetworkConfig, loss: &LossConfig) -> Result<PreparedPair<F>> {
    let t = prepare_frame::<F>(&pair.cloud_t, &net.grid)?;
    let t1 = prepare_frame::<F>(&pair.cloud_t1, &net.grid)?;
    let residual = pair.gt_residual()?;
    let delta: Vec<Vec3> = t.valid.iter().map(|&i| residual[i]).collect();
    let fg: Vec<bool> = t.valid.iter().map(|&i| pair.cloud_t.is_foreground(i)).collect();
    let targets = ResidualTargets::new(delta, fg, loss.dt)?;
    let weights = point_weights(loss, &targets)?.into_iter().map(F::of).collect();
    let target = targets.delta_gt.iter().flat_map(|v| [v.x, v.y, v.z]).map(F::of).collect();
    Ok(PreparedPair { t, t1, target, weights })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: OptimizerConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet<F>) -> Self {
        let zeros: Vec<Vec<F>> = params.iter().map(|(_, _, v)| vec![F::zero(); v.len()]).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &[Vec<F>]) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = F::of(1.0 / (1.0 - b1.powi(t)));
        let c2 = F::of(1.0 / (1.0 - b2.powi(t)));
        let (b1, b2, lr, eps) = (F::of(b1), F::of(b2), F::of(self.cfg.lr), F::of(self.cfg.eps));
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            for (j, &g) in grads[k].iter().enumerate() {
                let m = b1 * self.m[k][j] + (F::one() - b1) * g;
                let v = b2 * self.v[k][j] + (F::one() - b2) * g * g;
                self.m[k][j] = m;
                self.v[k][j] = v;
                p[j] = p[j] - lr * (m * c1) / ((v * c2).sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub steps: usize,
    pub log: Vec<LogRecord>,
    /// Evaluation on the training pairs after the last step.
    pub report: EvalReport,
    pub checkpoint: Option<PathBuf>,
}

/// Mean loss and gradient over `batch`.
fn batch_gradient<F: Real>(net: &Network<F>, batch: &[&PreparedPair<F>]) -> Result<(f64, Vec<Vec<F>>)> {
    let mut grads: Vec<Vec<F>> = net.params.iter().map(|(_, _, v)| vec![F::zero(); v.len()]).collect();
    let mut loss = 0.0;
    let scale = F::of(1.0 / batch.len() as f64);
    for pp in batch {
        if pp.t.num_valid() == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let b = net.params.bind(&mut tape, true);
        let out = net.forward(&mut tape, &b, &pp.t, &pp.t1)?;
        let l = tape.weighted_norm(out, &pp.target, &pp.weights);
        loss += tape.scalar(l).f64();
        let g = tape.backward(l);
        for (k, id) in net.params.ids().enumerate() {
            if let Some(gv) = g.get(b.var(id)) {
                for (acc, &x) in grads[k].iter_mut().zip(gv) {
                    *acc += x * scale;
                }
            }
        }
    }
    Ok((loss / batch.len() as f64, grads))
}

struct Sink {
    dir: Option<PathBuf>,
    log: Option<std::fs::File>,
    config_toml: String,
}

impl Sink {
    fn new(dir: Option<&Path>, cfg: &RunConfig) -> Result<Self> {
        let config_toml = cfg.to_toml();
        let Some(dir) = dir else {
            return Ok(Self { dir: None, log: None, config_toml });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join(LOG_FILE);
        let log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let cfg_path = dir.join("config.toml");
        std::fs::write(&cfg_path, &config_toml).map_err(|e| Error::io(&cfg_path, e))?;
        Ok(Self { dir: Some(dir.to_path_buf()), log: Some(log), config_toml })
    }

    fn record(&mut self, r: &LogRecord) -> Result<()> {
        if let (Some(f), Some(dir)) = (&mut self.log, &self.dir) {
            let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
        }
        Ok(())
    }

    fn checkpoint<F: Real>(&self, params: &ParamSet<F>) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&path, &Checkpoint::from_params(self.config_toml.clone(), &params.cast::<f32>()))?;
        Ok(Some(path))
    }
}

/// Train on in-memory pairs. When `out_dir` is given, the config, the JSON
/// lines log, checkpoints and the final report are written there.
pub fn train_pairs(cfg: &RunConfig, pairs: &[FramePair], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(validation("training needs at least one frame pair"));
    }
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(cfg, pairs, out_dir),
        Precision::F64 => train_impl::<f64>(cfg, pairs, out_dir),
    }
}

fn train_impl<F: Real>(cfg: &RunConfig, pairs: &[FramePair], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let prepared: Vec<PreparedPair<F>> = pairs.iter().map(|p| prepare_pair(p, &cfg.network, &cfg.loss)).collect::<Result<_>>()?;
    let mut net = Network::<F>::new(cfg.network.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.optimizer, &net.params);
    let mut sink = Sink::new(out_dir, cfg)?;
    let mut checkpoint = sink.checkpoint(&net.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_DA7A);
    let start = Instant::now();
    let tc = &cfg.train;
    let per_epoch = prepared.len().div_ceil(tc.batch_size);
    let total = (tc.epochs * per_epoch).min(tc.max_steps.unwrap_or(usize::MAX));
    let mut log = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    'epochs: for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let batch: Vec<&PreparedPair<F>> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (loss, grads) = match batch_gradient(&net, &batch) {
                Ok(v) => v,
                Err(Error::Numeric { message, .. }) => {
                    sink.checkpoint(&net.params)?;
                    return Err(Error::Numeric { iteration: step, message });
                }
                Err(e) => return Err(e),
            };
            let grads_finite = grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !loss.is_finite() || !grads_finite {
                sink.checkpoint(&net.params)?;
                return Err(Error::Numeric { iteration: step, message: format!("non-finite loss or gradient (loss = {loss})") });
            }
            adam.update(&mut net.params, &grads);
            step += 1;

            let mut record = LogRecord {
                step,
                epoch,
                loss,
                wall_time_s: (!cfg.deterministic).then(|| start.elapsed().as_secs_f64()),
                eval: None,
            };
            let mut stop = false;
            if tc.eval_every > 0 && step % tc.eval_every == 0 {
                let report = evaluate_prepared(&net, pairs, &prepared, &cfg.metrics)?.0;
                stop = tc.early_stop_epe.is_some_and(|limit| report.epe_mean < limit);
                record.eval = Some(report);
            }
            sink.record(&record)?;
            log.push(record);
            if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 {
                checkpoint = sink.checkpoint(&net.params)?;
            }
            if stop {
                break 'epochs;
            }
        }
    }

    checkpoint = sink.checkpoint(&net.params)?.or(checkpoint);
    let report = evaluate_prepared(&net, pairs, &prepared, &cfg.metrics)?.0;
    if let Some(dir) = &sink.dir {
        let path = dir.join(REPORT_FILE);
        std::fs::write(&path, render_key_values(&report)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { network: net.cast(), steps: step, log, report, checkpoint })
}

/// Train on the `*.sfpr` files of `dataset_dir` (optionally one manifest split).
pub fn train(cfg: &RunConfig, dataset_dir: &Path, split: Option<&str>, out_dir: &Path) -> Result<TrainOutcome> {
    let pairs = load_dataset(dataset_dir, split)?;
    train_pairs(cfg, &pairs, Some(out_dir))
}

fn evaluate_prepared<F: Real>(
    net: &Network<F>,
    pairs: &[FramePair],
    prepared: &[PreparedPair<F>],
    metrics: &MetricConfig,
) -> Result<(EvalReport, Vec<EvalReport>)> {
    let mut reports = Vec::with_capacity(pairs.len());
    for (pair, pp) in pairs.iter().zip(prepared) {
        let rows = if pp.t.num_valid() > 0 { net.predict_residual(&pp.t, &pp.t1)? } else { Vec::new() };
        let n = pair.cloud_t.len();
        let mut residual = vec![Vec3::zeros(); n];
        for (k, &i) in pp.t.valid.iter().enumerate() {
            residual[i] = rows[k];
        }
        let ego = ego_flow(&pair.ego, &pair.cloud_t.positions);
        let pred: Vec<Vec3> = ego.iter().zip(&residual).map(|(e, r)| e + r).collect();
        let gt = pair.cloud_t.gt_flow.as_ref().ok_or_else(|| validation("evaluation needs gt_flow"))?;
        let fg: Vec<bool> = (0..n).map(|i| pair.cloud_t.is_foreground(i)).collect();
        reports.push(evaluate_frame(&pred, gt, &ego, &fg, Some(&pp.t.assignment.valid_mask), metrics));
    }
    Ok((aggregate(&reports), reports))
}

/// Aggregate and per-pair reports of `net` on `pairs`.
pub fn evaluate_pairs(net: &Network<f32>, pairs: &[FramePair], metrics: &MetricConfig) -> Result<(EvalReport, Vec<EvalReport>)> {
    let loss = LossConfig::default();
    let prepared: Vec<PreparedPair<f32>> = pairs.iter().map(|p| prepare_pair(p, net.config(), &loss)).collect::<Result<_>>()?;
    evaluate_prepared(net, pairs, &prepared, metrics)
}

/// Mean report of `net` over `pairs`.
pub fn evaluate_network(net: &Network<f32>, pairs: &[FramePair], metrics: &MetricConfig) -> Result<EvalReport> {
    evaluate_pairs(net, pairs, metrics).map(|r| r.0)
}

/// Network and run configuration stored in a checkpoint.
pub fn load_network(path: &Path) -> Result<(RunConfig, Network<f32>)> {
    let ck = load_checkpoint(path)?;
    let cfg = RunConfig::from_toml(&ck.config_toml)?;
    let mut net = Network::<f32>::new(cfg.network.clone(), cfg.seed)?;
    net.params.load_from(&ck.arrays).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((cfg, net))
}

/// Evaluate a checkpoint on a dataset directory.
pub fn evaluate(checkpoint: &Path, dataset_dir: &Path, split: Option<&str>) -> Result<EvalReport> {
    let (cfg, net) = load_network(checkpoint)?;
    let pairs = load_dataset(dataset_dir, split)?;
    if pairs.is_empty() {
        return Err(validation(format!("{} contains no frame pairs", dataset_dir.display())));
    }
    evaluate_network(&net, &pairs, &cfg.metrics)
}
