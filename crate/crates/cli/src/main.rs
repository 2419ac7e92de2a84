use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use sceneflow::dataio::{load_dataset, write_dataset, write_manifest, Manifest};
use sceneflow::harness::{
    bench_voxelizer, evaluate, load_network, render_bev_flow, render_histogram, train, RunConfig, CHECKPOINT_FILE,
};
use sceneflow::metrics::{render_key_values, render_table};
use sceneflow::network::model_forward;
use sceneflow::synthdata::{generate_dataset, motion_histogram};
use sceneflow::geometry::{ego_flow, FlowEstimate};
use sceneflow::Error;

#[derive(Parser)]
#[command(name = "sceneflow", version, about = "Pillar-based LiDAR scene flow: data, training, evaluation, plots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given (desk or paper).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override a config value, e.g. `--set optimizer.lr=5e-4`. `--optimizer.lr 5e-4` is equivalent.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit wall-clock data from logs so runs are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of frame pairs.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Extra pairs listed under a `val` split in the manifest.
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Also write the report as `key = value` lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time the voxelizer on random points.
    Bench {
        #[arg(long, default_value_t = 100_000)]
        points: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a bird's-eye view of one pair colored by flow.
    PlotFlow {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Color by this model's prediction instead of the ground truth.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Histogram of per-frame motion of dynamic points.
    PlotHist {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        bin: f64,
        #[arg(long, default_value_t = 1.0)]
        max: f64,
    },
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_toml(&text)?
            }
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::desk(),
        };
        let mut pairs = Vec::new();
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Config(format!("override {o:?} is not KEY=VALUE")).into());
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = self.seed {
            pairs.push(("seed".into(), seed.to_string()));
            pairs.push(("scene.seed".into(), seed.to_string()));
        }
        let mut cfg = base.with_overrides(&pairs)?;
        cfg.deterministic |= self.deterministic;
        Ok(cfg)
    }
}

/// Rewrite `--a.b value` and `--a.b=value` into `--set a.b=value`.
fn expand_dotted(args: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.'))) {
            Some(kv) if kv.contains('=') => out.extend(["--set".to_string(), kv.to_string()]),
            Some(k) => {
                let v = it.next().unwrap_or_default();
                out.extend(["--set".to_string(), format!("{k}={v}")]);
            }
            None => out.push(a),
        }
    }
    out
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { out, count, val, cfg } => {
            let cfg = cfg.resolve()?;
            if count == 0 {
                bail!(Error::Validation("--count must be at least 1".into()));
            }
            let pairs = generate_dataset(&cfg.scene, count + val)?;
            let quantized: Vec<_> = pairs.iter().map(|p| p.quantized()).collect();
            let files = write_dataset(&out, &quantized)?;
            let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
            let mut manifest = Manifest::default();
            manifest.splits.insert("train".into(), names[..count].to_vec());
            if val > 0 {
                manifest.splits.insert("val".into(), names[count..].to_vec());
            }
            write_manifest(&out, &manifest)?;
            println!("wrote {} frame pairs to {}", names.len(), out.display());
        }
        Command::Train { data, out, split, cfg } => {
            let cfg = cfg.resolve()?;
            info!("training {:?} decoder on {}", cfg.network.decoder, data.display());
            let outcome = train(&cfg, &data, split.as_deref(), &out)?;
            println!("steps: {}", outcome.steps);
            print!("{}", render_table(&outcome.report));
            println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { checkpoint, data, split, report } => {
            let r = evaluate(&checkpoint, &data, split.as_deref())?;
            print!("{}", render_table(&r));
            if let Some(path) = report {
                std::fs::write(&path, render_key_values(&r)).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Bench { points, repeats, cfg } => {
            let cfg = cfg.resolve()?;
            let r = bench_voxelizer(points, &cfg.network.grid, repeats, cfg.seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::PlotFlow { data, index, checkpoint, out, cfg } => {
            let cfg = cfg.resolve()?;
            let pairs = load_dataset(&data, None)?;
            let Some(pair) = pairs.get(index) else {
                bail!(Error::Validation(format!("index {index} out of range for {} pairs", pairs.len())));
            };
            let flow = match checkpoint {
                Some(ck) => {
                    let (_, net) = load_network(&ck)?;
                    model_forward(&net, &pair.cloud_t, &pair.cloud_t1, &pair.ego)?
                }
                None => ground_truth_flow(pair)?,
            };
            render_bev_flow(pair, &flow, &cfg.render, &out)?;
            println!("wrote {}", out.display());
        }
        Command::PlotHist { data, out, bin, max } => {
            if !(bin > 0.0 && max > bin) {
                bail!(Error::Validation("need 0 < --bin < --max".into()));
            }
            let pairs = load_dataset(&data, None)?;
            let n = (max / bin).round() as usize;
            let edges: Vec<f64> = (0..=n).map(|i| i as f64 * bin).collect();
            let hist = motion_histogram(&pairs, &edges)?;
            render_histogram(&hist, 640, 360, &out)?;
            println!("dynamic points: {}", hist.total());
            println!("fraction below 0.2 m: {:.4}", hist.fraction_below(0.2));
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn ground_truth_flow(pair: &sceneflow::synthdata::FramePair) -> anyhow::Result<FlowEstimate> {
    let ego = ego_flow(&pair.ego, &pair.cloud_t.positions);
    let residual = pair.gt_residual()?;
    Ok(FlowEstimate::new(ego, residual)?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = expand_dotted(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
