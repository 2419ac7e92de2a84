//! The learnable pipeline: pillar encoder, shared-weight U-Net backbone and
//! three interchangeable point decoders.
//!
//! ```text
//!  P_t ──► pillar encoder ──► pseudo-image ──┐             ┌─► gather ─┐
//!                                            ├─► U-Net ────┘           ├─► M (N×C) ──► decoder ──► ΔF
//!  P_t+1 ─► pillar encoder ──► pseudo-image ─┘   pseudo-image_t gather ┘        ▲
//!                                                                   point offsets
//! ```
//!
//! Decoders:
//! * `deflow`: `M` is the initial GRU hidden state; the expanded point
//!   offsets are the (constant) GRU input; after `gru_iters` steps the hidden
//!   state is concatenated with the raw offsets and fed to an MLP head.
//! * `fastflow3d`: MLP head on `[M, offsets]`.
//! * `no_gru`: MLP head on `[M, expand(offsets)]`.
//!
//! Everything is generic over [`Real`] so the same graph runs in `f32` for
//! training and `f64` for finite-difference checks.

mod checkpoint;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use self::params::{kaiming_uniform, Bound, ParamId, ParamSet};
use crate::autodiff::{ConvGeom, Mat, Real, Tape, Var};
use crate::error::{validation, Error, Result};
use crate::geometry::{ego_flow, FlowEstimate, PointCloud, RigidTransform, Vec3};
use crate::voxelizer::{
    assign_pillars, compute_point_features, GridConfig, PillarAssignment, PseudoImage, POINT_FEATURE_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Deflow,
    Fastflow3d,
    NoGru,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deflow" => Ok(Self::Deflow),
            "fastflow3d" => Ok(Self::Fastflow3d),
            "no_gru" => Ok(Self::NoGru),
            other => Err(Error::Config(format!("unknown decoder variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub grid: GridConfig,
    /// Pillar embedding width `C_enc`.
    pub encoder_channels: usize,
    /// Channels per U-Net level, finest first. Output width is the first entry.
    pub unet_channels: Vec<usize>,
    pub kernel: usize,
    pub decoder: DecoderKind,
    pub gru_iters: usize,
    pub head_hidden: usize,
    pub leaky_slope: f64,
    /// Initial bias of the GRU update gate.
    pub update_gate_bias: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::square(64, 0.2),
            encoder_channels: 32,
            unet_channels: vec![32, 64, 128],
            kernel: 3,
            decoder: DecoderKind::Deflow,
            gru_iters: 4,
            head_hidden: 32,
            leaky_slope: 0.1,
            update_gate_bias: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        if self.encoder_channels == 0 || self.head_hidden == 0 {
            return cfg("channel counts must be positive".into());
        }
        if self.unet_channels.is_empty() || self.unet_channels.contains(&0) {
            return cfg(format!("unet_channels {:?} must be non-empty and positive", self.unet_channels));
        }
        if self.kernel % 2 == 0 {
            return cfg(format!("kernel size {} must be odd", self.kernel));
        }
        if self.gru_iters == 0 {
            return cfg("gru_iters must be at least 1".into());
        }
        if !(self.leaky_slope.is_finite() && self.update_gate_bias.is_finite()) {
            return cfg("leaky_slope and update_gate_bias must be finite".into());
        }
        Ok(())
    }

    /// Width of the U-Net output, `C_u`.
    pub fn unet_out_channels(&self) -> usize {
        self.unet_channels[0]
    }

    /// Width of the hidden state `M`, `C = C_u + C_enc`.
    pub fn hidden_channels(&self) -> usize {
        self.unet_out_channels() + self.encoder_channels
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, out: usize, slope: f64) -> Self {
        let weight = ps.add(format!("{name}.weight"), vec![fan_in, out], kaiming_uniform(rng, fan_in, fan_in * out, slope));
        let bias = ps.add(format!("{name}.bias"), vec![out], vec![F::zero(); out]);
        Self { weight, bias }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, b: &Bound, x: Var) -> Var {
        tape.linear(x, b.var(self.weight), Some(b.var(self.bias)))
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    in_c: usize,
    out_c: usize,
    kernel: usize,
}

impl Conv {
    fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str, in_c: usize, out_c: usize, kernel: usize, slope: f64) -> Self {
        let fan_in = kernel * kernel * in_c;
        let weight = ps.add(
            format!("{name}.weight"),
            vec![kernel, kernel, in_c, out_c],
            kaiming_uniform(rng, fan_in, fan_in * out_c, slope),
        );
        let bias = ps.add(format!("{name}.bias"), vec![out_c], vec![F::zero(); out_c]);
        Self { weight, bias, in_c, out_c, kernel }
    }

    fn apply<F: Real>(&self, tape: &mut Tape<F>, b: &Bound, x: Var, h: usize, w: usize, stride: usize) -> (Var, usize, usize) {
        let geom = ConvGeom::new(h, w, self.in_c, self.out_c, self.kernel, stride);
        (tape.conv2d(x, b.var(self.weight), b.var(self.bias), geom), geom.out_h, geom.out_w)
    }
}

/// Two-layer MLP producing a 3-vector per point.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, hidden: usize, slope: f64) -> Self {
        Self {
            hidden: Linear::new(ps, rng, &format!("{name}.hidden"), fan_in, hidden, slope),
            out: Linear::new(ps, rng, &format!("{name}.out"), hidden, 3, slope),
        }
    }

    fn apply<F: Real>(&self, tape: &mut Tape<F>, b: &Bound, x: Var, slope: F) -> Var {
        let h = self.hidden.apply(tape, b, x);
        let h = tape.leaky_relu(h, slope);
        self.out.apply(tape, b, h)
    }
}

/// GRU parameters. Each gate is a kernel-size-1 convolution over the point
/// axis, i.e. a per-point linear map of `[H, x]`.
#[derive(Debug, Clone, Copy)]
pub struct GruLayers {
    /// Point offsets (3) → hidden width.
    pub expand: Linear,
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
}

#[derive(Debug, Clone, Copy)]
enum DecoderLayers {
    Deflow { gru: GruLayers, head: Head },
    Fastflow3d { head: Head },
    NoGru { expand: Linear, head: Head },
}

#[derive(Debug, Clone)]
struct Layers {
    encoder: Linear,
    down: Vec<(Conv, Conv)>,
    up: Vec<Conv>,
    decoder: DecoderLayers,
}

/// Intermediate values of one GRU update, for inspection.
#[derive(Debug, Clone, Copy)]
pub struct GruStep {
    pub hidden: Var,
    pub update_gate: Var,
    pub reset_gate: Var,
    pub candidate: Var,
}

/// Tape values produced by encoding one frame.
#[derive(Debug, Clone, Copy)]
pub struct EncodedFrame {
    /// Per-point linear embeddings, `N_valid × C_enc`.
    pub embeddings: Var,
    /// Max-pooled pseudo-image, `(H·W) × C_enc`.
    pub image: Var,
    /// Pseudo-image row of each point's pillar, `N_valid × C_enc`.
    pub pillar_features: Var,
}

/// A frame voxelized and featurized once, reusable across training steps.
#[derive(Debug, Clone)]
pub struct PreparedFrame<F> {
    pub assignment: PillarAssignment,
    /// Input indices of the valid points, ascending.
    pub valid: Vec<usize>,
    /// Cell of each valid point.
    pub cells: Vec<usize>,
    /// `N_valid × 8` raw point features.
    pub features: Mat<F>,
    /// `N_valid × 3` offsets from the pillar center (z from the crop midpoint).
    pub offsets: Mat<F>,
}

impl<F: Real> PreparedFrame<F> {
    pub fn num_valid(&self) -> usize {
        self.valid.len()
    }
}

/// Voxelize `cloud`, dropping ground points (they are marked invalid).
pub fn prepare_frame<F: Real>(cloud: &PointCloud, grid: &GridConfig) -> Result<PreparedFrame<F>> {
    cloud.validate()?;
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| !cloud.is_ground(i)).collect();
    let kept: Vec<Vec3> = keep.iter().map(|&i| cloud.positions[i]).collect();
    let sub = assign_pillars(&kept, grid)?;

    let n = cloud.len();
    let mut assignment = PillarAssignment {
        pillar_index: vec![-1; n],
        center_offset: vec![Vec3::zeros(); n],
        cluster_offset: vec![Vec3::zeros(); n],
        valid_mask: vec![false; n],
        height: sub.height,
        width: sub.width,
    };
    for (k, &i) in keep.iter().enumerate() {
        assignment.pillar_index[i] = sub.pillar_index[k];
        assignment.center_offset[i] = sub.center_offset[k];
        assignment.cluster_offset[i] = sub.cluster_offset[k];
        assignment.valid_mask[i] = sub.valid_mask[k];
    }

    let features = compute_point_features(&cloud.positions, &assignment)?;
    let valid = assignment.valid_indices();
    let cells = assignment.valid_cells();
    let mut feat = Vec::with_capacity(valid.len() * POINT_FEATURE_DIM);
    let mut offsets = Vec::with_capacity(valid.len() * 3);
    for &i in &valid {
        feat.extend(features.row(i).iter().map(|&v| F::of(v)));
        offsets.extend(assignment.center_offset[i].iter().map(|&v| F::of(v)));
    }
    Ok(PreparedFrame {
        features: Mat::new(valid.len(), POINT_FEATURE_DIM, feat),
        offsets: Mat::new(valid.len(), 3, offsets),
        assignment,
        valid,
        cells,
    })
}

/// Network weights plus the fixed layer wiring.
#[derive(Debug, Clone)]
pub struct Network<F: Real> {
    config: NetworkConfig,
    pub params: ParamSet<F>,
    layers: Layers,
}

impl<F: Real> Network<F> {
    /// Fresh network with Kaiming-uniform weights, zero biases and the update
    /// gate bias set to `config.update_gate_bias`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let slope = config.leaky_slope;
        let k = config.kernel;
        let ch = &config.unet_channels;
        let c_enc = config.encoder_channels;

        let encoder = Linear::new(&mut ps, &mut rng, "pillar_encoder", POINT_FEATURE_DIM, c_enc, slope);
        let mut down = Vec::new();
        let mut prev = c_enc;
        for (l, &c) in ch.iter().enumerate() {
            let a = Conv::new(&mut ps, &mut rng, &format!("unet.down{l}.conv_a"), prev, c, k, slope);
            let b = Conv::new(&mut ps, &mut rng, &format!("unet.down{l}.conv_b"), c, c, k, slope);
            down.push((a, b));
            prev = c;
        }
        let levels = ch.len();
        let mut up = Vec::new();
        for l in 0..levels {
            let in_c = if l == levels - 1 { 2 * ch[l] } else { ch[l + 1] + 2 * ch[l] };
            up.push(Conv::new(&mut ps, &mut rng, &format!("unet.up{l}.fuse"), in_c, ch[l], k, slope));
        }

        let c = config.hidden_channels();
        let hh = config.head_hidden;
        let decoder = match config.decoder {
            DecoderKind::Deflow => {
                let expand = Linear::new(&mut ps, &mut rng, "gru.expand", 3, c, slope);
                let update = Linear::new(&mut ps, &mut rng, "gru.update", 2 * c, c, slope);
                let reset = Linear::new(&mut ps, &mut rng, "gru.reset", 2 * c, c, slope);
                let candidate = Linear::new(&mut ps, &mut rng, "gru.candidate", 2 * c, c, slope);
                ps.get_mut(update.bias).iter_mut().for_each(|v| *v = F::of(config.update_gate_bias));
                let head = Head::new(&mut ps, &mut rng, "head", c + 3, hh, slope);
                DecoderLayers::Deflow { gru: GruLayers { expand, update, reset, candidate }, head }
            }
            DecoderKind::Fastflow3d => DecoderLayers::Fastflow3d { head: Head::new(&mut ps, &mut rng, "head", c + 3, hh, slope) },
            DecoderKind::NoGru => {
                let expand = Linear::new(&mut ps, &mut rng, "offset_expand", 3, c, slope);
                DecoderLayers::NoGru { expand, head: Head::new(&mut ps, &mut rng, "head", 2 * c, hh, slope) }
            }
        };

        Ok(Self { config, params: ps, layers: Layers { encoder, down, up, decoder } })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Same wiring with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> Network<G> {
        Network { config: self.config.clone(), params: self.params.cast(), layers: self.layers.clone() }
    }

    pub fn gru_layers(&self) -> Option<GruLayers> {
        match self.layers.decoder {
            DecoderLayers::Deflow { gru, .. } => Some(gru),
            _ => None,
        }
    }

    pub fn encoder_layer(&self) -> Linear {
        self.layers.encoder
    }

    pub fn head(&self) -> Head {
        match self.layers.decoder {
            DecoderLayers::Deflow { head, .. } | DecoderLayers::Fastflow3d { head } | DecoderLayers::NoGru { head, .. } => head,
        }
    }

    /// Offset expansion layer of the `no_gru` decoder.
    pub fn offset_expand_layer(&self) -> Option<Linear> {
        match self.layers.decoder {
            DecoderLayers::NoGru { expand, .. } => Some(expand),
            _ => None,
        }
    }

    fn slope(&self) -> F {
        F::of(self.config.leaky_slope)
    }

    pub fn encode(&self, tape: &mut Tape<F>, b: &Bound, frame: &PreparedFrame<F>) -> EncodedFrame {
        let x = tape.constant(frame.features.clone());
        let embeddings = self.layers.encoder.apply(tape, b, x);
        let image = tape.scatter_max(embeddings, &frame.cells, frame.assignment.num_cells());
        let pillar_features = tape.gather(image, &frame.cells);
        EncodedFrame { embeddings, image, pillar_features }
    }

    fn unet_down(&self, tape: &mut Tape<F>, b: &Bound, img: Var) -> Vec<(Var, usize, usize)> {
        let slope = self.slope();
        let (mut h, mut w) = (self.config.grid.height(), self.config.grid.width());
        let mut x = img;
        let mut feats = Vec::new();
        for (l, (ca, cb)) in self.layers.down.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            let (y, oh, ow) = ca.apply(tape, b, x, h, w, stride);
            let y = tape.leaky_relu(y, slope);
            let (y, _, _) = cb.apply(tape, b, y, oh, ow, 1);
            x = tape.leaky_relu(y, slope);
            h = oh;
            w = ow;
            feats.push((x, h, w));
        }
        feats
    }

    /// Shared-weight U-Net over both pseudo-images. Each frame runs through
    /// the same downsampling path; their features are concatenated at every
    /// upsampling level. Returns an `(H·W) × C_u` grid.
    pub fn backbone(&self, tape: &mut Tape<F>, b: &Bound, img_t: Var, img_t1: Var) -> Var {
        let slope = self.slope();
        let ft = self.unet_down(tape, b, img_t);
        let ft1 = self.unet_down(tape, b, img_t1);
        let levels = ft.len();
        let (_, h, w) = ft[levels - 1];
        let cat = tape.concat(&[ft[levels - 1].0, ft1[levels - 1].0]);
        let (d, _, _) = self.layers.up[levels - 1].apply(tape, b, cat, h, w, 1);
        let mut d = tape.leaky_relu(d, slope);
        let (mut dh, mut dw) = (h, w);
        for l in (0..levels - 1).rev() {
            let (_, h, w) = ft[l];
            let u = tape.upsample(d, dh, dw, h, w);
            let cat = tape.concat(&[u, ft[l].0, ft1[l].0]);
            let (y, _, _) = self.layers.up[l].apply(tape, b, cat, h, w, 1);
            d = tape.leaky_relu(y, slope);
            dh = h;
            dw = w;
        }
        d
    }

    /// `M = [gather(U-Net features), pillar features of frame t]`.
    pub fn hidden_state(&self, tape: &mut Tape<F>, unet: Var, pillar_features_t: Var, cells: &[usize]) -> Var {
        let g = tape.gather(unet, cells);
        tape.concat(&[g, pillar_features_t])
    }

    /// `tanh(Linear(offsets))`, the GRU input `x`.
    pub fn expand_offsets(&self, tape: &mut Tape<F>, b: &Bound, layer: Linear, offsets: Var) -> Var {
        let e = layer.apply(tape, b, offsets);
        tape.tanh(e)
    }

    /// `H_t = Z ⊙ H_{t-1} + (1 − Z) ⊙ H̃` with
    /// `Z = σ(W_z [H, x])`, `R = σ(W_r [H, x])`, `H̃ = tanh(W_h [R ⊙ H, x])`.
    pub fn gru_step(&self, tape: &mut Tape<F>, b: &Bound, gru: &GruLayers, h_prev: Var, x: Var, iteration: usize) -> Result<GruStep> {
        let hx = tape.concat(&[h_prev, x]);
        let z = gru.update.apply(tape, b, hx);
        let update_gate = tape.sigmoid(z);
        let r = gru.reset.apply(tape, b, hx);
        let reset_gate = tape.sigmoid(r);
        let rh = tape.mul(reset_gate, h_prev);
        let rhx = tape.concat(&[rh, x]);
        let c = gru.candidate.apply(tape, b, rhx);
        let candidate = tape.tanh(c);
        let keep = tape.mul(update_gate, h_prev);
        let one_minus = tape.one_minus(update_gate);
        let fresh = tape.mul(one_minus, candidate);
        let hidden = tape.add(keep, fresh);
        if !tape.value(hidden).is_finite() {
            return Err(Error::Numeric { iteration, message: "GRU hidden state is not finite".into() });
        }
        Ok(GruStep { hidden, update_gate, reset_gate, candidate })
    }

    /// Residual flow `N × 3` from the hidden state `M` and point offsets.
    pub fn decode(&self, tape: &mut Tape<F>, b: &Bound, m: Var, offsets: Var) -> Result<Var> {
        let slope = self.slope();
        match &self.layers.decoder {
            DecoderLayers::Deflow { gru, head } => {
                let x = self.expand_offsets(tape, b, gru.expand, offsets);
                let mut h = m;
                for it in 0..self.config.gru_iters {
                    h = self.gru_step(tape, b, gru, h, x, it)?.hidden;
                }
                let cat = tape.concat(&[h, offsets]);
                Ok(head.apply(tape, b, cat, slope))
            }
            DecoderLayers::Fastflow3d { head } => {
                let cat = tape.concat(&[m, offsets]);
                Ok(head.apply(tape, b, cat, slope))
            }
            DecoderLayers::NoGru { expand, head } => {
                let e = self.expand_offsets(tape, b, *expand, offsets);
                let cat = tape.concat(&[m, e]);
                Ok(head.apply(tape, b, cat, slope))
            }
        }
    }

    /// Residual flow for the valid points of frame `t`.
    pub fn forward(&self, tape: &mut Tape<F>, b: &Bound, t: &PreparedFrame<F>, t1: &PreparedFrame<F>) -> Result<Var> {
        let et = self.encode(tape, b, t);
        let et1 = self.encode(tape, b, t1);
        let unet = self.backbone(tape, b, et.image, et1.image);
        let m = self.hidden_state(tape, unet, et.pillar_features, &t.cells);
        let offsets = tape.constant(t.offsets.clone());
        self.decode(tape, b, m, offsets)
    }

    /// Inference: residual rows for the valid points of `t`.
    pub fn predict_residual(&self, t: &PreparedFrame<F>, t1: &PreparedFrame<F>) -> Result<Vec<Vec3>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &b, t, t1)?;
        let v = tape.value(out);
        Ok((0..v.rows).map(|i| Vec3::new(v.data[i * 3].f64(), v.data[i * 3 + 1].f64(), v.data[i * 3 + 2].f64())).collect())
    }
}

/// Output of [`encode_frame`].
#[derive(Debug, Clone)]
pub struct FrameEncoding {
    pub image: PseudoImage,
    pub assignment: PillarAssignment,
    /// `N × C_enc`; row `i` is the pseudo-image cell of point `i`'s pillar
    /// (zero for invalid points).
    pub pillar_features: Vec<f32>,
    /// `N × C_enc` per-point linear embeddings before pooling (zero for
    /// invalid points).
    pub embeddings: Vec<f32>,
}

fn scatter_rows(values: &Mat<f32>, valid: &[usize], n: usize) -> Vec<f32> {
    let c = values.cols;
    let mut out = vec![0.0; n * c];
    for (k, &i) in valid.iter().enumerate() {
        out[i * c..(i + 1) * c].copy_from_slice(values.row(k));
    }
    out
}

pub fn encode_frame(net: &Network<f32>, points: &PointCloud) -> Result<FrameEncoding> {
    let frame = prepare_frame::<f32>(points, &net.config.grid)?;
    let mut tape = Tape::new();
    let b = net.params.bind(&mut tape, false);
    let enc = net.encode(&mut tape, &b, &frame);
    let n = points.len();
    let img = tape.value(enc.image);
    let mut occupancy = vec![false; frame.assignment.num_cells()];
    for &c in &frame.cells {
        occupancy[c] = true;
    }
    Ok(FrameEncoding {
        image: PseudoImage {
            height: frame.assignment.height,
            width: frame.assignment.width,
            channels: img.cols,
            data: img.data.clone(),
            occupancy,
        },
        pillar_features: scatter_rows(tape.value(enc.pillar_features), &frame.valid, n),
        embeddings: scatter_rows(tape.value(enc.embeddings), &frame.valid, n),
        assignment: frame.assignment,
    })
}

/// U-Net over two pseudo-images; returns an `H×W×C_u` grid.
pub fn backbone_forward(net: &Network<f32>, img_t: &PseudoImage, img_t1: &PseudoImage) -> Result<Vec<f32>> {
    let grid = &net.config.grid;
    let expect = (grid.height(), grid.width(), net.config.encoder_channels);
    for img in [img_t, img_t1] {
        if (img.height, img.width, img.channels) != expect {
            return Err(validation(format!(
                "pseudo-image is {}×{}×{}, backbone expects {}×{}×{}",
                img.height, img.width, img.channels, expect.0, expect.1, expect.2
            )));
        }
    }
    let mut tape = Tape::new();
    let b = net.params.bind(&mut tape, false);
    let a = tape.constant(Mat::new(expect.0 * expect.1, expect.2, img_t.data.clone()));
    let c = tape.constant(Mat::new(expect.0 * expect.1, expect.2, img_t1.data.clone()));
    let out = net.backbone(&mut tape, &b, a, c);
    Ok(tape.value(out).data.clone())
}

/// Row `k` (for the `k`-th valid point) is `[unet[cell], pillar_features[i]]`.
pub fn build_hidden_state(
    unet_features: &[f32],
    unet_channels: usize,
    pillar_features_t: &[f32],
    encoder_channels: usize,
    assignment: &PillarAssignment,
) -> Result<Mat<f32>> {
    if unet_features.len() != assignment.num_cells() * unet_channels {
        return Err(validation("U-Net feature grid does not match the assignment grid"));
    }
    if pillar_features_t.len() != assignment.len() * encoder_channels {
        return Err(validation("pillar feature rows do not match the point count"));
    }
    let c = unet_channels + encoder_channels;
    let valid = assignment.valid_indices();
    let mut data = Vec::with_capacity(valid.len() * c);
    for &i in &valid {
        let cell = assignment.pillar_index[i] as usize;
        data.extend_from_slice(&unet_features[cell * unet_channels..(cell + 1) * unet_channels]);
        data.extend_from_slice(&pillar_features_t[i * encoder_channels..(i + 1) * encoder_channels]);
    }
    Ok(Mat::new(valid.len(), c, data))
}

fn rows_to_vec3<F: Real>(m: &Mat<F>) -> Vec<Vec3> {
    (0..m.rows).map(|i| Vec3::new(m.data[i * 3].f64(), m.data[i * 3 + 1].f64(), m.data[i * 3 + 2].f64())).collect()
}

fn check_decoder_inputs<F: Real>(net: &Network<F>, m: &Mat<F>, offsets: &Mat<F>) -> Result<()> {
    if m.cols != net.config.hidden_channels() || offsets.cols != 3 || offsets.rows != m.rows {
        return Err(validation(format!(
            "decoder expects M of width {} and N×3 offsets, got {}×{} and {}×{}",
            net.config.hidden_channels(),
            m.rows,
            m.cols,
            offsets.rows,
            offsets.cols
        )));
    }
    Ok(())
}

/// GRU refinement decoder on a given hidden state.
pub fn decode_deflow<F: Real>(net: &Network<F>, m: &Mat<F>, center_offsets: &Mat<F>) -> Result<Vec<Vec3>> {
    if net.config.decoder != DecoderKind::Deflow {
        return Err(Error::Config(format!("network has a {:?} decoder", net.config.decoder)));
    }
    decode_with(net, m, center_offsets)
}

/// `fastflow3d` or `no_gru` decoder on a given hidden state. `variant` must
/// match the network's decoder.
pub fn decode_baseline<F: Real>(net: &Network<F>, m: &Mat<F>, center_offsets: &Mat<F>, variant: DecoderKind) -> Result<Vec<Vec3>> {
    if variant == DecoderKind::Deflow || variant != net.config.decoder {
        return Err(Error::Config(format!("baseline variant {variant:?} does not match network decoder {:?}", net.config.decoder)));
    }
    decode_with(net, m, center_offsets)
}

fn decode_with<F: Real>(net: &Network<F>, m: &Mat<F>, offsets: &Mat<F>) -> Result<Vec<Vec3>> {
    check_decoder_inputs(net, m, offsets)?;
    let mut tape = Tape::new();
    let b = net.params.bind(&mut tape, false);
    let mv = tape.constant(m.clone());
    let ov = tape.constant(offsets.clone());
    let out = net.decode(&mut tape, &b, mv, ov)?;
    Ok(rows_to_vec3(tape.value(out)))
}

/// Full flow for every point of `p_t`: ego flow plus the decoded residual.
/// Points outside the grid (or flagged as ground) get a zero residual.
pub fn model_forward<F: Real>(net: &Network<F>, p_t: &PointCloud, p_t1: &PointCloud, ego: &RigidTransform) -> Result<FlowEstimate> {
    let grid = &net.config.grid;
    let ft = prepare_frame::<F>(p_t, grid)?;
    let ft1 = prepare_frame::<F>(p_t1, grid)?;
    let rows = net.predict_residual(&ft, &ft1)?;
    let mut residual = vec![Vec3::zeros(); p_t.len()];
    for (k, &i) in ft.valid.iter().enumerate() {
        residual[i] = rows[k];
    }
    FlowEstimate::new(ego_flow(ego, &p_t.positions), residual)
}

/// Values of one [`Network::gru_step`] evaluated outside a larger graph.
#[derive(Debug, Clone)]
pub struct GruStepValues<F> {
    pub hidden: Mat<F>,
    pub update_gate: Mat<F>,
    pub reset_gate: Mat<F>,
    pub candidate: Mat<F>,
}

/// One GRU update of `h_prev` (`N × C`) with input `x` (`N × C`).
pub fn gru_step<F: Real>(net: &Network<F>, h_prev: &Mat<F>, x: &Mat<F>) -> Result<GruStepValues<F>> {
    let gru = net.gru_layers().ok_or_else(|| Error::Config(format!("network has a {:?} decoder", net.config.decoder)))?;
    let c = net.config.hidden_channels();
    if h_prev.cols != c || x.cols != c || x.rows != h_prev.rows {
        return Err(validation(format!(
            "gru_step expects two N×{c} inputs, got {}×{} and {}×{}",
            h_prev.rows, h_prev.cols, x.rows, x.cols
        )));
    }
    let mut tape = Tape::new();
    let b = net.params.bind(&mut tape, false);
    let h = tape.constant(h_prev.clone());
    let xv = tape.constant(x.clone());
    let s = net.gru_step(&mut tape, &b, &gru, h, xv, 0)?;
    Ok(GruStepValues {
        hidden: tape.value(s.hidden).clone(),
        update_gate: tape.value(s.update_gate).clone(),
        reset_gate: tape.value(s.reset_gate).clone(),
        candidate: tape.value(s.candidate).clone(),
    })
}

/// Analytic-vs-numeric gradient agreement for one parameter array.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub analytic_norm: f64,
    /// `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖)`, zero when both vanish.
    pub rel_error: f64,
}

fn weighted_loss_values(
    net: &Network<f64>,
    t: &PreparedFrame<f64>,
    t1: &PreparedFrame<f64>,
    target: &[f64],
    weight_sets: &[&[f64]],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = net.params.bind(&mut tape, false);
    let out = net.forward(&mut tape, &b, t, t1)?;
    Ok(weight_sets.iter().map(|w| {
        let loss = tape.weighted_norm(out, target, w);
        tape.scalar(loss)
    }).collect())
}

/// Compare backpropagated gradients of `Σ w_i ‖ΔF_i − target_i‖` with
/// central differences of step `eps`, per parameter array.
pub fn gradient_check(
    net: &Network<f64>,
    t: &PreparedFrame<f64>,
    t1: &PreparedFrame<f64>,
    target: &[f64],
    weights: &[f64],
    eps: f64,
) -> Result<Vec<GradCheck>> {
    Ok(gradient_check_many(net, t, t1, target, &[weights], eps)?.remove(0))
}

/// [`gradient_check`] for several weight vectors at once. Every perturbed
/// forward pass is shared by all of them.
pub fn gradient_check_many(
    net: &Network<f64>,
    t: &PreparedFrame<f64>,
    t1: &PreparedFrame<f64>,
    target: &[f64],
    weight_sets: &[&[f64]],
    eps: f64,
) -> Result<Vec<Vec<GradCheck>>> {
    let mut analytic_sets = Vec::with_capacity(weight_sets.len());
    for w in weight_sets {
        let mut tape = Tape::new();
        let b = net.params.bind(&mut tape, true);
        let out = net.forward(&mut tape, &b, t, t1)?;
        let loss = tape.weighted_norm(out, target, w);
        let grads = tape.backward(loss);
        let per_id: Vec<Vec<f64>> = net
            .params
            .ids()
            .map(|id| match grads.get(b.var(id)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; net.params.get(id).len()],
            })
            .collect();
        analytic_sets.push(per_id);
    }

    let k_sets = weight_sets.len();
    let mut probe = net.clone();
    let mut reports = vec![Vec::new(); k_sets];
    for (j, id) in net.params.ids().enumerate() {
        let mut diff2 = vec![0.0; k_sets];
        let mut a2 = vec![0.0; k_sets];
        let mut n2 = vec![0.0; k_sets];
        for k in 0..net.params.get(id).len() {
            let orig = net.params.get(id)[k];
            probe.params.get_mut(id)[k] = orig + eps;
            let plus = weighted_loss_values(&probe, t, t1, target, weight_sets)?;
            probe.params.get_mut(id)[k] = orig - eps;
            let minus = weighted_loss_values(&probe, t, t1, target, weight_sets)?;
            probe.params.get_mut(id)[k] = orig;
            for s in 0..k_sets {
                let ga = analytic_sets[s][j][k];
                let gn = (plus[s] - minus[s]) / (2.0 * eps);
                diff2[s] += (ga - gn).powi(2);
                a2[s] += ga * ga;
                n2[s] += gn * gn;
            }
        }
        for s in 0..k_sets {
            let (an, nn) = (f64::sqrt(a2[s]), f64::sqrt(n2[s]));
            let denom = an.max(nn);
            reports[s].push(GradCheck {
                name: net.params.name(id).to_string(),
                analytic_norm: an,
                rel_error: if denom == 0.0 { 0.0 } else { diff2[s].sqrt() / denom },
            });
        }
    }
    Ok(reports)
}
