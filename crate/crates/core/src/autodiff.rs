//! A small define-by-run reverse-mode tape over dense row-major matrices.
//!
//! Only the operations the scene-flow network needs are provided. Images are
//! stored as `(H·W) × C` matrices so that per-point tensors and grid tensors
//! share one layout and pillar scatter/gather are plain row moves.
//!
//! All reductions run in a fixed order, so forward and backward passes are
//! bitwise reproducible for a given input.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::voxelizer::{scatter_max_rows, NO_SOURCE};

/// Scalar type of the tape: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + AddAssign + MulAssign + Sum + 'static
{
    /// `C = A·B + beta·C` on strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, beta: Self, c: &mut [Self], rsc: isize, csc: isize);

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, beta: Self, c: &mut [Self], rsc: isize, csc: isize) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer does not match {rows}×{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| F::of(v)).collect())
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C (+)= A·B with A m×k, B k×n.
pub fn matmul<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// C (+)= Aᵀ·B with A stored k×m, B k×n.
fn matmul_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, F::one(), c, n as isize, 1);
}

/// C (+)= A·Bᵀ with A m×k, B stored n×k.
fn matmul_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, F::one(), c, n as isize, 1);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial layout of a conv input/output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    /// "Same" padding of `kernel / 2`.
    pub fn new(in_h: usize, in_w: usize, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel % 2 == 1 && stride >= 1);
        let pad = kernel / 2;
        let out = |n: usize| (n + 2 * pad - kernel) / stride + 1;
        Self { in_h, in_w, in_c, out_h: out(in_h), out_w: out(in_w), out_c, kernel, stride }
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    /// Visit every (output pixel, tap) pair that lands inside the input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = (self.kernel / 2) as isize;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let p = oy * self.out_w + ox;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        f(p, ky * self.kernel + kx, iy as usize * self.in_w + ix as usize);
                    }
                }
            }
        }
    }

    fn im2col<F: Real>(&self, x: &[F]) -> Vec<F> {
        let c = self.in_c;
        let patch = self.patch();
        let mut cols = vec![F::zero(); self.out_h * self.out_w * patch];
        self.for_each_tap(|p, tap, pix| {
            cols[p * patch + tap * c..p * patch + (tap + 1) * c].copy_from_slice(&x[pix * c..(pix + 1) * c]);
        });
        cols
    }

    fn col2im<F: Real>(&self, cols: &[F], dx: &mut [F]) {
        let c = self.in_c;
        let patch = self.patch();
        self.for_each_tap(|p, tap, pix| {
            let src = &cols[p * patch + tap * c..p * patch + (tap + 1) * c];
            for (d, &s) in dx[pix * c..(pix + 1) * c].iter_mut().zip(src) {
                *d += s;
            }
        });
    }
}

enum Op<F> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, F),
    Concat(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<F> },
    Upsample { x: Var, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    ScatterMax { x: Var, argmax: Vec<u32> },
    Gather { x: Var, cells: Vec<usize> },
    WeightedNorm { pred: Var, target: Vec<F>, weights: Vec<F> },
}

struct Node<F> {
    value: Mat<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records operations as they execute; `backward` replays them in reverse.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are tracked through it.
    pub fn param(&mut self, value: Mat<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Mat<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        let m = self.value(v);
        assert_eq!(m.data.len(), 1, "not a scalar");
        m.data[0]
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.nodes[v.0].value;
        (m.rows, m.cols)
    }

    /// `x·w + b` with x n×k, w k×m, b 1×m.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = self.shape(x);
        let (wk, m) = self.shape(w);
        assert_eq!(k, wk, "linear: input has {k} columns, weight has {wk} rows");
        let mut out = Mat::zeros(n, m);
        if let Some(b) = b {
            let bias = &self.value(b).data;
            assert_eq!(bias.len(), m);
            for row in out.data.chunks_mut(m.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        matmul(&self.value(x).data, &self.value(w).data, &mut out.data, n, k, m, b.is_some());
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let (r, c) = self.shape(a);
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| f(x, y)).collect();
        self.push(Mat::new(r, c, data), op, &[a, b])
    }

    fn map_op(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data.iter().map(|&x| f(x)).collect();
        self.push(Mat::new(r, c, data), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map_op(a, |x| F::one() - x, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, |x| F::one() / (F::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        self.map_op(a, |x| if x > F::zero() { x } else { x * slope }, Op::LeakyRelu(a, slope))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            assert_eq!(src.rows, rows, "concat: row count mismatch");
            for r in 0..rows {
                out.data[r * total + off..r * total + off + w].copy_from_slice(src.row(r));
            }
            off += w;
        }
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// 2D convolution on an `(in_h·in_w) × in_c` image. `w` is
    /// `(k·k·in_c) × out_c` with taps ordered (ky, kx, channel).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        assert_eq!(self.shape(x), (geom.in_h * geom.in_w, geom.in_c), "conv2d: input shape");
        assert_eq!(self.shape(w), (geom.patch(), geom.out_c), "conv2d: weight shape");
        let cols = geom.im2col(&self.value(x).data);
        let p = geom.out_h * geom.out_w;
        let mut out = Mat::zeros(p, geom.out_c);
        for row in out.data.chunks_mut(geom.out_c) {
            row.copy_from_slice(&self.value(b).data);
        }
        matmul(&cols, &self.value(w).data, &mut out.data, p, geom.patch(), geom.out_c, true);
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    /// Nearest-neighbour upsampling of an `(in_h·in_w) × C` image to
    /// `out_h × out_w` (factor two, cropped to the target size).
    pub fn upsample(&mut self, x: Var, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Var {
        let c = self.shape(x).1;
        let src = &self.value(x).data;
        let mut out = Mat::zeros(out_h * out_w, c);
        for y in 0..out_h {
            let sy = (y / 2).min(in_h - 1);
            for xx in 0..out_w {
                let sx = (xx / 2).min(in_w - 1);
                let s = (sy * in_w + sx) * c;
                let d = (y * out_w + xx) * c;
                out.data[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        self.push(out, Op::Upsample { x, in_h, in_w, out_h, out_w }, &[x])
    }

    /// Max-pool point rows into `num_cells` grid rows.
    pub fn scatter_max(&mut self, x: Var, cells: &[usize], num_cells: usize) -> Var {
        let (n, c) = self.shape(x);
        assert_eq!(n, cells.len());
        let (data, argmax) = scatter_max_rows(&self.value(x).data, c, cells, num_cells);
        self.push(Mat::new(num_cells, c, data), Op::ScatterMax { x, argmax }, &[x])
    }

    /// Row `k` of the output is row `cells[k]` of `x`.
    pub fn gather(&mut self, x: Var, cells: &[usize]) -> Var {
        let c = self.shape(x).1;
        let src = &self.value(x).data;
        let mut out = Mat::zeros(cells.len(), c);
        for (k, &cell) in cells.iter().enumerate() {
            out.data[k * c..(k + 1) * c].copy_from_slice(&src[cell * c..(cell + 1) * c]);
        }
        self.push(out, Op::Gather { x, cells: cells.to_vec() }, &[x])
    }

    /// `Σ_i w_i · ‖pred_i − target_i‖₂` as a 1×1 matrix.
    pub fn weighted_norm(&mut self, pred: Var, target: &[F], weights: &[F]) -> Var {
        let (n, c) = self.shape(pred);
        assert_eq!(target.len(), n * c);
        assert_eq!(weights.len(), n);
        let p = &self.value(pred).data;
        let mut total = F::zero();
        for i in 0..n {
            let sq: F = (0..c).map(|j| (p[i * c + j] - target[i * c + j]).powi(2)).sum();
            total += weights[i] * sq.sqrt();
        }
        let op = Op::WeightedNorm { pred, target: target.to_vec(), weights: weights.to_vec() };
        self.push(Mat::new(1, 1, vec![total]), op, &[pred])
    }

    /// Gradients of scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).data.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, k) = self.shape(*x);
                let m = out.cols;
                if needs(*w) {
                    matmul_tn(&self.value(*x).data, g, slot(grads, *w, k * m), k, n, m);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let db = slot(grads, b, m);
                    for row in g.chunks(m.max(1)) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if needs(*x) {
                    matmul_nt(g, &self.value(*w).data, slot(grads, *x, n * k), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        axpy(slot(grads, v, g.len()), g, |gi, _| gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), g, |gi, _| gi);
                }
                if needs(*b) {
                    axpy(slot(grads, *b, g.len()), g, |gi, _| -gi);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = &self.value(*b).data;
                    axpy(slot(grads, *a, g.len()), g, |gi, i| gi * bv[i]);
                }
                if needs(*b) {
                    let av = &self.value(*a).data;
                    axpy(slot(grads, *b, g.len()), g, |gi, i| gi * av[i]);
                }
            }
            Op::OneMinus(a) => axpy(slot(grads, *a, g.len()), g, |gi, _| -gi),
            Op::Sigmoid(a) => {
                let y = &out.data;
                axpy(slot(grads, *a, g.len()), g, |gi, i| gi * y[i] * (F::one() - y[i]));
            }
            Op::Tanh(a) => {
                let y = &out.data;
                axpy(slot(grads, *a, g.len()), g, |gi, i| gi * (F::one() - y[i] * y[i]));
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.value(*a).data;
                let s = *slope;
                axpy(slot(grads, *a, g.len()), g, |gi, i| if x[i] > F::zero() { gi } else { gi * s });
            }
            Op::Concat(parts) => {
                let rows = out.rows;
                let total = out.cols;
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if needs(p) {
                        let d = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let p = geom.out_h * geom.out_w;
                let k = geom.patch();
                let m = geom.out_c;
                if needs(*w) {
                    matmul_tn(cols, g, slot(grads, *w, k * m), k, p, m);
                }
                if needs(*b) {
                    let db = slot(grads, *b, m);
                    for row in g.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if needs(*x) {
                    let mut dcols = vec![F::zero(); p * k];
                    matmul_nt(g, &self.value(*w).data, &mut dcols, p, m, k);
                    geom.col2im(&dcols, slot(grads, *x, geom.in_h * geom.in_w * geom.in_c));
                }
            }
            Op::Upsample { x, in_h, in_w, out_h, out_w } => {
                let c = out.cols;
                let d = slot(grads, *x, in_h * in_w * c);
                for y in 0..*out_h {
                    let sy = (y / 2).min(in_h - 1);
                    for xx in 0..*out_w {
                        let sx = (xx / 2).min(in_w - 1);
                        let s = (sy * in_w + sx) * c;
                        let o = (y * out_w + xx) * c;
                        for j in 0..c {
                            d[s + j] += g[o + j];
                        }
                    }
                }
            }
            Op::ScatterMax { x, argmax } => {
                let c = out.cols;
                let (n, _) = self.shape(*x);
                let d = slot(grads, *x, n * c);
                for (k, &src) in argmax.iter().enumerate() {
                    if src != NO_SOURCE {
                        d[src as usize * c + k % c] += g[k];
                    }
                }
            }
            Op::Gather { x, cells } => {
                let c = out.cols;
                let (r, _) = self.shape(*x);
                let d = slot(grads, *x, r * c);
                for (k, &cell) in cells.iter().enumerate() {
                    for j in 0..c {
                        d[cell * c + j] += g[k * c + j];
                    }
                }
            }
            Op::WeightedNorm { pred, target, weights } => {
                let (n, c) = self.shape(*pred);
                let p = &self.value(*pred).data;
                let d = slot(grads, *pred, n * c);
                for i in 0..n {
                    let sq: F = (0..c).map(|j| (p[i * c + j] - target[i * c + j]).powi(2)).sum();
                    let norm = sq.sqrt();
                    // The norm has no derivative at zero error; use zero there.
                    if norm > F::zero() {
                        let scale = g[0] * weights[i] / norm;
                        for j in 0..c {
                            d[i * c + j] += scale * (p[i * c + j] - target[i * c + j]);
                        }
                    }
                }
            }
        }
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn axpy<F: Real>(dst: &mut [F], g: &[F], f: impl Fn(F, usize) -> F) {
    for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *d += f(gi, i);
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }
}
