//! Three-way end-point error and dynamic-point accuracy metrics.
//!
//! Points are split by their ground-truth, ego-compensated motion into
//! foreground-dynamic (FD), foreground-static (FS) and background-static (BS).
//! The three-way EPE is the unweighted mean of the three class EPEs.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Compensated displacement (m per frame) above which a point is dynamic.
pub const DYNAMIC_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub dynamic_threshold: f64,
    pub relax_abs: f64,
    pub relax_rel: f64,
    pub strict_abs: f64,
    pub strict_rel: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { dynamic_threshold: DYNAMIC_THRESHOLD, relax_abs: 0.1, relax_rel: 0.1, strict_abs: 0.05, strict_rel: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionClass {
    ForegroundDynamic,
    ForegroundStatic,
    BackgroundStatic,
    OutOfRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionClassLabels {
    pub class: Vec<MotionClass>,
    pub is_dynamic_gt: Vec<bool>,
    pub is_dynamic_pred: Vec<bool>,
}

impl MotionClassLabels {
    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    /// Marks predicted-dynamic points from the predicted flow, thresholded
    /// after ego compensation like the ground truth.
    pub fn with_prediction(mut self, pred_total: &[Vec3], ego: &[Vec3], dyn_threshold: f64) -> Self {
        self.is_dynamic_pred = pred_total
            .iter()
            .zip(ego)
            .zip(&self.class)
            .map(|((p, e), c)| *c != MotionClass::OutOfRange && (p - e).norm() > dyn_threshold)
            .collect();
        self
    }
}

/// Labels from ground truth. A point is dynamic iff `‖gt − ego‖ > threshold`.
/// Background points that move are counted as FD. Points with
/// `in_range[i] == false` are `OutOfRange` and ignored by every metric.
pub fn classify_motion(
    gt_flow: &[Vec3],
    ego: &[Vec3],
    fg_mask: &[bool],
    dyn_threshold: f64,
    in_range: Option<&[bool]>,
) -> MotionClassLabels {
    let n = gt_flow.len();
    let mut class = Vec::with_capacity(n);
    let mut is_dynamic_gt = Vec::with_capacity(n);
    for i in 0..n {
        if in_range.is_some_and(|m| !m[i]) {
            class.push(MotionClass::OutOfRange);
            is_dynamic_gt.push(false);
            continue;
        }
        let dynamic = (gt_flow[i] - ego[i]).norm() > dyn_threshold;
        is_dynamic_gt.push(dynamic);
        class.push(match (fg_mask[i], dynamic) {
            (_, true) => MotionClass::ForegroundDynamic,
            (true, false) => MotionClass::ForegroundStatic,
            (false, false) => MotionClass::BackgroundStatic,
        });
    }
    MotionClassLabels { class, is_dynamic_gt, is_dynamic_pred: vec![false; n] }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub fd: usize,
    pub fs: usize,
    pub bs: usize,
    pub out_of_range: usize,
    /// Background points whose ground truth moves; included in `fd`.
    pub background_dynamic: usize,
}

/// Per-frame (or dataset-mean) evaluation summary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub epe_3way: f64,
    pub epe_fd: f64,
    pub epe_bs: f64,
    pub epe_fs: f64,
    /// Mean EPE over every in-range point.
    pub epe_mean: f64,
    pub dynamic_iou: f64,
    pub acc_relax: f64,
    pub acc_strict: f64,
    pub counts: ClassCounts,
    /// Number of in-range points.
    pub num_points: usize,
    /// True when TP + FP + FN was zero and IoU was defined as 1.
    pub iou_undefined: bool,
    /// Number of frames aggregated into this report.
    pub frames: usize,
}

impl EvalReport {
    pub fn fd_empty(&self) -> bool {
        self.counts.fd == 0
    }

    pub fn fs_empty(&self) -> bool {
        self.counts.fs == 0
    }

    pub fn bs_empty(&self) -> bool {
        self.counts.bs == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpeBreakdown {
    pub epe_3way: f64,
    pub epe_fd: f64,
    pub epe_bs: f64,
    pub epe_fs: f64,
    pub epe_mean: f64,
    pub counts: ClassCounts,
}

/// Per-class mean EPE. Empty classes report 0 with a zero count.
pub fn epe_breakdown(pred_total: &[Vec3], gt_total: &[Vec3], labels: &MotionClassLabels) -> EpeBreakdown {
    let mut sums = [0.0f64; 3];
    let mut counts = ClassCounts::default();
    let mut all = 0.0;
    for i in 0..labels.len() {
        let class = labels.class[i];
        if class == MotionClass::OutOfRange {
            counts.out_of_range += 1;
            continue;
        }
        let e = (pred_total[i] - gt_total[i]).norm();
        all += e;
        match class {
            MotionClass::ForegroundDynamic => {
                sums[0] += e;
                counts.fd += 1;
            }
            MotionClass::BackgroundStatic => {
                sums[1] += e;
                counts.bs += 1;
            }
            MotionClass::ForegroundStatic => {
                sums[2] += e;
                counts.fs += 1;
            }
            MotionClass::OutOfRange => unreachable!(),
        }
    }
    let mean = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
    let epe_fd = mean(sums[0], counts.fd);
    let epe_bs = mean(sums[1], counts.bs);
    let epe_fs = mean(sums[2], counts.fs);
    EpeBreakdown {
        epe_3way: (epe_fd + epe_bs + epe_fs) / 3.0,
        epe_fd,
        epe_bs,
        epe_fs,
        epe_mean: mean(all, counts.fd + counts.bs + counts.fs),
        counts,
    }
}

/// `(relax, strict)` fractions of FD points within tolerance. With no FD point
/// both are 1 (the caller can check `counts.fd`).
pub fn dynamic_accuracy(pred_total: &[Vec3], gt_total: &[Vec3], labels: &MotionClassLabels, cfg: &MetricConfig) -> (f64, f64) {
    let mut n = 0usize;
    let mut relax = 0usize;
    let mut strict = 0usize;
    for i in 0..labels.len() {
        if labels.class[i] != MotionClass::ForegroundDynamic {
            continue;
        }
        n += 1;
        let epe = (pred_total[i] - gt_total[i]).norm();
        let rel = epe / gt_total[i].norm();
        if epe < cfg.relax_abs || rel < cfg.relax_rel {
            relax += 1;
        }
        if epe < cfg.strict_abs || rel < cfg.strict_rel {
            strict += 1;
        }
    }
    if n == 0 {
        return (1.0, 1.0);
    }
    (relax as f64 / n as f64, strict as f64 / n as f64)
}

/// IoU of predicted vs ground-truth dynamic sets; `(1.0, true)` when both
/// are empty.
pub fn dynamic_iou(labels: &MotionClassLabels) -> (f64, bool) {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in 0..labels.len() {
        if labels.class[i] == MotionClass::OutOfRange {
            continue;
        }
        match (labels.is_dynamic_gt[i], labels.is_dynamic_pred[i]) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = tp + fp + fn_;
    if denom == 0 {
        (1.0, true)
    } else {
        (tp as f64 / denom as f64, false)
    }
}

/// Full report for one frame.
pub fn evaluate_frame(
    pred_total: &[Vec3],
    gt_total: &[Vec3],
    ego: &[Vec3],
    fg_mask: &[bool],
    in_range: Option<&[bool]>,
    cfg: &MetricConfig,
) -> EvalReport {
    let labels = classify_motion(gt_total, ego, fg_mask, cfg.dynamic_threshold, in_range)
        .with_prediction(pred_total, ego, cfg.dynamic_threshold);
    let epe = epe_breakdown(pred_total, gt_total, &labels);
    let (acc_relax, acc_strict) = dynamic_accuracy(pred_total, gt_total, &labels, cfg);
    let (iou, iou_undefined) = dynamic_iou(&labels);
    let mut counts = epe.counts;
    counts.background_dynamic = (0..labels.len())
        .filter(|&i| labels.class[i] == MotionClass::ForegroundDynamic && !fg_mask[i])
        .count();
    EvalReport {
        epe_3way: epe.epe_3way,
        epe_fd: epe.epe_fd,
        epe_bs: epe.epe_bs,
        epe_fs: epe.epe_fs,
        epe_mean: epe.epe_mean,
        dynamic_iou: iou,
        acc_relax,
        acc_strict,
        num_points: counts.fd + counts.fs + counts.bs,
        counts,
        iou_undefined,
        frames: 1,
    }
}

/// Mean over frames. Each class metric averages only the frames where that
/// class is non-empty; IoU averages frames where it is defined. The 3-way EPE
/// is recomputed from the averaged class EPEs.
pub fn aggregate(reports: &[EvalReport]) -> EvalReport {
    fn mean_where(reports: &[EvalReport], keep: impl Fn(&EvalReport) -> bool, get: impl Fn(&EvalReport) -> f64) -> (f64, bool) {
        let vals: Vec<f64> = reports.iter().filter(|r| keep(r)).map(get).collect();
        if vals.is_empty() {
            (0.0, false)
        } else {
            (vals.iter().sum::<f64>() / vals.len() as f64, true)
        }
    }
    let (epe_fd, _) = mean_where(reports, |r| !r.fd_empty(), |r| r.epe_fd);
    let (epe_bs, _) = mean_where(reports, |r| !r.bs_empty(), |r| r.epe_bs);
    let (epe_fs, _) = mean_where(reports, |r| !r.fs_empty(), |r| r.epe_fs);
    let (epe_mean, _) = mean_where(reports, |r| r.num_points > 0, |r| r.epe_mean);
    let (acc_relax, any_fd) = mean_where(reports, |r| !r.fd_empty(), |r| r.acc_relax);
    let (acc_strict, _) = mean_where(reports, |r| !r.fd_empty(), |r| r.acc_strict);
    let (iou, any_iou) = mean_where(reports, |r| !r.iou_undefined, |r| r.dynamic_iou);
    let mut counts = ClassCounts::default();
    for r in reports {
        counts.fd += r.counts.fd;
        counts.fs += r.counts.fs;
        counts.bs += r.counts.bs;
        counts.out_of_range += r.counts.out_of_range;
        counts.background_dynamic += r.counts.background_dynamic;
    }
    EvalReport {
        epe_3way: (epe_fd + epe_bs + epe_fs) / 3.0,
        epe_fd,
        epe_bs,
        epe_fs,
        epe_mean,
        dynamic_iou: if any_iou { iou } else { 1.0 },
        acc_relax: if any_fd { acc_relax } else { 1.0 },
        acc_strict: if any_fd { acc_strict } else { 1.0 },
        counts,
        num_points: reports.iter().map(|r| r.num_points).sum(),
        iou_undefined: !any_iou,
        frames: reports.iter().map(|r| r.frames).sum(),
    }
}

pub const TABLE_COLUMNS: [&str; 7] =
    ["EPE 3-Way", "EPE FD", "EPE BS", "EPE FS", "Dynamic IoU", "AccRelax", "AccStrict"];

/// Fixed-width table with one header row and one value row.
pub fn render_table(report: &EvalReport) -> String {
    let vals = [
        report.epe_3way,
        report.epe_fd,
        report.epe_bs,
        report.epe_fs,
        report.dynamic_iou,
        report.acc_relax,
        report.acc_strict,
    ];
    let header: Vec<String> = TABLE_COLUMNS.iter().map(|c| format!("{c:>12}")).collect();
    let row: Vec<String> = vals.iter().map(|v| format!("{v:>12.4}")).collect();
    format!("{}\n{}\n", header.join(" |"), row.join(" |"))
}

/// `key = value` lines (valid TOML).
pub fn render_key_values(report: &EvalReport) -> String {
    toml::to_string(report).expect("report serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn boundary_is_static() {
        let l = classify_motion(&[v(0.03, 0.04, 0.0)], &[Vec3::zeros()], &[true], 0.05, None);
        assert_eq!(l.class[0], MotionClass::ForegroundStatic);
        let l = classify_motion(&[v(0.1, 0.0, 0.0)], &[Vec3::zeros()], &[true], 0.05, None);
        assert_eq!(l.class[0], MotionClass::ForegroundDynamic);
    }

    #[test]
    fn ego_translation_is_compensated() {
        let ego = vec![v(-1.0, 0.0, 0.0); 4];
        let l = classify_motion(&ego, &ego, &[true, false, true, false], 0.05, None);
        assert!(l.is_dynamic_gt.iter().all(|&d| !d));
    }

    #[test]
    fn background_dynamic_goes_to_fd() {
        let l = classify_motion(&[v(0.2, 0.0, 0.0)], &[Vec3::zeros()], &[false], 0.05, None);
        assert_eq!(l.class[0], MotionClass::ForegroundDynamic);
    }

    #[test]
    fn epe_cases() {
        let gt = vec![v(0.1, 0.0, 0.0)];
        let l = classify_motion(&gt, &[Vec3::zeros()], &[true], 0.05, None);
        let e = epe_breakdown(&gt, &gt, &l);
        assert_eq!((e.epe_fd, e.epe_bs, e.epe_fs, e.epe_3way), (0.0, 0.0, 0.0, 0.0));
        let pred = vec![v(0.4, 0.4, 0.0)];
        let e = epe_breakdown(&pred, &gt, &l);
        assert!((e.epe_fd - 0.5).abs() < 1e-12);
        assert_eq!(e.counts.fs, 0);
    }

    #[test]
    fn accuracy_rules() {
        let cfg = MetricConfig::default();
        let gt = vec![v(2.0, 0.0, 0.0)];
        let l = classify_motion(&gt, &[Vec3::zeros()], &[true], 0.05, None);
        assert_eq!(dynamic_accuracy(&gt, &gt, &l, &cfg), (1.0, 1.0));
        // 0.15 error on a 2 m flow: 7.5 % relative.
        let pred = vec![v(2.15, 0.0, 0.0)];
        assert_eq!(dynamic_accuracy(&pred, &gt, &l, &cfg), (1.0, 0.0));
        let gt = vec![v(0.1, 0.0, 0.0)];
        let l = classify_motion(&gt, &[Vec3::zeros()], &[true], 0.05, None);
        assert_eq!(dynamic_accuracy(&[v(0.14, 0.0, 0.0)], &gt, &l, &cfg), (1.0, 1.0));
        // No FD point.
        let l = classify_motion(&[Vec3::zeros()], &[Vec3::zeros()], &[true], 0.05, None);
        assert_eq!(dynamic_accuracy(&[Vec3::zeros()], &[Vec3::zeros()], &l, &cfg), (1.0, 1.0));
    }

    #[test]
    fn iou_cases() {
        let mut l = MotionClassLabels {
            class: vec![MotionClass::BackgroundStatic; 6],
            is_dynamic_gt: vec![true, true, true, true, true, false],
            is_dynamic_pred: vec![true, true, true, false, false, true],
        };
        assert_eq!(dynamic_iou(&l), (0.5, false));
        l.is_dynamic_pred = l.is_dynamic_gt.clone();
        assert_eq!(dynamic_iou(&l).0, 1.0);
        l.is_dynamic_pred = vec![false; 6];
        assert_eq!(dynamic_iou(&l).0, 0.0);
        l.is_dynamic_gt = vec![false; 6];
        assert_eq!(dynamic_iou(&l), (1.0, true));
    }

    #[test]
    fn out_of_range_points_are_ignored() {
        let gt = vec![v(0.2, 0.0, 0.0), v(0.0, 0.0, 0.0)];
        let ego = vec![Vec3::zeros(); 2];
        let pred = vec![v(0.2, 0.0, 0.0), v(5.0, 0.0, 0.0)];
        let cfg = MetricConfig::default();
        let with = evaluate_frame(&pred, &gt, &ego, &[true, false], Some(&[true, false]), &cfg);
        let without = evaluate_frame(&pred[..1], &gt[..1], &ego[..1], &[true], None, &cfg);
        assert_eq!(with.epe_fd, without.epe_fd);
        assert_eq!(with.dynamic_iou, without.dynamic_iou);
        assert_eq!(with.counts.out_of_range, 1);
    }

    #[test]
    fn renders_table_fixture() {
        let r = EvalReport {
            epe_3way: 0.0534,
            epe_fd: 0.1340,
            epe_bs: 0.0029,
            epe_fs: 0.0232,
            dynamic_iou: 0.6289,
            acc_relax: 0.7213,
            acc_strict: 0.4483,
            ..Default::default()
        };
        let table = render_table(&r);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        for col in TABLE_COLUMNS {
            assert!(lines[0].contains(col));
        }
        let cells: Vec<&str> = lines[1].split('|').map(str::trim).collect();
        assert_eq!(cells, ["0.0534", "0.1340", "0.0029", "0.0232", "0.6289", "0.7213", "0.4483"]);

        let kv = render_key_values(&r);
        assert!(kv.contains("epe_3way = 0.0534"));
        let back: EvalReport = toml::from_str(&kv).unwrap();
        assert_eq!(back, r);
    }
}
