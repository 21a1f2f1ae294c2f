//! Sensitivity, specificity, accuracy, MCC, ROC/AUC and inference timing.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::{Mode, Model, Tensor};
use crate::error::{QpiError, Result};

/// Default operating point on the sigmoid output.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// One scored sample; `truth` is the positive class.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub sample_id: String,
    pub score: f64,
    pub truth: bool,
}

fn check_finite(scores: &[(f64, bool)]) -> Result<()> {
    if scores.is_empty() {
        return Err(QpiError::EmptyInput("no scores".into()));
    }
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(QpiError::Domain(format!("score {s} is not finite")));
    }
    Ok(())
}

/// Positive iff `score ≥ threshold`.
pub fn confusion(scores: &[(f64, bool)], threshold: f64) -> Result<ConfusionCounts> {
    check_finite(scores)?;
    let mut c = ConfusionCounts::default();
    for &(s, truth) in scores {
        match (s >= threshold, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub mcc: f64,
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        warn!("MCC denominator is zero for {c:?}; reporting 0");
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

pub fn rates(c: &ConfusionCounts) -> Result<Rates> {
    if c.total() == 0 {
        return Err(QpiError::EmptyInput("confusion counts are all zero".into()));
    }
    if c.tp + c.fn_ == 0 {
        return Err(QpiError::UndefinedRate("sensitivity needs at least one positive".into()));
    }
    if c.tn + c.fp == 0 {
        return Err(QpiError::UndefinedRate("specificity needs at least one negative".into()));
    }
    Ok(Rates {
        sensitivity: c.tp as f64 / (c.tp + c.fn_) as f64,
        specificity: c.tn as f64 / (c.tn + c.fp) as f64,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        mcc: mcc(c),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    /// Scores at or above this value are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// From (0, 0) at threshold +∞ to (1, 1), one step per distinct score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn class_sizes(scores: &[(f64, bool)]) -> Result<(u64, u64)> {
    check_finite(scores)?;
    let p = scores.iter().filter(|s| s.1).count() as u64;
    let n = scores.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(QpiError::DegenerateRoc);
    }
    Ok((p, n))
}

/// Threshold sweep over distinct scores with trapezoidal area. Tied scores
/// form one step, which credits a tied positive/negative pair with 1/2.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<RocCurve> {
    let (p, n) = class_sizes(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one positive-negative pair.
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        let (tp0, fp0) = (tp, fp);
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    Ok(RocCurve {
        points,
        auc: area2 as f64 / (2 * u128::from(p) * u128::from(n)) as f64,
    })
}

/// Mann–Whitney statistic by brute force over all positive/negative pairs.
pub fn pair_count_auc(scores: &[(f64, bool)]) -> Result<f64> {
    let (p, n) = class_sizes(scores)?;
    let mut twice: u128 = 0;
    for &(sp, _) in scores.iter().filter(|s| s.1) {
        for &(sn, _) in scores.iter().filter(|s| !s.1) {
            twice += match sp.total_cmp(&sn) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * u128::from(p) * u128::from(n)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub repeats: usize,
    pub images: usize,
    /// Amortised per-image time for batches of 1, 2, 4, ... (soft check).
    pub batched_ms: Vec<(usize, f64)>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Per-image latency of single-image Eval forwards over `repeats` passes of
/// `images` (shape `(N, C, H, W)`), after one untimed warm-up pass.
pub fn time_inference(model: &mut Model<f32>, images: &Tensor<f32>, repeats: usize) -> Result<Timing> {
    if repeats < 10 {
        return Err(QpiError::Contract(format!("timing needs at least 10 repeats, got {repeats}")));
    }
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(QpiError::Shape(format!("expected (N, C, H, W) images, got {shape:?}")));
    }
    let per: usize = shape[1..].iter().product();
    let one = |i: usize| Tensor::from_vec(&[1, shape[1], shape[2], shape[3]], images.data()[i * per..(i + 1) * per].to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..shape[0] {
        model.forward(one(i)?, Mode::Eval, &mut rng)?;
    }
    let mut samples = Vec::with_capacity(repeats * shape[0]);
    for _ in 0..repeats {
        for i in 0..shape[0] {
            let x = one(i)?;
            let t = Instant::now();
            model.forward(x, Mode::Eval, &mut rng)?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    samples.sort_by(f64::total_cmp);

    let mut batched_ms = Vec::new();
    let mut b = 1;
    while b <= shape[0].min(8) {
        let x = Tensor::from_vec(&[b, shape[1], shape[2], shape[3]], images.data()[..b * per].to_vec())?;
        let t = Instant::now();
        model.forward(x, Mode::Eval, &mut rng)?;
        batched_ms.push((b, t.elapsed().as_secs_f64() * 1e3 / b as f64));
        b *= 2;
    }
    for w in batched_ms.windows(2) {
        if w[1].1 > w[0].1 {
            info!(
                "batch {} amortised {:.3} ms/image is slower than batch {} at {:.3}",
                w[1].0, w[1].1, w[0].0, w[0].1
            );
        }
    }
    Ok(Timing {
        median_ms: percentile(&samples, 0.5),
        p95_ms: percentile(&samples, 0.95),
        repeats,
        images: shape[0],
        batched_ms,
    })
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    sample_id: String,
    score: f64,
    truth: u8,
}

#[derive(Serialize, Deserialize)]
struct RocRow {
    threshold: f64,
    fpr: f64,
    tpr: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> QpiError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => QpiError::io(path, io),
        kind => QpiError::format(path, format!("{kind:?}")),
    }
}

/// Writes `sample_id,score,truth` with a header row; truth is 0 or 1.
pub fn write_scores(path: &Path, scores: &[Scored]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in scores {
        w.serialize(ScoreRow {
            sample_id: s.sample_id.clone(),
            score: s.score,
            truth: u8::from(s.truth),
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| QpiError::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<Scored>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<ScoreRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if row.truth > 1 {
            return Err(QpiError::format(path, format!("truth {} for {} is not 0 or 1", row.truth, row.sample_id)));
        }
        out.push(Scored {
            sample_id: row.sample_id,
            score: row.score,
            truth: row.truth == 1,
        });
    }
    Ok(out)
}

/// Writes `threshold,fpr,tpr`; the first row's threshold is `inf`.
pub fn write_roc_csv(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for p in &roc.points {
        w.serialize(RocRow {
            threshold: p.threshold,
            fpr: p.fpr,
            tpr: p.tpr,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| QpiError::io(path, e))
}

/// `(fpr, tpr)` pairs of a ROC CSV.
pub fn read_roc_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize::<RocRow>()
        .map(|row| row.map(|p| (p.fpr, p.tpr)).map_err(|e| csv_error(path, e)))
        .collect()
}

/// Everything `eval` reports for one score file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub rates: Rates,
    pub auc: f64,
}

impl MetricsReport {
    pub fn compute(scores: &[Scored], threshold: f64) -> Result<(Self, RocCurve)> {
        let pairs: Vec<(f64, bool)> = scores.iter().map(|s| (s.score, s.truth)).collect();
        let counts = confusion(&pairs, threshold)?;
        let roc = roc_auc(&pairs)?;
        let report = Self {
            threshold,
            counts,
            rates: rates(&counts)?,
            auc: roc.auc,
        };
        Ok((report, roc))
    }

    pub fn table(&self) -> String {
        let r = &self.rates;
        let c = &self.counts;
        let mut s = String::new();
        writeln!(s, "{:<12} {:>8}", "metric", "value").ok();
        for (k, v) in [
            ("sensitivity", r.sensitivity),
            ("specificity", r.specificity),
            ("accuracy", r.accuracy),
            ("mcc", r.mcc),
            ("auc", self.auc),
        ] {
            writeln!(s, "{k:<12} {v:>8.4}").ok();
        }
        writeln!(s, "threshold {:.3}: tp {} fp {} tn {} fn {}", self.threshold, c.tp, c.fp, c.tn, c.fn_).ok();
        s
    }

    pub fn key_values(&self) -> String {
        let r = &self.rates;
        let c = &self.counts;
        let mut s = String::new();
        writeln!(s, "threshold={:.6}", self.threshold).ok();
        writeln!(s, "tp={}\nfp={}\ntn={}\nfn={}", c.tp, c.fp, c.tn, c.fn_).ok();
        writeln!(s, "sensitivity={:.6}", r.sensitivity).ok();
        writeln!(s, "specificity={:.6}", r.specificity).ok();
        writeln!(s, "accuracy={:.6}", r.accuracy).ok();
        writeln!(s, "mcc={:.6}", r.mcc).ok();
        writeln!(s, "auc={:.6}", self.auc).ok();
        s
    }
}

/// A self-contained SVG line plot of ROC points.
pub fn roc_svg(points: &[(f64, f64)], title: &str) -> String {
    let (size, pad) = (400.0, 50.0);
    let x = |f: f64| pad + f * size;
    let y = |t: f64| pad + (1.0 - t) * size;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {w} {w}">"#,
        w = size + 2.0 * pad
    )
    .ok();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).ok();
    writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    )
    .ok();
    writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    )
    .ok();
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{v:.2}</text>"#,
            x(v),
            y(0.0) + 16.0
        )
        .ok();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v:.2}</text>"#,
            x(0.0) - 6.0,
            y(v) + 4.0
        )
        .ok();
    }
    let path: Vec<String> = points.iter().map(|&(f, t)| format!("{:.2},{:.2}", x(f), y(t))).collect();
    writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path.join(" ")
    )
    .ok();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">False positive rate</text>"#,
        x(0.5),
        y(0.0) + 36.0
    )
    .ok();
    writeln!(
        s,
        r#"<text x="14" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {})">True positive rate</text>"#,
        y(0.5),
        y(0.5)
    )
    .ok();
    writeln!(
        s,
        r#"<text x="{}" y="30" font-size="14" text-anchor="middle">{}</text>"#,
        x(0.5),
        xml_escape(title)
    )
    .ok();
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    #[test]
    fn perfect_scores() {
        let c = confusion(&[(1.0, true), (0.0, false)], 0.5).unwrap();
        assert_eq!(c, counts(1, 0, 1, 0));
        let r = rates(&counts(50, 0, 50, 0)).unwrap();
        assert_eq!((r.sensitivity, r.specificity, r.accuracy, r.mcc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn minus_infinity_threshold_calls_everything_positive() {
        let c = confusion(&[(0.2, true), (0.0, false), (1.0, false)], f64::NEG_INFINITY).unwrap();
        assert_eq!((c.fn_, c.tn), (0, 0));
    }

    #[test]
    fn empty_and_non_finite_inputs() {
        assert!(matches!(confusion(&[], 0.5), Err(QpiError::EmptyInput(_))));
        assert!(confusion(&[(f64::NAN, true)], 0.5).is_err());
        assert!(matches!(roc_auc(&[(0.3, true), (0.4, true)]), Err(QpiError::DegenerateRoc)));
    }

    #[test]
    fn brute_force_tally() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<(f64, bool)> = (0..200).map(|_| (r.gen::<f64>(), r.gen::<bool>())).collect();
        let c = confusion(&scores, 0.4).unwrap();
        let tp = scores.iter().filter(|s| s.0 >= 0.4 && s.1).count() as u64;
        let fp = scores.iter().filter(|s| s.0 >= 0.4 && !s.1).count() as u64;
        let tn = scores.iter().filter(|s| s.0 < 0.4 && !s.1).count() as u64;
        assert_eq!(c, counts(tp, fp, tn, 200 - tp - fp - tn));
    }

    #[test]
    fn hand_case() {
        let r = rates(&counts(90, 9, 91, 10)).unwrap();
        assert!((r.sensitivity - 0.900).abs() < 1e-12);
        assert!((r.specificity - 0.910).abs() < 1e-12);
        assert!((r.accuracy - 0.905).abs() < 1e-12);
        assert!((r.mcc - 0.8100).abs() < 1e-4, "{}", r.mcc);
    }

    #[test]
    fn degenerate_rates() {
        let r = rates(&counts(0, 100, 0, 100)).unwrap();
        assert_eq!((r.sensitivity, r.specificity), (0.0, 0.0));
        assert_eq!(r.mcc, -1.0);
        assert_eq!(mcc(&counts(5, 5, 0, 0)), 0.0);
        assert!(matches!(rates(&counts(0, 3, 4, 0)), Err(QpiError::UndefinedRate(_))));
        assert!(matches!(rates(&counts(3, 0, 0, 4)), Err(QpiError::UndefinedRate(_))));
        assert!(matches!(rates(&counts(0, 0, 0, 0)), Err(QpiError::EmptyInput(_))));
    }

    #[test]
    fn separated_and_random_auc() {
        let sep: Vec<(f64, bool)> = (0..20).map(|i| (i as f64, i >= 10)).collect();
        assert_eq!(roc_auc(&sep).unwrap().auc, 1.0);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<(f64, bool)> = (0..1000).map(|_| (r.gen::<f64>(), r.gen::<bool>())).collect();
        let auc = roc_auc(&noise).unwrap().auc;
        assert!((0.45..=0.55).contains(&auc), "{auc}");
    }

    #[test]
    fn tied_scores_credit_half() {
        let s = [(0.5, true), (0.5, false)];
        let roc = roc_auc(&s).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.points.len(), 2);
    }

    #[test]
    fn scores_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = vec![
            Scored {
                sample_id: "a".into(),
                score: 0.25,
                truth: true,
            },
            Scored {
                sample_id: "b,rot45".into(),
                score: 0.75,
                truth: false,
            },
        ];
        write_scores(&path, &s).unwrap();
        assert_eq!(read_scores(&path).unwrap(), s);
        std::fs::write(&path, "sample_id,score,truth\nx,0.3,2\n").unwrap();
        assert!(read_scores(&path).is_err());
    }

    #[test]
    fn report_and_svg() {
        let s: Vec<Scored> = (0..10)
            .map(|i| Scored {
                sample_id: format!("s{i}"),
                score: i as f64 / 10.0,
                truth: i % 3 != 0,
            })
            .collect();
        let (report, roc) = MetricsReport::compute(&s, 0.5).unwrap();
        assert!(report.key_values().contains("auc="));
        assert!(report.table().contains("sensitivity"));
        let svg = roc_svg(&roc.points.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>(), "a<b");
        assert!(svg.starts_with("<svg") && svg.contains("a&lt;b") && svg.trim_end().ends_with("</svg>"));
    }

    proptest! {
        #[test]
        fn trapezoid_equals_pair_count(raw in prop::collection::vec((0u8..12, any::<bool>()), 2..500)) {
            let scores: Vec<(f64, bool)> = raw.iter().map(|&(s, t)| (s as f64 / 11.0, t)).collect();
            prop_assume!(scores.iter().any(|s| s.1) && scores.iter().any(|s| !s.1));
            let roc = roc_auc(&scores).unwrap();
            prop_assert_eq!(roc.auc, pair_count_auc(&scores).unwrap());
            let first = &roc.points[0];
            let last = &roc.points[roc.points.len() - 1];
            prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for w in roc.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }

        #[test]
        fn mcc_bounds_and_accuracy_identity(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
            let c = counts(tp, fp, tn, fn_);
            prop_assume!(tp + fn_ > 0 && tn + fp > 0);
            let r = rates(&c).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r.mcc));
            let (p, n) = ((tp + fn_) as f64, (tn + fp) as f64);
            prop_assert!((r.accuracy - (r.sensitivity * p + r.specificity * n) / (p + n)).abs() < 1e-12);
            prop_assert_eq!(r.mcc == 1.0, fp == 0 && fn_ == 0 && tp > 0 && tn > 0);
        }
    }
}
