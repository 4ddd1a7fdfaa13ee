//! One-pass evaluation: IoU traces, success curves, AUC and plots.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::world::Attributes;

/// Overlap thresholds 0.00, 0.01, …, 1.00.
pub fn thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

pub fn iou_trace(predicted: &[BBox], truth: &[BBox]) -> Result<Vec<f64>> {
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predicted boxes for {} ground-truth boxes",
            predicted.len(),
            truth.len()
        )));
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| p.iou(t)).collect())
}

/// Fraction of frames whose IoU exceeds each threshold.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    thresholds()
        .iter()
        .map(|&t| {
            if ious.is_empty() {
                0.0
            } else {
                ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
            }
        })
        .collect()
}

/// Trapezoidal area under a curve sampled at [`thresholds`].
pub fn auc(curve: &[f64]) -> f64 {
    if curve.len() < 2 {
        return 0.0;
    }
    let dx = 1.0 / (curve.len() - 1) as f64;
    curve.windows(2).map(|w| (w[0] + w[1]) / 2.0 * dx).sum()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceReport {
    pub name: String,
    pub ious: Vec<f64>,
    pub mean_iou: f64,
    pub auc: f64,
    pub attributes: Vec<&'static str>,
}

impl SequenceReport {
    pub fn new(
        name: &str,
        predicted: &[BBox],
        truth: &[BBox],
        attributes: Attributes,
    ) -> Result<Self> {
        let ious = iou_trace(predicted, truth)?;
        Ok(SequenceReport {
            name: name.to_string(),
            mean_iou: mean(&ious),
            auc: auc(&success_curve(&ious)),
            attributes: Attributes::NAMES
                .iter()
                .zip(attributes.flags())
                .filter(|(_, f)| *f)
                .map(|(n, _)| *n)
                .collect(),
            ious,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributeScore {
    pub attribute: &'static str,
    pub sequences: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FpsStats {
    pub mean_fps: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
}

impl FpsStats {
    /// Statistics of per-frame latencies in seconds.
    pub fn from_seconds(seconds: &[f64]) -> Option<Self> {
        if seconds.is_empty() {
            return None;
        }
        let mut ms: Vec<f64> = seconds.iter().map(|s| s * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let q = |p: f64| ms[((p * (ms.len() - 1) as f64).round() as usize).min(ms.len() - 1)];
        let mean_ms = mean(&ms);
        Some(FpsStats {
            mean_fps: if mean_ms > 0.0 { 1e3 / mean_ms } else { 0.0 },
            mean_ms,
            median_ms: q(0.5),
            p99_ms: q(0.99),
        })
    }
}

/// Pooled one-pass evaluation of one tracker over several sequences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub tracker: String,
    pub thresholds: Vec<f64>,
    pub success: Vec<f64>,
    pub auc: f64,
    pub mean_iou: f64,
    pub frames: usize,
    pub per_attribute: Vec<AttributeScore>,
    pub sequences: Vec<SequenceReport>,
    pub fps: Option<FpsStats>,
}

impl EvalReport {
    /// Sequences are sorted by name so the report does not depend on the
    /// order they were evaluated in.
    pub fn new(tracker: &str, mut sequences: Vec<SequenceReport>, seconds: &[f64]) -> Self {
        sequences.sort_by(|a, b| a.name.cmp(&b.name));
        let all: Vec<f64> = sequences
            .iter()
            .flat_map(|s| s.ious.iter().copied())
            .collect();
        let success = success_curve(&all);
        let per_attribute = Attributes::NAMES
            .iter()
            .filter_map(|&a| {
                let pooled: Vec<f64> = sequences
                    .iter()
                    .filter(|s| s.attributes.contains(&a))
                    .flat_map(|s| s.ious.iter().copied())
                    .collect();
                let n = sequences
                    .iter()
                    .filter(|s| s.attributes.contains(&a))
                    .count();
                (n > 0).then(|| AttributeScore {
                    attribute: a,
                    sequences: n,
                    auc: auc(&success_curve(&pooled)),
                })
            })
            .collect();
        EvalReport {
            tracker: tracker.to_string(),
            thresholds: thresholds(),
            auc: auc(&success),
            success,
            mean_iou: mean(&all),
            frames: all.len(),
            per_attribute,
            sequences,
            fps: FpsStats::from_seconds(seconds),
        }
    }

    /// `threshold,success` rows.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold,success\n");
        for (t, v) in self.thresholds.iter().zip(&self.success) {
            let _ = writeln!(s, "{t:.2},{v}");
        }
        s
    }

    /// `sequence,frame,iou` rows.
    pub fn iou_csv(&self) -> String {
        let mut s = String::from("sequence,frame,iou\n");
        for q in &self.sequences {
            for (i, v) in q.ious.iter().enumerate() {
                let _ = writeln!(s, "{},{i},{v}", q.name);
            }
        }
        s
    }
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Success plot of several trackers as a standalone SVG document.
pub fn success_plot_svg(curves: &[(&str, &[f64], f64)]) -> String {
    let (w, h, left, top, pw, ph) = (480.0, 360.0, 60.0, 20.0, 380.0, 280.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let x = left + f * pw;
        let y = top + ph - f * ph;
        let _ = writeln!(
            s,
            r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#ccc"/><text x="{x}" y="{}" text-anchor="middle">{f:.1}</text>"##,
            top,
            top + ph,
            top + ph + 16.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ccc"/><text x="{}" y="{}" text-anchor="end">{f:.1}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Overlap threshold</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">Success rate</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (label, curve, area)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let n = curve.len().max(2) - 1;
        let points: Vec<String> = curve
            .iter()
            .enumerate()
            .map(|(i, v)| {
                format!(
                    "{:.2},{:.2}",
                    left + i as f64 / n as f64 * pw,
                    top + ph - v * ph
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{} [{area:.3}]</text>"#,
            left + pw - 150.0,
            ly - 4.0,
            left + pw - 130.0,
            ly - 4.0,
            left + pw - 125.0,
            ly,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_tracker() {
        let b: Vec<BBox> = (0..5)
            .map(|i| BBox::new(i as f64, 2.0, 10.0, 8.0))
            .collect();
        let ious = iou_trace(&b, &b).unwrap();
        let c = success_curve(&ious);
        assert!(c[..100].iter().all(|v| *v == 1.0));
        assert!((auc(&c) - 1.0).abs() <= 0.005 + 1e-12);
    }

    #[test]
    fn disjoint_tracker() {
        let p = vec![BBox::new(0.0, 0.0, 2.0, 2.0); 4];
        let t = vec![BBox::new(10.0, 10.0, 2.0, 2.0); 4];
        let c = success_curve(&iou_trace(&p, &t).unwrap());
        assert!(c.iter().all(|v| *v == 0.0));
        assert_eq!(auc(&c), 0.0);
    }

    #[test]
    fn three_frame_hand_case() {
        let c = success_curve(&[1.0, 0.5, 0.0]);
        assert!((c[40] - 2.0 / 3.0).abs() < 1e-15);
        assert!((c[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((c[50] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let b = vec![BBox::new(0.0, 0.0, 1.0, 1.0); 3];
        assert!(iou_trace(&b[..2], &b).is_err());
    }

    #[test]
    fn report_pools_frames_and_splits_attributes() {
        let b = vec![BBox::new(0.0, 0.0, 4.0, 4.0); 3];
        let off = vec![BBox::new(40.0, 0.0, 4.0, 4.0); 3];
        let occ = Attributes {
            occlusion: true,
            ..Attributes::default()
        };
        let r = EvalReport::new(
            "t",
            vec![
                SequenceReport::new("b", &off, &b, occ).unwrap(),
                SequenceReport::new("a", &b, &b, Attributes::default()).unwrap(),
            ],
            &[0.01, 0.02],
        );
        assert_eq!(r.sequences[0].name, "a");
        assert_eq!(r.frames, 6);
        assert!((r.mean_iou - 0.5).abs() < 1e-15);
        assert_eq!(r.per_attribute.len(), 1);
        assert_eq!(r.per_attribute[0].auc, 0.0);
        assert_eq!(r.thresholds.len(), 101);
        assert_eq!(r.curve_csv().lines().count(), 102);
        let fps = r.fps.unwrap();
        assert!((fps.mean_fps - 1e3 / 15.0).abs() < 1e-9);
    }

    #[test]
    fn svg_is_well_formed() {
        let c = success_curve(&[0.9, 0.3]);
        let svg = success_plot_svg(&[("MLT", &c, auc(&c)), ("a<b", &c, 0.1)]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }

    proptest! {
        #[test]
        fn curve_is_monotone_and_auc_bounded(ious in proptest::collection::vec(0.0f64..=1.0, 0..60)) {
            let c = success_curve(&ious);
            prop_assert_eq!(c.len(), 101);
            prop_assert!(c.windows(2).all(|w| w[1] <= w[0]));
            let a = auc(&c);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
