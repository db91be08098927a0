//! Test-frame evaluation: ROI-mean MSE against held-out frames, a
//! persistence baseline, CSV report tables, and deterministic SVG plots of
//! time-activity curves.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{extract_roi_tac, FrameStack, RoiMask, Tac};
use crate::error::{Error, Result};

/// Prediction method a report row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ctm,
    Persistence,
    Rdnet,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ctm => "ctm",
            Method::Persistence => "persistence",
            Method::Rdnet => "rdnet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One ROI x method entry of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub roi_name: String,
    pub method: Method,
    pub mse: f64,
    pub n_test_frames: usize,
}

/// Mean squared error between ROI-mean time-activity curves of `truth` and
/// `pred` over the test frames. `pred` must carry exactly the frames of
/// `truth` from index `split` on, with matching times.
pub fn evaluate_mse(
    truth: &FrameStack,
    pred: &FrameStack,
    rois: &[RoiMask],
    split: usize,
    method: Method,
) -> Result<Vec<EvalRow>> {
    let nt = truth.times.len();
    if split >= nt {
        return Err(Error::Argument(format!(
            "split {split} leaves no test frames out of {nt}"
        )));
    }
    let n_test = nt - split;
    if pred.times.len() != n_test {
        return Err(Error::Argument(format!(
            "prediction has {} frames, expected {n_test} test frames",
            pred.times.len()
        )));
    }
    if (pred.nx, pred.ny) != (truth.nx, truth.ny) {
        return Err(Error::Shape(format!(
            "prediction grid {}x{} does not match truth {}x{}",
            pred.nx, pred.ny, truth.nx, truth.ny
        )));
    }
    for (a, b) in truth.times[split..].iter().zip(pred.times.iter()) {
        if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
            return Err(Error::Argument(format!(
                "prediction frame time {b} does not match truth time {a}"
            )));
        }
    }
    let mut rows = Vec::with_capacity(rois.len());
    for roi in rois {
        let truth_tac = extract_roi_tac(truth, roi)?;
        let pred_tac = extract_roi_tac(pred, roi)?;
        let mse = truth_tac.values[split..]
            .iter()
            .zip(pred_tac.values.iter())
            .map(|(t, p)| (t - p) * (t - p))
            .sum::<f64>()
            / n_test as f64;
        if !mse.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite MSE for roi {}",
                roi.name
            )));
        }
        rows.push(EvalRow {
            roi_name: roi.name.clone(),
            method,
            mse,
            n_test_frames: n_test,
        });
    }
    Ok(rows)
}

/// No-learning baseline: every test frame is a copy of the last training
/// frame `I_{split-1}`.
pub fn persistence_baseline(stack: &FrameStack, split: usize) -> Result<FrameStack> {
    let nt = stack.times.len();
    if split == 0 || split >= nt {
        return Err(Error::Argument(format!(
            "split must be in 1..{nt}, got {split}"
        )));
    }
    let last_train = stack.data.index_axis(ndarray::Axis(0), split - 1);
    let n_test = nt - split;
    let mut data = Array3::zeros((n_test, stack.ny, stack.nx));
    for mut frame in data.axis_iter_mut(ndarray::Axis(0)) {
        frame.assign(&last_train);
    }
    FrameStack::new(stack.nx, stack.ny, stack.times[split..].to_vec(), data)
}

/// Format with `sig` significant digits in plain decimal notation.
fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return format!("{:.*}", sig - 1, 0.0);
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Write rows as CSV with header `roi,method,mse,n_test_frames`, sorted by
/// (roi, method), MSE printed with 6 significant digits.
pub fn write_report_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Argument("report needs at least one row".into()));
    }
    let mut sorted: Vec<&EvalRow> = rows.iter().collect();
    sorted.sort_by(|a, b| (a.roi_name.as_str(), a.method).cmp(&(b.roi_name.as_str(), b.method)));
    let mut out = String::from("roi,method,mse,n_test_frames\n");
    for row in sorted {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.roi_name,
            row.method,
            format_sig(row.mse, 6),
            row.n_test_frames
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 50.0;

/// Deterministic palette for prediction series.
const COLORS: [&str; 6] = ["#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];

/// Render a standalone SVG chart of a measured curve and predictions.
/// Measured points use solid markers for training frames (index < `split`)
/// and hollow markers after; each prediction gets a polyline plus markers
/// and a legend entry.
pub fn render_tac_svg(
    truth: &Tac,
    preds: &[(String, Tac)],
    split: usize,
    path: &Path,
) -> Result<()> {
    let nt = truth.times.len();
    if split > nt {
        return Err(Error::Argument(format!(
            "split {split} exceeds curve length {nt}"
        )));
    }
    for (label, tac) in preds {
        for t in &tac.times {
            if !truth.times.iter().any(|u| (u - t).abs() <= 1e-12 * t.abs().max(1.0)) {
                return Err(Error::Argument(format!(
                    "prediction `{label}` has time {t} absent from the measured curve"
                )));
            }
        }
    }
    let (mut tmin, mut tmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let all_series = std::iter::once(truth).chain(preds.iter().map(|(_, t)| t));
    for tac in all_series {
        for (&t, &v) in tac.times.iter().zip(tac.values.iter()) {
            tmin = tmin.min(t);
            tmax = tmax.max(t);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
    }
    if !tmin.is_finite() {
        return Err(Error::Argument("cannot plot an empty curve".into()));
    }
    if tmax - tmin < 1e-12 {
        tmax = tmin + 1.0;
    }
    if vmax - vmin < 1e-12 {
        vmax = vmin + 1.0;
    }
    let px = |t: f64| MARGIN_L + (t - tmin) / (tmax - tmin) * (SVG_W - MARGIN_L - MARGIN_R);
    let py = |v: f64| SVG_H - MARGIN_B - (v - vmin) / (vmax - vmin) * (SVG_H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        SVG_H - MARGIN_B,
        SVG_W - MARGIN_R,
        SVG_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        MARGIN_T,
        MARGIN_L,
        SVG_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"14\">time (min)</text>\n",
        (MARGIN_L + SVG_W - MARGIN_R) / 2.0,
        SVG_H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 16 {:.2})\">activity</text>\n",
        (MARGIN_T + SVG_H - MARGIN_B) / 2.0,
        (MARGIN_T + SVG_H - MARGIN_B) / 2.0
    ));
    // tick labels at the extremes
    for (t, anchor) in [(tmin, "start"), (tmax, "end")] {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"{anchor}\" font-size=\"12\">{}</text>\n",
            px(t),
            SVG_H - MARGIN_B + 18.0,
            format_sig(t, 4)
        ));
    }
    for v in [vmin, vmax] {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"12\">{}</text>\n",
            MARGIN_L - 6.0,
            py(v) + 4.0,
            format_sig(v, 4)
        ));
    }
    // prediction polylines and markers
    for (i, (_, tac)) in preds.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = tac
            .times
            .iter()
            .zip(tac.values.iter())
            .map(|(&t, &v)| format!("{:.2},{:.2}", px(t), py(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.join(" ")
        ));
        for (&t, &v) in tac.times.iter().zip(tac.values.iter()) {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\" stroke=\"{color}\"/>\n",
                px(t),
                py(v)
            ));
        }
    }
    // measured curve: connecting line, then solid/hollow markers
    let truth_points: Vec<String> = truth
        .times
        .iter()
        .zip(truth.values.iter())
        .map(|(&t, &v)| format!("{:.2},{:.2}", px(t), py(v)))
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" stroke-dasharray=\"4 3\"/>\n",
        truth_points.join(" ")
    ));
    for (j, (&t, &v)) in truth.times.iter().zip(truth.values.iter()).enumerate() {
        let fill = if j < split { "#1f77b4" } else { "white" };
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{fill}\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n",
            px(t),
            py(v)
        ));
    }
    // legend
    let legend_x = SVG_W - MARGIN_R + 12.0;
    let mut legend_y = MARGIN_T + 14.0;
    svg.push_str(&format!(
        "<text x=\"{legend_x:.2}\" y=\"{legend_y:.2}\" font-size=\"13\" fill=\"#1f77b4\">measured</text>\n"
    ));
    for (i, (label, _)) in preds.iter().enumerate() {
        legend_y += 18.0;
        let color = COLORS[i % COLORS.len()];
        svg.push_str(&format!(
            "<text x=\"{legend_x:.2}\" y=\"{legend_y:.2}\" font-size=\"13\" fill=\"{color}\">{}</text>\n",
            xml_escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3, Axis};

    fn stack(nt: usize, fill: impl Fn(usize) -> f64) -> FrameStack {
        let mut data = Array3::zeros((nt, 4, 4));
        for (j, mut frame) in data.axis_iter_mut(Axis(0)).enumerate() {
            frame.fill(fill(j));
        }
        let times: Vec<f64> = (0..nt).map(|j| j as f64 + 1.0).collect();
        FrameStack::new(4, 4, times, data).unwrap()
    }

    fn full_roi(name: &str) -> RoiMask {
        RoiMask::new(name, Array2::from_elem((4, 4), true)).unwrap()
    }

    fn test_slice(truth: &FrameStack, split: usize) -> FrameStack {
        let nt = truth.times.len();
        let data = truth.data.slice(ndarray::s![split..nt, .., ..]).to_owned();
        FrameStack::new(truth.nx, truth.ny, truth.times[split..].to_vec(), data).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let truth = stack(6, |j| j as f64);
        let pred = test_slice(&truth, 4);
        let rois = vec![full_roi("a"), full_roi("b")];
        let rows = evaluate_mse(&truth, &pred, &rois, 4, Method::Rdnet).unwrap();
        assert_eq!(rows.len(), 2);
        for row in rows {
            assert_eq!(row.mse, 0.0);
            assert_eq!(row.n_test_frames, 2);
        }
    }

    #[test]
    fn constant_offset_scores_one() {
        let truth = stack(6, |j| j as f64);
        let mut pred = test_slice(&truth, 4);
        pred.data.mapv_inplace(|v| v + 1.0);
        let rows = evaluate_mse(&truth, &pred, &[full_roi("a")], 4, Method::Ctm).unwrap();
        assert!((rows[0].mse - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hand_mean_of_squares() {
        // ROI-mean errors 1 and 3 on the two test frames -> (1 + 9) / 2 = 5
        let truth = stack(6, |_| 0.0);
        let mut pred = test_slice(&truth, 4);
        pred.data.index_axis_mut(Axis(0), 0).fill(1.0);
        pred.data.index_axis_mut(Axis(0), 1).fill(3.0);
        let rows = evaluate_mse(&truth, &pred, &[full_roi("a")], 4, Method::Rdnet).unwrap();
        assert!((rows[0].mse - 5.0).abs() < 1e-14);
    }

    #[test]
    fn roi_order_does_not_change_row_set() {
        let truth = stack(6, |j| (j * j) as f64);
        let mut pred = test_slice(&truth, 3);
        pred.data.mapv_inplace(|v| v * 1.1);
        let mut half = Array2::from_elem((4, 4), false);
        for x in 0..2 {
            for y in 0..4 {
                half[(y, x)] = true;
            }
        }
        let rois = vec![full_roi("whole"), RoiMask::new("half", half).unwrap()];
        let fwd = evaluate_mse(&truth, &pred, &rois, 3, Method::Rdnet).unwrap();
        let rev_rois: Vec<RoiMask> = rois.iter().rev().cloned().collect();
        let mut rev = evaluate_mse(&truth, &pred, &rev_rois, 3, Method::Rdnet).unwrap();
        rev.reverse();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn mismatched_times_rejected() {
        let truth = stack(6, |j| j as f64);
        let mut pred = test_slice(&truth, 4);
        pred.times[0] += 0.5;
        assert!(evaluate_mse(&truth, &pred, &[full_roi("a")], 4, Method::Rdnet).is_err());
        let short = test_slice(&truth, 5);
        assert!(evaluate_mse(&truth, &short, &[full_roi("a")], 4, Method::Rdnet).is_err());
    }

    #[test]
    fn persistence_repeats_last_training_frame() {
        let truth = stack(6, |j| j as f64);
        let pred = persistence_baseline(&truth, 4).unwrap();
        assert_eq!(pred.times, vec![5.0, 6.0]);
        assert!(pred.data.iter().all(|&v| v == 3.0));
        // static stack scores zero
        let flat = stack(6, |_| 2.0);
        let pred = persistence_baseline(&flat, 4).unwrap();
        let rows = evaluate_mse(&flat, &pred, &[full_roi("a")], 4, Method::Persistence).unwrap();
        assert_eq!(rows[0].mse, 0.0);
        // decaying stack scores positive
        let decay = stack(6, |j| (-(j as f64)).exp());
        let pred = persistence_baseline(&decay, 4).unwrap();
        let rows = evaluate_mse(&decay, &pred, &[full_roi("a")], 4, Method::Persistence).unwrap();
        assert!(rows[0].mse > 0.0);
        assert!(persistence_baseline(&truth, 6).is_err());
        assert!(persistence_baseline(&truth, 0).is_err());
    }

    #[test]
    fn csv_formatting_and_sorting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let rows = vec![
            EvalRow { roi_name: "liver".into(), method: Method::Rdnet, mse: 0.134, n_test_frames: 4 },
            EvalRow { roi_name: "aorta".into(), method: Method::Persistence, mse: 12345.678, n_test_frames: 4 },
            EvalRow { roi_name: "aorta".into(), method: Method::Ctm, mse: 0.0001234567, n_test_frames: 4 },
        ];
        write_report_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "roi,method,mse,n_test_frames");
        assert_eq!(lines[1], "aorta,ctm,0.000123457,4");
        assert_eq!(lines[2], "aorta,persistence,12345.7,4");
        assert_eq!(lines[3], "liver,rdnet,0.134000,4");
        assert!(write_report_csv(&[], &path).is_err());
    }

    #[test]
    fn csv_round_trips_at_six_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let rows = vec![
            EvalRow { roi_name: "r".into(), method: Method::Rdnet, mse: 0.123456789, n_test_frames: 3 },
            EvalRow { roi_name: "r".into(), method: Method::Ctm, mse: 987.654321, n_test_frames: 3 },
        ];
        write_report_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for (line, expect) in text.lines().skip(1).zip([987.654, 0.123457]) {
            let got: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            let rel = (got - expect).abs() / expect;
            assert!(rel < 1e-6, "{got} vs {expect}");
        }
    }

    #[test]
    fn zero_mse_row_formats_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let rows = vec![EvalRow {
            roi_name: "r".into(),
            method: Method::Rdnet,
            mse: 0.0,
            n_test_frames: 2,
        }];
        write_report_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "r,rdnet,0.00000,2");
    }

    fn sample_tacs() -> (Tac, Vec<(String, Tac)>) {
        let times = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let truth = Tac::new(times.clone(), vec![0.0, 2.0, 3.0, 2.5, 2.0]).unwrap();
        let pred = Tac::new(vec![4.0, 5.0], vec![2.4, 2.1]).unwrap();
        (truth, vec![("model".to_string(), pred)])
    }

    #[test]
    fn svg_structure_and_marker_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        let (truth, preds) = sample_tacs();
        render_tac_svg(&truth, &preds, 3, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        let markers = text.matches("<circle").count();
        assert_eq!(markers, 5 + 2);
        // 3 solid training markers, 2 hollow test markers
        assert_eq!(text.matches("fill=\"white\" stroke=\"#1f77b4\"").count(), 2);
        assert!(text.contains("time (min)"));
        assert!(text.contains("measured"));
        assert!(text.contains("model"));
    }

    #[test]
    fn svg_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (truth, preds) = sample_tacs();
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        render_tac_svg(&truth, &preds, 3, &p1).unwrap();
        render_tac_svg(&truth, &preds, 3, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn svg_rejects_foreign_times() {
        let dir = tempfile::tempdir().unwrap();
        let (truth, _) = sample_tacs();
        let bad = vec![(
            "model".to_string(),
            Tac::new(vec![4.5], vec![1.0]).unwrap(),
        )];
        assert!(render_tac_svg(&truth, &bad, 3, &dir.path().join("x.svg")).is_err());
    }
}
