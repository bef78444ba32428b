//! Frame metrics and the motion-trend vector field export.
//!
//! Frame functions take tensors whose two trailing axes are `H×W`; leading
//! axes (batch, channel) index independent planes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    if a.rank() < 2 {
        return Err(Error::shape(op, format!("need at least H×W, got {:?}", a.shape())));
    }
    Ok(())
}

fn planes<S: Scalar>(t: &Tensor<S>) -> (usize, usize, usize) {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    (t.numel() / (h * w).max(1), h, w)
}

pub fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    check_pair("mse", pred, target)?;
    let n = pred.numel() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2)).sum::<f64>() / n)
}

pub fn mae<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    check_pair("mae", pred, target)?;
    let n = pred.numel() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p.as_f64() - t.as_f64()).abs()).sum::<f64>() / n)
}

/// `10·log10(max_val² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP)
}

pub fn psnr<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?, max_val))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, g);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, g);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM over valid 11×11 Gaussian windows, averaged over planes.
/// Dynamic range is 1.
pub fn ssim<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    check_pair("ssim", pred, target)?;
    let (n, h, w) = planes(pred);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("frame {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let (a, b) = (pred.to_f64_vec(), target.to_f64_vec());
    let plane = h * w;
    let total: f64 = (0..n)
        .map(|i| ssim_plane(&a[i * plane..][..plane], &b[i * plane..][..plane], h, w, &g))
        .sum();
    Ok(total / n as f64)
}

/// Gradient difference with exponent `alpha`: sum over forward differences of
/// `| |∇p| − |∇t| |^alpha` along both axes.
pub fn gdl_with_exponent<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, alpha: f64) -> Result<f64> {
    check_pair("gdl", pred, target)?;
    let (n, h, w) = planes(pred);
    let (p, t) = (pred.to_f64_vec(), target.to_f64_vec());
    let term = |i: usize, j: usize| ((p[j] - p[i]).abs() - (t[j] - t[i]).abs()).abs().powf(alpha);
    let mut total = 0.0;
    for s in 0..n {
        let base = s * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = base + y * w + x;
                if x + 1 < w {
                    total += term(i, i + 1);
                }
                if y + 1 < h {
                    total += term(i, i + w);
                }
            }
        }
    }
    Ok(total)
}

pub fn gdl<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    gdl_with_exponent(pred, target, 1.0)
}

/// Hits, misses and false alarms after thresholding at `value ≥ threshold`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsiCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
}

impl CsiCounts {
    pub fn csi(&self) -> f64 {
        csi_from_counts(self.hits, self.misses, self.false_alarms)
    }
}

/// `hits / (hits + misses + false_alarms)`; 1 when all counts are zero.
pub fn csi_from_counts(hits: u64, misses: u64, false_alarms: u64) -> f64 {
    let total = hits + misses + false_alarms;
    if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    }
}

pub fn csi_counts<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, threshold: f64) -> Result<CsiCounts> {
    check_pair("csi", pred, target)?;
    let mut c = CsiCounts::default();
    for (p, t) in pred.data().iter().zip(target.data()) {
        match (p.as_f64() >= threshold, t.as_f64() >= threshold) {
            (true, true) => c.hits += 1,
            (false, true) => c.misses += 1,
            (true, false) => c.false_alarms += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

pub fn csi<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, threshold: f64) -> Result<f64> {
    Ok(csi_counts(pred, target, threshold)?.csi())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Mse,
    Mae,
    Psnr,
    Ssim,
    Gdl,
    Csi(f64),
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Mse => "mse".into(),
            Metric::Mae => "mae".into(),
            Metric::Psnr => "psnr".into(),
            Metric::Ssim => "ssim".into(),
            Metric::Gdl => "gdl".into(),
            Metric::Csi(t) => format!("csi@{t}"),
        }
    }

    /// Parses a comma separated list such as `mse,ssim,csi@0.5`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("metrics", format!("unknown metric {s:?}"));
        Ok(match s.to_ascii_lowercase().as_str() {
            "mse" => Metric::Mse,
            "mae" => Metric::Mae,
            "psnr" => Metric::Psnr,
            "ssim" => Metric::Ssim,
            "gdl" => Metric::Gdl,
            other => {
                let t = other.strip_prefix("csi@").ok_or_else(bad)?;
                Metric::Csi(t.parse().map_err(|_| bad())?)
            }
        })
    }
}

/// Reduction of per-pixel errors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Convention {
    /// MSE / MAE are means over pixels.
    #[default]
    PixelMean,
    /// MSE / MAE are sums over the pixels of each frame (averaged over the
    /// batch), the reporting unit of published moving-digit tables.
    FrameSum,
}

/// Per-step metric values over a predicted horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    /// `per_step[step][metric]`.
    pub per_step: Vec<Vec<f64>>,
}

impl MetricReport {
    /// Evaluates `preds[step]` against `targets[step]` (`N×C×H×W` each).
    /// Predictions are clamped to `[0, 1]` first. Frame metrics are averaged
    /// over batch members; CSI pools its counts over the batch.
    pub fn evaluate<S: Scalar>(
        preds: &[Tensor<S>],
        targets: &[Tensor<S>],
        metrics: &[Metric],
        convention: Convention,
    ) -> Result<Self> {
        if preds.len() != targets.len() {
            return Err(Error::config("horizon", format!("{} predictions for {} targets", preds.len(), targets.len())));
        }
        let mut per_step = Vec::with_capacity(preds.len());
        for (p, t) in preds.iter().zip(targets) {
            check_pair("evaluate", p, t)?;
            let p = p.map(|v| v.max(S::zero()).min(S::one()));
            let n = p.shape()[0];
            let members: Vec<(Tensor<S>, Tensor<S>)> =
                (0..n).map(|b| Ok((p.select(0, b)?, t.select(0, b)?))).collect::<Result<_>>()?;
            let mean_of = |f: &dyn Fn(&Tensor<S>, &Tensor<S>) -> Result<f64>| -> Result<f64> {
                let mut total = 0.0;
                for (a, b) in &members {
                    total += f(a, b)?;
                }
                Ok(total / n as f64)
            };
            let pixels = (p.numel() / n) as f64;
            let scale = match convention {
                Convention::PixelMean => 1.0,
                Convention::FrameSum => pixels,
            };
            let row = metrics
                .iter()
                .map(|m| match m {
                    Metric::Mse => Ok(mean_of(&|a, b| mse(a, b))? * scale),
                    Metric::Mae => Ok(mean_of(&|a, b| mae(a, b))? * scale),
                    Metric::Psnr => mean_of(&|a, b| psnr(a, b, 1.0)),
                    Metric::Ssim => mean_of(&|a, b| ssim(a, b)),
                    Metric::Gdl => mean_of(&|a, b| gdl(a, b)),
                    Metric::Csi(th) => csi(&p, t, *th),
                })
                .collect::<Result<Vec<_>>>()?;
            per_step.push(row);
        }
        Ok(MetricReport { metrics: metrics.to_vec(), per_step })
    }

    /// Mean of the per-step values of `metric`.
    pub fn aggregate(&self, metric: Metric) -> Option<f64> {
        let j = self.metrics.iter().position(|m| *m == metric)?;
        if self.per_step.is_empty() {
            return None;
        }
        Some(self.per_step.iter().map(|r| r[j]).sum::<f64>() / self.per_step.len() as f64)
    }

    /// CSV with columns `step,metric,value`; steps are 1-based and the
    /// aggregate rows use step `mean`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,metric,value\n");
        for (i, row) in self.per_step.iter().enumerate() {
            for (m, v) in self.metrics.iter().zip(row) {
                let _ = writeln!(s, "{},{},{}", i + 1, m.name(), v);
            }
        }
        for m in &self.metrics {
            if let Some(v) = self.aggregate(*m) {
                let _ = writeln!(s, "mean,{},{}", m.name(), v);
            }
        }
        s
    }
}

/// One arrow of the trend field, in encoded-resolution pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arrow {
    pub row: usize,
    pub col: usize,
    pub dy: f64,
    pub dx: f64,
}

/// Averages the vertical and horizontal halves of `d` (`2k²×h×w`) over their
/// channels and rescales so the longest arrow has length 1.
pub fn trend_field<S: Scalar>(d: &Tensor<S>) -> Result<(usize, usize, Vec<Arrow>)> {
    let s = d.shape();
    let taps = if s.len() == 3 && s[0].is_multiple_of(2) { s[0] / 2 } else { 0 };
    let k = (taps as f64).sqrt().round() as usize;
    if taps == 0 || k * k != taps {
        return Err(Error::shape("trend_field", format!("expected 2k²×h×w, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let data = d.data();
    let mut arrows = Vec::with_capacity(plane);
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let dy = (0..taps).map(|i| data[i * plane + p].as_f64()).sum::<f64>() / taps as f64;
            let dx = (0..taps).map(|i| data[(taps + i) * plane + p].as_f64()).sum::<f64>() / taps as f64;
            arrows.push(Arrow { row, col, dy, dx });
        }
    }
    let longest = arrows.iter().map(|a| a.dy.hypot(a.dx)).fold(0.0, f64::max);
    if longest > 0.0 {
        for a in &mut arrows {
            a.dy /= longest;
            a.dx /= longest;
        }
    }
    Ok((h, w, arrows))
}

pub fn trend_csv(arrows: &[Arrow]) -> String {
    let mut s = String::from("row,col,dy,dx\n");
    for a in arrows {
        let _ = writeln!(s, "{},{},{},{}", a.row, a.col, a.dy, a.dx);
    }
    s
}

/// One `<line>` per arrow from the cell centre; arrowheads via a marker.
pub fn trend_svg(h: usize, w: usize, arrows: &[Arrow]) -> String {
    const CELL: f64 = 32.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        w as f64 * CELL,
        h as f64 * CELL,
        w as f64 * CELL,
        h as f64 * CELL
    );
    s.push_str(
        r#"<defs><marker id="head" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto"><path d="M0,0 L6,3 L0,6 z" fill="black"/></marker></defs>"#,
    );
    s.push('\n');
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for a in arrows {
        let x1 = (a.col as f64 + 0.5) * CELL;
        let y1 = (a.row as f64 + 0.5) * CELL;
        let x2 = x1 + a.dx * 0.45 * CELL;
        let y2 = y1 + a.dy * 0.45 * CELL;
        let _ = writeln!(
            s,
            r#"<line x1="{x1:.3}" y1="{y1:.3}" x2="{x2:.3}" y2="{y2:.3}" stroke="black" stroke-width="1.5" marker-end="url(#head)"/>"#
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the field of `d` as CSV to `csv_path` and as SVG next to it.
pub fn trend_field_export<S: Scalar>(d: &Tensor<S>, csv_path: &Path) -> Result<Vec<Arrow>> {
    let (h, w, arrows) = trend_field(d)?;
    atomic_write(csv_path, trend_csv(&arrows).as_bytes())?;
    atomic_write(&csv_path.with_extension("svg"), trend_svg(h, w, &arrows).as_bytes())?;
    Ok(arrows)
}
