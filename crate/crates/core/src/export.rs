//! Plot-data files and their SVG rendering.
//!
//! The CSV files written here are the numeric record of a run; the SVG
//! renderer reads them back and draws them without recomputing anything.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{max_eigenvalue, psd_factor, Matrix, Vector};
use crate::model::{ChanceConstraintSet, MjlsModel};
use crate::montecarlo::Trajectory;
use crate::propagation::{CovarianceTrajectory, MeanTrajectory};

pub const FAN_CSV: &str = "plot_state_fan.csv";
pub const MEAN_CSV: &str = "plot_state_mean.csv";
pub const NORMS_CSV: &str = "plot_control_norms.csv";
pub const ENVELOPE_CSV: &str = "plot_control_envelope.csv";
pub const SCATTER_CSV: &str = "plot_terminal_scatter.csv";
pub const ELLIPSES_CSV: &str = "plot_terminal_ellipses.csv";
pub const META_JSON: &str = "plot_meta.json";

pub const FAN_SVG: &str = "state_fan.svg";
pub const NORMS_SVG: &str = "control_norms.svg";
pub const TERMINAL_SVG: &str = "terminal.svg";

/// Squared radius of the ellipse holding 95% of a 2-D Gaussian:
/// the 0.95 quantile of χ² with two degrees of freedom, `−2 ln 0.05 ≈ 5.991`.
pub fn chi2_95_2dof() -> f64 {
    -2.0 * 0.05_f64.ln()
}

const ELLIPSE_POINTS: usize = 96;
/// Sample trajectories drawn in the fan figure.
const FAN_DRAWN: usize = 300;

#[derive(Debug, Serialize, Deserialize)]
pub struct FanRow {
    pub sample: usize,
    pub k: usize,
    pub mode: usize,
    pub x1: f64,
    pub x2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeanRow {
    pub k: usize,
    pub mu1: f64,
    pub mu2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NormRow {
    pub sample: usize,
    pub k: usize,
    pub mode: usize,
    pub norm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub k: usize,
    pub mode: usize,
    pub ubar_norm: f64,
    /// `‖ū_k(i)‖ + √((n_u/ε_u) λ_max(Y_k(i)))`.
    pub predicted: f64,
    pub bound: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScatterRow {
    pub sample: usize,
    pub mode: usize,
    pub x1: f64,
    pub x2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EllipseRow {
    /// `sample`, `predicted` or `constraint`.
    pub kind: String,
    pub index: usize,
    pub x1: f64,
    pub x2: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PlotHalfPlane {
    pub a: [f64; 2],
    pub b: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PlotMeta {
    pub n_x: usize,
    pub num_modes: usize,
    pub horizon: usize,
    /// State half-planes projected on the first two coordinates; the
    /// region `aᵀx + b > 0` is infeasible.
    pub halfplanes: Vec<PlotHalfPlane>,
    pub mu_f: [f64; 2],
    pub ellipse_scale: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    for r in rows {
        w.serialize(r).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    w.flush().map_err(|e| format!("{}: {e}", path.display()))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| format!("{}: {e}", path.display()))
}

fn xy(v: &Vector) -> (f64, f64) {
    (v[0], if v.len() > 1 { v[1] } else { 0.0 })
}

fn plane2(m: &Matrix) -> Matrix {
    let n = m.nrows().min(2);
    let mut out = Matrix::identity(2, 2) * 0.0;
    out.view_mut((0, 0), (n, n)).copy_from(&m.view((0, 0), (n, n)));
    out
}

/// Boundary of `{c + √scale · F z : ‖z‖ = 1}` with `F Fᵀ = cov`.
pub fn ellipse(center: (f64, f64), cov: &Matrix, scale: f64) -> Vec<(f64, f64)> {
    let f = psd_factor(&plane2(cov)) * scale.sqrt();
    (0..=ELLIPSE_POINTS)
        .map(|j| {
            let th = std::f64::consts::TAU * j as f64 / ELLIPSE_POINTS as f64;
            let p = &f * Vector::from_vec(vec![th.cos(), th.sin()]);
            (center.0 + p[0], center.1 + p[1])
        })
        .collect()
}

/// Writes every plot-data file for one Monte Carlo run into `dir` and
/// returns the file names written.
pub fn write_plot_data(
    dir: &Path,
    model: &MjlsModel,
    cc: &ChanceConstraintSet,
    tau: &MeanTrajectory,
    xi: &CovarianceTrajectory,
    samples: &[Trajectory],
    empirical_terminal: (&Vector, &Matrix),
) -> Result<Vec<String>, String> {
    let t = model.horizon;
    let mut fan = Vec::with_capacity(samples.len() * (t + 1));
    let mut norms = Vec::with_capacity(samples.len() * t);
    let mut scatter = Vec::with_capacity(samples.len());
    for (n, s) in samples.iter().enumerate() {
        for (k, x) in s.states.iter().enumerate() {
            let (x1, x2) = xy(x);
            fan.push(FanRow { sample: n, k, mode: s.modes[k], x1, x2 });
        }
        for (k, u) in s.controls.iter().enumerate() {
            norms.push(NormRow { sample: n, k, mode: s.modes[k], norm: u.norm() });
        }
        let (x1, x2) = xy(&s.states[t]);
        scatter.push(ScatterRow { sample: n, mode: s.modes[t], x1, x2 });
    }
    let means: Vec<MeanRow> = tau
        .mu
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let (mu1, mu2) = xy(m);
            MeanRow { k, mu1, mu2 }
        })
        .collect();
    let mut envelope = Vec::new();
    for k in 0..t {
        for i in 0..model.num_modes() {
            let (bound, risk) = match &cc.control_norm {
                Some(c) => (Some(c.u_max[i]), c.risk[i]),
                None => (None, 0.05),
            };
            let ubar_norm = tau.ubar[k][i].norm();
            let spread = (model.n_u as f64 / risk * max_eigenvalue(&xi.y[k][i]).max(0.0)).sqrt();
            envelope.push(EnvelopeRow { k, mode: i, ubar_norm, predicted: ubar_norm + spread, bound });
        }
    }
    let scale = chi2_95_2dof();
    let mut ellipses = Vec::new();
    let mut push = |kind: &str, pts: Vec<(f64, f64)>| {
        for (index, (x1, x2)) in pts.into_iter().enumerate() {
            ellipses.push(EllipseRow { kind: kind.into(), index, x1, x2 });
        }
    };
    push("sample", ellipse(xy(empirical_terminal.0), empirical_terminal.1, scale));
    push("predicted", ellipse(xy(&tau.mu[t]), &xi.sigma[t], scale));
    push("constraint", ellipse(xy(&model.mu_f), &model.sigma_f, scale));

    let meta = PlotMeta {
        n_x: model.n_x,
        num_modes: model.num_modes(),
        horizon: t,
        halfplanes: cc
            .state_halfplanes
            .iter()
            .map(|h| PlotHalfPlane {
                a: [h.normal[0], h.normal.get(1).copied().unwrap_or(0.0)],
                b: h.offset,
            })
            .collect(),
        mu_f: {
            let (a, b) = xy(&model.mu_f);
            [a, b]
        },
        ellipse_scale: scale,
    };
    write_csv(&dir.join(FAN_CSV), &fan)?;
    write_csv(&dir.join(MEAN_CSV), &means)?;
    write_csv(&dir.join(NORMS_CSV), &norms)?;
    write_csv(&dir.join(ENVELOPE_CSV), &envelope)?;
    write_csv(&dir.join(SCATTER_CSV), &scatter)?;
    write_csv(&dir.join(ELLIPSES_CSV), &ellipses)?;
    let meta_text = serde_json::to_string_pretty(&meta).map_err(|e| e.to_string())?;
    fs::write(dir.join(META_JSON), meta_text).map_err(|e| format!("{}: {e}", dir.join(META_JSON).display()))?;
    Ok([FAN_CSV, MEAN_CSV, NORMS_CSV, ENVELOPE_CSV, SCATTER_CSV, ELLIPSES_CSV, META_JSON]
        .iter()
        .map(|s| s.to_string())
        .collect())
}

// ---------------------------------------------------------------------------
// SVG

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 56.0;
const MODE_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn mode_color(i: usize) -> &'static str {
    MODE_COLORS[i % MODE_COLORS.len()]
}

#[derive(Clone, Copy)]
struct Bounds {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Bounds {
    fn around(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut b = Bounds { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for (x, y) in points {
            if x.is_finite() && y.is_finite() {
                b.x0 = b.x0.min(x);
                b.x1 = b.x1.max(x);
                b.y0 = b.y0.min(y);
                b.y1 = b.y1.max(y);
            }
        }
        if !b.x0.is_finite() {
            return Bounds { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        let mx = 0.05 * (b.x1 - b.x0).max(1e-9);
        let my = 0.05 * (b.y1 - b.y0).max(1e-9);
        Bounds { x0: b.x0 - mx, x1: b.x1 + mx, y0: b.y0 - my, y1: b.y1 + my }
    }

    fn corners(&self) -> Vec<(f64, f64)> {
        vec![(self.x0, self.y0), (self.x1, self.y0), (self.x1, self.y1), (self.x0, self.y1)]
    }
}

struct Svg {
    out: String,
    b: Bounds,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

impl Svg {
    fn new(b: Bounds, title: &str, xlabel: &str, ylabel: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 12.0);
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{ylabel}</text>"#,
            H / 2.0,
            H / 2.0
        );
        let mut svg = Svg { out, b };
        svg.axes();
        svg
    }

    fn px(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let b = &self.b;
        (PAD + (x - b.x0) / (b.x1 - b.x0) * (W - 2.0 * PAD), H - PAD - (y - b.y0) / (b.y1 - b.y0) * (H - 2.0 * PAD))
    }

    fn axes(&mut self) {
        let _ = writeln!(
            self.out,
            r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        for j in 0..=4 {
            let f = j as f64 / 4.0;
            let xv = self.b.x0 + f * (self.b.x1 - self.b.x0);
            let yv = self.b.y0 + f * (self.b.y1 - self.b.y0);
            let (px, _) = self.px((xv, self.b.y0));
            let (_, py) = self.px((self.b.x0, yv));
            let _ = writeln!(self.out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, fmt(px), H - PAD + 16.0, fmt(xv));
            let _ = writeln!(self.out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, fmt(py + 4.0), fmt(yv));
        }
    }

    fn points_attr(&self, pts: &[(f64, f64)]) -> String {
        pts.iter()
            .map(|&p| {
                let (x, y) = self.px(p);
                format!("{},{}", fmt(x), fmt(y))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn polyline(&mut self, pts: &[(f64, f64)], style: &str) {
        let attr = self.points_attr(pts);
        let _ = writeln!(self.out, r#"<polyline points="{attr}" fill="none" {style}/>"#);
    }

    fn polygon(&mut self, pts: &[(f64, f64)], style: &str) {
        if pts.len() < 3 {
            return;
        }
        let attr = self.points_attr(pts);
        let _ = writeln!(self.out, r#"<polygon points="{attr}" {style}/>"#);
    }

    fn circle(&mut self, p: (f64, f64), r: f64, style: &str) {
        let (x, y) = self.px(p);
        let _ = writeln!(self.out, r#"<circle cx="{}" cy="{}" r="{r}" {style}/>"#, fmt(x), fmt(y));
    }

    fn legend(&mut self, entries: &[(&str, String)]) {
        for (j, (color, label)) in entries.iter().enumerate() {
            let y = PAD + 14.0 + 16.0 * j as f64;
            let x = W - PAD - 150.0;
            let _ = writeln!(self.out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
            let _ = writeln!(self.out, r#"<text x="{}" y="{y}">{label}</text>"#, x + 14.0);
        }
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Part of the convex polygon `poly` where `aᵀp + b ≥ 0`.
fn clip_halfplane(poly: &[(f64, f64)], a: [f64; 2], b: f64) -> Vec<(f64, f64)> {
    let f = |p: (f64, f64)| a[0] * p.0 + a[1] * p.1 + b;
    let mut out = Vec::new();
    for j in 0..poly.len() {
        let (p, q) = (poly[j], poly[(j + 1) % poly.len()]);
        let (fp, fq) = (f(p), f(q));
        if fp >= 0.0 {
            out.push(p);
        }
        if (fp >= 0.0) != (fq >= 0.0) {
            let t = fp / (fp - fq);
            out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    out
}

/// State trajectories in the `(x₁, x₂)` plane with infeasible regions shaded.
pub fn render_fan(fan: &[FanRow], means: &[MeanRow], meta: &PlotMeta) -> String {
    let mut b = Bounds::around(fan.iter().map(|r| (r.x1, r.x2)).chain(means.iter().map(|m| (m.mu1, m.mu2))));
    for h in &meta.halfplanes {
        // Keep a sliver of each infeasible region in view.
        if h.a[0] == 0.0 && h.a[1] != 0.0 {
            let y = -h.b / h.a[1];
            let pad = 0.1 * (b.y1 - b.y0);
            b.y0 = b.y0.min(y - pad);
            b.y1 = b.y1.max(y + pad);
        }
    }
    let mut svg = Svg::new(b, "State trajectories", "x1", "x2");
    for h in &meta.halfplanes {
        let region = clip_halfplane(&b.corners(), h.a, h.b);
        svg.polygon(&region, r##"fill="#888888" fill-opacity="0.35" stroke="none""##);
    }
    let mut current: Vec<(f64, f64)> = Vec::new();
    let mut last_sample = usize::MAX;
    for r in fan.iter().filter(|r| r.sample < FAN_DRAWN) {
        if r.sample != last_sample && !current.is_empty() {
            svg.polyline(&current, r##"stroke="#1f77b4" stroke-opacity="0.25" stroke-width="0.8""##);
            current.clear();
        }
        last_sample = r.sample;
        current.push((r.x1, r.x2));
    }
    if !current.is_empty() {
        svg.polyline(&current, r##"stroke="#1f77b4" stroke-opacity="0.25" stroke-width="0.8""##);
    }
    let mean: Vec<(f64, f64)> = means.iter().map(|m| (m.mu1, m.mu2)).collect();
    svg.polyline(&mean, r#"stroke="black" stroke-width="2""#);
    svg.circle((meta.mu_f[0], meta.mu_f[1]), 4.0, r##"fill="#d62728""##);
    svg.legend(&[
        ("#1f77b4", "sample paths".into()),
        ("black", "mean".into()),
        ("#d62728", "target mean".into()),
        ("#888888", "infeasible".into()),
    ]);
    svg.finish()
}

/// Control norms per step, colored by mode, with the predicted envelopes.
pub fn render_control_norms(norms: &[NormRow], envelope: &[EnvelopeRow], meta: &PlotMeta) -> String {
    let b = Bounds::around(
        norms
            .iter()
            .map(|r| (r.k as f64, r.norm))
            .chain(envelope.iter().map(|e| (e.k as f64, e.predicted)))
            .chain(envelope.iter().filter_map(|e| e.bound.map(|u| (e.k as f64, u))))
            .chain(std::iter::once((0.0, 0.0))),
    );
    let mut svg = Svg::new(b, "Control norms", "k", "|u_k|");
    for r in norms {
        let offset = (r.mode as f64 - 0.5 * (meta.num_modes as f64 - 1.0)) * 0.12;
        svg.circle((r.k as f64 + offset, r.norm), 1.2, &format!(r#"fill="{}" fill-opacity="0.3""#, mode_color(r.mode)));
    }
    for i in 0..meta.num_modes {
        let line: Vec<(f64, f64)> = envelope.iter().filter(|e| e.mode == i).map(|e| (e.k as f64, e.predicted)).collect();
        svg.polyline(&line, &format!(r#"stroke="{}" stroke-width="2""#, mode_color(i)));
        let bound: Vec<(f64, f64)> =
            envelope.iter().filter(|e| e.mode == i).filter_map(|e| e.bound.map(|u| (e.k as f64, u))).collect();
        if !bound.is_empty() {
            svg.polyline(&bound, r#"stroke="black" stroke-dasharray="6 4""#);
        }
    }
    let labels: Vec<(&str, String)> = (0..meta.num_modes).map(|i| (mode_color(i), format!("mode {}", i + 1))).collect();
    svg.legend(&labels);
    svg.finish()
}

/// Terminal states with the sample, predicted and constraint ellipses.
pub fn render_terminal(scatter: &[ScatterRow], ellipses: &[EllipseRow]) -> String {
    let b = Bounds::around(scatter.iter().map(|r| (r.x1, r.x2)).chain(ellipses.iter().map(|e| (e.x1, e.x2))));
    let mut svg = Svg::new(b, "Terminal states (95% ellipses)", "x1", "x2");
    for r in scatter {
        svg.circle((r.x1, r.x2), 1.5, &format!(r#"fill="{}" fill-opacity="0.35""#, mode_color(r.mode)));
    }
    let styles = [("sample", "#2ca02c"), ("predicted", "#ff7f0e"), ("constraint", "black")];
    for (kind, color) in styles {
        let pts: Vec<(f64, f64)> = ellipses.iter().filter(|e| e.kind == kind).map(|e| (e.x1, e.x2)).collect();
        svg.polyline(&pts, &format!(r#"stroke="{color}" stroke-width="2""#));
    }
    svg.legend(&styles.map(|(k, c)| (c, format!("{k} covariance"))));
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_quantile() {
        assert!((chi2_95_2dof() - 5.991_464_547_107_98).abs() < 1e-12);
    }

    #[test]
    fn ellipse_radius_matches_scale() {
        let cov = Matrix::identity(2, 2) * 4.0;
        for (x, y) in ellipse((1.0, -1.0), &cov, 9.0) {
            assert!((((x - 1.0).powi(2) + (y + 1.0).powi(2)).sqrt() - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_keeps_infeasible_side() {
        let square = vec![(0.0, -20.0), (10.0, -20.0), (10.0, 0.0), (0.0, 0.0)];
        // −x₂ − 10 ≥ 0  ⇔  x₂ ≤ −10
        let region = clip_halfplane(&square, [0.0, -1.0], -10.0);
        assert_eq!(region.len(), 4);
        assert!(region.iter().all(|p| p.1 <= -10.0 + 1e-12));
    }
}
