//! Minimal SVG figures: bootstrap violins, dot-and-interval panels and the
//! method-vs-method parity scatter. Numbers are written with six
//! significant digits so output is stable across runs.

use std::fmt::Write as _;

use crate::format::sig6;

const WIDTH: f64 = 720.0;
const ROW_H: f64 = 28.0;
const MARGIN_L: f64 = 210.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Axis {
        let (lo, hi) = if hi - lo > 1e-12 { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let pad = 0.05 * (hi - lo);
        Axis {
            lo: lo - pad,
            hi: hi + pad,
            px_lo,
            px_hi,
        }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn ticks(&self) -> Vec<f64> {
        let span = self.hi - self.lo;
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| span / s <= 6.0)
            .unwrap_or(10.0 * mag);
        let mut t = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= self.hi + 1e-12 {
            out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
            t += step;
        }
        out
    }
}

fn header(s: &mut String, height: f64, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
        sig6(WIDTH),
        sig6(height),
        sig6(WIDTH),
        sig6(height)
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        sig6(WIDTH / 2.0),
        esc(title)
    );
}

fn x_axis(s: &mut String, ax: &Axis, y: f64, top: f64, label: &str) {
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        sig6(ax.px_lo),
        sig6(y),
        sig6(ax.px_hi),
        sig6(y)
    );
    for t in ax.ticks() {
        let x = ax.map(t);
        let _ = writeln!(
            s,
            r##"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="#dddddd"/><text x="{0}" y="{3}" text-anchor="middle">{4}</text>"##,
            sig6(x),
            sig6(top),
            sig6(y),
            sig6(y + 16.0),
            sig6(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        sig6((ax.px_lo + ax.px_hi) / 2.0),
        sig6(y + 36.0),
        esc(label)
    );
}

fn zero_line(s: &mut String, ax: &Axis, top: f64, bottom: f64) {
    if ax.lo < 0.0 && ax.hi > 0.0 {
        let x = ax.map(0.0);
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black" stroke-dasharray="4 3"/>"#,
            sig6(x),
            sig6(top),
            sig6(bottom)
        );
    }
}

/// One labelled estimate with a lower and upper bound.
#[derive(Debug, Clone, PartialEq)]
pub struct DotInterval {
    pub label: String,
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
    /// Colour group index.
    pub group: usize,
}

/// Horizontal dot-and-whisker chart, one row per entry.
pub fn dot_interval_svg(rows: &[DotInterval], title: &str, x_label: &str) -> String {
    let height = MARGIN_T + MARGIN_B + ROW_H * rows.len().max(1) as f64;
    let finite = rows
        .iter()
        .flat_map(|r| [r.estimate, r.low, r.high])
        .filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let ax = Axis::new(lo, hi, MARGIN_L, WIDTH - MARGIN_R);
    let bottom = height - MARGIN_B;
    let mut s = String::new();
    header(&mut s, height, title);
    x_axis(&mut s, &ax, bottom, MARGIN_T, x_label);
    zero_line(&mut s, &ax, MARGIN_T, bottom);
    for (i, r) in rows.iter().enumerate() {
        let y = MARGIN_T + ROW_H * (i as f64 + 0.5);
        let color = PALETTE[r.group % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            sig6(MARGIN_L - 8.0),
            sig6(y),
            esc(&r.label)
        );
        if r.low.is_finite() && r.high.is_finite() {
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{2}" x2="{}" y2="{2}" stroke="{3}" stroke-width="2"/>"#,
                sig6(ax.map(r.low)),
                sig6(ax.map(r.high)),
                sig6(y),
                color
            );
        }
        if r.estimate.is_finite() {
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="4" fill="{}"/>"#,
                sig6(ax.map(r.estimate)),
                sig6(y),
                color
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Gaussian kernel density on `grid` with Silverman's bandwidth.
pub fn kde(data: &[f64], grid: &[f64]) -> Vec<f64> {
    let n = data.len() as f64;
    if data.len() < 2 {
        return vec![0.0; grid.len()];
    }
    let sd = crate::stats::sd(data, 1);
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = crate::stats::percentile(&sorted, 0.75) - crate::stats::percentile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = (0.9 * spread * n.powf(-0.2)).max(1e-9);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|g| data.iter().map(|x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// Horizontal violins of bootstrap draws with median tick and 95% band.
pub fn violin_svg(groups: &[(String, Vec<f64>)], title: &str, x_label: &str) -> String {
    let row = 70.0;
    let height = MARGIN_T + MARGIN_B + row * groups.len().max(1) as f64;
    let finite = groups.iter().flat_map(|g| g.1.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    let ax = Axis::new(lo, hi, MARGIN_L, WIDTH - MARGIN_R);
    let bottom = height - MARGIN_B;
    let mut s = String::new();
    header(&mut s, height, title);
    x_axis(&mut s, &ax, bottom, MARGIN_T, x_label);
    zero_line(&mut s, &ax, MARGIN_T, bottom);
    for (i, (label, draws)) in groups.iter().enumerate() {
        let cy = MARGIN_T + row * (i as f64 + 0.5);
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            sig6(MARGIN_L - 8.0),
            sig6(cy),
            esc(label)
        );
        let clean: Vec<f64> = draws.iter().copied().filter(|v| v.is_finite()).collect();
        if clean.len() < 2 {
            continue;
        }
        let grid: Vec<f64> = (0..=80).map(|k| ax.lo + (ax.hi - ax.lo) * k as f64 / 80.0).collect();
        let dens = kde(&clean, &grid);
        let peak = dens.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let half = row * 0.42;
        let mut path = String::new();
        for (k, (g, d)) in grid.iter().zip(&dens).enumerate() {
            let _ = write!(
                path,
                "{}{},{} ",
                if k == 0 { "M" } else { "L" },
                sig6(ax.map(*g)),
                sig6(cy - half * d / peak)
            );
        }
        for (g, d) in grid.iter().zip(&dens).rev() {
            let _ = write!(path, "L{},{} ", sig6(ax.map(*g)), sig6(cy + half * d / peak));
        }
        let _ = writeln!(
            s,
            r#"<path d="{}Z" fill="{}" fill-opacity="0.35" stroke="{}"/>"#,
            path, color, color
        );
        let (lo95, hi95) = crate::stats::percentile_ci95(&clean);
        let mut sorted = clean.clone();
        sorted.sort_by(f64::total_cmp);
        let med = crate::stats::percentile(&sorted, 0.5);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{2}" x2="{}" y2="{2}" stroke="black" stroke-width="2"/>"#,
            sig6(ax.map(lo95)),
            sig6(ax.map(hi95)),
            sig6(cy)
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{}" r="3.5" fill="black"/>"#,
            sig6(ax.map(med)),
            sig6(cy)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// A point in the parity scatter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParityPoint {
    pub x: f64,
    pub y: f64,
    pub label: String,
    pub group: usize,
}

/// Square scatter of method B against method A with the 45° parity line.
pub fn parity_svg(points: &[ParityPoint], title: &str, x_label: &str, y_label: &str) -> String {
    let side = WIDTH - 120.0 - MARGIN_R;
    let height = MARGIN_T + side + MARGIN_B;
    let finite = points.iter().flat_map(|p| [p.x, p.y]).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo.min(0.0), hi.max(lo)) } else { (0.0, 1.0) };
    let left = 120.0;
    let ax = Axis::new(lo, hi, left, left + side);
    let ay = Axis::new(lo, hi, MARGIN_T + side, MARGIN_T);
    let bottom = MARGIN_T + side;
    let mut s = String::new();
    header(&mut s, height, title);
    x_axis(&mut s, &ax, bottom, MARGIN_T, x_label);
    let _ = writeln!(
        s,
        r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#,
        sig6(left),
        sig6(MARGIN_T),
        sig6(bottom)
    );
    for t in ay.ticks() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            sig6(left - 6.0),
            sig6(ay.map(t)),
            sig6(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{0}" y="{1}" text-anchor="middle" transform="rotate(-90 {0} {1})">{2}</text>"#,
        sig6(left - 60.0),
        sig6(MARGIN_T + side / 2.0),
        esc(y_label)
    );
    let a = ax.lo.max(ay.lo);
    let b = ax.hi.min(ay.hi);
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#888888" stroke-dasharray="5 4"/>"##,
        sig6(ax.map(a)),
        sig6(ay.map(a)),
        sig6(ax.map(b)),
        sig6(ay.map(b))
    );
    for p in points {
        if !(p.x.is_finite() && p.y.is_finite()) {
            continue;
        }
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{}" r="4" fill="{}"><title>{}</title></circle>"#,
            sig6(ax.map(p.x)),
            sig6(ay.map(p.y)),
            PALETTE[p.group % PALETTE.len()],
            esc(&p.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_integrates_to_one() {
        let data: Vec<f64> = (0..200).map(|i| (i as f64 * 0.618).fract() * 2.0 - 1.0).collect();
        let grid: Vec<f64> = (0..=2000).map(|k| -4.0 + 8.0 * k as f64 / 2000.0).collect();
        let d = kde(&data, &grid);
        let area: f64 = d.iter().sum::<f64>() * 8.0 / 2000.0;
        assert!((area - 1.0).abs() < 1e-3);
    }

    #[test]
    fn figures_are_well_formed_and_deterministic() {
        let rows = vec![
            DotInterval {
                label: "a & b".into(),
                estimate: 0.5,
                low: 0.2,
                high: 0.8,
                group: 0,
            },
            DotInterval {
                label: "c".into(),
                estimate: -0.1,
                low: f64::NAN,
                high: f64::NAN,
                group: 1,
            },
        ];
        let a = dot_interval_svg(&rows, "t", "x");
        assert_eq!(a, dot_interval_svg(&rows, "t", "x"));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("a &amp; b"));
        let v = violin_svg(&[("g".into(), vec![0.1, 0.2, 0.3, 0.25])], "v", "x");
        assert!(v.contains("<path"));
        let p = parity_svg(
            &[ParityPoint {
                x: 0.3,
                y: 0.3,
                label: "p".into(),
                group: 0,
            }],
            "p",
            "a",
            "b",
        );
        assert!(p.contains("stroke-dasharray"));
    }
}
