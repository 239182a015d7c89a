//! Minimal SVG charts for metric tables.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use openslot::eval::MetricRow;

use crate::PlotKind;

pub struct PlotInput {
    pub name: String,
    pub rows: Vec<MetricRow>,
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 110.0;
const COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn new(values: impl Iterator<Item = f64>) -> Result<Self> {
        let (mut lo, mut hi) = (0.0f64, f64::MIN);
        for v in values {
            if !v.is_finite() {
                bail!("cannot plot non-finite value {v}");
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi == f64::MIN {
            bail!("nothing to plot");
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        Ok(Self { lo, hi })
    }

    fn y(&self, v: f64) -> f64 {
        TOP + (H - TOP - BOTTOM) * (self.hi - v) / (self.hi - self.lo)
    }

    fn axes(&self, out: &mut String) {
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="#333"/>"##,
            H - BOTTOM
        );
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#333"/>"##,
            W - RIGHT,
            y = self.y(0.0f64.max(self.lo))
        );
        for k in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * k as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{v:.3}</text>"#,
                LEFT - 4.0,
                self.y(v) + 4.0
            );
        }
    }
}

pub fn render_svg(tables: &[PlotInput], kind: PlotKind, title: &str) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#, W / 2.0, esc(title));
    match kind {
        PlotKind::Bar => bars(&mut out, tables)?,
        PlotKind::Line => lines(&mut out, tables)?,
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn bars(out: &mut String, tables: &[PlotInput]) -> Result<()> {
    let prefix = tables.len() > 1;
    let items: Vec<(String, f64)> = tables
        .iter()
        .flat_map(|t| {
            t.rows.iter().map(move |r| {
                let label = format!("{} {}", r.set, r.metric);
                (if prefix { format!("{} {label}", t.name) } else { label }, r.value)
            })
        })
        .collect();
    let frame = Frame::new(items.iter().map(|i| i.1))?;
    frame.axes(out);
    let slot = (W - LEFT - RIGHT) / items.len() as f64;
    for (k, (label, v)) in items.iter().enumerate() {
        let x = LEFT + slot * k as f64 + slot * 0.15;
        let (y0, y1) = (frame.y(v.max(0.0)), frame.y(v.min(0.0)));
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} = {v}</title></rect>"#,
            slot * 0.7,
            y1 - y0,
            COLORS[k % COLORS.len()],
            esc(label)
        );
        let cx = x + slot * 0.35;
        let ly = H - BOTTOM + 12.0;
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{ly:.1}" font-size="10" text-anchor="end" transform="rotate(-45 {cx:.1} {ly:.1})">{}</text>"#,
            esc(label)
        );
    }
    Ok(())
}

fn lines(out: &mut String, tables: &[PlotInput]) -> Result<()> {
    let mut series: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for (x, t) in tables.iter().enumerate() {
        for r in &t.rows {
            let key = format!("{} {}", r.set, r.metric);
            let idx = match series.iter().position(|s| s.0 == key) {
                Some(i) => i,
                None => {
                    series.push((key, vec![None; tables.len()]));
                    series.len() - 1
                }
            };
            series[idx].1[x] = Some(r.value);
        }
    }
    let frame = Frame::new(series.iter().flat_map(|s| s.1.iter().flatten().copied()))?;
    frame.axes(out);
    let step = if tables.len() > 1 {
        (W - LEFT - RIGHT - 20.0) / (tables.len() - 1) as f64
    } else {
        0.0
    };
    let px = |x: usize| LEFT + 10.0 + step * x as f64;
    for (x, t) in tables.iter().enumerate() {
        let ly = H - BOTTOM + 12.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="10" text-anchor="end" transform="rotate(-45 {:.1} {ly:.1})">{}</text>"#,
            px(x),
            px(x),
            esc(&t.name)
        );
    }
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter_map(|(x, y)| y.map(|y| format!("{:.1},{:.1}", px(x), frame.y(y))))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">{}</text>"#,
            W - RIGHT - 150.0,
            TOP + 14.0 * k as f64,
            esc(name)
        );
    }
    Ok(())
}
