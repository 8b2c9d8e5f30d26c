use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Table;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Points grouped by the `phase` column, or a single series when the table
/// has none. Rows whose x or y cell is empty or non-numeric are skipped.
fn series(table: &Table, x: usize, y: usize) -> BTreeMap<String, Vec<(f64, f64)>> {
    let phase = table.column_index("phase");
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in &table.rows {
        let cell = |i: usize| row.get(i).and_then(|c| c.parse::<f64>().ok()).filter(|v| v.is_finite());
        let (Some(px), Some(py)) = (cell(x), cell(y)) else {
            continue;
        };
        let key = phase.and_then(|p| row.get(p)).cloned().unwrap_or_default();
        out.entry(key).or_default().push((px, py));
    }
    out
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders `y_col` against `x_col` from CSV text as a standalone SVG.
pub fn render_chart(csv: &str, x_col: &str, y_col: &str) -> Result<String> {
    let table = Table::parse(csv);
    let find = |name: &str| {
        table.column_index(name).ok_or_else(|| {
            Error::Config(format!("no column {name:?}; available: {}", table.columns.join(", ")))
        })
    };
    let (x, y) = (find(x_col)?, find(y_col)?);
    let groups = series(&table, x, y);
    let (x0, x1) = range(groups.values().flatten().map(|p| p.0));
    let (y0, y1) = range(groups.values().flatten().map(|p| p.1));
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0) * plot_w;
    let sy = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<line class="axis" x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line class="axis" x1="{left}" y1="{bottom}" x2="{left}" y2="{top}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        HEIGHT - 15.0,
        escape(x_col)
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{0}" text-anchor="middle" transform="rotate(-90 15 {0})">{1}</text>"#,
        (top + bottom) / 2.0,
        escape(y_col)
    );
    for (v, px) in [(x0, left), (x1, right)] {
        let _ = writeln!(s, r#"<text x="{px}" y="{}" text-anchor="middle">{v:.4}</text>"#, bottom + 16.0);
    }
    for (v, py) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.4}</text>"#, left - 4.0, py + 4.0);
    }
    for (i, (name, pts)) in groups.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(px, py)| format!("{:.2},{:.2}", sx(px), sy(py))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-phase="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(name),
            coords.join(" ")
        );
        if !name.is_empty() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                right - 80.0,
                top + 14.0 * (i as f64 + 1.0),
                escape(name)
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads `csv_path`, renders `y_col` against `x_col`, writes `out`.
pub fn emit_chart(csv_path: &Path, x_col: &str, y_col: &str, out: &Path) -> Result<()> {
    let csv = std::fs::read_to_string(csv_path)?;
    let svg = render_chart(&csv, x_col, y_col)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_phase() {
        let csv = "epoch,phase,loss\n0,pretrain,2\n1,pretrain,1\n0,distill,3\n1,distill,2\n2,distill,\n";
        let svg = render_chart(csv, "epoch", "loss").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        roxmltree::Document::parse(&svg).unwrap();
    }

    #[test]
    fn missing_column_lists_available() {
        let e = render_chart("epoch,loss\n0,1\n", "epoch", "acc").unwrap_err().to_string();
        assert!(e.contains("acc") && e.contains("epoch, loss"));
    }

    #[test]
    fn labels_are_escaped() {
        let svg = render_chart("a<b,y&z\n1,2\n", "a<b", "y&z").unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let texts: Vec<_> = doc.descendants().filter_map(|n| n.text()).collect();
        assert!(texts.contains(&"a<b") && texts.contains(&"y&z"));
    }
}
