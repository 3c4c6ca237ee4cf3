//! Minimal SVG line and heat-map renderers. Output depends only on the
//! inputs: fixed sizes, fixed palette, fixed number formatting.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line plot of several series against their sample index.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(&str, &[f64])]) -> String {
    let n_max = series
        .iter()
        .map(|(_, v)| v.len())
        .max()
        .unwrap_or(0)
        .max(2);
    let (lo, hi) = finite_range(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let px = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n_max - 1) as f64;
    let py = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m:.1} {t:.1} L{m:.1} {b:.1} L{r:.1} {b:.1}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{hi:.4}</text>"#,
        MARGIN - 4.0,
        MARGIN + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{lo:.4}</text>"#,
        MARGIN - 4.0,
        H - MARGIN
    );
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                pen_down = false;
                continue;
            }
            let _ = write!(
                d,
                "{}{:.2} {:.2} ",
                if pen_down { "L" } else { "M" },
                px(i),
                py(*v)
            );
            pen_down = true;
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#,
            d.trim_end()
        );
        let ly = MARGIN + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{color}" text-anchor="end">{}</text>"#,
            W - MARGIN,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Side-by-side grayscale panels of `(rows, cols, values)` images sharing
/// one intensity scale.
pub fn heat_map(title: &str, panels: &[(&str, usize, usize, &[f64])]) -> String {
    let cell = 3.0;
    let gap = 16.0;
    let (lo, hi) = finite_range(panels.iter().flat_map(|p| p.3.iter().copied()));
    let width: f64 = panels.iter().map(|p| p.2 as f64 * cell + gap).sum::<f64>() + gap;
    let height = panels.iter().map(|p| p.1 as f64 * cell).fold(0.0, f64::max) + 60.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" shape-rendering="crispEdges">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" font-size="13" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let mut x0 = gap;
    for (name, rows, cols, values) in panels {
        let _ = writeln!(
            s,
            r#"<text x="{x0:.1}" y="36" font-size="11">{}</text>"#,
            escape(name)
        );
        let _ = writeln!(s, r#"<g transform="translate({x0:.1} 44)">"#);
        for r in 0..*rows {
            for c in 0..*cols {
                let v = values[r * cols + c];
                let level = if v.is_finite() {
                    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                };
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="#{level:02x}{level:02x}{level:02x}"/>"##,
                    c as f64 * cell,
                    r as f64 * cell
                );
            }
        }
        s.push_str("</g>\n");
        x0 += *cols as f64 * cell + gap;
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_golden() {
        let svg = line_plot(
            "t<1>",
            "x",
            "y",
            &[("a", &[0.0, 1.0]), ("b", &[1.0, f64::NAN, 0.0])],
        );
        let expected = r##"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="360" viewBox="0 0 640 360">
<rect width="640" height="360" fill="white"/>
<text x="320.0" y="20" font-size="14" text-anchor="middle">t&lt;1&gt;</text>
<path d="M48.0 48.0 L48.0 312.0 L592.0 312.0" stroke="black" fill="none"/>
<text x="320.0" y="348.0" font-size="11" text-anchor="middle">x</text>
<text x="14" y="180.0" font-size="11" text-anchor="middle" transform="rotate(-90 14 180.0)">y</text>
<text x="44.0" y="52.0" font-size="10" text-anchor="end">1.0000</text>
<text x="44.0" y="312.0" font-size="10" text-anchor="end">0.0000</text>
<path d="M48.00 312.00 L320.00 48.00" stroke="#1f77b4" stroke-width="1.5" fill="none"/>
<text x="592.0" y="48.0" font-size="11" fill="#1f77b4" text-anchor="end">a</text>
<path d="M48.00 48.00 M592.00 312.00" stroke="#d62728" stroke-width="1.5" fill="none"/>
<text x="592.0" y="62.0" font-size="11" fill="#d62728" text-anchor="end">b</text>
</svg>
"##;
        assert_eq!(svg, expected);
    }

    #[test]
    fn heat_map_golden() {
        let svg = heat_map("h", &[("p", 1, 2, &[0.0, 2.0])]);
        let expected = r##"<svg xmlns="http://www.w3.org/2000/svg" width="38" height="63" viewBox="0 0 38 63" shape-rendering="crispEdges">
<rect width="38" height="63" fill="white"/>
<text x="19.0" y="18" font-size="13" text-anchor="middle">h</text>
<text x="16.0" y="36" font-size="11">p</text>
<g transform="translate(16.0 44)">
<rect x="0" y="0" width="3" height="3" fill="#000000"/>
<rect x="3" y="0" width="3" height="3" fill="#ffffff"/>
</g>
</svg>
"##;
        assert_eq!(svg, expected);
    }
}
