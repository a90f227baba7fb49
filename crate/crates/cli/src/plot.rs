//! Minimal grouped bar chart as standalone SVG.

use std::fmt::Write;

const PALETTE: &[&str] = &["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"];

pub struct BarChart<'a> {
    pub title: &'a str,
    pub y_label: &'a str,
    pub categories: Vec<String>,
    /// `(series name, one value per category)`.
    pub series: Vec<(String, Vec<f64>)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl BarChart<'_> {
    pub fn to_svg(&self) -> String {
        let (w, h) = (720.0, 400.0);
        let (left, right, top, bottom) = (70.0, 20.0, 40.0, 70.0);
        let plot_w = w - left - right;
        let plot_h = h - top - bottom;
        let max = self
            .series
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .fold(0.0f64, f64::max)
            .max(1.0);
        let n_cat = self.categories.len().max(1) as f64;
        let n_ser = self.series.len().max(1) as f64;
        let group_w = plot_w / n_cat;
        let bar_w = group_w * 0.8 / n_ser;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            w / 2.0,
            escape(self.title)
        );
        for i in 0..=4 {
            let v = max * i as f64 / 4.0;
            let y = top + plot_h - plot_h * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.0}</text>"##,
                left + plot_w,
                left - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">{}</text>"#,
            top + plot_h / 2.0,
            top + plot_h / 2.0,
            escape(self.y_label)
        );
        for (c, cat) in self.categories.iter().enumerate() {
            let gx = left + group_w * c as f64 + group_w * 0.1;
            for (k, (_, values)) in self.series.iter().enumerate() {
                let v = values.get(c).copied().unwrap_or(0.0);
                let bh = plot_h * v / max;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bar_w:.1}" height="{bh:.1}" fill="{}"/>"#,
                    gx + bar_w * k as f64,
                    top + plot_h - bh,
                    PALETTE[k % PALETTE.len()]
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                left + group_w * (c as f64 + 0.5),
                top + plot_h + 18.0,
                escape(cat)
            );
        }
        for (k, (name, _)) in self.series.iter().enumerate() {
            let x = left + 150.0 * k as f64;
            let y = h - 22.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{y}">{}</text>"#,
                y - 10.0,
                PALETTE[k % PALETTE.len()],
                x + 18.0,
                escape(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_bar_per_value() {
        let chart = BarChart {
            title: "a < b",
            y_label: "tokens",
            categories: vec!["p1".into(), "p2".into()],
            series: vec![("cold".into(), vec![1.0, 2.0]), ("warm".into(), vec![0.0, 1.0])],
        };
        let svg = chart.to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("a &lt; b"));
        // background + 4 bars + 2 legend swatches
        assert_eq!(svg.matches("<rect").count(), 7);
    }
}
