//! Static grouped bar charts as standalone SVG.

use std::fmt::Write;

const COLORS: [&str; 4] = ["#3b6ea5", "#e08a2c", "#4c9a52", "#b64848"];
const W: f64 = 720.0;
const H: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 140.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 80.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Percent values in `[0, 100]`; `None` leaves a gap. The y axis starts at
/// `floor` so differences in the high nineties stay visible.
pub fn bar_chart(title: &str, categories: &[String], series: &[(String, Vec<Option<f64>>)], floor: f64) -> String {
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let y = |v: f64| TOP + plot_h * (1.0 - ((v - floor) / (100.0 - floor)).clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    for k in 0..=4 {
        let v = floor + (100.0 - floor) * k as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/>"##, W - RIGHT);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"#, LEFT - 6.0, yy + 4.0);
    }
    let n = categories.len().max(1) as f64;
    let group = plot_w / n;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (ci, c) in categories.iter().enumerate() {
        let gx = LEFT + group * ci as f64 + group * 0.1;
        for (si, (_, vals)) in series.iter().enumerate() {
            if let Some(Some(v)) = vals.get(ci) {
                let top = y(*v);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {v:.2}</title></rect>"#,
                    gx + bar * si as f64,
                    bar.max(1.0) - 1.0,
                    TOP + plot_h - top,
                    COLORS[si % COLORS.len()],
                    esc(c),
                    esc(&series[si].0)
                );
            }
        }
        let cx = LEFT + group * (ci as f64 + 0.5);
        let ly = TOP + plot_h + 14.0;
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-30 {cx:.1} {ly:.1})">{}</text>"#, esc(c));
    }
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, TOP + plot_h, W - RIGHT, TOP + plot_h);
    for (si, (name, _)) in series.iter().enumerate() {
        let ly = TOP + 16.0 * si as f64;
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{ly:.1}" width="10" height="10" fill="{}"/>"#, W - RIGHT + 14.0, COLORS[si % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, W - RIGHT + 30.0, ly + 9.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_present_value() {
        let cats = vec!["a".to_string(), "b<c".to_string()];
        let svg = bar_chart("t", &cats, &[("P".into(), vec![Some(99.0), None]), ("R".into(), vec![Some(90.0), Some(95.5)])], 80.0);
        assert_eq!(svg.matches("<title>").count(), 3);
        assert!(svg.contains("b&lt;c") && svg.ends_with("</svg>\n"));
    }
}
