//! Static Gantt chart: one lane per rank, one rectangle per trace event,
//! widths proportional to duration.

use std::fmt::Write;

use twobp::executor::Trace;

const LANE_HEIGHT: f64 = 28.0;
const LANE_GAP: f64 = 6.0;
const LABEL_WIDTH: f64 = 64.0;
const CHART_WIDTH: f64 = 960.0;

/// Fill colour per op; forward, both backward halves and the combined
/// backward are always distinct.
pub fn color(op: &str) -> &'static str {
    match op {
        "Forward" => "#4e79a7",
        "BackwardP1" => "#f28e2b",
        "BackwardP2" => "#59a14f",
        "BackwardFull" => "#e15759",
        "ComputeLoss" => "#b07aa1",
        "OptimizerStep" => "#9c755f",
        _ => "#bab0ac",
    }
}

fn label(op: &str, mb: &[usize]) -> String {
    let ids = mb.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
    let short = match op {
        "Forward" => "F",
        "BackwardP1" => "B1",
        "BackwardP2" => "B2",
        "BackwardFull" => "B",
        _ => return String::new(),
    };
    format!("{short}{ids}")
}

pub fn render(trace: &Trace, title: &str) -> String {
    let ranks = trace.ranks().max(1);
    let origin = trace.events.iter().map(|e| e.start).fold(f64::INFINITY, f64::min);
    let origin = if origin.is_finite() { origin } else { 0.0 };
    let span = (trace.makespan() - origin).max(f64::MIN_POSITIVE);
    let scale = CHART_WIDTH / span;
    let height = 30.0 + ranks as f64 * (LANE_HEIGHT + LANE_GAP);
    let width = LABEL_WIDTH + CHART_WIDTH + 10.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    for r in 0..ranks {
        let y = 24.0 + r as f64 * (LANE_HEIGHT + LANE_GAP);
        let _ = writeln!(
            s,
            r##"<g class="lane" data-rank="{r}"><text x="4" y="{:.1}">rank {r}</text><rect x="{LABEL_WIDTH}" y="{y:.1}" width="{CHART_WIDTH}" height="{LANE_HEIGHT}" fill="#f4f4f4"/></g>"##,
            y + LANE_HEIGHT / 2.0 + 4.0
        );
    }
    for e in &trace.events {
        let x = LABEL_WIDTH + (e.start - origin) * scale;
        let w = (e.end - e.start) * scale;
        let y = 24.0 + e.rank as f64 * (LANE_HEIGHT + LANE_GAP);
        let _ = write!(
            s,
            r#"<rect class="event" data-op="{}" x="{x:.2}" y="{y:.1}" width="{w:.2}" height="{LANE_HEIGHT}" fill="{}" stroke="white" stroke-width="0.5"/>"#,
            e.op,
            color(&e.op)
        );
        let text = label(&e.op, &e.mb);
        if !text.is_empty() && w >= 7.0 * text.len() as f64 {
            let _ = write!(
                s,
                r#"<text x="{:.2}" y="{:.1}" fill="white">{text}</text>"#,
                x + 2.0,
                y + LANE_HEIGHT / 2.0 + 4.0
            );
        }
        s.push('\n');
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
