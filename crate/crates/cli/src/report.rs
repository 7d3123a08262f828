//! Static SVG rendering of a closed-loop run: stacked panels for room
//! temperature against the comfort band, cooling input, and solar
//! irradiation, with storm periods shaded. Pure string assembly — the
//! output opens in any browser and needs no plotting stack.

use chrono::Timelike;
use icnn_mpc::simulator::{LogRow, RunLog};

const WIDTH: f64 = 960.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 18.0;
const PANEL_GAP: f64 = 34.0;
const TOP: f64 = 46.0;

struct Panel {
    title: &'static str,
    top: f64,
    height: f64,
    lo: f64,
    hi: f64,
}

impl Panel {
    fn y(&self, v: f64) -> f64 {
        self.top + (self.hi - v) / (self.hi - self.lo) * self.height
    }
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Tick positions at a 1–2–5 step covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![lo];
    }
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64 + 0.5)
        .unwrap_or(10.0 * mag);
    let mut out = Vec::new();
    let mut v = (lo / step).ceil() * step;
    while v <= hi + 1e-9 * span {
        out.push(v);
        v += step;
    }
    out
}

fn polyline(points: &[(f64, f64)], style: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{},{}", fmt(*x), fmt(*y))).collect();
    format!("<polyline points=\"{}\" style=\"{style}\"/>\n", pts.join(" "))
}

/// Values per row drawn as a step function (each value holds for its step).
fn step_points(rows: &[LogRow], x: &dyn Fn(usize) -> f64, v: &dyn Fn(&LogRow) -> f64) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(rows.len() * 2);
    for (i, r) in rows.iter().enumerate() {
        pts.push((x(i), v(r)));
        pts.push((x(i + 1), v(r)));
    }
    pts
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

pub fn render_report(mpc: &RunLog, thermostat: Option<&RunLog>) -> String {
    let rows = &mpc.rows;
    if rows.is_empty() {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"60\">\
                <text x=\"16\" y=\"36\">empty run log</text></svg>\n"
            .into();
    }
    let n = rows.len();
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let x = move |i: usize| MARGIN_LEFT + plot_w * i as f64 / n as f64;

    let (t_lo, t_hi) = range_of(
        rows.iter()
            .flat_map(|r| [r.t_room, r.t_amb, r.x_min, r.x_max])
            .chain(thermostat.iter().flat_map(|t| t.rows.iter().map(|r| r.t_room))),
    );
    let pad = 0.05 * (t_hi - t_lo);
    let temp = Panel {
        title: "room temperature [°C]",
        top: TOP,
        height: 300.0,
        lo: t_lo - pad,
        hi: t_hi + pad,
    };
    let (u_lo, u_hi) = range_of(
        rows.iter()
            .map(|r| r.u)
            .chain(thermostat.iter().flat_map(|t| t.rows.iter().map(|r| r.u)))
            .chain([0.0]),
    );
    let input = Panel {
        title: "cooling input u [kWh per step]",
        top: temp.top + temp.height + PANEL_GAP,
        height: 140.0,
        lo: u_lo - 0.05,
        hi: u_hi + 0.05,
    };
    let (_, q_hi) = range_of(rows.iter().map(|r| r.q_sol));
    let solar = Panel {
        title: "solar irradiation [W/m²]",
        top: input.top + input.height + PANEL_GAP,
        height: 120.0,
        lo: 0.0,
        hi: q_hi.max(1.0) * 1.05,
    };
    let height = solar.top + solar.height + 46.0;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" \
         viewBox=\"0 0 {WIDTH} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{MARGIN_LEFT}\" y=\"24\" font-size=\"15\" fill=\"#222\">\
         closed-loop run — {} steps from {}</text>\n",
        n,
        rows[0].timestamp.format("%Y-%m-%d %H:%M"),
    ));

    // Wind (storm) shading, shared across panels.
    let mut wind_rects = String::new();
    let mut i = 0;
    while i < n {
        if rows[i].wind {
            let a = i;
            while i < n && rows[i].wind {
                i += 1;
            }
            for p in [&temp, &input, &solar] {
                wind_rects.push_str(&format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#888\" opacity=\"0.18\"/>\n",
                    fmt(x(a)),
                    fmt(p.top),
                    fmt(x(i) - x(a)),
                    fmt(p.height),
                ));
            }
        } else {
            i += 1;
        }
    }

    for p in [&temp, &input, &solar] {
        svg.push_str(&format!(
            "<text x=\"{MARGIN_LEFT}\" y=\"{}\" font-size=\"12\" fill=\"#444\">{}</text>\n",
            fmt(p.top - 8.0),
            p.title,
        ));
        svg.push_str(&format!(
            "<rect x=\"{MARGIN_LEFT}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>\n",
            fmt(p.top),
            fmt(plot_w),
            fmt(p.height),
        ));
        for tick in ticks(p.lo, p.hi, 5) {
            let y = p.y(tick);
            svg.push_str(&format!(
                "<line x1=\"{MARGIN_LEFT}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#eee\"/>\n\
                 <text x=\"{2}\" y=\"{3}\" font-size=\"10\" fill=\"#666\" text-anchor=\"end\">{4}</text>\n",
                fmt(y),
                fmt(MARGIN_LEFT + plot_w),
                fmt(MARGIN_LEFT - 6.0),
                fmt(y + 3.5),
                fmt(tick),
            ));
        }
        // Midnight gridlines; dates under the bottom panel.
        for (i, r) in rows.iter().enumerate() {
            if r.timestamp.hour() == 0 && r.timestamp.minute() == 0 {
                svg.push_str(&format!(
                    "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#ddd\"/>\n",
                    fmt(x(i)),
                    fmt(p.top),
                    fmt(p.top + p.height),
                ));
                if std::ptr::eq(p, &solar) {
                    svg.push_str(&format!(
                        "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"#666\">{}</text>\n",
                        fmt(x(i) + 3.0),
                        fmt(p.top + p.height + 14.0),
                        r.timestamp.format("%b %d"),
                    ));
                }
            }
        }
    }
    svg.push_str(&wind_rects);

    // Comfort band as a filled step region.
    let upper = step_points(rows, &x, &|r| r.x_max);
    let lower = step_points(rows, &x, &|r| r.x_min);
    let mut d = String::from("M");
    for (px, v) in &upper {
        d.push_str(&format!(" {},{}", fmt(*px), fmt(temp.y(*v))));
    }
    for (px, v) in lower.iter().rev() {
        d.push_str(&format!(" L {},{}", fmt(*px), fmt(temp.y(*v))));
    }
    d.push_str(" Z");
    svg.push_str(&format!("<path d=\"{d}\" fill=\"#2a9d2a\" opacity=\"0.12\"/>\n"));
    for edge in [&upper, &lower] {
        let pts: Vec<(f64, f64)> = edge.iter().map(|(px, v)| (*px, temp.y(*v))).collect();
        svg.push_str(&polyline(&pts, "fill:none;stroke:#2a9d2a;stroke-width:1"));
    }

    // Ambient, baseline, and controlled temperatures.
    let amb: Vec<(f64, f64)> =
        rows.iter().enumerate().map(|(i, r)| (x(i), temp.y(r.t_amb))).collect();
    svg.push_str(&polyline(&amb, "fill:none;stroke:#bbb;stroke-dasharray:4 3"));
    if let Some(t) = thermostat {
        let pts: Vec<(f64, f64)> =
            t.rows.iter().enumerate().take(n).map(|(i, r)| (x(i), temp.y(r.t_room))).collect();
        svg.push_str(&polyline(&pts, "fill:none;stroke:#e8803a;stroke-width:1.3"));
    }
    let room: Vec<(f64, f64)> =
        rows.iter().enumerate().map(|(i, r)| (x(i), temp.y(r.t_room))).collect();
    svg.push_str(&polyline(&room, "fill:none;stroke:#2060c0;stroke-width:1.6"));

    // Inputs: MPC as filled steps down from zero, baseline as an outline.
    let zero = input.y(0.0);
    for (i, r) in rows.iter().enumerate() {
        if r.u != 0.0 {
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#2060c0\" opacity=\"0.55\"/>\n",
                fmt(x(i)),
                fmt(zero.min(input.y(r.u))),
                fmt((x(i + 1) - x(i)).max(0.5)),
                fmt((input.y(r.u) - zero).abs()),
            ));
        }
    }
    if let Some(t) = thermostat {
        let pts: Vec<(f64, f64)> = step_points(&t.rows[..n.min(t.rows.len())], &x, &|r| r.u)
            .iter()
            .map(|(px, v)| (*px, input.y(*v)))
            .collect();
        svg.push_str(&polyline(&pts, "fill:none;stroke:#e8803a;stroke-width:1"));
    }

    // Solar trace.
    let sun: Vec<(f64, f64)> =
        rows.iter().enumerate().map(|(i, r)| (x(i), solar.y(r.q_sol))).collect();
    svg.push_str(&polyline(&sun, "fill:none;stroke:#d5a021;stroke-width:1.3"));

    // Legend.
    let mut lx = MARGIN_LEFT + 8.0;
    let ly = TOP + 14.0;
    let mut legend = vec![("#2060c0", "MPC room temp")];
    if thermostat.is_some() {
        legend.push(("#e8803a", "thermostat room temp"));
    }
    legend.push(("#2a9d2a", "comfort band"));
    legend.push(("#bbb", "ambient"));
    for (color, label) in legend {
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{color}\" stroke-width=\"3\"/>\n\
             <text x=\"{3}\" y=\"{4}\" font-size=\"11\" fill=\"#333\">{label}</text>\n",
            fmt(lx),
            fmt(ly - 4.0),
            fmt(lx + 18.0),
            fmt(lx + 23.0),
            fmt(ly),
        ));
        lx += 24.0 + 7.0 * label.len() as f64 + 18.0;
    }

    svg.push_str("</svg>\n");
    svg
}
