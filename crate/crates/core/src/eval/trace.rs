//! Per-flow trace CSV and a small SVG line chart.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{TraceEvent, TraceRow};
use crate::time::SimTime;

pub const TRACE_COLUMNS: [&str; 6] = [
    "time_s",
    "event",
    "queue_len_pkts",
    "cap_pkts",
    "cwnd_pkts",
    "delivered_bytes",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_s: f64,
    pub event: TraceEvent,
    pub queue_len_pkts: usize,
    pub cap_pkts: Option<u32>,
    pub cwnd_pkts: f64,
    pub delivered_bytes: u64,
}

impl From<&TraceRow> for TraceRecord {
    fn from(r: &TraceRow) -> Self {
        TraceRecord {
            time_s: r.time.as_secs_f64(),
            event: r.event,
            queue_len_pkts: r.queue_len,
            cap_pkts: r.cap,
            cwnd_pkts: r.cwnd,
            delivered_bytes: r.delivered_bytes,
        }
    }
}

impl TraceRecord {
    pub fn time(&self) -> SimTime {
        SimTime::from_secs_f64(self.time_s)
    }
}

pub fn write_trace<W: std::io::Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(TRACE_COLUMNS)?;
    }
    for r in rows {
        w.serialize(TraceRecord::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trace(std::io::BufWriter::new(file), rows)
}

pub fn trace_to_string(rows: &[TraceRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_trace(&mut buf, rows)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_trace<R: std::io::Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != TRACE_COLUMNS {
        return Err(Error::Format(format!("unexpected trace header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    read_trace(std::fs::File::open(path)?)
}

/// Queue length and cap against time as a standalone SVG document.
pub fn render_svg(records: &[TraceRecord], title: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    let t_max = records.iter().map(|r| r.time_s).fold(0.0, f64::max).max(1e-9);
    let y_max = records
        .iter()
        .map(|r| (r.queue_len_pkts as f64).max(r.cap_pkts.map_or(0.0, f64::from)))
        .fold(1.0, f64::max)
        * 1.05;
    let x = |t: f64| LEFT + t / t_max * (W - LEFT - RIGHT);
    let y = |v: f64| H - BOTTOM - v / y_max * (H - TOP - BOTTOM);

    let mut queue = String::new();
    let mut cap = String::new();
    for r in records {
        let _ = write!(queue, "{:.1},{:.1} ", x(r.time_s), y(r.queue_len_pkts as f64));
        if let Some(c) = r.cap_pkts {
            let _ = write!(cap, "{:.1},{:.1} ", x(r.time_s), y(c as f64));
        }
    }

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let t = t_max * i as f64 / 5.0;
        let v = y_max * i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{t:.2}</text>"#,
            x(t),
            y0 + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.0}</text>"#,
            x0 - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">time (s)</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">packets</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1"/>"#,
        queue.trim_end()
    );
    if !cap.is_empty() {
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="firebrick" stroke-width="1.5"/>"#,
            cap.trim_end()
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" fill="steelblue">queue length</text>"#,
        x1 - 160.0,
        TOP + 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" fill="firebrick">cap</text>"#,
        x1 - 60.0,
        TOP + 14.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
