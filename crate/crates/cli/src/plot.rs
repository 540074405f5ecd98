//! Static SVG figures from trace CSVs.

use std::path::Path;

use plotters::prelude::*;
use slipctl::trace::{Trace, TraceRow};

use crate::CliError;

type Line = (&'static str, fn(&TraceRow) -> f64, RGBColor);

struct Panel {
    title: &'static str,
    unit: &'static str,
    lines: &'static [Line],
}

const PANELS: [Panel; 4] = [
    Panel {
        title: "slip",
        unit: "-",
        lines: &[
            ("kappa_l", |r| r.kappa_l, BLUE),
            ("kappa_r", |r| r.kappa_r, CYAN),
            ("kappa_ref", |r| r.kappa_ref, RED),
            ("kappa_hat", |r| r.kappa_hat, GREEN),
        ],
    },
    Panel {
        title: "torque",
        unit: "Nm",
        lines: &[("t_m", |r| r.t_m, BLUE), ("driver", |r| r.driver_torque, BLACK), ("t_b", |r| r.t_b, MAGENTA)],
    },
    Panel { title: "speed", unit: "m/s", lines: &[("v_x", |r| r.v_x, BLUE)] },
    Panel { title: "road", unit: "-, m/s^2", lines: &[("mu", |r| r.mu, BLUE), ("a_y", |r| r.a_y, RED)] },
];

fn range(trace: &Trace, p: &Panel) -> (f64, f64) {
    let (lo, hi) = trace
        .rows
        .iter()
        .flat_map(|r| p.lines.iter().map(move |(_, f, _)| f(r)))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

pub fn plot(trace_path: &Path, out: Option<&Path>, width: u32, height: u32) -> Result<(), CliError> {
    let file = std::fs::File::open(trace_path).map_err(|e| CliError::io(trace_path, e))?;
    let trace = Trace::read_csv(std::io::BufReader::new(file))
        .map_err(|source| CliError::Sim { context: trace_path.display().to_string(), source })?;
    if trace.rows.is_empty() {
        return Err(CliError::Other(format!("{}: no rows", trace_path.display())));
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| trace_path.with_extension("svg"));
    draw(&trace, &out, width, height).map_err(|e| CliError::Other(format!("{}: {e}", out.display())))?;
    println!("{}", out.display());
    Ok(())
}

fn draw(trace: &Trace, out: &Path, width: u32, height: u32) -> Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(out, (width, height)).into_drawing_area();
    root.fill(&WHITE)?;
    let t0 = trace.rows[0].t;
    let t1 = trace.rows[trace.rows.len() - 1].t.max(t0 + 1e-9);
    for (area, panel) in root.split_evenly((PANELS.len(), 1)).iter().zip(&PANELS) {
        let (lo, hi) = range(trace, panel);
        let mut chart = ChartBuilder::on(area)
            .caption(panel.title, ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(28)
            .y_label_area_size(60)
            .build_cartesian_2d(t0..t1, lo..hi)?;
        chart.configure_mesh().x_desc("t [s]").y_desc(panel.unit).light_line_style(WHITE).draw()?;
        for (name, f, color) in panel.lines {
            let color = *color;
            chart
                .draw_series(LineSeries::new(trace.rows.iter().map(|r| (r.t, f(r))), color))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
    }
    root.present()?;
    Ok(())
}
