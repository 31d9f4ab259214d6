//! PNG plots of the IoU histogram and the oracle curve.

use std::path::Path;
use std::sync::OnceLock;

use anyhow::{anyhow, Result};
use lowshot_core::eval::{IouHistogram, OraclePoint};
use plotters::prelude::*;

const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

static FONT: OnceLock<bool> = OnceLock::new();

/// Registers the first available system font; plots are drawn without
/// labels when none is found.
fn have_font() -> bool {
    *FONT.get_or_init(|| {
        for p in FONT_PATHS {
            if let Ok(bytes) = std::fs::read(p) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; plots are drawn without labels");
        false
    })
}

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting: {e}")
}

pub fn histogram_png(hist: &IouHistogram, path: &Path) -> Result<()> {
    let text = have_font();
    let root = BitMapBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let total = |v: &[usize]| v.iter().sum::<usize>().max(1) as f64;
    let (tb, tn) = (total(&hist.base), total(&hist.novel));
    let ymax = hist
        .base
        .iter()
        .map(|&c| c as f64 / tb)
        .chain(hist.novel.iter().map(|&c| c as f64 / tn))
        .fold(0.0, f64::max)
        .max(0.05)
        * 1.1;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15);
    if text {
        builder.caption("IoU of detections with same-class ground truth", ("sans-serif", 20));
        builder.x_label_area_size(40).y_label_area_size(55);
    }
    let mut chart = builder.build_cartesian_2d(0f64..1f64, 0f64..ymax).map_err(err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("IoU").y_desc("share of detections");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(err)?;
    for (i, w) in hist.edges.windows(2).enumerate() {
        let mid = (w[0] + w[1]) / 2.0;
        let b = hist.base[i] as f64 / tb;
        let n = hist.novel[i] as f64 / tn;
        chart
            .draw_series([
                Rectangle::new([(w[0], 0.0), (mid, b)], BLUE.mix(0.6).filled()),
                Rectangle::new([(mid, 0.0), (w[1], n)], RED.mix(0.6).filled()),
            ])
            .map_err(err)?;
    }
    if text {
        chart
            .draw_series(std::iter::empty::<Rectangle<(f64, f64)>>())
            .map_err(err)?
            .label("base")
            .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], BLUE.mix(0.6).filled()));
        chart
            .draw_series(std::iter::empty::<Rectangle<(f64, f64)>>())
            .map_err(err)?
            .label("novel")
            .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], RED.mix(0.6).filled()));
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(err)?;
    }
    root.present().map_err(err)?;
    Ok(())
}

pub fn oracle_png(curve: &[OraclePoint], path: &Path) -> Result<()> {
    let text = have_font();
    let root = BitMapBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let tmax = curve.iter().map(|p| p.threshold).fold(0.0, f64::max).max(0.05);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15);
    if text {
        builder.caption("AP50 after oracle false-positive correction", ("sans-serif", 20));
        builder.x_label_area_size(40).y_label_area_size(55);
    }
    let mut chart = builder.build_cartesian_2d(0f64..tmax, 0f64..100f64).map_err(err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("threshold t").y_desc("AP50");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(err)?;
    let series = [
        ("base", BLUE, curve.iter().map(|p| p.ap_base).collect::<Vec<_>>()),
        ("novel", RED, curve.iter().map(|p| p.ap_novel).collect()),
    ];
    for (name, color, values) in series {
        let pts: Vec<(f64, f64)> =
            curve.iter().zip(values).filter_map(|(p, v)| v.map(|v| (p.threshold, 100.0 * v))).collect();
        let drawn = chart.draw_series(LineSeries::new(pts, color.stroke_width(2))).map_err(err)?;
        if text {
            drawn.label(name).legend(move |(x, y)| PathElement::new([(x, y), (x + 15, y)], color.stroke_width(2)));
        }
    }
    if text {
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(err)?;
    }
    root.present().map_err(err)?;
    Ok(())
}
