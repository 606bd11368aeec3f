//! Static SVG plots for sweeps.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use crate::ablate::SweepRow;

const SIZE: (u32, u32) = (720, 420);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

type Metric = fn(&SweepRow) -> Option<f64>;

fn plot_err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// Best attack loss and patched mAP@50 per cell. Failed cells leave gaps.
pub fn sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = rows.len().max(1);
    let kind = rows.first().map(|r| format!("{:?}", r.kind).to_lowercase()).unwrap_or_default();
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{kind} sweep"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), 0f64..1.05f64)
        .map_err(plot_err)?;
    let labels: Vec<String> = rows.iter().map(|r| r.value.clone()).collect();
    chart
        .configure_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                labels.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc(kind.as_str())
        .draw()
        .map_err(plot_err)?;
    let series: [(&str, Metric); 2] =
        [("attack loss (best epoch)", |r| r.l_attack), ("mAP@50 with patch", |r| r.map50_patch)];
    for (k, (name, get)) in series.into_iter().enumerate() {
        let color = PALETTE[k];
        let points: Vec<(f64, f64)> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| get(r).map(|v| (i as f64, v)))
            .collect();
        chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Total loss against epoch, one line per successful cell.
pub fn loss_curves(path: &Path, curves: &[(String, Vec<(usize, f64)>)]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_epoch = curves.iter().flat_map(|c| c.1.iter().map(|p| p.0)).max().unwrap_or(1).max(1);
    let values = curves.iter().flat_map(|c| c.1.iter().map(|p| p.1));
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let pad = 0.05 * (hi - lo);
    let mut chart = ChartBuilder::on(&root)
        .caption("total loss", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..max_epoch as f64, (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(plot_err)?;
    for (k, (label, curve)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(
                curve.iter().map(|&(e, v)| (e as f64, v)),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    if !curves.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}
