use std::path::Path;

use plotters::prelude::*;
use pme_core::metrics::GallerySummary;

use crate::config::{CliResult, Failure};

fn plot_error(e: impl std::fmt::Display) -> Failure {
    Failure::new("plot", e.to_string())
}

fn range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    let pad = ((hi - lo) * 0.1).max(0.02);
    (lo - pad)..(hi + pad)
}

/// Two panels of gallery means, one colour per method: diversity against
/// preservation, and faithfulness against preservation.
pub fn tradeoff_svg(summaries: &[GallerySummary], out: &Path) -> CliResult<()> {
    let mut methods: Vec<&str> = summaries.iter().map(|s| s.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let root = SVGBackend::new(out, (1000, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let (left, right) = root.split_horizontally(500);
    let panels: [(&DrawingArea<_, _>, &str, fn(&GallerySummary) -> Option<f64>); 2] = [
        (&left, "diversity", |s| s.diversity),
        (&right, "faithfulness", |s| s.faithfulness),
    ];
    for (area, name, value) in panels {
        let xs = range(summaries.iter().map(|s| s.preservation));
        let ys = range(summaries.iter().filter_map(value));
        let mut chart = ChartBuilder::on(area)
            .caption(format!("{name} vs preservation"), ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(xs, ys)
            .map_err(plot_error)?;
        chart
            .configure_mesh()
            .x_desc("preservation distance (lower keeps more)")
            .y_desc(name)
            .draw()
            .map_err(plot_error)?;
        for (i, method) in methods.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let points: Vec<(f64, f64)> = summaries
                .iter()
                .filter(|s| s.method == *method)
                .filter_map(|s| value(s).map(|v| (s.preservation, v)))
                .collect();
            chart
                .draw_series(points.iter().map(|&p| Circle::new(p, 4, color.filled())))
                .map_err(plot_error)?
                .label(*method)
                .legend(move |(x, y)| Circle::new((x, y), 4, color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_error)?;
    }
    root.present().map_err(plot_error)?;
    Ok(())
}
