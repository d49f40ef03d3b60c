//! PNG charts. Text needs a TrueType font; without one the charts are drawn
//! without titles, tick labels, or legends.

use std::path::Path;

use anyhow::{anyhow, Context};
use plotters::prelude::*;
use plotters::style::FontStyle;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

pub const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(90, 90, 90),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mark {
    Line,
    LineDots,
    Dots,
    Crosses,
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: Option<String>,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
    pub color: RGBColor,
}

impl Series {
    pub fn new(label: &str, points: Vec<(f64, f64)>, mark: Mark, color: RGBColor) -> Self {
        Self {
            label: Some(label.to_string()),
            points,
            mark,
            color,
        }
    }

    pub fn unlabeled(points: Vec<(f64, f64)>, mark: Mark, color: RGBColor) -> Self {
        Self {
            label: None,
            points,
            mark,
            color,
        }
    }
}

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_desc: &'a str,
    pub y_desc: &'a str,
    /// Forces equal data ranges on both axes (square plots).
    pub equal_axes: bool,
}

pub struct Plotter {
    text: bool,
}

fn plot_err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting: {e}")
}

impl Plotter {
    /// Registers `font`, or the first readable system font when `None`.
    pub fn new(font: Option<&Path>) -> anyhow::Result<Self> {
        let bytes = match font {
            Some(p) => Some(std::fs::read(p).with_context(|| format!("reading font {}", p.display()))?),
            None => FONT_CANDIDATES.iter().find_map(|p| std::fs::read(p).ok()),
        };
        let Some(bytes) = bytes else {
            return Ok(Self { text: false });
        };
        // plotters keeps fonts for the life of the process
        let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
        match plotters::style::register_font("sans-serif", FontStyle::Normal, leaked) {
            Ok(()) => Ok(Self { text: true }),
            Err(_) if font.is_none() => Ok(Self { text: false }),
            Err(_) => Err(anyhow!("{} is not a usable TrueType font", font.expect("checked").display())),
        }
    }

    pub fn has_text(&self) -> bool {
        self.text
    }

    pub fn draw(&self, path: &Path, chart: &Chart, series: &[Series]) -> anyhow::Result<()> {
        let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Err(anyhow!("nothing to plot for {}", path.display()));
        }
        if chart.equal_axes {
            let (lo, hi) = (x0.min(y0), x1.max(y1));
            (x0, x1, y0, y1) = (lo, hi, lo, hi);
        }
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);

        let size = if chart.equal_axes { (640, 640) } else { (800, 520) };
        let root = BitMapBackend::new(path, size).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut builder = ChartBuilder::on(&root);
        builder.margin(16);
        if self.text {
            builder
                .caption(chart.title, ("sans-serif", 22))
                .x_label_area_size(44)
                .y_label_area_size(64);
        } else {
            builder.x_label_area_size(4).y_label_area_size(4);
        }
        let mut ctx = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(plot_err)?;
        let mut mesh = ctx.configure_mesh();
        if self.text {
            mesh.x_desc(chart.x_desc).y_desc(chart.y_desc).label_style(("sans-serif", 14));
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(plot_err)?;

        for s in series {
            let style = s.color.stroke_width(2);
            let data = s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite());
            let anno = match s.mark {
                Mark::Line => ctx.draw_series(LineSeries::new(data, style)).map_err(plot_err)?,
                Mark::LineDots => {
                    ctx.draw_series(data.clone().map(|p| Circle::new(p, 4, s.color.filled())))
                        .map_err(plot_err)?;
                    ctx.draw_series(LineSeries::new(data, style)).map_err(plot_err)?
                }
                Mark::Dots => ctx
                    .draw_series(data.map(|p| Circle::new(p, 3, s.color.filled())))
                    .map_err(plot_err)?,
                Mark::Crosses => ctx
                    .draw_series(data.map(|p| Cross::new(p, 5, s.color.stroke_width(2))))
                    .map_err(plot_err)?,
            };
            if let (true, Some(label)) = (self.text, &s.label) {
                let c = s.color;
                anno.label(label.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
            }
        }
        if self.text && series.iter().any(|s| s.label.is_some()) {
            ctx.configure_series_labels()
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .label_font(("sans-serif", 14))
                .draw()
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
        Ok(())
    }
}

fn pad(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    let m = if span > 0.0 { 0.05 * span } else { lo.abs().max(1.0) * 0.1 };
    (lo - m, hi + m)
}
