use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use partseg_core::checkpoint::Checkpoint;
use partseg_core::data::{episode_from_id, ingest_dataset, Mask};
use partseg_core::error::{Error, Result};
use partseg_core::eval::EvalReport;
use partseg_core::harness::{AblationReport, SweepReport};
use partseg_core::trainer::StepRecord;
use plotters::prelude::*;
use serde::de::DeserializeOwned;

use crate::{checkpoint_path, PlotArgs};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 480;

const PALETTE: [[u8; 3]; 12] = [
    [20, 20, 20],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Validation {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Validation {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn run(a: PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut written: Vec<PathBuf> = Vec::new();
    for (i, m) in a.metrics.iter().enumerate() {
        let records = read_metrics(m)?;
        let name = if a.metrics.len() == 1 {
            "loss_curve.svg".to_string()
        } else {
            format!("loss_curve_{i}.svg")
        };
        let path = a.out.join(name);
        loss_curve(&records, &path)?;
        written.push(path);
    }
    if let Some(p) = &a.sweep {
        let report: SweepReport = read_json(p)?;
        let bars: Vec<(String, f64, f64)> = report
            .rows
            .iter()
            .map(|r| (format!("m={}", r.momentum), r.miou.mean, r.miou.std))
            .collect();
        let path = a.out.join("miou_vs_m.svg");
        bar_chart(&bars, "mIoU vs EMA momentum", &path)?;
        written.push(path);
    }
    if let Some(p) = &a.ablation {
        let report: AblationReport = read_json(p)?;
        let bars: Vec<(String, f64, f64)> = report
            .rows
            .iter()
            .map(|r| (r.variant.to_string(), r.miou.mean, r.miou.std))
            .collect();
        let path = a.out.join("ablation.svg");
        bar_chart(&bars, "mIoU by prompt design", &path)?;
        written.push(path);
    }
    if let Some(p) = &a.eval {
        let report: EvalReport = read_json(p)?;
        let bars: Vec<(String, f64, f64)> = report
            .per_class
            .iter()
            .map(|(k, s)| (k.clone(), s.mean, s.std))
            .collect();
        let path = a.out.join("per_class_iou.svg");
        bar_chart(&bars, "IoU per part class", &path)?;
        written.push(path);
    }
    if let (Some(ckpt), Some(id)) = (&a.ckpt, &a.episode) {
        let path = a.out.join("qualitative.png");
        panel(&checkpoint_path(ckpt), a.dataset.as_deref(), id, &path)?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::Argument("nothing to plot; pass a report or a checkpoint".into()));
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn loss_curve(records: &[StepRecord], path: &Path) -> Result<()> {
    let err = draw_err(path);
    let root = SVGBackend::new(path, (WIDTH, HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let max_step = records.iter().map(|r| r.step).max().unwrap_or(0) as f64 + 1.0;
    let max_loss = records
        .iter()
        .flat_map(|r| [r.loss, r.loss_vcl, r.loss_tcl.unwrap_or(0.0)])
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let mut chart = ChartBuilder::on(&root)
        .caption("Training loss", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0.0..max_step, 0.0..max_loss * 1.05)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("loss")
        .draw()
        .map_err(&err)?;
    let series: [(&str, RGBColor, Box<dyn Fn(&StepRecord) -> Option<f64>>); 3] = [
        ("total", BLACK, Box::new(|r| Some(r.loss))),
        ("visual", BLUE, Box::new(|r| Some(r.loss_vcl))),
        ("textual", RED, Box::new(|r| r.loss_tcl)),
    ];
    for (name, color, get) in series {
        let points: Vec<(f64, f64)> = records
            .iter()
            .filter_map(|r| get(r).map(|v| (r.step as f64, v)))
            .collect();
        if points.is_empty() {
            continue;
        }
        chart
            .draw_series(LineSeries::new(points, &color))
            .map_err(&err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// One bar per entry with a ± std whisker.
fn bar_chart(bars: &[(String, f64, f64)], title: &str, path: &Path) -> Result<()> {
    let err = draw_err(path);
    let root = SVGBackend::new(path, (WIDTH, HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let n = bars.len().max(1);
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(52)
        .build_cartesian_2d(0.0..n as f64, 0.0..1.0)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            labels.get(i).cloned().unwrap_or_default()
        })
        .y_desc("mIoU")
        .draw()
        .map_err(&err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, mean, _))| {
            let x = i as f64;
            Rectangle::new([(x + 0.15, 0.0), (x + 0.85, *mean)], BLUE.mix(0.6).filled())
        }))
        .map_err(&err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, mean, std))| {
            let x = i as f64 + 0.5;
            PathElement::new(
                vec![(x, (mean - std).max(0.0)), (x, (mean + std).min(1.0))],
                BLACK,
            )
        }))
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

fn colorize(mask: &Mask) -> RgbImage {
    RgbImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Rgb(PALETTE[mask.get(y as usize, x as usize) as usize % PALETTE.len()])
    })
}

/// Query image | ground truth | prediction, side by side.
fn panel(ckpt: &Path, dataset: Option<&Path>, id: &str, path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt)?;
    let root = dataset.map_or_else(|| ckpt.config.dataset.clone(), Path::to_path_buf);
    let index = ingest_dataset(&root)?;
    let episode = episode_from_id(&index, id)?;
    let model = ckpt.model()?;
    let pred = model.predict(&episode)?;
    let img = &episode.query.image;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let gap = 4;
    let mut out = RgbImage::from_pixel((3 * w + 2 * gap) as u32, h as u32, Rgb([255, 255, 255]));
    for y in 0..h {
        for x in 0..w {
            let c = |ch: usize| (img.data()[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, Rgb([c(0), c(1), c(2)]));
        }
    }
    for (slot, mask) in [(1, &episode.query.mask), (2, &pred.labels)] {
        let tile = colorize(mask);
        let x0 = (slot * (w + gap)) as u32;
        for (x, y, p) in tile.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *p);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
