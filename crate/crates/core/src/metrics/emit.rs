//! File emitters: empirical-CDF plots (CSV + SVG) and convolution
//! feature-map images.

use super::roc::ecdf;
use crate::architectures::Model;
use crate::engine::Layer;
use crate::error::{Error, Result};
use crate::ncd::{Origin, ScoreSet};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

/// One named curve for [`svg_step_plot`].
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"];

/// Renders step curves (right-continuous, ECDF style) as a standalone
/// SVG 1.1 document.
pub fn svg_step_plot(series: &[PlotSeries], title: &str, x_label: &str, y_label: &str) -> String {
    let (width, height) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let pw = width - ml - mr;
    let ph = height - mt - mb;

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min: f64 = 0.0;
    let mut y_max: f64 = 1.0;
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() || x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    let pad = (x_max - x_min) * 0.03;
    let (x_min, x_max) = (x_min - pad, x_max + pad);
    let sx = move |x: f64| ml + (x - x_min) / (x_max - x_min) * pw;
    let sy = move |y: f64| mt + (y_max - y) / (y_max - y_min) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg version="1.1" xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    ));
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    svg.push_str(&format!(
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        width / 2.0,
        xml_escape(title)
    ));
    // Axes with four ticks each.
    svg.push_str(&format!(
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        height - mb,
        width - mr,
        height - mb
    ));
    svg.push_str(&format!(
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        height - mb
    ));
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        svg.push_str(&format!(
            r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/><text x="{0}" y="{3}" text-anchor="middle" font-family="sans-serif" font-size="11">{4}</text>"#,
            sx(fx),
            height - mb,
            height - mb + 5.0,
            height - mb + 18.0,
            format_tick(fx)
        ));
        svg.push_str(&format!(
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/><text x="{3}" y="{4}" text-anchor="end" font-family="sans-serif" font-size="11">{5}</text>"#,
            ml - 5.0,
            sy(fy),
            ml,
            ml - 8.0,
            sy(fy) + 4.0,
            format_tick(fy)
        ));
    }
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        ml + pw / 2.0,
        height - 8.0,
        xml_escape(x_label)
    ));
    svg.push_str(&format!(
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        xml_escape(y_label)
    ));

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if s.points.is_empty() {
            continue;
        }
        // Draw each step: run to the value, then rise to its level.
        let mut d = format!("M{} {}", sx(s.points[0].0), sy(0.0));
        for (pi, &(x, y)) in s.points.iter().enumerate() {
            d.push_str(&format!(" H{}", sx(x)));
            d.push_str(&format!(" V{}", sy(y)));
            if pi + 1 == s.points.len() {
                d.push_str(&format!(" H{}", sx(x_max)));
            }
        }
        svg.push_str(&format!(
            r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.8"/>"#
        ));
        let ly = mt + 16.0 + 18.0 * si as f64;
        svg.push_str(&format!(
            r#"<rect x="{}" y="{}" width="14" height="4" fill="{color}"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            ml + 12.0,
            ly - 4.0,
            ml + 32.0,
            ly,
            xml_escape(&s.label)
        ));
    }
    svg.push_str("</svg>");
    svg
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Emits the empirical CDF of one score column, grouped by origin (the
/// in-distribution test set vs the held-out set), as `<base>.csv` with
/// columns `group,w,ecdf` and a step plot `<base>.svg`.
pub fn emit_cdf(set: &ScoreSet, layer: &str, base: &Path) -> Result<(PathBuf, PathBuf)> {
    let idx = set
        .layers
        .iter()
        .position(|l| l == layer)
        .ok_or_else(|| Error::Config(format!("no score column for layer '{layer}'")))?;
    let mut groups: Vec<(Origin, Vec<f64>)> = vec![(Origin::Test, vec![]), (Origin::Ood, vec![])];
    for row in &set.rows {
        let slot = if row.u { 1 } else { 0 };
        groups[slot].1.push(row.scores[idx]);
    }

    let csv_path = base.with_extension("csv");
    let svg_path = base.with_extension("svg");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
    w.write_record(["group", "w", "ecdf"])
        .map_err(|e| Error::csv(&csv_path, e))?;
    let mut series = Vec::new();
    for (origin, values) in &groups {
        if values.is_empty() {
            continue;
        }
        let curve = ecdf(values);
        for &(x, y) in &curve {
            w.write_record([&origin.to_string(), &format!("{x}"), &format!("{y}")])
                .map_err(|e| Error::csv(&csv_path, e))?;
        }
        series.push(PlotSeries {
            label: match origin {
                Origin::Test => format!("T (n={})", values.len()),
                Origin::Ood => format!("O (n={})", values.len()),
            },
            points: curve,
        });
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let svg = svg_step_plot(
        &series,
        &format!("Mahalanobis score CDF, layer {layer}"),
        "score w",
        "empirical CDF",
    );
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}

/// Runs one image through the model and writes, per requested convolution
/// layer, a grayscale grid of that layer's filter activations (each map
/// min-max normalized to 0..255). Returns the written paths.
pub fn emit_feature_maps(
    model: &Model<f32>,
    image: &Tensor<f32>,
    layers: &[&str],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    for name in layers {
        match model.layer(name) {
            // Any layer of the convolution stack can be visualized; its
            // output still has a channel/height/width layout.
            Some(Layer::Conv2d(_) | Layer::BatchNorm(_) | Layer::MaxPool2(_) | Layer::Relu(_)) => {}
            Some(other) => {
                return Err(Error::Config(format!(
                    "layer '{name}' is a {} layer and has no spatial feature maps",
                    other.kind_name()
                )))
            }
            None => return Err(Error::Config(format!("unknown layer name '{name}'"))),
        }
    }
    let batched;
    let input = if image.ndim() == 3 {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        batched = image.clone().reshaped(shape)?;
        &batched
    } else {
        image
    };
    let (_, captures) = model.forward_eval_captures(input, layers)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (name, tensor) in captures {
        let shape = tensor.shape();
        if shape.len() != 4 {
            return Err(Error::Config(format!(
                "layer '{name}' output {shape:?} has no spatial feature maps"
            )));
        }
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let cols = (c as f64).sqrt().ceil() as usize;
        let rows = c.div_ceil(cols);
        let pad = 2usize;
        let gw = cols * w + (cols - 1) * pad;
        let gh = rows * h + (rows - 1) * pad;
        let mut pixels = vec![0u8; gw * gh];
        for ci in 0..c {
            let map = &tensor.data()[ci * h * w..][..h * w];
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in map {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
            let (gy, gx) = (ci / cols, ci % cols);
            let oy = gy * (h + pad);
            let ox = gx * (w + pad);
            for y in 0..h {
                for x in 0..w {
                    pixels[(oy + y) * gw + ox + x] =
                        ((map[y * w + x] - lo) * scale).round() as u8;
                }
            }
        }
        let img = image::GrayImage::from_raw(gw as u32, gh as u32, pixels)
            .expect("buffer matches dimensions");
        let path = out_dir.join(format!("feature_maps_{name}.png"));
        img.save(&path)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}
