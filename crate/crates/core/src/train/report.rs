//! Markdown summary and precision/recall plot of an evaluation report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::eval::{PrPoint, Report};
use crate::error::{Error, Result};

pub const MARKDOWN_FILE: &str = "report.md";
pub const PR_CURVE_FILE: &str = "pr_curve.png";

pub fn render_markdown(r: &Report) -> String {
    let mut s = String::new();
    let d = &r.depth;
    let o = &r.ob;
    let t = &r.config.train;
    let _ = writeln!(s, "# Evaluation report\n");
    let _ = writeln!(
        s,
        "Stage {} on the {} split, {} images, checkpoint step {}{}.\n",
        r.stage,
        r.split.dir_name(),
        r.num_images,
        r.checkpoint_step,
        if r.oracle { " (ground truth injected as prediction)" } else { "" }
    );
    let _ = writeln!(s, "## Depth\n");
    let _ = writeln!(s, "| RMSE | RMSE log | Abs Rel | Sq Rel | log10 | δ<1.25 | δ<1.25² | δ<1.25³ |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    let _ = writeln!(
        s,
        "| {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
        d.rmse, d.rmse_log, d.abs_rel, d.sq_rel, d.log10, d.delta1, d.delta2, d.delta3
    );
    let _ = writeln!(s, "## Occlusion boundaries\n");
    let _ = writeln!(s, "| threshold | tolerance (px) | OB recall | OB precision | OB F-score |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    let _ = writeln!(
        s,
        "| {:.2} | {} | {:.4} | {:.4} | {:.4} |\n",
        o.threshold, r.config.eval.tolerance_radius, o.recall, o.precision, o.fscore
    );
    if let Some(delta) = r.mean_boundary_delta {
        let _ = writeln!(s, "Mean predicted depth contrast across boundary pixels: {delta:.4} m\n");
    }
    let _ = writeln!(s, "### Precision/recall sweep\n");
    let _ = writeln!(s, "![precision-recall]({PR_CURVE_FILE})\n");
    let _ = writeln!(s, "| threshold | recall | precision | F-score |");
    let _ = writeln!(s, "|---|---|---|---|");
    for p in &r.pr_curve {
        let _ = writeln!(s, "| {:.2} | {:.4} | {:.4} | {:.4} |", p.threshold, p.recall, p.precision, p.fscore);
    }
    let _ = writeln!(s, "\n## Training schedule\n");
    let _ = writeln!(
        s,
        "Adam, learning rate {:.1e} decaying linearly to {:.1e}; stage one {} steps on {}px crops, stage two {} steps at full resolution; batch {}; seed {}.\n",
        t.lr, t.lr_end, t.stage1_steps, t.crop_size, t.stage2_steps, t.batch_size, r.config.seed
    );
    let m = &r.config.model;
    let l = &r.config.loss;
    let _ = writeln!(
        s,
        "Model: base width {}, strip-attention fusion {}, image path {}, refinement stage {}. Loss weights: depth {}, boundary {}, contrast {}.\n",
        m.encoder.base_channels,
        on_off(m.use_casm),
        on_off(m.use_eip),
        on_off(m.use_ssr),
        l.w_d,
        l.w_ob,
        l.w_c
    );
    let _ = writeln!(s, "## Per image\n");
    let _ = writeln!(s, "| sample | RMSE | δ<1.25 | OB recall | OB F-score | padding |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for im in &r.images {
        let pad = match im.padding {
            Some(p) => format!("{}/{}/{}/{}", p.top, p.bottom, p.left, p.right),
            None => "-".to_string(),
        };
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            im.sample_id, im.depth.rmse, im.depth.delta1, im.ob.recall, im.ob.fscore, pad
        );
    }
    s
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Precision (y) against recall (x) on a 256px canvas.
pub fn plot_pr_curve(points: &[PrPoint]) -> RgbImage {
    const SIZE: u32 = 256;
    const MARGIN: i64 = 20;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let span = SIZE as i64 - 2 * MARGIN;
    let to_px = |r: f64, p: f64| -> (i64, i64) {
        (
            MARGIN + (r.clamp(0.0, 1.0) * span as f64).round() as i64,
            SIZE as i64 - MARGIN - (p.clamp(0.0, 1.0) * span as f64).round() as i64,
        )
    };
    let black = Rgb([0, 0, 0]);
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), black);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), black);
    let grey = Rgb([210, 210, 210]);
    line(&mut img, to_px(1.0, 0.0), to_px(1.0, 1.0), grey);
    line(&mut img, to_px(0.0, 1.0), to_px(1.0, 1.0), grey);
    let blue = Rgb([30, 80, 200]);
    for w in points.windows(2) {
        line(&mut img, to_px(w[0].recall, w[0].precision), to_px(w[1].recall, w[1].precision), blue);
    }
    for p in points {
        let (x, y) = to_px(p.recall, p.precision);
        for (ox, oy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            line(&mut img, (x + ox, y + oy), (x + ox, y + oy), Rgb([200, 40, 30]));
        }
    }
    img
}

/// Writes `report.md` and `pr_curve.png` under `out_dir`.
pub fn write_report(r: &Report, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let md = out_dir.join(MARKDOWN_FILE);
    std::fs::write(&md, render_markdown(r)).map_err(|e| Error::io(&md, e))?;
    let png = out_dir.join(PR_CURVE_FILE);
    plot_pr_curve(&r.pr_curve).save(&png).map_err(|e| Error::io(&png, e))?;
    Ok((md, png))
}
