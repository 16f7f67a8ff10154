//! Held-out evaluation: fit an embedding on the left half of each test
//! image, score the right half.

use serde::{Deserialize, Serialize};

use crate::buffer::Image;
use crate::metrics;
use crate::pipeline::{optimize_test_embedding, Model};
use crate::scene::TrainImage;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    /// Right-half scores with the fitted embedding.
    pub psnr: f64,
    pub ssim: f64,
    /// Right-half PSNR with the mean training embedding.
    pub baseline_psnr: f64,
    /// Left-half PSNR after fitting.
    pub fit_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_baseline_psnr: f64,
}

impl EvalTable {
    /// Plain-text table, one line per image plus a mean row.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>6} {:>10} {:>8} {:>14} {:>10}\n",
            "image", "psnr", "ssim", "baseline_psnr", "fit_psnr"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>6} {:>10} {:>8.4} {:>14} {:>10}\n",
                r.index,
                metrics::format_db(r.psnr),
                r.ssim,
                metrics::format_db(r.baseline_psnr),
                metrics::format_db(r.fit_psnr)
            ));
        }
        s.push_str(&format!(
            "{:>6} {:>10} {:>8.4} {:>14}\n",
            "mean",
            metrics::format_db(self.mean_psnr),
            self.mean_ssim,
            metrics::format_db(self.mean_baseline_psnr)
        ));
        s
    }
}

fn right(img: &Image) -> Image {
    img.crop_columns(img.width() / 2, img.width())
}

/// Runs the left-half protocol on every image of `test`.
pub fn evaluate(model: &Model, test: &[TrainImage], iterations: usize, lr: f64) -> Result<EvalTable> {
    if test.is_empty() {
        return Err(Error::Argument("evaluation needs at least one test image".into()));
    }
    let mut rows = Vec::with_capacity(test.len());
    for t in test {
        let fit = optimize_test_embedding(model, &t.image, &t.camera, iterations, lr)?;
        let (fit_psnr, _) = *fit.trace.last().expect("trace has the initial entry");
        let baseline_psnr = fit.trace[0].1;
        let render = model.render_live(&fit.embedding, &t.camera)?;
        rows.push(EvalRow {
            index: t.index,
            psnr: metrics::psnr(&right(&render), &right(&t.image))?,
            ssim: metrics::ssim(&right(&render), &right(&t.image))?,
            baseline_psnr,
            fit_psnr,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalTable {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_baseline_psnr: rows.iter().map(|r| r.baseline_psnr).sum::<f64>() / n,
        rows,
    })
}
