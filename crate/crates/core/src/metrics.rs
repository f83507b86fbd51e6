//! Reconstruction and stability metrics plus the per-clip report table.
//!
//! PSNR and SSIM follow their standard definitions (SSIM with the 11-tap
//! Gaussian window, sigma 1.5, k1 = 0.01, k2 = 0.03, population statistics,
//! valid-region mean) and are pinned against an independent reference
//! implementation in the tests. Flicker is the toolkit's temporal-stability
//! proxy: mean absolute difference between consecutive frames.

use std::collections::{BTreeMap, BTreeSet};

use crate::denoiser::grid_item_tokens;
use crate::adapter::frame_similarity;
use crate::error::{CoreError, Result};
use crate::grid::{Grid, Scalar};

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn to_f64_plane<T: Scalar>(g: &Grid<T>, b: usize, c: usize) -> Vec<f64> {
    g.plane(b, c).iter().map(|v| v.to_f64().unwrap()).collect()
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Grid<T>, b: &Grid<T>, peak: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if peak <= 0.0 {
        return Err(CoreError::InvalidParameter(format!("peak must be positive, got {peak}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized Gaussian taps over a centered window.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut w: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-region convolution of an h-by-w plane with a 1-D window.
fn filter_valid(p: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &g) in win.iter().enumerate() {
                acc += g * p[y * w + x + i];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, &g) in win.iter().enumerate() {
                acc += g * horiz[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> f64 {
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();

    let ux = filter_valid(a, h, w, &win);
    let uy = filter_valid(b, h, w, &win);
    let uxx = filter_valid(&aa, h, w, &win);
    let uyy = filter_valid(&bb, h, w, &win);
    let uxy = filter_valid(&ab, h, w, &win);

    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut acc = 0.0;
    for i in 0..ux.len() {
        let (mx, my) = (ux[i], uy[i]);
        let vx = uxx[i] - mx * mx;
        let vy = uyy[i] - my * my;
        let vxy = uxy[i] - mx * my;
        acc += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    acc / ux.len() as f64
}

/// Mean SSIM over all planes of the grid. Needs both spatial dims to be at
/// least the window size.
pub fn ssim<T: Scalar>(a: &Grid<T>, b: &Grid<T>, data_range: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if data_range <= 0.0 {
        return Err(CoreError::InvalidParameter(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    let s = a.shape();
    if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
        return Err(CoreError::InvalidParameter(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} planes, got {}x{}",
            s.height, s.width
        )));
    }
    let mut acc = 0.0;
    for bch in 0..s.batch {
        for c in 0..s.channels {
            acc += ssim_plane(
                &to_f64_plane(a, bch, c),
                &to_f64_plane(b, bch, c),
                s.height,
                s.width,
                data_range,
            );
        }
    }
    Ok(acc / (s.batch * s.channels) as f64)
}

/// Mean absolute difference between consecutive frames, averaged over all
/// pairs. Zero iff every frame is identical.
pub fn flicker_metric<T: Scalar>(clip: &Grid<T>) -> Result<f64> {
    let s = clip.shape();
    if s.batch < 2 {
        return Err(CoreError::InvalidParameter(format!(
            "flicker needs at least 2 frames, got {}",
            s.batch
        )));
    }
    let item = s.channels * s.plane_len();
    let data = clip.data();
    let mut pair_means = Vec::with_capacity(s.batch - 1);
    for f in 0..s.batch - 1 {
        let (cur, next) = (&data[f * item..(f + 1) * item], &data[(f + 1) * item..(f + 2) * item]);
        let d: f64 = cur
            .iter()
            .zip(next)
            .map(|(&x, &y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
            .sum();
        pair_means.push(d / item as f64);
    }
    // Canonical summation order makes the metric exactly invariant under
    // frame reversal (the pair multiset is unchanged, only its order).
    pair_means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(pair_means.iter().sum::<f64>() / (s.batch - 1) as f64)
}

/// Cosine similarity of each consecutive frame pair, flattened per frame.
pub fn similarity_curve<T: Scalar>(clip: &Grid<T>) -> Result<Vec<f64>> {
    let n = clip.shape().batch;
    if n < 2 {
        return Err(CoreError::InvalidParameter(format!(
            "similarity curve needs at least 2 frames, got {n}"
        )));
    }
    let mut curve = Vec::with_capacity(n - 1);
    for f in 0..n - 1 {
        let a = grid_item_tokens(clip, f)?;
        let b = grid_item_tokens(clip, f + 1)?;
        curve.push(frame_similarity(&a, &b)?);
    }
    Ok(curve)
}

/// One report row; external metrics are `None` when the hook failed for
/// this clip and render as "n/a".
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub flicker: f64,
    pub mean_similarity: f64,
    pub external: BTreeMap<String, Option<f64>>,
}

/// Compare a clip against its reference and fill the standard columns.
pub fn clip_metrics<T: Scalar>(
    clip_id: impl Into<String>,
    frames: &Grid<T>,
    reference: &Grid<T>,
    peak: f64,
) -> Result<ClipMetrics> {
    let curve = similarity_curve(frames)?;
    Ok(ClipMetrics {
        clip_id: clip_id.into(),
        psnr: psnr(frames, reference, peak)?,
        ssim: ssim(frames, reference, peak)?,
        flicker: flicker_metric(frames)?,
        mean_similarity: curve.iter().sum::<f64>() / curve.len() as f64,
        external: BTreeMap::new(),
    })
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ClipMetrics>,
}

/// Column means; external columns average their parsed values only.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub psnr: f64,
    pub ssim: f64,
    pub flicker: f64,
    pub mean_similarity: f64,
    pub external: BTreeMap<String, Option<f64>>,
}

impl MetricReport {
    pub fn new(rows: Vec<ClipMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::EmptyInput("metric report without rows".into()));
        }
        Ok(Self { rows })
    }

    /// Sorted union of external metric names across all rows.
    pub fn external_columns(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.external.keys()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn aggregate(&self) -> AggregateRow {
        let n = self.rows.len() as f64;
        let mean = |f: fn(&ClipMetrics) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        let mut external = BTreeMap::new();
        for col in self.external_columns() {
            let vals: Vec<f64> =
                self.rows.iter().filter_map(|r| r.external.get(&col).copied().flatten()).collect();
            let agg = if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            };
            external.insert(col, agg);
        }
        AggregateRow {
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            flicker: mean(|r| r.flicker),
            mean_similarity: mean(|r| r.mean_similarity),
            external,
        }
    }

    /// Deterministic CSV: fixed column order, shortest-roundtrip floats, an
    /// `aggregate` row last. Same rows give identical bytes.
    pub fn to_csv(&self) -> String {
        let ext = self.external_columns();
        let mut out = String::from("clip,psnr,ssim,flicker,mean_similarity");
        for col in &ext {
            out.push(',');
            out.push_str(col);
        }
        out.push('\n');
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x}"),
            None => "n/a".to_string(),
        };
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.clip_id, r.psnr, r.ssim, r.flicker, r.mean_similarity
            ));
            for col in &ext {
                out.push(',');
                out.push_str(&fmt(r.external.get(col).copied().flatten()));
            }
            out.push('\n');
        }
        let agg = self.aggregate();
        out.push_str(&format!(
            "aggregate,{},{},{},{}",
            agg.psnr, agg.ssim, agg.flicker, agg.mean_similarity
        ));
        for col in &ext {
            out.push(',');
            out.push_str(&fmt(agg.external.get(col).copied().flatten()));
        }
        out.push('\n');
        out
    }
}
