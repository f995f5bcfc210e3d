//! Image quality assessment: full-reference PSNR and SSIM, the non-reference
//! underwater quality measure (UIQM), and a plug-in seam for an external
//! perceptual scorer. Pure functions over `[H, W, C]` level tensors; the
//! dynamic range is always declared per call (255 for 8-bit images, 2 for
//! [-1, 1] tensors), never inferred.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Per-image (or averaged) metric values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub uiqm: f64,
    pub lpips: Option<f64>,
}

/// PSNR cap used when the mean squared error is zero.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_same(a: &Tensor<f32>, b: &Tensor<f32>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, clamped to [0, 100].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, max_value: f64) -> Result<f64> {
    check_same(a, b, "psnr")?;
    if max_value <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "psnr needs a positive dynamic range, got {max_value}"
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).clamp(0.0, PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn to_luma(t: &Tensor<f32>) -> Result<(Vec<f64>, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::InvalidParameter(format!(
            "expected [H, W, C], got {s:?}"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let data = t.data();
    let gray = match c {
        1 => data.iter().map(|&v| v as f64).collect(),
        3 => (0..h * w)
            .map(|i| {
                0.299 * data[i * 3] as f64
                    + 0.587 * data[i * 3 + 1] as f64
                    + 0.114 * data[i * 3 + 2] as f64
            })
            .collect(),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "luma conversion supports 1 or 3 channels, got {c}"
            )))
        }
    };
    Ok((gray, h, w))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local structural similarity on the BT.601 luma, 11x11 Gaussian
/// window (sigma 1.5), K1 = 0.01, K2 = 0.03.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, max_value: f64) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let (ga, h, w) = to_luma(a)?;
    let (gb, _, _) = to_luma(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let c1 = (SSIM_K1 * max_value) * (SSIM_K1 * max_value);
    let c2 = (SSIM_K2 * max_value) * (SSIM_K2 * max_value);
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - SSIM_WINDOW) {
        for ox in 0..=(w - SSIM_WINDOW) {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let k = win[wy * SSIM_WINDOW + wx];
                    let va = ga[(oy + wy) * w + ox + wx];
                    let vb = gb[(oy + wy) * w + ox + wx];
                    mx += k * va;
                    my += k * vb;
                    mxx += k * va * va;
                    myy += k * vb * vb;
                    mxy += k * va * vb;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// UIQM composite weights and block size from the published measure.
const UIQM_C1: f64 = 0.0282;
const UIQM_C2: f64 = 0.2953;
const UIQM_C3: f64 = 3.5753;
const UIQM_BLOCK: usize = 8;
const UIQM_TRIM_ALPHA: f64 = 0.1;

fn trimmed_mean(sorted: &[f64]) -> f64 {
    let t = (UIQM_TRIM_ALPHA * sorted.len() as f64).floor() as usize;
    let kept = &sorted[t..sorted.len() - t];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Colorfulness term: asymmetrically trimmed chroma statistics of the
/// red-green and yellow-blue opponent channels.
fn uicm(data: &[f32], n_px: usize) -> f64 {
    let mut rg: Vec<f64> = Vec::with_capacity(n_px);
    let mut yb: Vec<f64> = Vec::with_capacity(n_px);
    for i in 0..n_px {
        let r = data[i * 3] as f64;
        let g = data[i * 3 + 1] as f64;
        let b = data[i * 3 + 2] as f64;
        rg.push(r - g);
        yb.push((r + g) / 2.0 - b);
    }
    let mut rg_sorted = rg.clone();
    let mut yb_sorted = yb.clone();
    rg_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    yb_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mu_rg = trimmed_mean(&rg_sorted);
    let mu_yb = trimmed_mean(&yb_sorted);
    let var_rg = rg.iter().map(|v| (v - mu_rg) * (v - mu_rg)).sum::<f64>() / rg.len() as f64;
    let var_yb = yb.iter().map(|v| (v - mu_yb) * (v - mu_yb)).sum::<f64>() / yb.len() as f64;
    -0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (var_rg + var_yb).sqrt()
}

fn reflect(i: i64, n: usize) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i as usize >= n {
        2 * n - 1 - i as usize
    } else {
        i as usize
    }
}

/// Sobel gradient magnitude with reflected borders.
fn sobel_magnitude(ch: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: i64, x: i64| ch[reflect(y, h) * w + reflect(x, w)];
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            out[(y as usize) * w + x as usize] = gy.hypot(gx);
        }
    }
    out
}

/// Blockwise log contrast of an edge-weighted channel:
/// (2 / (k1 k2)) * sum ln(max/min), blocks with a zero excluded.
fn eme(map: &[f64], h: usize, w: usize) -> f64 {
    let (k1, k2) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    let mut acc = 0.0;
    for by in 0..k1 {
        for bx in 0..k2 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in by * UIQM_BLOCK..(by + 1) * UIQM_BLOCK {
                for x in bx * UIQM_BLOCK..(bx + 1) * UIQM_BLOCK {
                    let v = map[y * w + x];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if lo > 0.0 && hi > 0.0 {
                acc += (hi / lo).ln();
            }
        }
    }
    2.0 / (k1 * k2) as f64 * acc
}

/// Sharpness term: luma-weighted EME of the Sobel-edge-weighted channels.
fn uism(data: &[f32], h: usize, w: usize) -> f64 {
    let weights = [0.299, 0.587, 0.114];
    let mut total = 0.0;
    for (c, &lambda) in weights.iter().enumerate() {
        let ch: Vec<f64> = (0..h * w).map(|i| data[i * 3 + c] as f64).collect();
        let edges = sobel_magnitude(&ch, h, w);
        let weighted: Vec<f64> = ch.iter().zip(&edges).map(|(&v, &e)| v * e).collect();
        total += lambda * eme(&weighted, h, w);
    }
    total
}

/// Contrast term: blockwise log-AMEE over all channels jointly.
fn uiconm(data: &[f32], h: usize, w: usize) -> f64 {
    let (k1, k2) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    let mut acc = 0.0;
    for by in 0..k1 {
        for bx in 0..k2 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in by * UIQM_BLOCK..(by + 1) * UIQM_BLOCK {
                for x in bx * UIQM_BLOCK..(bx + 1) * UIQM_BLOCK {
                    for c in 0..3 {
                        let v = data[(y * w + x) * 3 + c] as f64;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let top = hi - lo;
            let bot = hi + lo;
            if top > 0.0 && bot > 0.0 {
                acc += (top / bot) * (top / bot).ln();
            }
        }
    }
    acc / (k1 * k2) as f64
}

/// Underwater image quality measure on a 0..255-level color image:
/// c1 * UICM + c2 * UISM + c3 * UIConM.
pub fn uiqm(a: &Tensor<f32>) -> Result<f64> {
    let s = a.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::InvalidParameter(format!(
            "uiqm needs a color [H, W, 3] image, got {s:?}"
        )));
    }
    let (h, w) = (s[0], s[1]);
    if h < UIQM_BLOCK || w < UIQM_BLOCK {
        return Err(Error::InvalidParameter(format!(
            "image {h}x{w} is smaller than the {UIQM_BLOCK}x{UIQM_BLOCK} analysis block"
        )));
    }
    let data = a.data();
    Ok(UIQM_C1 * uicm(data, h * w) + UIQM_C2 * uism(data, h, w) + UIQM_C3 * uiconm(data, h, w))
}

/// External perceptual scorer (the network itself is out of scope; anything
/// implementing this trait can be plugged in).
pub trait LpipsScorer {
    fn score(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64>;
}

/// Delegates to a registered scorer; without one the metric is simply
/// reported as unavailable.
pub fn lpips_hook(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    scorer: Option<&dyn LpipsScorer>,
) -> Result<Option<f64>> {
    match scorer {
        None => Ok(None),
        Some(s) => Ok(Some(s.score(a, b)?)),
    }
}

/// Metrics for a whole evaluation set.
pub struct EvaluationReport {
    pub per_image: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

/// Evaluates (enhanced, reference) pairs on the 0..255 level scale and
/// averages the per-image metrics arithmetically.
pub fn evaluate_set(
    pairs: &[(String, Tensor<f32>, Tensor<f32>)],
    scorer: Option<&dyn LpipsScorer>,
) -> Result<EvaluationReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("evaluate_set needs pairs".into()));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    let (mut s_psnr, mut s_ssim, mut s_uiqm, mut s_lpips) = (0.0, 0.0, 0.0, 0.0);
    for (name, enhanced, reference) in pairs {
        let report = MetricReport {
            psnr: psnr(enhanced, reference, 255.0)?,
            ssim: ssim(enhanced, reference, 255.0)?,
            uiqm: uiqm(enhanced)?,
            lpips: lpips_hook(enhanced, reference, scorer)?,
        };
        s_psnr += report.psnr;
        s_ssim += report.ssim;
        s_uiqm += report.uiqm;
        if let Some(l) = report.lpips {
            s_lpips += l;
        }
        per_image.push((name.clone(), report));
    }
    let n = pairs.len() as f64;
    let mean = MetricReport {
        psnr: s_psnr / n,
        ssim: s_ssim / n,
        uiqm: s_uiqm / n,
        lpips: scorer.map(|_| s_lpips / n),
    };
    Ok(EvaluationReport { per_image, mean })
}

/// Writes the per-image table: `filename,psnr,ssim,uiqm[,lpips]`.
pub fn write_csv(report: &EvaluationReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let with_lpips = report.mean.lpips.is_some();
    if with_lpips {
        writeln!(f, "filename,psnr,ssim,uiqm,lpips")?;
    } else {
        writeln!(f, "filename,psnr,ssim,uiqm")?;
    }
    for (name, m) in &report.per_image {
        if let Some(l) = m.lpips {
            writeln!(f, "{name},{:.6},{:.6},{:.6},{:.6}", m.psnr, m.ssim, m.uiqm, l)?;
        } else {
            writeln!(f, "{name},{:.6},{:.6},{:.6}", m.psnr, m.ssim, m.uiqm)?;
        }
    }
    Ok(())
}
