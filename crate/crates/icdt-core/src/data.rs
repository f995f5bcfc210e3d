//! Image I/O, paired datasets, and the synthetic paired-degradation
//! generator used as the desk-scale stand-in for a real underwater dataset.
//!
//! Images cross the codec boundary as `[H, W, 3]` tensors scaled to [-1, 1];
//! metrics operate on the 0..255 level scale.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// 8-bit image to a [-1, 1] tensor.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in img.pixels() {
        for c in 0..3 {
            data.push(px.0[c] as f32 / 127.5 - 1.0);
        }
    }
    Tensor::from_vec(vec![h as usize, w as usize, 3], data).expect("image tensor")
}

/// [-1, 1] tensor to an 8-bit image, clamping out-of-range values.
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let shape = t.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::InvalidParameter(format!(
            "expected [H, W, 3] tensor, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0] as u32, shape[1] as u32);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let base = ((y * w + x) * 3) as usize;
            let px = [0, 1, 2].map(|c| {
                let v = (t.data()[base + c].clamp(-1.0, 1.0) + 1.0) * 127.5;
                v.round() as u8
            });
            img.put_pixel(x, y, image::Rgb(px));
        }
    }
    Ok(img)
}

/// 8-bit image to a 0..255 level tensor (metrics scale).
pub fn image_to_levels(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.pixels().flat_map(|p| p.0.map(|v| v as f32)).collect();
    Tensor::from_vec(vec![h as usize, w as usize, 3], data).expect("image tensor")
}

/// Writes a binary PPM (P6, maxval 255).
pub fn save_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let (w, h) = img.dimensions();
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(img.as_raw())?;
    Ok(())
}

fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    // header: magic, width, height, maxval, separated by whitespace/comments
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("non-ascii header"))?
                .to_string(),
        );
    }
    if fields.len() != 4 || fields[0] != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let w: u32 = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: u32 = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = (w * h * 3) as usize;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    RgbImage::from_raw(w, h, bytes[pos..pos + need].to_vec())
        .ok_or_else(|| bad("pixel buffer mismatch"))
}

/// Loads a PNG or binary PPM by extension.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        _ => Ok(image::open(path)?.to_rgb8()),
    }
}

/// Saves as PNG or binary PPM by extension.
pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => save_ppm(path, img),
        _ => {
            img.save(path)?;
            Ok(())
        }
    }
}

/// Paired dataset rooted at a directory with `trainA/` (degraded) and
/// `trainB/` (reference) holding identically named 8-bit images of equal
/// dimensions. Images are loaded eagerly as [-1, 1] tensors.
pub struct PairedDataset {
    root: PathBuf,
    names: Vec<String>,
    degraded: Vec<Tensor<f32>>,
    reference: Vec<Tensor<f32>>,
}

impl PairedDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let dir_a = root.join("trainA");
        let dir_b = root.join("trainB");
        for d in [&dir_a, &dir_b] {
            if !d.is_dir() {
                return Err(Error::InvalidParameter(format!(
                    "dataset directory {} is missing",
                    d.display()
                )));
            }
        }
        let list = |d: &Path| -> Result<Vec<String>> {
            let mut names: Vec<String> = fs::read_dir(d)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            Ok(names)
        };
        let names_a = list(&dir_a)?;
        let names_b = list(&dir_b)?;
        if names_a != names_b {
            return Err(Error::InvalidParameter(format!(
                "trainA and trainB of {} hold different file sets",
                root.display()
            )));
        }
        if names_a.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "dataset {} is empty",
                root.display()
            )));
        }
        let mut degraded = Vec::with_capacity(names_a.len());
        let mut reference = Vec::with_capacity(names_a.len());
        for name in &names_a {
            let a = image_to_tensor(&load_image(&dir_a.join(name))?);
            let b = image_to_tensor(&load_image(&dir_b.join(name))?);
            if a.shape() != b.shape() {
                return Err(Error::shape("paired dataset", a.shape(), b.shape()));
            }
            degraded.push(a);
            reference.push(b);
        }
        Ok(PairedDataset {
            root: root.to_path_buf(),
            names: names_a,
            degraded,
            reference,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// (degraded, reference) pair in [-1, 1].
    pub fn pair(&self, i: usize) -> (&Tensor<f32>, &Tensor<f32>) {
        (&self.degraded[i], &self.reference[i])
    }

    pub fn references(&self) -> &[Tensor<f32>] {
        &self.reference
    }

    /// Copy of a contiguous index range as its own dataset (train/eval splits).
    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<PairedDataset> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::InvalidParameter(format!(
                "subset {range:?} outside dataset of {}",
                self.len()
            )));
        }
        Ok(PairedDataset {
            root: self.root.clone(),
            names: self.names[range.clone()].to_vec(),
            degraded: self.degraded[range.clone()].to_vec(),
            reference: self.reference[range].to_vec(),
        })
    }
}

/// Degradation transform drawn once per dataset seed: per-channel attenuation
/// with strong red suppression, additive haze toward a green-blue veil, a
/// mild Gaussian blur, and pixel noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationParams {
    pub attenuation: [f64; 3],
    pub veil: [f64; 3],
    pub haze: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl DegradationParams {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        DegradationParams {
            attenuation: [
                rng.random_range(0.30..0.45),
                rng.random_range(0.80..0.95),
                rng.random_range(0.70..0.85),
            ],
            veil: [
                rng.random_range(0.04..0.10),
                rng.random_range(0.45..0.60),
                rng.random_range(0.40..0.55),
            ],
            haze: rng.random_range(0.20..0.35),
            blur_sigma: rng.random_range(0.5..0.9),
            noise_sigma: rng.random_range(0.01..0.03),
        }
    }
}

/// One synthetic pair: values in [0, 1], `[side, side, 3]`.
fn reference_image(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0f64; side * side * 3];
    // smooth color field: three shared low-frequency waves, each modulating
    // the channels with its own gains (channel-correlated structure, like
    // natural imagery)
    let offsets = [
        rng.random_range(0.40..0.65), // red floor keeps the channel bright
        rng.random_range(0.30..0.70),
        rng.random_range(0.30..0.70),
    ];
    let mut waves = Vec::new();
    for _ in 0..3 {
        let fx = rng.random_range(0.5..2.0) / side as f64;
        let fy = rng.random_range(0.5..2.0) / side as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let gains = [
            rng.random_range(-0.10..0.10),
            rng.random_range(-0.10..0.10),
            rng.random_range(-0.10..0.10),
        ];
        waves.push((fx, fy, phase, gains));
    }
    for y in 0..side {
        for x in 0..side {
            for (c, &offset) in offsets.iter().enumerate() {
                let mut v = offset;
                for &(fx, fy, ph, gains) in &waves {
                    v += gains[c]
                        * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin();
                }
                img[(y * side + x) * 3 + c] = v;
            }
        }
    }
    // a few soft-edged discs
    let discs = rng.random_range(1..=3);
    for _ in 0..discs {
        let cx = rng.random_range(0.2..0.8) * side as f64;
        let cy = rng.random_range(0.2..0.8) * side as f64;
        let radius = rng.random_range(0.15..0.35) * side as f64;
        let color = [
            rng.random_range(0.30..0.90),
            rng.random_range(0.25..0.90),
            rng.random_range(0.25..0.90),
        ];
        let soft = 0.14 * side as f64;
        for y in 0..side {
            for x in 0..side {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let alpha = 1.0 / (1.0 + ((d - radius) / soft).exp());
                for c in 0..3 {
                    let i = (y * side + x) * 3 + c;
                    img[i] = (1.0 - alpha) * img[i] + alpha * color[c];
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.02, 0.98);
    }
    img
}

fn gaussian_blur(img: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    // separable 3-tap kernel
    let k1 = (-0.5 / (sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * k1;
    let (w0, w1) = (1.0 / norm, k1 / norm);
    let reflect = |i: i64| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i as usize >= side {
            2 * side - 1 - i as usize
        } else {
            i as usize
        }
    };
    let mut tmp = vec![0.0f64; img.len()];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let mut v = w0 * img[(y * side + x) * 3 + c];
                v += w1 * img[(y * side + reflect(x as i64 - 1)) * 3 + c];
                v += w1 * img[(y * side + reflect(x as i64 + 1)) * 3 + c];
                tmp[(y * side + x) * 3 + c] = v;
            }
        }
    }
    let mut out = vec![0.0f64; img.len()];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let mut v = w0 * tmp[(y * side + x) * 3 + c];
                v += w1 * tmp[(reflect(y as i64 - 1) * side + x) * 3 + c];
                v += w1 * tmp[(reflect(y as i64 + 1) * side + x) * 3 + c];
                out[(y * side + x) * 3 + c] = v;
            }
        }
    }
    out
}

fn degrade(img: &[f64], side: usize, p: &DegradationParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out: Vec<f64> = img
        .iter()
        .enumerate()
        .map(|(i, &v)| v * p.attenuation[i % 3])
        .collect();
    for (i, v) in out.iter_mut().enumerate() {
        *v = *v * (1.0 - p.haze) + p.haze * p.veil[i % 3];
    }
    out = gaussian_blur(&out, side, p.blur_sigma);
    for v in out.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + p.noise_sigma * n).clamp(0.0, 1.0);
    }
    out
}

fn quantize(img: &[f64], side: usize) -> RgbImage {
    let mut out = RgbImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            let base = (y * side + x) * 3;
            let px = [0, 1, 2].map(|c| (img[base + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

/// A generated pair of 8-bit images (degraded, reference).
pub struct SyntheticPair {
    pub name: String,
    pub degraded: RgbImage,
    pub reference: RgbImage,
}

/// Generates `count` paired images of size `side` x `side`. The degradation
/// parameters are drawn once from the seed and shared by every pair; the
/// same seed always produces byte-identical images.
pub fn generate_synthetic(
    count: usize,
    side: usize,
    seed: u64,
) -> Result<(Vec<SyntheticPair>, DegradationParams)> {
    if count == 0 || side < 4 {
        return Err(Error::InvalidParameter(
            "synthetic dataset needs count >= 1 and side >= 4".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = DegradationParams::draw(&mut rng);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let reference = reference_image(side, &mut rng);
        let degraded = degrade(&reference, side, &params, &mut rng);
        pairs.push(SyntheticPair {
            name: format!("img_{i:04}.png"),
            degraded: quantize(&degraded, side),
            reference: quantize(&reference, side),
        });
    }
    Ok((pairs, params))
}

/// Writes a synthetic dataset under `out/trainA` (degraded) and
/// `out/trainB` (reference), plus a `params.txt` logging the drawn transform.
pub fn write_synthetic_dataset(
    out: &Path,
    count: usize,
    side: usize,
    seed: u64,
) -> Result<DegradationParams> {
    let (pairs, params) = generate_synthetic(count, side, seed)?;
    let dir_a = out.join("trainA");
    let dir_b = out.join("trainB");
    fs::create_dir_all(&dir_a)?;
    fs::create_dir_all(&dir_b)?;
    for p in &pairs {
        p.degraded.save(dir_a.join(&p.name))?;
        p.reference.save(dir_b.join(&p.name))?;
    }
    let mut log = fs::File::create(out.join("params.txt"))?;
    writeln!(log, "seed={seed}")?;
    writeln!(log, "count={count}")?;
    writeln!(log, "side={side}")?;
    writeln!(
        log,
        "attenuation={:?} veil={:?} haze={:?} blur_sigma={:?} noise_sigma={:?}",
        params.attenuation, params.veil, params.haze, params.blur_sigma, params.noise_sigma
    )?;
    Ok(params)
}
