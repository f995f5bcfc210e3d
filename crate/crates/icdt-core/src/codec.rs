//! Latent codecs: the conversion stage between image space and the latent
//! space the diffusion chain runs in. Two lossless toy codecs (identity and
//! space-to-depth) plus a small trainable autoencoder. Diffusion code never
//! touches images directly — everything downstream sees codec outputs only.

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::optim::{adamw_step, AdamState, AdamW};
use crate::tensor::{Graph, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Encoder/decoder pair with a declared spatial downsample factor.
pub trait LatentCodec {
    /// Spatial downsample ratio f: H x W x 3 maps to (H/f) x (W/f) x C.
    fn factor(&self) -> usize;
    /// Latent channel count C.
    fn latent_channels(&self) -> usize;
    fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn decode(&self, latent: &Tensor<f32>) -> Result<Tensor<f32>>;
}

fn check_divisible(shape: &[usize], f: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::InvalidParameter(format!(
            "codec expects [H, W, C], got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h % f != 0 || w % f != 0 {
        return Err(Error::shape("codec downsample", shape, &[f, f]));
    }
    Ok((h, w, c))
}

/// f = 1, C = 3: encode and decode are the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn factor(&self) -> usize {
        1
    }
    fn latent_channels(&self) -> usize {
        3
    }
    fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_divisible(image.shape(), 1)?;
        Ok(image.clone())
    }
    fn decode(&self, latent: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_divisible(latent.shape(), 1)?;
        Ok(latent.clone())
    }
}

/// Rearranges f x f spatial blocks into channels: C = 3 f^2, losslessly.
#[derive(Clone, Copy, Debug)]
pub struct SpaceToDepthCodec {
    factor: usize,
}

impl SpaceToDepthCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidParameter("downsample factor must be >= 1".into()));
        }
        Ok(SpaceToDepthCodec { factor })
    }
}

/// `[H, W, C] -> [H/f, W/f, C f^2]`, block-row-major channel packing.
pub fn space_to_depth<E: Scalar>(t: &Tensor<E>, f: usize) -> Result<Tensor<E>> {
    let (h, w, c) = check_divisible(t.shape(), f)?;
    let (gh, gw) = (h / f, w / f);
    let cc = c * f * f;
    let mut data = vec![E::zero(); t.numel()];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * cc;
            for py in 0..f {
                for px in 0..f {
                    let src = (((gy * f + py) * w) + gx * f + px) * c;
                    let dst = base + (py * f + px) * c;
                    data[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
                }
            }
        }
    }
    Tensor::from_vec(vec![gh, gw, cc], data)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<E: Scalar>(t: &Tensor<E>, f: usize, channels: usize) -> Result<Tensor<E>> {
    let shape = t.shape();
    if shape.len() != 3 || shape[2] != channels * f * f {
        return Err(Error::shape("depth_to_space", shape, &[channels * f * f]));
    }
    let (gh, gw) = (shape[0], shape[1]);
    let (h, w) = (gh * f, gw * f);
    let cc = shape[2];
    let mut data = vec![E::zero(); t.numel()];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * cc;
            for py in 0..f {
                for px in 0..f {
                    let dst = (((gy * f + py) * w) + gx * f + px) * channels;
                    let src = base + (py * f + px) * channels;
                    data[dst..dst + channels].copy_from_slice(&t.data()[src..src + channels]);
                }
            }
        }
    }
    Tensor::from_vec(vec![h, w, channels], data)
}

impl LatentCodec for SpaceToDepthCodec {
    fn factor(&self) -> usize {
        self.factor
    }
    fn latent_channels(&self) -> usize {
        3 * self.factor * self.factor
    }
    fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        space_to_depth(image, self.factor)
    }
    fn decode(&self, latent: &Tensor<f32>) -> Result<Tensor<f32>> {
        depth_to_space(latent, self.factor, 3)
    }
}

/// Widths of the autoencoder's hidden pointwise layers.
const AE_HIDDEN1: usize = 128;
const AE_HIDDEN2: usize = 96;

/// Small trainable autoencoder: a stride-f convolution (kernel = stride, so
/// exactly a per-block linear map) feeding a two-layer SiLU bottleneck, and
/// the mirrored decoder. Must be trained via [`train_codec`] before use.
#[derive(Clone, Debug)]
pub struct TinyAutoencoder {
    factor: usize,
    channels: usize,
    params: Option<Parameters<f32>>,
}

impl TinyAutoencoder {
    pub fn new(factor: usize, channels: usize) -> Result<Self> {
        if factor == 0 || channels == 0 {
            return Err(Error::InvalidParameter(
                "autoencoder needs factor >= 1 and channels >= 1".into(),
            ));
        }
        Ok(TinyAutoencoder {
            factor,
            channels,
            params: None,
        })
    }

    /// Parameter layout shared by construction, training, and checkpoints.
    pub fn param_shapes(factor: usize, channels: usize) -> Vec<(String, Vec<usize>)> {
        let pd = 3 * factor * factor;
        vec![
            ("enc.fc1.weight".into(), vec![pd, AE_HIDDEN1]),
            ("enc.fc1.bias".into(), vec![AE_HIDDEN1]),
            ("enc.fc2.weight".into(), vec![AE_HIDDEN1, AE_HIDDEN2]),
            ("enc.fc2.bias".into(), vec![AE_HIDDEN2]),
            ("enc.fc3.weight".into(), vec![AE_HIDDEN2, channels]),
            ("enc.fc3.bias".into(), vec![channels]),
            ("dec.fc1.weight".into(), vec![channels, AE_HIDDEN2]),
            ("dec.fc1.bias".into(), vec![AE_HIDDEN2]),
            ("dec.fc2.weight".into(), vec![AE_HIDDEN2, AE_HIDDEN1]),
            ("dec.fc2.bias".into(), vec![AE_HIDDEN1]),
            ("dec.fc3.weight".into(), vec![AE_HIDDEN1, pd]),
            ("dec.fc3.bias".into(), vec![pd]),
        ]
    }

    pub fn is_trained(&self) -> bool {
        self.params.is_some()
    }

    pub fn params(&self) -> Option<&Parameters<f32>> {
        self.params.as_ref()
    }

    /// Installs previously trained weights (checkpoint load).
    pub fn set_params(&mut self, params: Parameters<f32>) -> Result<()> {
        let specs = Self::param_shapes(self.factor, self.channels);
        if specs.len() != params.len() {
            return Err(Error::State("autoencoder parameter count mismatch".into()));
        }
        for (i, (name, shape)) in specs.iter().enumerate() {
            if params.name(i) != name || params.tensor(i).shape() != shape.as_slice() {
                return Err(Error::State(format!(
                    "autoencoder parameter {i} mismatch: expected {name} {shape:?}"
                )));
            }
        }
        self.params = Some(params);
        Ok(())
    }

    fn params_or_err(&self) -> Result<&Parameters<f32>> {
        self.params.as_ref().ok_or_else(|| {
            Error::NotFitted("autoencoder used before train_codec was run".into())
        })
    }

    /// Builds encode (and optionally decode) inside a graph; used by both
    /// the eval path and the training loop.
    fn encode_graph(
        &self,
        g: &mut Graph<f32>,
        ids: &[crate::tensor::NodeId],
        image: crate::tensor::NodeId,
    ) -> Result<crate::tensor::NodeId> {
        let f = self.factor;
        let shape = g.value(image).shape().to_vec();
        let (h, w, _) = check_divisible(&shape, f)?;
        let tokens = g.patchify(image, f)?;
        let t1 = g.matmul(tokens, ids[0])?;
        let t1 = g.row_add(t1, ids[1])?;
        let t1 = g.silu(t1);
        let t2 = g.matmul(t1, ids[2])?;
        let t2 = g.row_add(t2, ids[3])?;
        let t2 = g.silu(t2);
        let z = g.matmul(t2, ids[4])?;
        let z = g.row_add(z, ids[5])?;
        g.reshape(z, vec![h / f, w / f, self.channels])
    }

    fn decode_graph(
        &self,
        g: &mut Graph<f32>,
        ids: &[crate::tensor::NodeId],
        latent: crate::tensor::NodeId,
    ) -> Result<crate::tensor::NodeId> {
        let shape = g.value(latent).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::shape("autoencoder decode", &shape, &[self.channels]));
        }
        let (gh, gw) = (shape[0], shape[1]);
        if gh != gw {
            return Err(Error::Config(
                "autoencoder decode requires square latents".into(),
            ));
        }
        let tokens = g.reshape(latent, vec![gh * gw, self.channels])?;
        let t1 = g.matmul(tokens, ids[6])?;
        let t1 = g.row_add(t1, ids[7])?;
        let t1 = g.silu(t1);
        let t2 = g.matmul(t1, ids[8])?;
        let t2 = g.row_add(t2, ids[9])?;
        let t2 = g.silu(t2);
        let out = g.matmul(t2, ids[10])?;
        let out = g.row_add(out, ids[11])?;
        g.unpatchify(out, self.factor, 3)
    }

    fn insert_params(
        &self,
        g: &mut Graph<f32>,
        params: &Parameters<f32>,
        requires_grad: bool,
    ) -> Vec<crate::tensor::NodeId> {
        params
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), requires_grad))
            .collect()
    }
}

impl LatentCodec for TinyAutoencoder {
    fn factor(&self) -> usize {
        self.factor
    }
    fn latent_channels(&self) -> usize {
        self.channels
    }
    fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let params = self.params_or_err()?;
        let mut g = Graph::new();
        let ids = self.insert_params(&mut g, params, false);
        let img = g.constant(image.clone());
        let z = self.encode_graph(&mut g, &ids, img)?;
        Ok(g.value(z).clone())
    }
    fn decode(&self, latent: &Tensor<f32>) -> Result<Tensor<f32>> {
        let params = self.params_or_err()?;
        let mut g = Graph::new();
        let ids = self.insert_params(&mut g, params, false);
        let z = g.constant(latent.clone());
        let out = self.decode_graph(&mut g, &ids, z)?;
        Ok(g.value(out).clone())
    }
}

/// Trains the autoencoder to minimize reconstruction MSE over `images`
/// (square, `[side, side, 3]`, values in [-1, 1]). Deterministic for a given
/// seed; uses the same optimizer as the diffusion trainer, with the learning
/// rate raised to 1e-3 for the short codec budget.
pub fn train_codec(
    codec: &mut TinyAutoencoder,
    images: &[Tensor<f32>],
    epochs: usize,
    seed: u64,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidParameter("codec training needs images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match codec.params.take() {
        Some(p) => p,
        None => {
            let entries = TinyAutoencoder::param_shapes(codec.factor, codec.channels)
                .into_iter()
                .map(|(name, shape)| {
                    let t = if shape.len() == 1 {
                        Tensor::zeros(shape)
                    } else {
                        let lim = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        Tensor::rand_uniform(shape, -lim, lim, &mut rng)
                    };
                    (name, t)
                })
                .collect();
            Parameters::new(entries)
        }
    };
    let mut params = params;
    let mut state = AdamState::new(&params);
    let opt = AdamW::with_lr(1e-3);

    const CODEC_BATCH: usize = 4;
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        // Fisher-Yates with the epoch-stable rng
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(CODEC_BATCH) {
            let mut g = Graph::new();
            let ids = codec.insert_params(&mut g, &params, true);
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let img = g.constant(images[idx].clone());
                let z = codec.encode_graph(&mut g, &ids, img)?;
                let rec = codec.decode_graph(&mut g, &ids, z)?;
                losses.push(g.mse(rec, img)?);
            }
            let mut acc = losses[0];
            for &l in &losses[1..] {
                acc = g.add(acc, l)?;
            }
            let loss = g.mul_scalar(acc, 1.0 / chunk.len() as f64);
            g.backward(loss)?;
            let grads: Vec<(String, Tensor<f32>)> = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    let grad = g
                        .grad(id)
                        .unwrap_or_else(|| Tensor::zeros(params.tensor(i).shape().to_vec()));
                    (params.name(i).to_string(), grad)
                })
                .collect();
            adamw_step(&opt, &mut state, &mut params, &grads)?;
        }
    }
    codec.params = Some(params);
    Ok(())
}

/// Root-mean-square reconstruction error of `codec` over `images`.
pub fn reconstruction_rmse(codec: &dyn LatentCodec, images: &[Tensor<f32>]) -> Result<f64> {
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for img in images {
        let rec = codec.decode(&codec.encode(img)?)?;
        for (a, b) in rec.data().iter().zip(img.data()) {
            let d = (*a - *b) as f64;
            sum_sq += d * d;
        }
        n += img.numel();
    }
    Ok((sum_sq / n as f64).sqrt())
}

/// Single scalar latent scale: the standard deviation of codec outputs over
/// the dataset (capped at 1024 images), used to normalize latents so the
/// diffusion prior N(0, I) matches their spread.
pub fn estimate_latent_scale(codec: &dyn LatentCodec, images: &[Tensor<f32>]) -> Result<f32> {
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut n = 0usize;
    for img in images.iter().take(1024) {
        let z = codec.encode(img)?;
        for &v in z.data() {
            sum += v as f64;
            sum_sq += (v as f64) * (v as f64);
        }
        n += z.numel();
    }
    if n == 0 {
        return Err(Error::InvalidParameter("latent scale needs images".into()));
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    let std = var.sqrt();
    if !(std.is_finite() && std > 1e-6) {
        return Err(Error::InvalidParameter(format!(
            "degenerate latent scale {std}"
        )));
    }
    Ok(std as f32)
}

/// Serializable codec identity: which codec a run uses, and its geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecSpec {
    Identity,
    SpaceToDepth { factor: usize },
    TinyAe { factor: usize, channels: usize },
}

impl CodecSpec {
    /// Parses `identity`, `s2d:<f>`, or `tiny_ae:<f>x<c>`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown codec '{s}' (identity | s2d:<f> | tiny_ae:<f>x<c>)"));
        if s == "identity" {
            return Ok(CodecSpec::Identity);
        }
        if let Some(rest) = s.strip_prefix("s2d:") {
            let factor = rest.parse().map_err(|_| bad())?;
            return Ok(CodecSpec::SpaceToDepth { factor });
        }
        if let Some(rest) = s.strip_prefix("tiny_ae:") {
            let (f, c) = rest.split_once('x').ok_or_else(bad)?;
            return Ok(CodecSpec::TinyAe {
                factor: f.parse().map_err(|_| bad())?,
                channels: c.parse().map_err(|_| bad())?,
            });
        }
        Err(bad())
    }

    /// Latent geometry (side, channels) for a given image side.
    pub fn latent_geometry(&self, image_side: usize) -> Result<(usize, usize)> {
        let (f, c) = match *self {
            CodecSpec::Identity => (1, 3),
            CodecSpec::SpaceToDepth { factor } => (factor, 3 * factor * factor),
            CodecSpec::TinyAe { factor, channels } => (factor, channels),
        };
        if f == 0 || image_side % f != 0 {
            return Err(Error::Config(format!(
                "image side {image_side} is not divisible by codec factor {f}"
            )));
        }
        Ok((image_side / f, c))
    }
}

impl std::fmt::Display for CodecSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CodecSpec::Identity => write!(f, "identity"),
            CodecSpec::SpaceToDepth { factor } => write!(f, "s2d:{factor}"),
            CodecSpec::TinyAe { factor, channels } => write!(f, "tiny_ae:{factor}x{channels}"),
        }
    }
}

/// Concrete codec instance behind a [`CodecSpec`].
#[derive(Clone, Debug)]
pub enum Codec {
    Identity(IdentityCodec),
    SpaceToDepth(SpaceToDepthCodec),
    TinyAe(TinyAutoencoder),
}

impl Codec {
    /// Instantiates the codec; a tiny autoencoder comes back untrained.
    pub fn from_spec(spec: CodecSpec) -> Result<Self> {
        Ok(match spec {
            CodecSpec::Identity => Codec::Identity(IdentityCodec),
            CodecSpec::SpaceToDepth { factor } => {
                Codec::SpaceToDepth(SpaceToDepthCodec::new(factor)?)
            }
            CodecSpec::TinyAe { factor, channels } => {
                Codec::TinyAe(TinyAutoencoder::new(factor, channels)?)
            }
        })
    }

    pub fn spec(&self) -> CodecSpec {
        match self {
            Codec::Identity(_) => CodecSpec::Identity,
            Codec::SpaceToDepth(c) => CodecSpec::SpaceToDepth { factor: c.factor() },
            Codec::TinyAe(c) => CodecSpec::TinyAe {
                factor: c.factor(),
                channels: c.latent_channels(),
            },
        }
    }

    /// Trainable parameters, when the codec has any.
    pub fn trained_params(&self) -> Option<&Parameters<f32>> {
        match self {
            Codec::TinyAe(c) => c.params(),
            _ => None,
        }
    }

    /// Installs trained parameters (checkpoint load path).
    pub fn set_trained_params(&mut self, params: Parameters<f32>) -> Result<()> {
        match self {
            Codec::TinyAe(c) => c.set_params(params),
            _ => Err(Error::State("this codec has no trainable parameters".into())),
        }
    }

    fn inner(&self) -> &dyn LatentCodec {
        match self {
            Codec::Identity(c) => c,
            Codec::SpaceToDepth(c) => c,
            Codec::TinyAe(c) => c,
        }
    }
}

impl LatentCodec for Codec {
    fn factor(&self) -> usize {
        self.inner().factor()
    }
    fn latent_channels(&self) -> usize {
        self.inner().latent_channels()
    }
    fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.inner().encode(image)
    }
    fn decode(&self, latent: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.inner().decode(latent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_codec_roundtrip_is_bit_exact() {
        let c = IdentityCodec;
        let img = Tensor::<f32>::randn(vec![16, 16, 3], &mut rng(1));
        let z = c.encode(&img).unwrap();
        assert_eq!(z.shape(), &[16, 16, 3]);
        assert_eq!(c.decode(&z).unwrap().data(), img.data());
    }

    #[test]
    fn identity_codec_is_linear() {
        let c = IdentityCodec;
        let img = Tensor::<f32>::randn(vec![8, 8, 3], &mut rng(2));
        let scaled = c.encode(&img.scale(2.5)).unwrap();
        let expect = c.encode(&img).unwrap().scale(2.5);
        assert_eq!(scaled.data(), expect.data());
    }

    #[test]
    fn space_to_depth_matches_paper_geometry() {
        // f = 8 maps 256 x 256 x 3 to 32 x 32 x 192, losslessly.
        let c = SpaceToDepthCodec::new(8).unwrap();
        let img = Tensor::<f32>::randn(vec![256, 256, 3], &mut rng(3));
        let z = c.encode(&img).unwrap();
        assert_eq!(z.shape(), &[32, 32, 192]);
        assert_eq!(c.latent_channels(), 192);
        let back = c.decode(&z).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn space_to_depth_factor_one_is_identity() {
        let c = SpaceToDepthCodec::new(1).unwrap();
        let img = Tensor::<f32>::randn(vec![5, 7, 3], &mut rng(4));
        let z = c.encode(&img).unwrap();
        assert_eq!(z.data(), img.data());
        assert_eq!(z.shape(), &[5, 7, 3]);
    }

    #[test]
    fn space_to_depth_layout_on_ramp_image() {
        // 4x4x3 ramp: value (y*4 + x)*3 + c. With f = 2 the first output
        // cell packs patch rows (0,0),(0,1),(1,0),(1,1) in order.
        let data: Vec<f32> = (0..48).map(|i| i as f32).collect();
        let img = Tensor::from_vec(vec![4, 4, 3], data).unwrap();
        let z = space_to_depth(&img, 2).unwrap();
        assert_eq!(z.shape(), &[2, 2, 12]);
        let cell0: Vec<f32> = z.data()[0..12].to_vec();
        assert_eq!(
            cell0,
            vec![0., 1., 2., 3., 4., 5., 12., 13., 14., 15., 16., 17.]
        );
        // second cell starts at pixel (0, 2) = value 6
        assert_eq!(z.data()[12], 6.0);
    }

    #[test]
    fn space_to_depth_rejects_indivisible() {
        let c = SpaceToDepthCodec::new(3).unwrap();
        let img = Tensor::<f32>::zeros(vec![8, 8, 3]);
        assert!(matches!(
            c.encode(&img).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn untrained_autoencoder_is_not_fitted() {
        let c = TinyAutoencoder::new(8, 4).unwrap();
        let img = Tensor::<f32>::zeros(vec![64, 64, 3]);
        assert!(matches!(c.encode(&img).unwrap_err(), Error::NotFitted(_)));
        let z = Tensor::<f32>::zeros(vec![8, 8, 4]);
        assert!(matches!(c.decode(&z).unwrap_err(), Error::NotFitted(_)));
    }

    #[test]
    fn autoencoder_latent_shape_contract() {
        let mut c = TinyAutoencoder::new(8, 4).unwrap();
        let img = Tensor::<f32>::randn(vec![64, 64, 3], &mut rng(5));
        train_codec(&mut c, std::slice::from_ref(&img), 1, 0).unwrap();
        let z = c.encode(&img).unwrap();
        assert_eq!(z.shape(), &[8, 8, 4]);
        let back = c.decode(&z).unwrap();
        assert_eq!(back.shape(), &[64, 64, 3]);
    }

    #[test]
    fn codec_training_is_deterministic() {
        let imgs: Vec<Tensor<f32>> = (0..4)
            .map(|i| Tensor::randn(vec![16, 16, 3], &mut rng(10 + i)))
            .collect();
        let mut a = TinyAutoencoder::new(4, 6).unwrap();
        let mut b = TinyAutoencoder::new(4, 6).unwrap();
        train_codec(&mut a, &imgs, 3, 7).unwrap();
        train_codec(&mut b, &imgs, 3, 7).unwrap();
        for i in 0..a.params().unwrap().len() {
            assert_eq!(
                a.params().unwrap().tensor(i).data(),
                b.params().unwrap().tensor(i).data()
            );
        }
    }

    #[test]
    fn codec_spec_parse_display_roundtrip() {
        for s in ["identity", "s2d:8", "tiny_ae:8x4"] {
            let spec = CodecSpec::parse(s).unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!(CodecSpec::parse("vae").is_err());
        assert_eq!(
            CodecSpec::parse("s2d:8").unwrap().latent_geometry(256).unwrap(),
            (32, 192)
        );
        assert!(CodecSpec::parse("s2d:3").unwrap().latent_geometry(16).is_err());
    }

    #[test]
    fn latent_scale_normalizes_to_unit_variance() {
        let c = IdentityCodec;
        let imgs: Vec<Tensor<f32>> = (0..8)
            .map(|i| Tensor::randn(vec![8, 8, 3], &mut rng(20 + i)).scale(0.37))
            .collect();
        let scale = estimate_latent_scale(&c, &imgs).unwrap();
        assert!((scale - 0.37).abs() < 0.02, "scale {scale}");
        // dividing by the scale leaves roughly unit spread
        let z = c.encode(&imgs[0]).unwrap().scale(1.0 / scale);
        assert!((z.std() - 1.0).abs() < 0.1);
    }
}
