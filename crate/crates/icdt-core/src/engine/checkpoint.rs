//! Checkpoint format: a plain-text key=value header (model config, schedule
//! block, codec, optimizer, counters, RNG position, latent scale) followed by
//! a flat ordered list of named tensors as raw little-endian 32-bit floats.
//! EMA weights, optimizer moments, and codec weights live under parallel
//! namespaces (`ema/`, `adam_m/`, `adam_v/`, `codec/`).
//!
//! A byte round-trip restores training exactly: the next step's loss is
//! bit-identical.

use super::{ScheduleSpec, TrainSetup, TrainState};
use crate::codec::{Codec, CodecSpec};
use crate::diffusion::respace;
use crate::error::{Error, Result};
use crate::model::{IcdtModel, ModelConfig, Parameters};
use crate::optim::{AdamState, AdamW};
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "icdt-checkpoint v1";

fn push_tensors(
    out: &mut Vec<(String, Tensor<f32>)>,
    namespace: &str,
    params: &Parameters<f32>,
) {
    for (name, t) in params.iter() {
        out.push((format!("{namespace}/{name}"), t.clone()));
    }
}

/// Serializes the full training state.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    push_tensors(&mut tensors, "param", state.model.params());
    push_tensors(&mut tensors, "ema", &state.ema);
    for (i, m) in state.opt.m.iter().enumerate() {
        tensors.push((format!("adam_m/{}", state.model.params().name(i)), m.clone()));
    }
    for (i, v) in state.opt.v.iter().enumerate() {
        tensors.push((format!("adam_v/{}", state.model.params().name(i)), v.clone()));
    }
    if let Some(cp) = state.codec.trained_params() {
        push_tensors(&mut tensors, "codec", cp);
    }

    let s = &state.setup;
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let m = &s.model;
    header.push_str(&format!("model.layers={}\n", m.layers));
    header.push_str(&format!("model.hidden={}\n", m.hidden));
    header.push_str(&format!("model.heads={}\n", m.heads));
    header.push_str(&format!("model.patch={}\n", m.patch));
    header.push_str(&format!("model.latent_side={}\n", m.latent_side));
    header.push_str(&format!("model.latent_channels={}\n", m.latent_channels));
    header.push_str(&format!("schedule.t_max={}\n", s.schedule.t_max));
    header.push_str(&format!("schedule.beta_start={:?}\n", s.schedule.beta_start));
    header.push_str(&format!("schedule.beta_end={:?}\n", s.schedule.beta_end));
    if s.sample_steps <= s.schedule.t_max {
        let r = respace(&state.schedule, s.sample_steps)?;
        let list: Vec<String> = r.indices.iter().map(|t| t.to_string()).collect();
        header.push_str(&format!("schedule.respace_indices={}\n", list.join(",")));
    }
    header.push_str(&format!("codec={}\n", s.codec));
    let o = &s.optimizer;
    header.push_str(&format!("optim.lr={:?}\n", o.lr));
    header.push_str(&format!("optim.beta1={:?}\n", o.beta1));
    header.push_str(&format!("optim.beta2={:?}\n", o.beta2));
    header.push_str(&format!("optim.eps={:?}\n", o.eps));
    header.push_str(&format!("optim.weight_decay={:?}\n", o.weight_decay));
    header.push_str(&format!("train.batch={}\n", s.batch));
    header.push_str(&format!("train.vlb_weight={:?}\n", s.vlb_weight));
    header.push_str(&format!("train.ema_decay={:?}\n", s.ema_decay));
    header.push_str(&format!("train.sample_steps={}\n", s.sample_steps));
    header.push_str(&format!("train.seed={}\n", s.seed));
    header.push_str(&format!("state.step={}\n", state.step));
    header.push_str(&format!("state.opt_step={}\n", state.opt.step));
    let seed_hex: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    header.push_str(&format!("state.rng_seed={seed_hex}\n"));
    header.push_str(&format!("state.rng_word_pos={}\n", state.rng.get_word_pos()));
    header.push_str(&format!("state.rng_stream={}\n", state.rng.get_stream()));
    header.push_str(&format!("state.latent_scale={:?}\n", state.latent_scale));
    header.push_str(&format!("tensors={}\n\n", tensors.len()));

    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(file, "{name} {}", dims.join("x"))?;
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
    }
    Ok(())
}

struct Header {
    fields: Vec<(String, String)>,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("checkpoint header is missing '{key}'")))
    }

    fn get_opt(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Parse(format!("checkpoint field '{key}' failed to parse")))
    }
}

/// Restores a [`TrainState`] saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));

    // header runs until the first blank line
    let mut pos = 0usize;
    let mut fields = Vec::new();
    let mut first = true;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?
            + pos;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("non-utf8 header"))?;
        pos = end + 1;
        if first {
            if line != MAGIC {
                return Err(bad("not an icdt checkpoint"));
            }
            first = false;
            continue;
        }
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad("malformed header line"))?;
        fields.push((k.to_string(), v.to_string()));
    }
    let header = Header { fields };

    let model_cfg = ModelConfig {
        layers: header.parse("model.layers")?,
        hidden: header.parse("model.hidden")?,
        heads: header.parse("model.heads")?,
        patch: header.parse("model.patch")?,
        latent_side: header.parse("model.latent_side")?,
        latent_channels: header.parse("model.latent_channels")?,
    };
    let schedule = ScheduleSpec {
        t_max: header.parse("schedule.t_max")?,
        beta_start: header.parse("schedule.beta_start")?,
        beta_end: header.parse("schedule.beta_end")?,
    };
    let codec_spec = CodecSpec::parse(header.get("codec")?)?;
    let optimizer = AdamW {
        lr: header.parse("optim.lr")?,
        beta1: header.parse("optim.beta1")?,
        beta2: header.parse("optim.beta2")?,
        eps: header.parse("optim.eps")?,
        weight_decay: header.parse("optim.weight_decay")?,
    };
    let setup = TrainSetup {
        model: model_cfg.clone(),
        schedule,
        codec: codec_spec,
        optimizer,
        batch: header.parse("train.batch")?,
        vlb_weight: header.parse("train.vlb_weight")?,
        ema_decay: header.parse("train.ema_decay")?,
        sample_steps: header.parse("train.sample_steps")?,
        seed: header.parse("train.seed")?,
    };
    let step: u64 = header.parse("state.step")?;
    let opt_step: u64 = header.parse("state.opt_step")?;
    let latent_scale: f32 = header.parse("state.latent_scale")?;

    let seed_hex = header.get("state.rng_seed")?;
    if seed_hex.len() != 64 {
        return Err(bad("rng seed must be 32 hex bytes"));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed_hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).map_err(|_| bad("bad rng seed"))?;
        seed[i] = u8::from_str_radix(s, 16).map_err(|_| bad("bad rng seed"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.parse("state.rng_stream")?);
    rng.set_word_pos(header.parse("state.rng_word_pos")?);

    // integrity check on the recorded respacing, when present
    if let Some(listed) = header.get_opt("schedule.respace_indices") {
        let r = respace(&setup.schedule.build()?, setup.sample_steps)?;
        let expect: Vec<String> = r.indices.iter().map(|t| t.to_string()).collect();
        if listed != expect.join(",") {
            return Err(bad("respacing indices disagree with the schedule"));
        }
    }

    let count: usize = header.parse("tensors")?;
    let mut groups: std::collections::BTreeMap<String, Vec<(String, Tensor<f32>)>> =
        Default::default();
    let mut order: Vec<String> = Vec::new();
    for _ in 0..count {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated tensor record"))?
            + pos;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("bad tensor record"))?;
        pos = end + 1;
        let (name, dims) = line
            .rsplit_once(' ')
            .ok_or_else(|| bad("malformed tensor record"))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("bad tensor shape")))
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let need = numel * 4;
        if bytes.len() < pos + need {
            return Err(bad("truncated tensor data"));
        }
        let data: Vec<f32> = bytes[pos..pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        pos += need;
        let (ns, base) = name
            .split_once('/')
            .ok_or_else(|| bad("tensor name lacks a namespace"))?;
        if !groups.contains_key(ns) {
            order.push(ns.to_string());
        }
        groups
            .entry(ns.to_string())
            .or_default()
            .push((base.to_string(), Tensor::from_vec(shape, data)?));
    }

    let take = |groups: &mut std::collections::BTreeMap<String, Vec<(String, Tensor<f32>)>>,
                ns: &str|
     -> Result<Parameters<f32>> {
        groups
            .remove(ns)
            .map(Parameters::new)
            .ok_or_else(|| bad(&format!("missing tensor namespace '{ns}'")))
    };

    let params = take(&mut groups, "param")?;
    let ema = take(&mut groups, "ema")?;
    let adam_m = take(&mut groups, "adam_m")?;
    let adam_v = take(&mut groups, "adam_v")?;
    let model = IcdtModel::from_parameters(model_cfg, params)?;
    let opt = AdamState {
        m: adam_m.iter().map(|(_, t)| t.clone()).collect(),
        v: adam_v.iter().map(|(_, t)| t.clone()).collect(),
        step: opt_step,
    };

    let mut codec = Codec::from_spec(codec_spec)?;
    if let Some(cp) = groups.remove("codec") {
        codec.set_trained_params(Parameters::new(cp))?;
    }

    TrainState::from_parts(setup, model, opt, ema, codec, latent_scale, step, rng)
}
