//! Training loop and ancestral sampling: optimizer state, EMA shadowing,
//! paired augmentation, deterministic batch scheduling, checkpointing, and
//! the conditional reverse-process sampler with respaced timesteps.
//!
//! Everything is single-threaded and deterministic: (seed, data, config)
//! fully determine the loss trajectory and every sample.

pub mod checkpoint;
pub mod sampler;

pub use sampler::{draw_noise_trajectory, p_sample, sample_loop, NoiseTrajectory, SampleOptions};

use crate::codec::{Codec, CodecSpec, LatentCodec};
use crate::data::PairedDataset;
use crate::diffusion::loss::hybrid_loss;
use crate::diffusion::{linear_beta_schedule, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{IcdtModel, ModelConfig, Parameters};
use crate::optim::{adamw_step, ema_update, AdamState, AdamW};
use crate::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Diffusion schedule identity, serializable into checkpoint headers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_beta_schedule(self.t_max, self.beta_start, self.beta_end)
    }
}

/// Everything that defines a training run besides the data itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub codec: CodecSpec,
    pub optimizer: AdamW,
    pub batch: usize,
    pub vlb_weight: f64,
    pub ema_decay: f64,
    pub sample_steps: usize,
    pub seed: u64,
}

/// Live training state. The RNG stream covers model initialization,
/// augmentation coins, timestep draws, and noise draws, in that order, so a
/// restored checkpoint continues the exact same sequence.
pub struct TrainState {
    pub setup: TrainSetup,
    pub model: IcdtModel<f32>,
    pub opt: AdamState<f32>,
    pub ema: Parameters<f32>,
    pub codec: Codec,
    pub latent_scale: f32,
    pub step: u64,
    pub rng: ChaCha8Rng,
    schedule: NoiseSchedule,
}

impl TrainState {
    /// Fresh state. The codec must already be usable (trained, if it is the
    /// autoencoder); `latent_scale` comes from [`crate::codec::estimate_latent_scale`].
    pub fn new(setup: TrainSetup, codec: Codec, latent_scale: f32) -> Result<Self> {
        if codec.spec() != setup.codec {
            return Err(Error::Config(format!(
                "codec {} does not match the setup's {}",
                codec.spec(),
                setup.codec
            )));
        }
        if setup.model.latent_channels != codec.latent_channels() {
            return Err(Error::Config(format!(
                "model expects {} latent channels but the codec yields {}",
                setup.model.latent_channels,
                codec.latent_channels()
            )));
        }
        if setup.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let schedule = setup.schedule.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
        let model = IcdtModel::new(setup.model.clone(), &mut rng)?;
        let ema = model.params().clone();
        let opt = AdamState::new(model.params());
        Ok(TrainState {
            setup,
            model,
            opt,
            ema,
            codec,
            latent_scale,
            step: 0,
            rng,
            schedule,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub(crate) fn from_parts(
        setup: TrainSetup,
        model: IcdtModel<f32>,
        opt: AdamState<f32>,
        ema: Parameters<f32>,
        codec: Codec,
        latent_scale: f32,
        step: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let schedule = setup.schedule.build()?;
        Ok(TrainState {
            setup,
            model,
            opt,
            ema,
            codec,
            latent_scale,
            step,
            rng,
            schedule,
        })
    }
}

/// Per-step loss summary (batch means, in nats for the bound term).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_simple: f64,
    pub l_vlb: f64,
    pub total: f64,
}

/// Encodes one image pair into training latents, flipping both sides
/// together first when `flip` is set. Keeping the flip paired is what stops
/// left/right information leaking between the conditional and the target.
pub fn assemble_example(
    degraded: &Tensor<f32>,
    reference: &Tensor<f32>,
    flip: bool,
    codec: &dyn LatentCodec,
    latent_scale: f32,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (deg, refr) = if flip {
        (degraded.hflip()?, reference.hflip()?)
    } else {
        (degraded.clone(), reference.clone())
    };
    let inv = 1.0 / latent_scale;
    let zcond = codec.encode(&deg)?.scale(inv);
    let z0 = codec.encode(&refr)?.scale(inv);
    Ok((z0, zcond))
}

/// One optimization step over a batch of (degraded, reference) image pairs
/// in [-1, 1]. Encodes, augments, noises, runs the denoiser, applies the
/// hybrid objective, and updates parameters plus the EMA shadow.
pub fn training_step(
    state: &mut TrainState,
    batch: &[(Tensor<f32>, Tensor<f32>)],
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Config("training batch is empty".into()));
    }
    let t_max = state.schedule.t_max();
    let mut g = Graph::<f32>::new();
    let ids = state.model.insert_weights(&mut g, None, true);

    let mut total_nodes = Vec::with_capacity(batch.len());
    let mut simple_sum = 0.0;
    let mut vlb_sum = 0.0;
    for (degraded, reference) in batch {
        if degraded.shape() != reference.shape() {
            return Err(Error::shape("training pair", degraded.shape(), reference.shape()));
        }
        let flip = state.rng.random_bool(0.5);
        let (z0_t, zcond_t) =
            assemble_example(degraded, reference, flip, &state.codec, state.latent_scale)?;
        let t = state.rng.random_range(1..=t_max);
        let eps_t = Tensor::<f32>::randn(z0_t.shape().to_vec(), &mut state.rng);

        let z0 = g.constant(z0_t);
        let zcond = g.constant(zcond_t);
        let eps = g.constant(eps_t);
        let zt = q_sample(&mut g, z0, t, eps, &state.schedule)?;
        let (eps_pred, v) = state.model.forward_graph(&mut g, &ids, zt, zcond, t)?;
        let parts = hybrid_loss(
            &mut g,
            eps,
            eps_pred,
            v,
            z0,
            zt,
            t,
            &state.schedule,
            state.setup.vlb_weight,
        )?;
        simple_sum += g.value(parts.simple).item() as f64;
        vlb_sum += g.value(parts.vlb).item() as f64;
        total_nodes.push(parts.total);
    }

    let mut acc = total_nodes[0];
    for &n in &total_nodes[1..] {
        acc = g.add(acc, n)?;
    }
    let loss = g.mul_scalar(acc, 1.0 / batch.len() as f64);
    g.backward(loss)?;

    let grads: Vec<(String, Tensor<f32>)> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let grad = g.grad(id).unwrap_or_else(|| {
                Tensor::zeros(state.model.params().tensor(i).shape().to_vec())
            });
            (state.model.params().name(i).to_string(), grad)
        })
        .collect();
    let total = g.value(loss).item() as f64;
    drop(g);

    adamw_step(
        &state.setup.optimizer,
        &mut state.opt,
        state.model.params_mut(),
        &grads,
    )?;
    ema_update(&mut state.ema, state.model.params(), state.setup.ema_decay)?;
    state.step += 1;

    let n = batch.len() as f64;
    Ok(LossReport {
        step: state.step,
        l_simple: simple_sum / n,
        l_vlb: vlb_sum / n,
        total,
    })
}

/// Shuffled index order for one epoch, derived from (seed, epoch) alone so a
/// resumed run reproduces the remainder of its epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Drives [`training_step`] for `iterations` total steps, shuffling the
/// dataset each epoch and dropping the last partial batch. `on_step` fires
/// after every step (logging, checkpoints, evaluation probes).
pub fn run_training(
    state: &mut TrainState,
    dataset: &PairedDataset,
    iterations: u64,
    mut on_step: impl FnMut(&mut TrainState, &LossReport) -> Result<()>,
) -> Result<()> {
    let batch = state.setup.batch;
    let per_epoch = dataset.len() / batch;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "dataset of {} pairs cannot fill a batch of {batch}",
            dataset.len()
        )));
    }
    while state.step < iterations {
        let epoch = state.step / per_epoch as u64;
        let pos = (state.step % per_epoch as u64) as usize;
        let order = epoch_permutation(dataset.len(), state.setup.seed, epoch);
        let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = order[pos * batch..(pos + 1) * batch]
            .iter()
            .map(|&i| {
                let (d, r) = dataset.pair(i);
                (d.clone(), r.clone())
            })
            .collect();
        let report = training_step(state, &pairs)?;
        on_step(state, &report)?;
    }
    Ok(())
}

/// Appends loss rows to a plain-text CSV: `step,l_simple,l_vlb,total,wall_ms`.
pub struct LossLog {
    file: std::fs::File,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "step,l_simple,l_vlb,total,wall_ms")?;
        Ok(LossLog { file })
    }

    pub fn append(&mut self, report: &LossReport, wall_ms: f64) -> Result<()> {
        writeln!(
            self.file,
            "{},{:.8},{:.8},{:.8},{:.3}",
            report.step, report.l_simple, report.l_vlb, report.total, wall_ms
        )?;
        Ok(())
    }
}

/// Total training compute in FLOPs: forward cost times batch size times
/// iterations, tripled to account for the backward pass.
pub fn training_compute_flops(model_flops: u64, batch: usize, iterations: u64) -> f64 {
    model_flops as f64 * batch as f64 * iterations as f64 * 3.0
}

#[cfg(test)]
mod tests;
