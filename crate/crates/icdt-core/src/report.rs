//! Scaling study harness: trains several model configurations under one
//! data/seed regime, probes held-out PSNR along the way, and emits
//! plot-ready CSV series relating quality to model FLOPs and to cumulative
//! training compute.

use crate::codec::{estimate_latent_scale, train_codec, Codec, CodecSpec};
use crate::data::{image_to_levels, tensor_to_image, PairedDataset};
use crate::engine::{
    run_training, sample_loop, training_compute_flops, SampleOptions, ScheduleSpec, TrainSetup,
    TrainState,
};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::ModelConfig;
use crate::optim::AdamW;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Shared regime for every model in the study.
#[derive(Clone, Debug)]
pub struct ScalingRunParams {
    pub schedule: ScheduleSpec,
    pub codec: CodecSpec,
    pub codec_epochs: usize,
    pub optimizer: AdamW,
    pub batch: usize,
    pub vlb_weight: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub iterations: u64,
    pub eval_every: u64,
    pub eval_steps: usize,
    pub holdout: usize,
}

/// One PSNR probe.
#[derive(Clone, Copy, Debug)]
pub struct ScalingPoint {
    pub iteration: u64,
    pub psnr: f64,
    pub compute_flops: f64,
}

/// Quality trajectory of one configuration.
#[derive(Clone, Debug)]
pub struct ScalingSeries {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub points: Vec<ScalingPoint>,
}

impl ScalingSeries {
    pub fn final_psnr(&self) -> f64 {
        self.points.last().map(|p| p.psnr).unwrap_or(f64::NAN)
    }
}

/// Mean held-out PSNR through the full 8-bit emission path.
fn eval_psnr(
    state: &TrainState,
    eval_pairs: &[(Tensor<f32>, Tensor<f32>)],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for (degraded, reference) in eval_pairs {
        let enhanced = sample_loop(
            &state.model,
            Some(&state.ema),
            &state.codec,
            state.schedule(),
            state.latent_scale,
            degraded,
            SampleOptions::new(steps),
            rng,
        )?;
        let enhanced = image_to_levels(&tensor_to_image(&enhanced)?);
        let reference = image_to_levels(&tensor_to_image(reference)?);
        total += psnr(&enhanced, &reference, 255.0)?;
    }
    Ok(total / eval_pairs.len() as f64)
}

/// Trains each named configuration and collects its PSNR trajectory. When
/// `out_dir` is given, writes `psnr_vs_iterations.csv`, `psnr_vs_flops.csv`,
/// and `psnr_vs_compute.csv` there.
pub fn scaling_report(
    specs: &[(String, ModelConfig)],
    dataset: &PairedDataset,
    params: &ScalingRunParams,
    out_dir: Option<&Path>,
) -> Result<Vec<ScalingSeries>> {
    if specs.is_empty() {
        return Err(Error::InvalidParameter(
            "scaling report needs at least one model configuration".into(),
        ));
    }
    if params.holdout == 0 || params.holdout >= dataset.len() {
        return Err(Error::InvalidParameter(format!(
            "holdout {} must leave both train and eval items in a dataset of {}",
            params.holdout,
            dataset.len()
        )));
    }
    let split = dataset.len() - params.holdout;
    let train = dataset.subset(0..split)?;
    let eval_pairs: Vec<(Tensor<f32>, Tensor<f32>)> = (split..dataset.len())
        .map(|i| {
            let (d, r) = dataset.pair(i);
            (d.clone(), r.clone())
        })
        .collect();

    let mut series = Vec::with_capacity(specs.len());
    for (model_idx, (name, cfg)) in specs.iter().enumerate() {
        let mut codec = Codec::from_spec(params.codec)?;
        if let Codec::TinyAe(ae) = &mut codec {
            train_codec(ae, train.references(), params.codec_epochs, params.seed)?;
        }
        let latent_scale = estimate_latent_scale(&codec, train.references())?;
        let setup = TrainSetup {
            model: cfg.clone(),
            schedule: params.schedule,
            codec: params.codec,
            optimizer: params.optimizer,
            batch: params.batch,
            vlb_weight: params.vlb_weight,
            ema_decay: params.ema_decay,
            sample_steps: params.eval_steps,
            seed: params.seed,
        };
        let flops = cfg.estimate_flops();
        let mut state = TrainState::new(setup, codec, latent_scale)?;
        let mut points = Vec::new();
        let eval_every = params.eval_every.max(1);
        let iterations = params.iterations;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(params.seed);
        let eval_steps = params.eval_steps;
        run_training(&mut state, &train, iterations, |state, report| {
            if report.step % eval_every == 0 || report.step == iterations {
                eval_rng.set_stream(((model_idx as u64) << 32) | report.step);
                let psnr = eval_psnr(state, &eval_pairs, eval_steps, &mut eval_rng)?;
                points.push(ScalingPoint {
                    iteration: report.step,
                    psnr,
                    compute_flops: training_compute_flops(flops, state.setup.batch, report.step),
                });
            }
            Ok(())
        })?;
        series.push(ScalingSeries {
            name: name.clone(),
            params: cfg.count_params(),
            flops,
            points,
        });
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("psnr_vs_iterations.csv"))?;
        writeln!(f, "model,iteration,psnr")?;
        for s in &series {
            for p in &s.points {
                writeln!(f, "{},{},{:.6}", s.name, p.iteration, p.psnr)?;
            }
        }
        let mut f = std::fs::File::create(dir.join("psnr_vs_flops.csv"))?;
        writeln!(f, "model,params,flops,final_psnr")?;
        for s in &series {
            writeln!(f, "{},{},{},{:.6}", s.name, s.params, s.flops, s.final_psnr())?;
        }
        let mut f = std::fs::File::create(dir.join("psnr_vs_compute.csv"))?;
        writeln!(f, "model,iteration,compute_flops,psnr")?;
        for s in &series {
            for p in &s.points {
                writeln!(f, "{},{},{:.6e},{:.6}", s.name, p.iteration, p.compute_flops, p.psnr)?;
            }
        }
    }
    Ok(series)
}
