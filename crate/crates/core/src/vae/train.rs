use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsd::{Dsd, N_BINS};
use crate::error::{Error, Result};

use super::{
    accumulate_gradient, adam_step, sample_eps, Activation, AdamConfig, AdamState, Checkpoint,
    LatentPoint, LossParts, VaeModel, Workspace,
};

/// Samples per gradient chunk. Chunk gradients are summed in chunk order, so the
/// result does not depend on how many threads evaluate them.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Latent draws per sample per step.
    pub mc_samples: usize,
    /// Hidden widths of the encoder trunk; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            batch_size: 128,
            n_epochs: 20,
            adam: AdamConfig::default(),
            seed: 0,
            mc_samples: 1,
            hidden: vec![64, 64],
            activation: Activation::Silu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::invalid("beta must be non-negative"));
        }
        if self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::invalid("batch_size and mc_samples must be at least 1"));
        }
        if !(self.adam.learning_rate >= 0.0) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_nelbo: f64,
    pub mean_recon: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: VaeModel,
    pub history: Vec<EpochStats>,
    pub checkpoint: Checkpoint,
}

/// Trains a freshly initialized model on normalized spectra.
///
/// The returned model and optimizer state are rounded to `f32` so that they equal what
/// a checkpoint round trip yields.
pub fn train(dataset: &[Dsd], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = VaeModel::init(&cfg.hidden, cfg.activation, cfg.seed)?;
    train_from(model, dataset, cfg)
}

/// Continues training `model`.
pub fn train_from(mut model: VaeModel, dataset: &[Dsd], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut flat = Vec::with_capacity(dataset.len() * N_BINS);
    for (n, d) in dataset.iter().enumerate() {
        if d.len() != N_BINS {
            return Err(Error::invalid(format!("sample {n} has {} bins", d.len())));
        }
        flat.extend_from_slice(d.as_slice());
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5A3F);
    let mut eps_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE95_0000);
    let mut state = AdamState::new(model.n_params());
    let mut history = Vec::with_capacity(cfg.n_epochs);
    let mut t = 0u64;

    for epoch in 1..=cfg.n_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 3];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let eps: Vec<LatentPoint> = (0..batch.len() * cfg.mc_samples)
                .map(|_| sample_eps(&mut eps_rng))
                .collect();
            let weight = 1.0 / batch.len() as f64;
            let partials = batch
                .par_chunks(CHUNK)
                .enumerate()
                .map(|(c, idx)| {
                    let mut grad = model.zeros_like();
                    let mut ws = Workspace::new(&model);
                    let mut acc = [0.0f64; 3];
                    for (n, &i) in idx.iter().enumerate() {
                        let s = c * CHUNK + n;
                        let e = &eps[s * cfg.mc_samples..(s + 1) * cfg.mc_samples];
                        let x = &flat[i * N_BINS..(i + 1) * N_BINS];
                        let LossParts { loss, recon, kl } =
                            accumulate_gradient(&model, x, e, cfg.beta, weight, &mut grad, &mut ws)?;
                        acc[0] += loss;
                        acc[1] += recon;
                        acc[2] += kl;
                    }
                    Ok((grad, acc))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Numeric { stage, detail } => Error::numeric(
                        stage,
                        format!("{detail} (epoch {epoch}, batch {b})"),
                    ),
                    other => other,
                })?;
            let mut iter = partials.into_iter();
            let (mut grad, mut acc) = iter.next().expect("non-empty batch");
            for (g, a) in iter {
                grad.add_scaled(&g, 1.0);
                for k in 0..3 {
                    acc[k] += a[k];
                }
            }
            if !acc[0].is_finite() {
                return Err(Error::numeric(
                    "train",
                    format!("loss diverged at epoch {epoch}, batch {b}"),
                ));
            }
            for k in 0..3 {
                sums[k] += acc[k];
            }
            t += 1;
            adam_step(&mut model, &grad, &mut state, t, &cfg.adam)?;
        }
        let n = dataset.len() as f64;
        history.push(EpochStats {
            epoch,
            mean_nelbo: sums[0] / n,
            mean_recon: sums[1] / n,
            mean_kl: sums[2] / n,
        });
    }

    let model = model.quantized_f32();
    let checkpoint = Checkpoint {
        model: model.clone(),
        adam: Some(state.quantized_f32()),
        beta: cfg.beta,
        seed: cfg.seed,
    };
    Ok(TrainOutcome {
        model,
        history,
        checkpoint,
    })
}
