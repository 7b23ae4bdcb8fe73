//! Gaussian VAE with a 3-D latent space, trained from scratch.
//!
//! The encoder trunk feeds two affine heads producing the posterior mean and
//! log-variance; the decoder maps a latent point back to a 33-bin spectrum. The loss is
//! `0.5 * ||x - decode(z)||^2 + beta * KL(q || N(0, I))` with `z = mu + exp(logvar / 2) * eps`.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, ProbeSettings};
pub use mlp::{mlp_forward, Activation, Layer, Mlp};
pub use train::{train, train_from, EpochStats, TrainConfig, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsd::N_BINS;
use crate::error::{Error, Result};
use mlp::MlpTrace;

pub const LATENT_DIM: usize = 3;

/// A point in latent space.
pub type LatentPoint = [f64; LATENT_DIM];

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub trunk: Mlp,
    /// Posterior mean head.
    pub head_mean: Layer,
    /// Posterior log-variance head.
    pub head_logvar: Layer,
    pub decoder: Mlp,
}

impl VaeModel {
    /// Assembles a model, checking the `n_bins -> 3 -> n_bins` structure.
    pub fn from_parts(trunk: Mlp, head_mean: Layer, head_logvar: Layer, decoder: Mlp) -> Result<Self> {
        let hidden = trunk.output_dim();
        if trunk.input_dim() != N_BINS || decoder.output_dim() != N_BINS {
            return Err(Error::invalid(format!(
                "encoder input {} and decoder output {} must both be {N_BINS}",
                trunk.input_dim(),
                decoder.output_dim()
            )));
        }
        for (name, head) in [("mean", &head_mean), ("logvar", &head_logvar)] {
            if head.rows != LATENT_DIM || head.cols != hidden {
                return Err(Error::invalid(format!(
                    "{name} head is {}x{}, expected {LATENT_DIM}x{hidden}",
                    head.rows, head.cols
                )));
            }
            if head.activation != Activation::Identity {
                return Err(Error::invalid(format!("{name} head must be affine")));
            }
        }
        if decoder.input_dim() != LATENT_DIM {
            return Err(Error::invalid(format!(
                "decoder input {} must be {LATENT_DIM}",
                decoder.input_dim()
            )));
        }
        Ok(Self {
            trunk,
            head_mean,
            head_logvar,
            decoder,
        })
    }

    /// Randomly initialized model with the given hidden widths on both sides
    /// (encoder `33 -> hidden... -> 3`, decoder `3 -> reversed(hidden)... -> 33`).
    pub fn init(hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be non-empty and positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |rows: usize, cols: usize, act: Activation, gain: f64| {
            let scale = gain / (cols as f64).sqrt();
            let weights = (0..rows * cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Layer::new(rows, cols, weights, vec![0.0; rows], act).expect("finite init")
        };
        let mut trunk = Vec::new();
        let mut prev = N_BINS;
        for &h in hidden {
            trunk.push(dense(h, prev, activation, 1.0));
            prev = h;
        }
        let head_mean = dense(LATENT_DIM, prev, Activation::Identity, 1.0);
        let head_logvar = dense(LATENT_DIM, prev, Activation::Identity, 0.1);
        let mut decoder = Vec::new();
        let mut prev = LATENT_DIM;
        for &h in hidden.iter().rev() {
            decoder.push(dense(h, prev, activation, 1.0));
            prev = h;
        }
        decoder.push(dense(N_BINS, prev, Activation::Identity, 1.0));
        Self::from_parts(Mlp::new(trunk)?, head_mean, head_logvar, Mlp::new(decoder)?)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.zeros_like(),
            head_mean: Layer::zeros(self.head_mean.rows, self.head_mean.cols, Activation::Identity),
            head_logvar: Layer::zeros(
                self.head_logvar.rows,
                self.head_logvar.cols,
                Activation::Identity,
            ),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// All layers in storage order: trunk, mean head, log-variance head, decoder.
    pub fn layers(&self) -> Vec<&Layer> {
        let mut out: Vec<&Layer> = self.trunk.layers.iter().collect();
        out.push(&self.head_mean);
        out.push(&self.head_logvar);
        out.extend(self.decoder.layers.iter());
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut out: Vec<&mut Layer> = self.trunk.layers.iter_mut().collect();
        out.push(&mut self.head_mean);
        out.push(&mut self.head_logvar);
        out.extend(self.decoder.layers.iter_mut());
        out
    }

    /// Parameter tensors in storage order (each layer's weights, then its biases).
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .into_iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|l| l.n_params()).sum()
    }

    /// Parameter at flat index `idx` (storage order).
    pub fn param(&self, idx: usize) -> f64 {
        let mut idx = idx;
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let mut idx = idx;
        for t in self.tensors_mut() {
            if idx < t.len() {
                return &mut t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += scale * other`, element-wise over congruent models.
    pub(crate) fn add_scaled(&mut self, other: &VaeModel, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    /// Rounds every parameter to `f32`, the precision checkpoints store.
    pub fn quantized_f32(&self) -> Self {
        let mut m = self.clone();
        for t in m.tensors_mut() {
            for v in t {
                *v = *v as f32 as f64;
            }
        }
        m
    }

    /// Flips the sign of the latent axes where `flip[d]` is set.
    ///
    /// The prior, the KL term and the reconstruction are all invariant under this map, so
    /// the loss of every sample is unchanged; only the orientation of the latent space moves.
    pub fn with_flipped_axes(&self, flip: [bool; LATENT_DIM]) -> Self {
        self.with_orientation(&AxisOrientation { perm: [0, 1, 2], flip })
    }

    /// Relabels latent axes; an exact symmetry of the model and loss.
    pub fn with_orientation(&self, o: &AxisOrientation) -> Self {
        let mut m = self.clone();
        let cols = self.head_mean.cols;
        let first_old = &self.decoder.layers[0];
        let first = &mut m.decoder.layers[0];
        for a in 0..LATENT_DIM {
            let src = o.perm[a];
            let sign = if o.flip[a] { -1.0 } else { 1.0 };
            for c in 0..cols {
                m.head_mean.weights[a * cols + c] = sign * self.head_mean.weights[src * cols + c];
                m.head_logvar.weights[a * cols + c] = self.head_logvar.weights[src * cols + c];
            }
            m.head_mean.bias[a] = sign * self.head_mean.bias[src];
            m.head_logvar.bias[a] = self.head_logvar.bias[src];
            for r in 0..first.rows {
                first.weights[r * first.cols + a] = sign * first_old.weights[r * first_old.cols + src];
            }
        }
        m
    }
}

/// Signed permutation of latent axes: new axis `a` is `±old[perm[a]]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisOrientation {
    pub perm: [usize; LATENT_DIM],
    pub flip: [bool; LATENT_DIM],
}

impl Default for AxisOrientation {
    fn default() -> Self {
        Self { perm: [0, 1, 2], flip: [false; LATENT_DIM] }
    }
}

impl AxisOrientation {
    pub fn new(perm: [usize; LATENT_DIM], flip: [bool; LATENT_DIM]) -> Result<Self> {
        let mut seen = [false; LATENT_DIM];
        for &p in &perm {
            if p >= LATENT_DIM || seen[p] {
                return Err(Error::invalid(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        Ok(Self { perm, flip })
    }

    /// All 48 signed permutations, identity first.
    pub fn all() -> Vec<Self> {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut out = Vec::with_capacity(48);
        for perm in PERMS {
            for bits in 0..8u8 {
                out.push(Self { perm, flip: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0] });
            }
        }
        out
    }

    pub fn apply(&self, z: &LatentPoint) -> LatentPoint {
        std::array::from_fn(|a| if self.flip[a] { -z[self.perm[a]] } else { z[self.perm[a]] })
    }

    pub fn apply_f32(&self, z: &[f32; LATENT_DIM]) -> [f32; LATENT_DIM] {
        std::array::from_fn(|a| if self.flip[a] { -z[self.perm[a]] } else { z[self.perm[a]] })
    }

    /// One line per new axis: `axis source sign`, 1-based.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# axis source sign\n");
        for a in 0..LATENT_DIM {
            let sign = if self.flip[a] { '-' } else { '+' };
            out.push_str(&format!("{} {} {sign}\n", a + 1, self.perm[a] + 1));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut perm = [usize::MAX; LATENT_DIM];
        let mut flip = [false; LATENT_DIM];
        let mut n = 0;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::InvalidData(format!("orientation line {}: {line:?}", ln + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let a: usize = f[0].parse().map_err(|_| bad())?;
            let src: usize = f[1].parse().map_err(|_| bad())?;
            if a == 0 || a > LATENT_DIM || src == 0 || src > LATENT_DIM || perm[a - 1] != usize::MAX {
                return Err(bad());
            }
            perm[a - 1] = src - 1;
            flip[a - 1] = match f[2] {
                "+" => false,
                "-" => true,
                _ => return Err(bad()),
            };
            n += 1;
        }
        if n != LATENT_DIM {
            return Err(Error::InvalidData(format!("orientation has {n} axes, expected {LATENT_DIM}")));
        }
        Self::new(perm, flip).map_err(|e| Error::InvalidData(e.to_string()))
    }
}

fn check_input(x: &[f64]) -> Result<()> {
    if x.len() != N_BINS {
        return Err(Error::invalid(format!("input has {} bins, expected {N_BINS}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite input spectrum".into()));
    }
    Ok(())
}

/// Posterior mean and log-variance for a normalized spectrum.
pub fn encode(model: &VaeModel, x: &[f64]) -> Result<(LatentPoint, LatentPoint)> {
    check_input(x)?;
    let h = mlp_forward(&model.trunk, x)?;
    let mu = model.head_mean.forward(&h);
    let lv = model.head_logvar.forward(&h);
    let (mu, lv): (LatentPoint, LatentPoint) = (to_point(&mu), to_point(&lv));
    if mu.iter().chain(&lv).any(|v| !v.is_finite()) {
        return Err(Error::numeric("encode", "non-finite posterior parameters"));
    }
    Ok((mu, lv))
}

pub fn decode(model: &VaeModel, z: &LatentPoint) -> Result<Vec<f64>> {
    mlp_forward(&model.decoder, z)
}

fn to_point(v: &[f64]) -> LatentPoint {
    [v[0], v[1], v[2]]
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: &LatentPoint, logvar: &LatentPoint, eps: &LatentPoint) -> LatentPoint {
    std::array::from_fn(|d| mu[d] + (0.5 * logvar[d]).exp() * eps[d])
}

/// KL divergence of `N(mu, diag(exp(logvar)))` from the standard normal.
pub fn kl_gauss(mu: &LatentPoint, logvar: &LatentPoint) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp_m1() - lv)
        .sum::<f64>()
}

/// Loss of one sample with its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// NELBO of `x` averaged over the supplied `eps` draws (one draw per Monte Carlo sample).
pub fn nelbo(model: &VaeModel, x: &[f64], eps: &[LatentPoint], beta: f64) -> Result<LossParts> {
    if eps.is_empty() {
        return Err(Error::invalid("at least one eps draw is required"));
    }
    let (mu, lv) = encode(model, x)?;
    let mut recon = 0.0;
    for e in eps {
        let z = reparameterize(&mu, &lv, e);
        let xhat = decode(model, &z)?;
        recon += 0.5 * x.iter().zip(&xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    recon /= eps.len() as f64;
    if !recon.is_finite() {
        return Err(Error::numeric("decode", "non-finite reconstruction loss"));
    }
    let kl = kl_gauss(&mu, &lv);
    if !kl.is_finite() {
        return Err(Error::numeric("kl", "non-finite KL divergence"));
    }
    Ok(LossParts {
        loss: recon + beta * kl,
        recon,
        kl,
    })
}

/// Reusable buffers for per-sample gradient evaluation.
pub(crate) struct Workspace {
    trunk: MlpTrace,
    decoder: MlpTrace,
}

impl Workspace {
    pub(crate) fn new(model: &VaeModel) -> Self {
        Self {
            trunk: model.trunk.new_trace(),
            decoder: model.decoder.new_trace(),
        }
    }
}

/// Accumulates the gradient of one sample's NELBO into `grad`, scaled by `weight`.
pub(crate) fn accumulate_gradient(
    model: &VaeModel,
    x: &[f64],
    eps: &[LatentPoint],
    beta: f64,
    weight: f64,
    grad: &mut VaeModel,
    ws: &mut Workspace,
) -> Result<LossParts> {
    model.trunk.forward_trace(x, &mut ws.trunk);
    let h = ws.trunk.output().to_vec();
    let mut mu = [0.0; LATENT_DIM];
    let mut lv = [0.0; LATENT_DIM];
    let mut scratch = [0.0; LATENT_DIM];
    model.head_mean.forward_into(&h, &mut scratch, &mut mu);
    model.head_logvar.forward_into(&h, &mut scratch, &mut lv);
    if mu.iter().chain(&lv).any(|v| !v.is_finite()) {
        return Err(Error::numeric("encode", "non-finite posterior parameters"));
    }
    let sigma: LatentPoint = std::array::from_fn(|d| (0.5 * lv[d]).exp());

    let n_mc = eps.len() as f64;
    let mut dmu = [0.0; LATENT_DIM];
    let mut dlv = [0.0; LATENT_DIM];
    let mut recon = 0.0;
    let mut dxhat = vec![0.0; x.len()];
    let mut dz = [0.0; LATENT_DIM];
    for e in eps {
        let z: LatentPoint = std::array::from_fn(|d| mu[d] + sigma[d] * e[d]);
        model.decoder.forward_trace(&z, &mut ws.decoder);
        let xhat = ws.decoder.output();
        let mut r = 0.0;
        for ((g, a), b) in dxhat.iter_mut().zip(x).zip(xhat) {
            let diff = b - a;
            r += diff * diff;
            *g = weight * diff / n_mc;
        }
        recon += 0.5 * r;
        model
            .decoder
            .backward_trace(&ws.decoder, &dxhat, &mut grad.decoder, &mut dz);
        for d in 0..LATENT_DIM {
            dmu[d] += dz[d];
            dlv[d] += dz[d] * 0.5 * sigma[d] * e[d];
        }
    }
    recon /= n_mc;
    let kl = kl_gauss(&mu, &lv);
    if !recon.is_finite() || !kl.is_finite() {
        return Err(Error::numeric("loss", "non-finite NELBO"));
    }
    for d in 0..LATENT_DIM {
        dmu[d] += weight * beta * mu[d];
        dlv[d] += weight * beta * 0.5 * lv[d].exp_m1();
    }

    let mut dh = vec![0.0; h.len()];
    let mut dh_lv = vec![0.0; h.len()];
    model
        .head_mean
        .backward_into(&h, &[0.0; LATENT_DIM], &mut dmu, &mut grad.head_mean, Some(&mut dh));
    model.head_logvar.backward_into(
        &h,
        &[0.0; LATENT_DIM],
        &mut dlv,
        &mut grad.head_logvar,
        Some(&mut dh_lv),
    );
    for (a, b) in dh.iter_mut().zip(&dh_lv) {
        *a += b;
    }
    let mut dx = vec![0.0; x.len()];
    model.trunk.backward_trace(&ws.trunk, &dh, &mut grad.trunk, &mut dx);
    Ok(LossParts {
        loss: recon + beta * kl,
        recon,
        kl,
    })
}

/// Exact gradient of [`nelbo`] with respect to every parameter, as a model-shaped structure.
pub fn backward(
    model: &VaeModel,
    x: &[f64],
    eps: &[LatentPoint],
    beta: f64,
) -> Result<(LossParts, VaeModel)> {
    check_input(x)?;
    if eps.is_empty() {
        return Err(Error::invalid("at least one eps draw is required"));
    }
    let mut grad = model.zeros_like();
    let mut ws = Workspace::new(model);
    let parts = accumulate_gradient(model, x, eps, beta, 1.0, &mut grad, &mut ws)?;
    Ok((parts, grad))
}

/// Standard-normal latent noise.
pub fn sample_eps<R: Rng>(rng: &mut R) -> LatentPoint {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}
