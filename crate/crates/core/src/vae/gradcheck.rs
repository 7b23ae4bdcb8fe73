use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsd::N_BINS;
use crate::error::Result;

use super::{backward, nelbo, sample_eps, LatentPoint, LossParts, VaeModel};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub n_probes: usize,
    pub max_rel_error: f64,
    /// Flat parameter index with the largest error.
    pub worst_param: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Gradients smaller than this in both routes are compared absolutely.
const ABS_FLOOR: f64 = 1e-5;

/// How probe losses are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSettings {
    /// Fixed KL weight, or `None` to draw one per probe from `[0.1, 1)`.
    pub beta: Option<f64>,
    /// Draw latent noise; when false every probe uses `eps = 0`.
    pub latent_noise: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            beta: None,
            latent_noise: true,
        }
    }
}

/// Checks [`backward`] against central differences at `n_probes` random parameters,
/// each on a fresh random spectrum and latent draw.
pub fn grad_check(
    model: &VaeModel,
    n_probes: usize,
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check_with(
        model,
        n_probes,
        h,
        tolerance,
        seed,
        ProbeSettings::default(),
        backward,
    )
}

/// [`grad_check`] with a caller-supplied analytic gradient.
pub fn grad_check_with<F>(
    model: &VaeModel,
    n_probes: usize,
    h: f64,
    tolerance: f64,
    seed: u64,
    settings: ProbeSettings,
    analytic: F,
) -> Result<GradCheckReport>
where
    F: Fn(&VaeModel, &[f64], &[LatentPoint], f64) -> Result<(LossParts, VaeModel)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_params = model.n_params();
    let mut worst = (0.0f64, 0usize);
    for _ in 0..n_probes.max(1) {
        let raw: Vec<f64> = (0..N_BINS).map(|_| rng.gen::<f64>() + 0.05).collect();
        let total: f64 = raw.iter().sum();
        let x: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let drawn = sample_eps(&mut rng);
        let eps = [if settings.latent_noise { drawn } else { [0.0; 3] }];
        let drawn_beta = rng.gen_range(0.1..1.0);
        let beta = settings.beta.unwrap_or(drawn_beta);
        let idx = rng.gen_range(0..n_params);

        let (_, grad) = analytic(model, &x, &eps, beta)?;
        let a = grad.param(idx);
        let mut probe = model.clone();
        let p0 = probe.param(idx);
        *probe.param_mut(idx) = p0 + h;
        let up = nelbo(&probe, &x, &eps, beta)?;
        *probe.param_mut(idx) = p0 - h;
        let down = nelbo(&probe, &x, &eps, beta)?;
        // differencing each term separately keeps large constant parts from cancelling
        let numeric = ((up.recon - down.recon) + beta * (up.kl - down.kl)) / (2.0 * h);

        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
        if err > worst.0 || worst.0.is_nan() {
            worst = (err, idx);
        }
    }
    Ok(GradCheckReport {
        n_probes: n_probes.max(1),
        max_rel_error: worst.0,
        worst_param: worst.1,
        tolerance,
        passed: worst.0 < tolerance,
    })
}
