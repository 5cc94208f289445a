//! Noise schedule and deterministic DDIM stepping in both directions,
//! plus classifier-free guidance combination.
//!
//! Both step directions share one closed form built on the denoised-latent
//! predictor, so a denoise step is the exact analytic inverse of an
//! inversion step under a fixed noise estimate.

use crate::error::{Error, Result};
use crate::numerics::Tensor3;

/// Cumulative noise-scaling sequence, indexed by training timestep
/// `t = 0..=t_train` with value 1 at `t = 0` and strictly decreasing.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_train(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Cumulative alpha at training timestep `t` (`t <= t_train`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// Builds a schedule from a linear beta ramp over the training grid:
/// `alpha_bar[t] = prod_{s<=t} (1 - beta_s)` with `alpha_bar[0] = 1`.
pub fn make_schedule(t_train: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_train < 1 {
        return Err(Error::Config("schedule needs t_train >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "invalid beta range [{beta_start}, {beta_end}]: need 0 < start <= end < 1"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(t_train + 1);
    alpha_bar.push(1.0f64);
    let mut acc = 1.0f64;
    for s in 0..t_train {
        let beta = if t_train == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * s as f64 / (t_train - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { alpha_bar })
}

/// Strictly increasing subsequence of the training grid used for
/// inference: `t_infer + 1` indices starting at 0 and ending at `t_train`,
/// evenly spaced as `floor(i * t_train / t_infer)`.
#[derive(Debug, Clone)]
pub struct StepGrid {
    indices: Vec<usize>,
}

impl StepGrid {
    pub fn new(t_train: usize, t_infer: usize) -> Result<StepGrid> {
        if t_infer < 1 {
            return Err(Error::Config("step grid needs at least one step".into()));
        }
        if t_infer > t_train {
            return Err(Error::Config(format!(
                "{t_infer} inference steps exceed the {t_train}-step training grid"
            )));
        }
        let indices: Vec<usize> = (0..=t_infer).map(|i| i * t_train / t_infer).collect();
        Ok(StepGrid { indices })
    }

    /// Number of inference steps (grid has `steps() + 1` indices).
    pub fn steps(&self) -> usize {
        self.indices.len() - 1
    }

    /// Training timestep at grid position `pos`.
    pub fn index(&self, pos: usize) -> usize {
        self.indices[pos]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

fn check_alpha(abar: f64, what: &str) -> Result<()> {
    if !(abar > 0.0 && abar <= 1.0) {
        return Err(Error::Domain(format!(
            "{what} = {abar} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Closed-form estimate of the fully denoised latent from the current
/// latent and the predicted noise:
/// `(z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`.
pub fn predict_z0(z_t: &Tensor3, eps: &Tensor3, abar_t: f64) -> Result<Tensor3> {
    check_alpha(abar_t, "abar_t")?;
    let root = abar_t.sqrt();
    let noise = (1.0 - abar_t).sqrt();
    z_t.zip_with(eps, |z, e| (z - noise * e) / root)
}

fn ddim_step(z_t: &Tensor3, eps: &Tensor3, abar_from: f64, abar_to: f64) -> Result<Tensor3> {
    check_alpha(abar_from, "abar (current)")?;
    check_alpha(abar_to, "abar (destination)")?;
    let root_from = abar_from.sqrt();
    let noise_from = (1.0 - abar_from).sqrt();
    let root_to = abar_to.sqrt();
    let noise_to = (1.0 - abar_to).sqrt();
    z_t.zip_with(eps, |z, e| {
        let z0 = (z - noise_from * e) / root_from;
        root_to * z0 + noise_to * e
    })
}

/// Deterministic inversion step toward higher noise:
/// `z_{t+1} = sqrt(abar_next) * predict_z0(z_t, eps, abar_t) + sqrt(1 - abar_next) * eps`.
pub fn ddim_invert_step(
    z_t: &Tensor3,
    eps: &Tensor3,
    abar_t: f64,
    abar_next: f64,
) -> Result<Tensor3> {
    ddim_step(z_t, eps, abar_t, abar_next)
}

/// Deterministic denoising step toward lower noise; same closed form with
/// the earlier grid point as destination.
pub fn ddim_denoise_step(
    z_t: &Tensor3,
    eps: &Tensor3,
    abar_t: f64,
    abar_prev: f64,
) -> Result<Tensor3> {
    ddim_step(z_t, eps, abar_t, abar_prev)
}

/// Classifier-free guidance:
/// `eps_uncond + omega * (eps_cond - eps_uncond)`.
///
/// The endpoints collapse exactly: `omega = 1` returns the conditional
/// prediction bit-for-bit and `omega = 0` the unconditional one.
pub fn cfg_combine(eps_cond: &Tensor3, eps_uncond: &Tensor3, omega: f64) -> Result<Tensor3> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::Shape(format!(
            "guidance shapes {:?} and {:?} differ",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    if omega == 1.0 {
        return Ok(eps_cond.clone());
    }
    if omega == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_uncond.zip_with(eps_cond, |u, c| u + omega * (c - u))
}
