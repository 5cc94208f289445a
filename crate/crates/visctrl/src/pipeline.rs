//! The end-to-end editing loop: DDIM inversion of both branches, guided
//! denoising with reference K/V injection, iterative refinement of the
//! working latent, and pixel-space mask compositing.
//!
//! Per run: encode both images; invert the reference and reconstruct it
//! once with capture hooks to fill the K/V store (cached for all
//! iterations; the reference trajectory never changes); initialize the
//! working latent `Z*` to the encoded target; then for each iteration
//! invert `Z*`, denoise with injection under guidance, and carry the
//! result into the next iteration unchanged. The final latent is decoded
//! and composited over the source so that pixels outside the mask are
//! byte-identical to the input.
//!
//! Inversion runs without guidance, by default under the unconditional
//! (null-prompt) noise estimate; guided inversion at high strength is
//! known to diverge. A config switch selects conditional inversion.
//! Injection applies to both the conditional and unconditional forwards
//! of a guided denoising step.

use std::sync::Arc;

use image::{GrayImage, RgbImage};

use crate::attn_control::{AttnMapRecord, EditGate, HookSet, KVStore};
use crate::denoiser::{
    decode_latent, embed_prompt, encode_image, forward, PromptEmbedding, Weights,
};
use crate::error::{Error, Result};
use crate::imgio::{image_to_tensor, tensor_to_image};
use crate::metrics;
use crate::numerics::Tensor3;
use crate::scheduler::{
    cfg_combine, ddim_denoise_step, ddim_invert_step, NoiseSchedule, StepGrid,
};

/// Which noise estimate drives DDIM inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvertCondition {
    Unconditional,
    Conditional,
}

/// All control knobs of an edit run.
#[derive(Debug, Clone)]
pub struct EditConfig {
    /// Denoising/inversion steps per pass (T).
    pub steps: usize,
    /// Optional higher step count for the first iteration only.
    pub first_steps: Option<usize>,
    /// Refinement iterations (N).
    pub iterations: usize,
    pub gate: EditGate,
    /// Guidance strength.
    pub omega: f64,
    /// Blend coefficient for gradual feature sampling, in [0, 1].
    pub alpha: f64,
    /// Seed for the per-iteration reference sampler.
    pub seed: u64,
    pub invert_condition: InvertCondition,
    /// Re-capture reference features every iteration instead of reusing
    /// the cache (cache-soundness diagnostics).
    pub recompute_kv: bool,
    /// Blend the background latent cells back to the inversion trajectory
    /// after every denoising step (diagnostic; compositing already
    /// protects the background in pixel space).
    pub latent_blend: bool,
    /// Record attention maps on conditional target forwards.
    pub record_attn: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            steps: 5,
            first_steps: None,
            iterations: 5,
            gate: EditGate {
                start_step: 2,
                start_layer: 1,
            },
            omega: 6.0,
            alpha: 1.0,
            seed: 0,
            invert_condition: InvertCondition::Unconditional,
            recompute_kv: false,
            latent_blend: false,
            record_attn: false,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, l_max: usize) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if let Some(f) = self.first_steps {
            if f < 1 {
                return Err(Error::Config("first_steps must be >= 1".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.omega < 0.0 {
            return Err(Error::Config(format!("omega {} is negative", self.omega)));
        }
        if self.gate.start_step > self.steps.max(self.first_steps.unwrap_or(0)) {
            return Err(Error::Config(format!(
                "gate start step {} exceeds step count {}",
                self.gate.start_step, self.steps
            )));
        }
        if self.gate.start_layer > l_max {
            return Err(Error::Config(format!(
                "gate start layer {} exceeds block count {}",
                self.gate.start_layer, l_max
            )));
        }
        Ok(())
    }
}

/// Binary edit mask at pixel resolution plus its block-max pooled latent
/// counterpart (a latent cell is subject if any pixel in its patch is).
#[derive(Debug, Clone)]
pub struct Mask {
    width: usize,
    height: usize,
    patch: usize,
    pixel: Vec<bool>,
    latent: Vec<bool>,
}

impl Mask {
    pub fn from_pixels(width: usize, height: usize, patch: usize, pixel: Vec<bool>) -> Result<Mask> {
        if pixel.len() != width * height {
            return Err(Error::Shape(format!(
                "mask has {} entries for {}x{}",
                pixel.len(),
                width,
                height
            )));
        }
        if patch == 0 || width % patch != 0 || height % patch != 0 {
            return Err(Error::Shape(format!(
                "mask {width}x{height} is not divisible by patch {patch}"
            )));
        }
        let (lw, lh) = (width / patch, height / patch);
        let mut latent = vec![false; lw * lh];
        for row in 0..height {
            for col in 0..width {
                if pixel[row * width + col] {
                    latent[(row / patch) * lw + col / patch] = true;
                }
            }
        }
        Ok(Mask {
            width,
            height,
            patch,
            pixel,
            latent,
        })
    }

    /// Grayscale mask image, thresholded at >= 128.
    pub fn from_gray(img: &GrayImage, patch: usize) -> Result<Mask> {
        let (w, h) = img.dimensions();
        let pixel = img.pixels().map(|p| p.0[0] >= 128).collect();
        Mask::from_pixels(w as usize, h as usize, patch, pixel)
    }

    pub fn full(width: usize, height: usize, patch: usize) -> Result<Mask> {
        Mask::from_pixels(width, height, patch, vec![true; width * height])
    }

    pub fn empty(width: usize, height: usize, patch: usize) -> Result<Mask> {
        Mask::from_pixels(width, height, patch, vec![false; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn pixel_at(&self, row: usize, col: usize) -> bool {
        self.pixel[row * self.width + col]
    }

    pub fn latent_at(&self, row: usize, col: usize) -> bool {
        self.latent[row * (self.width / self.patch) + col]
    }

    pub fn latent_cells(&self) -> &[bool] {
        &self.latent
    }
}

/// Forward-call bookkeeping, split by pass kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub invert: usize,
    pub capture: usize,
    pub denoise_cond: usize,
    pub denoise_uncond: usize,
}

impl EvalCounts {
    pub fn total(&self) -> usize {
        self.invert + self.capture + self.denoise_cond + self.denoise_uncond
    }

    pub fn add(&mut self, other: &EvalCounts) {
        self.invert += other.invert;
        self.capture += other.capture;
        self.denoise_cond += other.denoise_cond;
        self.denoise_uncond += other.denoise_uncond;
    }
}

/// Per-iteration record of the refinement loop.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    /// 1-based iteration number.
    pub iteration: usize,
    /// Latent handed to this iteration's inversion (the working `Z*`).
    pub z_star_in: Tensor3,
    /// Fresh inversion of `z_star_in`.
    pub fresh_inversion: Tensor3,
    /// Initial noise actually denoised (equals `fresh_inversion` unless
    /// gradual sampling blended it with the previous iteration's noise).
    pub z_t_used: Tensor3,
    /// Denoised result; becomes the next iteration's `z_star_in`.
    pub z0: Tensor3,
    /// MSE against the previous iteration's result (against the encoded
    /// target for iteration 1).
    pub latent_mse_prev: f64,
    /// Which reference fed this iteration's injection.
    pub reference_index: usize,
}

/// A reference image prepared for injection: encoded latent, prompt
/// embedding and captured K/V store(s).
#[derive(Debug)]
pub struct PreparedReference {
    pub z0: Tensor3,
    pub cond: PromptEmbedding,
    /// Store captured on the main step grid.
    pub store: Arc<KVStore>,
    /// Store captured on the first-iteration grid when it differs.
    pub store_first: Option<Arc<KVStore>>,
    /// Reference branch reconstruction (diagnostic).
    pub reconstruction: Tensor3,
}

/// Everything a single-target edit produces.
#[derive(Debug)]
pub struct EditOutcome {
    /// Final image: decoded result composited over the source.
    pub edited: RgbImage,
    /// Decoded result before compositing (diagnostic).
    pub decoded: RgbImage,
    pub iterations: Vec<IterationTrace>,
    pub counts: EvalCounts,
    pub attn_records: Vec<AttnMapRecord>,
    /// Latent MSE between edited-region cells of the output and the first
    /// reference (auxiliary subject-fidelity diagnostic).
    pub subject_latent_mse: f64,
}

pub(crate) struct SessionResult {
    pub z0_final: Tensor3,
    pub iterations: Vec<IterationTrace>,
}

/// Blend of a fresh inversion with the previous iteration's initial
/// noise: `alpha * fresh + (1 - alpha) * previous`. The endpoints are
/// bit-exact: 0 keeps the previous noise, 1 takes the fresh inversion.
pub fn blend_initial_noise(alpha: f64, fresh: &Tensor3, previous: &Tensor3) -> Result<Tensor3> {
    if fresh.shape() != previous.shape() {
        return Err(Error::Shape(format!(
            "noise shapes {:?} and {:?} differ",
            fresh.shape(),
            previous.shape()
        )));
    }
    if alpha == 1.0 {
        return Ok(fresh.clone());
    }
    if alpha == 0.0 {
        return Ok(previous.clone());
    }
    fresh.zip_with(previous, |f, p| alpha * f + (1.0 - alpha) * p)
}

/// Stateless runner binding weights, schedule and config.
pub struct Engine<'a> {
    weights: &'a Weights,
    schedule: &'a NoiseSchedule,
    cfg: EditConfig,
}

impl<'a> Engine<'a> {
    pub fn new(weights: &'a Weights, schedule: &'a NoiseSchedule, cfg: EditConfig) -> Result<Engine<'a>> {
        cfg.validate(weights.block_count())?;
        // Grids must be constructible up front.
        StepGrid::new(schedule.t_train(), cfg.steps)?;
        if let Some(f) = cfg.first_steps {
            StepGrid::new(schedule.t_train(), f)?;
        }
        Ok(Engine {
            weights,
            schedule,
            cfg,
        })
    }

    pub fn config(&self) -> &EditConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        self.weights
    }

    pub fn main_grid(&self) -> StepGrid {
        StepGrid::new(self.schedule.t_train(), self.cfg.steps).expect("validated at construction")
    }

    fn first_grid(&self) -> StepGrid {
        let steps = self.cfg.first_steps.unwrap_or(self.cfg.steps);
        StepGrid::new(self.schedule.t_train(), steps).expect("validated at construction")
    }

    fn uncond(&self) -> PromptEmbedding {
        PromptEmbedding::unconditional(self.weights.prompt_dim())
    }

    fn invert_eps_condition<'c>(&self, cond: &'c PromptEmbedding, uncond: &'c PromptEmbedding) -> &'c PromptEmbedding {
        match self.cfg.invert_condition {
            InvertCondition::Unconditional => uncond,
            InvertCondition::Conditional => cond,
        }
    }

    /// Deterministic DDIM inversion over the ascending grid; the noise
    /// estimate is evaluated at the current (lower-noise) latent, without
    /// guidance.
    pub fn invert_latent(
        &self,
        z0: &Tensor3,
        cond: &PromptEmbedding,
        grid: &StepGrid,
        counts: &mut EvalCounts,
    ) -> Result<Tensor3> {
        Ok(self.invert_with_trajectory(z0, cond, grid, counts, false)?.0)
    }

    fn invert_with_trajectory(
        &self,
        z0: &Tensor3,
        cond: &PromptEmbedding,
        grid: &StepGrid,
        counts: &mut EvalCounts,
        record: bool,
    ) -> Result<(Tensor3, Option<Vec<Tensor3>>)> {
        let uncond = self.uncond();
        let eps_cond = self.invert_eps_condition(cond, &uncond);
        let mut hooks = HookSet::off();
        let mut z = z0.clone();
        let mut traj = record.then(|| vec![z0.clone()]);
        for pos in 0..grid.steps() {
            let eps = forward(&z, grid.index(pos), eps_cond, self.weights, &mut hooks)?;
            counts.invert += 1;
            z = ddim_invert_step(
                &z,
                &eps,
                self.schedule.alpha_bar(grid.index(pos)),
                self.schedule.alpha_bar(grid.index(pos + 1)),
            )?;
            if let Some(t) = traj.as_mut() {
                t.push(z.clone());
            }
        }
        Ok((z, traj))
    }

    /// Runs the reference branch once on `grid`: inversion, then a plain
    /// (unguided) reconstruction under the reference condition with
    /// capture hooks. Returns the filled store and the reconstruction.
    pub fn capture_reference(
        &self,
        z0_ref: &Tensor3,
        cond_ref: &PromptEmbedding,
        grid: &StepGrid,
        counts: &mut EvalCounts,
    ) -> Result<(KVStore, Tensor3)> {
        let z_t = self.invert_latent(z0_ref, cond_ref, grid, counts)?;
        let mut hooks = HookSet::capture();
        let mut z = z_t;
        for pos in (1..=grid.steps()).rev() {
            hooks.set_step(pos);
            let eps = forward(&z, grid.index(pos), cond_ref, self.weights, &mut hooks)?;
            counts.capture += 1;
            z = ddim_denoise_step(
                &z,
                &eps,
                self.schedule.alpha_bar(grid.index(pos)),
                self.schedule.alpha_bar(grid.index(pos - 1)),
            )?;
        }
        let store = hooks.into_store().expect("capture hooks own their store");
        Ok((store, z))
    }

    /// Prepares a reference for editing: encode, capture on the main grid
    /// and, when a distinct first-iteration grid is configured, on that
    /// grid too.
    pub fn prepare_reference(
        &self,
        image: &RgbImage,
        prompt: &str,
        counts: &mut EvalCounts,
    ) -> Result<PreparedReference> {
        let z0 = encode_image(&image_to_tensor(image), self.weights)?;
        let cond = embed_prompt(prompt, self.weights.prompt_dim())?;
        let main = self.main_grid();
        let (store, reconstruction) = self.capture_reference(&z0, &cond, &main, counts)?;
        let store_first = match self.cfg.first_steps {
            Some(f) if f != self.cfg.steps => {
                let grid = self.first_grid();
                let (s, _) = self.capture_reference(&z0, &cond, &grid, counts)?;
                Some(Arc::new(s))
            }
            _ => None,
        };
        Ok(PreparedReference {
            z0,
            cond,
            store: Arc::new(store),
            store_first,
            reconstruction,
        })
    }

    /// Descending-grid guided denoising with injection hooks. Per step the
    /// conditional and unconditional noise estimates are combined with the
    /// configured guidance strength; self-attention K/V are substituted
    /// from the store wherever the gate fires.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise_with_injection(
        &self,
        z_t: &Tensor3,
        cond_target: &PromptEmbedding,
        store: &Arc<KVStore>,
        grid: &StepGrid,
        iteration: usize,
        counts: &mut EvalCounts,
        records: &mut Vec<AttnMapRecord>,
        blend: Option<(&[Tensor3], &Mask)>,
    ) -> Result<Tensor3> {
        let mut hooks = HookSet::inject(store.clone(), self.cfg.gate);
        hooks.set_iteration(iteration);
        let z = self.denoise_loop(z_t, cond_target, grid, &mut hooks, counts, blend)?;
        records.extend(hooks.take_records());
        Ok(z)
    }

    /// Guided denoising without any injection (vacuous hooks); the
    /// baseline "plain reconstruction" path.
    pub fn denoise_guided(
        &self,
        z_t: &Tensor3,
        cond: &PromptEmbedding,
        grid: &StepGrid,
        counts: &mut EvalCounts,
    ) -> Result<Tensor3> {
        let mut hooks = HookSet::off();
        self.denoise_loop(z_t, cond, grid, &mut hooks, counts, None)
    }

    fn denoise_loop(
        &self,
        z_t: &Tensor3,
        cond: &PromptEmbedding,
        grid: &StepGrid,
        hooks: &mut HookSet,
        counts: &mut EvalCounts,
        blend: Option<(&[Tensor3], &Mask)>,
    ) -> Result<Tensor3> {
        let uncond = self.uncond();
        let mut z = z_t.clone();
        for pos in (1..=grid.steps()).rev() {
            hooks.set_step(pos);
            hooks.set_recording(self.cfg.record_attn);
            let eps_c = forward(&z, grid.index(pos), cond, self.weights, hooks)?;
            counts.denoise_cond += 1;
            hooks.set_recording(false);
            let eps_u = forward(&z, grid.index(pos), &uncond, self.weights, hooks)?;
            counts.denoise_uncond += 1;
            let eps = cfg_combine(&eps_c, &eps_u, self.cfg.omega)?;
            z = ddim_denoise_step(
                &z,
                &eps,
                self.schedule.alpha_bar(grid.index(pos)),
                self.schedule.alpha_bar(grid.index(pos - 1)),
            )?;
            if let Some((traj, mask)) = blend {
                z = blend_latent_background(&z, &traj[pos - 1], mask)?;
            }
        }
        Ok(z)
    }

    /// The iterative refinement loop shared by single-image editing and
    /// the multi-frame driver. `ref_schedule[n-1]` names the reference
    /// injected at iteration `n`; `fgs_alpha` switches the per-iteration
    /// initial noise from plain inversion to the gradual-sampling blend
    /// (from iteration 2 on).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn edit_session(
        &self,
        z0_target: &Tensor3,
        cond_target: &PromptEmbedding,
        mask: &Mask,
        refs: &[PreparedReference],
        ref_schedule: &[usize],
        fgs_alpha: Option<f64>,
        counts: &mut EvalCounts,
        attn_records: &mut Vec<AttnMapRecord>,
    ) -> Result<SessionResult> {
        debug_assert_eq!(ref_schedule.len(), self.cfg.iterations);
        let main_grid = self.main_grid();
        let first_grid = self.first_grid();
        let mut z_star = z0_target.clone();
        let mut z_t_prev: Option<Tensor3> = None;
        let mut iterations = Vec::with_capacity(self.cfg.iterations);
        for n in 1..=self.cfg.iterations {
            let grid = if n == 1 { &first_grid } else { &main_grid };
            let ref_idx = ref_schedule[n - 1];
            let reference = refs.get(ref_idx).ok_or_else(|| {
                Error::Injection(format!("reference index {ref_idx} out of range"))
            })?;
            let store = if self.cfg.recompute_kv {
                let (fresh, _) = self.capture_reference(&reference.z0, &reference.cond, grid, counts)?;
                Arc::new(fresh)
            } else if n == 1 {
                reference.store_first.clone().unwrap_or_else(|| reference.store.clone())
            } else {
                reference.store.clone()
            };

            let (fresh, traj) = self.invert_with_trajectory(
                &z_star,
                cond_target,
                grid,
                counts,
                self.cfg.latent_blend,
            )?;
            let z_t = match (&fgs_alpha, &z_t_prev) {
                (Some(alpha), Some(prev)) if n >= 2 => blend_initial_noise(*alpha, &fresh, prev)?,
                _ => fresh.clone(),
            };
            let blend = traj.as_ref().map(|t| (t.as_slice(), mask));
            let z0 = self.denoise_with_injection(
                &z_t,
                cond_target,
                &store,
                grid,
                n,
                counts,
                attn_records,
                blend,
            )?;
            let previous = iterations
                .last()
                .map(|t: &IterationTrace| &t.z0)
                .unwrap_or(z0_target);
            let latent_mse_prev = metrics::latent_mse(&z0, previous)?;
            iterations.push(IterationTrace {
                iteration: n,
                z_star_in: z_star.clone(),
                fresh_inversion: fresh,
                z_t_used: z_t.clone(),
                z0: z0.clone(),
                latent_mse_prev,
                reference_index: ref_idx,
            });
            z_star = z0;
            z_t_prev = Some(z_t);
        }
        Ok(SessionResult {
            z0_final: z_star,
            iterations,
        })
    }

    /// Full single-target edit: reference capture, N refinement
    /// iterations with injection, decode and composite.
    pub fn run_visctrl(
        &self,
        reference: &RgbImage,
        ref_prompt: &str,
        target: &RgbImage,
        target_prompt: &str,
        mask: &Mask,
    ) -> Result<EditOutcome> {
        check_geometry(reference, target, mask, self.weights)?;
        let mut counts = EvalCounts::default();
        let mut attn_records = Vec::new();
        let prepared = self.prepare_reference(reference, ref_prompt, &mut counts)?;
        let z0_target = encode_image(&image_to_tensor(target), self.weights)?;
        let cond_target = embed_prompt(target_prompt, self.weights.prompt_dim())?;
        let schedule = vec![0usize; self.cfg.iterations];
        let refs = [prepared];
        let session = self.edit_session(
            &z0_target,
            &cond_target,
            mask,
            &refs,
            &schedule,
            None,
            &mut counts,
            &mut attn_records,
        )?;
        self.finish_edit(session, &refs[0], target, mask, counts, attn_records)
    }

    pub(crate) fn finish_edit(
        &self,
        session: SessionResult,
        reference: &PreparedReference,
        target: &RgbImage,
        mask: &Mask,
        counts: EvalCounts,
        attn_records: Vec<AttnMapRecord>,
    ) -> Result<EditOutcome> {
        let decoded = tensor_to_image(&decode_latent(&session.z0_final, self.weights)?)?;
        let edited = composite(&decoded, target, mask)?;
        let edited_latent = encode_image(&image_to_tensor(&edited), self.weights)?;
        let subject_latent_mse =
            metrics::masked_latent_mse(&edited_latent, &reference.z0, mask.latent_cells())?;
        Ok(EditOutcome {
            edited,
            decoded,
            iterations: session.iterations,
            counts,
            attn_records,
            subject_latent_mse,
        })
    }
}

fn check_geometry(
    reference: &RgbImage,
    target: &RgbImage,
    mask: &Mask,
    weights: &Weights,
) -> Result<()> {
    if reference.dimensions() != target.dimensions() {
        return Err(Error::Input(format!(
            "reference {:?} and target {:?} dimensions differ; resize the reference first",
            reference.dimensions(),
            target.dimensions()
        )));
    }
    let (w, h) = target.dimensions();
    if (mask.width(), mask.height()) != (w as usize, h as usize) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match target {w}x{h}",
            mask.width(),
            mask.height()
        )));
    }
    if mask.patch() != weights.patch() {
        return Err(Error::Shape(format!(
            "mask patch {} does not match model patch {}",
            mask.patch(),
            weights.patch()
        )));
    }
    if w as usize % weights.patch() != 0 || h as usize % weights.patch() != 0 {
        return Err(Error::Shape(format!(
            "image {w}x{h} is not divisible by patch {}",
            weights.patch()
        )));
    }
    Ok(())
}

/// Per-pixel select: mask takes the edited pixel, everything else comes
/// from the source unchanged (bitwise).
pub fn composite(edited: &RgbImage, source: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    if edited.dimensions() != source.dimensions() {
        return Err(Error::Shape(format!(
            "composite inputs {:?} vs {:?} differ",
            edited.dimensions(),
            source.dimensions()
        )));
    }
    let (w, h) = source.dimensions();
    if (mask.width(), mask.height()) != (w as usize, h as usize) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match images {w}x{h}",
            mask.width(),
            mask.height()
        )));
    }
    let mut out = source.clone();
    for row in 0..h as usize {
        for col in 0..w as usize {
            if mask.pixel_at(row, col) {
                out.put_pixel(col as u32, row as u32, *edited.get_pixel(col as u32, row as u32));
            }
        }
    }
    Ok(out)
}

/// Latent-space background snap used by the blending diagnostic: cells
/// outside the latent mask are replaced by the inversion-trajectory
/// latent at the same grid position.
fn blend_latent_background(z: &Tensor3, trajectory: &Tensor3, mask: &Mask) -> Result<Tensor3> {
    let (h, w, c) = z.shape();
    if trajectory.shape() != z.shape() {
        return Err(Error::Shape(format!(
            "trajectory latent {:?} does not match {:?}",
            trajectory.shape(),
            z.shape()
        )));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for row in 0..h {
        for col in 0..w {
            let keep = mask.latent_at(row, col);
            for ch in 0..c {
                data.push(if keep {
                    z.get(row, col, ch)
                } else {
                    trajectory.get(row, col, ch)
                });
            }
        }
    }
    Tensor3::from_vec(h, w, c, data)
}
