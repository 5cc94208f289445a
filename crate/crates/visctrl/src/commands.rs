//! Implementations behind the CLI subcommands: gen-weights, edit,
//! edit-seq, sweep and reconstruct.
//!
//! Commands read a flat key=value config, validate every input path
//! before any compute starts, and write all outputs atomically (temp file
//! plus rename) into the `--out` directory, so a failed run never leaves
//! partial files. Reports begin with the fully resolved configuration.

use std::path::{Path, PathBuf};

use image::RgbImage;
use sha2::{Digest, Sha256};

use crate::attn_control::{dump_attention_maps, gate_active_count, EditGate};
use crate::config::{ConfigEcho, RunConfig};
use crate::container::{self, NamedTensor};
use crate::denoiser::{
    encode_image, init_weights, load_weights, save_weights, zero_denoiser_weights,
    DenoiserConfig, Weights,
};
use crate::error::{Error, Result};
use crate::fgs::{run_multiview, FrameSequence, ReferenceImage, ReferenceSet};
use crate::imgio::{image_to_tensor, load_gray, load_rgb, save_png_atomic, write_atomic};
use crate::metrics::{self, MetricReport};
use crate::numerics::Tensor3;
use crate::pipeline::{
    EditConfig, EditOutcome, Engine, EvalCounts, InvertCondition, Mask,
};
use crate::scheduler::{make_schedule, NoiseSchedule};

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct CliFlags {
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub dump_latents: bool,
    pub dump_attn: bool,
}

const GEN_WEIGHTS_KEYS: &[&str] = &[
    "latent_h",
    "latent_w",
    "channels",
    "attn_dim",
    "blocks",
    "prompt_dim",
    "timestep_dim",
    "patch",
    "weights_seed",
    "init",
    "weights_out",
];

const SCHEDULE_KEYS: &[&str] = &[
    "schedule_train_steps",
    "schedule_beta_start",
    "schedule_beta_end",
];

const EDIT_ONLY_KEYS: &[&str] = &[
    "weights",
    "reference",
    "target",
    "mask",
    "prompt_source",
    "prompt_target",
    "steps",
    "first_steps",
    "iterations",
    "omega",
    "alpha",
    "gate_start_step",
    "gate_start_layer",
    "sampler_seed",
    "invert_condition",
    "recompute_kv",
    "latent_blend",
    "edited_out",
    "report_out",
    "series_out",
];

const SEQ_KEYS: &[&str] = &[
    "weights",
    "frames_dir",
    "masks_dir",
    "reference_1",
    "reference_2",
    "reference_3",
    "prompt_reference_1",
    "prompt_reference_2",
    "prompt_reference_3",
    "prompt_target",
    "steps",
    "first_steps",
    "iterations",
    "omega",
    "alpha",
    "gate_start_step",
    "gate_start_layer",
    "sampler_seed",
    "invert_condition",
    "schedule_train_steps",
    "schedule_beta_start",
    "schedule_beta_end",
    "report_out",
];

const SWEEP_ONLY_KEYS: &[&str] = &["sweep_s", "sweep_l", "sweep_t", "sweep_mode", "index_out"];

const RECONSTRUCT_KEYS: &[&str] = &[
    "weights",
    "image",
    "prompt",
    "steps",
    "omega",
    "invert_condition",
    "schedule_train_steps",
    "schedule_beta_start",
    "schedule_beta_end",
    "reconstruction_out",
    "report_out",
];

fn keys_union(parts: &[&[&'static str]]) -> Vec<&'static str> {
    let mut all = Vec::new();
    for p in parts {
        all.extend_from_slice(p);
    }
    all
}

fn ensure_out_dir(flags: &CliFlags) -> Result<()> {
    std::fs::create_dir_all(&flags.out_dir).map_err(|e| Error::io(&flags.out_dir, e))
}

fn check_input_path(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Input(format!(
            "input path does not exist: {}",
            path.display()
        )));
    }
    Ok(())
}

fn parse_invert_condition(cfg: &RunConfig) -> Result<InvertCondition> {
    match cfg.str_or("invert_condition", "unconditional") {
        "unconditional" => Ok(InvertCondition::Unconditional),
        "conditional" => Ok(InvertCondition::Conditional),
        other => Err(Error::Config(format!(
            "invert_condition must be 'unconditional' or 'conditional', got '{other}'"
        ))),
    }
}

fn invert_condition_name(c: InvertCondition) -> &'static str {
    match c {
        InvertCondition::Unconditional => "unconditional",
        InvertCondition::Conditional => "conditional",
    }
}

struct ScheduleSpec {
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
}

impl ScheduleSpec {
    fn from_config(cfg: &RunConfig) -> Result<ScheduleSpec> {
        Ok(ScheduleSpec {
            train_steps: cfg.usize_or("schedule_train_steps", 1000)?,
            beta_start: cfg.f64_or("schedule_beta_start", 1e-4)?,
            beta_end: cfg.f64_or("schedule_beta_end", 0.02)?,
        })
    }

    fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.train_steps, self.beta_start, self.beta_end)
    }

    fn echo(&self, echo: &mut ConfigEcho) {
        echo.push("schedule_train_steps", self.train_steps);
        echo.push("schedule_beta_start", self.beta_start);
        echo.push("schedule_beta_end", self.beta_end);
    }
}

struct EditSpec {
    edit: EditConfig,
}

impl EditSpec {
    fn from_config(cfg: &RunConfig) -> Result<EditSpec> {
        Ok(EditSpec {
            edit: EditConfig {
                steps: cfg.usize_or("steps", 5)?,
                first_steps: cfg.opt_usize("first_steps")?,
                iterations: cfg.usize_or("iterations", 5)?,
                gate: EditGate {
                    start_step: cfg.require_usize("gate_start_step")?,
                    start_layer: cfg.require_usize("gate_start_layer")?,
                },
                omega: cfg.f64_or("omega", 6.0)?,
                alpha: cfg.f64_or("alpha", 1.0)?,
                seed: cfg.get("sampler_seed").map_or(Ok(0), |_| cfg.require_u64("sampler_seed"))?,
                invert_condition: parse_invert_condition(cfg)?,
                recompute_kv: cfg.bool_or("recompute_kv", false)?,
                latent_blend: cfg.bool_or("latent_blend", false)?,
                record_attn: false,
            },
        })
    }

    fn echo(&self, echo: &mut ConfigEcho) {
        let e = &self.edit;
        echo.push("steps", e.steps);
        echo.push("first_steps", e.first_steps.unwrap_or(e.steps));
        echo.push("iterations", e.iterations);
        echo.push("gate_start_step", e.gate.start_step);
        echo.push("gate_start_layer", e.gate.start_layer);
        echo.push("omega", e.omega);
        echo.push("alpha", e.alpha);
        echo.push("sampler_seed", e.seed);
        echo.push("invert_condition", invert_condition_name(e.invert_condition));
        echo.push("recompute_kv", e.recompute_kv);
        echo.push("latent_blend", e.latent_blend);
    }
}

fn counts_lines(counts: &EvalCounts) -> String {
    format!(
        "forward_calls_total={}\nforward_calls_invert={}\nforward_calls_capture={}\n\
         forward_calls_denoise_cond={}\nforward_calls_denoise_uncond={}\n",
        counts.total(),
        counts.invert,
        counts.capture,
        counts.denoise_cond,
        counts.denoise_uncond
    )
}

/// Generates a seeded weights file and prints its content hash.
pub fn cmd_gen_weights(cfg: &RunConfig, flags: &CliFlags) -> Result<String> {
    cfg.check_known(GEN_WEIGHTS_KEYS)?;
    let channels = cfg.require_usize("channels")?;
    let model = DenoiserConfig {
        latent_h: cfg.usize_or("latent_h", 8)?,
        latent_w: cfg.usize_or("latent_w", 8)?,
        channels,
        attn_dim: cfg.usize_or("attn_dim", channels)?,
        blocks: cfg.require_usize("blocks")?,
        prompt_dim: cfg.require_usize("prompt_dim")?,
        timestep_dim: cfg.require_usize("timestep_dim")?,
        patch: cfg.require_usize("patch")?,
        seed: cfg.require_u64("weights_seed")?,
    };
    model.validate()?;
    // The layer gate needs at least two blocks to be exercisable.
    if model.blocks < 2 {
        return Err(Error::Config(format!(
            "blocks must be >= 2 so the layer gate has room, got {}",
            model.blocks
        )));
    }
    let init = cfg.str_or("init", "normal");
    let weights = match init {
        "normal" => init_weights(&model)?,
        "zero-denoiser" => zero_denoiser_weights(&model)?,
        other => {
            return Err(Error::Config(format!(
                "init must be 'normal' or 'zero-denoiser', got '{other}'"
            )))
        }
    };
    ensure_out_dir(flags)?;
    let out_path = flags.out_dir.join(cfg.str_or("weights_out", "weights.vtsr"));
    save_weights(&weights, &out_path)?;
    let bytes = std::fs::read(&out_path).map_err(|e| Error::io(&out_path, e))?;
    let hash: String = Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();

    let mut echo = ConfigEcho::new();
    echo.push("command", "gen-weights");
    echo.push("latent_h", model.latent_h);
    echo.push("latent_w", model.latent_w);
    echo.push("channels", model.channels);
    echo.push("attn_dim", model.attn_dim);
    echo.push("blocks", model.blocks);
    echo.push("prompt_dim", model.prompt_dim);
    echo.push("timestep_dim", model.timestep_dim);
    echo.push("patch", model.patch);
    echo.push("weights_seed", model.seed);
    echo.push("init", init);
    echo.push("weights_file", out_path.display());
    echo.push("weights_sha256", hash);
    Ok(echo.render())
}

struct LoadedEditInputs {
    weights: Weights,
    reference: RgbImage,
    target: RgbImage,
    mask: Mask,
    ref_prompt: String,
    target_prompt: String,
}

fn load_edit_inputs(cfg: &RunConfig) -> Result<LoadedEditInputs> {
    let weights_path = PathBuf::from(cfg.require("weights")?);
    let ref_path = PathBuf::from(cfg.require("reference")?);
    let target_path = PathBuf::from(cfg.require("target")?);
    let mask_path = PathBuf::from(cfg.require("mask")?);
    for p in [&weights_path, &ref_path, &target_path, &mask_path] {
        check_input_path(p)?;
    }
    let weights = load_weights(&weights_path)?;
    let reference = load_rgb(&ref_path)?;
    let target = load_rgb(&target_path)?;
    let mask = Mask::from_gray(&load_gray(&mask_path)?, weights.patch())?;
    Ok(LoadedEditInputs {
        weights,
        reference,
        target,
        mask,
        ref_prompt: cfg.require("prompt_source")?.to_string(),
        target_prompt: cfg.require("prompt_target")?.to_string(),
    })
}

fn edit_echo(cfg: &RunConfig, spec: &EditSpec, schedule: &ScheduleSpec, command: &str) -> Result<ConfigEcho> {
    let mut echo = ConfigEcho::new();
    echo.push("command", command);
    echo.push("weights", cfg.require("weights")?);
    echo.push("reference", cfg.require("reference")?);
    echo.push("target", cfg.require("target")?);
    echo.push("mask", cfg.require("mask")?);
    echo.push("prompt_source", cfg.require("prompt_source")?);
    echo.push("prompt_target", cfg.require("prompt_target")?);
    spec.echo(&mut echo);
    schedule.echo(&mut echo);
    Ok(echo)
}

fn dump_iteration_latents(path: &Path, init: &Tensor3, outcome: &EditOutcome) -> Result<()> {
    let rank3 = |t: &Tensor3| -> Vec<u32> {
        let (h, w, c) = t.shape();
        vec![h as u32, w as u32, c as u32]
    };
    let mut tensors = vec![NamedTensor {
        name: "init.z_star".into(),
        dims: rank3(init),
        data: init.data().to_vec(),
    }];
    for it in &outcome.iterations {
        let n = it.iteration;
        for (tag, tensor) in [
            ("z_star_in", &it.z_star_in),
            ("z_t_fresh", &it.fresh_inversion),
            ("z_t", &it.z_t_used),
            ("z0", &it.z0),
        ] {
            tensors.push(NamedTensor {
                name: format!("iter{n}.{tag}"),
                dims: rank3(tensor),
                data: tensor.data().to_vec(),
            });
        }
    }
    container::write_tensors(path, &tensors)
}

/// Single-image edit: runs the full loop and writes the edited image,
/// a key=value report, the per-iteration CSV series and optional latent
/// and attention-map dumps.
pub fn cmd_edit(cfg: &RunConfig, flags: &CliFlags) -> Result<String> {
    cfg.check_known(&keys_union(&[EDIT_ONLY_KEYS, SCHEDULE_KEYS]))?;
    let spec = EditSpec::from_config(cfg)?;
    let schedule_spec = ScheduleSpec::from_config(cfg)?;
    let inputs = load_edit_inputs(cfg)?;
    let schedule = schedule_spec.build()?;
    let mut edit = spec.edit.clone();
    edit.record_attn = flags.dump_attn;
    let engine = Engine::new(&inputs.weights, &schedule, edit)?;
    let outcome = engine.run_visctrl(
        &inputs.reference,
        &inputs.ref_prompt,
        &inputs.target,
        &inputs.target_prompt,
        &inputs.mask,
    )?;

    let z0_target = encode_image(&image_to_tensor(&inputs.target), &inputs.weights)?;
    let final_z0 = &outcome.iterations.last().expect("N >= 1").z0;
    let report = MetricReport {
        ssim: metrics::ssim(&outcome.edited, &inputs.target)?,
        bg_mad: metrics::bg_error(&outcome.edited, &inputs.target, &inputs.mask)?,
        latent_mse: metrics::latent_mse(final_z0, &z0_target)?,
        subject_latent_mse: outcome.subject_latent_mse,
        series: outcome
            .iterations
            .iter()
            .map(|it| (it.iteration, it.latent_mse_prev))
            .collect(),
    };

    ensure_out_dir(flags)?;
    let edited_path = flags.out_dir.join(cfg.str_or("edited_out", "edited.png"));
    save_png_atomic(&outcome.edited, &edited_path)?;

    let echo = edit_echo(cfg, &spec, &schedule_spec, "edit")?;
    let mut text = echo.render();
    text.push_str(&counts_lines(&outcome.counts));
    text.push_str(&report.kv_lines());
    let report_path = flags.out_dir.join(cfg.str_or("report_out", "report.txt"));
    write_atomic(&report_path, text.as_bytes())?;
    let series_path = flags.out_dir.join(cfg.str_or("series_out", "series.csv"));
    write_atomic(&series_path, report.csv().as_bytes())?;

    if flags.dump_latents {
        dump_iteration_latents(&flags.out_dir.join("latents.vtsr"), &z0_target, &outcome)?;
    }
    if flags.dump_attn {
        dump_attention_maps(&outcome.attn_records, &flags.out_dir.join("attn"))?;
    }
    Ok(format!(
        "edited image written to {}\nreport written to {}\n",
        edited_path.display(),
        report_path.display()
    ))
}

fn discover_numbered(dir: &Path, prefix: &str) -> Result<Vec<(usize, PathBuf)>> {
    check_input_path(dir)?;
    let mut found = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix(prefix) else {
            continue;
        };
        let Some(digits) = rest.strip_suffix(".png") else {
            continue;
        };
        if digits.len() != 4 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        found.push((digits.parse().unwrap(), entry.path()));
    }
    found.sort_by_key(|(i, _)| *i);
    if found.is_empty() {
        return Err(Error::Input(format!(
            "no {prefix}NNNN.png files in {}",
            dir.display()
        )));
    }
    Ok(found)
}

/// Frame-sequence edit with gradual feature sampling over 1-3 references.
pub fn cmd_edit_seq(cfg: &RunConfig, flags: &CliFlags) -> Result<String> {
    cfg.check_known(SEQ_KEYS)?;
    let spec = EditSpec::from_config(cfg)?;
    let schedule_spec = ScheduleSpec::from_config(cfg)?;

    let weights_path = PathBuf::from(cfg.require("weights")?);
    check_input_path(&weights_path)?;
    let frames_dir = PathBuf::from(cfg.require("frames_dir")?);
    let masks_dir = PathBuf::from(cfg.str_or("masks_dir", cfg.require("frames_dir")?));
    let frame_files = discover_numbered(&frames_dir, "frame_")?;

    // Collect reference paths/prompts before loading anything heavy.
    let mut ref_specs = Vec::new();
    for i in 1..=3usize {
        if let Some(path) = cfg.get(&format!("reference_{i}")) {
            let prompt = cfg.require(&format!("prompt_reference_{i}"))?.to_string();
            let path = PathBuf::from(path);
            check_input_path(&path)?;
            ref_specs.push((path, prompt));
        }
    }
    if ref_specs.is_empty() {
        return Err(Error::Config("at least reference_1 is required".into()));
    }
    let target_prompt = cfg.require("prompt_target")?.to_string();

    let weights = load_weights(&weights_path)?;
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    for (idx, path) in &frame_files {
        let mask_path = masks_dir.join(format!("mask_{idx:04}.png"));
        check_input_path(&mask_path)?;
        frames.push(load_rgb(path)?);
        masks.push(Mask::from_gray(&load_gray(&mask_path)?, weights.patch())?);
    }
    let refs = ReferenceSet::new(
        ref_specs
            .iter()
            .map(|(path, prompt)| {
                Ok(ReferenceImage {
                    image: load_rgb(path)?,
                    prompt: prompt.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        spec.edit.seed,
    )?;

    let schedule = schedule_spec.build()?;
    let engine = Engine::new(&weights, &schedule, spec.edit.clone())?;
    let sequence = FrameSequence {
        frames,
        masks,
        target_prompt: target_prompt.clone(),
    };
    let outcome = run_multiview(&engine, &sequence, &refs, flags.jobs.max(1))?;

    ensure_out_dir(flags)?;
    for ((idx, _), frame) in frame_files.iter().zip(&outcome.frames) {
        save_png_atomic(&frame.edited, &flags.out_dir.join(format!("edited_{idx:04}.png")))?;
    }

    let mut echo = ConfigEcho::new();
    echo.push("command", "edit-seq");
    echo.push("weights", cfg.require("weights")?);
    echo.push("frames_dir", frames_dir.display());
    echo.push("masks_dir", masks_dir.display());
    for (i, (path, prompt)) in ref_specs.iter().enumerate() {
        echo.push(&format!("reference_{}", i + 1), path.display());
        echo.push(&format!("prompt_reference_{}", i + 1), prompt);
    }
    echo.push("prompt_target", &target_prompt);
    spec.echo(&mut echo);
    schedule_spec.echo(&mut echo);
    echo.push("frames", outcome.frames.len());

    let mut text = echo.render();
    let mut total = outcome.capture_counts;
    total.add(&outcome.frame_counts);
    text.push_str(&counts_lines(&total));
    text.push_str(&outcome.consistency_table());
    let report_path = flags.out_dir.join(cfg.str_or("report_out", "consistency.txt"));
    write_atomic(&report_path, text.as_bytes())?;

    if flags.dump_latents {
        for (pos, ((idx, _), frame)) in frame_files.iter().zip(&outcome.frames).enumerate() {
            let init = encode_image(&image_to_tensor(&sequence.frames[pos]), &weights)?;
            let pseudo = EditOutcome {
                edited: frame.edited.clone(),
                decoded: frame.edited.clone(),
                iterations: frame.iterations.clone(),
                counts: frame.counts,
                attn_records: Vec::new(),
                subject_latent_mse: frame.subject_latent_mse,
            };
            dump_iteration_latents(
                &flags.out_dir.join(format!("latents_{idx:04}.vtsr")),
                &init,
                &pseudo,
            )?;
        }
    }
    Ok(format!(
        "{} frames edited, consistency report at {}\n",
        outcome.frames.len(),
        report_path.display()
    ))
}

fn reconstruct_once(
    weights: &Weights,
    schedule: &NoiseSchedule,
    steps: usize,
    omega: f64,
    invert_condition: InvertCondition,
    prompt: &str,
    image: &RgbImage,
) -> Result<(RgbImage, f64, EvalCounts)> {
    let edit = EditConfig {
        steps,
        iterations: 1,
        gate: EditGate {
            start_step: steps,
            start_layer: weights.block_count(),
        },
        omega,
        invert_condition,
        ..EditConfig::default()
    };
    let engine = Engine::new(weights, schedule, edit)?;
    let grid = engine.main_grid();
    let z0 = encode_image(&image_to_tensor(image), weights)?;
    let cond = crate::denoiser::embed_prompt(prompt, weights.prompt_dim())?;
    let mut counts = EvalCounts::default();
    let z_t = engine.invert_latent(&z0, &cond, &grid, &mut counts)?;
    // Denoise under the same condition the inversion used, so the
    // round-trip error is purely the step-count mismatch.
    let uncond = crate::denoiser::PromptEmbedding::unconditional(weights.prompt_dim());
    let recon_cond = match invert_condition {
        InvertCondition::Unconditional => &uncond,
        InvertCondition::Conditional => &cond,
    };
    let recon = engine.denoise_guided(&z_t, recon_cond, &grid, &mut counts)?;
    let mse = metrics::latent_mse(&recon, &z0)?;
    let img = crate::imgio::tensor_to_image(&crate::denoiser::decode_latent(&recon, weights)?)?;
    Ok((img, mse, counts))
}

/// Inversion-reconstruction round trip with latent MSE and SSIM reported.
pub fn cmd_reconstruct(cfg: &RunConfig, flags: &CliFlags) -> Result<String> {
    cfg.check_known(RECONSTRUCT_KEYS)?;
    let weights_path = PathBuf::from(cfg.require("weights")?);
    let image_path = PathBuf::from(cfg.require("image")?);
    check_input_path(&weights_path)?;
    check_input_path(&image_path)?;
    let schedule_spec = ScheduleSpec::from_config(cfg)?;
    let steps = cfg.usize_or("steps", 5)?;
    let omega = cfg.f64_or("omega", 1.0)?;
    let invert_condition = parse_invert_condition(cfg)?;
    let prompt = cfg.require("prompt")?.to_string();

    let weights = load_weights(&weights_path)?;
    let image = load_rgb(&image_path)?;
    let schedule = schedule_spec.build()?;
    let (recon, latent_mse, counts) = reconstruct_once(
        &weights,
        &schedule,
        steps,
        omega,
        invert_condition,
        &prompt,
        &image,
    )?;
    let ssim = metrics::ssim(&recon, &image)?;

    ensure_out_dir(flags)?;
    let recon_path = flags
        .out_dir
        .join(cfg.str_or("reconstruction_out", "reconstruction.png"));
    save_png_atomic(&recon, &recon_path)?;

    let mut echo = ConfigEcho::new();
    echo.push("command", "reconstruct");
    echo.push("weights", cfg.require("weights")?);
    echo.push("image", cfg.require("image")?);
    echo.push("prompt", &prompt);
    echo.push("steps", steps);
    echo.push("omega", omega);
    echo.push("invert_condition", invert_condition_name(invert_condition));
    schedule_spec.echo(&mut echo);
    let mut text = echo.render();
    text.push_str(&counts_lines(&counts));
    text.push_str(&format!("latent_mse={latent_mse:.9e}\n"));
    text.push_str(&format!("ssim={ssim:.9}\n"));
    let report_path = flags.out_dir.join(cfg.str_or("report_out", "report.txt"));
    write_atomic(&report_path, text.as_bytes())?;
    Ok(format!(
        "reconstruction written to {}\nlatent_mse={latent_mse:.9e} ssim={ssim:.9}\n",
        recon_path.display()
    ))
}

/// Grid of edits over (S, L, T) combinations, or a step-count sweep of
/// plain reconstructions, with a contact-sheet index file.
pub fn cmd_sweep(cfg: &RunConfig, flags: &CliFlags) -> Result<String> {
    cfg.check_known(&keys_union(&[EDIT_ONLY_KEYS, SCHEDULE_KEYS, SWEEP_ONLY_KEYS]))?;
    let mode = cfg.str_or("sweep_mode", "edit");
    let schedule_spec = ScheduleSpec::from_config(cfg)?;
    let schedule = schedule_spec.build()?;
    ensure_out_dir(flags)?;

    let mut echo = ConfigEcho::new();
    echo.push("command", "sweep");
    echo.push("sweep_mode", mode);
    schedule_spec.echo(&mut echo);

    let mut index = String::new();
    let mut cells = 0usize;
    match mode {
        "edit" => {
            let spec = EditSpec::from_config(cfg)?;
            let inputs = load_edit_inputs(cfg)?;
            let s_values = cfg
                .usize_list("sweep_s")?
                .unwrap_or_else(|| vec![spec.edit.gate.start_step]);
            let l_values = cfg
                .usize_list("sweep_l")?
                .unwrap_or_else(|| vec![spec.edit.gate.start_layer]);
            let t_values = cfg.usize_list("sweep_t")?.unwrap_or_else(|| vec![spec.edit.steps]);
            echo.push("sweep_s", join(&s_values));
            echo.push("sweep_l", join(&l_values));
            echo.push("sweep_t", join(&t_values));
            echo.push("weights", cfg.require("weights")?);
            echo.push("reference", cfg.require("reference")?);
            echo.push("target", cfg.require("target")?);
            echo.push("mask", cfg.require("mask")?);
            for &t in &t_values {
                for &s in &s_values {
                    for &l in &l_values {
                        let mut edit = spec.edit.clone();
                        edit.steps = t;
                        edit.first_steps = None;
                        edit.gate = EditGate {
                            start_step: s,
                            start_layer: l,
                        };
                        let engine = Engine::new(&inputs.weights, &schedule, edit)?;
                        let outcome = engine.run_visctrl(
                            &inputs.reference,
                            &inputs.ref_prompt,
                            &inputs.target,
                            &inputs.target_prompt,
                            &inputs.mask,
                        )?;
                        let name = format!("edit_S{s}_L{l}_T{t}.png");
                        save_png_atomic(&outcome.edited, &flags.out_dir.join(&name))?;
                        let active =
                            gate_active_count(s, l, t, inputs.weights.block_count());
                        let z0_target =
                            encode_image(&image_to_tensor(&inputs.target), &inputs.weights)?;
                        let mse = metrics::latent_mse(
                            &outcome.iterations.last().expect("N >= 1").z0,
                            &z0_target,
                        )?;
                        index.push_str(&format!(
                            "S={s} L={l} T={t} file={name} gate_active={active} \
                             final_latent_mse={mse:.9e}\n"
                        ));
                        cells += 1;
                    }
                }
            }
        }
        "reconstruct" => {
            let weights_path = PathBuf::from(cfg.require("weights")?);
            let target_path = PathBuf::from(cfg.require("target")?);
            check_input_path(&weights_path)?;
            check_input_path(&target_path)?;
            let weights = load_weights(&weights_path)?;
            let target = load_rgb(&target_path)?;
            let prompt = cfg.require("prompt_target")?.to_string();
            let invert_condition = parse_invert_condition(cfg)?;
            let omega = cfg.f64_or("omega", 1.0)?;
            let t_values = cfg
                .usize_list("sweep_t")?
                .ok_or_else(|| Error::Config("sweep_t is required in reconstruct mode".into()))?;
            echo.push("sweep_t", join(&t_values));
            echo.push("weights", cfg.require("weights")?);
            echo.push("target", cfg.require("target")?);
            echo.push("omega", omega);
            for &t in &t_values {
                let (img, mse, _) = reconstruct_once(
                    &weights,
                    &schedule,
                    t,
                    omega,
                    invert_condition,
                    &prompt,
                    &target,
                )?;
                let name = format!("recon_T{t}.png");
                save_png_atomic(&img, &flags.out_dir.join(&name))?;
                index.push_str(&format!(
                    "T={t} file={name} roundtrip_latent_mse={mse:.9e}\n"
                ));
                cells += 1;
            }
        }
        other => {
            return Err(Error::Config(format!(
                "sweep_mode must be 'edit' or 'reconstruct', got '{other}'"
            )))
        }
    }

    let mut text = echo.render();
    text.push_str(&index);
    let index_path = flags.out_dir.join(cfg.str_or("index_out", "index.txt"));
    write_atomic(&index_path, text.as_bytes())?;
    Ok(format!(
        "{cells} sweep cells written, index at {}\n",
        index_path.display()
    ))
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
