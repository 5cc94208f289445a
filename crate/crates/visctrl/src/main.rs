use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use visctrl::commands::{
    cmd_edit, cmd_edit_seq, cmd_gen_weights, cmd_reconstruct, cmd_sweep, CliFlags,
};
use visctrl::config::RunConfig;

/// Reference-guided latent editing on a deterministic toy denoiser.
#[derive(Parser)]
#[command(name = "visctrl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for frame sequences.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Dump per-iteration latents as tensor containers.
    #[arg(long)]
    dump_latents: bool,
    /// Dump self-attention maps as grayscale PNGs plus an index.
    #[arg(long)]
    dump_attn: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded weights file.
    GenWeights(Common),
    /// Edit one image against one reference.
    Edit(Common),
    /// Edit a numbered frame sequence against 1-3 references.
    EditSeq(Common),
    /// Run a grid of edits over (S, L, T), or reconstructions over T.
    Sweep(Common),
    /// Invert and reconstruct an image, reporting round-trip fidelity.
    Reconstruct(Common),
}

fn run(common: &Common, f: impl Fn(&RunConfig, &CliFlags) -> visctrl::Result<String>) -> ExitCode {
    let flags = CliFlags {
        out_dir: common.out.clone(),
        jobs: common.jobs,
        dump_latents: common.dump_latents,
        dump_attn: common.dump_attn,
    };
    let result = RunConfig::load(&common.config).and_then(|cfg| f(&cfg, &flags));
    match result {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error[{}]: {}", err.code(), err);
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenWeights(c) => run(c, cmd_gen_weights),
        Command::Edit(c) => run(c, cmd_edit),
        Command::EditSeq(c) => run(c, cmd_edit_seq),
        Command::Sweep(c) => run(c, cmd_sweep),
        Command::Reconstruct(c) => run(c, cmd_reconstruct),
    }
}
