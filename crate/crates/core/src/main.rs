use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rpnbf::pipeline::{self, RunConfig};

/// Pedestrian detection with region proposals and boosted forests.
#[derive(Parser)]
#[command(name = "rpnbf", version)]
struct Cli {
    /// Run configuration (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train and test scene directories.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle proposals for a scene directory.
    Propose {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `train_top_k`.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// RoI features of proposals.
    Extract {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the cascaded boosted forest.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score test proposals with a trained model.
    Detect {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Miss rate against FPPI; writes `<out>.csv` and `<out>.svg`.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Image list; defaults to every image named in the inputs.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> rpnbf::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> rpnbf::Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::SynthGen { out } => pipeline::run_synth_gen(&cfg, &out),
        Cmd::Propose { scenes, out, top_k } => {
            pipeline::run_propose(&cfg, &scenes, top_k.unwrap_or(cfg.train_top_k), &out)
        }
        Cmd::Extract {
            scenes,
            proposals,
            out,
        } => pipeline::run_extract(&cfg, &scenes, &proposals, &out),
        Cmd::Train { features, gt, out } => {
            let model = pipeline::run_train(&cfg, &features, &gt, &out)?;
            println!("trained {} trees", model.trees.len());
            Ok(())
        }
        Cmd::Detect { scenes, model, out } => pipeline::run_detect(&cfg, &scenes, &model, &out),
        Cmd::Eval {
            detections,
            gt,
            images,
            out,
        } => {
            let c = pipeline::run_eval(&cfg, &detections, &gt, images.as_deref(), &out)?;
            println!("MR-2 {:.4}  MR-4 {:.4}", c.mr2, c.mr4);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
