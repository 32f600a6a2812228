mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fractex::classify::ClassifierKind;
use fractex::features::Method;
use fractex::imgprep::Channel;

use crate::config::{parse_exponents, parse_shear, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "fractex", version, about = "Fractal-guided wavelet packet texture features")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the JSON config.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON run configuration; flags below take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Colour plane: r, g, b or gray.
    #[arg(long, global = true)]
    channel: Option<Channel>,
    /// Morphological gradient element size (odd, >= 3); 0 disables the gradient.
    #[arg(long, global = true)]
    se_size: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Deepest decomposition level explored.
    #[arg(long, global = true)]
    max_levels: Option<usize>,
    /// Forced depth (extract/evaluate) or deepest swept level (sweep).
    #[arg(long, global = true)]
    levels: Option<usize>,
    #[arg(long, global = true)]
    window: Option<usize>,
    /// bbs_fd, bbs_e, bbs_e2 or bbs_cm; comma-separate two to compare.
    #[arg(long, global = true, value_delimiter = ',')]
    method: Option<Vec<Method>>,
    /// svm, nbc or knn.
    #[arg(long, global = true)]
    classifier: Option<ClassifierKind>,
    /// Base-2 exponents of C, as lo:hi:step or a comma list.
    #[arg(long, global = true, allow_hyphen_values = true)]
    grid_c: Option<String>,
    /// Base-2 exponents of the RBF width, as lo:hi:step or a comma list.
    #[arg(long, global = true, allow_hyphen_values = true)]
    grid_gamma: Option<String>,
    #[arg(long, global = true)]
    inner_folds: Option<usize>,
    /// Bagged SVM with this many members.
    #[arg(long, global = true)]
    bag_members: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Prune correlated features inside every training fold at this |rho|.
    #[arg(long, global = true)]
    prune: Option<f64>,
    /// Correlation threshold used by `select`.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Lattice cells (row-major 0..16) sheared in every image, e.g. 5,10.
    #[arg(long, global = true, value_delimiter = ',')]
    deform_cells: Option<Vec<usize>>,
    /// Without --deform-cells, shear this many seeded random cells per image.
    #[arg(long, global = true)]
    deform_count: Option<usize>,
    /// Shear matrix a,b,c,d.
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_shear)]
    shear: Option<[f64; 4]>,
    #[arg(long, global = true)]
    size: Option<usize>,
    #[arg(long, global = true)]
    images_per_class: Option<usize>,
    #[arg(long, global = true)]
    patients_per_class: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic four-class corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Best-basis features of every image listed in a corpus manifest.
    Extract {
        /// Directory holding manifest.csv and the images it lists.
        #[arg(long)]
        input: PathBuf,
        /// Feature CSV; the basis paths go to `<out>.paths.json`.
        #[arg(long)]
        out: PathBuf,
        /// Write each image's deepest selected subband as PGM into this directory.
        #[arg(long)]
        dump_subband: Option<PathBuf>,
        /// Write the FD map of that subband as PGM into this directory.
        #[arg(long)]
        dump_fd: Option<PathBuf>,
    },
    /// Divergence ranking and correlation pruning of a feature CSV.
    Select {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the pruned feature CSV.
        #[arg(long)]
        pruned: Option<PathBuf>,
    },
    /// Fit a classifier on a feature CSV.
    Train {
        #[arg(long)]
        features: PathBuf,
        /// Restrict to the columns kept by `select`.
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// LOPO, model holdout or texture-patch evaluation.
    Evaluate {
        /// Feature CSV; give two to compare them. An `extract` CSV carries a basis
        /// fitted on all rows, so use --corpus for leakage-free LOPO estimates.
        #[arg(long, conflicts_with_all = ["corpus", "brodatz"])]
        features: Vec<PathBuf>,
        /// Score this trained model on the single feature CSV instead of LOPO.
        #[arg(long, requires = "features")]
        model: Option<PathBuf>,
        /// Corpus directory; features are rebuilt inside every fold.
        #[arg(long, conflicts_with = "brodatz")]
        corpus: Option<PathBuf>,
        /// Directory of single-texture images for the patch holdout.
        #[arg(long)]
        brodatz: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// LOPO accuracy at every forced depth and under the threshold.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shear lattice cells of every corpus image.
    Deform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn effective_config(o: &Overrides) -> fractex::Result<RunConfig> {
    let mut c = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.channel {
        c.channel = v;
    }
    if let Some(v) = o.se_size {
        c.se_size = (v != 0).then_some(v);
    }
    if let Some(v) = o.lambda {
        c.lambda = v;
    }
    if let Some(v) = o.max_levels {
        c.max_levels = v;
    }
    if let Some(v) = o.levels {
        c.levels = Some(v);
    }
    if let Some(v) = o.window {
        c.window = v;
    }
    if let Some(v) = &o.method {
        c.methods = v.clone();
    }
    if let Some(v) = o.classifier {
        c.classifier = v;
    }
    if let Some(v) = &o.grid_c {
        c.grid_c = parse_exponents(v).map_err(fractex::Error::Parameter)?;
    }
    if let Some(v) = &o.grid_gamma {
        c.grid_gamma = parse_exponents(v).map_err(fractex::Error::Parameter)?;
    }
    if let Some(v) = o.inner_folds {
        c.inner_folds = v;
    }
    if let Some(v) = o.bag_members {
        c.bag_members = Some(v);
    }
    if let Some(v) = o.k {
        c.k = v;
    }
    if let Some(v) = o.prune {
        c.prune = Some(v);
    }
    if let Some(v) = o.threshold {
        c.threshold = v;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = &o.deform_cells {
        c.deform.cells = Some(v.clone());
    }
    if let Some(v) = o.deform_count {
        c.deform.count = v;
    }
    if let Some(v) = o.shear {
        c.deform.shear = v;
    }
    if let Some(v) = o.size {
        c.synth.size = v;
    }
    if let Some(v) = o.images_per_class {
        c.synth.images_per_class = v;
    }
    if let Some(v) = o.patients_per_class {
        c.synth.patients_per_class = v;
    }
    Ok(c)
}

fn configure_threads() -> fractex::Result<()> {
    let Ok(v) = std::env::var("FRACTEX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| fractex::Error::Parameter(format!("FRACTEX_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| fractex::Error::Parameter(e.to_string()))
}

fn run(cli: Cli) -> fractex::Result<()> {
    configure_threads()?;
    let cfg = effective_config(&cli.overrides)?;
    cfg.validate()?;
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg, &out),
        Command::Extract {
            input,
            out,
            dump_subband,
            dump_fd,
        } => commands::extract(&cfg, &input, &out, dump_subband.as_deref(), dump_fd.as_deref()),
        Command::Select { features, out, pruned } => commands::select(&cfg, &features, &out, pruned.as_deref()),
        Command::Train { features, selection, out } => commands::train(&cfg, &features, selection.as_deref(), &out),
        Command::Evaluate {
            features,
            model,
            corpus,
            brodatz,
            out,
        } => {
            if let Some(dir) = brodatz {
                commands::evaluate_holdout_textures(&cfg, &dir, &out)
            } else if let Some(dir) = corpus {
                commands::evaluate_corpus(&cfg, &dir, &out)
            } else if let Some(m) = model {
                commands::evaluate_model(&cfg, &m, &features, &out)
            } else {
                commands::evaluate_features(&cfg, &features, &out)
            }
        }
        Command::Sweep { corpus, out } => commands::sweep(&cfg, &corpus, &out),
        Command::Deform { input, out } => commands::deform(&cfg, &input, &out),
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
