//! `mpath` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! checkpoint error. Logs go to stderr as JSON-Lines; outputs are written
//! only under `--out-dir` (plus stdout for `score` and `evaluate`).

mod commands;
pub mod config;
mod log;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<mpath_core::Error> for CliError {
    fn from(e: mpath_core::Error) -> Self {
        use mpath_core::Error as E;
        match e {
            E::Config(_) | E::UnknownBackend(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mpath", version, about = "Visual-prefix pathology report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a paired (features, report) corpus.
    GenData(Common),
    /// Pretrain and freeze the text backbone.
    Pretrain(Common),
    /// Train the prompt encoder and auxiliary heads with a held-out split.
    Train(Common),
    /// k-fold cross-validation.
    Cv(Common),
    /// Generate reports for the feature vectors in a corpus file.
    Generate(Common),
    /// Score generated-vs-reference pairs from a JSON-Lines file.
    Evaluate(Common),
    /// Score a single pair and print the breakdown.
    Score(ScoreArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub(crate) struct Common {
    /// JSON file of dotted config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    prefix_len: Option<usize>,
    #[arg(long)]
    prompt_dropout: Option<f64>,
    #[arg(long, value_parser = ["encoder", "decoder"])]
    prefix_side: Option<String>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long, value_parser = ["trigram", "model"])]
    emb_backend: Option<String>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Corpus JSON-Lines; synthesized from the corpus config when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Generated-vs-reference JSON-Lines for `evaluate`.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Pretraining steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
pub(crate) struct ScoreArgs {
    #[arg(long)]
    generated: String,
    #[arg(long)]
    reference: String,
    #[command(flatten)]
    common: Common,
}

impl Common {
    /// Config file (if any), then flags, then seed propagation.
    pub(crate) fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).map_err(CliError::Usage)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.seed, c.seed);
        set!(self.folds, c.train.n_folds);
        set!(self.epochs, c.train.max_epochs);
        set!(self.batch_size, c.train.batch_size);
        set!(self.lr, c.train.lr);
        set!(self.patience, c.train.patience);
        set!(self.prefix_len, c.model.prefix_len);
        set!(self.prompt_dropout, c.model.prompt_dropout);
        set!(self.beam_width, c.model.beam_width);
        set!(self.emb_backend, c.eval.emb_backend);
        set!(self.n_samples, c.corpus.n_samples);
        set!(self.noise_sigma, c.corpus.noise_sigma);
        set!(self.steps, c.pretrain.steps);
        if let Some(side) = &self.prefix_side {
            c.model.prefix_side = match side.as_str() {
                "decoder" => mpath_core::model::PrefixSide::Decoder,
                _ => mpath_core::model::PrefixSide::Encoder,
            };
        }
        for (flag, field) in [
            (&self.out_dir, &mut c.paths.out_dir),
            (&self.lexicon, &mut c.paths.lexicon),
            (&self.corpus, &mut c.paths.corpus),
            (&self.taxonomy, &mut c.paths.taxonomy),
            (&self.checkpoint, &mut c.paths.checkpoint),
            (&self.pairs, &mut c.paths.pairs),
        ] {
            if flag.is_some() {
                field.clone_from(flag);
            }
        }
        c.propagate_seed();
        for (key, p) in [
            ("corpus", &c.paths.corpus),
            ("lexicon", &c.paths.lexicon),
            ("taxonomy", &c.paths.taxonomy),
            ("checkpoint", &c.paths.checkpoint),
            ("pairs", &c.paths.pairs),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Usage(format!("{key} path {} does not exist", p.display())));
                }
            }
        }
        if let Some(p) = &c.paths.taxonomy {
            c.corpus.taxonomy = mpath_core::reports::Taxonomy::load(p)?;
        }
        Ok(c)
    }
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("MPATH_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("MPATH_THREADS must be a positive integer, got `{v}`")))?;
        // A pool may already exist when `run` is called more than once in
        // one process; the first setting stays in force.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = init_threads().and_then(|()| match &cli.command {
        Command::GenData(c) => commands::gen_data(&c.resolve()?),
        Command::Pretrain(c) => commands::pretrain(&c.resolve()?),
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Cv(c) => commands::cv(&c.resolve()?),
        Command::Generate(c) => commands::generate(&c.resolve()?),
        Command::Evaluate(c) => commands::evaluate_pairs(&c.resolve()?),
        Command::Score(s) => commands::score(&s.common.resolve()?, &s.generated, &s.reference),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::error(e.message());
            e.exit_code()
        }
    }
}
