use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use labelemb::analysis::{write_heatmap, SimilarityTable};
use labelemb::formats;
use labelemb::trainer::{evaluate, run_experiment, Splits};
use labelemb::{DualHeadModel, Mode, ModelConfig, ModelKind, TrainConfig};

#[derive(Parser)]
#[command(name = "labelemb", version, about = "Train label embedding networks and inspect learned embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mlp,
    Cnn,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Mlp => ModelKind::Mlp,
            ModelArg::Cnn => ModelKind::Cnn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Labelemb,
    LabelembCompressed,
    Pretrained,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Labelemb => Mode::LabelEmb,
            ModeArg::LabelembCompressed => Mode::LabelEmbCompressed,
            ModeArg::Pretrained => Mode::Pretrained,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and print the test error at the best dev epoch.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        tau: f64,
        #[arg(long, default_value_t = 0.9)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        p: u8,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        compressed_dim: Option<usize>,
        /// Keep the embedding-learning term for misclassified examples.
        #[arg(long)]
        no_mask_wrong: bool,
        #[arg(long)]
        emb_path: Option<PathBuf>,
        /// Train on the first N training examples only.
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Print the k most similar labels for every label.
    Similar {
        emb_file: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Write the similarity matrix as CSV and as a PGM heatmap.
    Heatmap {
        emb_file: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        pgm: PathBuf,
    },
    /// Convert an embedding between the binary and CSV forms. The direction
    /// follows from the input: a binary file becomes CSV and vice versa.
    Export { input: PathBuf, output: PathBuf },
    /// Evaluate a checkpoint on the dev and test sets.
    Eval {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            model,
            mode,
            data_dir,
            out,
            tau,
            alpha,
            p,
            epochs,
            batch_size,
            seed,
            compressed_dim,
            no_mask_wrong,
            emb_path,
            train_limit,
        } => {
            let mut cfg = TrainConfig::new(mode.into(), ModelConfig::default_for(model.into()));
            cfg.objective.tau = tau;
            cfg.objective.alpha = alpha;
            cfg.objective.p = p;
            cfg.objective.mask_wrong = !no_mask_wrong;
            cfg.epochs = epochs;
            cfg.batch_size = batch_size;
            cfg.seed = seed;
            cfg.compressed_dim = compressed_dim;
            cfg.emb_path = emb_path;
            cfg.train_limit = train_limit;
            cfg.out_dir = Some(out);
            cfg.validate()?;
            let splits = Splits::load(&data_dir).context("loading MNIST")?;
            let exp = run_experiment::<f32>(&cfg, &splits, |r| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  dev {:.2}%  test {:.2}%  {:.1}s",
                    r.epoch, r.loss.total, r.dev_err, r.test_err, r.seconds
                )
            })?;
            match exp.record.headline() {
                Some(err) => println!("test_error={err}"),
                None => println!("test_error=nan"),
            }
        }
        Command::Similar { emb_file, k } => {
            let emb = formats::load_embedding(&emb_file)?;
            print!("{}", SimilarityTable::from_embedding(&emb, k).render());
        }
        Command::Heatmap { emb_file, csv, pgm } => {
            let emb = formats::load_embedding(&emb_file)?;
            write_heatmap(&emb, &csv, &pgm)?;
        }
        Command::Export { input, output } => export(&input, &output)?,
        Command::Eval { model, checkpoint, data_dir } => {
            let mut m = DualHeadModel::<f32>::init(ModelConfig::default_for(model.into()), 0)?;
            formats::load_checkpoint_into(&checkpoint, &mut m)?;
            let splits = Splits::load(&data_dir).context("loading MNIST")?;
            println!("dev_error={}", evaluate(&m, &splits.dev)?);
            println!("test_error={}", evaluate(&m, &splits.test)?);
        }
    }
    Ok(())
}

fn export(input: &Path, output: &Path) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let out = if bytes.starts_with(formats::EMBEDDING_MAGIC) {
        formats::embedding_to_csv(&formats::decode_embedding(&bytes)?).into_bytes()
    } else {
        let text = String::from_utf8(bytes).with_context(|| format!("{} is neither an embedding file nor CSV", input.display()))?;
        formats::encode_embedding(&formats::embedding_from_csv(&text)?)
    };
    fs::write(output, out).with_context(|| format!("writing {}", output.display()))
}
