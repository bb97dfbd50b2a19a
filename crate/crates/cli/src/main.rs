use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aegis_core::config::RunConfig;
use aegis_core::dataset::{self, read_keyframe, Split};
use aegis_core::embed::{describe, EmbeddingNet};
use aegis_core::pipeline::{build_database, of_split, train_embedding, train_segmentation};
use aegis_core::retrieval::{evaluate_database, DescriptorDatabase};
use aegis_core::semantic::SemanticNet;
use aegis_core::suite::gradient_suite;
use aegis_core::{Checkpoint, Error};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aegis", version, about = "Indoor place recognition from RGB point clouds")]
struct Cli {
    /// Run configuration (`key = value` lines); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the segmentation network on the train split.
    TrainSeg {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the embedding on the train split with the encoder frozen.
    TrainEmbed {
        dataset: PathBuf,
        seg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe every keyframe of a split into a database file.
    BuildDb {
        dataset: PathBuf,
        seg: PathBuf,
        embed: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the nearest database entries of one keyframe file.
    Query {
        db: PathBuf,
        seg: PathBuf,
        embed: PathBuf,
        keyframe: PathBuf,
        /// Defaults to the configured `top_k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Leave-self-out Recall@k over a database.
    Eval {
        db: PathBuf,
        /// Also write the report line here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every operator and composed layer.
    Gradcheck,
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
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_semantic(cfg: &RunConfig, path: &Path) -> Result<SemanticNet, Error> {
    SemanticNet::from_checkpoint(cfg.encoder_config(), &Checkpoint::load(path)?)
}

fn load_embedding(cfg: &RunConfig, path: &Path) -> Result<EmbeddingNet, Error> {
    EmbeddingNet::from_checkpoint(cfg.embed_config(), &Checkpoint::load(path)?)
}

/// Metrics log next to an output file: `<out>.log`.
fn metrics_log(out: &Path, header: &str) -> Result<BufWriter<File>, Error> {
    let mut name = out.as_os_str().to_owned();
    name.push(".log");
    let mut w = BufWriter::new(File::create(PathBuf::from(name))?);
    writeln!(w, "{header}")?;
    Ok(w)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = resolve(&cli)?;
    eprintln!("config {}", cfg.hash());
    match &cli.command {
        Command::GenData { out } => {
            let kfs = dataset::generate_to(&cfg.scene_spec(), out)?;
            println!("wrote {} keyframes to {}", kfs.len(), out.display());
        }
        Command::TrainSeg { dataset, out } => {
            let kfs = dataset::load(dataset, Some(Split::Train))?;
            let mut log = metrics_log(out, "epoch,loss,accuracy")?;
            let mut io = Ok(());
            let (net, _) = train_segmentation(&cfg, &of_split(&kfs, Split::Train), |e| {
                println!("{e}");
                if io.is_ok() {
                    io = writeln!(log, "{e}");
                }
            })?;
            io?;
            log.flush()?;
            net.to_checkpoint()?.save(out)?;
        }
        Command::TrainEmbed { dataset, seg, out } => {
            let net = load_semantic(&cfg, seg)?;
            let kfs = dataset::load(dataset, Some(Split::Train))?;
            let mut log = metrics_log(out, "epoch,mean_loss,active_hinge_rate")?;
            let mut io = Ok(());
            let (embed, _) = train_embedding(&cfg, &net.encoder, &of_split(&kfs, Split::Train), |e, _| {
                println!("{e}");
                if io.is_ok() {
                    io = writeln!(log, "{e}");
                }
            })?;
            io?;
            log.flush()?;
            embed.to_checkpoint()?.save(out)?;
        }
        Command::BuildDb { dataset, seg, embed, split, out } => {
            let split = Split::from(*split);
            let net = load_semantic(&cfg, seg)?;
            let embed = load_embedding(&cfg, embed)?;
            let kfs = dataset::load(dataset, Some(split))?;
            if kfs.is_empty() {
                return Err(Error::Usage(format!("split {split} of {} is empty", dataset.display())));
            }
            let db = build_database(&net.encoder, &embed, &of_split(&kfs, split), cfg.threads)?;
            db.save(out)?;
            println!("{} descriptors from split {split}", db.len());
        }
        Command::Query { db, seg, embed, keyframe, k } => {
            let db = DescriptorDatabase::load(db)?;
            let net = load_semantic(&cfg, seg)?;
            let embed = load_embedding(&cfg, embed)?;
            let (_, cloud) = read_keyframe(keyframe)?;
            let d = describe(&net.encoder, &embed, &cloud)?;
            for (id, dist) in db.query_knn(d.as_slice(), k.unwrap_or(cfg.top_k))? {
                println!("{id} {dist:.6}");
            }
        }
        Command::Eval { db, out } => {
            let db = DescriptorDatabase::load(db)?;
            let report = evaluate_database(&db, &cfg.thresholds())?;
            println!("{report}");
            println!("{}", report.line());
            if let Some(out) = out {
                std::fs::write(out, format!("R@1,R@2,R@3,n\n{}\n", report.line()))?;
            }
        }
        Command::Gradcheck => {
            let cases = gradient_suite(cfg.seed)?;
            let mut failed = 0;
            for c in &cases {
                let verdict = if c.passed() { "pass" } else { "FAIL" };
                println!("{verdict} {:<16} max rel error {:.3e}", c.name, c.report.max_rel_error());
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                eprintln!("{failed} of {} gradient checks failed", cases.len());
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
