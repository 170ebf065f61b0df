use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use bevtrack::check::gradcheck_suite;
use bevtrack::config::{default_toml, generate_dataset, RunConfig};
use bevtrack::data::{load_manifest, load_sequence, Manifest, Sequence};
use bevtrack::eval::{evaluate, EvalReport};
use bevtrack::model::Network;
use bevtrack::tensor::fault::{self, FaultOp};
use bevtrack::tracker::{boxes, read_predictions, track_sequence, write_predictions, TrackState, Trained};
use bevtrack::train::{load_params, load_state, save_state, Trainer, METRICS_FILE, MODEL_FILE};
use bevtrack::Error;
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

#[derive(Parser)]
#[command(name = "bevtrack", version, about = "BEV motion tracking on synthetic LiDAR sequences")]
struct Cli {
    /// Worker threads; defaults to every core.
    #[arg(long, global = true, env = "BEVTRACK_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its manifest.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides gen.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model on the manifest's train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Continue from the checkpoint in --out.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Track every sequence of a split and write one prediction file each.
    Track {
        #[arg(long)]
        config: PathBuf,
        /// Training output directory or checkpoint file.
        #[arg(long, required_unless_present = "oracle")]
        model: Option<PathBuf>,
        /// Emit ground-truth boxes instead of running a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `track`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Check every backward pass against an oracle or finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one op's backward pass: conv2d, sparse_conv, linear or max_pool.
        #[arg(long, env = "BEVTRACK_FAULT")]
        fault: Option<String>,
    },
    /// Write the default configuration.
    ConfigInit {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn files(self, m: &Manifest) -> &[PathBuf] {
        match self {
            SplitArg::Train => &m.train,
            SplitArg::Val => &m.val,
            SplitArg::Test => &m.test,
        }
    }
}

enum Failure {
    Lib(Error),
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numeric(_) => 2,
            Failure::Lib(e) => match e {
                Error::Config(_) | Error::InvalidParam { .. } | Error::WouldOverwrite(_) | Error::InvalidVoxelSpec(_) => 1,
                Error::NonFinite(_) => 2,
                Error::Io(_)
                | Error::Parse { .. }
                | Error::Truncated { .. }
                | Error::Version { .. }
                | Error::Checkpoint(_)
                | Error::LengthMismatch(..) => 3,
                _ => 2,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::Usage(m) | Failure::Numeric(m) => m.clone(),
        }
    }
}

type CliResult = Result<(), Failure>;

static CONFIG_HASH: OnceLock<String> = OnceLock::new();

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| match CONFIG_HASH.get() {
            Some(h) => writeln!(buf, "[{} cfg={}] {}", rec.level(), &h[..12], rec.args()),
            None => writeln!(buf, "[{}] {}", rec.level(), rec.args()),
        })
        .init();
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Failure::Usage(format!("cannot read config {}: {io}", path.display())),
        other => Failure::Lib(other),
    })?;
    let _ = CONFIG_HASH.set(cfg.hash());
    Ok(cfg)
}

fn load_split(cfg: &RunConfig, split: SplitArg) -> Result<Vec<(PathBuf, Sequence)>, Failure> {
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let files = split.files(&manifest);
    if files.is_empty() {
        return Err(Failure::Usage("the requested split has no sequences".into()));
    }
    files
        .iter()
        .map(|p| Ok((p.clone(), load_sequence(p)?)))
        .collect()
}

fn prediction_name(seq_path: &Path) -> PathBuf {
    PathBuf::from(seq_path.file_name().expect("sequence paths name a file"))
}

fn refuse_overwrite(path: &Path, force: bool) -> CliResult {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()).into());
    }
    Ok(())
}

fn cmd_gen(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf, force: bool) -> CliResult {
    let mut cfg = match &config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.gen.seed = s;
    }
    let start = Instant::now();
    let m = generate_dataset(&cfg.gen, &out, force)?;
    info!(
        "wrote {} train, {} val, {} test sequences to {} in {:.1}s",
        m.train.len(),
        m.val.len(),
        m.test.len(),
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_train(config: PathBuf, seed: Option<u64>, out: PathBuf, force: bool, resume: bool) -> CliResult {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let hash = cfg.hash();
    let _ = CONFIG_HASH.set(hash.clone());
    let seqs: Vec<Sequence> = load_split(&cfg, SplitArg::Train)?.into_iter().map(|(_, s)| s).collect();
    let trainer = Trainer::new(&cfg.model, cfg.train.clone(), cfg.loss, cfg.augment, &seqs, hash.clone())?;
    let mut state = if resume {
        let st = load_state(&out, &trainer.net, &hash)?;
        info!("resuming after epoch {}", st.epochs_done);
        st
    } else {
        refuse_overwrite(&out.join(MODEL_FILE), force)?;
        refuse_overwrite(&out.join(METRICS_FILE), force)?;
        fs::create_dir_all(&out).map_err(Error::from)?;
        if force {
            let _ = fs::remove_file(out.join(METRICS_FILE));
        }
        let st = trainer.init_state()?;
        save_state(&out, &st, &hash)?;
        st
    };
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(Error::from)?;
    info!(
        "training on {} sequences for {} epochs, batch {}",
        seqs.len(),
        cfg.train.epochs,
        cfg.train.batch_size
    );
    trainer.fit(&mut state, Some(&out), |m| {
        info!(
            "epoch {} loss {:.5} ({} batches, {:.1}s)",
            m.epoch, m.train_loss, m.batches, m.seconds
        )
    })?;
    info!("model written to {}", out.join(MODEL_FILE).display());
    Ok(())
}

fn cmd_track(config: PathBuf, model: Option<PathBuf>, oracle: bool, split: SplitArg, out: PathBuf, force: bool) -> CliResult {
    let cfg = load_config(&config)?;
    let seqs = load_split(&cfg, split)?;
    fs::create_dir_all(&out).map_err(Error::from)?;
    let loaded = match (&model, oracle) {
        (_, true) => None,
        (Some(p), false) => {
            let ckpt = if p.is_dir() { p.join(MODEL_FILE) } else { p.clone() };
            let (net, _) = Network::new(&cfg.model, 0)?;
            let params = load_params(&ckpt)?;
            net.check_params(&params)?;
            Some((net, params))
        }
        (None, false) => return Err(Failure::Usage("--model is required unless --oracle is set".into())),
    };
    for (path, seq) in &seqs {
        let target = out.join(prediction_name(path));
        refuse_overwrite(&target, force)?;
        let states = match &loaded {
            Some((net, params)) => {
                let model = Trained { net, params };
                track_sequence(seq, &model, &cfg.model.voxel)?
            }
            None => seq
                .frames
                .iter()
                .enumerate()
                .map(|(t, f)| TrackState {
                    frame: t,
                    bx: f.gt,
                    sigma: [0.0; 4],
                    coasted: false,
                })
                .collect(),
        };
        let coasted = states.iter().filter(|s| s.coasted).count();
        if coasted > 0 {
            warn!("{}: held the box on {coasted} empty frames", path.display());
        }
        let mut buf = Vec::new();
        write_predictions(&mut buf, &states)?;
        fs::write(&target, buf).map_err(Error::from)?;
    }
    info!("wrote {} prediction files to {}", seqs.len(), out.display());
    Ok(())
}

fn cmd_eval(config: PathBuf, pred: PathBuf, split: SplitArg, out: Option<PathBuf>, force: bool) -> CliResult {
    let cfg = load_config(&config)?;
    if let Some(o) = &out {
        refuse_overwrite(o, force)?;
    }
    let seqs = load_split(&cfg, split)?;
    let mut named = Vec::with_capacity(seqs.len());
    for (path, seq) in &seqs {
        let name = prediction_name(path);
        let text = fs::read_to_string(pred.join(&name)).map_err(Error::from)?;
        let states = read_predictions(&text)?;
        named.push((name.display().to_string(), evaluate(&boxes(&states), &seq.gt_boxes(), cfg.eval.distance)?));
    }
    let report = EvalReport::build(&named, cfg.eval.distance)?;
    let a = &report.aggregate;
    info!(
        "{} sequences, {} frames: success {:.4} precision {:.4} mean center error {:.3} m",
        named.len(),
        a.frames,
        a.success,
        a.precision,
        a.mean_center_error
    );
    match out {
        Some(o) => fs::write(&o, report.to_json()).map_err(Error::from)?,
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, fault_name: Option<String>) -> CliResult {
    if let Some(name) = fault_name.as_deref().filter(|n| !n.is_empty()) {
        let op = FaultOp::parse(name)
            .ok_or_else(|| Failure::Usage(format!("unknown fault op `{name}`; expected conv2d, sparse_conv, linear or max_pool")))?;
        warn!("injecting a backward fault into {name}");
        fault::inject(op);
    }
    let start = Instant::now();
    let results = gradcheck_suite(seed);
    fault::clear();
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    info!(
        "{} checks, {} failed, {:.1}s",
        results.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        return Ok(());
    }
    let mut ops: Vec<&str> = failed.iter().map(|r| r.op).collect();
    ops.dedup();
    Err(Failure::Numeric(format!("gradient check failed for ops: {}", ops.join(", "))))
}

fn cmd_config_init(out: PathBuf, force: bool) -> CliResult {
    refuse_overwrite(&out, force)?;
    fs::write(&out, default_toml()).map_err(Error::from)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::Gen { config, seed, out, force } => cmd_gen(config, seed, out, force),
        Cmd::Train {
            config,
            seed,
            out,
            force,
            resume,
        } => cmd_train(config, seed, out, force, resume),
        Cmd::Track {
            config,
            model,
            oracle,
            split,
            out,
            force,
        } => cmd_track(config, model, oracle, split, out, force),
        Cmd::Eval {
            config,
            pred,
            split,
            out,
            force,
        } => cmd_eval(config, pred, split, out, force),
        Cmd::Gradcheck { seed, fault } => cmd_gradcheck(seed, fault),
        Cmd::ConfigInit { out, force } => cmd_config_init(out, force),
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
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
