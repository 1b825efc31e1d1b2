mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msit::config::RunConfig;
use msit::imageio::{read_ppm, write_pgm, write_ppm};
use msit::pipeline::{assr_forward_chunked, error_map, psnr, DEFAULT_CHUNK};
use msit::reparam::{count_records, param_count, wrap_model_with_rim};
use msit::snapshot::{model_from_snapshot, snapshot_of};
use msit::trainer::{cumulative_schedule, grad_check, grad_check_batch, train_micro};
use msit::{Error, Snapshot, SrModel64, StageTag, Tensor64};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "msit", version, about = "Arbitrary-scale image super-resolution")]
struct Cli {
    /// Write the run manifest here instead of stderr.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upsample a PPM image by a real-valued scale.
    Upsample(UpsampleArgs),
    /// Write a freshly initialised model snapshot.
    Init(InitArgs),
    /// Train a model on a directory of PPM images.
    Train(TrainArgs),
    /// Plain training, RIM wrapping, RIM training and folding.
    Cumulative(CumulativeArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Per-module parameter counts of a snapshot.
    Params(ParamsArgs),
}

#[derive(Args)]
struct UpsampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// `s` for both axes or `sh,sw`.
    #[arg(long)]
    scale: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires = "reference")]
    error_map: Option<PathBuf>,
    /// Ground truth for PSNR and the error map.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CHUNK)]
    chunk: usize,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Zero the decoder output layer so the model is the bilinear skip.
    #[arg(long)]
    zero_residual: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from this snapshot instead of a fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Loss history CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss: Option<PathBuf>,
}

#[derive(Args)]
struct CumulativeArgs {
    #[arg(long)]
    config1: PathBuf,
    #[arg(long)]
    config2: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Folded model; stage snapshots go to `<out>.stage1` and `<out>.stage2`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 8)]
    queries: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Count only the parameters the snapshot's stage trains.
    #[arg(long)]
    trainable: bool,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

const INPUT_ERROR: u8 = 2;
const CONSISTENCY_ERROR: u8 = 3;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format(_) | Error::Config { .. } | Error::InvalidArgument(_) => {
                INPUT_ERROR
            }
            Error::Shape(_) | Error::Consistency(_) | Error::NonFinite { .. } => CONSISTENCY_ERROR,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

fn input_failure(msg: String) -> Failure {
    Failure {
        code: INPUT_ERROR,
        msg,
    }
}

fn with_path(e: std::io::Error, path: &Path) -> Failure {
    input_failure(format!("{}: {e}", path.display()))
}

type CmdResult = Result<(), Failure>;

fn parse_scale(s: &str) -> Result<(f64, f64), Failure> {
    let parse = |v: &str| -> Result<f64, Failure> {
        match v.trim().parse::<f64>() {
            Ok(x) if x > 0.0 && x.is_finite() => Ok(x),
            _ => Err(input_failure(format!("bad scale `{s}`"))),
        }
    };
    match s.split_once(',') {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let v = parse(s)?;
            Ok((v, v))
        }
    }
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| with_path(e, path))?;
    Ok(RunConfig::parse(&text)?)
}

fn read_snapshot(path: &Path) -> Result<Snapshot, Failure> {
    let bytes = std::fs::read(path).map_err(|e| with_path(e, path))?;
    Ok(Snapshot::from_bytes(&bytes)?)
}

fn read_model(path: &Path) -> Result<SrModel64, Failure> {
    Ok(model_from_snapshot(&read_snapshot(path)?)?)
}

fn read_image(path: &Path) -> Result<Tensor64, Failure> {
    read_ppm(path).map_err(|e| match e {
        Error::Io(io) => with_path(io, path),
        other => input_failure(format!("{}: {other}", path.display())),
    })
}

fn write_snapshot(path: &Path, model: &SrModel64) -> CmdResult {
    std::fs::write(path, snapshot_of(model).to_bytes()).map_err(|e| with_path(e, path))
}

fn read_dataset(dir: &Path, m: &mut RunManifest) -> Result<Vec<Tensor64>, Failure> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| with_path(e, dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(input_failure(format!("no .ppm images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            m.input(p);
            read_image(p)
        })
        .collect()
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn upsample(a: &UpsampleArgs, m: &mut RunManifest) -> CmdResult {
    let (sh, sw) = parse_scale(&a.scale)?;
    m.input(&a.model);
    m.input(&a.input);
    let model = read_model(&a.model)?;
    let img = read_image(&a.input)?;
    let out = assr_forward_chunked(&model, &img, sh, sw, a.chunk)?;
    write_ppm(&a.out, &out)?;
    m.output(&a.out);
    if let Some(r) = &a.reference {
        m.input(r);
        let truth = read_image(r)?;
        let written = read_ppm::<f64>(&a.out)?;
        let db = psnr(&written, &truth, 1.0)?;
        println!("psnr_db={db}");
        if let Some(map_path) = &a.error_map {
            write_pgm(map_path, &error_map(&written, &truth)?)?;
            m.output(map_path);
        }
    }
    Ok(())
}

fn init(a: &InitArgs, m: &mut RunManifest) -> CmdResult {
    m.config(&a.config);
    let cfg = read_config(&a.config)?;
    m.seed(cfg.train.seed);
    let mut model = SrModel64::init(&cfg.model, cfg.train.seed)?;
    if a.zero_residual {
        model.zero_residual();
    }
    write_snapshot(&a.out, &model)?;
    m.output(&a.out);
    Ok(())
}

fn train(a: &TrainArgs, m: &mut RunManifest) -> CmdResult {
    m.config(&a.config);
    let cfg = read_config(&a.config)?;
    m.seed(cfg.train.seed);
    let images = read_dataset(&a.data, m)?;
    let mut model = match &a.init {
        Some(p) => {
            m.input(p);
            read_model(p)?
        }
        None => SrModel64::init(&cfg.model, cfg.train.seed)?,
    };
    if model.stage == StageTag::Stage1Plain && cfg.train.stage == StageTag::Stage2Rim {
        model = wrap_model_with_rim(&model)?;
    }
    let history = train_micro(&mut model, &images, &cfg.train)?;
    write_snapshot(&a.out, &model)?;
    m.output(&a.out);
    let loss_path = a.loss.clone().unwrap_or_else(|| suffixed(&a.out, ".loss.csv"));
    std::fs::write(&loss_path, history.to_csv()).map_err(|e| with_path(e, &loss_path))?;
    m.output(&loss_path);
    if let Some(last) = history.rows.last() {
        println!("final_loss={}", last.2);
    }
    Ok(())
}

fn cumulative(a: &CumulativeArgs, m: &mut RunManifest) -> CmdResult {
    m.config(&a.config1);
    m.config(&a.config2);
    let c1 = read_config(&a.config1)?;
    let c2 = read_config(&a.config2)?;
    let e1 = msit::config::model_entries(&c1.model);
    let e2 = msit::config::model_entries(&c2.model);
    if let Some(((key, _), _)) = e1.iter().zip(&e2).find(|(x, y)| x != y) {
        return Err(Error::Config {
            key: key.to_string(),
            msg: "model settings differ between the two stages".to_string(),
        }
        .into());
    }
    m.seed(c1.train.seed);
    let images = read_dataset(&a.data, m)?;
    let model = SrModel64::init(&c1.model, c1.train.seed)?;
    let res = cumulative_schedule(model, &images, &c1.train, &c2.train)?;
    let s1 = suffixed(&a.out, ".stage1");
    let s2 = suffixed(&a.out, ".stage2");
    write_snapshot(&s1, &res.stage1)?;
    write_snapshot(&s2, &res.stage2)?;
    write_snapshot(&a.out, &res.folded)?;
    for (p, h) in [(&s1, &res.history1), (&s2, &res.history2)] {
        let csv = suffixed(p, ".loss.csv");
        std::fs::write(&csv, h.to_csv()).map_err(|e| with_path(e, &csv))?;
        m.output(&csv);
    }
    m.output(&s1);
    m.output(&s2);
    m.output(&a.out);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, m: &mut RunManifest) -> CmdResult {
    m.config(&a.config);
    let cfg = read_config(&a.config)?;
    m.seed(cfg.train.seed);
    let (mut model, batch) =
        grad_check_batch(&cfg.model, msit::pipeline::MIN_INPUT, a.queries, cfg.train.seed)?;
    if cfg.train.stage == StageTag::Stage2Rim {
        model = wrap_model_with_rim(&model)?;
    }
    let report = grad_check(&model, &batch, a.eps, a.samples, cfg.train.seed)?;
    for r in &report.modules {
        println!("{:<10} checked={:<4} max_rel_err={:e}", r.module, r.checked, r.max_rel_err);
    }
    println!("max_rel_err={:e}", report.max_rel_err);
    if report.max_rel_err > a.tolerance {
        return Err(Failure {
            code: CONSISTENCY_ERROR,
            msg: format!(
                "gradient check failed: {:e} > {:e}",
                report.max_rel_err, a.tolerance
            ),
        });
    }
    Ok(())
}

fn params(a: &ParamsArgs, m: &mut RunManifest) -> CmdResult {
    m.input(&a.model);
    let snap = read_snapshot(&a.model)?;
    let report = if snap.has_model() {
        param_count(&model_from_snapshot::<f64>(&snap)?, a.trainable)
    } else if a.trainable {
        return Err(input_failure(
            "--trainable needs a full model snapshot".to_string(),
        ));
    } else {
        count_records(snap.records.iter().map(|(n, t)| (n.as_str(), t.len())))
    };
    println!("{report}");
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let mut m = RunManifest::new(match cli.command {
        Command::Upsample(_) => "upsample",
        Command::Init(_) => "init",
        Command::Train(_) => "train",
        Command::Cumulative(_) => "cumulative",
        Command::Gradcheck(_) => "gradcheck",
        Command::Params(_) => "params",
    });
    match &cli.command {
        Command::Upsample(a) => upsample(a, &mut m),
        Command::Init(a) => init(a, &mut m),
        Command::Train(a) => train(a, &mut m),
        Command::Cumulative(a) => cumulative(a, &mut m),
        Command::Gradcheck(a) => gradcheck(a, &mut m),
        Command::Params(a) => params(a, &mut m),
    }?;
    m.emit(cli.manifest.as_deref())
        .map_err(|e| input_failure(format!("manifest: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
