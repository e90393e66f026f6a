use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use deformreg::augment::{build_augmented_set, AugmentMode, LevelMix, LevelTable};
use deformreg::evalstats::{evaluate_pairs, Binarize, EvalConfig, EvalReport};
use deformreg::field::{upsample_field, warp_bilinear, DisplacementField};
use deformreg::imagecore::{load_gray, resize_bilinear, save_pgm, GrayConversion, GrayImage};
use deformreg::network::checkpoint::Checkpoint;
use deformreg::pipeline::dataset::{read_dataset, read_manifest, write_dataset, write_fields, RecordMeta};
use deformreg::pipeline::{register_direct, register_with_model, split_dataset, train, DirectConfig, PairRecord, TrainConfig};
use deformreg::synthdata::{generate_benchmark_set, Artifact, BenchmarkConfig};
use deformreg::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "deformreg", version, about = "Deformable multi-modal 2D image registration")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom benchmark with ground-truth fields.
    Synth(SynthArgs),
    /// Expand a pair set with elastic deformations.
    Augment(AugmentArgs),
    /// Train the registration network from a JSON config.
    Train(TrainArgs),
    /// Register one image pair, or every pair of a set.
    Register(RegisterArgs),
    /// Score fields against their pairs: Dice, MI, Mann-Whitney.
    Evaluate(EvaluateArgs),
    /// Re-export a JSON report as CSV tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    n: usize,
    /// Image size as WxH.
    #[arg(long, default_value = "128x96", value_parser = parse_size)]
    size: (usize, usize),
    /// Level weights as low:medium:high.
    #[arg(long, default_value = "40:40:20", value_parser = parse_mix)]
    levels: LevelMix,
    /// none, tears:COUNT:WIDTH or holes:COUNT:RADIUS.
    #[arg(long, default_value = "none", value_parser = parse_artifact)]
    artifact: Artifact,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AugmentKind {
    Unsupervised,
    Supervised,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    per_pair: usize,
    #[arg(long, value_enum, default_value = "unsupervised")]
    mode: AugmentKind,
    #[arg(long, default_value = "40:40:20", value_parser = parse_mix)]
    levels: LevelMix,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written at the end of training.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the held-out test records here as a pair set.
    #[arg(long)]
    test_set: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Gray {
    Luma,
    Saturation,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("method").required(true).args(["model", "direct"])))]
#[command(group(clap::ArgGroup::new("input").required(true).args(["fixed", "pairs"])))]
struct RegisterArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Optimise each field directly instead of using a network.
    #[arg(long)]
    direct: bool,
    #[arg(long, requires = "moving")]
    fixed: Option<PathBuf>,
    #[arg(long, requires = "fixed")]
    moving: Option<PathBuf>,
    /// Register every pair of this set; `--out` is then a directory.
    #[arg(long, conflicts_with_all = ["fixed", "moving", "warped"])]
    pairs: Option<PathBuf>,
    /// Field file (single pair) or field directory (`--pairs`).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    warped: Option<PathBuf>,
    /// Working resolution as WxH. Defaults to the input size, rounded
    /// down to multiples of 4 for the network.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Upsample the field to the input size before writing.
    #[arg(long)]
    full_res: bool,
    /// Grayscale conversion for colour inputs.
    #[arg(long, value_enum, default_value = "luma")]
    gray: Gray,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    fields: PathBuf,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    /// otsu or fixed:T.
    #[arg(long, default_value = "otsu", value_parser = parse_binarize)]
    binarize: Binarize,
    /// CSV report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON report from `evaluate`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Long-format `metric,stage,id,value` table for violin plots.
    #[arg(long)]
    violin: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn parse_mix(s: &str) -> std::result::Result<LevelMix, String> {
    LevelMix::parse(s).map_err(|e| e.to_string())
}

fn parse_binarize(s: &str) -> std::result::Result<Binarize, String> {
    match s.split_once(':') {
        None if s == "otsu" => Ok(Binarize::Otsu),
        Some(("fixed", t)) => t
            .parse::<f64>()
            .ok()
            .filter(|t| (0.0..=1.0).contains(t))
            .map(Binarize::Fixed)
            .ok_or_else(|| format!("threshold must be a number in [0, 1], got {t:?}")),
        _ => Err(format!("expected otsu or fixed:T, got {s:?}")),
    }
}

fn parse_artifact(s: &str) -> std::result::Result<Artifact, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("expected none, tears:COUNT:WIDTH or holes:COUNT:RADIUS, got {s:?}");
    let nums = || -> std::result::Result<(usize, f64), String> {
        Ok((parts[1].parse().map_err(|_| bad())?, parts[2].parse().map_err(|_| bad())?))
    };
    match parts.as_slice() {
        ["none"] => Ok(Artifact::None),
        ["tears", _, _] => nums().map(|(count, width)| Artifact::Tears { count, width }),
        ["holes", _, _] => nums().map(|(count, radius)| Artifact::Holes { count, radius }),
        _ => Err(bad()),
    }
}

fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let cfg = BenchmarkConfig {
        n: a.n,
        width: a.size.0,
        height: a.size.1,
        mix: a.levels,
        levels: LevelTable::default(),
        artifact: a.artifact,
        seed,
    };
    let set = generate_benchmark_set(&cfg)?;
    let meta: Vec<RecordMeta> = set
        .iter()
        .map(|e| RecordMeta {
            level: Some(e.level),
            params: serde_json::to_value(&e.params).expect("phantom params serialise"),
        })
        .collect();
    let records: Vec<PairRecord> = set.into_iter().map(|e| e.record).collect();
    write_dataset(&a.out, &records, &meta)?;
    eprintln!("wrote {} pairs to {}", records.len(), a.out.display());
    Ok(())
}

fn augment(a: &AugmentArgs, seed: u64) -> Result<()> {
    let pairs = read_dataset(&a.input)?;
    let mode = match a.mode {
        AugmentKind::Unsupervised => AugmentMode::Unsupervised,
        AugmentKind::Supervised => AugmentMode::Supervised,
    };
    let out = build_augmented_set(&pairs, a.per_pair, mode, &LevelTable::default(), &a.levels, seed)?;
    let meta: Vec<RecordMeta> = out
        .iter()
        .map(|(_, info)| RecordMeta {
            level: Some(info.level),
            params: serde_json::to_value(info.params).expect("deform params serialise"),
        })
        .collect();
    let records: Vec<PairRecord> = out.into_iter().map(|(r, _)| r).collect();
    write_dataset(&a.out, &records, &meta)?;
    eprintln!("wrote {} pairs to {}", records.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let records = read_dataset(&a.data)?;
    let (tr, va, te) = split_dataset(&records, cfg.split, cfg.seed)?;
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let out = train(&tr, &va, &cfg, resume.as_ref())?;
    out.checkpoint().save(&a.out)?;
    if let Some(log) = &a.log {
        out.log.write_csv(log)?;
    }
    if let Some(dir) = &a.test_set {
        write_dataset(dir, &te, &[])?;
    }
    if let Some(last) = out.log.records.last() {
        eprintln!(
            "epoch {}: train loss {:.6}, val Dice median {:.4}",
            last.epoch, last.train_loss, last.val_dice_median
        );
    }
    Ok(())
}

enum Registrar {
    Model(Box<Checkpoint>),
    Direct(DirectConfig),
}

impl Registrar {
    fn working_size(&self, dims: (usize, usize), size: Option<(usize, usize)>) -> Result<(usize, usize)> {
        let (w, h) = size.unwrap_or(dims);
        match self {
            Registrar::Model(_) => {
                let (w4, h4) = (w / 4 * 4, h / 4 * 4);
                if w4 == 0 || h4 == 0 {
                    return Err(Error::Param(format!("{w}x{h} is too small for the network")));
                }
                if size.is_some() && (w4, h4) != (w, h) {
                    return Err(Error::Param(format!("--size {w}x{h} must be a multiple of 4")));
                }
                Ok((w4, h4))
            }
            Registrar::Direct(_) => Ok((w, h)),
        }
    }

    fn field(&self, fixed: &GrayImage, moving: &GrayImage) -> Result<DisplacementField> {
        match self {
            Registrar::Model(ck) => register_with_model(&ck.params, fixed, moving),
            Registrar::Direct(cfg) => Ok(register_direct(fixed, moving, cfg)?.field),
        }
    }

    /// Field and warped moving image, at working or input resolution.
    fn register(&self, fixed: &GrayImage, moving: &GrayImage, size: Option<(usize, usize)>, full_res: bool) -> Result<(DisplacementField, GrayImage)> {
        if fixed.dims() != moving.dims() {
            return Err(Error::Data(format!(
                "fixed is {:?} but moving is {:?}",
                fixed.dims(),
                moving.dims()
            )));
        }
        let dims = fixed.dims();
        let (w, h) = self.working_size(dims, size)?;
        let resize = |img: &GrayImage| if (w, h) == dims { Ok(img.clone()) } else { resize_bilinear(img, w, h) };
        let (f, m) = (resize(fixed)?, resize(moving)?);
        let phi = self.field(&f, &m)?;
        if full_res && (w, h) != dims {
            let up = upsample_field(&phi, dims.0, dims.1)?;
            let warped = warp_bilinear(moving, &up)?;
            Ok((up, warped))
        } else {
            let warped = warp_bilinear(&m, &phi)?;
            Ok((phi, warped))
        }
    }
}

fn register(a: &RegisterArgs) -> Result<()> {
    let registrar = match &a.model {
        Some(path) => Registrar::Model(Box::new(Checkpoint::load(path)?)),
        None => Registrar::Direct(DirectConfig::default()),
    };
    if let Some(dir) = &a.pairs {
        let pairs = read_dataset(dir)?;
        let fields = pairs
            .iter()
            .map(|p| Ok(registrar.register(&p.fixed, &p.moving, a.size, a.full_res)?.0))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
        write_fields(&a.out, &ids, &fields)?;
        eprintln!("wrote {} fields to {}", fields.len(), a.out.display());
        return Ok(());
    }
    let convert = match a.gray {
        Gray::Luma => GrayConversion::default(),
        Gray::Saturation => GrayConversion::Saturation,
    };
    let (fixed_path, moving_path) = (a.fixed.as_ref().unwrap(), a.moving.as_ref().unwrap());
    let fixed = load_gray(fixed_path, convert)?;
    let moving = load_gray(moving_path, convert)?;
    let (phi, warped) = registrar.register(&fixed, &moving, a.size, a.full_res)?;
    phi.write_ddf(&a.out)?;
    if let Some(path) = &a.warped {
        save_pgm(&warped, path)?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let pairs = read_dataset(&a.pairs)?;
    let ids: Vec<String> = read_manifest(&a.pairs)?.into_iter().map(|e| e.id).collect();
    let fields = deformreg::pipeline::dataset::read_fields(&a.fields, &ids)?;
    let cfg = EvalConfig {
        bins: a.bins,
        binarize: a.binarize,
    };
    let report = evaluate_pairs(&pairs, &fields, &cfg)?;
    write_text(&a.out, &report.to_csv()?)?;
    if let Some(json) = &a.json {
        write_text(json, &report.to_json()?)?;
    }
    if let (Some(before), Some(after)) = (report.summary_of("dice_before"), report.summary_of("dice_after")) {
        eprintln!("median Dice {:.4} -> {:.4}", before.median, after.median);
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let report = EvalReport::from_json(&text)?;
    write_text(&a.violin, &report.to_violin_csv()?)?;
    if let Some(csv) = &a.csv {
        write_text(csv, &report.to_csv()?)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli, seed_given: bool) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Param(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Augment(a) => augment(a, cli.seed),
        Command::Train(a) => train_cmd(a, seed_given.then_some(cli.seed)),
        Command::Register(a) => register(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    // the training config carries its own seed unless one is given here
    let seed_given = args.iter().any(|a| a == "--seed" || a.starts_with("--seed="));
    match run(cli, seed_given) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
