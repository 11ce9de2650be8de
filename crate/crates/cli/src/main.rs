//! `osdmamba` command line: synthetic data, training, evaluation,
//! verification suites and scan benchmarks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use osdmamba::checkpoint::{Checkpoint, EXTENSION};
use osdmamba::convssm::{self, ConvSsmParameters, ConvState};
use osdmamba::data::{self, SceneConfig, CLASS_COUNT, CLASS_NAMES};
use osdmamba::kv;
use osdmamba::net::{count_flops, count_params, Network, NetworkConfig};
use osdmamba::train::{self, TrainConfig, Trainer};
use osdmamba::verify::{self, Suite};
use osdmamba::{parallel, Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_VERIFY: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;

fn build_identity() -> &'static str {
    static ID: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    ID.get_or_init(|| {
        format!(
            "{} (parallel: {}, profile: {})",
            env!("CARGO_PKG_VERSION"),
            if parallel::enabled() { "on" } else { "off" },
            if cfg!(debug_assertions) {
                "debug"
            } else {
                "release"
            }
        )
    })
}

#[derive(Parser, Debug)]
#[command(name = "osdmamba", version = build_identity(), about = "Selective-scan segmentation of oil spills in SAR-like scenes")]
struct Cli {
    /// Cap on worker threads; 1 runs everything on one thread.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic image/mask PGM pairs.
    Synth(SynthArgs),
    /// Train a network and write a checkpoint plus a CSV log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run property suites.
    Verify(VerifyArgs),
    /// Time sequential and parallel ConvSSM scans.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SceneArgs {
    /// Scene size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    /// Mean share of oil pixels.
    #[arg(long = "spill-frac")]
    spill_frac: Option<f64>,
    /// Relative speckle standard deviation.
    #[arg(long)]
    speckle: Option<f64>,
}

impl SceneArgs {
    fn scene(&self, seed: u64) -> SceneConfig {
        let d = SceneConfig::default();
        SceneConfig {
            height: self.size.0,
            width: self.size.1,
            spill_fraction: self.spill_frac.unwrap_or(d.spill_fraction),
            speckle: self.speckle.unwrap_or(d.speckle),
            seed,
            ..d
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of name.pgm / name_mask.pgm pairs.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    data: Option<PathBuf>,
    /// Train on this many generated scenes instead of a directory.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Flat key=value file with network and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long, default_value = "model.osdm")]
    out: PathBuf,
    /// Metrics log; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Seed for initialization, shuffling and synthetic scenes.
    #[arg(long)]
    seed: Option<u64>,
    /// Channel width C of the first stage.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    holdout: Option<f64>,
    /// Cosine learning-rate decay over the run.
    #[arg(long)]
    cosine: bool,
    #[arg(long = "no-deep-supervision")]
    no_deep_supervision: bool,
    #[arg(long = "no-decoder-convssm")]
    no_decoder_convssm: bool,
    /// Replace the heavy high-resolution decoder blocks with light ones.
    #[arg(long = "light-decoder")]
    light_decoder: bool,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    data: Option<PathBuf>,
    /// Evaluate on generated scenes drawn with --seed.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write one predicted-mask PGM per input here.
    #[arg(long = "masks-out")]
    masks_out: Option<PathBuf>,
    /// Metrics CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = parse_suite)]
    suite: Suite,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value = "convssm")]
    op: String,
    /// Sequence lengths.
    #[arg(long = "L", value_delimiter = ',', default_value = "8,16,32,64,128")]
    lengths: Vec<usize>,
    /// State channels.
    #[arg(long = "P", value_delimiter = ',', default_value = "2,4,8")]
    states: Vec<usize>,
    /// Input and output channels.
    #[arg(long = "U", default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Grid side H = W.
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad size `{s}`: {e}"))
    };
    let (h, w) = (p(h)?, p(w)?);
    if h == 0 || w == 0 {
        return Err(format!("size must be positive, got `{s}`"));
    }
    Ok((h, w))
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } | Error::NonFiniteGradient(_) => EXIT_DIVERGED,
            Error::Data { .. } | Error::Format(_) | Error::Version { .. } | Error::Io(_) => {
                EXIT_DATA
            }
            Error::Contract(_) | Error::Dimension { .. } | Error::Numeric(_) => EXIT_USAGE,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_DATA,
        msg: format!("{}: {e}", path.display()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        parallel::set_workers(n);
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn class_summary(samples: &[data::Sample]) -> String {
    let mut counts = vec![0u64; CLASS_COUNT];
    for s in samples {
        for (c, n) in counts.iter_mut().zip(s.mask.histogram(CLASS_COUNT)) {
            *c += n;
        }
    }
    let total: u64 = counts.iter().sum::<u64>().max(1);
    let mut out = String::from("class distribution:\n");
    for (name, n) in CLASS_NAMES.iter().zip(&counts) {
        let _ = writeln!(
            out,
            "  {name:<12}{n:>10}  {:>7.3}%",
            100.0 * *n as f64 / total as f64
        );
    }
    out
}

fn synth(a: SynthArgs) -> CliResult {
    let scene = a.scene.scene(a.seed);
    scene.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| io_failure(&a.out, e))?;
    if a.count == 0 {
        log::warn!("--count 0: nothing to write");
        return Ok(());
    }
    let samples = data::synthetic(a.count, &scene)?;
    for s in &samples {
        data::write_sample(&a.out, s)?;
    }
    println!(
        "wrote {} image/mask pairs to {}",
        samples.len(),
        a.out.display()
    );
    print!("{}", class_summary(&samples));
    Ok(())
}

/// Resolved network and training configuration: defaults, then the file,
/// then `--set` pairs, then dedicated flags.
fn resolve_config(a: &TrainArgs) -> Result<(NetworkConfig, TrainConfig), Failure> {
    let mut net = NetworkConfig::desk();
    let mut tc = TrainConfig::default();
    let mut apply = |k: &str, v: &str, origin: &str| -> CliResult {
        let owned = net
            .set(k, v)
            .map_err(|e| Failure::usage(format!("{origin}: {e}")))?
            || tc
                .set(k, v)
                .map_err(|e| Failure::usage(format!("{origin}: {e}")))?;
        if owned {
            Ok(())
        } else {
            Err(Failure::usage(format!(
                "{origin}: unknown configuration key `{k}`"
            )))
        }
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let pairs = kv::parse_lines(&text)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        for (k, v) in pairs {
            apply(&k, &v, &path.display().to_string())?;
        }
    }
    for pair in &a.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        apply(k.trim(), v.trim(), "--set")?;
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.weight_decay {
        tc.weight_decay = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.holdout {
        tc.holdout = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
        net.seed = v;
    }
    if let Some(v) = a.width {
        net.width = v;
    }
    if a.cosine {
        tc.cosine = true;
    }
    if a.no_deep_supervision {
        net.deep_supervision = false;
    }
    if a.no_decoder_convssm {
        net.decoder_convssm = false;
    }
    if a.light_decoder {
        net.heavy_decoder = false;
    }
    net.validate().map_err(|e| Failure::usage(e.to_string()))?;
    tc.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok((net, tc))
}

fn load_samples(
    dir: Option<&Path>,
    synthetic: Option<usize>,
    scene: SceneConfig,
) -> Result<Vec<data::Sample>, Failure> {
    match (dir, synthetic) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(Failure::usage(format!(
                    "data directory {} does not exist",
                    dir.display()
                )));
            }
            Ok(data::load_directory(dir, CLASS_COUNT)?)
        }
        (None, Some(n)) => Ok(data::synthetic(n, &scene)?),
        (None, None) => Err(Failure::usage("need --data DIR or --synthetic N")),
    }
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let (net_cfg, tc) = resolve_config(&a)?;
    let pairs: Vec<(&str, String)> = net_cfg
        .to_pairs()
        .into_iter()
        .chain(tc.to_pairs())
        .collect();
    println!("# resolved configuration\n{}", kv::render(&pairs));
    let samples = load_samples(a.data.as_deref(), a.synthetic, a.scene.scene(tc.seed))?;
    if samples.is_empty() {
        return Err(Failure::usage("dataset is empty"));
    }
    let (train_set, eval_set) = data::split(samples, tc.holdout, tc.seed);
    if train_set.is_empty() {
        return Err(Failure::usage("holdout leaves no training samples"));
    }
    println!(
        "train samples {}, held out {}",
        train_set.len(),
        eval_set.len()
    );
    print!("{}", class_summary(&train_set));
    let net = Network::new(net_cfg)?;
    if let Some(s) = train_set.first() {
        let shape = s.image.shape();
        println!(
            "parameters {}, forward MACs per image {}",
            count_params(net.params()),
            count_flops(net.config(), shape[1], shape[2])
        );
    }
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut trainer = Trainer::new(net, tc, &train_set)?;
    Checkpoint::from_network(&trainer.net, Some(&trainer.opt), 0).save(&a.out)?;
    let started = Instant::now();
    let out = a.out.clone();
    let result = trainer.fit(&train_set, &eval_set, |t, log| {
        println!("{}  ({:.1?})", log.csv_row(), started.elapsed());
        Checkpoint::from_network(&t.net, Some(&t.opt), t.step).save(&out)
    });
    let logs = match result {
        Ok(l) => l,
        Err(e @ Error::Diverged { .. }) | Err(e @ Error::NonFiniteGradient(_)) => {
            return Err(Failure {
                code: EXIT_DIVERGED,
                msg: format!("{e}; last good checkpoint kept at {}", a.out.display()),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let mut file = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    train::write_log(&mut file, &logs).map_err(|e| io_failure(&log_path, e))?;
    println!(
        "checkpoint {} (step {}), log {}",
        a.out.display(),
        trainer.step,
        log_path.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    if a.ckpt.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
        log::warn!(
            "checkpoint {} does not have the .{EXTENSION} extension",
            a.ckpt.display()
        );
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let net = ckpt.to_network()?;
    println!(
        "# checkpoint configuration (step {})\n{}",
        ckpt.step,
        kv::render(&net.config().to_pairs())
    );
    let samples = load_samples(a.data.as_deref(), a.synthetic, a.scene.scene(a.seed))?;
    if samples.is_empty() {
        return Err(Failure::usage("dataset is empty"));
    }
    for s in &samples {
        net.config()
            .check_input(s.image.shape())
            .map_err(|e| Failure::usage(format!("{}: {e}", s.name)))?;
    }
    let (report, preds) = train::evaluate(&net, &samples)?;
    print!("{}", report.table(&CLASS_NAMES));
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv()).map_err(|e| io_failure(path, e))?;
    }
    if let Some(dir) = &a.masks_out {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        for (s, m) in samples.iter().zip(&preds) {
            data::write_mask(&dir.join(format!("{}_pred.pgm", s.name)), m)?;
        }
        println!("wrote {} predicted masks to {}", preds.len(), dir.display());
    }
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> CliResult {
    let checks = verify::run(a.suite);
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    println!(
        "{} of {} checks passed",
        checks.len() - failed.len(),
        checks.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            msg: format!("failed: {}", failed.join(", ")),
        })
    }
}

/// Fastest wall time of `f` over at least three runs and 20 ms.
fn time_it(mut f: impl FnMut() -> osdmamba::Result<()>) -> osdmamba::Result<f64> {
    let mut samples = Vec::new();
    let start = Instant::now();
    while samples.len() < 3 || (start.elapsed().as_secs_f64() < 0.02 && samples.len() < 1000) {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(samples.into_iter().fold(f64::INFINITY, f64::min))
}

/// Least-squares slope of `ln t` against `ln L`.
fn fit_exponent(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn bench(a: BenchArgs) -> CliResult {
    if a.op != "convssm" {
        return Err(Failure::usage(format!(
            "unknown --op `{}` (supported: convssm)",
            a.op
        )));
    }
    if a.lengths.is_empty()
        || a.states.is_empty()
        || a.lengths.contains(&0)
        || a.states.contains(&0)
    {
        return Err(Failure::usage("--L and --P need positive entries"));
    }
    if a.kernel % 2 == 0 || a.channels == 0 || a.side == 0 {
        return Err(Failure::usage(
            "need an odd --kernel and positive --U and --side",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (u, k, s) = (a.channels, a.kernel, a.side);
    println!("L,P,sequential_s,parallel_s,predicted_flops");
    let mut exponents = Vec::new();
    for &p in &a.states {
        let params = ConvSsmParameters::init_hippo(p, u, u, k, &mut rng);
        let mut points = Vec::new();
        for &l in &a.lengths {
            let seq = Tensor::uniform(&[l, u, s, s], 1.0, &mut rng);
            let x0 = ConvState::zeros(p, s, s);
            let seq_t = time_it(|| convssm::scan_sequential(&seq, &x0, &params).map(|_| ()))?;
            let par_t = time_it(|| convssm::scan_parallel(&seq, &x0, &params).map(|_| ()))?;
            println!(
                "{l},{p},{seq_t:.6e},{par_t:.6e},{}",
                convssm::convssm_flops(&params, s, s, l)
            );
            points.push((l, seq_t));
        }
        if points.len() >= 2 {
            exponents.push((p, fit_exponent(&points)));
        }
    }
    let mut bad = Vec::new();
    for (p, e) in &exponents {
        let ok = (0.8..=1.3).contains(e);
        eprintln!(
            "P={p}: sequential time ~ L^{e:.3} ({})",
            if ok {
                "within [0.8, 1.3]"
            } else {
                "OUT OF RANGE"
            }
        );
        if !ok {
            bad.push(format!("P={p} exponent {e:.3}"));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            msg: format!("sequential scan is not linear in L: {}", bad.join(", ")),
        })
    }
}
