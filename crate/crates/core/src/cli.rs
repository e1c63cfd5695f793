//! The `fluxamba` command line: dataset generation, training, inference,
//! evaluation, benchmarking and gradient checks.
//!
//! Every flag is long-form. `--config FILE` reads `key=value` lines and
//! supplies them as flags placed before the command line's own, so explicit
//! flags win. A key `foo_bar` stands for `--foo-bar`; `key=true` enables a
//! switch and `key=false` leaves it off.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{forward_latency, scan_scaling, SCAN_LENGTHS};
use crate::data::{generate, load_split, read_pgm, split_sizes, write_dataset, write_mask_pgm, GenSpec, Split};
use crate::error::{Error, Result};
use crate::model::{
    predict_probabilities, reflect_pad, robustness, evaluate, train_loop, EvalOptions, Model, ModelConfig, RawTensor,
    TensorFile, TrainConfig, Variant, INPUT_MULTIPLE,
};
use crate::nn::Ctx;
use crate::numerics::{Scalar, Tape, Tensor};
use crate::suite::{run_scope, Scope};

#[derive(Debug, Parser)]
#[command(name = "fluxamba", version, about = "Fluxamba boundary segmentation at desk scale")]
#[command(args_override_self = true)]
pub struct Cli {
    /// File of `key=value` lines that set flags of the chosen command.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of image/mask PGM pairs with split files.
    Gen(GenArgs),
    /// Train a model and write best and final checkpoints.
    Train(TrainArgs),
    /// Predict a binary mask for one PGM image.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset split, optionally under input noise.
    Eval(EvalArgs),
    /// Report parameters, FLOPs, size, latency and scan scaling.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub strokes_min: usize,
    #[arg(long, default_value_t = 3)]
    pub strokes_max: usize,
    #[arg(long, default_value_t = 1.5)]
    pub thickness_min: f64,
    #[arg(long, default_value_t = 4.0)]
    pub thickness_max: f64,
    #[arg(long, default_value_t = 0.15)]
    pub contrast_min: f64,
    #[arg(long, default_value_t = 0.4)]
    pub contrast_max: f64,
    #[arg(long, default_value_t = 3)]
    pub craters: usize,
    #[arg(long, default_value_t = 16.0)]
    pub texture_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    pub texture_amplitude: f64,
}

impl GenArgs {
    pub fn spec(&self) -> GenSpec {
        GenSpec {
            count: self.count,
            size: self.size,
            strokes: (self.strokes_min, self.strokes_max),
            thickness: (self.thickness_min, self.thickness_max),
            contrast: (self.contrast_min, self.contrast_max),
            craters: self.craters,
            texture_scale: self.texture_scale,
            texture_amplitude: self.texture_amplitude,
            seed: self.seed,
        }
    }
}

/// Architecture flags shared by `train` and `bench`.
#[derive(Debug, Args)]
pub struct ArchArgs {
    /// micro, tiny, small, base or large.
    #[arg(long, default_value = "tiny")]
    pub variant: String,
    /// Scan mode: fs2d, sass, or a single route name.
    #[arg(long, default_value = "fs2d")]
    pub scan: String,
    /// Decoder upsampling: dynamic or bilinear.
    #[arg(long, default_value = "dynamic")]
    pub upsample: String,
    /// Weight of the boundary-conditioned fusion term.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub no_asg: bool,
    #[arg(long)]
    pub no_pmf: bool,
    #[arg(long)]
    pub no_hsr: bool,
    #[arg(long)]
    pub no_hffu: bool,
}

impl ArchArgs {
    pub fn model_config(&self, seed: u64) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::variant(self.variant.parse::<Variant>()?).with_seed(seed);
        cfg.scan = self.scan.parse()?;
        cfg.upsample = self.upsample.parse()?;
        cfg.lambda = self.lambda;
        cfg.toggles = [!self.no_asg, !self.no_pmf, !self.no_hsr, !self.no_hffu];
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay.
    #[arg(long, default_value_t = 0.9)]
    pub power: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    /// f32 or f64.
    #[arg(long, default_value = "f32")]
    pub precision: String,
    /// Directory for `best.flxa`, `final.flxa` and `train.log`.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write `stage<k>.flxa` files of intermediate features here.
    #[arg(long, value_name = "DIR")]
    pub dump_features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated noise levels; the first must be 0.
    #[arg(long, value_name = "SIGMAS")]
    pub noise: Option<String>,
    /// CSV output; defaults to `eval_<split>.csv` next to the checkpoint.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Seed of the input noise.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1000)]
    pub repeat: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Timed repetitions per scan length (the fastest is kept).
    #[arg(long, default_value_t = 3)]
    pub scan_repeats: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// ops, blocks or model.
    #[arg(long, default_value = "ops")]
    pub scope: String,
}

/// Move `--config FILE` out of `args` and splice its flags in right after the
/// subcommand name.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut file = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            file = Some(it.next().ok_or_else(|| Error::Config("--config needs a file".into()))?);
        } else if let Some(f) = a.strip_prefix("--config=") {
            file = Some(f.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(file) = file else { return Ok(rest) };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(Path::new(&file), e))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{file} line {}: expected key=value", n + 1)))?;
        let flag = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => injected.push(flag),
            "false" => {}
            v => {
                injected.push(flag);
                injected.push(v.to_string());
            }
        }
    }
    // Position 0 is the program name; the subcommand is the first bare word.
    let at = rest.iter().skip(1).position(|a| !a.starts_with('-')).map_or(rest.len(), |p| p + 2);
    rest.splice(at..at, injected);
    Ok(rest)
}

/// Parse and run. Returns the process exit code; diagnostics go to stderr.
pub fn main_with_args(args: Vec<String>, out: &mut dyn Write) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => match a.precision.as_str() {
            "f32" => cmd_train::<f32>(&a, out),
            "f64" => cmd_train::<f64>(&a, out),
            p => Err(Error::Config(format!("unknown precision {p:?} (f32, f64)"))),
        },
        Command::Infer(a) => cmd_infer(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let samples = generate(&a.spec())?;
    write_dataset(&a.out, &samples)?;
    let (tr, va, te) = split_sizes(samples.len());
    emit(
        out,
        format!("wrote {} samples to {} (train {tr}, val {va}, test {te})", samples.len(), a.out.display()),
    )
}

pub fn cmd_train<T: Scalar>(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let train = load_split(&a.data, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Data(format!("no training samples in {}", a.data.display())));
    }
    let val = load_split(&a.data, Split::Val)?;
    let cfg = TrainConfig {
        lr: a.lr,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch: a.batch,
        power: a.power,
        seed: a.seed,
        augment: !a.no_augment,
        max_steps: a.max_steps,
        ..TrainConfig::default()
    };
    let mut model = Model::<T>::build(&a.arch.model_config(a.seed)?)?;
    create_dir(&a.out)?;
    let log_path = a.out.join("train.log");
    let mut log = String::from("epoch step loss lr\n");
    emit(
        out,
        format!(
            "training {} ({} params, {}) on {} samples, {} validation",
            a.arch.variant,
            model.count_params(),
            a.precision,
            train.len(),
            val.len()
        ),
    )?;
    emit(out, "epoch step loss lr")?;
    let mut write_err = None;
    let report = train_loop(&mut model, &train, &val, &cfg, |e| {
        log.push_str(&format!("{e}\n"));
        if let Err(err) = emit(out, e) {
            write_err.get_or_insert(err);
        }
    });
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    let report = report?;
    if let Some(e) = write_err {
        return Err(e);
    }
    for (k, f1) in report.val_f1.iter().enumerate() {
        emit(out, format!("epoch {} {} f1 {f1:.6}", k + 1, if report.validated_on_train { "train" } else { "val" }))?;
    }
    let best = Model {
        store: report.best.clone(),
        ..model.clone()
    };
    best.save(a.out.join("best.flxa"))?;
    model.save(a.out.join("final.flxa"))?;
    emit(
        out,
        format!(
            "best epoch {} (f1 {:.6}); wrote best.flxa, final.flxa, train.log to {}",
            report.best_epoch,
            report.best_val_f1,
            a.out.display()
        ),
    )
}

/// Run the model once on a padded `[1, C, H, W]` image and write the taps of
/// each stage to `dir/stage<k>.flxa`. Returns the file names.
pub fn dump_features(model: &Model<f64>, padded: &Tensor<f64>, dir: &Path) -> Result<Vec<PathBuf>> {
    let tape = Tape::no_grad();
    let ctx = Ctx::new(&tape, &model.store, false).with_taps();
    model.forward(&ctx, tape.constant(padded.clone()))?;
    let mut stages: BTreeMap<String, Vec<RawTensor>> = BTreeMap::new();
    for (name, t) in ctx.take_taps() {
        let stage = name.split('.').next().unwrap_or_default().to_string();
        stages.entry(stage).or_default().push(RawTensor::from_tensor(&name, &t));
    }
    create_dir(dir)?;
    let mut written = Vec::new();
    for (stage, tensors) in stages {
        let path = dir.join(format!("{stage}.flxa"));
        let file = TensorFile {
            tensors,
            text: format!("stage={stage}\nshape={:?}\n", padded.shape()),
        };
        crate::model::write_tensor_file(&path, &file)?;
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let model = Model::<f64>::load(&a.ckpt)?;
    let image = read_pgm(&a.input)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let prob = predict_probabilities(&model, &[&image], 1)?.remove(0);
    let (padded, (ph, pw)) = reflect_pad(&image, INPUT_MULTIPLE)?;
    if ph + pw > 0 {
        emit(
            out,
            format!(
                "note: {h}x{w} input reflect-padded to {}x{} and the prediction cropped back",
                h + ph,
                w + pw
            ),
        )?;
    }
    write_mask_pgm(&prob, &a.out)?;
    let fg = prob.data().iter().filter(|&&p| p >= 0.5).count();
    emit(out, format!("wrote {} ({fg} of {} pixels foreground)", a.out.display(), h * w))?;
    if let Some(dir) = &a.dump_features {
        let shape = padded.shape().to_vec();
        let batch = padded.reshape(&[1, shape[0], shape[1], shape[2]])?;
        let files = dump_features(&model, &batch, dir)?;
        emit(out, format!("wrote {} feature files to {}", files.len(), dir.display()))?;
    }
    Ok(())
}

/// Parse `0,0.1,0.2`.
pub fn parse_sigmas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad noise level {x:?}"))))
        .collect()
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let split: Split = a.split.parse()?;
    let model = Model::<f64>::load(&a.ckpt)?;
    let samples = load_split(&a.data, split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split {} of {} is empty", split.name(), a.data.display())));
    }
    let opts = EvalOptions {
        batch: a.batch,
        noise_seed: a.seed,
    };
    let csv = match &a.noise {
        None => {
            let r = evaluate(&model, &samples, 0.0, &opts)?;
            emit(out, &r)?;
            r.to_csv(0.0)
        }
        Some(list) => {
            let r = robustness(&model, &samples, &parse_sigmas(list)?, &opts)?;
            emit(out, r.table().trim_end())?;
            r.to_csv()
        }
    };
    let path = a.csv.clone().unwrap_or_else(|| {
        a.ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}.csv", split.name()))
    });
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    emit(out, format!("wrote {}", path.display()))
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let model = Model::<f32>::build(&a.arch.model_config(a.seed)?)?;
    emit(out, format!("variant    {} at {}x{}", a.arch.variant, a.size, a.size))?;
    emit(out, model.cost(a.size, a.size)?)?;
    emit(out, forward_latency(&model, a.size, a.repeat, a.seed)?)?;
    emit(out, scan_scaling(&SCAN_LENGTHS, a.scan_repeats, a.seed)?.table())
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let scope: Scope = a.scope.parse()?;
    let reports = run_scope(scope)?;
    for r in &reports {
        emit(out, r)?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} gradient checks failed in scope {scope}", reports.len())));
    }
    emit(out, format!("all {} checks passed in scope {scope}", reports.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_flags_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        fs::write(&f, "# comment\ncount=3\nseed=7\nno_augment=true\nverbose=false\n").unwrap();
        let args = strings(&["fluxamba", "gen", "--config", f.to_str().unwrap(), "--count", "5"]);
        let got = expand_config(args).unwrap();
        assert_eq!(got, strings(&["fluxamba", "gen", "--count", "3", "--seed", "7", "--no-augment", "--count", "5"]));
    }

    #[test]
    fn later_flag_wins() {
        let cli = Cli::try_parse_from(strings(&["fluxamba", "gen", "--out", "x", "--count", "3", "--count", "5"])).unwrap();
        let Command::Gen(g) = cli.command else { panic!("expected gen") };
        assert_eq!(g.count, 5);
        assert_eq!(g.spec(), GenSpec { count: 5, ..GenSpec::default() });
    }

    #[test]
    fn gen_defaults_match_the_generator() {
        let cli = Cli::try_parse_from(strings(&["fluxamba", "gen", "--out", "x"])).unwrap();
        let Command::Gen(g) = cli.command else { panic!("expected gen") };
        assert_eq!(g.spec(), GenSpec::default());
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let code = main_with_args(strings(&["fluxamba", "gen", "--out", "x", "--bogus", "1"]), &mut Vec::new());
        assert_eq!(code, 1);
        assert_eq!(main_with_args(strings(&["fluxamba"]), &mut Vec::new()), 1);
    }

    #[test]
    fn sigma_lists_parse() {
        assert_eq!(parse_sigmas("0, 0.1,0.3").unwrap(), vec![0.0, 0.1, 0.3]);
        assert!(parse_sigmas("0,x").is_err());
    }

    #[test]
    fn arch_flags_reach_the_model_config() {
        let cli = Cli::try_parse_from(strings(&[
            "fluxamba", "bench", "--variant", "micro", "--no-hsr", "--scan", "sass", "--upsample", "bilinear",
        ]))
        .unwrap();
        let Command::Bench(b) = cli.command else { panic!("expected bench") };
        let cfg = b.arch.model_config(1).unwrap();
        assert_eq!(cfg.toggles, [true, true, false, true]);
        assert_eq!(cfg.scan.to_string(), "sass");
        assert_eq!(cfg.upsample.to_string(), "bilinear");
        assert_eq!(cfg.depths, Variant::Micro.depths());
        assert_eq!(b.repeat, 1000);
    }
}
