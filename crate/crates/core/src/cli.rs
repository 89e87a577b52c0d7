//! Command-line entry points.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::Tape;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{self, BlurSpec, GenConfig, KernelFamily, PatchSet};
use crate::error::{Error, Result};
use crate::exit::{compute_exit_signal, Bins, ExitPolicy, IncrementTable};
use crate::infer::{deblur_image, write_exit_map, InferOptions};
use crate::metrics::{self, FeatureMatrix};
use crate::model::{ExitMode, Network};
use crate::train::{self, column_psnrs};

#[derive(Parser, Debug)]
#[command(name = "revdeblur", version, about = "Reversible multi-column image deblurring with adaptive exits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic blur corpus: `OUT/{blur,sharp}/NNNN.png` and `OUT/manifest.tsv`.
    GenData(GenDataArgs),
    /// Train head, encoder and decoder columns; writes a model directory.
    TrainDecoder(TrainDecoderArgs),
    /// Train the degradation classifier of an existing model.
    TrainClassifier(TrainClassifierArgs),
    /// Measure per-class PSNR gains of every column on a corpus.
    BuildTable(BuildTableArgs),
    /// Turn an increment table into an exit policy.
    MakePolicy(MakePolicyArgs),
    /// Restore images by overlapping tiles.
    Infer(InferArgs),
    /// Retained activation bytes per column count, reversible vs stored.
    BenchMemory(BenchMemoryArgs),
    /// Linear CKA between the level-1 features of every pair of columns.
    AnalyzeCka(AnalyzeCkaArgs),
    /// PSNR and SSIM of restored (or unrestored) corpus images.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Family {
    Linear,
    RandomWalk,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 24)]
    pub count: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Patch side recorded in the manifest.
    #[arg(long, default_value_t = 64)]
    pub patch: usize,
    /// Patch stride.
    #[arg(long, default_value_t = 64)]
    pub stride: usize,
    /// Kernel family.
    #[arg(long, value_enum, default_value_t = Family::Linear)]
    pub family: Family,
    /// Shortest kernel path length in pixels.
    #[arg(long, default_value_t = 1.0)]
    pub min_length: f64,
    /// Longest kernel path length in pixels.
    #[arg(long, default_value_t = 13.0)]
    pub max_length: f64,
    /// Kernel grid rows.
    #[arg(long, default_value_t = 2)]
    pub grid_rows: usize,
    /// Kernel grid columns.
    #[arg(long, default_value_t = 2)]
    pub grid_cols: usize,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.003)]
    pub noise: f64,
    /// Use the full length range for every image instead of a per-image severity.
    #[arg(long)]
    pub fixed_severity: bool,
    /// Comma-separated PSNR class edges in dB.
    #[arg(long, value_delimiter = ',', default_values_t = vec![20.0, 25.0, 30.0, 35.0, 40.0])]
    pub bin_edges: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainDecoderArgs {
    /// Training corpus directory.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation corpus directory (optional).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Model settings file (`key = value` lines); defaults otherwise.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Training settings file (`key = value` lines); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the number of iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Override the seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainClassifierArgs {
    /// Model directory, updated in place unless `--out` is given.
    #[arg(long)]
    pub model: PathBuf,
    /// Training corpus directory.
    #[arg(long)]
    pub train: PathBuf,
    /// Training settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the number of iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output model directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildTableArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output table (TSV).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct MakePolicyArgs {
    /// Increment table (TSV).
    #[arg(long)]
    pub table: PathBuf,
    /// Gain threshold in dB.
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Exit when a gain is `<= tau` instead of `< tau`.
    #[arg(long)]
    pub inclusive: bool,
    /// Output policy (TSV); printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ExitArgs {
    /// Run exactly this many columns on every tile.
    #[arg(long, conflicts_with = "policy")]
    pub fixed_j: Option<usize>,
    /// Exit policy (TSV) for adaptive exits.
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TileArgs {
    /// Tile side.
    #[arg(long, default_value_t = 384)]
    pub window: usize,
    /// Tile stride.
    #[arg(long, default_value_t = 352)]
    pub stride: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// PNG file or directory of PNG files.
    #[arg(long)]
    pub input: PathBuf,
    /// Output PNG file, or directory when the input is a directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Exit map (TSV) for a single input; directory inputs write `<name>.exits.tsv` next to each output.
    #[arg(long)]
    pub exit_map: Option<PathBuf>,
    #[command(flatten)]
    pub exit: ExitArgs,
    #[command(flatten)]
    pub tiles: TileArgs,
}

#[derive(Args, Debug)]
pub struct BenchMemoryArgs {
    /// Comma-separated column counts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
    pub columns: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output table (TSV); printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeCkaArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Use at most this many patches.
    #[arg(long, default_value_t = 64)]
    pub max_patches: usize,
    /// Output matrix (TSV); printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory; without it the blurred inputs are scored.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub exit: ExitArgs,
    #[command(flatten)]
    pub tiles: TileArgs,
    /// Output metrics (TSV); printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::read(p),
        None => Ok(TrainConfig::default()),
    }
}

fn exit_mode_policy(args: &ExitArgs, net: &Network) -> Result<Option<ExitPolicy>> {
    match (&args.policy, args.fixed_j) {
        (Some(p), _) => {
            let policy = ExitPolicy::read(p)?;
            if policy.exits.len() != net.cfg.classes() {
                return Err(Error::Invalid(format!(
                    "policy has {} classes, model has {}",
                    policy.exits.len(),
                    net.cfg.classes()
                )));
            }
            Ok(Some(policy))
        }
        (None, Some(j)) if j == 0 || j > net.columns() => {
            Err(Error::Invalid(format!("--fixed-j {j} outside 1..={}", net.columns())))
        }
        _ => Ok(None),
    }
}

fn mode<'p>(args: &ExitArgs, net: &Network, policy: Option<&'p ExitPolicy>) -> ExitMode<'p> {
    match policy {
        Some(p) => ExitMode::Adaptive(p),
        None => ExitMode::Fixed(args.fixed_j.unwrap_or(net.columns())),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<usize> {
    let cfg = GenConfig {
        count: a.count,
        height: a.height,
        width: a.width,
        patch: a.patch,
        stride: a.stride,
        spec: BlurSpec {
            family: match a.family {
                Family::Linear => KernelFamily::Linear,
                Family::RandomWalk => KernelFamily::RandomWalk,
            },
            length: (a.min_length, a.max_length),
            grid: (a.grid_rows, a.grid_cols),
            noise_sigma: a.noise,
            ..BlurSpec::default()
        },
        bins: Bins::new(a.bin_edges.clone())?,
        seed: a.seed,
        vary_severity: !a.fixed_severity,
    };
    Ok(data::generate_corpus(&a.out, &cfg)?.len())
}

pub fn train_decoder(a: &TrainDecoderArgs) -> Result<()> {
    let mcfg = match &a.model_config {
        Some(p) => ModelConfig::read(p)?,
        None => ModelConfig::default(),
    };
    let mut tcfg = train_config(a.config.as_deref())?;
    if let Some(i) = a.iters {
        tcfg.iters = i;
        tcfg.pretrain_iters = tcfg.pretrain_iters.min(i);
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    let train = PatchSet::load(&a.train)?;
    let val = match &a.val {
        Some(v) => PatchSet::load(v)?,
        None => PatchSet::default(),
    };
    let (net, mut store) = Network::new::<f32>(&mcfg, tcfg.seed)?;
    let result = train::train_decoder(&net, &mut store, &tcfg, &train, &val, |row| {
        eprintln!("{}", row.to_line());
    })?;
    net.save_dir(&result.ema.shadow, &a.out)?;
    let log = a.out.join("train_log.tsv");
    std::fs::write(&log, train::log_text(&result.log, net.columns())).map_err(|e| Error::io(&log, e))?;
    let tc = a.out.join("train.cfg");
    std::fs::write(&tc, tcfg.to_text()).map_err(|e| Error::io(&tc, e))
}

pub fn train_classifier(a: &TrainClassifierArgs) -> Result<f64> {
    let (net, mut store) = Network::load_dir(&a.model)?;
    let mut tcfg = train_config(a.config.as_deref())?;
    if let Some(i) = a.iters {
        tcfg.classifier_iters = i;
    }
    let mut set = PatchSet::load(&a.train)?;
    let bins = Bins::new(net.cfg.bin_edges.clone())?;
    set.classes = set.psnr.iter().map(|&p| bins.class_of(p)).collect();
    let log = train::train_classifier(&net, &mut store, &tcfg, &set, |row| {
        eprintln!("{}\t{:.3e}\t{:.6}\t{:.4}", row.iter, row.lr, row.loss, row.accuracy);
    })?;
    let out = a.out.as_deref().unwrap_or(&a.model);
    net.save_dir(&store, out)?;
    let mut text = String::from("iter\tlr\tloss\taccuracy\n");
    for r in &log {
        writeln!(text, "{}\t{}\t{}\t{}", r.iter, r.lr, r.loss, r.accuracy).unwrap();
    }
    let p = out.join("classifier_log.tsv");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(log.last().map_or(0.0, |r| r.accuracy))
}

/// Increment table of `net` on `set`, with classes taken from the model's bins.
pub fn increment_table(net: &Network, store: &crate::params::ParamStore<f32>, set: &PatchSet, batch: usize) -> Result<IncrementTable> {
    let rows = column_psnrs(net, store, set, batch)?;
    let bins = Bins::new(net.cfg.bin_edges.clone())?;
    let classes: Vec<usize> = set.psnr.iter().map(|&p| bins.class_of(p)).collect();
    IncrementTable::from_psnrs(&classes, &rows, bins.classes())
}

pub fn build_table(a: &BuildTableArgs) -> Result<IncrementTable> {
    let (net, store) = Network::load_dir(&a.model)?;
    let set = PatchSet::load(&a.data)?;
    let table = increment_table(&net, &store, &set, a.batch)?;
    table.write(&a.out)?;
    Ok(table)
}

pub fn make_policy(a: &MakePolicyArgs) -> Result<ExitPolicy> {
    let table = IncrementTable::read(&a.table)?;
    let policy = compute_exit_signal(&table, a.tau, a.inclusive);
    emit(&policy.to_tsv(), a.out.as_deref())?;
    Ok(policy)
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let (net, store) = Network::load_dir(&a.model)?;
    let policy = exit_mode_policy(&a.exit, &net)?;
    let mode = mode(&a.exit, &net, policy.as_ref());
    let opts = InferOptions {
        window: a.tiles.window,
        stride: a.tiles.stride,
    };
    let run = |input: &Path, output: &Path, map: Option<&Path>| -> Result<()> {
        let blur = data::load_png(input)?;
        let r = deblur_image(&net, &store, &blur, &mode, &opts)?;
        data::save_png(&r.image, output)?;
        if let Some(m) = map {
            write_exit_map(&r.exits, m)?;
        }
        eprintln!("{}\tmean exit {:.3}", input.display(), r.mean_exit());
        Ok(())
    };
    if a.input.is_dir() {
        std::fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
        for p in data::list_pngs(&a.input)? {
            let name = p.file_name().unwrap_or_default();
            let out = a.output.join(name);
            let stem = p.file_stem().unwrap_or_default().to_string_lossy();
            let map = a.output.join(format!("{stem}.exits.tsv"));
            run(&p, &out, Some(&map))?;
        }
        Ok(())
    } else {
        run(&a.input, &a.output, a.exit_map.as_deref())
    }
}

pub fn bench_memory(a: &BenchMemoryArgs) -> Result<String> {
    let base = ModelConfig {
        channels: a.channels,
        levels: a.levels,
        enc_blocks: vec![1; a.levels],
        ..ModelConfig::default()
    };
    let rows = metrics::bench_memory(&base, &a.columns, a.batch, a.patch, a.seed)?;
    let mut text = metrics::memory_table(&rows);
    if rows.len() >= 2 {
        writeln!(text, "# slope_ratio={}", metrics::memory_slope_ratio(&rows)).unwrap();
    }
    emit(&text, a.out.as_deref())?;
    Ok(text)
}

/// Pairwise linear CKA of the level-1 decoder features of every column.
pub fn column_cka(net: &Network, store: &crate::params::ParamStore<f32>, set: &PatchSet, max_patches: usize) -> Result<Vec<Vec<f64>>> {
    let n = set.len().min(max_patches);
    let j = net.columns();
    let mut feats: Vec<Vec<FeatureMatrix>> = vec![Vec::new(); j];
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(8) {
        let (blur, _) = set.batch(chunk, None)?;
        let mut tape = Tape::no_grad(store);
        let fv = net.forward(&mut tape, blur, j, 0.0)?;
        for (col, f) in feats.iter_mut().enumerate() {
            f.push(FeatureMatrix::from_tensor(tape.value(fv.states[col + 1][0])?));
        }
    }
    let mats = feats.iter().map(|f| FeatureMatrix::stack(f)).collect::<Result<Vec<_>>>()?;
    let mut out = vec![vec![0.0; j]; j];
    for a in 0..j {
        for b in a..j {
            let v = metrics::linear_cka(&mats[a], &mats[b])?;
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    Ok(out)
}

pub fn analyze_cka(a: &AnalyzeCkaArgs) -> Result<Vec<Vec<f64>>> {
    let (net, store) = Network::load_dir(&a.model)?;
    let set = PatchSet::load(&a.data)?;
    let m = column_cka(&net, &store, &set, a.max_patches)?;
    let mut text = String::from("column");
    for k in 1..=m.len() {
        write!(text, "\t{k}").unwrap();
    }
    text.push('\n');
    for (k, row) in m.iter().enumerate() {
        write!(text, "{}", k + 1).unwrap();
        for v in row {
            write!(text, "\t{v}").unwrap();
        }
        text.push('\n');
    }
    emit(&text, a.out.as_deref())?;
    Ok(m)
}

/// One scored image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mean_exit: f64,
}

pub const EVAL_HEADER: &str = "image\tpsnr\tssim\tmean_exit";

pub fn eval_text(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in rows {
        writeln!(s, "{}\t{}\t{}\t{}", r.image, r.psnr, r.ssim, r.mean_exit).unwrap();
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    writeln!(s, "mean\t{}\t{}\t{}", mean(|r| r.psnr), mean(|r| r.ssim), mean(|r| r.mean_exit)).unwrap();
    s
}

pub fn eval(a: &EvalArgs) -> Result<Vec<EvalRow>> {
    let model = a.model.as_ref().map(|m| Network::load_dir(m)).transpose()?;
    let policy = match &model {
        Some((net, _)) => exit_mode_policy(&a.exit, net)?,
        None => None,
    };
    let opts = InferOptions {
        window: a.tiles.window,
        stride: a.tiles.stride,
    };
    let mut rows = Vec::new();
    for bp in data::list_pngs(&a.data.join("blur"))? {
        let name = bp.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let blur = data::load_png(&bp)?;
        let sharp = data::load_png(&a.data.join("sharp").join(&name))?;
        let (restored, mean_exit) = match &model {
            Some((net, store)) => {
                let mode = mode(&a.exit, net, policy.as_ref());
                let r = deblur_image(net, store, &blur, &mode, &opts)?;
                let e = r.mean_exit();
                (r.image, e)
            }
            None => (blur, 0.0),
        };
        rows.push(EvalRow {
            image: format!("blur/{name}"),
            psnr: metrics::psnr(&restored, &sharp)?,
            ssim: metrics::ssim(&restored, &sharp)?,
            mean_exit,
        });
    }
    emit(&eval_text(&rows), a.out.as_deref())?;
    Ok(rows)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let n = gen_data(&a)?;
            eprintln!("{n} patches written to {}", a.out.display());
        }
        Command::TrainDecoder(a) => train_decoder(&a)?,
        Command::TrainClassifier(a) => {
            let acc = train_classifier(&a)?;
            eprintln!("training accuracy {acc:.4}");
        }
        Command::BuildTable(a) => {
            build_table(&a)?;
        }
        Command::MakePolicy(a) => {
            let p = make_policy(&a)?;
            eprintln!("E = {:?}", p.exits);
        }
        Command::Infer(a) => infer(&a)?,
        Command::BenchMemory(a) => {
            bench_memory(&a)?;
        }
        Command::AnalyzeCka(a) => {
            analyze_cka(&a)?;
        }
        Command::Eval(a) => {
            eval(&a)?;
        }
    }
    Ok(())
}
