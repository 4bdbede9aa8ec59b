//! `flaming`: dataset generation, training, evaluation, gradient checks,
//! attention export and flow preprocessing.
//!
//! Exit codes: 0 ok, 1 failed check or assertion, 2 configuration error,
//! 3 I/O or file-format error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use flaming::actor_encoder::write_pgm;
use flaming::config::{RunConfig, KEYS};
use flaming::gradsuite;
use flaming::metrics;
use flaming::model::{Model, ModelConfig, CHECKPOINT_INDEX};
use flaming::numerics::{io, FdConfig};
use flaming::synthdata::{self, StoredSample};
use flaming::training::{self, default_merge_map, EpochLog};
use flaming::Error;

const SNAPSHOT: &str = "config.txt";

#[derive(Parser)]
#[command(name = "flaming", version, about = "Weakly supervised group activity recognition on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset and split it 70/15/15 into train/, val/ and test/.
    /// The test split is written without flow.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        count: usize,
        /// Generation seed (same as the gen_seed key).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on DATA/train, validating on DATA/val. Writes OUT/checkpoint,
    /// OUT/loss.csv, OUT/metrics.csv and OUT/config.txt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split directory. Flow files are never read.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write confusion.csv and report.txt (default: the checkpoint directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; exits 1 if any check fails.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only run checks whose name contains this.
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value_t = 1)]
        check_seed: u64,
    },
    /// Write attention maps of one clip as PGM images: one per (block, frame)
    /// of the representative attention and one per frame for tokens 0-2.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sample directory inside a dataset split (holds frames.flmt).
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantile-suppress, normalize and downsample a raw T×H×W flow tensor.
    Flowprep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Suppression quantile (default: the flow_quantile key).
        #[arg(long)]
        q: Option<f64>,
        /// Output grid as HxW (default: the model's attention grid).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Subcommands whose own flags shadow a config key of the same name.
fn reserved(sub: &str) -> &'static [&'static str] {
    match sub {
        "generate" => &["seed"],
        _ => &[],
    }
}

fn keys_help() -> String {
    let defaults = RunConfig::default();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from(
        "Config keys (in a --config file as `key = value`, or as --key VALUE on the command line; flags win):\n",
    );
    for (k, help) in KEYS {
        let d = defaults.get(k).unwrap_or_default();
        s.push_str(&format!("  {k:<width$}  {help} [default: {d}]\n"));
    }
    s
}

/// Splits `--key value` / `--key=value` pairs for config keys out of argv.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let sub = args.get(1).and_then(|a| a.to_str()).unwrap_or("").to_string();
    let shadowed = reserved(&sub);
    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let Some(text) = a.to_str().and_then(|s| s.strip_prefix("--")) else {
            kept.push(a);
            continue;
        };
        let (name, inline) = match text.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (text.to_string(), None),
        };
        let key = name.replace('-', "_");
        if !KEYS.iter().any(|(k, _)| *k == key) || shadowed.contains(&key.as_str()) {
            kept.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match it.next() {
                Some(v) => v.into_string().map_err(|_| Error::Config(format!("--{name}: value is not UTF-8")))?,
                None => return Err(Error::Config(format!("--{name} needs a value")).into()),
            },
        };
        overrides.push((key, value));
    }
    Ok((kept, overrides))
}

fn resolve(config: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Dimension(_) | Error::Generation(_) => 2,
                Error::Io { .. } | Error::Format { .. } | Error::Schema(_) => 3,
                Error::Check(_) | Error::Contract(_) | Error::NonFinite(_) => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let help = keys_help();
    let mut command = Cli::command();
    for sub in command.get_subcommands_mut() {
        *sub = sub.clone().after_help(help.clone());
    }
    let (args, overrides) = match split_overrides(std::env::args_os().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let matches = command.get_matches_from(args);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command, overrides: &[(String, String)]) -> Result<()> {
    match command {
        Command::Generate { config, out, count, seed } => {
            let mut cfg = resolve(config.as_deref(), overrides)?;
            if let Some(s) = seed {
                cfg.gen.seed = s;
            }
            generate(&cfg, &out, count)
        }
        Command::Train { config, data, out } => train(&resolve(config.as_deref(), overrides)?, &data, &out),
        Command::Eval { checkpoint, data, out } => {
            if !overrides.is_empty() {
                bail!(Error::Config("eval takes its configuration from the checkpoint".into()));
            }
            eval(&checkpoint, &data, out.as_deref())
        }
        Command::Gradcheck { config, only, check_seed } => {
            gradcheck(&resolve(config.as_deref(), overrides)?, only.as_deref(), check_seed)
        }
        Command::ExportAttention { checkpoint, sample, out } => {
            if !overrides.is_empty() {
                bail!(Error::Config("export-attention takes its configuration from the checkpoint".into()));
            }
            export_attention(&checkpoint, &sample, &out)
        }
        Command::Flowprep { input, out, q, grid, config } => {
            let mut cfg = resolve(config.as_deref(), overrides)?;
            if let Some(q) = q {
                cfg.train.flow_quantile = q;
            }
            flowprep(&cfg, &input, &out, grid.as_deref())
        }
    }
}

fn generate(cfg: &RunConfig, out: &Path, count: usize) -> Result<()> {
    if count == 0 {
        bail!(Error::Config("--count must be positive".into()));
    }
    cfg.gen.validate()?;
    let specs = synthdata::balanced_specs(count, cfg.gen.seed);
    let splits = synthdata::split_specs(specs, cfg.gen.seed);
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (name, specs) in ["train", "val", "test"].iter().zip(splits) {
        let samples = synthdata::generate_dataset(&specs, &cfg.gen)?;
        synthdata::write_dataset(&samples, &out.join(name), *name != "test")?;
        println!("{name}: {} clips", samples.len());
    }
    cfg.write_snapshot(&out.join(SNAPSHOT))?;
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read_split(dir: &Path) -> Result<Vec<StoredSample>> {
    synthdata::read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let train_set = read_split(&data.join("train"))?;
    let val_dir = data.join("val");
    let val_set = if val_dir.join(synthdata::MANIFEST).exists() {
        read_split(&val_dir)?
    } else {
        Vec::new()
    };
    if let Some(s) = train_set.first() {
        let (h, w) = (s.sample.height(), s.sample.width());
        if (h, w) != (cfg.model.height, cfg.model.width) {
            bail!(Error::Config(format!(
                "dataset frames are {h}x{w} but the model expects {}x{}",
                cfg.model.height, cfg.model.width
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    cfg.write_snapshot(&out.join(SNAPSHOT))?;
    let mut model = Model::new(&cfg.model, cfg.train.seed)?;
    println!("{} parameters, {} training clips, {} validation clips", model.store.numel(), train_set.len(), val_set.len());
    let mut progress = |e: &EpochLog| match &e.eval {
        Some(v) => println!("epoch {:>3}  lr {:.3e}  loss {:.4}  val mca {:.3}", e.epoch, e.lr, e.train_loss, v.mca),
        None => println!("epoch {:>3}  lr {:.3e}  loss {:.4}", e.epoch, e.lr, e.train_loss),
    };
    let log = training::train(&mut model, &train_set, &val_set, &cfg.train, &cfg.loss, &mut progress)?;
    let ckpt = out.join("checkpoint");
    model.save(&ckpt)?;
    cfg.write_snapshot(&ckpt.join(SNAPSHOT))?;
    write_text(&out.join("loss.csv"), &log.steps_csv())?;
    write_text(&out.join("metrics.csv"), &log.epochs_csv())?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<(RunConfig, Model)> {
    if !dir.join(CHECKPOINT_INDEX).exists() {
        bail!(io_err(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint index")));
    }
    let cfg = RunConfig::load(&dir.join(SNAPSHOT))?;
    let mut model = Model::new(&cfg.model, 0)?;
    model.load_params(dir)?;
    Ok((cfg, model))
}

fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, model) = load_checkpoint(checkpoint)?;
    let samples = read_split(data)?;
    let report = training::evaluate(&samples, &model, cfg.train.batch, cfg.loss.k_flm)?;
    let cm = &report.confusion;
    let mut text = format!(
        "clips        {}\nmca          {:.4}\nmpca         {:.4}\nmerged_mca   {:.4}\n",
        cm.total(),
        metrics::mca(cm)?,
        metrics::mpca(cm)?,
        metrics::merged_mca(cm, &default_merge_map())?
    );
    if let Some(l) = report.localization {
        text.push_str(&format!("localization {l:.4}\n"));
    }
    text.push('\n');
    text.push_str(&cm.render());
    print!("{text}");
    let dir = out.unwrap_or(checkpoint);
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_text(&dir.join("confusion.csv"), &cm.to_csv())?;
    write_text(&dir.join("report.txt"), &text)?;
    Ok(())
}

fn gradcheck(cfg: &RunConfig, only: Option<&str>, seed: u64) -> Result<()> {
    let fd = FdConfig::default();
    let entries = gradsuite::run(cfg, &fd, seed, only)?;
    if entries.is_empty() {
        bail!(Error::Config(format!("no check matches {:?}", only.unwrap_or(""))));
    }
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for e in &entries {
        println!("{} {:<22} {}", if e.passed() { "PASS" } else { "FAIL" }, e.name, e.report);
        worst = worst.max(e.report.max_rel_err);
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    println!("max rel err {worst:.3e} over {} checks (tol {:.0e})", entries.len(), fd.tol);
    if !failed.is_empty() {
        bail!(Error::Check(format!("gradient mismatch in {}", failed.join(", "))));
    }
    Ok(())
}

fn export_attention(checkpoint: &Path, sample: &Path, out: &Path) -> Result<()> {
    let (cfg, model) = load_checkpoint(checkpoint)?;
    let path = sample.join("frames.flmt");
    let (shape, frames) = io::read_f32(&path)?;
    let ModelConfig { height, width, .. } = model.config;
    if shape.len() != 4 || shape[1..] != [height, width, 3] {
        bail!(Error::Format {
            path,
            msg: format!("expected T×{height}×{width}×3 frames, got {shape:?}"),
        });
    }
    let att = model.clip_attention(&frames, shape[0], cfg.loss.k_flm)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let (gh, gw) = att.grid;
    let hw = gh * gw;
    let s = att.per_token.shape().to_vec();
    let (blocks, t, k) = (s[0], s[1], s[2]);
    let rep = att.representative.data();
    for l in 0..blocks {
        for f in 0..t {
            let i = l * t + f;
            write_pgm(&out.join(format!("block{l}_frame{f}.pgm")), &rep[i * hw..(i + 1) * hw], gh, gw)?;
        }
    }
    let last = blocks - 1;
    let tok = att.per_token.data();
    for token in 0..k.min(3) {
        for f in 0..t {
            let i = ((last * t + f) * k + token) * hw;
            write_pgm(&out.join(format!("token{token}_frame{f}.pgm")), &tok[i..i + hw], gh, gw)?;
        }
    }
    println!(
        "wrote {} maps for frames {:?} to {}",
        blocks * t + k.min(3) * t,
        att.indices,
        out.display()
    );
    Ok(())
}

#[cfg(feature = "flow")]
fn flowprep(cfg: &RunConfig, input: &Path, out: &Path, grid: Option<&str>) -> Result<()> {
    use flaming::flowproc::{flow_targets, FlowNorm, FlowPrepConfig};
    let (shape, raw) = io::read_f32(input)?;
    if shape.len() != 3 {
        bail!(Error::Format {
            path: input.to_path_buf(),
            msg: format!("flow must be T×H×W, got {shape:?}"),
        });
    }
    let (gh, gw) = match grid {
        Some(g) => {
            let (a, b) = g
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("--grid expects HxW, got {g:?}")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("--grid expects HxW, got {g:?}")));
            (parse(a)?, parse(b)?)
        }
        None => {
            let mut rng_free = cfg.model.clone();
            rng_free.height = shape[1];
            rng_free.width = shape[2];
            Model::new(&rng_free, 0)?.grid
        }
    };
    let prep = FlowPrepConfig {
        quantile: cfg.train.flow_quantile,
        suppress: cfg.train.flow_suppress,
        norm: if cfg.train.flow_per_clip { FlowNorm::PerClip } else { FlowNorm::PerFrame },
    };
    let map = flow_targets(&raw, shape[0], shape[1], shape[2], gh, gw, &prep)?;
    let data: Vec<f32> = map.values.iter().map(|&v| v as f32).collect();
    io::write_f32(out, &[map.frames, map.height, map.width], &data)?;
    println!("wrote {}x{}x{} flow targets to {}", map.frames, map.height, map.width, out.display());
    Ok(())
}

#[cfg(not(feature = "flow"))]
fn flowprep(_: &RunConfig, _: &Path, _: &Path, _: Option<&str>) -> Result<()> {
    bail!(Error::Config("this binary was built without flow support".into()))
}
