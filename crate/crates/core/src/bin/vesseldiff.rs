use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vesseldiff::config::{Preset, Stage, TrainConfig};
use vesseldiff::generate::Generator;
use vesseldiff::graph::{load_graph_set, save_graph, write_dataset, DatasetMeta};
use vesseldiff::manifest::{unix_now, RunManifest};
use vesseldiff::metrics::evaluate_sets;
use vesseldiff::synth::{generate_set, Family, SynthConfig};
use vesseldiff::train::{train_stage, Checkpoint, RunDir};
use vesseldiff::verify::{run_checks, VerifyOptions};
use vesseldiff::{Error, Result};

#[derive(Parser)]
#[command(name = "vesseldiff", version, about = "Two-stage diffusion generator for 3D vessel graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        family: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the node or the edge model.
    Train {
        #[arg(long)]
        stage: String,
        #[arg(long)]
        data: PathBuf,
        /// Run directory; receives checkpoint.json, train.log.csv and manifest.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint file or run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate graphs from a pair of trained checkpoints.
    Sample {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare a generated set against a reference set.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ours")]
        method: String,
    },
    /// Run the built-in oracle suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[cfg(debug_assertions)]
        #[arg(long, hide = true)]
        break_posterior: bool,
    },
}

fn synth(family: &str, count: usize, out: &Path, seed: u64) -> Result<()> {
    let started = unix_now();
    if count == 0 {
        return Err(Error::Config("count ≥ 1 required".into()));
    }
    let family: Family = family.parse()?;
    let cfg = SynthConfig::for_family(family, seed);
    let graphs = generate_set(&cfg, count)?;
    let meta = DatasetMeta::fit(&graphs, Some(family.name().to_string()))?;
    write_dataset(out, "train", &graphs, &meta)?;
    let mut m = RunManifest::new("synth", started);
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(seed);
    m.outputs = vec![out.to_path_buf()];
    m.finish(out)?;
    println!("wrote {count} {} graphs to {}", family.name(), out.display());
    Ok(())
}

fn load_training_set(data: &Path) -> Result<(Vec<vesseldiff::SpatialGraph>, DatasetMeta)> {
    if !data.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", data.display())));
    }
    let meta_path = data.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::Config(format!("{} is missing meta.json", data.display())));
    }
    let meta = DatasetMeta::load(&meta_path)?;
    let graphs = load_graph_set(data)?;
    Ok((graphs, meta))
}

#[allow(clippy::too_many_arguments)]
fn train(
    stage: &str,
    data: &Path,
    out: &Path,
    preset: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    epochs: Option<usize>,
    overrides: &[String],
    resume: Option<&Path>,
) -> Result<()> {
    let started = unix_now();
    let stage: Stage = stage.parse()?;
    let preset: Preset = preset.parse()?;
    let mut cfg = TrainConfig::preset(preset, stage);
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.stage = stage;
    cfg.validate()?;
    let (graphs, meta) = load_training_set(data)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    println!(
        "training {stage} model: preset={preset} T={} lr={} batch={} epochs={} graphs={}",
        cfg.steps,
        cfg.lr,
        cfg.batch_size,
        cfg.epochs,
        graphs.len()
    );
    let outcome = train_stage(&graphs, &meta, &cfg, &RunDir(Some(out.to_path_buf())), resume.as_ref())?;
    if let Some(last) = outcome.log.last() {
        println!("epoch {} mean loss {:.6} ({:.1}s)", last.epoch, last.mean_loss, last.wallclock);
    }
    let mut m = RunManifest::new("train", started);
    m.config = serde_json::json!({
        "resolved": cfg,
        "preset_diff": cfg.diff_from_preset().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
    });
    m.seed = Some(cfg.seed);
    m.inputs = vec![data.to_path_buf()];
    m.outputs = vec![out.to_path_buf()];
    m.finish(out)
}

fn sample(nodes: &Path, edges: &Path, count: usize, out: &Path, seed: u64) -> Result<()> {
    let started = unix_now();
    if count == 0 {
        return Err(Error::Config("count ≥ 1 required".into()));
    }
    let (nc, ec) = (Checkpoint::load(nodes)?, Checkpoint::load(edges)?);
    let generator = Generator::from_checkpoints(&nc, &ec)?;
    let graphs = generator.sample_set(seed, count)?;
    let width = count.saturating_sub(1).to_string().len().max(4);
    for (i, g) in graphs.iter().enumerate() {
        save_graph(g, &out.join(format!("g{:0width$}", i, width = width)))?;
    }
    let mut m = RunManifest::new("sample", started);
    m.seed = Some(seed);
    m.config = serde_json::json!({ "count": count, "steps": nc.schedule.steps });
    m.inputs = vec![nodes.to_path_buf(), edges.to_path_buf()];
    m.outputs = vec![out.to_path_buf()];
    m.finish(out)?;
    println!("wrote {count} graphs to {}", out.display());
    Ok(())
}

fn eval(reference: &Path, gen: &Path, out: &Path, method: &str) -> Result<()> {
    let started = unix_now();
    let r = load_graph_set(reference)?;
    let g = load_graph_set(gen)?;
    let report = evaluate_sets(&r, &g)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    report.append_csv(out, method)?;
    report.write_histograms(dir)?;
    println!("{}", vesseldiff::metrics::GraphStatsReport::csv_header());
    println!("{}", report.csv_row(method));
    let mut m = RunManifest::new("eval", started);
    m.config = serde_json::json!({ "method": method });
    m.inputs = vec![reference.to_path_buf(), gen.to_path_buf()];
    m.outputs = vec![out.to_path_buf()];
    m.finish(dir)
}

fn verify(opts: &VerifyOptions) -> Result<()> {
    let results = run_checks(opts);
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{} {:<36} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!("failed checks: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { family, count, out, seed } => synth(&family, count, &out, seed),
        Command::Train {
            stage,
            data,
            out,
            preset,
            config,
            seed,
            epochs,
            overrides,
            resume,
        } => train(
            &stage,
            &data,
            &out,
            &preset,
            config.as_deref(),
            seed,
            epochs,
            &overrides,
            resume.as_deref(),
        ),
        Command::Sample { nodes, edges, count, out, seed } => sample(&nodes, &edges, count, &out, seed),
        Command::Eval {
            reference,
            gen,
            out,
            method,
        } => eval(&reference, &gen, &out, &method),
        Command::Verify {
            seed,
            #[cfg(debug_assertions)]
            break_posterior,
        } => {
            #[cfg(not(debug_assertions))]
            let break_posterior = false;
            verify(&VerifyOptions { break_posterior, seed })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
