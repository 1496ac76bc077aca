//! `gems`: every pipeline phase as a subcommand over one artifact directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gems_core::config::{profile, RunConfig};
use gems_core::data::{generate_synthetic, io};
use gems_core::encoder::lifecycle::MemoryStore;
use gems_core::eval::{table, EvalReport};
use gems_core::model::Streams;
use gems_core::numerics::checkpoint::{load_params, save_params, write_atomic};
use gems_core::numerics::Precision;
use gems_core::pipeline::{self, latency_table, Prepared};
use gems_core::quantizer::{Codebook, SidIndex};
use gems_core::training::{examples, write_reports, Trainer};
use gems_core::{GemsError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const SIDS_FILE: &str = "sids.tsv";
pub const STAGE0_FILE: &str = "stage0.ckpt";
pub const MEMORY_FILE: &str = "memories.bin";
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "gems", version, about = "Multi-stream generative recommender")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Artifact directory shared by all subcommands.
    #[arg(long, default_value = "run")]
    dir: PathBuf,
    /// TOML config; defaults to `<dir>/config.toml` when present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting profile: desk, acceptance or toy.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Override one value, e.g. `--set model.d_h=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for training and evaluation.
    #[arg(long)]
    workers: Option<usize>,
    /// Single worker, fixed order.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic event log and catalog.
    Datagen(Common),
    /// Fit the residual codebook and assign semantic IDs.
    Quantize(Common),
    /// Train the lifecycle compressor (stage 0) and write the memory store.
    Compress(Common),
    /// Train stages 1-3.
    Train(Common),
    /// Beam-search evaluation of the trained model.
    Eval(Common),
    /// Train and evaluate the four stream settings.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds to run (seed, seed+1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Train and evaluate fusion modes a-d and report per-stream mass.
    FusionStudy(Common),
    /// Dense versus indexer-selected attention latency.
    BenchIndexer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Train and evaluate a sweep of hidden sizes.
    ScaleStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "64,128")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

/// Resolves defaults < file < flags into a validated config.
fn resolve(c: &Common) -> Result<RunConfig> {
    let base = profile(&c.profile)?;
    let path = c.config.clone().or_else(|| {
        let p = c.dir.join(CONFIG_FILE);
        p.exists().then_some(p)
    });
    let text = match &path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| GemsError::config("config", format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut sets = c.sets.clone();
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(w) = c.workers {
        sets.push(format!("workers={w}"));
    }
    if c.deterministic {
        sets.push("workers=1".into());
    }
    RunConfig::layered(&base, text.as_deref(), &sets)
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(GemsError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

fn write_text(path: &Path, manifest: &str, body: &str) -> Result<()> {
    write_atomic(path, format!("{manifest}{body}").as_bytes())
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    let data = io::ingest(dir)?;
    let (cb, sids) = (dir.join(CODEBOOK_FILE), dir.join(SIDS_FILE));
    require(&cb, "quantize")?;
    require(&sids, "quantize")?;
    Prepared::with_sids(data, Codebook::load(&cb)?, SidIndex::load(&sids)?)
}

fn precision(cfg: &RunConfig) -> Precision {
    if cfg.train.precision == "f32" {
        Precision::F32
    } else {
        Precision::F64
    }
}

fn datagen(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    fs::create_dir_all(&c.dir)?;
    let ds = generate_synthetic(&cfg.synth(), cfg.seed)?;
    let m = cfg.manifest("datagen");
    io::export(&ds, &c.dir, &m)?;
    write_text(&c.dir.join(CONFIG_FILE), &m, &cfg.to_toml())?;
    log::info!("wrote {} users, {} items to {}", ds.users.len(), ds.catalog.len(), c.dir.display());
    Ok(())
}

fn quantize(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let ds = io::ingest(&c.dir)?;
    let cb = pipeline::quantize(&cfg, &ds)?;
    let m = cfg.manifest("quantize");
    let prep = Prepared::new(ds, cb)?;
    prep.codebook.save(&c.dir.join(CODEBOOK_FILE), &m)?;
    prep.sids.save(&c.dir.join(SIDS_FILE), &m)?;
    log::info!(
        "codebook {:?}: {} distinct ids, collision rate {:.3}",
        prep.codebook.sizes(),
        prep.sids.num_sids(),
        prep.sids.collision_rate()
    );
    Ok(())
}

fn compress(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let prep = load_prepared(&c.dir)?;
    let (mut store, model) = pipeline::build_model(&cfg, &prep)?;
    let reports = pipeline::train_compressor(&cfg, &prep, &mut store, &model)?;
    let m = cfg.manifest("compress");
    save_params(&c.dir.join(STAGE0_FILE), &store, precision(&cfg), &m)?;
    let mut ms = pipeline::compress(&cfg, &prep, &store, &model)?;
    ms.manifest = m.clone();
    ms.save(&c.dir.join(MEMORY_FILE))?;
    let mut buf = m.into_bytes();
    write_reports(&mut buf, &reports)?;
    write_atomic(&c.dir.join("losses_stage0.jsonl"), &buf)?;
    log::info!("compressed {} users", ms.len());
    Ok(())
}

/// Memories required by the config, or an empty store.
fn memories_for(cfg: &RunConfig, dir: &Path) -> Result<MemoryStore> {
    if cfg.model_config()?.streams.lifecycle {
        require(&dir.join(STAGE0_FILE), "compress")?;
        MemoryStore::load(&dir.join(MEMORY_FILE))
    } else {
        Ok(MemoryStore::new(cfg.model.m_c, cfg.model.d_h))
    }
}

fn train(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let prep = load_prepared(&c.dir)?;
    let memories = memories_for(&cfg, &c.dir)?;
    let (mut store, model) = pipeline::build_model(&cfg, &prep)?;
    if c.dir.join(STAGE0_FILE).exists() {
        load_params(&c.dir.join(STAGE0_FILE), &mut store)?;
    }
    let m = cfg.manifest("train");
    let exs = examples(&prep.data, gems_core::data::Split::Train, &prep.items);
    let mut tr = Trainer::new(&model, &prep.items, cfg.train_config(1)?);
    for stage in 1..=3u8 {
        let steps = tr.run_stage(&mut store, stage, &exs, &memories)?;
        save_params(&c.dir.join(format!("stage{stage}.ckpt")), &store, precision(&cfg), &m)?;
        log::info!("stage {stage}: {steps} steps, last ntp {:.4}", tr.reports.last().map_or(0.0, |r| r.ntp));
    }
    let mut buf = m.clone().into_bytes();
    write_reports(&mut buf, &tr.reports)?;
    write_atomic(&c.dir.join("losses.jsonl"), &buf)?;
    save_params(&c.dir.join(MODEL_FILE), &store, precision(&cfg), &m)
}

fn eval(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let prep = load_prepared(&c.dir)?;
    let memories = memories_for(&cfg, &c.dir)?;
    let (mut store, model) = pipeline::build_model(&cfg, &prep)?;
    require(&c.dir.join(MODEL_FILE), "train")?;
    load_params(&c.dir.join(MODEL_FILE), &mut store)?;
    let r = pipeline::evaluate_run(&cfg, &prep, &store, &model, &memories, &cfg.model.streams)?;
    write_reports_to(c, &cfg, "eval", "eval", &[r])
}

fn write_reports_to(c: &Common, cfg: &RunConfig, command: &str, stem: &str, reports: &[EvalReport]) -> Result<()> {
    let m = cfg.manifest(command);
    let json: String = reports.iter().map(|r| r.to_json_line() + "\n").collect();
    write_text(&c.dir.join(format!("{stem}.jsonl")), &m, &json)?;
    let text = table(reports);
    write_text(&c.dir.join(format!("{stem}.txt")), &m, &text)?;
    print!("{text}");
    Ok(())
}

/// Data and codebook from `dir`, written first when absent.
fn prepared_or_generate(c: &Common, cfg: &RunConfig) -> Result<Prepared> {
    if c.dir.join(io::EVENTS_FILE).exists() {
        load_prepared(&c.dir)
    } else {
        pipeline::prepare(cfg)
    }
}

fn ablate(c: &Common, seeds: u64) -> Result<()> {
    let cfg = resolve(c)?;
    let mut reports = Vec::new();
    for s in 0..seeds {
        let mut base = cfg.clone();
        base.seed = cfg.seed + s;
        let prep = if seeds == 1 { prepared_or_generate(c, &base)? } else { pipeline::prepare(&base)? };
        for st in Streams::ABLATIONS {
            let mut rc = base.clone();
            rc.model.streams = st.label();
            let label = format!("{} (seed {})", st.label(), rc.seed);
            let o = pipeline::run(&rc, &prep, &label)?;
            log::info!("{label}: H@L3 {:.4} in {:.0}s", o.report.hrecall_last(), o.seconds);
            reports.push(o.report);
        }
    }
    write_reports_to(c, &cfg, "ablate", "ablate", &reports)
}

fn fusion_study(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let prep = prepared_or_generate(c, &cfg)?;
    let mut reports = Vec::new();
    for f in ["a", "b", "c", "d"] {
        let mut rc = cfg.clone();
        rc.model.fusion = f.into();
        let o = pipeline::run(&rc, &prep, &format!("mode {f}"))?;
        reports.push(o.report);
    }
    let mut mass = String::from("mode  recent  mid  lifecycle\n");
    for r in &reports {
        mass.push_str(&format!("{}  {:.4}  {:.4}  {:.4}\n", r.label, r.mass[0], r.mass[1], r.mass[2]));
    }
    write_text(&c.dir.join("fusion_mass.txt"), &cfg.manifest("fusion-study"), &mass)?;
    write_reports_to(c, &cfg, "fusion-study", "fusion", &reports)
}

fn bench_indexer(c: &Common, lengths: &[usize], k: usize, reps: usize) -> Result<()> {
    let cfg = resolve(c)?;
    fs::create_dir_all(&c.dir)?;
    let rows = pipeline::indexer_latency(&cfg, lengths, k, reps)?;
    let m = cfg.manifest("bench-indexer");
    let json: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect();
    write_text(&c.dir.join("bench_indexer.jsonl"), &m, &json)?;
    let text = latency_table(&rows);
    write_text(&c.dir.join("bench_indexer.txt"), &m, &text)?;
    print!("{text}");
    Ok(())
}

fn scale_study(c: &Common, dims: &[usize], seeds: u64) -> Result<()> {
    let cfg = resolve(c)?;
    let mut reports = Vec::new();
    for s in 0..seeds {
        let mut base = cfg.clone();
        base.seed = cfg.seed + s;
        let prep = if seeds == 1 { prepared_or_generate(c, &base)? } else { pipeline::prepare(&base)? };
        for &d in dims {
            let mut rc = base.clone();
            // the configured lr belongs to the configured width
            rc.train.lr *= base.model.d_h as f64 / d as f64;
            rc.model.d_h = d;
            rc.validate()?;
            let o = pipeline::run(&rc, &prep, &format!("d_h={d} (seed {})", rc.seed))?;
            reports.push(o.report);
        }
    }
    write_reports_to(c, &cfg, "scale-study", "scale", &reports)
}

/// 0 ok, 1 config, 2 data, 3 internal.
fn exit_code(e: &GemsError) -> u8 {
    match e {
        GemsError::Config { .. } => 1,
        GemsError::Data(_)
        | GemsError::Parse { .. }
        | GemsError::NonMonotone { .. }
        | GemsError::Format { .. }
        | GemsError::MissingArtifact { .. }
        | GemsError::Io(_) => 2,
        GemsError::Dimension { .. } | GemsError::Contract(_) => 3,
    }
}

fn main() -> ExitCode {
    gems_core::numerics::alloc::tune();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = std::panic::catch_unwind(|| match &cli.cmd {
        Cmd::Datagen(c) => datagen(c),
        Cmd::Quantize(c) => quantize(c),
        Cmd::Compress(c) => compress(c),
        Cmd::Train(c) => train(c),
        Cmd::Eval(c) => eval(c),
        Cmd::Ablate { common, seeds } => ablate(common, *seeds),
        Cmd::FusionStudy(c) => fusion_study(c),
        Cmd::BenchIndexer { common, lengths, k, reps } => bench_indexer(common, lengths, *k, *reps),
        Cmd::ScaleStudy { common, dims, seeds } => scale_study(common, dims, *seeds),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(3),
    }
}
