//! Command-line surface.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::atm::attention_csv;
use crate::crg::{self, Backend, LiveConfig, MiningConfig, ReplayStore};
use crate::error::{Error, Result};
use crate::files::{read_json, write_bytes, write_json, write_jsonl, write_text};
use crate::gradcheck::{self, GradcheckConfig};
use crate::metrics::EvalMode;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::data::{gen_synthetic_dataset, synthetic_crg_fixtures, Dataset, GenConfig, PatchBag, Split, Vocabulary};
use crate::pipeline::eval::{
    eval_table, evaluate_images, localization_accuracy, mean_delta, oracle_table, patch_scores_csv, pgm, reports,
    reports_csv,
};
use crate::pipeline::{Model, ModelConfig, Trainer};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const FIXTURES_FILE: &str = "crg_fixtures.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Parser, Debug)]
#[command(name = "ovmlr", version, about = "Open-vocabulary multi-label recognition toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-label dataset, vocabulary and relation-mining fixtures.
    GenData(GenDataArgs),
    /// Mine the class relationship graph from a language model or a recorded query log.
    BuildCrg(BuildCrgArgs),
    /// Train a model and write checkpoints, a loss log and a test-split report.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a JSON report plus one CSV row per (mode, K).
    Eval(EvalArgs),
    /// Check analytic gradients of the training objective against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export one image's patch-score map (CSV and PGM) and graph attention rows.
    ExportMaps(ExportMapsArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON generator config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub unseen: Option<usize>,
    #[arg(long)]
    pub images: Option<usize>,
    /// Patches per image; must be a perfect square.
    #[arg(long)]
    pub patches: Option<usize>,
    /// Raw patch width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Standard deviation of the noise on planted patches.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Minimum positive classes per image.
    #[arg(long)]
    pub min_pos: Option<usize>,
    /// Maximum positive classes per image.
    #[arg(long)]
    pub max_pos: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Live,
    Replay,
}

#[derive(Args, Debug)]
pub struct BuildCrgArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, value_enum, default_value = "replay")]
    pub backend: BackendKind,
    /// Query log to replay (required with --backend replay).
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Independent queries per class.
    #[arg(long, default_value_t = 3)]
    pub queries: usize,
    /// Nucleus-sampling parameter sent to the live endpoint.
    #[arg(long, default_value_t = 0.3)]
    pub top_p: f64,
    /// In-neighbours kept per class.
    #[arg(long, default_value_t = 8)]
    pub neighbors: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// JSON model config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// zsl or gzsl.
    #[arg(long, default_value = "gzsl")]
    pub mode: EvalMode,
    /// Comma-separated K values, reported in the given order.
    #[arg(long, default_value = "3,5", value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Score images with their ground-truth labels instead of the model.
    #[arg(long)]
    pub oracle: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// JSON gradient-check config; defaults to the seeded micro instance.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Maximum accepted relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Directory for the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportMapsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub image_id: usize,
    /// Class name or numeric id.
    #[arg(long)]
    pub class: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    /// Start time, seconds since the Unix epoch.
    pub started_at: u64,
    pub wall_clock_seconds: f64,
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

struct Run {
    name: &'static str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(name: &'static str) -> Self {
        Run {
            name,
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn output(&mut self, p: PathBuf) -> PathBuf {
        self.outputs.push(p.clone());
        p
    }

    fn finish(self, dir: &Path, args: &[String], started: SystemTime, clock: Instant) -> Result<()> {
        let manifest = RunManifest {
            command: self.name.to_string(),
            args: args.to_vec(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            version: version_string(),
            started_at: started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_seconds: clock.elapsed().as_secs_f64(),
        };
        write_json(&dir.join(format!("{}.manifest.json", self.name)), &manifest)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, args: &[String]) -> Result<i32> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let (run, dir, code) = match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::BuildCrg(a) => build_crg(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(a) => gradcheck_cmd(a)?,
        Command::ExportMaps(a) => export_maps(a)?,
    };
    if let Some(dir) = dir {
        run.finish(&dir, args, started, clock)?;
    }
    Ok(code)
}

type Outcome = (Run, Option<PathBuf>, i32);

fn gen_data(a: GenDataArgs) -> Result<Outcome> {
    let mut run = Run::new("gen-data");
    let mut cfg: GenConfig = match &a.config {
        Some(p) => {
            run.input(p);
            run.config = Some(p.clone());
            read_json(p)?
        }
        None => GenConfig::default(),
    };
    if let Some(v) = a.classes {
        cfg.classes = v;
    }
    if let Some(v) = a.unseen {
        cfg.unseen = v;
    }
    if let Some(v) = a.images {
        cfg.images = v;
    }
    if let Some(p) = a.patches {
        let side = (p as f64).sqrt().round() as usize;
        if side * side != p || p == 0 {
            return Err(Error::Config(format!("--patches must be a positive perfect square, got {p}")));
        }
        cfg.grid_h = side;
        cfg.grid_w = side;
    }
    if let Some(v) = a.dim {
        cfg.d_in = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.min_pos {
        cfg.min_pos = v;
    }
    if let Some(v) = a.max_pos {
        cfg.max_pos = v;
    }
    run.seed = Some(cfg.seed);
    let s = gen_synthetic_dataset(&cfg)?;
    s.dataset.save(&run.output(a.out.join(DATASET_FILE)))?;
    s.vocab.save(&run.output(a.out.join(VOCAB_FILE)))?;
    let fixtures = synthetic_crg_fixtures(&s.vocab.names, MiningConfig::default().queries, cfg.seed);
    write_jsonl(&run.output(a.out.join(FIXTURES_FILE)), &fixtures)?;
    write_json(&run.output(a.out.join("gen_config.json")), &cfg)?;
    println!(
        "wrote {} images ({} classes, {} unseen) to {}",
        s.dataset.bags.len(),
        cfg.classes,
        cfg.unseen,
        a.out.display()
    );
    Ok((run, Some(a.out), 0))
}

fn build_crg(a: BuildCrgArgs) -> Result<Outcome> {
    let mut run = Run::new("build-crg");
    run.input(&a.vocab);
    let vocab = Vocabulary::load(&a.vocab)?;
    let backend = match a.backend {
        BackendKind::Replay => {
            let p = a
                .fixtures
                .as_ref()
                .ok_or_else(|| Error::Config("--backend replay needs --fixtures".into()))?;
            run.input(p);
            Backend::Replay(ReplayStore::load(p)?)
        }
        BackendKind::Live => Backend::Live(LiveConfig::from_env(a.top_p)?),
    };
    let cfg = MiningConfig {
        queries: a.queries,
        top_p: a.top_p,
        neighbors: a.neighbors,
    };
    if cfg.queries == 0 || cfg.neighbors == 0 {
        return Err(Error::Config("--queries and --neighbors must be ≥ 1".into()));
    }
    let result = crg::mine_all(&vocab.names, &vocab.seen_mask, &backend, &cfg)?;
    result.write(&a.out)?;
    for f in [crg::RELATIONS_FILE, crg::QUERY_LOG_FILE, crg::GRAPH_FILE] {
        run.output(a.out.join(f));
    }
    if result.parse_warnings > 0 {
        log::warn!("{} response item(s) could not be parsed", result.parse_warnings);
    }
    println!(
        "mined {} relations over {} classes into {}",
        result.relations.len(),
        vocab.len(),
        a.out.display()
    );
    Ok((run, Some(a.out), 0))
}

fn check_data(cfg: &ModelConfig, bags: &[&PatchBag]) -> Result<()> {
    let b = &cfg.backbone;
    for bag in bags {
        if bag.patches.shape() != [b.num_patches(), b.d_in] {
            return Err(Error::Config(format!(
                "image {} has patches {:?}, config expects [{}, {}]",
                bag.id,
                bag.patches.shape(),
                b.num_patches(),
                b.d_in
            )));
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<Outcome> {
    let mut run = Run::new("train");
    for p in [&a.data, &a.vocab, &a.graph] {
        run.input(p);
    }
    let data = Dataset::load(&a.data)?;
    let train_bags = data.split(Split::Train);
    let mut trainer = match &a.resume {
        Some(ck) => {
            run.input(ck);
            let ck = Checkpoint::load(ck)?;
            check_data(&ck.config, &train_bags)?;
            ck.trainer(&train_bags)?
        }
        None => {
            let vocab = Vocabulary::load(&a.vocab)?;
            let graph = crg::read_graph(&a.graph)?;
            let cfg: ModelConfig = match &a.config {
                Some(p) => {
                    run.input(p);
                    run.config = Some(p.clone());
                    read_json(p)?
                }
                None => ModelConfig::default(),
            };
            check_data(&cfg, &train_bags)?;
            Trainer::new(Model::new(cfg, vocab, graph)?, &train_bags)?
        }
    };
    run.seed = Some(trainer.model.cfg.seed);
    let every = trainer.model.cfg.checkpoint_every;
    let out = a.out.clone();
    let mut written = Vec::new();
    let log = trainer.run(|t, r| {
        if every > 0 && (r.step + 1) % every == 0 && r.step + 1 < t.model.cfg.steps {
            let p = out.join(format!("checkpoint-{:06}.bin", r.step + 1));
            Checkpoint::from_trainer(t).save(&p)?;
            written.push(p);
        }
        Ok(())
    })?;
    for p in written {
        run.output(p);
    }
    Checkpoint::from_trainer(&trainer).save(&run.output(a.out.join(CHECKPOINT_FILE)))?;
    write_jsonl(&run.output(a.out.join(TRAIN_LOG_FILE)), &log)?;

    let model = trainer.into_model();
    let test = data.split(Split::Test);
    if !test.is_empty() {
        let evals = evaluate_images(&model, &test, false)?;
        let table = eval_table(&evals, &test)?;
        let mut modes = vec![EvalMode::Gzsl];
        if model.vocab.seen_mask.iter().any(|s| !s) {
            modes.push(EvalMode::Zsl);
        }
        let reps = reports(&table, &modes, &model.vocab.seen_mask, &[3, 5])?;
        write_json(&run.output(a.out.join(REPORT_FILE)), &reps)?;
        for r in &reps {
            println!("{}: mAP {:.4}, F1@3 {:.4}, F1@5 {:.4}", r.mode.as_str(), r.map, r.f1[0], r.f1[1]);
        }
    }
    println!("trained {} steps; checkpoint in {}", model.cfg.steps, a.out.display());
    Ok((run, Some(a.out), 0))
}

fn select_split(data: &Dataset, split: SplitArg) -> Vec<&PatchBag> {
    match split {
        SplitArg::Train => data.split(Split::Train),
        SplitArg::Test => data.split(Split::Test),
        SplitArg::All => data.bags.iter().collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub images: usize,
    /// Fraction of planted positive (image, class) pairs whose best patch is planted.
    pub localization_accuracy: f64,
    pub localization_pairs: usize,
    pub mean_abs_delta: f64,
}

fn eval(a: EvalArgs) -> Result<Outcome> {
    let mut run = Run::new("eval");
    run.input(&a.checkpoint);
    run.input(&a.data);
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Error::Config("--k values must be ≥ 1".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let bags = select_split(&data, a.split);
    if bags.is_empty() {
        return Err(Error::Config("selected split has no images".into()));
    }
    check_data(&ck.config, &bags)?;
    let seen = ck.vocab.seen_mask.clone();
    let (table, diag) = if a.oracle {
        (oracle_table(&bags)?, None)
    } else {
        let model = ck.model()?;
        let evals = evaluate_images(&model, &bags, false)?;
        let (loc, pairs) = localization_accuracy(&evals, &bags, None);
        let diag = Diagnostics {
            images: bags.len(),
            localization_accuracy: loc,
            localization_pairs: pairs,
            mean_abs_delta: mean_delta(&evals),
        };
        (eval_table(&evals, &bags)?, Some(diag))
    };
    let reps = reports(&table, &[a.mode], &seen, &a.k)?;
    write_json(&run.output(a.out.join(REPORT_FILE)), &reps[0])?;
    write_text(&run.output(a.out.join(REPORT_CSV_FILE)), &reports_csv(&reps))?;
    if let Some(d) = diag {
        write_json(&run.output(a.out.join(DIAGNOSTICS_FILE)), &d)?;
    }
    let r = &reps[0];
    println!("{}: mAP {:.4}", r.mode.as_str(), r.map);
    for (i, k) in r.k.iter().enumerate() {
        println!("  K={k}: P {:.4} R {:.4} F1 {:.4}", r.precision[i], r.recall[i], r.f1[i]);
    }
    Ok((run, Some(a.out), 0))
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<Outcome> {
    let mut run = Run::new("gradcheck");
    let mut cfg: GradcheckConfig = match &a.config {
        Some(p) => {
            run.input(p);
            run.config = Some(p.clone());
            read_json(p)?
        }
        None => GradcheckConfig::default(),
    };
    if let Some(t) = a.tolerance {
        cfg.tolerance = t;
    }
    run.seed = Some(cfg.seed);
    let report = gradcheck::run(&cfg)?;
    for g in &report.groups {
        println!("{:<36} {:>5} checked, max rel err {:.3e}", g.name, g.checked, g.max_rel_err);
    }
    if report.passed {
        println!("PASS: max relative error {:.3e} < {:.1e}", report.max_rel_err, report.tolerance);
    } else {
        println!(
            "FAIL: worst {} with relative error {:.3e} (tolerance {:.1e})",
            report.worst, report.max_rel_err, report.tolerance
        );
    }
    if let Some(dir) = &a.out {
        write_json(&run.output(dir.join(GRADCHECK_FILE)), &report)?;
    }
    Ok((run, a.out, if report.passed { 0 } else { 1 }))
}

fn export_maps(a: ExportMapsArgs) -> Result<Outcome> {
    let mut run = Run::new("export-maps");
    run.input(&a.checkpoint);
    run.input(&a.data);
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let bag = data
        .get(a.image_id)
        .ok_or_else(|| Error::Lookup(format!("no image with id {}", a.image_id)))?;
    let class = match ck.vocab.names.iter().position(|n| *n == a.class) {
        Some(c) => c,
        None => a
            .class
            .parse::<usize>()
            .ok()
            .filter(|&c| c < ck.vocab.len())
            .ok_or_else(|| Error::Lookup(format!("unknown class {:?}", a.class)))?,
    };
    check_data(&ck.config, &[bag])?;
    let model = ck.model()?;
    let e = model.evaluate_image(&model.prepare(bag)?, true)?;
    let scores = e.s_tilde.column(class);
    let (h, w) = (model.cfg.backbone.grid_h, model.cfg.backbone.grid_w);
    let stem = format!("image{}_{}", bag.id, ck.vocab.names[class]);
    write_text(&run.output(a.out.join(format!("{stem}.csv"))), &patch_scores_csv(&scores, w))?;
    write_bytes(&run.output(a.out.join(format!("{stem}.pgm"))), &pgm(&scores, w, h)?)?;
    let mm: Vec<_> = e
        .attention
        .into_iter()
        .filter(|r| r.stage == crate::atm::Stage::Multimodal)
        .collect();
    write_text(
        &run.output(a.out.join(format!("image{}_attention.csv", bag.id))),
        &attention_csv(&mm),
    )?;
    println!("wrote maps for image {} / {} to {}", bag.id, ck.vocab.names[class], a.out.display());
    Ok((run, Some(a.out), 0))
}
