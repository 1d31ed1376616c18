use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use heapr_core::error::Error as CoreError;
use heapr_core::harness::{
    build_corpus, calib_batches, calib_size_csv, calib_size_study, compare_methods, count_flops, importance_table,
    perplexity_with, prune_manifest, run_sweep, sweep_csv, train_model, Corpus, RunConfig, SweepOptions,
};
use heapr_core::heapr::{apply_prune, estimate_covariances_with, ImportanceTable, PassCounter, PruneManifest, TOOL_VERSION};
use heapr_core::model::{load_checkpoint, save_checkpoint, MoEModel};
use heapr_core::oracle::{
    appendix_a_check, fisher_exact_expectation_error, fisher_hessian_softmax_check, obs_prediction_report,
    shared_gradient_check, ObsOptions,
};

const OUT_ENV: &str = "HEAPR_OUT";
const MANIFEST: &str = "run_manifest.json";

#[derive(Parser)]
#[command(name = "heapr", version, about = "Atomic-expert pruning lab for toy MoE language models")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; overrides the config and the HEAPR_OUT variable.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Calib,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus,
    /// Train the toy MoE model.
    Train,
    /// Estimate per-expert gradient covariances on the calibration split.
    Calibrate,
    /// Score every atomic expert with the configured method.
    Score,
    /// Prune at the configured ratio and mode.
    Prune,
    /// Perplexity of the trained and pruned models.
    Eval,
    /// Run the analytic checks and the loss-change prediction study.
    Oracle,
    /// Perplexity and FLOPs across the configured ratios.
    Sweep {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also run a calibration-size study over these sizes.
        #[arg(long, value_delimiter = ',')]
        calib_sizes: Option<Vec<usize>>,
    },
    /// Every method across every configured seed.
    Compare {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<CoreError>() {
            Some(CoreError::Parse(_)) => Failure::Usage(format!("{e:#}")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    tool_version: String,
    config_hash: String,
    seed: u64,
    deterministic: bool,
    corpus_hash: Option<String>,
    model_hash: Option<String>,
    commands: BTreeSet<String>,
    artifacts: BTreeMap<String, String>,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_toml_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir))
}

fn stage_hash<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(heapr_core::heapr::config_hash(v)?)
}

impl Ctx {
    fn new(cfg: RunConfig, out: PathBuf) -> anyhow::Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let previous: RunManifest = fs::read_to_string(out.join(MANIFEST))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        let manifest = RunManifest {
            tool: "heapr".into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: cfg.hash()?,
            seed: cfg.model.seed,
            deterministic: cfg.run.deterministic,
            ..previous
        };
        Ok(Self { cfg, out, manifest })
    }

    fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<()> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.artifacts.insert(name.to_string(), stage_hash(&contents)?);
        Ok(())
    }

    fn finish(&mut self, command: &str) -> anyhow::Result<()> {
        self.manifest.commands.insert(command.to_string());
        let cfg_text = self.cfg.to_toml_string()?;
        fs::write(self.out.join("config.toml"), cfg_text)?;
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.out.join(MANIFEST), json + "\n")?;
        Ok(())
    }

    fn corpus_hash(&self) -> anyhow::Result<String> {
        stage_hash(&self.cfg.corpus)
    }

    fn model_hash(&self) -> anyhow::Result<String> {
        stage_hash(&(&self.cfg.model, &self.cfg.corpus, &self.cfg.train))
    }

    fn corpus(&mut self) -> anyhow::Result<Corpus> {
        let path = self.out.join("corpus.json");
        let want = self.corpus_hash()?;
        if self.manifest.corpus_hash.as_deref() == Some(want.as_str()) && path.exists() {
            return Ok(serde_json::from_str(&fs::read_to_string(&path)?)?);
        }
        let corpus = build_corpus(&self.cfg)?;
        self.write("corpus.json", &serde_json::to_string(&corpus)?)?;
        self.manifest.corpus_hash = Some(want);
        self.manifest.model_hash = None;
        Ok(corpus)
    }

    fn model(&mut self, corpus: &Corpus) -> anyhow::Result<MoEModel> {
        let path = self.out.join("model.json");
        let want = self.model_hash()?;
        if self.manifest.model_hash.as_deref() == Some(want.as_str()) && path.exists() {
            return Ok(load_checkpoint(&path)?);
        }
        let (model, report) = train_model(&self.cfg, corpus)?;
        save_checkpoint(&model, &path)?;
        self.manifest.artifacts.insert("model.json".into(), stage_hash(&fs::read_to_string(&path)?)?);
        self.write("train_report.json", &serde_json::to_string_pretty(&report)?)?;
        self.manifest.model_hash = Some(want);
        Ok(model)
    }

    fn batches(&self, corpus: &Corpus) -> anyhow::Result<Vec<Vec<Vec<u32>>>> {
        Ok(calib_batches(&self.cfg, &corpus.calib)?)
    }

    fn table(&mut self, model: &MoEModel, corpus: &Corpus) -> anyhow::Result<ImportanceTable> {
        let batches = self.batches(corpus)?;
        let table = importance_table(&self.cfg, self.cfg.run.method, model, &batches)?;
        self.write("importance.csv", &table.to_csv())?;
        Ok(table)
    }

    fn manifest_for(&self, table: &ImportanceTable) -> anyhow::Result<PruneManifest> {
        let r = &self.cfg.run;
        let mut m = prune_manifest(r.method, table, r.ratio, r.mode, self.cfg.rank_options())?;
        m.config_hash = Some(self.manifest.config_hash.clone());
        Ok(m)
    }
}

fn split(corpus: &Corpus, s: SplitArg) -> &[Vec<u32>] {
    match s {
        SplitArg::Calib => &corpus.calib,
        SplitArg::Test => &corpus.test,
    }
}

#[derive(Serialize)]
struct CovarianceSummary {
    layer: usize,
    expert: usize,
    token_count: usize,
    trace: f64,
    dim: usize,
    matrix: Vec<f64>,
}

#[derive(Serialize)]
struct OracleSummary {
    fisher_exact_error: f64,
    fisher_monte_carlo_error: f64,
    constrained_minimum_max_relative_gap: f64,
    shared_gradient_max_deviation: f64,
    obs: serde_json::Value,
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, &cfg);
    let mut ctx = Ctx::new(cfg, out)?;
    let exec = ctx.cfg.exec();
    let name = match &cli.command {
        Command::GenCorpus => {
            let c = ctx.corpus()?;
            println!("corpus: {} train, {} calibration, {} test sequences", c.train.len(), c.calib.len(), c.test.len());
            "gen-corpus"
        }
        Command::Train => {
            let c = ctx.corpus()?;
            let m = ctx.model(&c)?;
            println!("trained: {} parameters, test perplexity {:.4}", m.num_params(), perplexity_with(&m, &c.test, exec)?);
            "train"
        }
        Command::Calibrate => {
            let c = ctx.corpus()?;
            let m = ctx.model(&c)?;
            let batches = ctx.batches(&c)?;
            let covs = estimate_covariances_with(&m, &batches, exec, &PassCounter::new(batches.len()))?;
            let summary: Vec<CovarianceSummary> = covs
                .iter()
                .map(|g| CovarianceSummary {
                    layer: g.layer,
                    expert: g.expert,
                    token_count: g.token_count,
                    trace: (0..g.matrix.rows()).map(|i| g.matrix.get(i, i)).sum(),
                    dim: g.matrix.rows(),
                    matrix: g.matrix.data().to_vec(),
                })
                .collect();
            ctx.write("covariances.json", &serde_json::to_string(&summary).map_err(anyhow::Error::from)?)?;
            println!("covariances for {} experts", summary.len());
            "calibrate"
        }
        Command::Score => {
            let c = ctx.corpus()?;
            let m = ctx.model(&c)?;
            let t = ctx.table(&m, &c)?;
            println!("{} scores for {} atomic experts", t.method, t.len());
            "score"
        }
        Command::Prune => {
            let c = ctx.corpus()?;
            let m = ctx.model(&c)?;
            let t = ctx.table(&m, &c)?;
            let manifest = ctx.manifest_for(&t)?;
            let pruned = apply_prune(&m, &manifest)?;
            let flops = count_flops(&m, &pruned)?;
            ctx.write("prune_manifest.json", &manifest.to_json()?)?;
            save_checkpoint(&pruned, &ctx.out.join("pruned_model.json"))?;
            ctx.write("flops.json", &serde_json::to_string_pretty(&flops).map_err(anyhow::Error::from)?)?;
            println!(
                "pruned {} of {} atomic experts; MoE FLOPs saving {:.4}",
                manifest.pruned.len(),
                manifest.total_atomic_experts,
                flops.saving_fraction
            );
            "prune"
        }
        Command::Eval => {
            let c = ctx.corpus()?;
            let m = ctx.model(&c)?;
            let t = ctx.table(&m, &c)?;
            let pruned = apply_prune(&m, &ctx.manifest_for(&t)?)?;
            let mut report = BTreeMap::new();
            for (label, model) in [("dense", &m), ("pruned", &pruned)] {
                let calib = perplexity_with(model, &c.calib, exec)?;
                let test = perplexity_with(model, &c.test, exec)?;
                println!("{label}: calibration {calib:.4} test {test:.4}");
                report.insert(label, BTreeMap::from([("calib", calib), ("test", test)]));
            }
            ctx.write("eval.json", &serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?)?;
            "eval"
        }
        Command::Oracle => {
            let c = ctx.corpus()?;
            let m = ctx.model(&c)?;
            let batches = ctx.batches(&c)?;
            let counter = PassCounter::new(batches.len());
            let covs = estimate_covariances_with(&m, &batches, exec, &counter)?;
            let table = heapr_core::heapr::compute_importances_with(&m, &batches, &covs, exec, &counter)?;
            let opts = ObsOptions {
                seed: ctx.cfg.model.seed,
                ..ObsOptions::default()
            };
            let obs = obs_prediction_report(&m, &batches, &table, &opts)?;
            let mut constrained_gap = 0.0f64;
            let mut rng = heapr_core::rng::SeededRng::new(ctx.cfg.model.seed);
            let w = &m.layers[0].experts[0];
            for j in 0..w.channels().min(8) {
                let x: Vec<f64> = (0..w.d_model()).map(|_| rng.normal()).collect();
                let g: Vec<f64> = (0..w.d_model()).map(|_| rng.normal()).collect();
                let a = appendix_a_check(w, j, &x, &g)?;
                constrained_gap = constrained_gap.max((a.cost - a.quad).abs() / a.quad.abs().max(f64::MIN_POSITIVE));
            }
            let shared = shared_gradient_check(&m, &batches[0], 4, 2, 1e-4, ctx.cfg.model.seed)?;
            let summary = OracleSummary {
                fisher_exact_error: fisher_exact_expectation_error(8, ctx.cfg.model.seed)?,
                fisher_monte_carlo_error: fisher_hessian_softmax_check(8, 100_000, ctx.cfg.model.seed)?,
                constrained_minimum_max_relative_gap: constrained_gap,
                shared_gradient_max_deviation: shared.max_fd_deviation.max(shared.max_stored_deviation),
                obs: serde_json::from_str(&obs.summary_json()?).map_err(anyhow::Error::from)?,
            };
            ctx.write("obs.csv", &obs.to_csv())?;
            ctx.write("oracle_summary.json", &serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?)?;
            println!("spearman {:.4} over {} atomic experts", obs.spearman, obs.rows.len());
            "oracle"
        }
        Command::Sweep { split: s, calib_sizes } => {
            let c = ctx.corpus()?;
            let m = ctx.model(&c)?;
            let t = ctx.table(&m, &c)?;
            let r = &ctx.cfg.run;
            let opts = SweepOptions {
                method: r.method,
                mode: r.mode,
                seed: ctx.cfg.model.seed,
                rank: ctx.cfg.rank_options(),
                exec,
            };
            let rows = run_sweep(&m, &t, split(&c, *s), &r.ratios.clone(), &opts)?;
            ctx.write("sweep.csv", &sweep_csv(&rows))?;
            if let Some(sizes) = calib_sizes {
                if sizes.is_empty() || sizes.contains(&0) {
                    return Err(Failure::Usage("--calib-sizes needs positive sizes".into()));
                }
                ctx.cfg.run.calib_sizes = sizes.clone();
                let study = calib_size_study(&ctx.cfg, &m, &c.calib, split(&c, *s), ctx.cfg.model.seed)?;
                ctx.write("calib_sizes.csv", &calib_size_csv(&study))?;
            }
            for row in &rows {
                println!("r={:<5} ppl {:.4} flops saving {:.4}", row.ratio, row.perplexity, row.flops_saving);
            }
            "sweep"
        }
        Command::Compare { split: s } => {
            let mut rows = Vec::new();
            for seed in ctx.cfg.run.seeds.clone() {
                let seed_cfg = ctx.cfg.for_seed(seed);
                let mut sub = Ctx::new(seed_cfg, ctx.out.join(format!("seed-{seed}")))?;
                let c = sub.corpus()?;
                let m = sub.model(&c)?;
                let batches = sub.batches(&c)?;
                let methods = sub.cfg.run.compare_methods.clone();
                let seed_rows = compare_methods(&sub.cfg, &m, &batches, split(&c, *s), &methods, seed)?;
                sub.write("compare.csv", &sweep_csv(&seed_rows))?;
                sub.finish("compare")?;
                rows.extend(seed_rows);
            }
            ctx.write("compare.csv", &sweep_csv(&rows))?;
            println!("{} rows across {} seeds", rows.len(), ctx.cfg.run.seeds.len());
            "compare"
        }
    };
    ctx.finish(name)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
