use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use timefuse::checkpoint::{load_stage1, load_stage2, save_stage2, Stage2Save};
use timefuse::config::{output_root, Preset, RunConfig};
use timefuse::gradcheck::{run_all, GradCheckConfig};
use timefuse::pipeline::{self, BASELINE, TIME_AWARE};
use timefuse::probe::{ProbeReport, CSV_HEADER};
use timefuse::store::write_atomic;
use timefuse::synth::Corpus;
use timefuse::unimodal::UnimodalModel;
use timefuse::Error;

#[derive(Parser)]
#[command(name = "timefuse", version, about = "Time-aware bimodal pretraining and linear-probe evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Base preset: paper-scale or desk.
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    /// JSON file merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key.path=value` override, applied after the file; repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; defaults to $TIMEFUSE_OUT or ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    TimeAware,
    NonTimeAware,
}

impl ModelKind {
    fn time_aware(self) -> bool {
        matches!(self, ModelKind::TimeAware)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus.
    GenData,
    /// Stage-1 pretraining of one encoder per modality.
    Pretrain1,
    /// Stage-2 pretraining on top of the Stage-1 checkpoints.
    Pretrain2 {
        /// Which variant to train; both when omitted.
        #[arg(long)]
        model: Option<ModelKind>,
    },
    /// Fine-tune a Stage-2 checkpoint with fresh fusion adapters.
    Finetune {
        #[arg(long, value_enum, default_value = "time-aware")]
        model: ModelKind,
        /// Corpus directory to fine-tune on; defaults to the run's corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Rank modality pairs with the Stage-1 encoders.
    Screen,
    /// Linear probes on frozen fused embeddings.
    Probe {
        /// `all` for every pair; otherwise the configured pair.
        #[arg(long)]
        pairs: Option<String>,
        #[arg(long, value_enum, default_value = "time-aware")]
        model: ModelKind,
        /// Train and probe both variants end to end and report them side by side.
        #[arg(long)]
        compare_time_aware: bool,
        /// Also write and print the flat CSV table.
        #[arg(long)]
        csv: bool,
    },
    /// Paired evaluation of the stored time-aware and baseline checkpoints.
    Eval {
        #[arg(long)]
        csv: bool,
    },
    /// Write frozen embeddings with positions and labels as JSON lines.
    DumpEmbeddings {
        #[arg(long, value_enum, default_value = "time-aware")]
        model: ModelKind,
        #[arg(long)]
        finetuned: bool,
    },
    /// Finite-difference gradient checks of both training objectives.
    Gradcheck,
}

enum Failure {
    Config(String),
    Runtime(String),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(format!("serialization error: {e}"))
    }
}

type Res<T> = std::result::Result<T, Failure>;

struct Ctx {
    cfg: RunConfig,
    seeds: Vec<u64>,
    root: PathBuf,
}

impl Ctx {
    fn under(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn corpus_dir(&self, seed: u64) -> PathBuf {
        self.under(&self.cfg.paths.corpus).join(format!("seed-{seed}"))
    }

    fn ckpt_dir(&self, seed: u64) -> PathBuf {
        self.under(&self.cfg.paths.checkpoints).join(format!("seed-{seed}"))
    }

    fn reports_dir(&self) -> PathBuf {
        self.under(&self.cfg.paths.reports)
    }

    fn corpus(&self, seed: u64) -> Res<Corpus> {
        Ok(Corpus::load(&self.corpus_dir(seed))?)
    }

    fn stage1(&self, seed: u64, corpus: &Corpus) -> Res<Vec<UnimodalModel<f32>>> {
        let root = self.ckpt_dir(seed);
        corpus
            .modalities()
            .iter()
            .map(|m| Ok(load_stage1(&root.join(pipeline::stage1_dir(m)))?.0))
            .collect()
    }

    fn write_json(&self, name: &str, body: Value) -> Res<PathBuf> {
        let path = self.reports_dir().join(name);
        let mut text = serde_json::to_string_pretty(&body)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Wraps a payload with the effective config so the artifact can be re-run.
    fn envelope(&self, command: &str, payload: Value) -> Value {
        json!({
            "command": command,
            "seeds": self.seeds,
            "config_hash": self.cfg.short_hash(),
            "config": self.cfg.to_json(),
            "result": payload,
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Gradcheck(m)) => {
            eprintln!("gradcheck failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Res<()> {
    let c = cli.common;
    let mut cfg = RunConfig::resolve(c.preset, c.config.as_deref(), &c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if c.dry_run {
        println!("{}", cfg.echo());
        return Ok(());
    }
    let ctx = Ctx { seeds: cfg.seeds.clone(), cfg, root: c.out.unwrap_or_else(output_root) };
    match cli.cmd {
        Cmd::GenData => gen_data(&ctx),
        Cmd::Pretrain1 => pretrain1(&ctx),
        Cmd::Pretrain2 { model } => pretrain2(&ctx, model),
        Cmd::Finetune { model, corpus } => finetune(&ctx, model, corpus),
        Cmd::Screen => screen(&ctx),
        Cmd::Probe { pairs, model, compare_time_aware, csv } => {
            if compare_time_aware {
                compare(&ctx, csv)
            } else {
                probe(&ctx, pairs.as_deref(), model, csv)
            }
        }
        Cmd::Eval { csv } => eval(&ctx, csv),
        Cmd::DumpEmbeddings { model, finetuned } => dump(&ctx, model, finetuned),
        Cmd::Gradcheck => gradcheck(&ctx),
    }
}

fn gen_data(ctx: &Ctx) -> Res<()> {
    for &seed in &ctx.seeds {
        let corpus = pipeline::corpus_for(&ctx.cfg, seed)?;
        let dir = ctx.corpus_dir(seed);
        corpus.save(&dir, Some(ctx.envelope("gen-data", json!({ "seed": seed }))))?;
        println!("seed {seed}: {} sessions, {} windows -> {}", corpus.sessions.len(), corpus.num_windows(), dir.display());
    }
    Ok(())
}

fn pretrain1(ctx: &Ctx) -> Res<()> {
    for &seed in &ctx.seeds {
        let corpus = ctx.corpus(seed)?;
        let out = pipeline::pretrain_stage1(&corpus, &ctx.cfg, seed)?;
        let root = ctx.ckpt_dir(seed);
        let dirs = pipeline::save_stage1_all(&out.models, &root, &pipeline::provenance(&ctx.cfg, seed))?;
        for (d, trace) in dirs.iter().zip(&out.traces) {
            let body = serde_json::to_string_pretty(trace)?;
            write_atomic(&root.join(d).join("trace.json"), body.as_bytes())?;
            let last = trace.val_loss.last().copied().unwrap_or(f64::NAN);
            println!("seed {seed} {d}: best epoch {}, final val loss {last:.4}", trace.best_epoch);
        }
    }
    Ok(())
}

fn save_cross(
    ctx: &Ctx,
    seed: u64,
    model: &timefuse::crossmodal::CrossModalModel<f32>,
    name: &str,
    stats: timefuse::signal::SessionStats,
    stats_source: &str,
    finetune: Option<timefuse::adapters::LoraConfig>,
) -> Res<String> {
    let root = ctx.ckpt_dir(seed);
    let dirs: Vec<String> = model.modalities.iter().map(|m| pipeline::stage1_dir(m)).collect();
    let prov = pipeline::provenance(&ctx.cfg, seed);
    let spec = Stage2Save { root: &root, name, stage1_dirs: &dirs, stats, stats_source, finetune, provenance: &prov };
    Ok(save_stage2(model, &spec)?)
}

fn pretrain2(ctx: &Ctx, which: Option<ModelKind>) -> Res<()> {
    let variants: Vec<bool> = match which {
        Some(k) => vec![k.time_aware()],
        None => vec![true, false],
    };
    for &seed in &ctx.seeds {
        let corpus = ctx.corpus(seed)?;
        let stage1 = ctx.stage1(seed, &corpus)?;
        let stats = corpus.session_stats()?;
        for &ta in &variants {
            let (model, trace) = pipeline::pretrain_stage2(&corpus, &stage1, &ctx.cfg, ta, seed)?;
            let name = pipeline::stage2_dir(ta);
            let id = save_cross(ctx, seed, &model, &name, stats, "pretraining train split", None)?;
            let body = serde_json::to_string_pretty(&trace)?;
            write_atomic(&ctx.ckpt_dir(seed).join(&name).join("trace.json"), body.as_bytes())?;
            println!("seed {seed} {name}: id {id}, best epoch {}", trace.loss.best_epoch);
        }
    }
    Ok(())
}

fn finetune(ctx: &Ctx, kind: ModelKind, corpus_dir: Option<PathBuf>) -> Res<()> {
    for &seed in &ctx.seeds {
        let corpus = match &corpus_dir {
            Some(d) => Corpus::load(d)?,
            None => ctx.corpus(seed)?,
        };
        let (mut model, _) = load_stage2(&ctx.ckpt_dir(seed), &pipeline::stage2_dir(kind.time_aware()))?;
        let (trace, stats) = pipeline::finetune(&mut model, &corpus, &ctx.cfg, seed)?;
        let name = pipeline::finetune_dir(kind.time_aware());
        let lora = Some(ctx.cfg.finetune.lora.clone());
        let id = save_cross(ctx, seed, &model, &name, stats, "fine-tuning train split", lora)?;
        let last = trace.loss.val_loss.last().copied().unwrap_or(f64::NAN);
        println!("seed {seed} {name}: id {id}, final val loss {last:.4}");
    }
    Ok(())
}

fn screen(ctx: &Ctx) -> Res<()> {
    let mut per_seed = Vec::new();
    for &seed in &ctx.seeds {
        let corpus = ctx.corpus(seed)?;
        let stage1 = ctx.stage1(seed, &corpus)?;
        let ranked = pipeline::screen_with_encoders(&corpus, &stage1, &ctx.cfg, seed)?;
        let names = corpus.modalities();
        println!("seed {seed} ({})", ctx.cfg.eval.task);
        for (rank, e) in ranked.iter().enumerate() {
            let pair = format!("{}+{}", names[e.pair.0], names[e.pair.1]);
            match (&e.metrics, &e.error) {
                (Some(m), _) => println!("  {:>2}. {pair:<12} score {:.4}  auroc {:.4}", rank + 1, e.score, m.auroc),
                (None, Some(err)) => println!("  {:>2}. {pair:<12} {err}", rank + 1),
                _ => println!("  {:>2}. {pair:<12}", rank + 1),
            }
        }
        per_seed.push(json!({ "seed": seed, "modalities": names, "ranking": ranked }));
    }
    let path = ctx.write_json(&format!("screen-{}.json", ctx.cfg.eval.task), ctx.envelope("screen", json!(per_seed)))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn emit(ctx: &Ctx, stem: &str, reports: &[ProbeReport], extra: Value, csv: bool) -> Res<()> {
    let records: Vec<Value> = reports.iter().map(|r| r.to_record()).collect();
    let body = ctx.envelope(stem, json!({ "reports": records, "details": extra }));
    let path = ctx.write_json(&format!("{stem}-{}.json", ctx.cfg.eval.task), body)?;
    let mut table = String::from(CSV_HEADER);
    table.push('\n');
    for r in reports {
        table.push_str(&r.csv_row());
        table.push('\n');
    }
    if csv {
        let p = ctx.reports_dir().join(format!("{stem}-{}.csv", ctx.cfg.eval.task));
        write_atomic(&p, table.as_bytes())?;
        print!("{table}");
        std::io::stdout().flush()?;
    } else {
        for r in reports {
            println!(
                "{} {}+{} {}: auroc {:.2} ({:.2})  f1 {:.2} ({:.2})  acc {:.2} ({:.2})",
                r.task, r.pair.0, r.pair.1, r.model, r.mean.auroc, r.sd.auroc, r.mean.f1, r.sd.f1, r.mean.accuracy, r.sd.accuracy
            );
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn probe(ctx: &Ctx, pairs: Option<&str>, kind: ModelKind, csv: bool) -> Res<()> {
    let mut results = Vec::new();
    let mut ids = Vec::new();
    let name = if kind.time_aware() { TIME_AWARE } else { BASELINE };
    for &seed in &ctx.seeds {
        let corpus = ctx.corpus(seed)?;
        let (model, man) = load_stage2(&ctx.ckpt_dir(seed), &pipeline::stage2_dir(kind.time_aware()))?;
        ids.push(man.id);
        let chosen = match pairs {
            Some("all") => pipeline::all_pairs(corpus.modalities().len()),
            Some(other) => {
                let names: Vec<String> = other.split(',').map(str::to_string).collect();
                vec![pipeline::pair_ids(&corpus.modalities(), &names)?]
            }
            None => {
                let stage1 = ctx.stage1(seed, &corpus)?;
                vec![pipeline::resolve_pair(&ctx.cfg, &corpus, &stage1, seed)?]
            }
        };
        results.extend(pipeline::probe_pairs(&model, &corpus, &ctx.cfg, &chosen, name, seed)?);
    }
    let mut reports = pipeline::aggregate_results(&results, &ctx.cfg.short_hash())?;
    for r in &mut reports {
        r.checkpoints = ids.clone();
    }
    emit(ctx, "probe", &reports, json!({ "per_seed": results }), csv)
}

fn eval(ctx: &Ctx, csv: bool) -> Res<()> {
    let mut results = Vec::new();
    let mut ids = Vec::new();
    for &seed in &ctx.seeds {
        let corpus = ctx.corpus(seed)?;
        let pair = pipeline::pair_ids(&corpus.modalities(), &ctx.cfg.eval.pair)?;
        for (ta, name) in [(true, TIME_AWARE), (false, BASELINE)] {
            let (model, man) = load_stage2(&ctx.ckpt_dir(seed), &pipeline::stage2_dir(ta))?;
            ids.push(man.id);
            results.extend(pipeline::probe_pairs(&model, &corpus, &ctx.cfg, &[pair], name, seed)?);
        }
    }
    let mut reports = pipeline::aggregate_results(&results, &ctx.cfg.short_hash())?;
    for r in &mut reports {
        r.checkpoints = ids.clone();
    }
    let gain = reports[0].mean.auroc - reports[1].mean.auroc;
    println!("auroc gain of {TIME_AWARE} over {BASELINE}: {gain:.2} points");
    emit(ctx, "eval", &reports, json!({ "per_seed": results, "auroc_gain": gain }), csv)
}

fn compare(ctx: &Ctx, csv: bool) -> Res<()> {
    let mut cfg = ctx.cfg.clone();
    cfg.seeds = ctx.seeds.clone();
    let report = pipeline::compare_time_aware(&cfg)?;
    for r in &report.runs {
        eprintln!(
            "seed {}: {TIME_AWARE} auroc {:.2}, {BASELINE} auroc {:.2} ({:.0}s)",
            r.seed, r.time_aware.auroc, r.baseline.auroc, r.seconds
        );
    }
    println!("auroc gain of {TIME_AWARE} over {BASELINE}: {:.2} points", report.auroc_gain);
    eprintln!("total {:.0}s", report.seconds);
    emit(ctx, "compare", &report.reports, json!({ "runs": report.runs, "auroc_gain": report.auroc_gain }), csv)
}

fn dump(ctx: &Ctx, kind: ModelKind, finetuned: bool) -> Res<()> {
    let ta = kind.time_aware();
    let dir_name = if finetuned { pipeline::finetune_dir(ta) } else { pipeline::stage2_dir(ta) };
    for &seed in &ctx.seeds {
        let corpus = ctx.corpus(seed)?;
        let (model, man) = load_stage2(&ctx.ckpt_dir(seed), &dir_name)?;
        let pair = pipeline::pair_ids(&corpus.modalities(), &ctx.cfg.eval.pair)?;
        let rows = pipeline::embedding_rows(&model, &corpus, pair, &man.session_stats)?;
        let mut out = serde_json::to_string(&ctx.envelope("dump-embeddings", json!({ "seed": seed, "checkpoint": man.id, "pair": ctx.cfg.eval.pair })))?;
        out.push('\n');
        for r in &rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        let path = ctx.reports_dir().join(format!("embeddings-{dir_name}-seed-{seed}.jsonl"));
        write_atomic(&path, out.as_bytes())?;
        println!("seed {seed}: {} embeddings -> {}", rows.len(), path.display());
    }
    Ok(())
}

fn gradcheck(ctx: &Ctx) -> Res<()> {
    let gc = GradCheckConfig { seed: ctx.seeds.first().copied().unwrap_or(0), ..GradCheckConfig::default() };
    let reports = run_all(&ctx.cfg.encoder, &ctx.cfg.cross, &gc)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{}: {} tensors, max relative error {:.3e} ({}), {:.1}s -> {}",
            r.suite,
            r.checks.len(),
            r.max_rel_err,
            r.worst,
            r.seconds,
            if r.passed { "pass" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.suite.clone());
        }
    }
    fs::create_dir_all(ctx.reports_dir())?;
    ctx.write_json("gradcheck.json", ctx.envelope("gradcheck", serde_json::to_value(&reports)?))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(format!("suites {} exceed tolerance {:e}", failed.join(", "), gc.tolerance)))
    }
}
