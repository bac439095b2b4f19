use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use protosearch::bench::{log_log_slope, run_bench, BENCH_HEADER, BENCH_SIZES};
use protosearch::config::RunConfig;
use protosearch::error::Error;
use protosearch::scene::{generate_synthetic_domain_pair, read_dataset, write_dataset};
use protosearch::search::{
    build_search_data, evaluate_search_data, random_embedding_baseline, write_embeddings, write_labels,
};
use protosearch::train::{Checkpoint, DirSink, Trainer, CHECKPOINT_FILE};

/// Default output root when neither `--out` nor the config's `out_dir` is set.
const OUT_ENV: &str = "PROTO_SEARCH_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Parser)]
#[command(name = "protosearch", version, about = "Prototype-guided domain adaptation for person search on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; falls back to the config's out_dir, then $PROTO_SEARCH_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset root written by gen-data; defaults to <out>/data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CheckpointArg {
    /// Checkpoint file; defaults to <out>/checkpoint.json.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic source/target dataset to <out>/data.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train on the source split, then adapt to the target split. Resumes from
    /// the checkpoint in <out> (or --checkpoint) when present.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Pseudo-label the target instances of a checkpoint against both prototype banks.
    Label {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Person search on the target split, next to a random-embedding baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
    },
    /// Distance evaluations and wall time of prototype labeling against all-pairs search.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated instance counts.
        #[arg(long, value_delimiter = ',', default_values_t = BENCH_SIZES.to_vec())]
        sizes: Vec<usize>,
    },
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
}

impl Context {
    fn new(common: &Common) -> Result<Self, Error> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let out = common
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Self { cfg, out })
    }

    fn data(&self, arg: &DataArg) -> PathBuf {
        arg.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn checkpoint(&self, arg: &CheckpointArg) -> PathBuf {
        arg.checkpoint.clone().unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }

    fn load_checkpoint(&self, arg: &CheckpointArg) -> Result<Checkpoint, Error> {
        let path = self.checkpoint(arg);
        if !path.exists() {
            return Err(Error::Checkpoint(format!("{} not found", path.display())));
        }
        let ck = Checkpoint::load(&path)?;
        ck.check_compatible(&self.cfg)?;
        Ok(ck)
    }
}

fn gen_data(ctx: &Context) -> Result<(), Error> {
    let (source, target) = generate_synthetic_domain_pair(&ctx.cfg.dataset, ctx.cfg.seed)?;
    let root = ctx.out.join("data");
    write_dataset(&root, &source, &target)?;
    let persons = |s: &[protosearch::scene::SceneSample]| s.iter().map(|x| x.boxes.len()).sum::<usize>();
    println!(
        "wrote {}: source {} scenes / {} persons, target {} scenes / {} persons",
        root.display(),
        source.len(),
        persons(&source),
        target.len(),
        persons(&target)
    );
    Ok(())
}

fn train(ctx: &Context, data: &DataArg, checkpoint: &CheckpointArg) -> Result<(), Error> {
    let (source, target) = read_dataset(&ctx.data(data))?;
    let resume = ctx.checkpoint(checkpoint);
    let mut ck = if resume.exists() {
        let mut ck = Checkpoint::load(&resume)?;
        ck.check_compatible(&ctx.cfg)?;
        info!("resuming after {} pre-train and {} adaptation epochs", ck.pretrain_epochs_done, ck.adapt_epochs_done);
        // Epoch budgets may grow on resume; the run continues under the new config.
        ck.config = ctx.cfg.clone();
        ck
    } else {
        Checkpoint::fresh(&ctx.cfg)?
    };
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.out.join("config.toml"), ctx.cfg.to_toml()?)?;
    let mut sink = DirSink::open(&ctx.out, &ck)?;
    let trainer = Trainer::new(&ctx.cfg, &source, &target)?;
    trainer.run(&mut ck, &mut sink)?;
    println!(
        "trained {} pre-train + {} adaptation epochs; checkpoint {}",
        ck.pretrain_epochs_done,
        ck.adapt_epochs_done,
        sink.checkpoint_path().display()
    );
    Ok(())
}

fn label(ctx: &Context, data: &DataArg, checkpoint: &CheckpointArg) -> Result<(), Error> {
    let ck = ctx.load_checkpoint(checkpoint)?;
    let (source, target) = read_dataset(&ctx.data(data))?;
    fs::create_dir_all(&ctx.out)?;
    let labels_path = ctx.out.join("labels.tsv");
    let embeddings_path = ctx.out.join("embeddings.bin");
    let summary = if target.is_empty() {
        warn!("target split is empty; writing an empty label file");
        write_labels(&labels_path, &[], &[])?;
        write_embeddings(&embeddings_path, &[])?;
        serde_json::json!({ "instances": 0, "source_prototypes": 0, "random_prototypes": 0, "distance_evaluations": 0 })
    } else {
        let run = protosearch::train::label_target_split(&ck.model, ck.source_bank.as_ref(), &source, &target, &ctx.cfg)?;
        write_labels(&labels_path, &run.features, &run.labels.entries)?;
        write_embeddings(&embeddings_path, &run.features)?;
        serde_json::json!({
            "instances": run.features.len(),
            "source_prototypes": run.source_prototypes,
            "random_prototypes": run.random_prototypes,
            "distance_evaluations": run.distance_evaluations,
        })
    };
    fs::write(ctx.out.join("label_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "labeled {} instances against {} + {} prototypes: {} distance evaluations -> {}",
        summary["instances"],
        summary["source_prototypes"],
        summary["random_prototypes"],
        summary["distance_evaluations"],
        labels_path.display()
    );
    Ok(())
}

fn eval(ctx: &Context, data: &DataArg, checkpoint: &CheckpointArg) -> Result<(), Error> {
    let ck = ctx.load_checkpoint(checkpoint)?;
    let (_, target) = read_dataset(&ctx.data(data))?;
    let search = build_search_data(&ck.model, &target, &ctx.cfg)?;
    let report = evaluate_search_data(&search)?;
    let baseline = evaluate_search_data(&random_embedding_baseline(&search, ctx.cfg.seed))?;
    fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("eval_report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "mAP {:.4}  top-1 {:.4}  det AP {:.4}  det recall {:.4}  ({} queries, {} excluded)",
        report.map, report.top1, report.det_ap, report.det_recall, report.queries_evaluated, report.queries_excluded
    );
    println!("random-embedding baseline: mAP {:.4}  top-1 {:.4}", baseline.map, baseline.top1);
    println!("report {}", path.display());
    Ok(())
}

fn bench(ctx: &Context, sizes: &[usize]) -> Result<(), Error> {
    fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("bench.tsv");
    let mut table = String::from(BENCH_HEADER);
    table.push('\n');
    let mut rows = Vec::new();
    for r in run_bench(sizes, ctx.cfg.seed) {
        match r {
            Ok(row) => {
                table.push_str(&row.tsv());
                table.push('\n');
                rows.push(row);
            }
            Err(note) => {
                warn!("{note}");
                table.push_str(&format!("# {note}\n"));
            }
        }
    }
    fs::write(&path, &table)?;
    print!("{table}");
    if rows.len() >= 2 {
        let slope = |f: &dyn Fn(&protosearch::bench::BenchRow) -> f64| {
            log_log_slope(&rows.iter().map(|r| (r.n as f64, f(r))).collect::<Vec<_>>())
        };
        println!(
            "log-log slope: labeling {:.3}, pairwise {:.3} (counts); labeling {:.3}, pairwise {:.3} (time)",
            slope(&|r| r.labeling_evaluations as f64),
            slope(&|r| r.pairwise_evaluations as f64),
            slope(&|r| r.labeling_seconds.max(1e-9)),
            slope(&|r| r.pairwise_seconds.max(1e-9)),
        );
    }
    Ok(())
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData { common } => gen_data(&Context::new(&common)?),
        Command::Train { common, data, checkpoint } => train(&Context::new(&common)?, &data, &checkpoint),
        Command::Label { common, data, checkpoint } => label(&Context::new(&common)?, &data, &checkpoint),
        Command::Eval { common, data, checkpoint } => eval(&Context::new(&common)?, &data, &checkpoint),
        Command::Bench { common, sizes } => bench(&Context::new(&common)?, &sizes),
    }
}

/// 1 for anything the user can fix in the invocation or config, 2 otherwise.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let informational = !e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if informational { 0 } else { 1 });
        }
    };
    match run(cli.command) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
