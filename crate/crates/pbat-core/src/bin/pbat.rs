use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pbat_core::checkpoint;
use pbat_core::config;
use pbat_core::data::{
    build_sequences, ingest_tsv, leave_one_out_split, synth_generate, write_tsv, SplitDataset,
    SynthConfig, SynthRule,
};
use pbat_core::eval::{evaluate, export_behavior_matrix, CandidateMode};
use pbat_core::params::ModelParams;
use pbat_core::train::{grad_check, Trainer};

#[derive(Parser)]
#[command(name = "pbat", about = "Multi-behavior sequential recommender", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log as TSV
    Synth(SynthArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint with leave-one-out ranking metrics
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Export the behavior-dependency matrix as CSV
    ExportPatterns(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output TSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    users: u32,
    #[arg(long)]
    items: u32,
    #[arg(long)]
    behaviors: u32,
    #[arg(long)]
    seed: u64,
    /// Generation rule: planted | uniform
    #[arg(long, default_value = "planted", value_parser = parse_rule)]
    rule: SynthRule,
    /// Events per user
    #[arg(long, default_value_t = 10)]
    len: usize,
    /// Distinct cue items per user under the planted rule
    #[arg(long, default_value_t = 1)]
    cue_pool: u32,
}

#[derive(Args)]
struct TrainArgs {
    /// Interaction TSV (user, item, behavior, timestamp)
    #[arg(long)]
    data: PathBuf,
    /// `key = value` configuration file
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the config file
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Candidate set: `all` or `sampled:N`
    #[arg(long, default_value = "all", value_parser = parse_candidates)]
    candidates: CandidateMode,
    /// Emit the metrics as one JSON object
    #[arg(long)]
    json: bool,
    /// Seed for sampled candidates
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    /// Maximum relative error tolerated per parameter group
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Condition the matrix on one user's patterns
    #[arg(long)]
    user: Option<u32>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

fn parse_rule(s: &str) -> std::result::Result<SynthRule, String> {
    match s {
        "planted" => Ok(SynthRule::Planted),
        "uniform" => Ok(SynthRule::Uniform),
        other => Err(format!("unknown rule `{other}`, expected planted|uniform")),
    }
}

fn parse_candidates(s: &str) -> std::result::Result<CandidateMode, String> {
    if s == "all" {
        return Ok(CandidateMode::All);
    }
    if let Some(n) = s.strip_prefix("sampled:") {
        let n: usize = n.parse().map_err(|_| format!("bad candidate count `{n}`"))?;
        if n == 0 {
            return Err("sampled candidate count must be positive".into());
        }
        return Ok(CandidateMode::Sampled(n));
    }
    Err(format!("unknown candidate mode `{s}`, expected all|sampled:N"))
}

fn split_from_tsv(path: &PathBuf, seq_len: usize) -> Result<SplitDataset> {
    let ds = ingest_tsv(path).with_context(|| format!("reading {}", path.display()))?;
    let seqs = build_sequences(&ds, seq_len)?;
    Ok(leave_one_out_split(seqs, ds.num_items, ds.num_behaviors))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_users: args.users,
        num_items: args.items,
        num_behaviors: args.behaviors,
        seq_len: args.len,
        seed: args.seed,
        rule: args.rule,
        cue_pool: args.cue_pool,
    };
    let interactions = synth_generate(&cfg)?;
    write_tsv(&args.out, &interactions)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote {} interactions for {} users to {}",
        interactions.len(),
        args.users,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = config::load(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let split = split_from_tsv(&args.data, cfg.seq_len)?;
    if split.num_items > cfg.num_items {
        bail!("data holds {} items but the config allows {}", split.num_items, cfg.num_items);
    }
    if split.num_behaviors > cfg.num_behaviors {
        bail!(
            "data holds {} behaviors but the config allows {}",
            split.num_behaviors,
            cfg.num_behaviors
        );
    }
    let max_user = split.users.iter().map(|u| u.train.user).max().unwrap_or(0);
    if max_user >= cfg.num_users {
        bail!("data holds user id {max_user} but the config allows {} users", cfg.num_users);
    }

    let mut split = split;
    split.num_items = cfg.num_items;
    split.num_behaviors = cfg.num_behaviors;

    let mut params = ModelParams::init(cfg.hyperparams(), cfg.seed)?;
    let train_cfg = cfg.train_config();
    let mut trainer = Trainer::new(&params, train_cfg.clone());
    for epoch in 0..train_cfg.epochs {
        let report = trainer.epoch(&mut params, &split, epoch)?;
        println!("{}", serde_json::to_string(&report).expect("loss report serializes"));
    }
    checkpoint::save(&params, &args.out)?;
    eprintln!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let params = checkpoint::load(&args.ckpt)
        .with_context(|| format!("reading {}", args.ckpt.display()))?;
    let split = split_from_tsv(&args.data, params.hp.seq_len)?;
    let metrics = evaluate(&params, &split, args.candidates, args.seed)?;
    if args.json {
        println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
    } else {
        println!("users   {}", metrics.users);
        println!("HR@5    {:.4}", metrics.hr5);
        println!("HR@10   {:.4}", metrics.hr10);
        println!("NDCG@5  {:.4}", metrics.ndcg5);
        println!("NDCG@10 {:.4}", metrics.ndcg10);
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let cfg = config::load(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let synth = SynthConfig {
        num_users: cfg.num_users,
        num_items: cfg.num_items,
        num_behaviors: cfg.num_behaviors,
        seq_len: cfg.seq_len,
        seed: cfg.seed,
        rule: SynthRule::Uniform,
        cue_pool: 1,
    };
    let ds = pbat_core::data::Dataset::from_interactions(synth_generate(&synth)?)?;
    let seqs = build_sequences(&ds, cfg.seq_len)?;
    let split = leave_one_out_split(seqs, cfg.num_items, cfg.num_behaviors);
    let mut params = ModelParams::init(cfg.hyperparams(), cfg.seed)?;
    let report = grad_check(&mut params, &split, args.tol, cfg.seed)?;
    for group in &report.groups {
        let status = if group.max_rel_err < args.tol { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:<40} max rel err {:.3e} (checked {})",
            group.name, group.max_rel_err, group.checked
        );
    }
    let passed = report.passed();
    println!(
        "{}: max relative error {:.3e} over {} groups (tolerance {:.1e})",
        if passed { "PASS" } else { "FAIL" },
        report.max_rel_err(),
        report.groups.len(),
        args.tol
    );
    Ok(passed)
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let params = checkpoint::load(&args.ckpt)
        .with_context(|| format!("reading {}", args.ckpt.display()))?;
    let matrix = export_behavior_matrix(&params, args.user)?;
    let mut out = String::new();
    for row in &matrix {
        let line: Vec<String> = row.iter().map(|x| format!("{x:.9e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("behavior matrix written to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synth(args) => cmd_synth(args).map(|()| true),
        Command::Train(args) => cmd_train(args).map(|()| true),
        Command::Eval(args) => cmd_eval(args).map(|()| true),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::ExportPatterns(args) => cmd_export(args).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
