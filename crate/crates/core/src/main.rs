use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqmark::allocation::{
    brute_force_allocation, schedule_allocation, solve_allocation, AllocationSolution,
};
use seqmark::data::{counts, CountHistogram, Sequence, SharingLedger};
use seqmark::detector::{detect_combination, detect_single, extract_leak_pattern, partial_leak_candidates};
use seqmark::embedder::{
    embed_correlated, embed_uncorrelated, predetermined_target, CorrelationModel,
};
use seqmark::error::{Result, SeqmarkError};
use seqmark::harness::{
    clique_spec, emit_results, generate_synthetic, load_matrix, run_experiment, save_matrix,
    DataSource, EmitFormat, ExperimentConfig, Scenario,
};

#[derive(Parser)]
#[command(
    name = "seqmark",
    about = "Watermarking, attack simulation, and leak attribution for discrete sequential data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one bucket allocation and print it as JSON
    Allocate(AllocateArgs),
    /// Watermark a sequence for one recipient and update the ledger
    Embed(EmbedArgs),
    /// Run an attack campaign selected by flags
    Attack(AttackArgs),
    /// Attribute a leaked copy to recipients
    Detect(DetectArgs),
    /// Run a configured experiment campaign
    Experiment(ExperimentArgs),
    /// Generate a synthetic corpus
    Generate(GenerateArgs),
}

#[derive(Args)]
struct AllocateArgs {
    /// Comma-separated histogram counts n_0,..,n_h
    #[arg(long)]
    hist: String,
    /// Watermark length for the next sharing
    #[arg(long)]
    w: u64,
    /// solve | brute | schedule
    #[arg(long, default_value = "solve")]
    method: String,
}

#[derive(Args)]
struct EmbedArgs {
    /// Ledger file; created from --data when missing
    #[arg(long)]
    ledger: PathBuf,
    /// Base data CSV (single row), used when the ledger does not exist yet
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    m: u8,
    #[arg(long)]
    w: u64,
    /// Recipient identifier to record
    #[arg(long)]
    sp_id: u32,
    /// Correlation model file enabling correlation-preserving embedding
    #[arg(long)]
    model: Option<PathBuf>,
    /// Where to write the watermarked copy (single-row CSV)
    #[arg(long)]
    out_data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttackArgs {
    /// collusion | partial_knowledge | correlation | combined | partial_share
    /// | modification_single | modification_collusion
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    l: usize,
    #[arg(long, default_value_t = 3)]
    m: u8,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    w: Option<u64>,
    #[arg(long, default_value_t = 4)]
    h: usize,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    pi: Option<f64>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    phi: Option<usize>,
    #[arg(long)]
    phi_hat: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for aggregate and per-trial CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Leaked data: single-row CSV, or index,value rows with --covered
    #[arg(long)]
    leak: PathBuf,
    #[arg(long)]
    ledger: PathBuf,
    /// Leak file lists covered positions explicitly as index,value rows
    #[arg(long, default_value_t = false)]
    covered: bool,
    /// Candidate-set attribution for partial leaks
    #[arg(long, default_value_t = false)]
    partial: bool,
    /// Assumed number of colluders; 1 selects single-suspect attribution
    #[arg(long, default_value_t = 1)]
    phi_hat: usize,
    /// Ground-truth recipient ids for precision/recall, comma separated
    #[arg(long)]
    truth: Option<String>,
    /// Optional CSV row output for batch aggregation
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config trial count
    #[arg(long)]
    trials: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Also emit a plot-ready long-format file
    #[arg(long, default_value_t = false)]
    long: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    l: usize,
    #[arg(long, default_value_t = 3)]
    m: u8,
    #[arg(long)]
    records: usize,
    /// JSON file with correlation entries {i,a,j,b,p}
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Use built-in three-column cliques with this strength instead
    #[arg(long)]
    cliques: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_hist(text: &str) -> Result<CountHistogram> {
    let n: std::result::Result<Vec<u64>, _> =
        text.split(',').map(|c| c.trim().parse::<u64>()).collect();
    let n = n.map_err(|e| SeqmarkError::Config(format!("bad histogram: {e}")))?;
    if n.is_empty() {
        return Err(SeqmarkError::Config("empty histogram".into()));
    }
    CountHistogram::new(n.len() - 1, n)
}

fn cmd_allocate(args: &AllocateArgs) -> Result<()> {
    let hist = parse_hist(&args.hist)?;
    let sol: AllocationSolution = match args.method.as_str() {
        "solve" => solve_allocation(&hist, args.w)?,
        "brute" => brute_force_allocation(&hist, args.w)?,
        "schedule" => schedule_allocation(&hist, args.w)?,
        other => {
            return Err(SeqmarkError::Config(format!(
                "unknown method {other}, expected solve|brute|schedule"
            )))
        }
    };
    println!("{}", serde_json::to_string_pretty(&sol)?);
    Ok(())
}

fn load_single_row(path: &Path, m: u8) -> Result<Sequence> {
    let rows = load_matrix(path, m)?;
    if rows.len() != 1 {
        return Err(SeqmarkError::Config(format!(
            "{} holds {} rows, expected a single sequence",
            path.display(),
            rows.len()
        )));
    }
    Ok(rows.into_iter().next().unwrap())
}

fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    let mut ledger = if args.ledger.exists() {
        SharingLedger::load(&args.ledger)?
    } else {
        let data = args.data.as_ref().ok_or_else(|| {
            SeqmarkError::Config("ledger missing: provide --data to initialize".into())
        })?;
        SharingLedger::new(load_single_row(data, args.m)?)
    };
    let l = ledger.base().len();
    let m = ledger.base().m();
    let all: Vec<usize> = (0..l).collect();
    let hist = counts(&ledger);
    let alloc = schedule_allocation(&hist, args.w)?;
    let rule = move |s: u8| predetermined_target(m, s);
    let (marked, pattern) = match &args.model {
        Some(path) => {
            let model = CorrelationModel::load(path)?;
            embed_correlated(&ledger, &all, &alloc.y, &model, args.w, args.sp_id)?
        }
        None => embed_uncorrelated(&ledger, &all, &alloc, &rule, args.sp_id, args.seed)?,
    };
    ledger.record_sharing(args.sp_id, all, pattern)?;
    ledger.save(&args.ledger)?;
    save_matrix(std::slice::from_ref(&marked), &args.out_data)?;
    eprintln!(
        "embedded {} points for sp {} (ledger now holds {} sharings)",
        args.w,
        args.sp_id,
        ledger.h()
    );
    Ok(())
}

fn scenario_from_str(kind: &str) -> Result<Scenario> {
    Ok(match kind {
        "collusion" => Scenario::Collusion,
        "partial_knowledge" => Scenario::PartialKnowledge,
        "correlation" => Scenario::Correlation,
        "combined" => Scenario::Combined,
        "partial_share" => Scenario::PartialShare,
        "modification_single" => Scenario::ModificationSingle,
        "modification_collusion" => Scenario::ModificationCollusion,
        other => {
            return Err(SeqmarkError::Config(format!(
                "unknown attack kind {other}"
            )))
        }
    })
}

fn write_outputs(
    out_dir: &Path,
    output: &seqmark::harness::ExperimentOutput,
    long: bool,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    emit_results(&output.aggregate, EmitFormat::Csv, &out_dir.join("aggregate.csv"))?;
    emit_results(&output.per_trial, EmitFormat::Csv, &out_dir.join("trials.csv"))?;
    if long {
        emit_results(
            &output.aggregate,
            EmitFormat::LongCsv,
            &out_dir.join("aggregate_long.csv"),
        )?;
    }
    Ok(())
}

fn cmd_attack(args: &AttackArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        scenario: scenario_from_str(&args.kind)?,
        l: args.l,
        m: args.m,
        r: args.r,
        w: args.w,
        h: args.h,
        t: args.t,
        pi: args.pi,
        fractions: args.fraction.map(|f| vec![f]),
        f_grid: None,
        phi: args.phi,
        phi_hat: args.phi_hat,
        trials: args.trials,
        seed: args.seed,
        data: DataSource::Synthetic {
            n_records: 1000,
            spec: Vec::new(),
        },
        tau: 0.9,
    };
    let output = run_experiment(&cfg)?;
    write_outputs(&args.out, &output, false)?;
    print!("{}", output.aggregate.to_csv_string());
    Ok(())
}

fn cmd_detect(args: &DetectArgs) -> Result<()> {
    let ledger = SharingLedger::load(&args.ledger)?;
    let (indices, values): (Vec<usize>, Vec<u8>) = if args.covered {
        let text = std::fs::read_to_string(&args.leak)?;
        let mut idx = Vec::new();
        let mut vals = Vec::new();
        for (row, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 2 {
                return Err(SeqmarkError::Parse {
                    row: row + 1,
                    col: 1,
                    msg: "expected index,value".into(),
                });
            }
            idx.push(parts[0].trim().parse().map_err(|e| SeqmarkError::Parse {
                row: row + 1,
                col: 1,
                msg: format!("{e}"),
            })?);
            vals.push(parts[1].trim().parse().map_err(|e| SeqmarkError::Parse {
                row: row + 1,
                col: 2,
                msg: format!("{e}"),
            })?);
        }
        (idx, vals)
    } else {
        let seq = load_single_row(&args.leak, ledger.base().m())?;
        ((0..seq.len()).collect(), seq.points().to_vec())
    };

    let mut report = if args.partial {
        partial_leak_candidates(&indices, &values, &ledger)?
    } else {
        let z = extract_leak_pattern(&values, ledger.base(), &indices)?;
        if args.phi_hat <= 1 {
            detect_single(&z, &ledger)?
        } else {
            detect_combination(&z, &ledger, args.phi_hat)?
        }
    };
    if let Some(truth) = &args.truth {
        let truth: BTreeSet<u32> = truth
            .split(',')
            .map(|s| s.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| SeqmarkError::Config(format!("bad truth list: {e}")))?;
        let all: BTreeSet<u32> = ledger.sharings().iter().map(|s| s.sp_id).collect();
        report.score_against(&truth, &all);
    }
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = &args.out {
        let mut row = vec![
            report
                .suspects
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            report.entropy_bits.map(|e| e.to_string()).unwrap_or_default(),
            report.precision.map(|p| p.to_string()).unwrap_or_default(),
            report.recall.map(|r| r.to_string()).unwrap_or_default(),
        ];
        row.insert(0, report.no_evidence.to_string());
        std::fs::write(
            out,
            format!("no_evidence,suspects,entropy_bits,precision,recall\n{}\n", row.join(",")),
        )?;
    }
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    let output = run_experiment(&cfg)?;
    write_outputs(&args.out, &output, args.long)?;
    print!("{}", output.aggregate.to_csv_string());
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec = match (&args.spec, args.cliques) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        (None, Some(p)) => clique_spec(args.l, args.m, p),
        (None, None) => Vec::new(),
        (Some(_), Some(_)) => {
            return Err(SeqmarkError::Config(
                "--spec and --cliques are mutually exclusive".into(),
            ))
        }
    };
    let records = generate_synthetic(args.l, args.m, args.records, &spec, args.seed)?;
    save_matrix(&records, &args.out)?;
    eprintln!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(workers) = std::env::var("SEQMARK_WORKERS") {
        if let Ok(n) = workers.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Allocate(args) => cmd_allocate(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::Generate(args) => cmd_generate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", serde_json::json!({ "error": err.to_string() }));
            ExitCode::FAILURE
        }
    }
}
