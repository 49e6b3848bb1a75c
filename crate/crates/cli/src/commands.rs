use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use gacoop_core::align::ConflictStats;
use gacoop_core::data::bank::{read_checkpoint, write_checkpoint, Checkpoint};
use gacoop_core::data::layout::{load_dir_config, load_test, load_train, write_synthetic_dir};
use gacoop_core::data::{default_config, load_config, RunConfig};
use gacoop_core::experiment::{bench_seeds, prepare, run_bench, run_sweep, SWEEP_CSV_PREFIX, SYNTH_OOD_NAME};
use gacoop_core::gradcheck::{run_align_suite, run_fd_suite, AlignCheckConfig, FdConfig};
use gacoop_core::metrics::{evaluate, render_pretty, report_csv_string, ReportRow};
use gacoop_core::trainer::{build_encoder, train};
use gacoop_core::{Error, Result, Strategy};

#[derive(Parser, Debug)]
#[command(name = "gacoop", version, about = "Few-shot OOD prompt learning with gradient alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic benchmark as FBNK files.
    GenData(GenDataArgs),
    /// Train a prompt on a data directory and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data directory.
    Eval(EvalArgs),
    /// Run every strategy over several seeds and compare.
    Bench(BenchArgs),
    /// Repeat the bench over values of one parameter.
    Sweep(SweepArgs),
    /// Check analytic gradients and the alignment rule.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Configuration file (`key = value` lines); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for all randomness; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Print a summary table of the generated banks.
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Configuration file. Without it the directory's config.txt is used,
    /// then the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for all randomness; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory holding train.fbnk.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// coop, locoop or gacoop; overrides the configuration.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch log CSV [default: <out>.log.csv].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Print the per-epoch log as a table.
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding id_test.fbnk and ood_*.fbnk.
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Report CSV; written to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Configuration the checkpoint must agree with.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed written into the report rows [default: the checkpoint's seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print an aligned table.
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Number of seeds; seeds are base, base+1, ...
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', default_value = "coop,locoop,gacoop")]
    pub strategies: Vec<Strategy>,
    /// Report CSV; written to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the comparison table (means over seeds).
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Parameter to vary: lambda, k_rank, tau or beta.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, value_delimiter = ',', default_value = "coop,locoop,gacoop")]
    pub strategies: Vec<Strategy>,
    /// Sweep CSV; written to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print one comparison table per value.
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Finite-difference instances.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Random gradient pairs for the alignment properties.
    #[arg(long, default_value_t = 10_000)]
    pub pairs: usize,
    /// Comma-separated dimensions for the alignment pairs.
    #[arg(long, value_delimiter = ',', default_value = "2,16,512,4096")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print a table instead of key=value lines.
    #[arg(long)]
    pub pretty: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn apply_overrides(run: &mut RunConfig, overrides: &[String], seed: Option<u64>) -> Result<()> {
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            field: kv.clone(),
            message: "expected KEY=VALUE".into(),
        })?;
        run.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        run.set("seed", &s.to_string())?;
    }
    run.validate()
}

fn resolve(cfg: &ConfigArgs) -> Result<RunConfig> {
    let mut run = match &cfg.config {
        Some(p) => load_config(p)?,
        None => default_config(),
    };
    apply_overrides(&mut run, &cfg.overrides, cfg.seed)?;
    Ok(run)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text)?;
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let run = resolve(&a.cfg)?;
    let (_, bench) = prepare(&run)?;
    write_synthetic_dir(&a.out_dir, &bench, &run, SYNTH_OOD_NAME)?;
    info!("wrote benchmark to {}", a.out_dir.display());
    if a.pretty {
        println!("{:<10} {:>8} {:>8} {:>6}", "split", "samples", "regions", "dim");
        for (name, b) in [("train", &bench.train), ("id_test", &bench.id_test), ("ood", &bench.ood)] {
            println!("{:<10} {:>8} {:>8} {:>6}", name, b.n_samples(), b.n_regions, b.d_embed);
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => load_config(p)?,
        None => load_dir_config(&a.data_dir)?.unwrap_or_default(),
    };
    apply_overrides(&mut run, &a.overrides, a.seed)?;
    if let Some(s) = a.strategy {
        run.train.strategy = s;
    }
    let bank = load_train(&a.data_dir)?;
    let cfg = &run.train;
    let enc = build_encoder(cfg.encoder_spec(bank.n_classes), cfg.seed)?;
    let outcome = train(cfg, &bank, &enc)?;
    let ck = Checkpoint {
        params: outcome.params,
        encoder: cfg.encoder_spec(bank.n_classes),
        seed: cfg.seed,
        strategy: cfg.strategy,
        steps_total: outcome.stats.steps_total,
        steps_conflicting: outcome.stats.steps_conflicting,
    };
    write_checkpoint(&ck, &a.out)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let csv = outcome.log.to_csv();
    fs::write(&log_path, &csv)?;
    if a.pretty {
        let mut t = format!(
            "{:>5} {:>10} {:>10} {:>9} {:>9} {:>10}\n",
            "epoch", "l_coop", "l_ood", "train_acc", "conflict", "lr"
        );
        for e in &outcome.log.epochs {
            let _ = writeln!(
                t,
                "{:>5} {:>10.5} {:>10.5} {:>9.4} {:>9.4} {:>10.3e}",
                e.epoch, e.l_coop, e.l_ood, e.train_accuracy, e.conflict_ratio, e.lr_last
            );
        }
        let _ = writeln!(t, "checksum {}", outcome.log.final_checksum);
        print!("{t}");
    }
    Ok(())
}

fn check_against_config(ck: &Checkpoint, run: &RunConfig) -> Result<()> {
    let pairs = [
        ("ctx_len", run.train.ctx_len, ck.encoder.ctx_len),
        ("d_token", run.train.d_token, ck.encoder.d_token),
        ("d_embed", run.train.d_embed, ck.encoder.d_embed),
    ];
    for (context, expected, got) in pairs {
        if expected != got {
            return Err(Error::DimensionMismatch { context, expected, got });
        }
    }
    let expected_len = run.train.ctx_len * run.train.d_token;
    if ck.params.len() != expected_len {
        return Err(Error::DimensionMismatch {
            context: "checkpoint parameter length",
            expected: expected_len,
            got: ck.params.len(),
        });
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = read_checkpoint(&a.checkpoint)?;
    if let Some(p) = &a.config {
        check_against_config(&ck, &load_config(p)?)?;
    }
    let (id_test, ood) = load_test(&a.data_dir)?;
    let enc = build_encoder(ck.encoder, ck.seed)?;
    let stats = ConflictStats {
        steps_total: ck.steps_total,
        steps_conflicting: ck.steps_conflicting,
        ..ConflictStats::default()
    };
    let report = evaluate(&ck.params, &enc, &id_test, &ood, ck.encoder.tau)?.with_conflict(stats);
    let rows = report.rows(ck.strategy.name(), Some(a.seed.unwrap_or(ck.seed)));
    emit(a.out.as_deref(), &report_csv_string(&rows)?)?;
    if a.pretty {
        print!("{}", render_pretty(&rows));
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let run = resolve(&a.cfg)?;
    let seeds = bench_seeds(run.train.seed, a.seeds);
    let res = run_bench(&run, &a.strategies, &seeds)?;
    let rows = res.rows();
    emit(a.out.as_deref(), &report_csv_string(&rows)?)?;
    if a.pretty {
        let means: Vec<ReportRow> = rows.into_iter().filter(|r| r.seed.is_none()).collect();
        print!("{}", render_pretty(&means));
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let run = resolve(&a.cfg)?;
    let seeds = bench_seeds(run.train.seed, a.seeds);
    let points = run_sweep(&run, &a.param, &a.values, &a.strategies, &seeds)?;
    let mut out = String::new();
    for (i, pt) in points.iter().enumerate() {
        let csv = report_csv_string(&pt.result.rows())?;
        for (j, line) in csv.lines().enumerate() {
            match (i, j) {
                (_, 0) if i > 0 => continue,
                (_, 0) => {
                    let _ = writeln!(out, "{},{line}", SWEEP_CSV_PREFIX.join(","));
                }
                _ => {
                    let _ = writeln!(out, "{},{},{line}", a.param, pt.value);
                }
            }
        }
    }
    emit(a.out.as_deref(), &out)?;
    if a.pretty {
        for pt in &points {
            println!("{} = {}", a.param, pt.value);
            let means: Vec<ReportRow> = pt.result.rows().into_iter().filter(|r| r.seed.is_none()).collect();
            println!("{}", render_pretty(&means));
        }
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let fd = run_fd_suite(&FdConfig {
        trials: a.trials,
        seed: a.seed,
        ..FdConfig::default()
    })?;
    let al = run_align_suite(&AlignCheckConfig {
        pairs: a.pairs,
        dims: a.dims.clone(),
        seed: a.seed,
    })?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    if a.pretty {
        println!("{:<28} {:>14} {:>6}", "check", "value", "");
        println!("{:<28} {:>14.3e} {:>6}", "grad_ce max rel err", fd.max_rel_err_ce, verdict(fd.max_rel_err_ce < fd.tolerance));
        println!("{:<28} {:>14.3e} {:>6}", "grad_ood max rel err", fd.max_rel_err_ood, verdict(fd.max_rel_err_ood < fd.tolerance));
        println!("{:<28} {:>14} {:>6}", "align violations", al.n_violations, verdict(al.passed()));
    } else {
        println!("fd_trials={} fd_redraws={}", fd.trials, fd.redraws);
        println!("grad_ce_max_rel_err={:e} {}", fd.max_rel_err_ce, verdict(fd.max_rel_err_ce < fd.tolerance));
        println!("grad_ood_max_rel_err={:e} {}", fd.max_rel_err_ood, verdict(fd.max_rel_err_ood < fd.tolerance));
        println!("align_pairs={} obtuse={} violations={} {}", al.pairs, al.obtuse, al.n_violations, verdict(al.passed()));
    }
    for v in &al.violations {
        eprintln!("violation: {v}");
    }
    if fd.passed() && al.passed() {
        Ok(())
    } else {
        Err(Error::Property(format!(
            "grad-check failed: fd ce {:e}, fd ood {:e}, {} alignment violations",
            fd.max_rel_err_ce, fd.max_rel_err_ood, al.n_violations
        )))
    }
}
