use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::Ratio;

use twobp::analysis::{
    bubble_ratio_from_timeline, join_units, peak_memory, rows_to_csv, simulate_timeline, throughput_gain, CostModel,
    MemoryModel, RankCosts, ReportRow,
};
use twobp::executor::Trace;
use twobp::model::build_model;
use twobp::schedule::{generate_schedule, InstructionStream, ScheduleConfig, ScheduleKind};
use twobp::train::{compare_two_bp, train, TrainConfig, TrainReport};
use twobp::verify::{default_grid, equivalence_suite, finite_difference_suite, Check};
use twobp::Element;

use crate::config::{CommonArgs, Precision, RunConfig, TuningArgs};
use crate::svg;

#[derive(Debug, Parser)]
#[command(name = "twobp", version, about = "Pipeline-parallel training with split backward passes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay a schedule under a tick cost model
    Simulate(RunArgs),
    /// Train a toy model with the real multi-threaded executor
    Train(TrainArgs),
    /// Run the gradient-equivalence and finite-difference suites
    Verify(VerifyArgs),
    /// Render a trace file as an SVG Gantt chart
    Gantt(GanttArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Train without and with 2BP and report the throughput gain
    #[arg(long)]
    pub compare_2bp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Negate the RMSNorm gain gradient in backward-p2
    RmsnormP2Sign,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Args)]
pub struct GanttArgs {
    /// JSONL trace written by `simulate` or `train`
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(&RunConfig::resolve(&a.common, &a.tuning)?),
        Command::Train(a) => {
            let cfg = RunConfig::resolve(&a.run.common, &a.run.tuning)?;
            match Precision::from_env()? {
                Precision::Double => train_cmd::<f64>(&cfg, a.compare_2bp),
                Precision::Single => train_cmd::<f32>(&cfg, a.compare_2bp),
            }
        }
        Command::Verify(a) => verify(&RunConfig::resolve(&a.run.common, &a.run.tuning)?, a.inject_fault),
        Command::Gantt(a) => gantt(&a),
    }
}

fn to_f64(r: &Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn title(cfg: &ScheduleConfig) -> String {
    let split = if cfg.two_bp { " 2BP" } else { "" };
    format!("{} P={} M={}{split}", cfg.kind, cfg.ranks, cfg.micro_batches)
}

/// Same schedule without 2BP; the memory-efficient variant maps to plain 1F1B-2.
fn baseline(cfg: &ScheduleConfig) -> ScheduleConfig {
    let kind = match cfg.kind {
        ScheduleKind::OneFOneB2MemEff => ScheduleKind::OneFOneB2,
        k => k,
    };
    ScheduleConfig {
        kind,
        two_bp: false,
        ..*cfg
    }
}

fn memory_columns(streams: &[InstructionStream], memory: &MemoryModel) -> Result<(String, String)> {
    let peaks = peak_memory(streams, memory)?;
    Ok((join_units(&peaks.activation), join_units(&peaks.interm_deriv)))
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    let sched = cfg.schedule()?;
    let cost = CostModel::uniform(
        sched.ranks,
        RankCosts {
            t_f: cfg.t_f,
            t_b1: cfg.t_b1,
            t_b2: cfg.t_b2,
        },
        cfg.t_comm,
    );
    let memory = MemoryModel::hold_all(sched.ranks);

    let row = |sched: &ScheduleConfig| -> Result<(ReportRow, Trace, Ratio<i64>)> {
        let streams = generate_schedule(sched)?;
        let timeline = simulate_timeline(&streams, &cost)?;
        let bubble = bubble_ratio_from_timeline(&timeline)?;
        let (peak_act, peak_ideriv) = memory_columns(&streams, &memory)?;
        let row = ReportRow {
            kind: sched.kind.to_string(),
            ranks: sched.ranks,
            micro_batches: sched.micro_batches,
            two_bp: sched.two_bp,
            bubble_ratio: to_f64(&bubble),
            gain: None,
            peak_act,
            peak_ideriv,
        };
        Ok((row, timeline.to_trace(), bubble))
    };

    let (mut main, trace, bubble) = row(&sched)?;
    let mut rows = Vec::new();
    if sched.two_bp {
        let (base, _, base_bubble) = row(&baseline(&sched))?;
        main.gain = Some(to_f64(&throughput_gain(base_bubble, bubble)?));
        rows.push(base);
    }
    println!("{}: bubble_ratio {}", title(&sched), main.bubble_ratio);
    if let Some(g) = main.gain {
        println!("throughput gain over no-2BP: {g}");
    }
    rows.push(main);
    emit(&cfg.out, &rows, &trace, &title(&sched))
}

fn emit(out: &Path, rows: &[ReportRow], trace: &Trace, title: &str) -> Result<()> {
    write(out, "report.csv", &rows_to_csv(rows)?)?;
    write(out, "trace.jsonl", &trace.to_jsonl())?;
    write(out, "schedule.svg", &svg::render(trace, title))?;
    println!("wrote report.csv, trace.jsonl, schedule.svg to {}", out.display());
    Ok(())
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let schedule = cfg.schedule()?;
    Ok(TrainConfig {
        schedule,
        model: cfg.model_config()?,
        optimizer: cfg.optimizer_config(),
        batch_size: cfg.batch_size(schedule.micro_batches),
        steps: cfg.steps,
        seed: cfg.seed,
    })
}

fn train_row(tc: &TrainConfig, report: &TrainReport, gain: Option<f64>) -> Result<ReportRow> {
    let streams = generate_schedule(&tc.schedule)?;
    let memory = MemoryModel::for_stages(&build_model(&tc.model)?);
    let (peak_act, peak_ideriv) = memory_columns(&streams, &memory)?;
    Ok(ReportRow {
        kind: tc.schedule.kind.to_string(),
        ranks: tc.schedule.ranks,
        micro_batches: tc.schedule.micro_batches,
        two_bp: tc.schedule.two_bp,
        bubble_ratio: report.bubble_ratio,
        gain,
        peak_act,
        peak_ideriv,
    })
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

fn print_report(label: &str, r: &TrainReport) {
    println!(
        "{label}: loss {:.6} -> {:.6}, {:.1} samples/s, bubble_ratio {:.4}",
        r.losses.first().copied().unwrap_or(f64::NAN),
        r.losses.last().copied().unwrap_or(f64::NAN),
        r.samples_per_sec,
        r.bubble_ratio
    );
    println!("grad_checksum {}", r.grad_checksum);
    println!("param_checksum {}", r.param_checksum);
}

fn train_cmd<T: Element>(cfg: &RunConfig, compare: bool) -> Result<()> {
    let tc = train_config(cfg)?;
    let (rows, shown) = if compare {
        ensure!(
            tc.schedule.kind != ScheduleKind::OneFOneB2MemEff,
            "--compare-2bp needs a schedule that exists without 2BP"
        );
        let c = compare_two_bp::<T>(&tc, cfg.repeats)?;
        let mut without = tc.clone();
        without.schedule.two_bp = false;
        let mut with = tc.clone();
        with.schedule.two_bp = true;
        print_report("without 2BP", &c.without);
        print_report("with 2BP", &c.with);
        println!("throughput gain {:.4}", c.gain);
        let rows = vec![
            train_row(&without, &c.without, None)?,
            train_row(&with, &c.with, Some(c.gain))?,
        ];
        (rows, c.with)
    } else {
        let r = train::<T>(&tc)?;
        print_report(&title(&tc.schedule), &r);
        (vec![train_row(&tc, &r, None)?], r)
    };
    write(&cfg.out, "losses.csv", &losses_csv(&shown.losses))?;
    emit(&cfg.out, &rows, &shown.trace, &title(&tc.schedule))
}

fn print_checks(checks: &[Check]) -> Vec<String> {
    let mut failed = Vec::new();
    for c in checks {
        let verdict = if c.passed() { "ok  " } else { "FAIL" };
        println!("{verdict} {:<40} rel err {:.3e} (tol {:.0e})", c.name, c.max_rel_err, c.tolerance);
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    failed
}

fn verify(cfg: &RunConfig, fault: Option<Fault>) -> Result<()> {
    if Precision::from_env()? != Precision::Double {
        bail!("verify needs TWOBP_PRECISION=double; single precision cannot meet the tolerances");
    }
    let _guard = fault.map(|Fault::RmsnormP2Sign| FaultGuard::rmsnorm_p2_sign());
    let mut failed = print_checks(&finite_difference_suite(cfg.seed)?);
    failed.extend(print_checks(&equivalence_suite(&default_grid(&[cfg.ranks]), cfg.seed)?));
    if failed.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        bail!("{} check(s) failed: {}", failed.len(), failed.join(", "))
    }
}

/// Keeps the injected fault active for its lifetime.
struct FaultGuard;

impl FaultGuard {
    fn rmsnorm_p2_sign() -> Self {
        twobp::layers::fault::flip_rmsnorm_p2_sign(true);
        FaultGuard
    }
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        twobp::layers::fault::flip_rmsnorm_p2_sign(false);
    }
}

fn gantt(a: &GanttArgs) -> Result<()> {
    let text = fs::read_to_string(&a.trace).with_context(|| format!("reading {}", a.trace.display()))?;
    let trace = Trace::from_jsonl(&text)?;
    ensure!(!trace.events.is_empty(), "{} has no events", a.trace.display());
    let out = a
        .out
        .clone()
        .or_else(|| a.trace.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let name = a.trace.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let path = write(&out, "schedule.svg", &svg::render(&trace, name))?;
    println!("wrote {}", path.display());
    Ok(())
}
