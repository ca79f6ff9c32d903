use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use hgsignal::baselines::{FixedTime, MaxPressure};
use hgsignal::datamodel::{flow_to_json, generate_grid, load_flow, load_roadnet, roadnet_to_json, DataError, FlowSpec, RoadNetwork};
use hgsignal::masac::{self, GreedyPolicy, Masac, MasacError};
use hgsignal::selfcheck::{self, Fault};
use hgsignal::simulator::{run_episode, write_step_csv, write_vehicle_csv, MetricsRecord, SimError};

use crate::config::{ControllerKind, Mode, Overrides, RunConfig};
use crate::CliError;

#[derive(Parser)]
#[command(name = "hgsignal", about = "Traffic signal control with a hypergraph-enhanced multi-agent soft actor-critic")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a grid roadnet and its flow file
    Generate(GenerateArgs),
    /// Train HG-DRL; writes a checkpoint and the training log
    Train(TrainArgs),
    /// Run one evaluation episode and print its summary
    Eval(EvalArgs),
    /// Mean and standard deviation of ATT/throughput per controller over seeds
    Compare(CompareArgs),
    /// Gradient and invariant self-check
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub rows: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub cols: u64,
    #[arg(long, value_enum, default_value = "bi")]
    pub mode: Mode,
    #[arg(long, default_value_t = 300.0)]
    pub main_rate: f64,
    #[arg(long, default_value_t = 90.0)]
    pub cross_rate: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: Overrides,
    /// Suppress the per-episode progress lines
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: Overrides,
    /// Trained model for the hgdrl controller
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: Overrides,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fixed,maxpressure")]
    pub controllers: Vec<ControllerKind>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Evaluate this model for hgdrl instead of training one per seed
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args)]
pub struct SelfcheckArgs {
    /// Corrupt one analytic gradient to exercise the failure path
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Compare(a) => compare(&a),
        Command::Selfcheck(a) => run_selfcheck(&a),
    }
}

fn data_error(e: DataError) -> CliError {
    match e {
        DataError::Io { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Validation(other.to_string()),
    }
}

fn masac_error(e: MasacError) -> CliError {
    match e {
        MasacError::Config(_) => CliError::Validation(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn sim_error(e: SimError) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_error(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut out = create(path)?;
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(io_error(path))
}

fn scenario(cfg: &RunConfig) -> Result<(Arc<RoadNetwork>, FlowSpec), CliError> {
    match (&cfg.roadnet, &cfg.flow) {
        (Some(r), Some(f)) => {
            let net = load_roadnet(r).map_err(data_error)?;
            let flow = load_flow(f, Some(&net)).map_err(data_error)?;
            Ok((Arc::new(net), flow))
        }
        _ => {
            let (net, flow) =
                generate_grid(cfg.rows, cfg.cols, cfg.mode.into(), cfg.main_rate, cfg.cross_rate).map_err(data_error)?;
            Ok((Arc::new(net), flow))
        }
    }
}

fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let (net, flow) = generate_grid(a.rows as usize, a.cols as usize, a.mode.into(), a.main_rate, a.cross_rate).map_err(data_error)?;
    let roadnet = a.out.join("roadnet.json");
    let flow_path = a.out.join("flow.json");
    write_text(&roadnet, &roadnet_to_json(&net))?;
    write_text(&flow_path, &flow_to_json(&flow))?;
    println!("wrote {} and {}", roadnet.display(), flow_path.display());
    Ok(())
}

fn train_model(cfg: &RunConfig, net: Arc<RoadNetwork>, flow: &FlowSpec, seed: u64, verbose: bool) -> Result<(Masac, masac::TrainingLog), CliError> {
    masac::train(net, flow, cfg.sim(), &cfg.masac(), seed, |e| {
        if verbose {
            println!(
                "episode {} ATT={:.2} throughput={} critic_loss={:.4} actor_loss={:.4} recon_loss={:.4} alpha={:.5} entropy={:.4}",
                e.episode, e.att, e.throughput, e.critic_loss, e.actor_loss, e.recon_loss, e.alpha, e.mean_entropy
            );
        }
    })
    .map_err(masac_error)
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&a.run)?;
    let (net, flow) = scenario(&cfg)?;
    let (model, log) = train_model(&cfg, net, &flow, cfg.seed, !a.quiet)?;
    let ckpt = cfg.out_dir.join("checkpoint.json");
    let log_path = cfg.out_dir.join("train_log.csv");
    write_text(&ckpt, &model.checkpoint_json())?;
    let mut out = create(&log_path)?;
    masac::write_log_csv(&mut out, &log).and_then(|_| out.flush()).map_err(io_error(&log_path))?;
    println!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path, agents: usize) -> Result<Masac, CliError> {
    Masac::load(path, cfg.masac(), agents).map_err(masac_error)
}

fn run_controller(
    cfg: &RunConfig,
    kind: ControllerKind,
    net: Arc<RoadNetwork>,
    flow: &FlowSpec,
    seed: u64,
    model: Option<&Masac>,
) -> Result<MetricsRecord, CliError> {
    match kind {
        ControllerKind::Fixed => run_episode(net, flow, seed, cfg.sim(), &mut FixedTime(cfg.plan()?)).map_err(sim_error),
        ControllerKind::Maxpressure => run_episode(net, flow, seed, cfg.sim(), &mut MaxPressure).map_err(sim_error),
        ControllerKind::Hgdrl => {
            let trained;
            let model = match model {
                Some(m) => m,
                None => {
                    trained = train_model(cfg, net.clone(), flow, seed, false)?.0;
                    &trained
                }
            };
            run_episode(net, flow, seed, cfg.sim(), &mut GreedyPolicy(model)).map_err(sim_error)
        }
    }
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&a.run)?;
    let (net, flow) = scenario(&cfg)?;
    let model = match (cfg.controller, &a.checkpoint) {
        (ControllerKind::Hgdrl, Some(path)) => Some(load_model(&cfg, path, net.agent_count())?),
        (ControllerKind::Hgdrl, None) => return Err(CliError::Usage("the hgdrl controller needs --checkpoint".into())),
        _ => None,
    };
    let m = run_controller(&cfg, cfg.controller, net, &flow, cfg.seed, model.as_ref())?;
    let steps = cfg.out_dir.join("eval_steps.csv");
    let vehicles = cfg.out_dir.join("eval_vehicles.csv");
    let mut out = create(&steps)?;
    write_step_csv(&m, &mut out).and_then(|_| out.flush()).map_err(io_error(&steps))?;
    let mut out = create(&vehicles)?;
    write_vehicle_csv(&m, &mut out).and_then(|_| out.flush()).map_err(io_error(&vehicles))?;
    println!("ATT={} throughput={}", m.att, m.throughput);
    Ok(())
}

/// Mean and sample standard deviation; zero spread for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn compare(a: &CompareArgs) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&a.run)?;
    if a.controllers.is_empty() || a.seeds.is_empty() {
        return Err(CliError::Usage("compare needs at least one controller and one seed".into()));
    }
    let (net, flow) = scenario(&cfg)?;
    let model = match &a.checkpoint {
        Some(path) => Some(load_model(&cfg, path, net.agent_count())?),
        None => None,
    };
    let jobs: Vec<(ControllerKind, u64)> = a.controllers.iter().flat_map(|&c| a.seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<Result<MetricsRecord, CliError>> =
        cfg.exec().map(&jobs, |&(kind, seed)| run_controller(&cfg, kind, net.clone(), &flow, seed, model.as_ref()));
    let results: Vec<MetricsRecord> = results.into_iter().collect::<Result<_, _>>()?;

    let runs_path = cfg.out_dir.join("compare_runs.csv");
    let summary_path = cfg.out_dir.join("compare.csv");
    let mut runs = create(&runs_path)?;
    let mut summary = create(&summary_path)?;
    let write = |w: &mut BufWriter<File>, line: String, path: &Path| writeln!(w, "{line}").map_err(io_error(path));
    write(&mut runs, "controller,seed,att,throughput".into(), &runs_path)?;
    write(&mut summary, "controller,att_mean,att_std,throughput_mean,throughput_std,runs".into(), &summary_path)?;
    println!("{:<12} {:>22} {:>22}", "controller", "ATT (s)", "throughput");
    for &kind in &a.controllers {
        let mine: Vec<(&(ControllerKind, u64), &MetricsRecord)> = jobs.iter().zip(&results).filter(|(j, _)| j.0 == kind).collect();
        for ((_, seed), m) in &mine {
            write(&mut runs, format!("{},{seed},{},{}", kind.name(), m.att, m.throughput), &runs_path)?;
        }
        let atts: Vec<f64> = mine.iter().map(|(_, m)| m.att).collect();
        let thr: Vec<f64> = mine.iter().map(|(_, m)| m.throughput as f64).collect();
        let (am, asd) = mean_std(&atts);
        let (tm, tsd) = mean_std(&thr);
        write(&mut summary, format!("{},{am},{asd},{tm},{tsd},{}", kind.name(), atts.len()), &summary_path)?;
        println!("{:<12} {:>13.2} ± {:<6.2} {:>13.1} ± {:<6.1}", kind.name(), am, asd, tm, tsd);
    }
    runs.flush().map_err(io_error(&runs_path))?;
    summary.flush().map_err(io_error(&summary_path))?;
    Ok(())
}

fn run_selfcheck(a: &SelfcheckArgs) -> Result<(), CliError> {
    let fault = if a.corrupt_gradient { Fault::CorruptGradient } else { Fault::None };
    let report = selfcheck::run_all(fault);
    for r in &report {
        println!(
            "{} {:<20} max_error={:.3e} checked={} ({})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.checked,
            r.detail
        );
    }
    let failed = report.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError::Runtime(format!("{failed} self-check suite(s) failed")))
    }
}
