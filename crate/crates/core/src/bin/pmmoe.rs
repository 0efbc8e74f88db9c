//! Command-line entry point.
//!
//! Subcommands: partition, pretrain, finetune, theorem, eval, run, plot,
//! config. `run` chains partition -> pretrain -> finetune -> theorem -> eval
//! and writes a MANIFEST. Set PMMOE_LOG=off|info|debug to control logging.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use pmmoe_core::error::{Error, Result};
use pmmoe_core::harness::config::ExperimentConfig;
use pmmoe_core::harness::metrics::{
    energy_csv, eval_csv, phase1_csv, phase2_csv, theorem_csv, EvalRow,
};
use pmmoe_core::harness::{log, pipeline, plot};
use pmmoe_core::moe::evaluate_moe;
use pmmoe_core::theory::verify_bound;

const USAGE: &str = "\
usage: pmmoe <command> [flags]

commands:
  partition   build the dataset and write partition.csv
  pretrain    run federated pretraining, write checkpoints and metrics
  finetune    train per-client gates over the frozen expert pools
  theorem     verify the accuracy lower bound on the default grid
  eval        evaluate phase-1 vs phase-2 accuracies from checkpoints
  run         all of the above in order, plus a MANIFEST
  plot        render SVG charts from a metrics CSV
  config      print the effective configuration (--defaults for defaults)

flags:
  --config PATH   read a key=value config file
  --seed N        override the seed
  --out DIR       override the output directory
  --workers N     override the worker count
  --trials N      Monte Carlo trials for `theorem` (default 100000)
  --csv PATH      input CSV for `plot`
  --defaults      with `config`: print built-in defaults and exit
";

struct Cli {
    command: String,
    config_path: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    trials: usize,
    csv: Option<PathBuf>,
    defaults: bool,
}

fn parse_args(mut args: Vec<String>) -> Result<Cli> {
    if args.is_empty() {
        return Err(Error::Config {
            message: "missing command".into(),
        });
    }
    let command = args.remove(0);
    let mut cli = Cli {
        command,
        config_path: None,
        seed: None,
        out: None,
        workers: None,
        trials: 100_000,
        csv: None,
        defaults: false,
    };
    let mut it = args.into_iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| {
            it.next().ok_or_else(|| Error::Config {
                message: format!("flag {name} needs a value"),
            })
        };
        match flag.as_str() {
            "--config" => cli.config_path = Some(PathBuf::from(value("--config")?)),
            "--seed" => {
                cli.seed = Some(value("--seed")?.parse().map_err(|_| Error::Config {
                    message: "bad --seed".into(),
                })?)
            }
            "--out" => cli.out = Some(PathBuf::from(value("--out")?)),
            "--workers" => {
                cli.workers = Some(value("--workers")?.parse().map_err(|_| Error::Config {
                    message: "bad --workers".into(),
                })?)
            }
            "--trials" => {
                cli.trials = value("--trials")?.parse().map_err(|_| Error::Config {
                    message: "bad --trials".into(),
                })?
            }
            "--csv" => cli.csv = Some(PathBuf::from(value("--csv")?)),
            "--defaults" => cli.defaults = true,
            other => {
                return Err(Error::Config {
                    message: format!("unknown flag `{other}`"),
                })
            }
        }
    }
    Ok(cli)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config_path {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn cmd_partition(cfg: &ExperimentConfig) -> Result<()> {
    let prepared = pipeline::prepare_data(cfg)?;
    write(
        &cfg.out_dir,
        "partition.csv",
        &prepared.partition.to_csv(&prepared.data),
    )?;
    pipeline::write_manifest(&cfg.out_dir, "partial (partition only)")?;
    log::info(&format!(
        "partition written to {}",
        cfg.out_dir.join("partition.csv").display()
    ));
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let prepared = pipeline::prepare_data(cfg)?;
    let mut fed = pipeline::init_federation(cfg, &prepared)?;
    let history = pipeline::run_pretrain(cfg, &mut fed)?;
    write(&cfg.out_dir, "partition.csv", &prepared.partition.to_csv(&prepared.data))?;
    write(&cfg.out_dir, "metrics_phase1.csv", &phase1_csv(&history))?;
    for client in &fed.clients {
        pipeline::write_client_checkpoint(&cfg.out_dir, client)?;
    }
    pipeline::write_server_checkpoint(&cfg.out_dir, &fed.server)?;
    pipeline::write_manifest(&cfg.out_dir, "partial (through pretrain)")?;
    let last = history.last().expect("at least one round");
    log::info(&format!("pretrain done, a_total {}", last.a_total));
    Ok(())
}

/// Reload the pretrained federation from checkpoints.
fn reload_federation(cfg: &ExperimentConfig) -> Result<pipeline::Federation> {
    let prepared = pipeline::prepare_data(cfg)?;
    let mut fed = pipeline::init_federation(cfg, &prepared)?;
    for j in 0..cfg.clients {
        pipeline::load_client_model(&mut fed.clients[j].model, &cfg.out_dir, j)?;
    }
    Ok(fed)
}

fn cmd_finetune(cfg: &ExperimentConfig) -> Result<()> {
    let fed = reload_federation(cfg)?;
    let pool = pipeline::build_pool(&fed)?;
    let outcomes = pipeline::run_finetune(cfg, &fed, &pool)?;
    let rows: Vec<_> = outcomes.iter().flat_map(|o| o.rows.clone()).collect();
    write(&cfg.out_dir, "metrics_phase2.csv", &phase2_csv(&rows))?;
    for (client, outcome) in fed.clients.iter().zip(&outcomes) {
        pipeline::write_gate_checkpoint(&cfg.out_dir, client.id, &outcome.gates)?;
    }
    let energy_rows: Vec<_> = fed
        .clients
        .iter()
        .zip(&outcomes)
        .filter_map(|(c, o)| {
            o.final_reports
                .pe
                .as_ref()
                .or(o.final_reports.pp.as_ref())
                .map(|r| (c.id, r))
        })
        .collect();
    write(&cfg.out_dir, "energy.csv", &energy_csv(&energy_rows))?;
    pipeline::write_manifest(&cfg.out_dir, "partial (through finetune)")?;
    log::info("finetune done");
    Ok(())
}

fn cmd_theorem(cfg: &ExperimentConfig, trials: usize) -> Result<()> {
    let checks = verify_bound(&pipeline::default_theorem_grid(), trials, cfg.seed)?;
    write(&cfg.out_dir, "theorem.csv", &theorem_csv(&checks))?;
    pipeline::write_manifest(&cfg.out_dir, "partial (theorem)")?;
    for c in &checks {
        log::info(&format!(
            "M={} p={} alpha={}: bound {:.6} exact {:.6} mc {:.6}±{:.6} pass={}",
            c.params.experts,
            c.params.accuracy,
            c.params.advantage,
            c.bound,
            c.exact,
            c.mc_estimate,
            c.mc_se,
            c.pass
        ));
    }
    if let Some(failed) = checks.iter().find(|c| !c.pass) {
        return Err(Error::InvalidParameter {
            name: "theorem",
            message: format!(
                "bound violated at M={} p={} alpha={}",
                failed.params.experts, failed.params.accuracy, failed.params.advantage
            ),
        });
    }
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let fed = reload_federation(cfg)?;
    let pool = pipeline::build_pool(&fed)?;
    let split_cfg = fed.clients[0].model.config;
    let mut rows = Vec::new();
    let mut w1 = Vec::new();
    let mut w2 = Vec::new();
    for client in &fed.clients {
        let gates = pipeline::load_gates(cfg, &split_cfg, &cfg.out_dir, client.id, &pool)?;
        let masks = pipeline::recompute_masks(cfg, &client.model, &pool, client.id, &client.train)?;
        let phase1 = client.model.evaluate(&client.test)?;
        let phase2 = evaluate_moe(&client.model, &pool, &gates, &masks, &client.test)?;
        w1.push((client.train_count, phase1));
        w2.push((client.train_count, phase2));
        rows.push(EvalRow {
            client: client.id,
            train_count: client.train_count,
            phase1_accuracy: phase1,
            phase2_accuracy: phase2,
        });
    }
    write(&cfg.out_dir, "eval.csv", &eval_csv(&rows))?;
    let a1 = pmmoe_core::harness::a_total(&w1)?;
    let a2 = pmmoe_core::harness::a_total(&w2)?;
    let mut summary = format!(
        "phase1_a_total {a1}\nphase2_a_total {a2}\ndelta {}\n",
        a2 - a1
    );
    for r in &rows {
        summary.push_str(&format!(
            "client {} train_count {} phase1 {} phase2 {} delta {}\n",
            r.client,
            r.train_count,
            r.phase1_accuracy,
            r.phase2_accuracy,
            r.phase2_accuracy - r.phase1_accuracy
        ));
    }
    write(&cfg.out_dir, "summary.txt", &summary)?;
    pipeline::write_manifest(&cfg.out_dir, "partial (through eval)")?;
    log::info(&format!("eval done: phase1 {a1} phase2 {a2}"));
    Ok(())
}

fn cmd_run(cfg: &ExperimentConfig, trials: usize) -> Result<()> {
    let summary = pipeline::run_experiment(cfg, trials)?;
    println!(
        "phase1_a_total {}\nphase2_a_total {}",
        summary.phase1_a_total, summary.phase2_a_total
    );
    Ok(())
}

fn cmd_plot(cfg: &ExperimentConfig, csv: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv)?;
    let stem = csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metrics".to_string());
    let written = plot::emit_plots(&text, &stem, &cfg.out_dir)?;
    if written.is_empty() {
        eprintln!("warning: no data rows in {}, nothing plotted", csv.display());
    }
    for path in written {
        log::info(&format!("wrote {}", path.display()));
    }
    Ok(())
}

fn dispatch() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "-h") || args.is_empty() {
        print!("{USAGE}");
        return Ok(());
    }
    let cli = parse_args(args)?;
    if cli.command == "config" && cli.defaults {
        print!("{}", ExperimentConfig::default().render());
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    match cli.command.as_str() {
        "partition" => cmd_partition(&cfg),
        "pretrain" => cmd_pretrain(&cfg),
        "finetune" => cmd_finetune(&cfg),
        "theorem" => cmd_theorem(&cfg, cli.trials),
        "eval" => cmd_eval(&cfg),
        "run" => cmd_run(&cfg, cli.trials),
        "plot" => {
            let csv = cli.csv.as_deref().ok_or_else(|| Error::Config {
                message: "plot requires --csv PATH".into(),
            })?;
            cmd_plot(&cfg, csv)
        }
        "config" => {
            print!("{}", cfg.render());
            Ok(())
        }
        other => Err(Error::Config {
            message: format!("unknown command `{other}`; see --help"),
        }),
    }
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
