use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use agdh::fsm::NodeConfig;
use agdh::oracle::{self, AuditReport, CostError};
use agdh::sim::{self, Scenario, SimConfig, SimOutcome};
use agdh::GroupParams;
use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;

use crate::{MetricsFormat, RunArgs};

/// Why a run did not end cleanly.
enum Failure {
    Config(anyhow::Error),
    Findings,
}

struct Report {
    seed: u64,
    summary: String,
    clean: bool,
}

pub fn main(args: &RunArgs) -> ExitCode {
    let seeds: Vec<u64> = (0..args.repeat).map(|i| args.seed.wrapping_add(i)).collect();
    let scenario = match load_scenario(args.scenario.as_deref()) {
        Ok(s) => s,
        Err(e) => return config_error(&e),
    };
    let results: Vec<Result<Report, anyhow::Error>> =
        seeds.par_iter().map(|&seed| run_seed(args, &scenario, seed)).collect();
    let mut failure = None;
    for r in results {
        match r {
            Ok(report) => {
                if args.repeat > 1 {
                    println!("== seed {}", report.seed);
                }
                print!("{}", report.summary);
                if !report.clean {
                    failure.get_or_insert(Failure::Findings);
                }
            }
            Err(e) => {
                failure = Some(Failure::Config(e));
                break;
            }
        }
    }
    match failure {
        None => ExitCode::SUCCESS,
        Some(Failure::Findings) => ExitCode::from(1),
        Some(Failure::Config(e)) => config_error(&e),
    }
}

fn config_error(e: &anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    ExitCode::from(2)
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    let Some(path) = path else {
        return Ok(Scenario::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
    Scenario::parse(&text).with_context(|| format!("parsing scenario {}", path.display()))
}

fn group(args: &RunArgs) -> GroupParams {
    if args.toy {
        GroupParams::toy()
    } else {
        GroupParams::modp_1024_160()
    }
}

fn out_dir(args: &RunArgs, seed: u64) -> Option<PathBuf> {
    let base = args.out.as_ref()?;
    Some(if args.repeat > 1 {
        base.join(format!("seed-{seed}"))
    } else {
        base.clone()
    })
}

fn run_seed(args: &RunArgs, scenario: &Scenario, seed: u64) -> Result<Report> {
    let params = Arc::new(group(args));
    let config = SimConfig {
        node_count: args.nodes,
        loss: args.loss,
        seed,
        duration: args.duration,
        schedule: scenario.actions.clone(),
        ..SimConfig::default()
    };
    let node_config = NodeConfig {
        eager_rekey: args.eager_rekey,
        ..NodeConfig::default()
    };
    let out = sim::run(config, node_config, Arc::clone(&params)).map_err(|e| anyhow!(e))?;
    let audit = oracle::audit_transcript(&out.transcript, &out.secrets, &params);
    let (summary, clean) = summarize(args, seed, &params, &out, &audit);
    if let Some(dir) = out_dir(args, seed) {
        write_files(&dir, args.metrics_format, &out, &audit)?;
    }
    Ok(Report { seed, summary, clean })
}

fn write_files(dir: &Path, format: MetricsFormat, out: &SimOutcome, audit: &AuditReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics = match format {
        MetricsFormat::Text => out.metrics.render_text(),
    };
    for (name, body) in [
        ("transcript.txt", out.transcript.render()),
        ("metrics.txt", metrics),
        ("audit.txt", audit.render()),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn summarize(args: &RunArgs, seed: u64, params: &GroupParams, out: &SimOutcome, audit: &AuditReport) -> (String, bool) {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "run seed={seed} nodes={} loss={} duration={}s group={}",
        args.nodes,
        args.loss,
        args.duration.as_secs_f64(),
        params.name()
    );
    let _ = writeln!(s, "{:>12}  {:<8} {:>6} {:>6}", "time_s", "state", "leader", "epoch");
    for (at, state) in &out.metrics.convergence {
        match state {
            Some(a) => {
                let epoch = a.epoch.map_or("-".to_string(), |e| e.to_string());
                let _ = writeln!(
                    s,
                    "{:>12.6}  {:<8} {:>6} {:>6}",
                    at.as_secs_f64(),
                    "agreed",
                    a.leader,
                    epoch
                );
            }
            None => {
                let _ = writeln!(s, "{:>12.6}  {:<8} {:>6} {:>6}", at.as_secs_f64(), "split", "-", "-");
            }
        }
    }

    let mut ok = true;
    let m = args.nodes as usize;
    let fresh = args.scenario.is_none() && args.loss == 0.0;
    match oracle::cost_table(&out.transcript, m) {
        Ok(row) => {
            let _ = writeln!(s, "cost {} match", row.render());
        }
        Err(CostError::NotFound(_)) => {
            let _ = writeln!(s, "cost m={m} not established");
        }
        Err(e) if fresh => {
            ok = false;
            let _ = writeln!(s, "cost m={m} mismatch: {e}");
        }
        Err(_) => {
            if let Ok(row) = oracle::measure_establishment(&out.transcript, m) {
                let _ = writeln!(s, "cost {} measured", row.render());
            }
        }
    }

    let _ = writeln!(
        s,
        "audit keys={} deliveries={} scanned={} findings={} {}",
        audit.keys_checked,
        audit.deliveries_checked,
        audit.messages_scanned,
        audit.findings.len(),
        if audit.is_clean() { "clean" } else { "dirty" }
    );
    for f in &audit.findings {
        let _ = writeln!(s, "  {f}");
    }

    let agreed = out.metrics.final_agreement();
    let conserved = out.metrics.is_conserved();
    match agreed {
        Some(a) => {
            let key = a
                .derived
                .map_or("-".to_string(), |k| k[..8].iter().map(|b| format!("{b:02x}")).collect());
            let _ = writeln!(s, "final leader={} key={key}", a.leader);
        }
        None => {
            let _ = writeln!(s, "final no agreement");
        }
    }
    if !conserved {
        let _ = writeln!(s, "message accounting does not balance");
    }
    ok &= agreed.is_some() && conserved && audit.is_clean();
    let _ = writeln!(s, "result {}", if ok { "ok" } else { "fail" });
    (s, ok)
}
