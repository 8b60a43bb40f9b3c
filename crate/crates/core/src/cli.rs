//! Batch command-line surface. Every subcommand reads one config file,
//! writes its artifacts plus `summary.json` into the output directory, and
//! maps failures onto stable exit codes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataio::{csv_string, load_config, write_atomic, RunConfig};
use crate::eqprop::{evaluate, load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::experiments as exp;
use crate::fhn::free_energy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "fhn-eqprop",
    version,
    about = "FitzHugh-Nagumo networks, equilibrium propagation and depth recursions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Validate the config and print the plan without touching data or
    /// writing files.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Caps the worker thread count.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Integrate a network and record its trajectory.
    Simulate,
    /// Relax a network to its steady state.
    Relax,
    /// Symmetry of steady-state responses over random networks.
    SelfadjointCheck,
    /// EqProp estimate against finite-difference gradients.
    Gradcheck,
    /// Train a layered network on MNIST.
    Train,
    /// Evaluate a training checkpoint on the MNIST test split.
    Eval,
    /// Layer-wise inference on a residual network.
    HamInfer,
    /// Layer-wise inference on random Hopfield energy models.
    EbmInfer,
    /// Recursion against time dynamics on the 30x64 residual network.
    Fig2,
    /// Plotting-ready CSV for the depth recursion and the path pattern.
    ExportPlotData,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Relax => "relax",
            Command::SelfadjointCheck => "selfadjoint-check",
            Command::Gradcheck => "gradcheck",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::HamInfer => "ham-infer",
            Command::EbmInfer => "ebm-infer",
            Command::Fig2 => "fig2",
            Command::ExportPlotData => "export-plot-data",
        }
    }

    fn artifacts(self) -> &'static [&'static str] {
        match self {
            Command::Simulate => &["trajectory.csv", "final_state.csv"],
            Command::Relax => &["state.csv"],
            Command::SelfadjointCheck => &["selfadjoint.csv"],
            Command::Gradcheck => &["gradcheck.csv"],
            Command::Train => &["metrics.csv", "checkpoint/"],
            Command::Eval => &["eval.csv"],
            Command::HamInfer => &["depth_trajectory.csv", "layers.csv"],
            Command::EbmInfer => &["ebm.csv"],
            Command::Fig2 => &["fig2.csv", "fig2_layers.csv"],
            Command::ExportPlotData => &[
                "plot_fig2_field.csv",
                "plot_fig2_deviation.csv",
                "plot_path_profile.csv",
            ],
        }
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else if e.is_io() {
        EXIT_IO
    } else {
        EXIT_NUMERICAL
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub formulation: Value,
    pub metrics: Value,
    pub artifacts: Vec<String>,
    pub dry_run: bool,
    pub wall_clock_seconds: f64,
}

/// Resolves the config: file or defaults, then the seed override.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// SHA-256 of the resolved config's canonical JSON.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let text = serde_json::to_string(cfg)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn formulation(cfg: &RunConfig) -> Value {
    json!({
        "formulation": cfg.fhn.formulation,
        "residual_formulation": cfg.residual.fhn.formulation,
        "inhibitor_mode": cfg.residual.inhibitor_mode,
        "ghost_half": cfg.residual.ghost_half,
    })
}

struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.dir.join(name), contents.as_bytes())?;
        self.written.push(name.to_string());
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs one command and writes its artifacts.
pub fn run(cmd: Command, common: &CommonArgs) -> Result<Summary> {
    let start = Instant::now();
    let cfg = resolve_config(common)?;
    let hash = config_hash(&cfg)?;
    if common.dry_run {
        return Ok(Summary {
            command: cmd.name().into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: hash,
            seed: cfg.seed,
            formulation: formulation(&cfg),
            metrics: json!({}),
            artifacts: cmd.artifacts().iter().map(|s| s.to_string()).collect(),
            dry_run: true,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        });
    }
    create_dir(&common.out)?;
    let mut out = Output {
        dir: common.out.clone(),
        written: Vec::new(),
    };
    out.write("config.json", &cfg.to_json()?)?;
    let metrics = dispatch(cmd, &cfg, &mut out)?;
    let summary = Summary {
        command: cmd.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hash,
        seed: cfg.seed,
        formulation: formulation(&cfg),
        metrics,
        artifacts: out.written.clone(),
        dry_run: false,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_atomic(
        &common.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(summary)
}

fn dispatch(cmd: Command, cfg: &RunConfig, out: &mut Output) -> Result<Value> {
    let seed = cfg.seed;
    match cmd {
        Command::Simulate => {
            let s = exp::network_setup(cfg, seed)?;
            let sc = &cfg.simulate;
            let tr = s.network.simulate(
                &s.initial,
                &s.input,
                cfg.relax.dt,
                sc.steps,
                sc.record_every,
            )?;
            out.write("trajectory.csv", &tr.to_csv())?;
            let last = tr
                .records
                .last()
                .ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
            out.write("final_state.csv", &state_csv(&last.u, &last.v))?;
            let state = crate::fhn::NetworkState::new(last.u.clone(), last.v.clone())?;
            Ok(json!({
                "nodes": s.network.node_count(),
                "steps": sc.steps,
                "records": tr.records.len(),
                "final_free_energy": free_energy(&state, &cfg.fhn),
                "final_residual": s.network.stationarity_residual(&state, &s.input)?,
            }))
        }
        Command::Relax => {
            let s = exp::network_setup(cfg, seed)?;
            let r = s.network.relax(&s.initial, &s.input, &cfg.relax)?;
            out.write("state.csv", &state_csv(&r.state.u, &r.state.v))?;
            Ok(json!({
                "nodes": s.network.node_count(),
                "converged": r.converged,
                "steps": r.steps,
                "stationarity_residual": s.network.stationarity_residual(&r.state, &s.input)?,
                "free_energy": free_energy(&r.state, &cfg.fhn),
            }))
        }
        Command::SelfadjointCheck => {
            let r = exp::selfadjoint_check(cfg, seed)?;
            let rows: Vec<Vec<String>> = r
                .networks
                .iter()
                .map(|n| {
                    vec![
                        n.index.to_string(),
                        n.regime.to_string(),
                        n.nodes.to_string(),
                        n.relax_steps.to_string(),
                        n.analytic_defect.to_string(),
                        n.probe_defect.to_string(),
                    ]
                })
                .collect();
            out.write(
                "selfadjoint.csv",
                &csv_string(
                    "index,regime,nodes,relax_steps,analytic_defect,probe_defect",
                    &rows,
                ),
            )?;
            println!(
                "max analytic symmetry defect {:e} (tol {:e}), max probe defect {:e} (tol {:e})",
                r.max_analytic_defect, r.analytic_tol, r.max_probe_defect, r.probe_tol
            );
            Ok(json!({
                "networks": r.networks.len(),
                "max_analytic_defect": r.max_analytic_defect,
                "max_probe_defect": r.max_probe_defect,
                "analytic_tol": r.analytic_tol,
                "probe_tol": r.probe_tol,
                "passed": r.passed,
            }))
        }
        Command::Gradcheck => {
            let r = exp::gradcheck(cfg, seed)?;
            let rows: Vec<Vec<String>> = r
                .runs
                .iter()
                .flat_map(|run| {
                    run.layers.iter().map(move |l| {
                        vec![
                            run.net.to_string(),
                            l.layer.to_string(),
                            l.cosine.to_string(),
                            l.relative_error.to_string(),
                            l.magnitude_ratio.to_string(),
                            l.fd_norm.to_string(),
                        ]
                    })
                })
                .collect();
            out.write(
                "gradcheck.csv",
                &csv_string(
                    "net,layer,cosine,relative_error,magnitude_ratio,fd_norm",
                    &rows,
                ),
            )?;
            println!(
                "min cosine {} (required {})",
                r.min_cosine, r.required_cosine
            );
            Ok(json!({
                "nets": r.runs.len(),
                "min_cosine": r.min_cosine,
                "required_cosine": r.required_cosine,
                "passed": r.passed,
            }))
        }
        Command::Train => {
            let (train, test) = exp::load_mnist(cfg)?;
            let (net, report, log) = exp::train(cfg, seed, &train, &test, |e| {
                log::info!(
                    "epoch {}: train loss {:.4} error {:.4}, test loss {:.4} error {:.4}",
                    e.epoch,
                    e.train.loss,
                    e.train.error,
                    e.test.loss,
                    e.test.error
                );
            })?;
            out.write("metrics.csv", &log.to_csv())?;
            let ckpt = out.dir.join("checkpoint");
            create_dir(&ckpt)?;
            save_checkpoint(&net, &ckpt)?;
            out.written.push("checkpoint/".into());
            println!("final test error {:.4}", report.final_test_error);
            Ok(serde_json::to_value(&report)?)
        }
        Command::Eval => {
            let ckpt = cfg
                .data
                .checkpoint
                .clone()
                .unwrap_or_else(|| out.dir.join("checkpoint"));
            let net = load_checkpoint(&ckpt)?;
            let (_, test) = exp::load_mnist(cfg)?;
            let m = evaluate(&net, &test, cfg.train.free_iters, cfg.train.dt)?;
            out.write(
                "eval.csv",
                &csv_string(
                    "split,samples,loss,error",
                    &[vec![
                        "test".to_string(),
                        test.len().to_string(),
                        m.loss.to_string(),
                        m.error.to_string(),
                    ]],
                ),
            )?;
            println!("test error {:.4}", m.error);
            Ok(json!({ "samples": test.len(), "loss": m.loss, "error": m.error }))
        }
        Command::HamInfer => {
            let (_, r) = exp::fig2(cfg, seed)?;
            out.write("depth_trajectory.csv", &r.comparison.trajectory.to_csv())?;
            out.write("layers.csv", &layers_csv(&r))?;
            Ok(fig2_metrics(&r))
        }
        Command::Fig2 => {
            let (t, r) = exp::fig2(cfg, seed)?;
            out.write("fig2.csv", &r.comparison.to_csv(&t))?;
            out.write("fig2_layers.csv", &layers_csv(&r))?;
            println!(
                "tracked {} layers below {:e}; deviation at depth {:e}",
                r.tracked_layers, r.comparison.threshold, r.deviation_at_depth
            );
            Ok(fig2_metrics(&r))
        }
        Command::EbmInfer => {
            let r = exp::ebm_check(cfg, seed)?;
            let rows: Vec<Vec<String>> = r
                .runs
                .iter()
                .flat_map(|run| {
                    run.report
                        .layer_deviation
                        .iter()
                        .enumerate()
                        .map(move |(l, d)| vec![run.net.to_string(), l.to_string(), d.to_string()])
                })
                .collect();
            out.write("ebm.csv", &csv_string("net,layer,deviation", &rows))?;
            println!(
                "max reconstruction deviation {:e}, max balance residual {:e}",
                r.max_deviation, r.max_balance_residual
            );
            let mut v = serde_json::to_value(&r)?;
            if let Some(o) = v.as_object_mut() {
                o.remove("runs");
                o.insert("nets".into(), json!(r.runs.len()));
            }
            Ok(v)
        }
        Command::ExportPlotData => {
            let (t, r) = exp::fig2(cfg, seed)?;
            let mut field = String::from("layer,node,u_time,u_ham\n");
            for (l, ph) in r.comparison.trajectory.points.iter().enumerate() {
                for k in 0..t.width() {
                    let ut = r.comparison.steady.u[t.node_index(l, k)];
                    field.push_str(&format!("{l},{k},{ut},{}\n", ph.u[k]));
                }
            }
            out.write("plot_fig2_field.csv", &field)?;
            out.write("plot_fig2_deviation.csv", &layers_csv(&r))?;
            let p = exp::path_conservation(cfg, seed)?;
            let mut profile = String::from("node,u,v,activator_residual,inhibitor_residual\n");
            for i in 0..p.nodes {
                let (ra, ri) = if i > 0 && i + 1 < p.nodes {
                    (
                        p.residuals.activator[i - 1].to_string(),
                        p.residuals.inhibitor[i - 1].to_string(),
                    )
                } else {
                    (String::new(), String::new())
                };
                profile.push_str(&format!(
                    "{i},{},{},{ra},{ri}\n",
                    p.state.u[i], p.state.v[i]
                ));
            }
            out.write("plot_path_profile.csv", &profile)?;
            Ok(json!({
                "fig2": fig2_metrics(&r),
                "path": serde_json::to_value(&p)?,
            }))
        }
    }
}

fn state_csv(u: &[f64], v: &[f64]) -> String {
    let rows: Vec<Vec<String>> = u
        .iter()
        .zip(v)
        .enumerate()
        .map(|(i, (a, b))| vec![i.to_string(), a.to_string(), b.to_string()])
        .collect();
    csv_string("node,u,v", &rows)
}

fn layers_csv(r: &exp::Fig2Report) -> String {
    let rows: Vec<Vec<String>> = r
        .comparison
        .layers
        .iter()
        .map(|d| {
            vec![
                d.layer.to_string(),
                d.u_deviation.to_string(),
                d.v_deviation.to_string(),
            ]
        })
        .collect();
    csv_string("layer,u_deviation,v_deviation", &rows)
}

fn fig2_metrics(r: &exp::Fig2Report) -> Value {
    json!({
        "relax_steps": r.comparison.relax_steps,
        "threshold": r.comparison.threshold,
        "tracked_layers": r.tracked_layers,
        "first_exceeding": r.comparison.first_exceeding,
        "diverged_at": r.comparison.diverged_at,
        "deviation_at_depth": r.deviation_at_depth,
    })
}

/// Entry point behind `main`: parses arguments, runs, and returns the exit
/// status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_CONFIG;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return EXIT_CONFIG;
        }
    }
    match run(cli.command, &cli.common) {
        Ok(s) => {
            if s.dry_run {
                println!(
                    "dry run: {} with config {} (seed {}) would write {}",
                    s.command,
                    s.config_hash,
                    s.seed,
                    s.artifacts.join(", ")
                );
            } else {
                println!("wrote {}", cli.common.out.join("summary.json").display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("fhn-eqprop").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_parse_before_and_after_subcommand() {
        let a = parse(&["--seed", "7", "fig2", "--out", "x"]);
        assert_eq!(a.command, Command::Fig2);
        assert_eq!(a.common.seed, Some(7));
        assert_eq!(a.common.out, PathBuf::from("x"));
        let b = parse(&["train", "--dry-run", "--threads", "2"]);
        assert!(b.common.dry_run);
        assert_eq!(b.common.threads, Some(2));
    }

    #[test]
    fn exactly_one_subcommand() {
        assert!(Cli::try_parse_from(["fhn-eqprop"]).is_err());
        assert!(Cli::try_parse_from(["fhn-eqprop", "fig2", "train"]).is_err());
    }

    #[test]
    fn subcommand_names_round_trip() {
        for name in [
            "simulate",
            "relax",
            "selfadjoint-check",
            "gradcheck",
            "train",
            "eval",
            "ham-infer",
            "ebm-infer",
            "fig2",
            "export-plot-data",
        ] {
            assert_eq!(parse(&[name]).command.name(), name);
        }
    }

    #[test]
    fn exit_codes_follow_error_class() {
        let cfg = Error::Config {
            path: "x".into(),
            message: "y".into(),
        };
        assert_eq!(exit_code(&cfg), EXIT_CONFIG);
        let io = Error::io(Path::new("a"), std::io::Error::other("b"));
        assert_eq!(exit_code(&io), EXIT_IO);
        let num = Error::Divergence {
            context: "c".into(),
            step: 1,
        };
        assert_eq!(exit_code(&num), EXIT_NUMERICAL);
    }

    #[test]
    fn hash_changes_with_seed() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn dry_run_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let common = CommonArgs {
            config: None,
            seed: Some(3),
            out: out.clone(),
            dry_run: true,
            threads: None,
        };
        let s = run(Command::Train, &common).unwrap();
        assert!(s.dry_run);
        assert_eq!(s.seed, 3);
        assert!(!out.exists());
    }

    #[test]
    fn relax_writes_summary_and_state() {
        let dir = tempfile::tempdir().unwrap();
        let common = CommonArgs {
            config: None,
            seed: None,
            out: dir.path().to_path_buf(),
            dry_run: false,
            threads: None,
        };
        let s = run(Command::Relax, &common).unwrap();
        assert_eq!(s.artifacts, vec!["config.json", "state.csv"]);
        let state = std::fs::read_to_string(dir.path().join("state.csv")).unwrap();
        assert_eq!(state.lines().count(), 17);
        let summary: Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        for key in [
            "config_hash",
            "seed",
            "formulation",
            "wall_clock_seconds",
            "metrics",
        ] {
            assert!(summary.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn missing_config_file_is_io_error() {
        let common = CommonArgs {
            config: Some(PathBuf::from("/nonexistent/config.json")),
            seed: None,
            out: PathBuf::from("unused"),
            dry_run: true,
            threads: None,
        };
        let e = run(Command::Fig2, &common).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_IO);
    }
}
