//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero when any criterion fails.
//!
//! MNIST is read from `$MNIST_DIR` or `<workspace>/data/mnist`; without it
//! criterion 4 is reported as SKIP unless `REQUIRE_MNIST=1`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fhn_eqprop::dataio::{encode_idx, load_config, RunConfig};
use fhn_eqprop::experiments as exp;
use fhn_eqprop::fhn::{FhnParams, Formulation};

const MAX_SECONDS_SELFADJOINT: f64 = 120.0;
const MAX_SECONDS_GRADIENT_STRUCTURE: f64 = 10.0;
const MAX_SECONDS_GRADCHECK: f64 = 600.0;
const MAX_SECONDS_MNIST: f64 = 7200.0;
const MAX_SECONDS_PATH: f64 = 10.0;
const MAX_SECONDS_FIG2: f64 = 300.0;
const MAX_SECONDS_EBM: f64 = 120.0;

const ANALYTIC_SYMMETRY_TOL: f64 = 1e-10;
const PROBE_SYMMETRY_TOL: f64 = 1e-3;
const GRADIENT_STRUCTURE_TOL: f64 = 1e-6;
const GRADIENT_STATES: usize = 100;
const MIN_COSINE: f64 = 0.95;
const MAX_TEST_ERROR: f64 = 0.12;
const KIRCHHOFF_FACTOR: f64 = 10.0;
const FIG2_TRACKED_LAYERS: usize = 10;
const FIG2_DEVIATION: f64 = 1e-3;
const EBM_RECONSTRUCTION_TOL: f64 = 1e-6;
const EBM_BALANCE_FACTOR: f64 = 10.0;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

type Check = fn() -> Result<Verdict, String>;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn reference_regime() -> FhnParams {
    FhnParams {
        delta: 0.75,
        epsilon: 0.85,
        alpha: 1.08,
        beta: 0.0,
        d1: 1.0,
        d2: 1.0,
        tau1: 1.0,
        tau2: 1.0,
        formulation: Formulation::SpatialDelta,
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

fn selfadjointness() -> Result<Verdict, String> {
    let cfg = RunConfig::default();
    if cfg.fhn != reference_regime() {
        return Ok(Verdict::Fail(
            "default regime is not the reference regime".into(),
        ));
    }
    let (r, secs) = timed(|| exp::selfadjoint_check(&cfg, 0));
    let r = r.map_err(|e| e.to_string())?;
    let regimes: std::collections::BTreeSet<usize> = r.networks.iter().map(|n| n.regime).collect();
    let largest = r.networks.iter().map(|n| n.nodes).max().unwrap_or(0);
    let ok = r.networks.len() == 20
        && regimes.len() == 3
        && largest <= 32
        && r.max_analytic_defect <= ANALYTIC_SYMMETRY_TOL
        && r.max_probe_defect <= PROBE_SYMMETRY_TOL
        && secs <= MAX_SECONDS_SELFADJOINT;
    Ok(verdict(
        ok,
        format!(
            "{} nets (n <= {largest}, {} regimes): analytic defect {:.2e} <= {ANALYTIC_SYMMETRY_TOL:e}, \
             probe defect {:.2e} <= {PROBE_SYMMETRY_TOL:e}; {secs:.1} s <= {MAX_SECONDS_SELFADJOINT} s",
            r.networks.len(),
            regimes.len(),
            r.max_analytic_defect,
            r.max_probe_defect
        ),
    ))
}

fn gradient_structure() -> Result<Verdict, String> {
    let cfg = RunConfig::default();
    let mut regimes = vec![reference_regime(), cfg.residual.fhn];
    regimes.extend(cfg.selfadjoint.extra_regimes.iter().copied());
    let (worst, secs) = timed(|| {
        regimes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                exp::gradient_structure_check(p, GRADIENT_STATES, 16, 1.5, i as u64)
                    .max_relative_error
            })
            .fold(0.0, f64::max)
    });
    Ok(verdict(
        worst <= GRADIENT_STRUCTURE_TOL && secs <= MAX_SECONDS_GRADIENT_STRUCTURE,
        format!(
            "{GRADIENT_STATES} states x {} regimes: max relative error {worst:.2e} <= {GRADIENT_STRUCTURE_TOL:e}; \
             {secs:.2} s <= {MAX_SECONDS_GRADIENT_STRUCTURE} s",
            regimes.len()
        ),
    ))
}

fn eqprop_vs_fd() -> Result<Verdict, String> {
    let mut cfg = RunConfig::default();
    cfg.gradcheck.layer_sizes = vec![8, 16, 16, 4];
    cfg.gradcheck.beta = 0.01;
    cfg.gradcheck.min_cosine = MIN_COSINE;
    let (r, secs) = timed(|| exp::gradcheck(&cfg, 0));
    let r = r.map_err(|e| e.to_string())?;
    let worst_rel = r
        .runs
        .iter()
        .flat_map(|x| x.layers.iter().map(|l| l.relative_error))
        .fold(0.0, f64::max);
    Ok(verdict(
        r.min_cosine >= MIN_COSINE && secs <= MAX_SECONDS_GRADCHECK,
        format!(
            "8-16-16-4, beta 0.01, {} nets: min layer cosine {:.6} >= {MIN_COSINE} (max relative error {worst_rel:.1e}); \
             {secs:.1} s <= {MAX_SECONDS_GRADCHECK} s",
            r.runs.len(),
            r.min_cosine
        ),
    ))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"))
}

fn pinned_training_settings(cfg: &RunConfig) -> Vec<String> {
    let t = &cfg.train;
    let mut bad = Vec::new();
    if cfg.fhn != reference_regime() {
        bad.push("FHN parameters differ from the reference regime".to_string());
    }
    if t.beta_nudge != 0.9 {
        bad.push(format!("beta_nudge {}", t.beta_nudge));
    }
    if (t.free_iters, t.nudge_iters) != (55, 14) {
        bad.push(format!("iterations {}/{}", t.free_iters, t.nudge_iters));
    }
    if t.dt != 0.1 {
        bad.push(format!("dt {}", t.dt));
    }
    if t.init_scale != 0.014 {
        bad.push(format!("init scale {}", t.init_scale));
    }
    bad
}

fn mnist_desk_scale() -> Result<Verdict, String> {
    let root = workspace_root();
    let full = load_config(&root.join("configs/table1_full.json")).map_err(|e| e.to_string())?;
    let mut bad = pinned_training_settings(&full);
    if full.train.layer_sizes != [784, 512, 512, 512, 512, 512, 10] {
        bad.push(format!("full architecture {:?}", full.train.layer_sizes));
    }
    if full.train.layer_lrs != [1e-2, 1e-3, 2e-4, 1e-4, 5e-5] {
        bad.push(format!("full learning rates {:?}", full.train.layer_lrs));
    }
    let readme = fs::read_to_string(root.join("README.md")).unwrap_or_default();
    if !readme.contains("configs/table1_full.json") {
        bad.push("README does not document the full-config run".into());
    }
    if !bad.is_empty() {
        return Ok(Verdict::Fail(format!(
            "(b) full-config run path: {}",
            bad.join("; ")
        )));
    }

    let mut cfg = load_config(&root.join("configs/mnist_desk.json")).map_err(|e| e.to_string())?;
    let mut bad = pinned_training_settings(&cfg);
    if cfg.train.layer_sizes != [784, 128, 10] {
        bad.push(format!("architecture {:?}", cfg.train.layer_sizes));
    }
    if cfg.train.epochs > 5 {
        bad.push(format!("{} epochs", cfg.train.epochs));
    }
    if cfg.data.train_limit != Some(10_000) || cfg.data.test_limit.is_some() {
        bad.push("needs the 10k training subset and the full test split".into());
    }
    if !bad.is_empty() {
        return Ok(Verdict::Fail(format!(
            "(a) desk config: {}",
            bad.join("; ")
        )));
    }
    let dir = mnist_dir();
    if !dir.join("train-images-idx3-ubyte").exists() {
        let msg = format!("MNIST not found in {}", dir.display());
        return if std::env::var("REQUIRE_MNIST").as_deref() == Ok("1") {
            Ok(Verdict::Fail(msg))
        } else {
            Ok(Verdict::Skip(msg))
        };
    }
    cfg.data.mnist_dir = dir;
    let (r, secs) = timed(|| -> Result<exp::TrainReport, String> {
        let (train, test) = exp::load_mnist(&cfg).map_err(|e| e.to_string())?;
        let (_, report, _) = exp::train(&cfg, cfg.seed, &train, &test, |e| {
            eprintln!(
                "      epoch {}: train error {:.4}, test error {:.4}",
                e.epoch, e.train.error, e.test.error
            );
        })
        .map_err(|e| e.to_string())?;
        Ok(report)
    });
    let r = r?;
    let curve: Vec<String> = r
        .epochs
        .iter()
        .map(|e| format!("{:.4}", e.test.error))
        .collect();
    Ok(verdict(
        r.final_test_error <= MAX_TEST_ERROR && r.train_samples == 10_000 && secs <= MAX_SECONDS_MNIST,
        format!(
            "784-128-10 on {} samples, {} epochs: final test error {:.4} <= {MAX_TEST_ERROR} (per epoch [{}], {} test \
             samples); full config documented; {secs:.0} s <= {MAX_SECONDS_MNIST} s",
            r.train_samples,
            r.epochs.len(),
            r.final_test_error,
            curve.join(", "),
            r.test_samples
        ),
    ))
}

fn spatial_conservation() -> Result<Verdict, String> {
    let cfg = RunConfig::default();
    let (r, secs) = timed(|| exp::path_conservation(&cfg, 0));
    let r = r.map_err(|e| e.to_string())?;
    let worst = r.max_activator_residual.max(r.max_inhibitor_residual);
    let bound = KIRCHHOFF_FACTOR * r.relax_tol;
    Ok(verdict(
        r.nodes == 64 && worst <= bound && r.pattern_amplitude > 0.1 && secs <= MAX_SECONDS_PATH,
        format!(
            "64-node ghost path, Turing pattern amplitude {:.3}: max Kirchhoff residual {worst:.2e} <= {bound:.0e}; \
             {secs:.2} s <= {MAX_SECONDS_PATH} s",
            r.pattern_amplitude
        ),
    ))
}

fn fig2_reproduction() -> Result<Verdict, String> {
    let cfg = RunConfig::default();
    if (cfg.residual.depth, cfg.residual.width) != (30, 64) {
        return Ok(Verdict::Fail("default residual net is not 30x64".into()));
    }
    let ((_, r), secs) = {
        let (res, secs) = timed(|| exp::fig2(&cfg, 0));
        (res.map_err(|e| e.to_string())?, secs)
    };
    let layers = &r.comparison.layers;
    let early = layers
        .iter()
        .take(FIG2_TRACKED_LAYERS + 1)
        .map(|d| d.u_deviation)
        .fold(0.0, f64::max);
    let tracked = layers.len() > FIG2_TRACKED_LAYERS && early <= FIG2_DEVIATION;
    // Growth: the deviation toward depth 30 exceeds the early-layer level
    // by an order of magnitude, or the recursion diverges past layer 10.
    let late = layers
        .iter()
        .skip(20)
        .map(|d| d.u_deviation)
        .fold(0.0, f64::max);
    let grows = r
        .comparison
        .diverged_at
        .is_some_and(|d| d > FIG2_TRACKED_LAYERS)
        || late >= 10.0 * early;
    Ok(verdict(
        tracked && grows && secs <= MAX_SECONDS_FIG2,
        format!(
            "30x64 Turing net: max u-deviation over layers 0..={FIG2_TRACKED_LAYERS} {early:.2e} <= {FIG2_DEVIATION:e}, \
             layers 20..30 {late:.2e} (growing: {grows}), tracked {} layers; {secs:.1} s <= {MAX_SECONDS_FIG2} s",
            r.tracked_layers
        ),
    ))
}

fn ebm_equivalence() -> Result<Verdict, String> {
    let cfg = RunConfig::default();
    let ec = &cfg.ebm;
    if ec.nets < 10 || ec.depth > 5 || ec.width > 8 || ec.weight_scale > 0.1 {
        return Ok(Verdict::Fail(
            "default EBM settings exceed the criterion bounds".into(),
        ));
    }
    let (r, secs) = timed(|| exp::ebm_check(&cfg, 0));
    let r = r.map_err(|e| e.to_string())?;
    let balance_bound = EBM_BALANCE_FACTOR * ec.tol;
    Ok(verdict(
        r.max_deviation <= EBM_RECONSTRUCTION_TOL && r.max_balance_residual <= balance_bound && secs <= MAX_SECONDS_EBM,
        format!(
            "{} nets, depth {}, width {}, weight scale {}: max reconstruction deviation {:.2e} <= {EBM_RECONSTRUCTION_TOL:e}, \
             balance {:.2e} <= {balance_bound:.0e}; {secs:.2} s <= {MAX_SECONDS_EBM} s",
            r.runs.len(),
            ec.depth,
            ec.width,
            ec.weight_scale,
            r.max_deviation,
            r.max_balance_residual
        ),
    ))
}

const SUBCOMMANDS: [&str; 10] = [
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
];

fn write_synthetic_mnist(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    for (prefix, n) in [("train", 60usize), ("t10k", 30)] {
        let images: Vec<Vec<u8>> = (0..n)
            .map(|i| {
                (0..784)
                    .map(|p| ((p * 7 + i * 13 + (p / 28) * (i % 10)) % 256) as u8)
                    .collect()
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (img, lab) = encode_idx(&images, 28, 28, &labels);
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img)
            .map_err(|e| e.to_string())?;
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab)
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn collect_files(
    root: &Path,
    dir: &Path,
    out: &mut BTreeMap<String, Vec<u8>>,
) -> Result<(), String> {
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            let mut bytes = fs::read(&path).map_err(|e| e.to_string())?;
            if rel.ends_with("summary.json") {
                let mut v: serde_json::Value =
                    serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
                v.as_object_mut().map(|o| o.remove("wall_clock_seconds"));
                bytes = serde_json::to_vec(&v).map_err(|e| e.to_string())?;
            }
            out.insert(rel, bytes);
        }
    }
    Ok(())
}

fn run_all(bin: &Path, cwd: &Path, threads: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    for cmd in SUBCOMMANDS {
        let out_dir = if cmd == "eval" {
            "train".to_string()
        } else {
            cmd.to_string()
        };
        let status = Command::new(bin)
            .current_dir(cwd)
            .args([
                cmd,
                "--config",
                "../config.json",
                "--out",
                &out_dir,
                "--threads",
                threads,
            ])
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!(
                "{cmd} exited with {:?}: {}",
                status.status.code(),
                String::from_utf8_lossy(&status.stderr)
            ));
        }
    }
    let mut files = BTreeMap::new();
    collect_files(cwd, cwd, &mut files)?;
    Ok(files)
}

fn determinism() -> Result<Verdict, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mnist = tmp.path().join("mnist");
    write_synthetic_mnist(&mnist)?;
    // eval reads the checkpoint that train wrote into the same out dir
    let config = serde_json::json!({
        "seed": 11,
        "network": { "nodes": 12 },
        "simulate": { "steps": 200, "record_every": 20 },
        "selfadjoint": { "networks": 4, "max_nodes": 12 },
        "gradcheck": { "layer_sizes": [4, 6, 3], "nets": 2 },
        "train": { "layer_sizes": [784, 16, 10], "layer_lrs": [0.1, 0.05], "epochs": 2, "batch_size": 8 },
        "data": { "mnist_dir": mnist },
        "residual": { "depth": 8, "width": 8, "path_nodes": 24 },
        "ebm": { "nets": 3 }
    });
    fs::write(tmp.path().join("config.json"), config.to_string()).map_err(|e| e.to_string())?;
    let bin = PathBuf::from(env!("CARGO_BIN_EXE_fhn-eqprop"));
    let (a_dir, b_dir) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a_dir).map_err(|e| e.to_string())?;
    fs::create_dir_all(&b_dir).map_err(|e| e.to_string())?;
    let a = run_all(&bin, &a_dir, "1")?;
    let b = run_all(&bin, &b_dir, "2")?;
    let differing: Vec<&String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    Ok(verdict(
        differing.is_empty() && a.len() >= 2 * SUBCOMMANDS.len(),
        if differing.is_empty() {
            format!(
                "{} subcommands run twice (1 vs 2 threads): {} result files byte-identical (summary wall clock excluded)",
                SUBCOMMANDS.len(),
                a.len()
            )
        } else {
            format!("differing files: {differing:?}")
        },
    ))
}

fn main() {
    let criteria: [(u32, &str, Check); 8] = [
        (1, "self-adjointness", selfadjointness),
        (2, "gradient structure", gradient_structure),
        (3, "EqProp vs finite differences", eqprop_vs_fd),
        (4, "MNIST desk scale", mnist_desk_scale),
        (5, "spatial conservation", spatial_conservation),
        (6, "deep residual recursion", fig2_reproduction),
        (7, "EBM recursion equivalence", ebm_equivalence),
        (8, "determinism", determinism),
    ];
    let only: Vec<u32> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let v = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict::Fail(format!("error: {e}")),
            Err(_) => Verdict::Fail("panicked".into()),
        };
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{id}] {name}: {detail}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
