use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ccl_core::checkpoint::{read_checkpoint, write_checkpoint};
use ccl_core::experiment::{default_k_grid, summary_csv, sweep, Variant};
use ccl_core::gradcheck::{run_all, GradcheckConfig};
use ccl_core::labeling::{complementary_labels, LabelDump, LabelState, Tier};
use ccl_core::pairs::{
    brute_force_pairs, build_pairs, check_invariants, mask_mismatches, pair_stats, write_mask_rle,
};
use ccl_core::trainer::evaluate;
use ccl_core::{AblationMode, CclError, RunConfig, Trainer};

#[derive(Parser)]
#[command(name = "ccl", version, about = "Contrastive complementary labeling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override such as `trainer.total_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed; takes precedence over the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, confusion matrix and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write the label state of one batch under the final weights.
        #[arg(long)]
        dump_labels: bool,
    },
    /// Evaluate a checkpoint on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Build and verify pair sets from a label-state JSON-lines file.
    Pairs {
        input: PathBuf,
        /// Recompute complementary sets of low-confidence views with this k.
        #[arg(long)]
        k: Option<usize>,
        /// Recompute labels and tiers with this threshold.
        #[arg(long)]
        tau: Option<f64>,
        /// Report negative counts for every k in 1..C-1.
        #[arg(long)]
        k_sweep: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sweep ablation modes and/or k values over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes; the four pair strategies by default.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<AblationMode>,
        /// Comma-separated k values; `auto` for {1, ceil(C/2), C-1}.
        #[arg(long)]
        k_grid: Option<String>,
        #[arg(long, default_value_t = 3)]
        n_seeds: u64,
    },
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

/// Configuration and input problems exit 2, numeric breakdowns exit 3.
fn classify(e: CclError) -> Failure {
    let code = match e {
        CclError::Numeric(_) => 3,
        CclError::BatchIntegrity(_) => 1,
        _ => 2,
    };
    Failure::new(code, e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(2, format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::new(2, format!("config {} not found", path.display())));
            }
            RunConfig::from_file(path, &common.overrides).map_err(classify)?
        }
        None => RunConfig::default().with_overrides(&common.overrides).map_err(classify)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn save_checkpoint(dir: &Path, name: &str, params: &ccl_core::network::ModelParams) -> Result<(), Failure> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    write_checkpoint(params, BufWriter::new(file)).map_err(classify)
}

fn cmd_train(common: &Common, dump_labels: bool) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = &common.out;
    create_dir(out)?;
    write_file(out, "config.resolved.json", cfg.to_json_pretty().as_bytes())?;
    let mut trainer = Trainer::new(cfg).map_err(classify)?;
    while !trainer.finished() {
        if let Err(e) = trainer.step() {
            let dump = serde_json::to_string_pretty(&trainer.diagnostic(&e)).expect("json value");
            write_file(out, "diagnostic.json", dump.as_bytes())?;
            write_file(out, "train_log.csv", trainer.train_log_csv().as_bytes())?;
            let mut f = classify(e);
            f.message = format!("{}; diagnostics in {}", f.message, out.join("diagnostic.json").display());
            return Err(f);
        }
    }
    write_file(out, "metrics.csv", trainer.metrics_csv().as_bytes())?;
    write_file(out, "train_log.csv", trainer.train_log_csv().as_bytes())?;
    let (best, eval, params) = trainer.best.as_ref().expect("a finished run has evaluated");
    write_file(out, "confusion.csv", eval.to_csv().as_bytes())?;
    save_checkpoint(out, "best.ckpt", params)?;
    save_checkpoint(out, "final.ckpt", &trainer.state.ema)?;
    if dump_labels {
        let dump = trainer.label_snapshot().map_err(classify)?;
        let path = out.join("labels.jsonl");
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        dump.write_jsonl(BufWriter::new(file)).map_err(classify)?;
    }
    println!(
        "best accuracy {:.4} at step {} ({} steps, mode {})",
        best.accuracy,
        best.step,
        trainer.state.step,
        trainer.config.trainer.ablation_mode.name()
    );
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: &Path) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let (_, test) = cfg.datasets().map_err(classify)?;
    let file = File::open(ckpt).map_err(|e| io_err(ckpt, e))?;
    let params = read_checkpoint(BufReader::new(file)).map_err(classify)?;
    if params.input_dim() != test.dim() || params.n_classes() != test.n_classes {
        return Err(Failure::new(
            2,
            format!(
                "checkpoint expects {} features and {} classes; test set has {} and {}",
                params.input_dim(),
                params.n_classes(),
                test.dim(),
                test.n_classes
            ),
        ));
    }
    let eval = evaluate(&params, &test.features, &test.labels).map_err(classify)?;
    create_dir(&common.out)?;
    write_file(&common.out, "confusion.csv", eval.to_csv().as_bytes())?;
    println!("accuracy {:.4} on {} samples", eval.accuracy, test.len());
    Ok(())
}

fn cmd_gradcheck(seed: u64, trials: usize, inject_fault: bool) -> Result<(), Failure> {
    let cfg = GradcheckConfig {
        seed,
        trials,
        inject_fault,
        ..Default::default()
    };
    let reports = run_all(&cfg).map_err(classify)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<12} trials {:>4}  max relative error {:.3e}  {}",
            r.name,
            r.trials,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
        for (trial, err) in &r.failures {
            failed.push(format!("{} trial {trial}: {err:.3e}", r.name));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(1, format!("gradient mismatch above {:e}:\n  {}", cfg.tolerance, failed.join("\n  "))))
    }
}

/// Re-derives each view's complementary set from its probabilities and
/// recorded label. `k` is taken from the low-confidence views when not given.
fn oracle_state(state: &LabelState, k: Option<usize>) -> Result<LabelState, Failure> {
    let c = state.n_classes;
    let k = match k {
        Some(k) => k,
        None => {
            let sizes: Vec<usize> = (0..state.len())
                .filter(|&v| state.tier[v] == Tier::Low)
                .map(|v| state.phi[v].len())
                .collect();
            match sizes.first() {
                None => 1,
                Some(&k) if sizes.iter().all(|&s| s == k) && (1..c).contains(&k) => k,
                Some(_) => {
                    return Err(Failure::new(1, "low-confidence views disagree on the size of their complementary sets"))
                }
            }
        }
    };
    for v in 0..state.len() {
        let consistent = match state.tier[v] {
            Tier::High => state.y_hat[v].is_some(),
            Tier::Low => state.y_hat[v].is_none(),
        };
        if !consistent {
            return Err(Failure::new(1, format!("view {v}: tier and label disagree")));
        }
    }
    let (phi, order) = complementary_labels(&state.p_hat, &state.y_hat, &state.tier, k, c).map_err(classify)?;
    Ok(LabelState {
        phi,
        order,
        ..state.clone()
    })
}

fn cmd_pairs(
    input: &Path,
    k: Option<usize>,
    tau: Option<f64>,
    k_sweep: bool,
    out: &Path,
) -> Result<(), Failure> {
    let file = File::open(input).map_err(|e| io_err(input, e))?;
    let mut dump = LabelDump::read_jsonl(BufReader::new(file))
        .map_err(|e| Failure::new(2, format!("{}: {e}", input.display())))?;
    let c = dump.state.n_classes;
    if let Some(k) = k {
        if k == 0 || k >= c {
            return Err(Failure::new(2, format!("--k must lie in 1..={}", c - 1)));
        }
    }
    if let Some(tau) = tau {
        let k = k.unwrap_or_else(|| ccl_core::losses::LossConfig::default().k_for(c));
        dump = dump.relabel(tau, k).map_err(classify)?;
    } else if let Some(k) = k {
        let s = &dump.state;
        let (phi, order) = complementary_labels(&s.p_hat, &s.y_hat, &s.tier, k, c).map_err(classify)?;
        dump.state.phi = phi;
        dump.state.order = order;
    }
    let state = &dump.state;
    let pairs = build_pairs(state, &dump.psi);

    let oracle = brute_force_pairs(&oracle_state(state, k)?, &dump.psi);
    let mismatches = mask_mismatches(&pairs, &oracle);
    let violations = check_invariants(&pairs, state);
    if !mismatches.is_empty() || !violations.is_empty() {
        let mut lines: Vec<String> = mismatches
            .iter()
            .take(20)
            .map(|(mask, i, j)| format!("{mask} mask differs at ({i}, {j})"))
            .collect();
        lines.extend(violations.into_iter().take(20));
        return Err(Failure::new(
            1,
            format!("{} mismatch(es) against the brute-force oracle:\n  {}", mismatches.len(), lines.join("\n  ")),
        ));
    }

    let stats = pair_stats(&pairs, state, dump.truth.as_deref());
    let mut report = json!({ "stats": stats });
    if k_sweep {
        let mut rows = Vec::new();
        let mut previous = 0;
        for k in 1..c {
            let (phi, order) =
                complementary_labels(&state.p_hat, &state.y_hat, &state.tier, k, c).map_err(classify)?;
            let s = LabelState {
                phi,
                order,
                ..state.clone()
            };
            let st = pair_stats(&build_pairs(&s, &dump.psi), &s, dump.truth.as_deref());
            if st.neg_total < previous {
                return Err(Failure::new(1, format!("negative count fell from {previous} to {} at k={k}", st.neg_total)));
            }
            previous = st.neg_total;
            rows.push(json!({
                "k": k,
                "neg_total": st.neg_total,
                "neg_hh": st.neg_hh,
                "neg_hl": st.neg_hl,
                "neg_ll": st.neg_ll,
                "false_negative_fraction": st.false_negative_fraction,
            }));
        }
        report["k_sweep"] = json!(rows);
    }
    let text = serde_json::to_string_pretty(&report).expect("json value");
    println!("{text}");
    create_dir(out)?;
    write_file(out, "pairs.json", text.as_bytes())?;
    for (name, mask) in [("neg_mask.csv", &pairs.neg), ("pos_mask.csv", &pairs.pos)] {
        let path = out.join(name);
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        write_mask_rle(mask, BufWriter::new(file)).map_err(classify)?;
    }
    Ok(())
}

fn parse_k_grid(spec: &str, n_classes: usize) -> Result<Vec<usize>, Failure> {
    if spec == "auto" {
        return Ok(default_k_grid(n_classes));
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Failure::new(2, format!("bad k value {s:?} in --k-grid")))
        })
        .collect()
}

fn cmd_ablate(common: &Common, modes: &[AblationMode], k_grid: Option<&str>, n_seeds: u64) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    if n_seeds == 0 {
        return Err(Failure::new(2, "--n-seeds must be at least 1"));
    }
    let ks: Vec<Option<usize>> = match k_grid {
        Some(spec) => parse_k_grid(spec, cfg.data.n_classes)?.into_iter().map(Some).collect(),
        None => vec![None],
    };
    let modes: Vec<AblationMode> = match (modes.is_empty(), k_grid.is_some()) {
        (false, _) => modes.to_vec(),
        (true, true) => vec![AblationMode::Ccl],
        (true, false) => AblationMode::ALL
            .iter()
            .copied()
            .filter(|m| *m != AblationMode::Supervised)
            .collect(),
    };
    let variants: Vec<Variant> = modes
        .iter()
        .flat_map(|&mode| ks.iter().map(move |&k| Variant { mode, k }))
        .collect();
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + n_seeds).collect();
    create_dir(&common.out)?;
    write_file(&common.out, "config.resolved.json", cfg.to_json_pretty().as_bytes())?;
    let mut runs = String::from("mode,k,seed,acc\n");
    let rows = sweep(&cfg, &variants, &seeds, |v, seed, acc| {
        let k = v.k.unwrap_or_else(|| cfg.loss.k_for(cfg.data.n_classes));
        eprintln!("{:<15} k={k} seed={seed} acc={acc:.4}", v.mode.name());
        runs.push_str(&format!("{},{k},{seed},{acc}\n", v.mode.name()));
    })
    .map_err(classify)?;
    let summary = summary_csv(&rows);
    write_file(&common.out, "runs.csv", runs.as_bytes())?;
    write_file(&common.out, "summary.csv", summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, dump_labels } => cmd_train(common, *dump_labels),
        Command::Eval { common, ckpt } => cmd_eval(common, ckpt),
        Command::Gradcheck {
            seed,
            trials,
            inject_fault,
        } => cmd_gradcheck(*seed, *trials, *inject_fault),
        Command::Pairs {
            input,
            k,
            tau,
            k_sweep,
            out,
        } => cmd_pairs(input, *k, *tau, *k_sweep, out),
        Command::Ablate {
            common,
            modes,
            k_grid,
            n_seeds,
        } => cmd_ablate(common, modes, k_grid.as_deref(), *n_seeds),
    };
    match result {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
