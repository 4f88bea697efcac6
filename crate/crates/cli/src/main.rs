//! `gqe`: train circuit generators, compute reference energies, inspect
//! operator pools and aggregate multi-seed runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gqe_core::aggregate::{aggregate_curves, block_minima_to_csv, curve_to_csv, read_run_csv};
use gqe_core::model::checkpoint;
use gqe_core::pool::default_angle_set;
use gqe_core::statevec::{expectation, hartree_fock_state};
use gqe_core::trainer::Trainer;
use gqe_core::{
    exact_ground_energy, GateKind, GqeError, Hamiltonian, HybridConfig, LossVariant, OperatorPool, Result, TrainConfig,
};

#[derive(Parser)]
#[command(name = "gqe", version, about = "Preference-trained generative quantum eigensolver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sequence model and write its run log.
    Train(Box<TrainArgs>),
    /// Print the exact ground energy and the Hartree-Fock energy.
    Exact {
        #[arg(long)]
        hamiltonian: PathBuf,
    },
    /// Print the operator pool size and composition.
    Pool {
        #[arg(long)]
        hamiltonian: PathBuf,
        /// Print every token with its gate.
        #[arg(long)]
        list: bool,
    },
    /// Combine run logs into a `step,mean,min,max` curve.
    Aggregate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Curve output (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also emit per-run minima over blocks of this many steps.
        #[arg(long)]
        block: Option<usize>,
        /// Block minima output (stdout when absent).
        #[arg(long)]
        block_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hamiltonian: Option<PathBuf>,
    /// Start from the full-size profile instead of the desk defaults.
    #[arg(long)]
    paper_scale: bool,
    /// `dpo` or `pdpo`.
    #[arg(long)]
    loss: Option<LossVariant>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Circuits per step.
    #[arg(long)]
    samples: Option<usize>,
    /// Tokens per circuit.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    t_initial: Option<f64>,
    #[arg(long)]
    t_final: Option<f64>,
    /// Replay setting, e.g. `C=25,R=2,S=50`.
    #[arg(long)]
    hybrid: Option<String>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Run log CSV; the summary goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the final parameters here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dump the final replay buffer as JSON lines.
    #[arg(long)]
    dump_buffer: Option<PathBuf>,
    /// Generate identity-only circuits.
    #[arg(long)]
    force_identity: bool,
    /// Recompute cached energies and reference log-probs of replayed samples.
    #[arg(long)]
    recheck_cache: bool,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

fn load_pool(path: &Path) -> Result<(Hamiltonian, OperatorPool)> {
    let h = Hamiltonian::load(path)?;
    let pool = OperatorPool::for_hamiltonian(&h, &default_angle_set())?;
    Ok((h, pool))
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let file = a.config.as_deref().map(TrainConfig::load_toml).transpose()?;
    let ham_path = a
        .hamiltonian
        .clone()
        .or_else(|| file.as_ref().map(|c| c.hamiltonian_path.clone()))
        .ok_or_else(|| GqeError::Input("no Hamiltonian given (use --hamiltonian or a config file)".into()))?;
    let mut cfg = match file {
        Some(c) => c,
        None => {
            let (_, pool) = load_pool(&ham_path)?;
            if a.paper_scale {
                TrainConfig::paper_scale(&ham_path, pool.len())
            } else {
                TrainConfig::desk(&ham_path, pool.len())
            }
        }
    };
    cfg.hamiltonian_path = ham_path;
    if let Some(v) = a.loss {
        cfg.loss.variant = v;
    }
    if let Some(v) = a.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.steps {
        cfg.schedule.n_steps = v;
    }
    if let Some(v) = a.samples {
        cfg.samples_per_step = v;
    }
    if let Some(v) = a.seq_len {
        cfg.model.max_len = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.t_initial {
        cfg.schedule.t_initial = v;
    }
    if let Some(v) = a.t_final {
        cfg.schedule.t_final = v;
    }
    if let Some(spec) = &a.hybrid {
        cfg.hybrid = HybridConfig::parse(spec)?;
    }
    if a.grad_clip.is_some() {
        cfg.grad_clip = a.grad_clip;
    }
    if let Some(out) = &a.out {
        cfg.output_path = out.clone();
    }
    cfg.debug.force_identity |= a.force_identity;
    cfg.debug.recheck_cache |= a.recheck_cache;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    if a.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let (h, pool) = load_pool(&cfg.hamiltonian_path)?;
    let mut trainer = Trainer::new(cfg.clone(), &pool, &h)?;
    let log = trainer.run()?;
    let summary_path = log.write(&cfg.output_path)?;
    if let Some(path) = &a.checkpoint {
        checkpoint::save(trainer.params(), path)?;
    }
    if let Some(path) = &a.dump_buffer {
        trainer.buffer().dump_jsonl(path)?;
    }
    println!("best_energy {}", log.summary.best_energy);
    println!("best_sequence {:?}", log.summary.best_sequence);
    println!("steps {} in {:.2} s", log.records.len(), log.wall_time_seconds);
    println!("log {}", cfg.output_path.display());
    println!("summary {}", summary_path.display());
    Ok(())
}

fn cmd_exact(path: &Path) -> Result<()> {
    let h = Hamiltonian::load(path)?;
    let exact = exact_ground_energy(&h)?;
    let hf = expectation(&hartree_fock_state(h.n_qubits, &h.hf_occupation)?, &h)?;
    println!("exact_ground_energy {exact:.12}");
    println!("hf_energy {hf:.12}");
    if let Some(hint) = h.ground_energy_hint {
        println!("file_hint {hint:.12} (diff {:.3e})", exact - hint);
    }
    Ok(())
}

fn cmd_pool(path: &Path, list: bool) -> Result<()> {
    let (_, pool) = load_pool(path)?;
    if list {
        for (token, g) in pool.gates().iter().enumerate() {
            match g.kind {
                GateKind::Identity => println!("{token} identity"),
                GateKind::SingleExcitation => println!("{token} single {:?} {}", g.wires, g.angle),
                GateKind::DoubleExcitation => println!("{token} double {:?} {}", g.wires, g.angle),
            }
        }
        return Ok(());
    }
    println!("pool_size {}", pool.len());
    println!("singles {}", pool.n_singles());
    println!("doubles {}", pool.n_doubles());
    println!("angles {:?}", pool.angle_set());
    Ok(())
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| GqeError::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_aggregate(runs: &[PathBuf], out: Option<&Path>, block: Option<usize>, block_out: Option<&Path>) -> Result<()> {
    let logs = runs.iter().map(read_run_csv).collect::<Result<Vec<_>>>()?;
    write_or_print(out, &curve_to_csv(&aggregate_curves(&logs)?))?;
    if let Some(k) = block {
        let names: Vec<String> = runs.iter().map(|p| p.display().to_string()).collect();
        write_or_print(block_out, &block_minima_to_csv(&names, &logs, k)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Exact { hamiltonian } => cmd_exact(hamiltonian),
        Command::Pool { hamiltonian, list } => cmd_pool(hamiltonian, *list),
        Command::Aggregate {
            runs,
            out,
            block,
            block_out,
        } => cmd_aggregate(runs, out.as_deref(), *block, block_out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                GqeError::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
