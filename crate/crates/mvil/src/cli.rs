//! Command-line interface. Exit codes: 0 success, 1 contract/config
//! failure, 2 usage error. Every subcommand that writes files writes only
//! under the resolved output directory (--out, then the config's `out`,
//! then $MVIL_OUT, then ./out).

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::accounting;
use crate::error::Result;
use crate::gradcheck;
use crate::harness::checkpoint::load_checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::data::generate_dataset;
use crate::harness::sweep::{run_scaling_sweep, SweepPlan};
use crate::harness::train::{evaluate, train, EvalTask};
use crate::layers::LayerKind;

pub const OUT_ENV: &str = "MVIL_OUT";

#[derive(Parser)]
#[command(
    name = "mvil",
    about = "Desk-scale vision-and-language models with MLP, tiny-attention, and transformer fusion",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Key=value config file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable), applied after --config
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Override the training seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: config `out`, then $MVIL_OUT, then ./out)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics.csv and checkpoints
    Train,
    /// Evaluate a checkpoint on a split
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// mlm, itm, or vqa
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Parameter accounting: family table plus per-module breakdown
    Count,
    /// FLOP accounting for the configured model
    Flops,
    /// Scaling sweep over layer depth or data fraction
    Sweep {
        /// layers or data
        #[arg(long)]
        kind: String,
        /// comma-separated grid points, e.g. 1,2,3 or 0.33,0.66,1.0
        #[arg(long)]
        grid: String,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// Layer kind to check (default: the full named suite)
        #[arg(long)]
        kind: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Export P*Q mixing matrices from a checkpoint as CSV
    ExportMixing {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Comma-separated fusion layer indices (default: all with a
        /// position-wise FFN)
        #[arg(long)]
        layers: Option<String>,
    },
    /// Generate the synthetic dataset splits as CSV
    GenData,
}

pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::toy(),
    };
    for pair in &cli.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            crate::Error::Config(format!("--set expects KEY=VALUE, got {pair:?}"))
        })?;
        cfg.apply_set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn resolve_out(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(out) = &cfg.out_dir {
        return PathBuf::from(out);
    }
    if let Ok(out) = std::env::var(OUT_ENV) {
        if !out.is_empty() {
            return PathBuf::from(out);
        }
    }
    PathBuf::from("out")
}

fn family_table(cfg: &RunConfig) -> Result<String> {
    let mut rows = Vec::new();
    for kind in [LayerKind::Transformer, LayerKind::Mlp, LayerKind::MlpTinyAtt] {
        let model = cfg.model_config_for(kind, cfg.fusion_layers);
        let report = accounting::estimate_flops(&model, model.seq_len())?;
        rows.push((kind.to_string(), cfg.fusion_layers, report));
    }
    Ok(accounting::emit_cost_table(&rows))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train => {
            let cfg = resolve_config(cli)?;
            let out_dir = resolve_out(cli, &cfg);
            let out = train(&cfg, &out_dir)?;
            if let Some(m) = out.last {
                println!(
                    "trained {} steps: loss_total={:.6} itm_acc={:.3}",
                    cfg.steps, m.loss_total, m.itm_acc
                );
            } else {
                println!("trained 0 steps (checkpoint is the initialization)");
            }
            println!("metrics: {}", out.metrics_path.display());
            println!("checkpoint: {}", out.checkpoint_path.display());
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            task,
            split,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let model = ckpt.restore_model()?;
            let run = ckpt.run_config()?;
            let dataset = generate_dataset(&run.task)?;
            let task = EvalTask::parse(task)?;
            let acc = evaluate(&model, &dataset, split, task)?;
            println!("{} {} accuracy: {:.4}", task.as_str(), split, acc);
            Ok(())
        }
        Cmd::Count => {
            let cfg = resolve_config(cli)?;
            let out_dir = resolve_out(cli, &cfg);
            let table = family_table(&cfg)?;
            print!("{table}");
            let model = cfg.model_config();
            let report = accounting::count_params(&model)?;
            let breakdown = accounting::format_breakdown(&report);
            println!();
            print!("{breakdown}");
            let path = write_out(&out_dir, "cost_table.tsv", &table)?;
            write_out(&out_dir, "param_breakdown.tsv", &breakdown)?;
            println!("\nwrote {}", path.display());
            Ok(())
        }
        Cmd::Flops => {
            let cfg = resolve_config(cli)?;
            let out_dir = resolve_out(cli, &cfg);
            let model = cfg.model_config();
            let report = accounting::estimate_flops(&model, model.seq_len())?;
            let table = family_table(&cfg)?;
            print!("{table}");
            println!();
            println!(
                "fusion FLOPs: {} ({}G); full forward FLOPs: {} ({}G) at n={}",
                report.fusion_flops(),
                accounting::format_giga(report.fusion_flops()),
                report.total_flops(),
                accounting::format_giga(report.total_flops()),
                model.seq_len(),
            );
            print!("{}", accounting::format_breakdown(&report));
            write_out(&out_dir, "cost_table.tsv", &table)?;
            Ok(())
        }
        Cmd::Sweep { kind, grid } => {
            let cfg = resolve_config(cli)?;
            let out_dir = resolve_out(cli, &cfg);
            let plan = SweepPlan::parse(kind, grid)?;
            let csv = run_scaling_sweep(&plan, &cfg, &out_dir)?;
            println!("wrote {}", csv.display());
            Ok(())
        }
        Cmd::Gradcheck { kind, seeds } => {
            let mut all_ok = true;
            match kind {
                Some(kind) => {
                    let kind = LayerKind::parse(kind)?;
                    let out = gradcheck::check_layer_kind(kind, *seeds)?;
                    all_ok &= out.passes();
                    println!(
                        "{} layer_{kind}: max rel err {:.3e} over {} entries",
                        if out.passes() { "ok" } else { "FAIL" },
                        out.max_rel_err,
                        out.entries
                    );
                }
                None => {
                    for (name, check) in gradcheck::named_checks() {
                        let mut worst: f64 = 0.0;
                        let mut entries = 0;
                        for seed in 0..*seeds {
                            let out = check(seed)?;
                            worst = worst.max(out.max_rel_err);
                            entries += out.entries;
                        }
                        let ok = worst < gradcheck::FD_TOL;
                        all_ok &= ok;
                        println!(
                            "{} {name}: max rel err {worst:.3e} over {entries} entries",
                            if ok { "ok" } else { "FAIL" }
                        );
                    }
                }
            }
            if all_ok {
                Ok(())
            } else {
                Err(crate::Error::Numeric(
                    "gradient check exceeded the 1e-4 relative tolerance".into(),
                ))
            }
        }
        Cmd::ExportMixing { checkpoint, layers } => {
            let cfg = resolve_config(cli)?;
            let out_dir = resolve_out(cli, &cfg);
            let ckpt = load_checkpoint(checkpoint)?;
            let model = ckpt.restore_model()?;
            let indices: Option<Vec<usize>> = match layers {
                Some(s) => Some(
                    s.split(',')
                        .filter(|p| !p.trim().is_empty())
                        .map(|p| {
                            p.trim().parse().map_err(|_| {
                                crate::Error::Config(format!("bad layer index {p:?}"))
                            })
                        })
                        .collect::<Result<_>>()?,
                ),
                None => None,
            };
            let written =
                accounting::export_mixing_matrices(&model, indices.as_deref(), &out_dir)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Cmd::GenData => {
            let cfg = resolve_config(cli)?;
            let out_dir = resolve_out(cli, &cfg);
            let dataset = generate_dataset(&cfg.task)?;
            std::fs::create_dir_all(&out_dir)?;
            for (name, samples) in [
                ("train", &dataset.train),
                ("val", &dataset.val),
                ("test", &dataset.test),
            ] {
                let mut body = String::from("id,answer,tokens,grid\n");
                for s in samples {
                    let tokens: Vec<String> = s.tokens.iter().map(|t| t.to_string()).collect();
                    let grid: Vec<String> = s.grid.iter().map(|g| g.to_string()).collect();
                    body.push_str(&format!(
                        "{},{},{},{}\n",
                        s.id,
                        s.answer,
                        tokens.join(" "),
                        grid.join(" ")
                    ));
                }
                let path = write_out(&out_dir, &format!("{name}.csv"), &body)?;
                println!("wrote {} ({} samples)", path.display(), samples.len());
            }
            Ok(())
        }
    }
}
