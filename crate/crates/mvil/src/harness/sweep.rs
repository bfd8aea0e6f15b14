//! Scaling sweeps: layer stacking and data downsampling, one run per grid
//! point per fusion kind. Cells are independent, carry derived seeds and
//! their own output subdirectories, and run in parallel when the
//! `parallel` feature is enabled. A failing cell is recorded, not fatal.

use std::io::Write;
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::accounting;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::generate_dataset;
use crate::harness::train::{evaluate, train, EvalTask};
use crate::layers::LayerKind;

/// The three fusion kinds every sweep compares.
pub const SWEEP_KINDS: [LayerKind; 3] =
    [LayerKind::Transformer, LayerKind::Mlp, LayerKind::MlpTinyAtt];

#[derive(Debug, Clone, PartialEq)]
pub enum SweepPlan {
    /// Stack depths to train at.
    Layers(Vec<usize>),
    /// Training-set fractions; sizes become floor(fraction * train).
    Data(Vec<f64>),
}

impl SweepPlan {
    pub fn parse(kind: &str, grid: &str) -> Result<Self> {
        let points: Vec<&str> = grid.split(',').filter(|s| !s.trim().is_empty()).collect();
        match kind.to_ascii_lowercase().as_str() {
            "layers" => {
                let mut out = Vec::new();
                for p in points {
                    out.push(p.trim().parse().map_err(|_| {
                        Error::Config(format!("bad layer count {p:?} in sweep grid"))
                    })?);
                }
                Ok(SweepPlan::Layers(out))
            }
            "data" => {
                let mut out = Vec::new();
                for p in points {
                    let f: f64 = p.trim().parse().map_err(|_| {
                        Error::Config(format!("bad data fraction {p:?} in sweep grid"))
                    })?;
                    if !(0.0..=1.0).contains(&f) {
                        return Err(Error::Config(format!(
                            "data fraction {f} outside [0, 1]"
                        )));
                    }
                    out.push(f);
                }
                Ok(SweepPlan::Data(out))
            }
            other => Err(Error::Config(format!("unknown sweep kind {other}"))),
        }
    }

    fn points(&self) -> Vec<f64> {
        match self {
            SweepPlan::Layers(ls) => ls.iter().map(|&l| l as f64).collect(),
            SweepPlan::Data(fs) => fs.clone(),
        }
    }
}

pub const SWEEP_HEADER: &str =
    "kind,point,params,flops,loss_mlm,loss_itm,loss_vqa,loss_total,itm_acc,vqa_acc,status";

struct Cell {
    kind: LayerKind,
    point: f64,
    run: RunConfig,
    out_dir: PathBuf,
}

fn cell_row(cell: &Cell) -> String {
    let model_cfg = cell.run.model_config();
    let report = match accounting::estimate_flops(&model_cfg, model_cfg.seq_len()) {
        Ok(r) => r,
        Err(e) => {
            return format!(
                "{},{},,,,,,,,,failed: {}",
                cell.kind,
                cell.point,
                sanitize(&e.to_string())
            )
        }
    };
    let params = report.total_params();
    let flops = report.total_flops();
    match run_cell(cell) {
        Ok((m, itm_acc, vqa_acc)) => format!(
            "{},{},{params},{flops},{},{},{},{},{itm_acc},{vqa_acc},ok",
            cell.kind, cell.point, m.0, m.1, m.2, m.3
        ),
        Err(e) => format!(
            "{},{},{params},{flops},,,,,,,failed: {}",
            cell.kind,
            cell.point,
            sanitize(&e.to_string())
        ),
    }
}

fn sanitize(msg: &str) -> String {
    msg.replace([',', '\n'], ";")
}

fn run_cell(cell: &Cell) -> Result<((f64, f64, f64, f64), f64, f64)> {
    let out = train(&cell.run, &cell.out_dir)?;
    let last = out
        .last
        .map(|m| (m.loss_mlm, m.loss_itm, m.loss_vqa, m.loss_total))
        .unwrap_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN));
    let dataset = generate_dataset(&cell.run.task)?;
    let ckpt = crate::harness::checkpoint::load_checkpoint(&out.checkpoint_path)?;
    let model = ckpt.restore_model()?;
    let itm_acc = evaluate(&model, &dataset, "val", EvalTask::Itm)?;
    let vqa_acc = evaluate(&model, &dataset, "val", EvalTask::Vqa)?;
    Ok((last, itm_acc, vqa_acc))
}

/// Trains one model per grid point per fusion kind and writes
/// plotting-ready rows to `sweep.csv` under `out_dir`.
pub fn run_scaling_sweep(plan: &SweepPlan, base: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let mut cells = Vec::new();
    for kind in SWEEP_KINDS {
        for (pi, point) in plan.points().iter().enumerate() {
            let mut run = base.clone();
            run.fusion_kind = kind;
            match plan {
                SweepPlan::Layers(_) => run.fusion_layers = *point as usize,
                SweepPlan::Data(_) => {
                    run.task.train = (point * base.task.train as f64).floor() as usize;
                }
            }
            // derived per-cell seed keeps cells independent and reproducible
            run.seed = base
                .seed
                .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(1 + pi as u64))
                .wrapping_add(kind as u64);
            let label = match plan {
                SweepPlan::Layers(_) => format!("{kind}_L{}", *point as usize),
                SweepPlan::Data(_) => format!("{kind}_f{point}"),
            };
            cells.push(Cell {
                kind,
                point: *point,
                run,
                out_dir: out_dir.join(label),
            });
        }
    }

    #[cfg(feature = "parallel")]
    let rows: Vec<String> = cells.par_iter().map(cell_row).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<String> = cells.iter().map(cell_row).collect();

    let csv_path = out_dir.join("sweep.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(f, "{SWEEP_HEADER}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    f.flush()?;
    Ok(csv_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep_base() -> RunConfig {
        let mut run = RunConfig::toy();
        run.steps = 2;
        run.batch_size = 4;
        run.task.train = 8;
        run.task.val = 8;
        run.task.test = 4;
        run.fusion_layers = 1;
        run
    }

    #[test]
    fn empty_grid_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path =
            run_scaling_sweep(&SweepPlan::Layers(vec![]), &sweep_base(), dir.path()).unwrap();
        let body = std::fs::read_to_string(path).unwrap();
        assert_eq!(body.trim(), SWEEP_HEADER);
    }

    #[test]
    fn layer_sweep_params_match_accountant() {
        let dir = tempfile::tempdir().unwrap();
        let base = sweep_base();
        let path = run_scaling_sweep(&SweepPlan::Layers(vec![1, 2]), &base, dir.path()).unwrap();
        let body = std::fs::read_to_string(path).unwrap();
        let mut rows = 0;
        for line in body.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.last().unwrap(), &"ok", "{line}");
            let kind = LayerKind::parse(cols[0]).unwrap();
            let layers = cols[1].parse::<f64>().unwrap() as usize;
            let params: u64 = cols[2].parse().unwrap();
            let cfg = base.model_config_for(kind, layers);
            assert_eq!(
                params,
                accounting::count_params(&cfg).unwrap().total_params()
            );
            rows += 1;
        }
        assert_eq!(rows, 6);
    }

    #[test]
    fn data_sweep_floors_fractions_and_records_failures() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = sweep_base();
        base.task.train = 10;
        base.batch_size = 4;
        // fraction 0.2 floors to 2 samples < batch size 4: cell must fail
        let path = run_scaling_sweep(&SweepPlan::Data(vec![0.2, 1.0]), &base, dir.path()).unwrap();
        let body = std::fs::read_to_string(path).unwrap();
        let mut ok = 0;
        let mut failed = 0;
        for line in body.lines().skip(1) {
            if line.ends_with(",ok") {
                ok += 1;
                let cols: Vec<&str> = line.split(',').collect();
                assert_eq!(cols[1], "1");
            } else {
                assert!(line.contains("failed:"), "{line}");
                failed += 1;
            }
        }
        assert_eq!(ok, 3);
        assert_eq!(failed, 3);
    }
}
