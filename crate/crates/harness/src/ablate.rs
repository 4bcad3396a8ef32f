//! Ablation grid: train one model per configuration cell on a fixed dataset and tabulate.

use std::fmt::Write as _;

use log::info;
use mvp_core::model::{PosEncoding, QueryMode};
use mvp_core::scenegen::Scene;
use mvp_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::eval::evaluate_model;
use crate::train::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub pos_encoding: PosEncoding,
    pub query_mode: QueryMode,
    pub points: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub pos_encodings: Vec<PosEncoding>,
    pub query_modes: Vec<QueryMode>,
    pub points: Vec<usize>,
    pub layers: Vec<usize>,
}

impl Grid {
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &pos_encoding in &self.pos_encodings {
            for &query_mode in &self.query_modes {
                for &points in &self.points {
                    for &layers in &self.layers {
                        out.push(Cell {
                            pos_encoding,
                            query_mode,
                            points,
                            layers,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Upper bounds on the work an ablation may schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub max_cells: usize,
    /// Total optimizer steps summed over all cells.
    pub max_total_steps: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_cells: 16,
            max_total_steps: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub steps: u64,
    pub final_loss: f64,
    /// `(threshold, AP, recall)` rows.
    pub ap_recall: Vec<(f64, f64, f64)>,
    pub mpjpe: Option<f64>,
    pub layer_mpjpe: Vec<f64>,
}

fn name<T: Serialize>(v: T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Trains every cell for `steps` optimizer steps from the same seed and evaluates it on
/// the training scenes. The base configuration supplies every other setting.
pub fn run_ablation(
    base: &RunConfig,
    grid: &Grid,
    scenes: &[Scene],
    steps: u64,
    budget: Budget,
) -> Result<Vec<CellResult>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("the ablation grid is empty".into()));
    }
    let total = steps.saturating_mul(cells.len() as u64);
    if cells.len() > budget.max_cells || total > budget.max_total_steps {
        return Err(Error::Config(format!(
            "grid of {} cells x {steps} steps exceeds the budget of {} cells / {} steps",
            cells.len(),
            budget.max_cells,
            budget.max_total_steps
        )));
    }
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut cfg = base.clone();
        cfg.model.pos_encoding = cell.pos_encoding;
        cfg.model.query_mode = cell.query_mode;
        cfg.model.points = cell.points;
        cfg.model.layers = cell.layers;
        cfg.max_steps = Some(steps);
        cfg.epochs = usize::MAX;
        cfg.check_dataset(scenes)?;
        let mut trainer = Trainer::new(cfg.clone(), scenes.len())?;
        let mut final_loss = f64::NAN;
        while !trainer.finished() {
            final_loss = trainer.step(scenes)?.loss;
        }
        let report = evaluate_model(&trainer.model, scenes, &cfg.thresholds, cfg.confidence_threshold)?;
        let ap_recall = cfg
            .thresholds
            .iter()
            .map(|&t| {
                (
                    t,
                    report.metric("ap", Some(t)).unwrap_or(0.0),
                    report.metric("recall", Some(t)).unwrap_or(0.0),
                )
            })
            .collect();
        let largest = cfg.thresholds.iter().copied().fold(f64::MIN, f64::max);
        info!("ablation cell {cell:?} done, final loss {final_loss:.5}");
        results.push(CellResult {
            cell,
            steps,
            final_loss,
            ap_recall,
            mpjpe: report.metric("mpjpe", Some(largest)),
            layer_mpjpe: report.layer_mpjpe,
        });
    }
    Ok(results)
}

/// One header line plus one row per cell.
pub fn ablation_csv(results: &[CellResult]) -> String {
    let mut s = String::from("pos_encoding,query_mode,points,layers,steps,final_loss");
    if let Some(first) = results.first() {
        for (t, _, _) in &first.ap_recall {
            write!(s, ",ap@{t}").unwrap();
        }
        for (t, _, _) in &first.ap_recall {
            write!(s, ",recall@{t}").unwrap();
        }
    }
    s.push_str(",mpjpe,first_layer_mpjpe,last_layer_mpjpe\n");
    for r in results {
        let c = &r.cell;
        write!(
            s,
            "{},{},{},{},{},{}",
            name(c.pos_encoding),
            name(c.query_mode),
            c.points,
            c.layers,
            r.steps,
            r.final_loss
        )
        .unwrap();
        for (_, ap, _) in &r.ap_recall {
            write!(s, ",{ap}").unwrap();
        }
        for (_, _, rec) in &r.ap_recall {
            write!(s, ",{rec}").unwrap();
        }
        let mpjpe = r.mpjpe.map_or_else(|| "n/a".to_string(), |v| v.to_string());
        let first = r.layer_mpjpe.first().copied().unwrap_or(f64::NAN);
        let last = r.layer_mpjpe.last().copied().unwrap_or(f64::NAN);
        writeln!(s, ",{mpjpe},{first},{last}").unwrap();
    }
    s
}

fn describe(c: &Cell) -> String {
    format!("({}, {}, K={}, L={})", name(c.pos_encoding), name(c.query_mode), c.points, c.layers)
}

/// Human-readable directional comparisons between cells that differ in one factor only.
/// Lower final-layer MPJPE counts as better; nothing here is asserted.
pub fn directional_summary(results: &[CellResult]) -> Vec<String> {
    let mut out = Vec::new();
    let mut compare = |label: &str, better: &dyn Fn(&Cell) -> bool, pair: &dyn Fn(&Cell, &Cell) -> bool| {
        for a in results.iter().filter(|r| better(&r.cell)) {
            for b in results.iter().filter(|r| !better(&r.cell) && pair(&a.cell, &r.cell)) {
                let (ea, eb) = (
                    a.layer_mpjpe.last().copied().unwrap_or(f64::NAN),
                    b.layer_mpjpe.last().copied().unwrap_or(f64::NAN),
                );
                let verdict = if ea <= eb { "holds" } else { "does not hold" };
                out.push(format!(
                    "{label}: {} {ea:.1} mm vs {} {eb:.1} mm -> {verdict}",
                    describe(&a.cell),
                    describe(&b.cell)
                ));
            }
        }
    };
    compare(
        "rays >= none",
        &|c| c.pos_encoding == PosEncoding::Rays,
        &|a, b| {
            b.pos_encoding == PosEncoding::None
                && a.query_mode == b.query_mode
                && a.points == b.points
                && a.layers == b.layers
        },
    );
    compare(
        "hierarchical_adaptive >= per_joint",
        &|c| c.query_mode == QueryMode::HierarchicalAdaptive,
        &|a, b| {
            b.query_mode == QueryMode::PerJoint
                && a.pos_encoding == b.pos_encoding
                && a.points == b.points
                && a.layers == b.layers
        },
    );
    out
}
