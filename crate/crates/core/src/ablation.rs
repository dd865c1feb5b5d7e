//! The twelve-row component ablation grid.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::model::{Ablation, Model, ModelConfig};
use crate::nn::Module;
use crate::quadscan::ScanDirection::{self, BT, LR, RL, TB};
use crate::train::{train, Split, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
}

fn directions(name: &str, dirs: &[ScanDirection]) -> AblationRow {
    AblationRow {
        name: name.into(),
        ablation: Ablation {
            directions: dirs.to_vec(),
            ..Ablation::default()
        },
    }
}

/// Rows in reporting order: single directions, direction pairs, then the
/// component removals and the full model.
pub fn grid() -> Vec<AblationRow> {
    vec![
        directions("LR", &[LR]),
        directions("RL", &[RL]),
        directions("TB", &[TB]),
        directions("BT", &[BT]),
        directions("LR+RL", &[LR, RL]),
        directions("TB+BT", &[TB, BT]),
        directions("LR+TB", &[LR, TB]),
        directions("RL+BT", &[RL, BT]),
        AblationRow {
            name: "w/o Dual RWKV".into(),
            ablation: Ablation {
                dual_rwkv: false,
                ..Ablation::default()
            },
        },
        AblationRow {
            name: "w/o DARM".into(),
            ablation: Ablation {
                darm: false,
                ..Ablation::default()
            },
        },
        AblationRow {
            name: "w/o SASE".into(),
            ablation: Ablation {
                sase: false,
                ..Ablation::default()
            },
        },
        directions("U-RWKV (full)", &ScanDirection::ALL),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub params: usize,
    pub split_hash: String,
    /// Final-epoch validation scores; `None` when the row failed.
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    /// `ok`, or the error that stopped the row.
    pub status: String,
}

fn run_row(
    row: &AblationRow,
    base: &ModelConfig,
    cfg: &TrainConfig,
    data: &[SegSample],
) -> Result<AblationResult> {
    let config = ModelConfig {
        ablation: row.ablation.clone(),
        ..base.clone()
    };
    let mut model = Model::<f32>::build(&config)?;
    let params = model.param_count();
    let split_hash = Split::new(data.len(), cfg.split, cfg.seed).hash();
    let (dice, iou, status) = match train(&mut model, data, cfg) {
        Ok(out) => {
            let last = out.history.last();
            (last.map(|r| r.dice), last.map(|r| r.iou), "ok".to_string())
        }
        Err(e @ Error::NumericalAbort { .. }) => (None, None, e.to_string()),
        Err(e) => return Err(e),
    };
    Ok(AblationResult {
        row: row.clone(),
        params,
        split_hash,
        dice,
        iou,
        status,
    })
}

/// Trains every grid row from `base` on the same data and split.
///
/// Numerical aborts are recorded in the row and the grid continues; other
/// errors (invalid configs, bad data) stop the grid.
pub fn run_grid(
    base: &ModelConfig,
    cfg: &TrainConfig,
    data: &[SegSample],
    parallel: bool,
    mut on_row: impl FnMut(&AblationResult) + Send,
) -> Result<Vec<AblationResult>> {
    let rows = grid();
    if parallel {
        let out: Vec<AblationResult> = rows
            .par_iter()
            .map(|r| run_row(r, base, cfg, data))
            .collect::<Result<_>>()?;
        out.iter().for_each(&mut on_row);
        Ok(out)
    } else {
        rows.iter()
            .map(|r| {
                let res = run_row(r, base, cfg, data)?;
                on_row(&res);
                Ok(res)
            })
            .collect()
    }
}

pub const CSV_HEADER: &str = "row,directions,dual_rwkv,darm,sase,params,split_hash,dice,iou,status";

pub fn to_csv(results: &[AblationResult]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        let a = &r.row.ablation;
        let dirs: Vec<String> = a.directions.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},\"{}\"\n",
            r.row.name,
            dirs.join("+"),
            a.dual_rwkv,
            a.darm,
            a.sase,
            r.params,
            r.split_hash,
            opt(r.dice),
            opt(r.iou),
            r.status.replace('"', "'")
        ));
    }
    out
}
