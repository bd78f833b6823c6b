//! Toy-scale ablation runner: trains a grid of block variants over shared
//! seeds and tabulates mean/sd validation accuracy with exact parameter
//! counts. Two canonical grids mirror the interaction-switch study and the
//! fusion-method comparison.

use std::thread;

use crate::model::{count_parameters, FusionMode};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Clone)]
pub struct CellSpec {
    pub label: String,
    pub fusion: FusionMode,
    pub l2g: bool,
    pub g2l: bool,
    pub dyrelu: bool,
}

impl CellSpec {
    fn new(label: &str, fusion: FusionMode, l2g: bool, g2l: bool, dyrelu: bool) -> Self {
        Self {
            label: label.to_string(),
            fusion,
            l2g,
            g2l,
            dyrelu,
        }
    }
}

/// Interaction ablation rows: parallel baseline, each gate direction alone
/// (the global-to-local row with and without its dynamic activation), and
/// both directions combined. Selective fusion throughout.
pub fn interaction_grid() -> Vec<CellSpec> {
    let f = FusionMode::Sfm;
    vec![
        CellSpec::new("parallel", f, false, false, false),
        CellSpec::new("l2g", f, true, false, false),
        CellSpec::new("g2l_static", f, false, true, false),
        CellSpec::new("g2l_dynamic", f, false, true, true),
        CellSpec::new("bfim_static", f, true, true, false),
        CellSpec::new("bfim_full", f, true, true, true),
    ]
}

/// Fusion-method rows: each fusion operator with interactions fully off and
/// fully on.
pub fn fusion_grid() -> Vec<CellSpec> {
    let mut rows = Vec::new();
    for fusion in [FusionMode::Add, FusionMode::Concat, FusionMode::Sfm] {
        for &on in &[false, true] {
            let label = format!(
                "{}_{}",
                fusion.as_str(),
                if on { "interact" } else { "plain" }
            );
            rows.push(CellSpec::new(&label, fusion, on, on, on));
        }
    }
    rows
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub spec: CellSpec,
    pub params_per_block: usize,
    pub params_total: usize,
    pub seeds_run: usize,
    pub mean_val_acc: f64,
    pub sd_val_acc: f64,
    pub mean_final_loss: f64,
    pub status: String,
}

fn apply_spec(base: &TrainConfig, spec: &CellSpec, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.block.fusion = spec.fusion;
    cfg.block.l2g = spec.l2g;
    cfg.block.g2l = spec.g2l;
    cfg.block.dyrelu = spec.dyrelu;
    cfg.seed = seed;
    cfg
}

fn run_cell(base: &TrainConfig, spec: &CellSpec, seeds: &[u64]) -> CellResult {
    let counted = count_parameters(
        &apply_spec(base, spec, 0).block,
        base.task.f,
        base.channels,
    );
    let head = base.block.d * base.task.num_classes + base.task.num_classes;
    let mut accs = Vec::new();
    let mut losses = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        let cfg = apply_spec(base, spec, seed);
        match train(&cfg) {
            Ok(out) => {
                accs.push(out.report.final_val_accuracy);
                losses.push(out.report.final_train_loss);
            }
            Err(TrainError::Diverged { step, .. }) => {
                failures.push(format!("diverged@seed{seed}step{step}"));
            }
            Err(e) => failures.push(format!("error@seed{seed}:{e}")),
        }
    }
    let n = accs.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mean_acc = if n > 0 { mean(&accs) } else { f64::NAN };
    let sd_acc = if n > 1 {
        (accs.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    CellResult {
        spec: spec.clone(),
        params_per_block: counted.per_block,
        params_total: counted.encoder + head,
        seeds_run: n,
        mean_val_acc: mean_acc,
        sd_val_acc: sd_acc,
        mean_final_loss: if n > 0 { mean(&losses) } else { f64::NAN },
        status: if failures.is_empty() {
            "ok".to_string()
        } else {
            failures.join(";")
        },
    }
}

/// Train every cell over the shared seed set. Cells share the task data
/// (the dataset is a pure function of the task seed) and run on separate
/// threads when `parallel` is set; results keep grid order either way.
pub fn ablate(
    base: &TrainConfig,
    cells: &[CellSpec],
    seeds: &[u64],
    parallel: bool,
) -> Vec<CellResult> {
    if !parallel || cells.len() <= 1 {
        return cells.iter().map(|c| run_cell(base, c, seeds)).collect();
    }
    thread::scope(|scope| {
        let handles: Vec<_> = cells
            .iter()
            .map(|c| scope.spawn(move || run_cell(base, c, seeds)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

/// CSV table: one header row, one row per cell, grid order.
pub fn ablation_csv(results: &[CellResult]) -> String {
    let mut out = String::from(
        "row,fusion,l2g,g2l,dyrelu,params_per_block,params_total,seeds,\
         mean_val_acc,sd_val_acc,mean_final_loss,status\n",
    );
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.spec.label,
            r.spec.fusion.as_str(),
            r.spec.l2g as u8,
            r.spec.g2l as u8,
            r.spec.dyrelu as u8,
            r.params_per_block,
            r.params_total,
            r.seeds_run,
            r.mean_val_acc,
            r.sd_val_acc,
            r.mean_final_loss,
            r.status
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticTask, TaskKind};
    use crate::model::BlockConfig;

    fn micro_base() -> TrainConfig {
        TrainConfig {
            block: BlockConfig {
                n_blocks: 1,
                ..BlockConfig::with_dims(8, 2)
            },
            task: SyntheticTask {
                kind: TaskKind::MotifMatch,
                t: 16,
                f: 6,
                num_classes: 2,
                samples: 48,
                seed: 11,
            },
            channels: 4,
            steps: 2,
            batch: 4,
            lr: 1e-3,
            lr_decay: None,
            seed: 0,
            overfit: false,
            eval_every: 0,
            target_val_acc: None,
        }
    }

    #[test]
    fn grids_have_six_rows_each() {
        assert_eq!(interaction_grid().len(), 6);
        assert_eq!(fusion_grid().len(), 6);
    }

    #[test]
    fn singleton_grid_matches_direct_train() {
        let base = micro_base();
        let cells = vec![interaction_grid().remove(5)];
        let results = ablate(&base, &cells, &[7], false);
        assert_eq!(results.len(), 1);
        let direct = train(&apply_spec(&base, &cells[0], 7)).unwrap();
        assert_eq!(results[0].mean_val_acc, direct.report.final_val_accuracy);
        assert_eq!(results[0].sd_val_acc, 0.0);
        assert_eq!(results[0].status, "ok");
    }

    #[test]
    fn interaction_grid_param_counts_follow_the_switches() {
        let base = micro_base();
        let results = ablate(&base, &interaction_grid(), &[1], false);
        let by_label = |l: &str| {
            results
                .iter()
                .find(|r| r.spec.label == l)
                .unwrap()
                .params_per_block
        };
        // the local-to-global gate is parameter-free; the global-to-local
        // gate and the dynamic activation both add weights
        assert_eq!(by_label("parallel"), by_label("l2g"));
        assert!(by_label("g2l_static") > by_label("parallel"));
        assert!(by_label("g2l_dynamic") > by_label("g2l_static"));
        assert_eq!(by_label("bfim_static"), by_label("g2l_static"));
        assert_eq!(by_label("bfim_full"), by_label("g2l_dynamic"));
    }

    #[test]
    fn fusion_grid_add_mode_is_smallest() {
        let base = micro_base();
        let results = ablate(&base, &fusion_grid(), &[1], false);
        let add = results.iter().find(|r| r.spec.label == "add_plain").unwrap();
        for r in &results {
            assert!(add.params_total <= r.params_total, "{} smaller than add", r.spec.label);
        }
    }

    #[test]
    fn csv_is_deterministic_and_parallel_agrees() {
        let base = micro_base();
        let cells = fusion_grid();
        let serial = ablation_csv(&ablate(&base, &cells, &[1, 2], false));
        let parallel = ablation_csv(&ablate(&base, &cells, &[1, 2], true));
        assert_eq!(serial, parallel);
        assert_eq!(serial.lines().count(), 7); // header + 6 cells
    }
}
