//! Pretraining of the base model and adapter training for capability
//! ablation.
//!
//! Ablation keeps the base model frozen and trains only the adapter factors.
//! Each step pairs a shuffled batch of target examples with an equal-size
//! batch of general text, evaluates the full objective, clips the global
//! gradient norm and applies AdamW. When a dev suite is supplied the adapters
//! are scored after every epoch and the snapshot with the largest
//! `accuracy drop × capability` product is returned, where the drop is
//! counted only down to chance accuracy and later epochs win ties.

mod optim;
mod pretrain;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, global_norm, AdamW, BETA1, BETA2, EPS};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};

use crate::data::{encode_all, EncodedExample, LossMode, TaskDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, overall_capability, task_accuracy, EvalSuite, MetricReport};
use crate::lora::LoraAdapterSet;
use crate::model::{TokenId, TransformerModel};
use crate::objective::{build_loss, LossBreakdown, LossWeights};
use crate::tensor::{Graph, Scalar};

/// Preference accuracy of a model that cannot tell the answers apart.
pub const CHANCE_ACCURACY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Drives batch order and general-text pairing.
    pub seed: u64,
    /// Seed for the adapters' `A` factors; falls back to `seed` when unset.
    pub init_seed: Option<u64>,
    /// Must match the target task when set.
    pub mode: Option<LossMode>,
    pub lambda_textreg: f64,
    pub lambda_normreg: f64,
    pub lambda_sparsityreg: f64,
    pub rank: usize,
    pub alpha: f64,
}

/// Text-regularization weight for the toy model. Its general-text KL is
/// orders of magnitude smaller than the target loss, so the unit weight used
/// for large models leaves held-out skills unprotected.
pub const TOY_TEXTREG_WEIGHT: f64 = 100.0;

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            learning_rate: 2e-3,
            batch_size: 32,
            epochs: 20,
            weight_decay: 1e-3,
            grad_clip_norm: 1.0,
            seed: 0,
            init_seed: None,
            mode: None,
            lambda_textreg: TOY_TEXTREG_WEIGHT,
            lambda_normreg: w.normreg,
            lambda_sparsityreg: w.sparsityreg,
            rank: 2,
            alpha: 16.0,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters for large pretrained models. Far too slow for the toy
    /// model; kept for reference runs.
    pub fn full_scale() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 40,
            epochs: 20,
            weight_decay: 1e-3,
            lambda_textreg: LossWeights::default().textreg,
            ..TrainConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            textreg: self.lambda_textreg,
            normreg: self.lambda_normreg,
            sparsityreg: self.lambda_sparsityreg,
        }
    }

    pub fn adapter_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        // Zero is accepted so a run can be checked to leave adapters untouched.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.rank == 0 {
            return Err(Error::Config(
                "batch_size, epochs and rank must be at least 1".into(),
            ));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.alpha > 0.0) {
            return Err(Error::Config(
                "weight_decay must be non-negative and alpha positive".into(),
            ));
        }
        self.weights().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dev_accuracy: Option<f64>,
    pub dev_accuracy_drop: Option<f64>,
    pub dev_capability: Option<f64>,
    pub wall_clock_secs: f64,
}

impl EpochRecord {
    pub fn product(&self) -> Option<f64> {
        Some(self.dev_accuracy_drop? * self.dev_capability?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// One entry per optimizer step.
    pub steps: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose adapters were returned, when dev selection ran.
    pub best_epoch: Option<usize>,
}

const STEP_HEADER: [&str; 7] = [
    "step",
    "target",
    "textreg",
    "normreg",
    "sparsityreg",
    "total",
    "mean_abs_gap",
];

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Contract(format!("csv: {e}")))
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl TrainLog {
    /// Per-step losses. Contains no timing, so seeded runs reproduce it
    /// byte for byte.
    pub fn steps_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(
            &STEP_HEADER,
            self.steps.iter().enumerate().map(|(i, b)| {
                let mut row = vec![i.to_string()];
                row.extend(
                    [
                        b.target,
                        b.textreg,
                        b.normreg,
                        b.sparsityreg,
                        b.total,
                        b.mean_abs_gap,
                    ]
                    .iter()
                    .map(|v| format!("{v:.9e}")),
                );
                row
            }),
        )
    }

    /// Per-epoch dev scores. Wall-clock time is left out so the file is
    /// reproducible.
    pub fn epochs_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(
            &[
                "epoch", "dev_acc", "dev_accd", "dev_cap", "product", "selected",
            ],
            self.epochs.iter().map(|e| {
                vec![
                    e.epoch.to_string(),
                    opt_cell(e.dev_accuracy),
                    opt_cell(e.dev_accuracy_drop),
                    opt_cell(e.dev_capability),
                    opt_cell(e.product()),
                    (self.best_epoch == Some(e.epoch)).to_string(),
                ]
            }),
        )
    }

    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        crate::util::write_bytes(path, self.steps_csv()?)
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        crate::util::write_bytes(path, self.epochs_csv()?)
    }
}

fn dev_scores<T: Scalar>(
    model: &TransformerModel<T>,
    adapters: &LoraAdapterSet<T>,
    dev: &EvalSuite<'_>,
) -> Result<(f64, f64)> {
    let acc = task_accuracy(model, Some(adapters), dev.target)?;
    let cap = overall_capability(model, Some(adapters), dev.held_out, dev.target_name)?;
    Ok((acc, cap))
}

/// Trains adapters that remove `target`'s capability from the frozen
/// `model`. `general_pool` supplies the text paired with each target batch.
/// With `dev` set, the returned adapters are the best epoch snapshot on the
/// dev suite; otherwise they are the final ones.
pub fn ablate<T: Scalar>(
    model: &TransformerModel<T>,
    target: &TaskDataset,
    general_pool: &[String],
    config: &TrainConfig,
    dev: Option<&EvalSuite<'_>>,
) -> Result<(LoraAdapterSet<T>, TrainLog)> {
    config.validate()?;
    if let Some(mode) = config.mode {
        if mode != target.mode {
            return Err(Error::Config(format!(
                "config asks for {mode:?} mode but task {} is {:?}",
                target.task_name, target.mode
            )));
        }
    }
    if target.train.is_empty() {
        return Err(Error::Input(format!(
            "task {} has no training examples",
            target.task_name
        )));
    }
    if general_pool.is_empty() {
        return Err(Error::Input("general text pool is empty".into()));
    }
    let tok = model.tokenizer();
    let examples: Vec<EncodedExample> = encode_all(&target.train, tok)?;
    let general: Vec<Vec<TokenId>> = general_pool
        .iter()
        .map(|t| tok.encode_with_bos(t))
        .collect::<Result<_>>()?;

    let mut adapters = LoraAdapterSet::<T>::init(
        model.config(),
        config.rank,
        config.alpha,
        config.adapter_seed(),
    )?;
    adapters.set_task_label(target.task_name.clone());
    let weights = config.weights();
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut general_order: Vec<usize> = (0..general.len()).collect();
    general_order.shuffle(&mut rng);
    let mut general_cursor = 0;

    let mut log = TrainLog::default();
    let mut best: Option<(f64, LoraAdapterSet<T>)> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EncodedExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let paired: Vec<Vec<TokenId>> = (0..batch.len())
                .map(|_| {
                    if general_cursor == general_order.len() {
                        general_order.shuffle(&mut rng);
                        general_cursor = 0;
                    }
                    general_cursor += 1;
                    general[general_order[general_cursor - 1]].clone()
                })
                .collect();

            let mut g = Graph::new();
            let mv = model.bind(&mut g, false);
            let av = adapters.bind(&mut g, true, model.config())?;
            let vars = build_loss(&mut g, model, &mv, &av, &batch, &paired, &weights)?;
            let breakdown = vars.breakdown(&g);
            if !breakdown.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at step {}: {breakdown:?}",
                    log.steps.len()
                )));
            }
            g.backward(vars.total)?;
            let mut grads: Vec<Vec<T>> = av
                .all()
                .into_iter()
                .map(|v| g.take_grad(v).expect("adapter factors are trainable"))
                .collect();
            drop(g);
            clip_global_norm(&mut grads, config.grad_clip_norm);
            let mut params: Vec<&mut [T]> = adapters
                .sites_mut()
                .iter_mut()
                .flat_map(|s| [&mut s.a, &mut s.b])
                .map(|p| Arc::make_mut(p).data_mut())
                .collect();
            opt.step(&mut params, &grads)?;
            log.steps.push(breakdown);
        }

        let mut record = EpochRecord {
            epoch,
            dev_accuracy: None,
            dev_accuracy_drop: None,
            dev_capability: None,
            wall_clock_secs: 0.0,
        };
        if let Some(dev) = dev {
            let (acc, cap) = dev_scores(model, &adapters, dev)?;
            record.dev_accuracy = Some(acc);
            record.dev_accuracy_drop = Some(dev.base_accuracy - acc);
            record.dev_capability = Some(cap);
            // Accuracy below chance still separates the answers, only with
            // the sign flipped, so it earns no more credit than chance.
            let score = (dev.base_accuracy - acc.max(CHANCE_ACCURACY)) * cap;
            if best.as_ref().is_none_or(|(p, _)| score >= *p) {
                best = Some((score, adapters.clone()));
                log.best_epoch = Some(epoch);
            }
        }
        record.wall_clock_secs = started.elapsed().as_secs_f64();
        log.epochs.push(record);
    }

    let adapters = best.map(|(_, a)| a).unwrap_or(adapters);
    Ok((adapters, log))
}

/// Grid of ablation settings; every combination is one cell. Empty axes
/// fall back to the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub ranks: Vec<usize>,
    pub lambda_textreg: Vec<f64>,
    pub lambda_normreg: Vec<f64>,
    pub lambda_sparsityreg: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn ranks(ranks: &[usize]) -> Self {
        SweepGrid {
            ranks: ranks.to_vec(),
            ..SweepGrid::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("sweep grid: {e}")))
    }

    /// Every cell's config, in row-major order over
    /// (rank, textreg, normreg, sparsityreg, seed).
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        fn or<V: Copy>(axis: &[V], default: V) -> Vec<V> {
            if axis.is_empty() {
                vec![default]
            } else {
                axis.to_vec()
            }
        }
        let mut out = Vec::new();
        for &rank in &or(&self.ranks, base.rank) {
            for &lt in &or(&self.lambda_textreg, base.lambda_textreg) {
                for &ln in &or(&self.lambda_normreg, base.lambda_normreg) {
                    for &ls in &or(&self.lambda_sparsityreg, base.lambda_sparsityreg) {
                        for &seed in &or(&self.seeds, base.seed) {
                            out.push(TrainConfig {
                                rank,
                                lambda_textreg: lt,
                                lambda_normreg: ln,
                                lambda_sparsityreg: ls,
                                seed,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: TrainConfig,
    /// `None` when the cell failed; the error text is kept instead.
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn product(&self) -> Option<f64> {
        self.report
            .as_ref()
            .map(|r| r.accuracy_drop * r.overall_capability)
    }
}

/// Trains one cell per grid combination, scores each on the dev suite and
/// returns rows ranked by `accuracy drop × capability`, best first. Failed
/// cells are kept at the end of the table.
pub fn sweep<T: Scalar>(
    model: &TransformerModel<T>,
    target: &TaskDataset,
    general_pool: &[String],
    base: &TrainConfig,
    grid: &SweepGrid,
    dev: &EvalSuite<'_>,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(base);
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let mut rows: Vec<SweepRow> = cells
        .into_iter()
        .map(|config| {
            let outcome = ablate(model, target, general_pool, &config, Some(dev))
                .and_then(|(a, _)| evaluate(model, Some(&a), dev));
            match outcome {
                Ok(report) => SweepRow {
                    config,
                    report: Some(report),
                    error: None,
                },
                Err(e) => SweepRow {
                    config,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rank_sweep_rows(&mut rows);
    Ok(rows)
}

/// Orders rows by descending dev product with failed cells last. The sort is
/// stable, so ties keep grid order.
pub fn rank_sweep_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| match (a.product(), b.product()) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

pub const SWEEP_HEADER: [&str; 13] = [
    "position",
    "rank",
    "lambda_textreg",
    "lambda_normreg",
    "lambda_sparsityreg",
    "seed",
    "status",
    "acc",
    "accd",
    "ppl",
    "cap",
    "product",
    "error",
];

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &SWEEP_HEADER,
        rows.iter().enumerate().map(|(i, r)| {
            let c = &r.config;
            let m = r.report.as_ref();
            vec![
                (i + 1).to_string(),
                c.rank.to_string(),
                c.lambda_textreg.to_string(),
                c.lambda_normreg.to_string(),
                c.lambda_sparsityreg.to_string(),
                c.seed.to_string(),
                if m.is_some() { "ok" } else { "failed" }.to_string(),
                opt_cell(m.map(|m| m.accuracy)),
                opt_cell(m.map(|m| m.accuracy_drop)),
                opt_cell(m.map(|m| m.perplexity)),
                opt_cell(m.map(|m| m.overall_capability)),
                opt_cell(r.product()),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_presets() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.learning_rate, c.batch_size, c.epochs, c.rank),
            (2e-3, 32, 20, 2)
        );
        c.validate().unwrap();
        assert_eq!(c.weights().textreg, TOY_TEXTREG_WEIGHT);
        let p = TrainConfig::full_scale();
        assert_eq!(
            (p.learning_rate, p.batch_size, p.weight_decay),
            (1e-5, 40, 1e-3)
        );
        assert_eq!(p.weights(), LossWeights::default());
    }

    #[test]
    fn config_toml_round_trip_and_rejections() {
        let c = TrainConfig {
            mode: Some(LossMode::Sentence),
            init_seed: Some(7),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let parsed = TrainConfig::from_toml("learning_rate = 0.01\nrank = 4\n").unwrap();
        assert_eq!(
            (parsed.learning_rate, parsed.rank, parsed.epochs),
            (0.01, 4, 20)
        );
        for bad in [
            "batch_size = 0",
            "epochs = 0",
            "grad_clip_norm = 0.0",
            "bogus = 1",
            "lambda_textreg = -1.0",
        ] {
            assert!(
                matches!(TrainConfig::from_toml(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn grid_expands_row_major() {
        let base = TrainConfig::default();
        assert_eq!(SweepGrid::default().cells(&base), vec![base.clone()]);
        let cells = SweepGrid::ranks(&[1, 2, 4, 8]).cells(&base);
        assert_eq!(
            cells.iter().map(|c| c.rank).collect::<Vec<_>>(),
            [1, 2, 4, 8]
        );
        let g = SweepGrid {
            ranks: vec![1, 2],
            seeds: vec![5, 6, 7],
            ..SweepGrid::default()
        };
        let cells = g.cells(&base);
        assert_eq!(cells.len(), 6);
        assert_eq!((cells[1].rank, cells[1].seed), (1, 6));
        assert_eq!((cells[3].rank, cells[3].seed), (2, 5));
    }
}
