//! The optimization loop: deterministic seeded batch sampling, Adam
//! updates, periodic unseen-domain validation with best-checkpoint
//! selection, a JSONL training log, and the leave-one-domain-out
//! experiment runner with its ablation modes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::split::{leave_one_domain_out_split, LodoSplit, SplitSpec};
use crate::data::{DomainRegistry, Sample};
use crate::dca::CalibrationMode;
use crate::error::{Error, Result};
use crate::losses::{assemble_loss, LossConfig, LossScalars};
use crate::metrics::{self, DomainAggregate, EvalConfig, EvalResult};
use crate::network::{build_dca_unet, DcaUnet, NetworkConfig};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::seed;
use crate::tensor::{Elem, Graph, ParamStore};

/// Experiment arms: the full method, its no-divergence ablation, and the
/// pooled-training baselines without calibration (plain, and with the
/// compactness term kept).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Dca,
    DcaNoDiv,
    Deepall,
    DeepallComp,
}

impl TrainMode {
    pub fn uses_calibration(self) -> bool {
        matches!(self, TrainMode::Dca | TrainMode::DcaNoDiv)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Dca => "dca",
            TrainMode::DcaNoDiv => "dca_no_div",
            TrainMode::Deepall => "deepall",
            TrainMode::DeepallComp => "deepall_comp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Basis rows per calibration bank (overrides the network setting, so
    /// bank-size ablations are a single-knob change).
    pub bank_size: usize,
    /// Compactness weight.
    pub lambda1: f64,
    /// Divergence weight.
    pub lambda2: f64,
    pub seed: u64,
    /// Validate (and consider checkpointing) every this many iterations.
    pub val_every: usize,
    pub mode: TrainMode,
    /// Optional global-norm gradient clipping threshold.
    pub grad_clip: Option<f64>,
    /// Sample batches per-domain-uniform instead of per-slice-uniform.
    pub domain_balanced: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            iterations: 20_000,
            batch_size: 4,
            bank_size: 8,
            lambda1: 1.0,
            lambda2: 0.1,
            seed: 0,
            val_every: 250,
            mode: TrainMode::Dca,
            grad_clip: None,
            domain_balanced: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config(
                "iterations, batch_size and val_every must be positive".into(),
            ));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.mode.uses_calibration() && self.bank_size < 3 {
            return Err(Error::Config(format!("bank size {} must be >= 3", self.bank_size)));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    /// Network settings with the mode and bank size applied.
    pub fn effective_network(&self, base: &NetworkConfig) -> NetworkConfig {
        let mut net = base.clone();
        net.use_dca = self.mode.uses_calibration();
        net.bank_size = self.bank_size;
        net
    }

    /// Loss settings with the mode's weights applied. The divergence term
    /// is still computed and logged in `dca_no_div` mode; only its weight
    /// in the total is zero.
    pub fn effective_loss(&self, base: &LossConfig, net: &NetworkConfig) -> LossConfig {
        let mut loss = base.clone();
        loss.lambda1 = match self.mode {
            TrainMode::Dca | TrainMode::DcaNoDiv | TrainMode::DeepallComp => self.lambda1,
            TrainMode::Deepall => 0.0,
        };
        loss.lambda2 = match self.mode {
            TrainMode::Dca => self.lambda2,
            _ => 0.0,
        };
        let scales = if net.deep_supervision { crate::network::SCALES - 1 } else { 1 };
        loss.ds_weights = crate::losses::deep_supervision_weights(scales);
        loss
    }
}

/// One logged training event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEvent {
    Meta {
        mode: String,
        train: TrainConfig,
        network: NetworkConfig,
        loss: LossConfig,
        optimizer: AdamConfig,
        train_samples: usize,
        held_out_domain: String,
    },
    Loss {
        iteration: usize,
        #[serde(flatten)]
        values: LossScalars,
    },
    Val {
        iteration: usize,
        mean_dice: f64,
        improved: bool,
    },
    Done {
        best_iteration: usize,
        best_val_dice: Option<f64>,
        elapsed_sec: f64,
    },
}

/// Everything a training run leaves behind.
#[derive(Debug)]
pub struct TrainReport {
    pub best_iteration: usize,
    pub best_val_dice: Option<f64>,
    /// Checkpoint selected by validation Dice (falls back to final).
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Per-iteration loss values, in order.
    pub losses: Vec<LossScalars>,
}

struct BatchSampler {
    by_domain: Vec<Vec<usize>>,
    n: usize,
    balanced: bool,
}

impl BatchSampler {
    fn new(samples: &[Sample], balanced: bool) -> Self {
        let mut order: Vec<&str> = Vec::new();
        for s in samples {
            if !order.contains(&s.domain_id.as_str()) {
                order.push(&s.domain_id);
            }
        }
        let by_domain = order
            .iter()
            .map(|id| {
                samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.domain_id == *id)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        BatchSampler { by_domain, n: samples.len(), balanced }
    }

    fn draw(&self, rng: &mut rand_chacha::ChaCha12Rng, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.balanced {
                    let d = &self.by_domain[rng.gen_range(0..self.by_domain.len())];
                    d[rng.gen_range(0..d.len())]
                } else {
                    rng.gen_range(0..self.n)
                }
            })
            .collect()
    }
}

fn batch_tensors<T: Elem>(samples: &[Sample], idx: &[usize]) -> (ArrayD<T>, ArrayD<T>) {
    let (_, h, w) = samples[idx[0]].image.dim();
    let b = idx.len();
    let mut images = ArrayD::<T>::zeros(IxDyn(&[b, 3, h, w]));
    let mut labels = ArrayD::<T>::zeros(IxDyn(&[b, h, w]));
    for (bi, &si) in idx.iter().enumerate() {
        let s = &samples[si];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    images[[bi, c, y, x]] = T::from_f64(s.image[(c, y, x)] as f64);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                labels[[bi, y, x]] = T::from_f64(s.label[(y, x)] as f64);
            }
        }
    }
    (images, labels)
}

fn mean_val_dice<T: Elem>(
    model: &DcaUnet,
    store: &ParamStore<T>,
    split: &LodoSplit,
    eval_cfg: &EvalConfig,
) -> Result<f64> {
    let results = metrics::evaluate_volumes(model, store, &split.val, eval_cfg)?;
    Ok(results.iter().map(|r| r.dice_percent).sum::<f64>() / results.len() as f64)
}

/// Train one model on a prepared split. Writes `train.jsonl`,
/// `best.ckpt` and `final.ckpt` into `out_dir` (created if needed).
pub fn train<T: Elem>(
    split: &LodoSplit,
    base_net: &NetworkConfig,
    base_loss: &LossConfig,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("no training samples in split".into()));
    }
    let net_cfg = cfg.effective_network(base_net);
    let loss_cfg = cfg.effective_loss(base_loss, &net_cfg);
    net_cfg.validate()?;
    loss_cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let log_path = out_dir.join("train.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let emit = |event: &LogEvent, log: &mut BufWriter<File>| -> Result<()> {
        let line = serde_json::to_string(event)
            .map_err(|e| Error::Data(format!("log serialization: {e}")))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };

    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    adam_cfg.validate()?;
    emit(
        &LogEvent::Meta {
            mode: cfg.mode.as_str().to_string(),
            train: cfg.clone(),
            network: net_cfg.clone(),
            loss: loss_cfg.clone(),
            optimizer: adam_cfg,
            train_samples: split.train.len(),
            held_out_domain: split.held_out_domain.clone(),
        },
        &mut log,
    )?;

    let mut store = ParamStore::<T>::new();
    let mut init_rng = seed::rng(cfg.seed, "init");
    let model = build_dca_unet(&mut store, &net_cfg, &mut init_rng)?;
    let mut adam = Adam::new(&store, adam_cfg);
    let sampler = BatchSampler::new(&split.train, cfg.domain_balanced);
    let mut batch_rng = seed::rng(cfg.seed, "batches");
    let mut triple_rng = seed::rng(cfg.seed, "triples");

    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let mut best_val: Option<f64> = None;
    let mut best_iter = 0usize;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let started = Instant::now();

    for it in 1..=cfg.iterations {
        let idx = sampler.draw(&mut batch_rng, cfg.batch_size);
        let (images, labels) = batch_tensors::<T>(&split.train, &idx);
        let mut g = Graph::new();
        let x = g.constant(images);
        let y = g.constant(labels);
        let out = model.forward(&mut g, &store, x, CalibrationMode::Learned)?;
        let terms =
            assemble_loss(&mut g, &out.logits_per_scale, y, &out.banks, &loss_cfg, &mut triple_rng)?;
        let values = terms.read(&g);
        if !values.l_total.is_finite() {
            let batch_desc: Vec<String> = idx
                .iter()
                .map(|&i| {
                    let s = &split.train[i];
                    format!("{}/{}#z{}", s.domain_id, s.patient_id, s.slice_index)
                })
                .collect();
            return Err(Error::Numeric(format!(
                "non-finite loss {:?} at iteration {it} on batch [{}]",
                values,
                batch_desc.join(", ")
            )));
        }
        losses.push(values);
        emit(&LogEvent::Loss { iteration: it, values }, &mut log)?;

        store.zero_grads();
        g.backward(terms.l_total);
        g.accumulate_param_grads(&mut store);
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut store, c);
        }
        adam.step(&mut store);

        if it % cfg.val_every == 0 || it == cfg.iterations {
            let dice = mean_val_dice(&model, &store, split, eval_cfg)?;
            let improved = best_val.map_or(true, |b| dice > b);
            emit(&LogEvent::Val { iteration: it, mean_dice: dice, improved }, &mut log)?;
            if improved {
                best_val = Some(dice);
                best_iter = it;
                checkpoint::save(&best_path, &net_cfg, &store, Some(&adam), it as u64)?;
            }
        }
    }

    checkpoint::save(&final_path, &net_cfg, &store, Some(&adam), cfg.iterations as u64)?;
    if best_val.is_none() {
        // No validation pass ran (tiny runs); fall back to the final state.
        std::fs::copy(&final_path, &best_path).map_err(|e| Error::io(&best_path, e))?;
        best_iter = cfg.iterations;
    }
    emit(
        &LogEvent::Done {
            best_iteration: best_iter,
            best_val_dice: best_val,
            elapsed_sec: started.elapsed().as_secs_f64(),
        },
        &mut log,
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    Ok(TrainReport {
        best_iteration: best_iter,
        best_val_dice: best_val,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        log_path,
        losses,
    })
}

/// Evaluate a trained checkpoint on a list of evaluation volumes.
pub fn evaluate_checkpoint<T: Elem>(
    ckpt_path: &Path,
    volumes: &[crate::data::split::EvalVolume],
    eval_cfg: &EvalConfig,
) -> Result<Vec<EvalResult>> {
    let loaded = checkpoint::load_model::<T>(ckpt_path)?;
    metrics::evaluate_volumes(&loaded.model, &loaded.store, volumes, eval_cfg)
}

/// One row of the leave-one-domain-out result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoRow {
    pub held_out: String,
    pub mode: String,
    pub seed: u64,
    pub n: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub asd_mean: Option<f64>,
    pub asd_std: Option<f64>,
    pub asd_missing: usize,
}

impl LodoRow {
    fn from_aggregate(a: &DomainAggregate, mode: TrainMode, seed: u64) -> LodoRow {
        LodoRow {
            held_out: a.domain_id.clone(),
            mode: mode.as_str().to_string(),
            seed,
            n: a.n,
            dice_mean: a.dice_mean,
            dice_std: a.dice_std,
            asd_mean: a.asd_mean,
            asd_std: a.asd_std,
            asd_missing: a.asd_missing,
        }
    }
}

/// Hold out each domain in turn, train a fresh model, evaluate on the
/// unseen test split; returns per-domain rows plus an `average` row.
/// Artifacts land in `out_dir/<held_out>/`.
pub fn run_lodo_experiment<T: Elem>(
    registry: &DomainRegistry,
    base_net: &NetworkConfig,
    base_loss: &LossConfig,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<LodoRow>> {
    if registry.m() < 2 {
        return Err(Error::Config("leave-one-domain-out needs at least 2 domains".into()));
    }
    let mut rows = Vec::new();
    for domain in &registry.domains {
        let held = &domain.domain_id;
        let split =
            leave_one_domain_out_split(registry, &SplitSpec::new(held.clone(), cfg.seed))?;
        let run_dir = out_dir.join(held);
        let report = train::<T>(&split, base_net, base_loss, cfg, eval_cfg, &run_dir)?;
        let results = evaluate_checkpoint::<T>(&report.best_checkpoint, &split.test, eval_cfg)?;
        metrics::write_volume_csv(&run_dir.join("test_volumes.csv"), &results)?;
        let agg = metrics::aggregate(&results);
        rows.push(LodoRow::from_aggregate(&agg[0], cfg.mode, cfg.seed));
    }

    let dice: Vec<f64> = rows.iter().map(|r| r.dice_mean).collect();
    let asd: Vec<f64> = rows.iter().filter_map(|r| r.asd_mean).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    rows.push(LodoRow {
        held_out: "average".into(),
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        n: rows.iter().map(|r| r.n).sum(),
        dice_mean: mean(&dice),
        dice_std: 0.0,
        asd_mean: if asd.is_empty() { None } else { Some(mean(&asd)) },
        asd_std: None,
        asd_missing: rows.iter().map(|r| r.asd_missing).sum(),
    });
    write_lodo_csv(&out_dir.join("lodo_results.csv"), &rows)?;
    Ok(rows)
}

/// Write the experiment table:
/// `held_out,mode,seed,n,dice_mean,dice_std,asd_mean,asd_std,asd_missing`.
pub fn write_lodo_csv(path: &Path, rows: &[LodoRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record([
        "held_out",
        "mode",
        "seed",
        "n",
        "dice_mean",
        "dice_std",
        "asd_mean",
        "asd_std",
        "asd_missing",
    ])
    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.write_record([
            r.held_out.as_str(),
            r.mode.as_str(),
            &r.seed.to_string(),
            &r.n.to_string(),
            &format!("{:.6}", r.dice_mean),
            &format!("{:.6}", r.dice_std),
            &r.asd_mean.map(|v| format!("{v:.6}")).unwrap_or_default(),
            &r.asd_std.map(|v| format!("{v:.6}")).unwrap_or_default(),
            &r.asd_missing.to_string(),
        ])
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a training log back (used by plotting and tests).
pub fn read_log(path: &Path) -> Result<Vec<LogEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("bad log line: {e}")))
        })
        .collect()
}
