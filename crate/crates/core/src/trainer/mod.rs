//! Joint training of encoder, projection bank and evidence classifier.

mod adam;
mod grid;
mod schedule;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use grid::{grid_cells, grid_search, CellSummary, GridCell, GridSpec};
pub use schedule::{triangular_lr, warmup_steps};

use crate::corpus::{prepare, Dataset, Encoded, QuestionTypes, Vocabulary};
use crate::encoder::{init_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_instances, summarize, EvalReport};
use crate::loss::{combined_loss, EvidenceClassifier, LossConfig};
use crate::model::{instance_step, Model};
use crate::similarity::{init_bank, BankConfig, SimContext, SimilarityKind};
use crate::tensor::ParamSet;

/// Encoder shape; the vocabulary size and seed are filled in at train time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub d: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    #[serde(default)]
    pub marker_key_bias: f64,
}

impl Default for EncoderShape {
    fn default() -> Self {
        let c = EncoderConfig::default();
        Self {
            d: c.d,
            layers: c.layers,
            ffn_mult: c.ffn_mult,
            max_len: c.max_len,
            marker_key_bias: c.marker_key_bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
    pub encoder: EncoderShape,
    /// One value shared by every type, or one per type.
    pub temperatures: Vec<f64>,
    pub shared_projection: bool,
    pub dropout: f64,
    /// Fill the metrics `seconds` column; off keeps reruns byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup_frac: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossConfig::default(),
            encoder: EncoderShape::default(),
            temperatures: vec![0.5],
            shared_projection: false,
            dropout: 0.1,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!(
                "peak_lr {} must be positive",
                self.peak_lr
            )));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac {} outside (0, 1)",
                self.warmup_frac
            )));
        }
        if self.temperatures.is_empty() {
            return Err(Error::Config("at least one temperature is required".into()));
        }
        if let Some(t) = self
            .temperatures
            .iter()
            .find(|t| !(**t > 0.0 && t.is_finite()))
        {
            return Err(Error::Config(format!("temperature {t} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        let d = self.encoder.d;
        if d == 0 || self.encoder.max_len == 0 || self.encoder.ffn_mult == 0 {
            return Err(Error::Config(
                "d, max_len and ffn_mult must be positive".into(),
            ));
        }
        if let SimilarityKind::ProjectedCosine { rank } = self.loss.kind {
            if rank == 0 || rank > d {
                return Err(Error::Config(format!(
                    "projection rank {rank} must be in 1..={d}"
                )));
            }
        }
        self.loss.validate()
    }

    /// Temperatures expanded to one per question type.
    pub fn temperatures_for(&self, num_types: usize) -> Result<Vec<f64>> {
        match self.temperatures.len() {
            1 => Ok(vec![self.temperatures[0]; num_types]),
            n if n == num_types => Ok(self.temperatures.clone()),
            n => Err(Error::Config(format!(
                "{n} temperatures for {num_types} question types"
            ))),
        }
    }
}

/// Fresh parameters for a dataset with `num_types` types and `vocab_size` ids.
pub fn init_model(cfg: &TrainConfig, num_types: usize, vocab_size: usize) -> Result<Model> {
    cfg.validate()?;
    let enc = EncoderConfig {
        d: cfg.encoder.d,
        layers: cfg.encoder.layers,
        ffn_mult: cfg.encoder.ffn_mult,
        max_len: cfg.encoder.max_len,
        vocab_size,
        seed: cfg.seed,
        marker_key_bias: cfg.encoder.marker_key_bias,
    };
    let encoder = init_params(&enc)?;
    let bank = init_bank(&BankConfig {
        kind: cfg.loss.kind,
        num_types,
        d: enc.d,
        temperatures: cfg.temperatures_for(num_types)?,
        dropout: cfg.dropout,
        shared: cfg.shared_projection,
        seed: stream_seed(cfg.seed, 1, 0),
    })?;
    Ok(Model {
        encoder,
        bank,
        classifier: EvidenceClassifier::zeros(enc.d),
    })
}

/// splitmix64 over the combined inputs; gives independent per-use seeds.
pub(crate) fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss_qa: f64,
    pub loss_qe: Option<f64>,
    pub loss_combined: f64,
    pub map_per_type: Vec<Option<f64>>,
    pub evidence_f1: f64,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub type_labels: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl RunMetrics {
    pub fn header(&self) -> String {
        let mut h = String::from("epoch,split,loss_qa,loss_qe,loss_combined");
        for l in &self.type_labels {
            let _ = write!(h, ",map_type_{l}");
        }
        h.push_str(",evidence_f1,seconds");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.split,
                r.loss_qa,
                cell(r.loss_qe),
                r.loss_combined
            );
            for m in &r.map_per_type {
                let _ = write!(out, ",{}", cell(*m));
            }
            let _ = writeln!(out, ",{},{}", r.evidence_f1, cell(r.seconds));
        }
        out
    }

    pub fn last(&self, split: &str) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub vocab: Vocabulary,
    pub types: QuestionTypes,
    pub metrics: RunMetrics,
    /// Final validation report, when a validation set was given.
    pub validation: Option<EvalReport>,
}

fn report_row(
    epoch: usize,
    split: &str,
    report: &EvalReport,
    lambda: f64,
    loss_qa: f64,
    loss_qe: Option<f64>,
) -> MetricsRow {
    MetricsRow {
        epoch,
        split: split.to_string(),
        loss_qa,
        loss_qe,
        loss_combined: (1.0 - lambda) * loss_qa + lambda * loss_qe.unwrap_or(0.0),
        map_per_type: report.per_type.iter().map(|g| g.map).collect(),
        evidence_f1: report.all.f1,
        seconds: None,
    }
}

pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train_with(train_set, val_set, cfg, |_, _| Ok(()))
}

/// Trains, calling `on_epoch` with the metrics so far and the current model
/// after every epoch.
pub fn train_with(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&RunMetrics, &Model) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_set.instances.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(v) = val_set {
        if v.types != train_set.types {
            return Err(Error::Config(
                "validation set question types differ from training set".into(),
            ));
        }
    }
    let lambda = cfg.loss.lambda;
    let eligible = train_set
        .instances
        .iter()
        .filter(|i| i.qe_eligible())
        .count();
    if lambda > 0.0 && eligible == 0 {
        return Err(Error::Config(format!(
            "lambda = {lambda} but no training instance is eligible for the contrastive loss"
        )));
    }

    let types = train_set.types.clone();
    let vocab = Vocabulary::build(&train_set.instances);
    let train_data = prepare(&train_set.instances, &vocab)?;
    let val_data = val_set.map(|v| prepare(&v.instances, &vocab)).transpose()?;
    for ex in train_data.iter().chain(val_data.iter().flatten()) {
        if ex.sequence.len() > cfg.encoder.max_len {
            return Err(Error::Length {
                len: ex.sequence.len(),
                max_len: cfg.encoder.max_len,
            });
        }
    }

    let mut model = init_model(cfg, types.len(), vocab.len())?;
    let mut adam = AdamState::default();

    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut metrics = RunMetrics {
        type_labels: types.labels().to_vec(),
        rows: Vec::new(),
    };
    let mut validation = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
            cfg.seed,
            2,
            epoch as u64,
        )));

        let (mut qa_sum, mut qe_sum, mut qe_n) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            // lr(t+1) on a horizon of total+1 keeps every update's rate positive
            let lr = triangular_lr(step + 1, total_steps + 1, cfg.warmup_frac, cfg.peak_lr)?;
            let batch_eligible = batch
                .iter()
                .filter(|&&i| train_data[i].instance.qe_eligible())
                .count();
            let qa_weight = (1.0 - lambda) / batch.len() as f64;
            let qe_weight = if batch_eligible > 0 {
                lambda / batch_eligible as f64
            } else {
                0.0
            };
            let results = crate::par::map_indexed(batch, |_, &i| {
                let ex: &Encoded = &train_data[i];
                let mut ctx = SimContext::train(stream_seed(cfg.seed, 3 + step as u64, i as u64));
                instance_step(
                    &model,
                    &ex.sequence,
                    &ex.instance,
                    &cfg.loss,
                    &mut ctx,
                    Some((qa_weight, qe_weight)),
                )
            });
            let mut grad = model.zeros_like();
            for r in results {
                let r = r?;
                qa_sum += r.qa;
                if let Some(qe) = r.qe {
                    qe_sum += qe;
                    qe_n += 1;
                }
                grad.add_assign(r.grad.as_ref().expect("gradient requested"));
            }
            adam_step(&mut model, &grad, &mut adam, lr, &cfg.adam)?;
            if let Some(name) = model.first_non_finite() {
                return Err(Error::NonFinite { tensor: name });
            }
            step += 1;
        }

        let epoch_no = epoch + 1;
        let train_eval =
            evaluate_instances(&model, &train_data, &cfg.loss, cfg.loss.ranking_kind())?;
        let train_report = summarize(&types, &train_eval);
        let loss_qa = qa_sum / train_data.len() as f64;
        let loss_qe = (qe_n > 0).then(|| qe_sum / qe_n as f64);
        let mut row = report_row(epoch_no, "train", &train_report, lambda, loss_qa, loss_qe);
        row.loss_combined = combined_loss(loss_qa, loss_qe.unwrap_or(0.0), lambda)?;
        if cfg.record_wall_time {
            row.seconds = Some(started.elapsed().as_secs_f64());
        }
        metrics.rows.push(row);

        if let Some(val) = &val_data {
            let evals = evaluate_instances(&model, val, &cfg.loss, cfg.loss.ranking_kind())?;
            let report = summarize(&types, &evals);
            let mut row = report_row(
                epoch_no,
                "val",
                &report,
                lambda,
                report.loss_qa,
                report.loss_qe,
            );
            if cfg.record_wall_time {
                row.seconds = Some(started.elapsed().as_secs_f64());
            }
            metrics.rows.push(row);
            validation = Some(report);
        }
        on_epoch(&metrics, &model)?;
    }

    if validation.is_none() {
        if let Some(val) = &val_data {
            validation = Some(summarize(
                &types,
                &evaluate_instances(&model, val, &cfg.loss, cfg.loss.ranking_kind())?,
            ));
        }
    }
    Ok(TrainOutput {
        model,
        vocab,
        types,
        metrics,
        validation,
    })
}
