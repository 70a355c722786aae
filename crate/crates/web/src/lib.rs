//! Browser demo: learning-rate curve, loss explorer and an embedding scatter.
//!
//! The plain functions are what the page needs; the `js_*` wrappers expose
//! them through wasm-bindgen, passing structured results as JSON strings.

use qecontrast::corpus::{generate_synthetic, prepare, SynthConfig};
use qecontrast::eval::{embedding_dump, EmbeddingDump};
use qecontrast::loss::{infonce_from_logits, QeVariant};
use qecontrast::trainer::{train, triangular_lr, warmup_steps, EncoderShape, TrainConfig};
use qecontrast::{Error, Result};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrCurve {
    pub warmup_steps: usize,
    /// Rate at steps `0..=total_steps`.
    pub rates: Vec<f64>,
}

pub fn lr_curve(total_steps: usize, warmup_frac: f64, peak: f64) -> Result<LrCurve> {
    let rates = (0..=total_steps)
        .map(|t| triangular_lr(t, total_steps, warmup_frac, peak))
        .collect::<Result<_>>()?;
    Ok(LrCurve {
        warmup_steps: warmup_steps(total_steps, warmup_frac).min(total_steps),
        rates,
    })
}

/// A stylised candidate set: every evidence sentence, distractor and
/// wrong-type copy of the evidence gets the same raw score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSetup {
    pub sentences: usize,
    pub evidence: usize,
    pub types: usize,
    pub evidence_score: f64,
    pub distractor_score: f64,
    pub wrong_type_score: f64,
    pub temperature: f64,
    pub augment: bool,
    #[serde(default)]
    pub sum_of_logs: bool,
}

impl Default for LossSetup {
    fn default() -> Self {
        Self {
            sentences: 8,
            evidence: 2,
            types: 3,
            evidence_score: 0.6,
            distractor_score: 0.2,
            wrong_type_score: 0.4,
            temperature: 0.5,
            augment: true,
            sum_of_logs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossView {
    pub loss: f64,
    /// Loss when every candidate scores the same.
    pub uniform_loss: f64,
    /// Softmax mass on one evidence, distractor and wrong-type candidate.
    pub mass_evidence: f64,
    pub mass_distractor: f64,
    pub mass_wrong_type: f64,
    /// `(temperature, loss)` over a log-spaced sweep.
    pub sweep: Vec<(f64, f64)>,
}

struct Candidates {
    scores: Vec<f64>,
    positive: Vec<bool>,
}

impl LossSetup {
    fn candidates(&self) -> Result<Candidates> {
        if self.evidence == 0 || self.evidence > self.sentences {
            return Err(Error::Config(format!(
                "need 1..={} evidence sentences, got {}",
                self.sentences, self.evidence
            )));
        }
        if self.types == 0 {
            return Err(Error::Config("at least one question type".into()));
        }
        let mut scores = Vec::new();
        let mut positive = Vec::new();
        for j in 0..self.sentences {
            let is_evidence = j < self.evidence;
            scores.push(if is_evidence {
                self.evidence_score
            } else {
                self.distractor_score
            });
            positive.push(is_evidence);
            if self.augment {
                for _ in 1..self.types {
                    scores.push(if is_evidence {
                        self.wrong_type_score
                    } else {
                        self.distractor_score
                    });
                    positive.push(false);
                }
            }
        }
        Ok(Candidates { scores, positive })
    }

    fn variant(&self) -> QeVariant {
        if self.sum_of_logs {
            QeVariant::SumOfLogs
        } else {
            QeVariant::LogOfSum
        }
    }

    fn loss_at(&self, c: &Candidates, tau: f64) -> Result<f64> {
        let logits: Vec<f64> = c.scores.iter().map(|s| s / tau).collect();
        Ok(infonce_from_logits(&logits, &c.positive, self.variant())?.0)
    }
}

pub fn explore_loss(setup: &LossSetup) -> Result<LossView> {
    if !(setup.temperature > 0.0 && setup.temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature {} must be positive",
            setup.temperature
        )));
    }
    let c = setup.candidates()?;
    let loss = setup.loss_at(&c, setup.temperature)?;
    let flat = Candidates {
        scores: vec![0.0; c.scores.len()],
        positive: c.positive.clone(),
    };
    let uniform_loss = setup.loss_at(&flat, 1.0)?;

    let z: f64 = c.scores.iter().map(|s| (s / setup.temperature).exp()).sum();
    let mass = |s: f64| (s / setup.temperature).exp() / z;

    let sweep = (0..=60)
        .map(|i| {
            let tau = 0.02 * 250f64.powf(i as f64 / 60.0);
            setup.loss_at(&c, tau).map(|l| (tau, l))
        })
        .collect::<Result<_>>()?;
    Ok(LossView {
        loss,
        uniform_loss,
        mass_evidence: mass(setup.evidence_score),
        mass_distractor: mass(setup.distractor_score),
        mass_wrong_type: if setup.augment && setup.types > 1 {
            mass(setup.wrong_type_score)
        } else {
            0.0
        },
        sweep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSetup {
    pub instances: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub shared_projection: bool,
}

impl Default for ScatterSetup {
    fn default() -> Self {
        Self {
            instances: 120,
            epochs: 2,
            seed: 0,
            lambda: 0.4,
            shared_projection: false,
        }
    }
}

/// Trains a small model on synthetic data, then projects its question and
/// sentence markers to two dimensions. `epochs == 0` shows the initial model.
pub fn scatter(setup: &ScatterSetup) -> Result<EmbeddingDump> {
    let data = generate_synthetic(&SynthConfig {
        num_instances: setup.instances,
        m: 6,
        seed: setup.seed,
        ..SynthConfig::default()
    })?;
    let mut cfg = TrainConfig {
        epochs: setup.epochs.max(1),
        seed: setup.seed,
        shared_projection: setup.shared_projection,
        encoder: EncoderShape {
            d: 16,
            layers: 1,
            ..EncoderShape::default()
        },
        ..TrainConfig::default()
    };
    cfg.loss.lambda = setup.lambda;
    cfg.loss.kind = qecontrast::similarity::SimilarityKind::ProjectedCosine { rank: 16 };
    cfg.loss.augment_wrong_type = !setup.shared_projection;
    let (model, vocab) = if setup.epochs == 0 {
        let vocab = qecontrast::corpus::Vocabulary::build(&data.instances);
        let model = qecontrast::trainer::init_model(&cfg, data.types.len(), vocab.len())?;
        (model, vocab)
    } else {
        let out = train(&data, None, &cfg)?;
        (out.model, out.vocab)
    };
    let encoded = prepare(&data.instances, &vocab)?;
    let limit = encoded.len().min(40);
    embedding_dump(&model, &encoded[..limit], &data.types, true)
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

#[wasm_bindgen(js_name = lrCurve)]
pub fn js_lr_curve(
    total_steps: usize,
    warmup_frac: f64,
    peak: f64,
) -> std::result::Result<String, JsError> {
    to_json(&lr_curve(total_steps, warmup_frac, peak).map_err(js_err)?)
}

#[wasm_bindgen(js_name = exploreLoss)]
pub fn js_explore_loss(setup_json: &str) -> std::result::Result<String, JsError> {
    let setup: LossSetup = serde_json::from_str(setup_json).map_err(js_err)?;
    to_json(&explore_loss(&setup).map_err(js_err)?)
}

#[wasm_bindgen(js_name = scatter)]
pub fn js_scatter(setup_json: &str) -> std::result::Result<String, JsError> {
    let setup: ScatterSetup = serde_json::from_str(setup_json).map_err(js_err)?;
    to_json(&scatter(&setup).map_err(js_err)?)
}
