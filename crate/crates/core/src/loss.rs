//! Question-evidence contrastive loss, the evidence-classification loss, and
//! their mixture `(1 - lambda) * L_qa + lambda * L_qe`.
//!
//! For one instance every candidate `(sentence j, projecting type k')` gets a
//! logit `sim_k'(s_j, q) / tau_k'`, and
//!
//! ```text
//! L_qe = -log( sum_{positives} softmax(logits) )
//!      = logsumexp(all) - logsumexp(positives)
//! ```
//!
//! A candidate is positive iff `j` is an evidence sentence and `k'` is the
//! instance's own type. With wrong-type augmentation every sentence is scored
//! under all `K` projections, so evidence seen through a wrong projection is
//! a negative.

use ndarray::{Array1, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::corpus::QaInstance;
use crate::encoder::MarkerReps;
use crate::error::{Error, Result};
use crate::similarity::{
    accumulate_projection, similarity, similarity_backward, ProjectionBank, SimContext,
    SimilarityKind,
};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
#[cfg_attr(feature = "cli", derive(clap::ValueEnum))]
pub enum QeVariant {
    /// `-log` of the summed positive probabilities.
    #[default]
    LogOfSum,
    /// Mean over positives of `-log p`.
    SumOfLogs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub kind: SimilarityKind,
    pub augment_wrong_type: bool,
    pub skip_no_evidence: bool,
    #[serde(default)]
    pub variant: QeVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            kind: SimilarityKind::ProjectedCosine { rank: 32 },
            augment_wrong_type: true,
            skip_no_evidence: true,
            variant: QeVariant::LogOfSum,
        }
    }
}

impl LossConfig {
    /// Similarity used to rank sentences for mAP. With `lambda == 0` the
    /// similarity parameters never receive a gradient, so raw cosine is used.
    pub fn ranking_kind(&self) -> SimilarityKind {
        if self.lambda == 0.0 {
            SimilarityKind::Cosine
        } else {
            self.kind
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidatePair {
    pub sentence: usize,
    pub qtype: usize,
    pub positive: bool,
}

/// Sentence-major, then projecting type.
pub fn enumerate_candidates(
    inst: &QaInstance,
    num_types: usize,
    augment_wrong_type: bool,
) -> Vec<CandidatePair> {
    let own = inst.qtype.id;
    let mut out =
        Vec::with_capacity(inst.num_sentences() * if augment_wrong_type { num_types } else { 1 });
    for j in 0..inst.num_sentences() {
        let evidence = inst.evidence.contains(&j);
        if augment_wrong_type {
            for k in 0..num_types {
                out.push(CandidatePair {
                    sentence: j,
                    qtype: k,
                    positive: evidence && k == own,
                });
            }
        } else {
            out.push(CandidatePair {
                sentence: j,
                qtype: own,
                positive: evidence,
            });
        }
    }
    out
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Loss and its gradient with respect to each logit.
pub fn infonce_from_logits(
    logits: &[f64],
    positive: &[bool],
    variant: QeVariant,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} logits, {} labels",
            logits.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::Contract(
            "contrastive loss needs at least one positive candidate".into(),
        ));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "contrastive logits".into(),
        });
    }
    let lse_all = logsumexp(logits.iter().copied());
    let probs: Vec<f64> = logits.iter().map(|&x| (x - lse_all).exp()).collect();
    match variant {
        QeVariant::LogOfSum => {
            let pos = logits
                .iter()
                .zip(positive)
                .filter(|(_, &p)| p)
                .map(|(&x, _)| x);
            let lse_pos = logsumexp(pos);
            let grad = logits
                .iter()
                .zip(positive)
                .zip(&probs)
                .map(|((&x, &p), &pr)| if p { pr - (x - lse_pos).exp() } else { pr })
                .collect();
            Ok(((lse_all - lse_pos).max(0.0), grad))
        }
        QeVariant::SumOfLogs => {
            let w = 1.0 / n_pos as f64;
            let loss = logits
                .iter()
                .zip(positive)
                .filter(|(_, &p)| p)
                .map(|(&x, _)| lse_all - x)
                .sum::<f64>()
                * w;
            let grad = positive
                .iter()
                .zip(&probs)
                .map(|(&p, &pr)| if p { pr - w } else { pr })
                .collect();
            Ok((loss, grad))
        }
    }
}

/// Per-instance contrastive loss with gradients to the marker vectors and
/// the projection bank.
#[derive(Debug, Clone)]
pub struct QeOutcome {
    pub loss: f64,
    pub d_reps: MarkerReps,
    pub d_bank: ProjectionBank,
}

fn eligible(inst: &QaInstance, cfg: &LossConfig) -> Result<bool> {
    if inst.evidence.is_empty() || !inst.answerable {
        if cfg.skip_no_evidence {
            return Ok(false);
        }
        return Err(Error::Contract(format!(
            "{}: no evidence for the contrastive loss",
            inst.id
        )));
    }
    Ok(true)
}

fn check_reps(reps: &MarkerReps, inst: &QaInstance) -> Result<()> {
    if reps.num_sentences() != inst.num_sentences() {
        return Err(Error::Shape(format!(
            "{} sentence vectors for {} sentences",
            reps.num_sentences(),
            inst.num_sentences()
        )));
    }
    Ok(())
}

/// Contrastive loss value; `None` when the instance is skipped.
pub fn qe_loss(
    reps: &MarkerReps,
    inst: &QaInstance,
    bank: &ProjectionBank,
    cfg: &LossConfig,
    ctx: &mut SimContext,
) -> Result<Option<f64>> {
    if !eligible(inst, cfg)? {
        return Ok(None);
    }
    check_reps(reps, inst)?;
    let candidates = enumerate_candidates(inst, bank.num_types(), cfg.augment_wrong_type);
    let mut logits = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let out = similarity(
            cfg.kind,
            reps.s.row(c.sentence),
            reps.q.view(),
            c.qtype,
            bank,
            ctx,
        )?;
        logits.push(out.value / bank.temperature(c.qtype));
    }
    let positive: Vec<bool> = candidates.iter().map(|c| c.positive).collect();
    Ok(Some(
        infonce_from_logits(&logits, &positive, cfg.variant)?.0,
    ))
}

/// Forward and backward together, sharing dropout masks.
pub fn qe_loss_with_grad(
    reps: &MarkerReps,
    inst: &QaInstance,
    bank: &ProjectionBank,
    cfg: &LossConfig,
    ctx: &mut SimContext,
) -> Result<Option<QeOutcome>> {
    if !eligible(inst, cfg)? {
        return Ok(None);
    }
    check_reps(reps, inst)?;
    let candidates = enumerate_candidates(inst, bank.num_types(), cfg.augment_wrong_type);
    let mut outputs = Vec::with_capacity(candidates.len());
    let mut logits = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let out = similarity(
            cfg.kind,
            reps.s.row(c.sentence),
            reps.q.view(),
            c.qtype,
            bank,
            ctx,
        )?;
        logits.push(out.value / bank.temperature(c.qtype));
        outputs.push(out);
    }
    let positive: Vec<bool> = candidates.iter().map(|c| c.positive).collect();
    let (loss, d_logits) = infonce_from_logits(&logits, &positive, cfg.variant)?;

    let mut d_reps = MarkerReps::zeros(reps.q.len(), reps.num_sentences());
    let mut d_bank = bank.zeros_like();
    for ((c, out), g) in candidates.iter().zip(&outputs).zip(d_logits) {
        if g == 0.0 {
            continue;
        }
        let upstream = g / bank.temperature(c.qtype);
        let sg = similarity_backward(
            cfg.kind,
            reps.s.row(c.sentence),
            reps.q.view(),
            c.qtype,
            bank,
            out,
            upstream,
        )?;
        let mut row = d_reps.s.row_mut(c.sentence);
        row += &sg.ds;
        d_reps.q += &sg.dq;
        if let Some(dp) = &sg.dproj {
            accumulate_projection(&mut d_bank, c.qtype, dp, 1.0);
        }
    }
    Ok(Some(QeOutcome {
        loss,
        d_reps,
        d_bank,
    }))
}

/// Per-sentence logistic evidence classifier, the stand-in for the QA loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceClassifier {
    pub w: Array1<f64>,
    /// Length-1 array so the bias is a tensor like every other parameter.
    pub b: Array1<f64>,
}

impl EvidenceClassifier {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: Array1::zeros(d),
            b: Array1::zeros(1),
        }
    }

    pub fn logits(&self, reps: &MarkerReps) -> Array1<f64> {
        reps.s.dot(&self.w) + self.b[0]
    }

    /// Sentences whose evidence probability exceeds one half.
    pub fn predict(&self, reps: &MarkerReps) -> std::collections::BTreeSet<usize> {
        self.logits(reps)
            .iter()
            .enumerate()
            .filter(|(_, &z)| z > 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

impl ParamSet for EvidenceClassifier {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("w".into(), self.w.view().into_dyn()),
            ("b".into(), self.b.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("w".into(), self.w.view_mut().into_dyn()),
            ("b".into(), self.b.view_mut().into_dyn()),
        ]
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct QaOutcome {
    pub loss: f64,
    pub d_reps: MarkerReps,
    pub d_clf: EvidenceClassifier,
}

/// Mean binary cross-entropy over sentences, label 1 for evidence.
pub fn qa_loss(reps: &MarkerReps, inst: &QaInstance, clf: &EvidenceClassifier) -> Result<f64> {
    check_reps(reps, inst)?;
    let m = inst.num_sentences();
    if m == 0 {
        return Err(Error::MalformedInstance(format!(
            "{}: no sentences",
            inst.id
        )));
    }
    let logits = clf.logits(reps);
    let total: f64 = logits
        .iter()
        .enumerate()
        .map(|(j, &z)| softplus(z) - if inst.evidence.contains(&j) { z } else { 0.0 })
        .sum();
    Ok(total / m as f64)
}

pub fn qa_loss_with_grad(
    reps: &MarkerReps,
    inst: &QaInstance,
    clf: &EvidenceClassifier,
) -> Result<QaOutcome> {
    let loss = qa_loss(reps, inst, clf)?;
    let m = inst.num_sentences() as f64;
    let logits = clf.logits(reps);
    let dz: Array1<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &z)| (sigmoid(z) - if inst.evidence.contains(&j) { 1.0 } else { 0.0 }) / m)
        .collect();
    let mut d_reps = MarkerReps::zeros(reps.q.len(), reps.num_sentences());
    for (mut row, &g) in d_reps.s.rows_mut().into_iter().zip(&dz) {
        row.scaled_add(g, &clf.w);
    }
    let d_clf = EvidenceClassifier {
        w: reps.s.t().dot(&dz),
        b: Array1::from_elem(1, dz.sum()),
    };
    Ok(QaOutcome {
        loss,
        d_reps,
        d_clf,
    })
}

pub fn combined_loss(qa: f64, qe: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok((1.0 - lambda) * qa + lambda * qe)
}
