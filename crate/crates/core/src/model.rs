//! Everything that is trained jointly, plus the per-instance forward/backward.

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::corpus::{MarkerSequence, QaInstance};
use crate::encoder::{backward_from_trace, encode_trace, EncoderParams, MarkerReps};
use crate::error::Result;
use crate::loss::{qa_loss_with_grad, qe_loss, qe_loss_with_grad, EvidenceClassifier, LossConfig};
use crate::similarity::{ProjectionBank, SimContext};
use crate::tensor::{prefixed, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub bank: ProjectionBank,
    pub classifier: EvidenceClassifier,
}

impl Model {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            bank: self.bank.zeros_like(),
            classifier: EvidenceClassifier::zeros(self.encoder.d()),
        }
    }
}

impl ParamSet for Model {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        prefixed("encoder", self.encoder.tensors())
            .chain(prefixed("bank", self.bank.tensors()))
            .chain(prefixed("classifier", self.classifier.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let Model {
            encoder,
            bank,
            classifier,
        } = self;
        prefixed("encoder", encoder.tensors_mut())
            .chain(prefixed("bank", bank.tensors_mut()))
            .chain(prefixed("classifier", classifier.tensors_mut()))
            .collect()
    }
}

/// Losses of one instance and, when requested, the gradient of
/// `qa_weight * L_qa + qe_weight * L_qe`.
#[derive(Debug, Clone)]
pub struct InstanceStep {
    pub qa: f64,
    pub qe: Option<f64>,
    pub grad: Option<Model>,
}

/// Runs the encoder once and evaluates both losses. The gradient weights let
/// the caller fold batch averaging and the lambda mixture into a single
/// encoder backward pass; a zero `qe_weight` skips the contrastive backward.
pub fn instance_step(
    model: &Model,
    seq: &MarkerSequence,
    inst: &QaInstance,
    loss_cfg: &LossConfig,
    ctx: &mut SimContext,
    weights: Option<(f64, f64)>,
) -> Result<InstanceStep> {
    let trace = encode_trace(seq, &model.encoder)?;
    let reps = trace.reps();
    let Some((qa_weight, qe_weight)) = weights else {
        let qa = crate::loss::qa_loss(&reps, inst, &model.classifier)?;
        let qe = qe_loss(&reps, inst, &model.bank, loss_cfg, ctx)?;
        return Ok(InstanceStep { qa, qe, grad: None });
    };

    let qa = qa_loss_with_grad(&reps, inst, &model.classifier)?;
    let mut grad = model.zeros_like();
    let mut d_reps: MarkerReps = qa.d_reps;
    d_reps.q *= qa_weight;
    d_reps.s *= qa_weight;
    grad.classifier = qa.d_clf;
    grad.classifier.scale(qa_weight);

    let qe = if qe_weight != 0.0 {
        let out = qe_loss_with_grad(&reps, inst, &model.bank, loss_cfg, ctx)?;
        if let Some(o) = &out {
            d_reps.q.scaled_add(qe_weight, &o.d_reps.q);
            d_reps.s.scaled_add(qe_weight, &o.d_reps.s);
            let mut db = o.d_bank.clone();
            db.scale(qe_weight);
            grad.bank = db;
        }
        out.map(|o| o.loss)
    } else {
        qe_loss(&reps, inst, &model.bank, loss_cfg, ctx)?
    };
    grad.encoder = backward_from_trace(seq, &model.encoder, &trace, &d_reps)?;
    Ok(InstanceStep {
        qa: qa.loss,
        qe,
        grad: Some(grad),
    })
}
