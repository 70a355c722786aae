//! Ranking and evidence metrics, significance testing, and embedding export.

mod bootstrap;
mod embed;
mod pca;
mod ranking;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use bootstrap::paired_bootstrap;
pub use embed::{embedding_dump, EmbeddingDump, EmbeddingRow, Role};
pub use pca::{pca_embed, pca_fit, Pca};
pub use ranking::{average_precision, evidence_f1, rank_order, RankingCase, SetScores};

use crate::corpus::{Encoded, QuestionType, QuestionTypes};
use crate::encoder::{encode, EncoderParams};
use crate::error::Result;
use crate::loss::{qa_loss, qe_loss, LossConfig};
use crate::model::Model;
use crate::similarity::{similarity, ProjectionBank, SimContext, SimilarityKind};

/// Eval-mode similarity of every sentence to the question under the
/// instance's own type.
pub fn sentence_scores(
    encoder: &EncoderParams,
    bank: &ProjectionBank,
    kind: SimilarityKind,
    example: &Encoded,
) -> Result<Vec<f64>> {
    let reps = encode(&example.sequence, encoder)?;
    scores_from_reps(&reps, bank, kind, example.instance.qtype.id)
}

fn scores_from_reps(
    reps: &crate::encoder::MarkerReps,
    bank: &ProjectionBank,
    kind: SimilarityKind,
    k: usize,
) -> Result<Vec<f64>> {
    let mut ctx = SimContext::eval();
    reps.s
        .rows()
        .into_iter()
        .map(|s| similarity(kind, s, reps.q.view(), k, bank, &mut ctx).map(|o| o.value))
        .collect()
}

/// Mean average precision per question type; `None` for a type with no
/// rankable instance. Instances without evidence are skipped.
pub fn map_per_type(
    encoder: &EncoderParams,
    bank: &ProjectionBank,
    kind: SimilarityKind,
    data: &[Encoded],
    types: &QuestionTypes,
) -> Result<Vec<(QuestionType, Option<f64>)>> {
    let aps = crate::par::map_indexed(data, |_, ex| -> Result<Option<f64>> {
        if ex.instance.evidence.is_empty() {
            return Ok(None);
        }
        let scores = sentence_scores(encoder, bank, kind, ex)?;
        average_precision(&scores, &ex.instance.evidence).map(Some)
    });
    let mut sums = vec![(0.0, 0usize); types.len()];
    for (ex, ap) in data.iter().zip(aps) {
        if let Some(ap) = ap? {
            let slot = &mut sums[ex.instance.qtype.id];
            slot.0 += ap;
            slot.1 += 1;
        }
    }
    Ok(types
        .iter()
        .zip(sums)
        .map(|(t, (sum, n))| (t, (n > 0).then(|| sum / n as f64)))
        .collect())
}

/// Per-instance evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEval {
    pub id: String,
    pub qtype: usize,
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss_qa: f64,
    pub loss_qe: Option<f64>,
}

/// Scores every instance: AP under `map_kind`, evidence F1 from the
/// classifier, and both losses in eval mode.
pub fn evaluate_instances(
    model: &Model,
    data: &[Encoded],
    loss_cfg: &LossConfig,
    map_kind: SimilarityKind,
) -> Result<Vec<InstanceEval>> {
    crate::par::map_indexed(data, |_, ex| {
        let inst = &ex.instance;
        let reps = encode(&ex.sequence, &model.encoder)?;
        let ap = if inst.evidence.is_empty() {
            None
        } else {
            let scores = scores_from_reps(&reps, &model.bank, map_kind, inst.qtype.id)?;
            Some(average_precision(&scores, &inst.evidence)?)
        };
        let predicted = model.classifier.predict(&reps);
        let set = evidence_f1(&predicted, &inst.evidence);
        Ok(InstanceEval {
            id: inst.id.clone(),
            qtype: inst.qtype.id,
            ap,
            precision: set.precision,
            recall: set.recall,
            f1: set.f1,
            loss_qa: qa_loss(&reps, inst, &model.classifier)?,
            loss_qe: qe_loss(&reps, inst, &model.bank, loss_cfg, &mut SimContext::eval())?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub label: String,
    pub instances: usize,
    pub map: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_type: Vec<GroupReport>,
    pub all: GroupReport,
    pub loss_qa: f64,
    /// Mean over instances where the contrastive loss applies.
    pub loss_qe: Option<f64>,
}

fn group(label: &str, evals: &[&InstanceEval]) -> GroupReport {
    let n = evals.len();
    let mean = |f: &dyn Fn(&InstanceEval) -> f64| {
        if n == 0 {
            0.0
        } else {
            evals.iter().map(|e| f(e)).sum::<f64>() / n as f64
        }
    };
    let aps: Vec<f64> = evals.iter().filter_map(|e| e.ap).collect();
    GroupReport {
        label: label.to_string(),
        instances: n,
        map: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
        precision: mean(&|e| e.precision),
        recall: mean(&|e| e.recall),
        f1: mean(&|e| e.f1),
    }
}

pub fn summarize(types: &QuestionTypes, evals: &[InstanceEval]) -> EvalReport {
    let per_type = types
        .iter()
        .map(|t| {
            let members: Vec<&InstanceEval> = evals.iter().filter(|e| e.qtype == t.id).collect();
            group(&t.label, &members)
        })
        .collect();
    let all: Vec<&InstanceEval> = evals.iter().collect();
    let qe: Vec<f64> = evals.iter().filter_map(|e| e.loss_qe).collect();
    EvalReport {
        per_type,
        all: group("all", &all),
        loss_qa: if evals.is_empty() {
            0.0
        } else {
            evals.iter().map(|e| e.loss_qa).sum::<f64>() / evals.len() as f64
        },
        loss_qe: (!qe.is_empty()).then(|| qe.iter().sum::<f64>() / qe.len() as f64),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// `qtype,instances,map,evidence_precision,evidence_recall,evidence_f1`,
    /// one row per type present plus an `all` row.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("qtype,instances,map,evidence_precision,evidence_recall,evidence_f1\n");
        for g in self
            .per_type
            .iter()
            .filter(|g| g.instances > 0)
            .chain(std::iter::once(&self.all))
        {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                g.label,
                g.instances,
                opt(g.map),
                g.precision,
                g.recall,
                g.f1
            );
        }
        out
    }
}

/// `id,qtype,ap,precision,recall,f1,loss_qa,loss_qe` per instance; the input
/// format for paired comparisons.
pub fn predictions_csv(types: &QuestionTypes, evals: &[InstanceEval]) -> String {
    let mut out = String::from("id,qtype,ap,precision,recall,f1,loss_qa,loss_qe\n");
    for e in evals {
        let label = types.get(e.qtype).map(|t| t.label).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.id,
            label,
            opt(e.ap),
            e.precision,
            e.recall,
            e.f1,
            e.loss_qa,
            opt(e.loss_qe)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(qtype: usize, ap: Option<f64>, f1: f64) -> InstanceEval {
        InstanceEval {
            id: "x".into(),
            qtype,
            ap,
            precision: f1,
            recall: f1,
            f1,
            loss_qa: 0.5,
            loss_qe: ap.map(|_| 1.0),
        }
    }

    #[test]
    fn summary_groups_by_type_and_drops_absent() {
        let types = QuestionTypes::new(["a", "b", "c"]).unwrap();
        let evals = vec![
            ev(0, Some(1.0), 1.0),
            ev(0, Some(0.5), 0.0),
            ev(2, None, 1.0),
        ];
        let r = summarize(&types, &evals);
        assert_eq!(r.per_type[0].map, Some(0.75));
        assert_eq!(r.per_type[1].instances, 0);
        assert_eq!(r.per_type[2].map, None);
        assert_eq!(r.all.map, Some(0.75));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 2 + 1);
        assert!(csv.lines().last().unwrap().starts_with("all,3,0.75,"));
    }
}
