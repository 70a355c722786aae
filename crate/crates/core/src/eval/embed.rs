use std::fmt::Write as _;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::pca::pca_embed;
use crate::corpus::{Encoded, QuestionTypes};
use crate::encoder::encode;
use crate::error::Result;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Question,
    PositiveEvidence,
    /// Distractors, and evidence seen through a wrong-type projection.
    WrongEvidence,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Question => "question",
            Role::PositiveEvidence => "positive-evidence",
            Role::WrongEvidence => "wrong-evidence",
        }
    }

    fn color(self) -> &'static str {
        match self {
            Role::Question => "#1f5fbf",
            Role::PositiveEvidence => "#2e9e44",
            Role::WrongEvidence => "#c8362d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub role: Role,
    pub qtype: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub rows: Vec<EmbeddingRow>,
    pub explained_ratio: Vec<f64>,
    /// Mean eval-mode cosine between question and evidence, correct-type projection.
    pub mean_cos_positive: f64,
    /// Same for distractor sentences.
    pub mean_cos_distractor: f64,
    pub warning: Option<String>,
}

fn cos(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

/// Projects question and sentence markers into each instance's type space
/// (eval mode), optionally adds evidence projected with every wrong type,
/// and reduces everything to two principal components.
pub fn embedding_dump(
    model: &Model,
    data: &[Encoded],
    types: &QuestionTypes,
    wrong_type_negatives: bool,
) -> Result<EmbeddingDump> {
    let num_types = model.bank.num_types();
    let per_instance = crate::par::map_indexed(data, |_, ex| -> Result<_> {
        let inst = &ex.instance;
        let k = inst.qtype.id;
        let reps = encode(&ex.sequence, &model.encoder)?;
        let mut rows: Vec<(Role, usize, Array1<f64>)> = Vec::new();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        let mut question = None;
        for (j, s) in reps.s.rows().into_iter().enumerate() {
            let (sk, qk) = model.bank.project(s, reps.q.view(), k);
            let c = cos(&sk, &qk);
            let role = if inst.evidence.contains(&j) {
                pos.push(c);
                Role::PositiveEvidence
            } else {
                neg.push(c);
                Role::WrongEvidence
            };
            rows.push((role, k, sk));
            question.get_or_insert(qk);
            if wrong_type_negatives && inst.evidence.contains(&j) && !model.bank.shared {
                for other in (0..num_types).filter(|&o| o != k) {
                    let (so, _) = model.bank.project(s, reps.q.view(), other);
                    rows.push((Role::WrongEvidence, other, so));
                }
            }
        }
        if let Some(q) = question {
            rows.insert(0, (Role::Question, k, q));
        }
        Ok((rows, pos, neg))
    });

    let mut vectors = Vec::new();
    let mut meta = Vec::new();
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for item in per_instance {
        let (rows, pos, neg) = item?;
        pos_sum += pos.iter().sum::<f64>();
        pos_n += pos.len();
        neg_sum += neg.iter().sum::<f64>();
        neg_n += neg.len();
        for (role, k, v) in rows {
            meta.push((role, k));
            vectors.push(v);
        }
    }
    let pca = pca_embed(&vectors, 2.min(vectors.first().map_or(2, |v| v.len())))?;
    let rows = meta
        .into_iter()
        .zip(pca.coords.rows())
        .map(|((role, k), c)| EmbeddingRow {
            role,
            qtype: types
                .get(k)
                .map(|t| t.label)
                .unwrap_or_else(|| k.to_string()),
            x: c[0],
            y: if c.len() > 1 { c[1] } else { 0.0 },
        })
        .collect();
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(EmbeddingDump {
        rows,
        explained_ratio: pca.explained_ratio,
        mean_cos_positive: mean(pos_sum, pos_n),
        mean_cos_distractor: mean(neg_sum, neg_n),
        warning: pca.warning,
    })
}

impl EmbeddingDump {
    /// Tab-separated `role, qtype, x, y` with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("role\tqtype\tx\ty\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.role.name(), r.qtype, r.x, r.y);
        }
        out
    }

    /// Sidecar listing the explained-variance ratios and cosine summaries.
    pub fn sidecar(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.explained_ratio.iter().enumerate() {
            let _ = writeln!(out, "explained_variance_ratio_pc{}\t{}", i + 1, r);
        }
        let _ = writeln!(out, "mean_cos_positive\t{}", self.mean_cos_positive);
        let _ = writeln!(out, "mean_cos_distractor\t{}", self.mean_cos_distractor);
        if let Some(w) = &self.warning {
            let _ = writeln!(out, "warning\t{w}");
        }
        out
    }

    /// Scatter plot colored by role.
    pub fn to_svg(&self) -> String {
        const SIZE: f64 = 640.0;
        const PAD: f64 = 40.0;
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for r in &self.rows {
            x0 = x0.min(r.x);
            x1 = x1.max(r.x);
            y0 = y0.min(r.y);
            y1 = y1.max(r.y);
        }
        let span = (x1 - x0).max(y1 - y0).max(1e-12);
        let sx = |x: f64| PAD + (x - x0) / span * (SIZE - 2.0 * PAD);
        let sy = |y: f64| SIZE - PAD - (y - y0) / span * (SIZE - 2.0 * PAD);
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        // wrong evidence underneath so the smaller classes stay visible
        for role in [Role::WrongEvidence, Role::PositiveEvidence, Role::Question] {
            let _ = writeln!(out, "<g fill=\"{}\" fill-opacity=\"0.55\">", role.color());
            for r in self.rows.iter().filter(|r| r.role == role) {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.2\"/>",
                    sx(r.x),
                    sy(r.y)
                );
            }
            out.push_str("</g>\n");
        }
        for (i, role) in [Role::Question, Role::PositiveEvidence, Role::WrongEvidence]
            .iter()
            .enumerate()
        {
            let y = 18.0 + 16.0 * i as f64;
            let _ = writeln!(
                out,
                "<circle cx=\"16\" cy=\"{y}\" r=\"5\" fill=\"{}\"/><text x=\"26\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
                role.color(),
                y + 4.0,
                role.name()
            );
        }
        out.push_str("</svg>\n");
        out
    }
}
