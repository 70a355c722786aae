//! Finite-difference helpers shared by the gradient and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array1;
use qecontrast::corpus::{assemble_sequence, MarkerSequence, QaInstance, QuestionType, Vocabulary};
use qecontrast::encoder::{init_params, EncoderConfig};
use qecontrast::loss::{EvidenceClassifier, LossConfig, QeVariant};
use qecontrast::model::{instance_step, Model};
use qecontrast::similarity::{
    init_bank, similarity, similarity_backward, BankConfig, SimContext, SimilarityKind,
};
use qecontrast::tensor::ParamSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

pub const KINDS: [SimilarityKind; 4] = [
    SimilarityKind::Dot,
    SimilarityKind::Cosine,
    SimilarityKind::Bilinear,
    SimilarityKind::ProjectedCosine { rank: 4 },
];

/// Relative error with the denominator floored at 1e-3, below which
/// differencing noise dominates.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))
}

/// Worst relative error of d f / d p over every coordinate of `p`.
pub fn check_params<P: ParamSet + Clone>(
    p: &P,
    analytic: &P,
    f: impl Fn(&P) -> f64,
) -> (f64, String) {
    let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
    let grads = analytic.tensors();
    let mut worst = (0.0, String::new());
    for (t, name) in names.iter().enumerate() {
        let len = grads[t].1.len();
        for i in 0..len {
            let bump = |delta: f64| {
                let mut q = p.clone();
                {
                    let mut ts = q.tensors_mut();
                    let x = ts[t].1.iter_mut().nth(i).unwrap();
                    *x += delta;
                }
                f(&q)
            };
            let numeric = (bump(H) - bump(-H)) / (2.0 * H);
            let a = *grads[t].1.iter().nth(i).unwrap();
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {a} numeric {numeric}"));
            }
        }
    }
    worst
}

/// Worst error of one similarity's gradients (inputs and projection) in
/// train mode with dropout.
pub fn similarity_worst(kind: SimilarityKind, seed: u64) -> (f64, String) {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = init_bank(&BankConfig {
        kind,
        num_types: 2,
        d,
        temperatures: vec![0.5, 1.0],
        dropout: 0.3,
        shared: false,
        seed,
    })
    .unwrap();
    let s = random_vec(&mut rng, d);
    let q = random_vec(&mut rng, d);
    let k = (seed % 2) as usize;
    let ctx = SimContext::train(seed + 100);
    let fwd = similarity(kind, s.view(), q.view(), k, &bank, &mut ctx.clone()).unwrap();
    let g = similarity_backward(kind, s.view(), q.view(), k, &bank, &fwd, 1.0).unwrap();
    let value = |s: &Array1<f64>, q: &Array1<f64>, b: &_| {
        similarity(kind, s.view(), q.view(), k, b, &mut ctx.clone())
            .unwrap()
            .value
    };
    let mut worst = (0.0, String::new());
    for i in 0..d {
        let mut e = Array1::zeros(d);
        e[i] = H;
        let ns = (value(&(&s + &e), &q, &bank) - value(&(&s - &e), &q, &bank)) / (2.0 * H);
        let nq = (value(&s, &(&q + &e), &bank) - value(&s, &(&q - &e), &bank)) / (2.0 * H);
        for (name, a, n) in [("ds", g.ds[i], ns), ("dq", g.dq[i], nq)] {
            let err = rel_err(a, n);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}] analytic {a} numeric {n}"));
            }
        }
    }
    if kind.has_projections() {
        let mut analytic = bank.zeros_like();
        analytic.projections[k] = g.dproj.clone().unwrap();
        let (err, at) = check_params(&bank, &analytic, |b| value(&s, &q, b));
        if err > worst.0 {
            worst = (err, at);
        }
    }
    worst
}

fn toy_instance(rng: &mut ChaCha8Rng, qtype: usize) -> QaInstance {
    let word = |rng: &mut ChaCha8Rng| format!("t{}", rng.random_range(0..12));
    let question = (0..3).map(|_| word(rng)).collect();
    let sentences = (0..4)
        .map(|_| (0..3).map(|_| word(rng)).collect())
        .collect();
    let evidence: BTreeSet<usize> = [1, 3].into_iter().collect();
    QaInstance {
        id: "g".into(),
        question,
        sentences,
        evidence,
        qtype: QuestionType {
            id: qtype,
            label: format!("k{qtype}"),
        },
        answerable: true,
        answer: None,
    }
}

fn toy_model(
    kind: SimilarityKind,
    layers: usize,
    vocab: &Vocabulary,
    seed: u64,
    shared: bool,
) -> Model {
    let d = 8;
    let encoder = init_params(&EncoderConfig {
        d,
        layers,
        ffn_mult: 2,
        max_len: 64,
        vocab_size: vocab.len(),
        seed,
        marker_key_bias: 0.0,
    })
    .unwrap();
    let bank = init_bank(&BankConfig {
        kind,
        num_types: 3,
        d,
        temperatures: vec![0.3, 0.6, 1.0],
        dropout: 0.2,
        shared,
        seed: seed + 1,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let classifier = EvidenceClassifier {
        w: random_vec(&mut rng, d) * 0.5,
        b: Array1::from(vec![0.1]),
    };
    Model {
        encoder,
        bank,
        classifier,
    }
}

/// Worst error of the full model gradient (encoder, projections,
/// classifier) for `(1 - lambda) L_qa + lambda L_qe` on a toy instance.
pub fn end_to_end(
    kind: SimilarityKind,
    layers: usize,
    seed: u64,
    lambda: f64,
    variant: QeVariant,
    shared: bool,
) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = toy_instance(&mut rng, (seed % 3) as usize);
    let vocab = Vocabulary::build([&inst]);
    let seq: MarkerSequence = assemble_sequence(&inst, &vocab).unwrap();
    let kind = match kind {
        SimilarityKind::ProjectedCosine { .. } => SimilarityKind::ProjectedCosine { rank: 6 },
        k => k,
    };
    let model = toy_model(kind, layers, &vocab, seed, shared);
    let cfg = LossConfig {
        lambda,
        kind,
        augment_wrong_type: true,
        skip_no_evidence: true,
        variant,
    };
    let weights = Some((1.0 - lambda, lambda));
    let ctx = SimContext::train(seed + 7);
    let step = instance_step(&model, &seq, &inst, &cfg, &mut ctx.clone(), weights).unwrap();
    let objective = |m: &Model| {
        let r = instance_step(m, &seq, &inst, &cfg, &mut ctx.clone(), None).unwrap();
        (1.0 - lambda) * r.qa + lambda * r.qe.unwrap()
    };
    check_params(&model, step.grad.as_ref().unwrap(), objective)
}
