//! Randomized invariants across the library.

use std::collections::{BTreeSet, HashSet};

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use qecontrast::corpus::{
    assemble_sequence, generate_synthetic, parse_dataset, to_native_jsonl, DatasetFormat,
    QaInstance, QuestionType, SynthConfig, Vocabulary, QUESTION_MARKER_ID, SENTENCE_MARKER_ID,
};
use qecontrast::encoder::{encode, encode_trace, init_params, EncoderConfig, MarkerReps};
use qecontrast::eval::{average_precision, evidence_f1, paired_bootstrap, pca_fit};
use qecontrast::loss::{infonce_from_logits, qe_loss, LossConfig, QeVariant};
use qecontrast::similarity::{init_bank, similarity, BankConfig, SimContext, SimilarityKind};
use qecontrast::trainer::triangular_lr;

fn vec_strategy(d: usize) -> impl Strategy<Value = Array1<f64>> {
    prop::collection::vec(-2.0f64..2.0, d)
        .prop_filter("not near zero", |v| {
            v.iter().map(|x| x * x).sum::<f64>() > 1e-2
        })
        .prop_map(Array1::from)
}

fn bank(
    kind: SimilarityKind,
    d: usize,
    seed: u64,
    dropout: f64,
) -> qecontrast::similarity::ProjectionBank {
    init_bank(&BankConfig {
        kind,
        num_types: 2,
        d,
        temperatures: vec![0.5, 1.0],
        dropout,
        shared: false,
        seed,
    })
    .unwrap()
}

fn eval_sim(
    kind: SimilarityKind,
    s: &Array1<f64>,
    q: &Array1<f64>,
    b: &qecontrast::similarity::ProjectionBank,
) -> f64 {
    similarity(kind, s.view(), q.view(), 1, b, &mut SimContext::eval())
        .unwrap()
        .value
}

fn instance(m: usize, evidence: BTreeSet<usize>, qtype: usize) -> QaInstance {
    QaInstance {
        id: "p".into(),
        question: vec!["q".into()],
        sentences: (0..m).map(|j| vec![format!("t{j}")]).collect(),
        evidence,
        qtype: QuestionType {
            id: qtype,
            label: format!("k{qtype}"),
        },
        answerable: true,
        answer: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cosine_family_is_scale_invariant(
        s in vec_strategy(6),
        q in vec_strategy(6),
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
        seed in 0u64..1000,
    ) {
        for kind in [SimilarityKind::Cosine, SimilarityKind::ProjectedCosine { rank: 3 }] {
            let bk = bank(kind, 6, seed, 0.1);
            let base = eval_sim(kind, &s, &q, &bk);
            let scaled = eval_sim(kind, &(&s * a), &(&q * b), &bk);
            prop_assert!((base - scaled).abs() <= 1e-12, "{kind:?}: {base} vs {scaled}");
            prop_assert!(base.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn bilinear_is_homogeneous_in_s(
        s in vec_strategy(5),
        q in vec_strategy(5),
        a in -10.0f64..10.0,
        seed in 0u64..1000,
    ) {
        let kind = SimilarityKind::Bilinear;
        let bk = bank(kind, 5, seed, 0.0);
        let base = eval_sim(kind, &s, &q, &bk);
        let scaled = eval_sim(kind, &(&s * a), &q, &bk);
        prop_assert!((a * base - scaled).abs() <= 1e-10 * (1.0 + (a * base).abs()));
    }

    #[test]
    fn infonce_is_shift_invariant_and_nonnegative(
        scores in prop::collection::vec(-3.0f64..3.0, 2..20),
        shift in -50.0f64..50.0,
        tau in 0.05f64..2.0,
        pos_mask in prop::collection::vec(any::<bool>(), 20),
        sum_of_logs in any::<bool>(),
    ) {
        let n = scores.len();
        let mut positive: Vec<bool> = pos_mask[..n].to_vec();
        positive[0] = true;
        let variant = if sum_of_logs { QeVariant::SumOfLogs } else { QeVariant::LogOfSum };
        let logits: Vec<f64> = scores.iter().map(|x| x / tau).collect();
        let shifted: Vec<f64> = scores.iter().map(|x| (x + shift) / tau).collect();
        let (l0, _) = infonce_from_logits(&logits, &positive, variant).unwrap();
        let (l1, _) = infonce_from_logits(&shifted, &positive, variant).unwrap();
        prop_assert!(l0 >= 0.0);
        prop_assert!((l0 - l1).abs() <= 1e-10, "{l0} vs {l1}");
    }

    #[test]
    fn infonce_is_monotone_in_each_score(
        scores in prop::collection::vec(-3.0f64..3.0, 3..12),
        bump in 0.01f64..1.0,
        pick in 0usize..12,
    ) {
        let n = scores.len();
        let positive: Vec<bool> = (0..n).map(|j| j % 3 == 0).collect();
        if positive.iter().all(|&p| p) {
            return Ok(());
        }
        let j = pick % n;
        let (base, _) = infonce_from_logits(&scores, &positive, QeVariant::LogOfSum).unwrap();
        let mut up = scores.clone();
        up[j] += bump;
        let (after, _) = infonce_from_logits(&up, &positive, QeVariant::LogOfSum).unwrap();
        if positive[j] {
            prop_assert!(after < base);
        } else {
            prop_assert!(after > base);
        }
    }

    #[test]
    fn cosine_qe_loss_ignores_marker_rescaling(
        seed in 0u64..500,
        q in vec_strategy(6),
        rows in prop::collection::vec(vec_strategy(6), 2..7),
        scales in prop::collection::vec(0.01f64..100.0, 8),
        augment in any::<bool>(),
    ) {
        let (d, m) = (6, rows.len());
        let kind = SimilarityKind::ProjectedCosine { rank: 4 };
        let bk = bank(kind, d, seed, 0.1);
        let mut s = Array2::zeros((m, d));
        for (j, r) in rows.iter().enumerate() {
            s.row_mut(j).assign(r);
        }
        let reps = MarkerReps { q, s };
        let mut scaled = reps.clone();
        scaled.q *= scales[0];
        for j in 0..m {
            let mut row = scaled.s.row_mut(j);
            row *= scales[j + 1];
        }
        let inst = instance(m, [0, m - 1].into_iter().collect(), 1);
        let cfg = LossConfig { kind, augment_wrong_type: augment, ..LossConfig::default() };
        let a = qe_loss(&reps, &inst, &bk, &cfg, &mut SimContext::eval()).unwrap().unwrap();
        let b = qe_loss(&scaled, &inst, &bk, &cfg, &mut SimContext::eval()).unwrap().unwrap();
        prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }

    #[test]
    fn ap_survives_monotone_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 1..15),
        pos in prop::collection::vec(any::<bool>(), 15),
    ) {
        let n = scores.len();
        let mut positives: BTreeSet<usize> = (0..n).filter(|&j| pos[j]).collect();
        positives.insert(n - 1);
        let base = average_precision(&scores, &positives).unwrap();
        let transforms: [fn(f64) -> f64; 3] = [|x| x.exp(), |x| 3.0 * x - 7.0, |x| x * x * x + x];
        for f in transforms {
            let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(average_precision(&t, &positives).unwrap(), base);
        }
    }

    #[test]
    fn f1_swaps_precision_and_recall(
        a in prop::collection::btree_set(0usize..10, 0..10),
        b in prop::collection::btree_set(0usize..10, 0..10),
    ) {
        let ab = evidence_f1(&a, &b);
        let ba = evidence_f1(&b, &a);
        prop_assert_eq!(ab.f1, ba.f1);
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
    }

    #[test]
    fn bootstrap_p_values_cover_both_directions(
        pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..40),
        seed in 0u64..100,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let p = paired_bootstrap(&a, &b, 300, seed).unwrap();
        let q = paired_bootstrap(&b, &a, 300, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(p + q >= 1.0);
    }

    #[test]
    fn pca_components_are_orthonormal(
        raw in prop::collection::vec(-10.0f64..10.0, 5 * 30),
        k in 1usize..=5,
    ) {
        let data = Array2::from_shape_vec((30, 5), raw).unwrap();
        let pca = pca_fit(&data, k).unwrap();
        let gram = pca.components.dot(&pca.components.t());
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[[i, j]] - want).abs() <= 1e-10);
            }
        }
        let total: f64 = pca.explained_ratio.iter().sum();
        prop_assert!(total <= 1.0 + 1e-12);
        prop_assert!(pca.explained_ratio.windows(2).all(|w| w[0] >= w[1] - 1e-15));
    }

    #[test]
    fn attention_rows_are_convex(
        seed in 0u64..200,
        len in 2usize..30,
        layers in 1usize..3,
    ) {
        let params = init_params(&EncoderConfig {
            d: 8,
            layers,
            ffn_mult: 2,
            max_len: 64,
            vocab_size: 20,
            seed,
            marker_key_bias: 0.0,
        })
        .unwrap();
        let inst = QaInstance {
            id: "a".into(),
            question: (0..len).map(|i| format!("w{}", (i * 7 + seed as usize) % 13)).collect(),
            sentences: vec![vec!["x".into()], vec!["y".into(), "z".into()]],
            evidence: [0].into_iter().collect(),
            qtype: QuestionType { id: 0, label: "k".into() },
            answerable: true,
            answer: None,
        };
        let vocab = Vocabulary::build([&inst]);
        let seq = assemble_sequence(&inst, &vocab).unwrap();
        let trace = encode_trace(&seq, &params).unwrap();
        for att in trace.attention() {
            for row in att.rows() {
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }
        prop_assert_eq!(encode(&seq, &params).unwrap(), trace.reps());
    }

    #[test]
    fn native_format_round_trips(
        seed in 0u64..1000,
        m in 1usize..6,
        types in 1usize..4,
    ) {
        let cfg = SynthConfig {
            num_instances: 8,
            m,
            n: m.min(2),
            num_types: types,
            seed,
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let text = to_native_jsonl(&data);
        let back = parse_dataset(text.as_bytes(), DatasetFormat::Native, None).unwrap();
        prop_assert_eq!(&back, &data);

        let vocab = Vocabulary::build(&data.instances);
        for inst in &data.instances {
            let seq = assemble_sequence(inst, &vocab).unwrap();
            let markers = seq
                .tokens
                .iter()
                .filter(|&&t| t == QUESTION_MARKER_ID || t == SENTENCE_MARKER_ID)
                .count();
            prop_assert_eq!(markers, inst.num_sentences() + 1);
        }
    }

    #[test]
    fn distinct_sentence_lists_give_distinct_sequences(
        a in prop::collection::vec(prop::collection::vec(0u8..4, 1..4), 1..5),
        b in prop::collection::vec(prop::collection::vec(0u8..4, 1..4), 1..5),
    ) {
        let make = |sents: &Vec<Vec<u8>>| QaInstance {
            id: "i".into(),
            question: vec!["q".into()],
            sentences: sents.iter().map(|s| s.iter().map(|t| format!("t{t}")).collect()).collect(),
            evidence: BTreeSet::new(),
            qtype: QuestionType { id: 0, label: "k".into() },
            answerable: true,
            answer: None,
        };
        let (ia, ib) = (make(&a), make(&b));
        let vocab = Vocabulary::build([&ia, &ib]);
        let (sa, sb) = (assemble_sequence(&ia, &vocab).unwrap(), assemble_sequence(&ib, &vocab).unwrap());
        if a != b {
            prop_assert!(sa.tokens != sb.tokens || sa.sentence_marker_pos != sb.sentence_marker_pos);
        } else {
            prop_assert_eq!(sa, sb);
        }
    }

    #[test]
    fn lr_curve_area_is_a_triangle(
        total in 20usize..2000,
        warmup in 0.01f64..0.99,
        peak in 1e-4f64..1.0,
    ) {
        let lrs: Vec<f64> = (0..=total).map(|t| triangular_lr(t, total, warmup, peak).unwrap()).collect();
        let area: f64 = lrs.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
        let want = peak * total as f64 / 2.0;
        prop_assert!((area - want).abs() <= 0.01 * want, "{area} vs {want}");
    }

    #[test]
    fn planted_overlap_is_perfectly_rankable(
        seed in 0u64..500,
        overlap in 0.2f64..=1.0,
    ) {
        let data = generate_synthetic(&SynthConfig {
            num_instances: 20,
            overlap_strength: overlap,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        for inst in &data.instances {
            let q: HashSet<&String> = inst.question.iter().collect();
            let scores: Vec<f64> = inst
                .sentences
                .iter()
                .map(|s| s.iter().filter(|t| q.contains(t)).count() as f64)
                .collect();
            prop_assert_eq!(average_precision(&scores, &inst.evidence).unwrap(), 1.0);
        }
    }
}

/// Averaging the masked projection over many draws recovers the eval-mode
/// projection, coordinate by coordinate, within three standard errors.
#[test]
fn dropout_is_unbiased() {
    let d = 6;
    let rank = 8.min(d);
    let p = 0.1;
    let kind = SimilarityKind::ProjectedCosine { rank };
    let bk = bank(kind, d, 3, p);
    let s = Array1::from(vec![0.3, -1.1, 0.8, 0.05, -0.4, 1.7]);
    let q = Array1::from(vec![1.0, 0.2, -0.3, 0.9, 0.4, -0.6]);
    let (ps, _) = bk.project(s.view(), q.view(), 0);
    let draws = 20_000;
    let mut sum = Array1::<f64>::zeros(rank);
    let mut sq = Array1::<f64>::zeros(rank);
    for seed in 0..draws {
        let out = similarity(
            kind,
            s.view(),
            q.view(),
            0,
            &bk,
            &mut SimContext::train(seed),
        )
        .unwrap();
        let masked = out.mask.expect("train mode draws a mask") * &ps;
        sq += &(&masked * &masked);
        sum += &masked;
    }
    let n = draws as f64;
    let mean = &sum / n;
    for i in 0..rank {
        let var = sq[i] / n - mean[i] * mean[i];
        let se = (var / n).sqrt();
        assert!(
            (mean[i] - ps[i]).abs() <= 3.0 * se + 1e-15,
            "coordinate {i}: mean {} vs {} (se {se})",
            mean[i],
            ps[i]
        );
    }
}
