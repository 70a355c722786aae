use qecontrast_web::{explore_loss, lr_curve, scatter, LossSetup, ScatterSetup};

#[test]
fn lr_curve_is_a_triangle() {
    let c = lr_curve(40, 0.25, 1e-3).unwrap();
    assert_eq!(c.rates.len(), 41);
    assert_eq!(c.warmup_steps, 10);
    assert_eq!(c.rates[0], 0.0);
    assert_eq!(c.rates[10], 1e-3);
    assert_eq!(c.rates[40], 0.0);
    let peak = c.rates.iter().cloned().fold(0.0, f64::max);
    assert_eq!(peak, 1e-3);
    assert!(lr_curve(0, 0.1, 1e-3).is_err());
}

#[test]
fn softmax_mass_accounts_for_every_candidate() {
    let s = LossSetup::default();
    let v = explore_loss(&s).unwrap();
    let (m, n, k) = (s.sentences as f64, s.evidence as f64, s.types as f64);
    let total =
        n * v.mass_evidence + (m - n) * k * v.mass_distractor + n * (k - 1.0) * v.mass_wrong_type;
    assert!((total - 1.0).abs() < 1e-12, "{total}");
    // Log-of-sum loss is minus the log of the evidence mass.
    assert!((v.loss + (n * v.mass_evidence).ln()).abs() < 1e-12);
    assert!((v.uniform_loss - (k * m / n).ln()).abs() < 1e-12);
}

#[test]
fn without_augmentation_the_set_has_m_candidates() {
    let s = LossSetup {
        augment: false,
        ..LossSetup::default()
    };
    let v = explore_loss(&s).unwrap();
    assert_eq!(v.mass_wrong_type, 0.0);
    assert!((v.uniform_loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn temperature_sweep_is_log_spaced_and_finite() {
    let v = explore_loss(&LossSetup::default()).unwrap();
    assert_eq!(v.sweep.len(), 61);
    assert!((v.sweep[0].0 - 0.02).abs() < 1e-15);
    assert!((v.sweep[60].0 - 5.0).abs() < 1e-12);
    assert!(v.sweep.iter().all(|(_, l)| l.is_finite() && *l >= 0.0));
    // Evidence outscores everything, so a colder softmax lowers the loss.
    assert!(v.sweep[0].1 < v.sweep[60].1);
}

#[test]
fn bad_loss_setups_are_rejected() {
    for s in [
        LossSetup {
            evidence: 0,
            ..LossSetup::default()
        },
        LossSetup {
            evidence: 9,
            ..LossSetup::default()
        },
        LossSetup {
            temperature: 0.0,
            ..LossSetup::default()
        },
    ] {
        assert!(explore_loss(&s).is_err(), "{s:?}");
    }
}

#[test]
fn scatter_is_deterministic() {
    let s = ScatterSetup {
        instances: 30,
        epochs: 1,
        ..ScatterSetup::default()
    };
    let a = scatter(&s).unwrap();
    let b = scatter(&s).unwrap();
    assert_eq!(a, b);
    // 30 questions, 6 sentences each, 2 evidence times 2 wrong types.
    assert_eq!(a.rows.len(), 30 * (1 + 6 + 4));
    assert!(a.rows.iter().all(|r| r.x.is_finite() && r.y.is_finite()));
}

#[test]
fn untrained_scatter_skips_training() {
    let s = ScatterSetup {
        instances: 10,
        epochs: 0,
        ..ScatterSetup::default()
    };
    assert_eq!(scatter(&s).unwrap().rows.len(), 10 * 11);
}
