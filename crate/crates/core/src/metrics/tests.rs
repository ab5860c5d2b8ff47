use super::*;
use crate::data::{build_splits, EvalImage, Split, SplitConfig};

fn set(genuine: &[f64], impostor: &[f64]) -> ScoreSet {
    ScoreSet {
        genuine: genuine.to_vec(),
        impostor: impostor.to_vec(),
    }
}

#[test]
fn cosine_examples() {
    let v = [0.3, -1.2, 2.0];
    assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(cosine_similarity(&v, &[0.0; 3]).is_err());
    assert!(cosine_similarity(&v, &[1.0]).is_err());
}

#[test]
fn perfect_separation() {
    let s = set(&[0.9, 0.8], &[0.1, 0.2]);
    let r = compute_metrics(&s).unwrap();
    assert_eq!((r.eer, r.auc, r.fmr100, r.fmr10), (0.0, 1.0, 0.0, 0.0));
    let pts = roc_points(&s).unwrap();
    assert!(pts.iter().any(|p| p.fmr == 0.0 && p.fnmr == 0.0));
}

#[test]
fn worked_example() {
    let r = compute_metrics(&set(&[0.9, 0.7, 0.6, 0.4], &[0.5, 0.3, 0.2, 0.1])).unwrap();
    assert!((r.eer - 0.25).abs() < 1e-12);
    assert!((r.fmr100 - 0.25).abs() < 1e-12);
    assert!((r.gmean - 0.65).abs() < 1e-12);
    assert!((r.imean - 0.275).abs() < 1e-12);
}

#[test]
fn chance_level() {
    let v = [0.1, 0.35, 0.2, 0.9, 0.5, 0.65];
    let r = compute_metrics(&set(&v, &v)).unwrap();
    assert!((r.eer - 0.5).abs() <= 1e-9, "{}", r.eer);
    assert!((r.auc - 0.5).abs() <= 1e-12);
}

#[test]
fn roc_shape() {
    let s = set(&[0.9, 0.7, 0.7, 0.4], &[0.5, 0.3, 0.7, 0.1]);
    let pts = roc_points(&s).unwrap();
    assert!(pts.len() <= 6 + 2);
    assert_eq!(pts.first().unwrap().fmr, 1.0);
    assert_eq!(pts.last().unwrap().fmr, 0.0);
    assert!(pts.windows(2).all(|w| w[1].fmr <= w[0].fmr && w[1].fnmr >= w[0].fnmr));
    let r = compute_metrics(&s).unwrap();
    assert!((roc_auc(&pts) - r.auc).abs() <= 1e-12);
    assert!(r.fmr100 >= r.fmr10);
}

#[test]
fn empty_or_nan_scores_are_rejected() {
    assert!(compute_metrics(&set(&[], &[0.1])).is_err());
    assert!(compute_metrics(&set(&[0.1], &[])).is_err());
    assert!(compute_metrics(&set(&[f64::NAN], &[0.1])).is_err());
}

#[test]
fn g9_formatting() {
    assert_eq!(format_g9(0.0), "0");
    assert_eq!(format_g9(1.0), "1");
    assert_eq!(format_g9(0.25), "0.25");
    assert_eq!(format_g9(1.0 / 3.0), "0.333333333");
    assert_eq!(format_g9(-2.0 / 3.0), "-0.666666667");
    assert_eq!(format_g9(123456789.0), "123456789");
    assert_eq!(format_g9(1234567890.0), "1.23456789e+09");
    assert_eq!(format_g9(0.0001), "0.0001");
    assert_eq!(format_g9(0.00001234), "1.234e-05");
    assert_eq!(format_g9(f64::INFINITY), "inf");
}

#[test]
fn csv_layout() {
    let pts = roc_points(&set(&[0.9], &[0.1])).unwrap();
    let csv = roc_csv(&pts);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "threshold,fmr,fnmr");
    assert_eq!(lines[1], "0.1,1,0");
    assert_eq!(lines.last().unwrap(), &"inf,0,1");
}

#[test]
fn json_report_has_all_fields() {
    let s = set(&[0.9, 0.8], &[0.1, 0.2]);
    let r = compute_metrics(&s).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&report_json(&r, "U-M", &s, &[("checkpoint", "a".into())])).unwrap();
    for k in ["eer", "auc", "fmr100", "fmr10", "gmean", "imean", "threshold_at_eer"] {
        assert!(doc[k].is_number(), "{k}");
    }
    assert_eq!(doc["protocol"], "U-M");
    assert_eq!(doc["genuine_pairs"], 2);
    assert_eq!(doc["checkpoint"], "a");
}

fn image(name: &str, id: u64, masked: bool, role: Role) -> EvalImage {
    EvalImage {
        name: name.into(),
        identity_id: id,
        masked,
        role,
        session: if role == Role::Reference { 1 } else { 2 },
        image: vec![0.0; 1024],
    }
}

#[test]
fn protocol_counting() {
    let set = EvalSet {
        split: Split::Test,
        images: vec![
            image("r0", 0, false, Role::Reference),
            image("r1", 1, false, Role::Reference),
            image("p0", 0, true, Role::Probe),
            image("p1", 1, true, Role::Probe),
            image("u0", 0, false, Role::Probe),
        ],
    };
    let proto = VerificationProtocol::build(&set, ProtocolMode::UnmaskedMasked);
    assert_eq!(proto.pair_count(), 4);
    let mut store = EmbeddingStore::new();
    store.insert("r0".into(), vec![1.0, 0.0]);
    store.insert("r1".into(), vec![0.0, 1.0]);
    store.insert("p0".into(), vec![2.0, 0.0]);
    let err = score_protocol(&store, &proto).unwrap_err();
    assert!(err.to_string().contains("p1"), "{err}");
    store.insert("p1".into(), vec![0.0, 3.0]);
    let s = score_protocol(&store, &proto).unwrap();
    assert_eq!(s.genuine, vec![1.0, 1.0]);
    assert_eq!(s.impostor, vec![0.0, 0.0]);
}

#[test]
fn toy_protocol_sizes() {
    let splits = build_splits(&SplitConfig::default(), 5).unwrap();
    let um = VerificationProtocol::build(&splits.test, ProtocolMode::UnmaskedMasked);
    let mm = VerificationProtocol::build(&splits.test, ProtocolMode::MaskedMasked);
    // 8 identities: 16 unmasked and 32 masked references, 64 masked probes.
    assert_eq!((um.references.len(), um.probes.len()), (16, 64));
    assert_eq!((mm.references.len(), mm.probes.len()), (32, 64));
    assert_eq!(um.genuine_count(), 8 * 2 * 8);
    assert_eq!(mm.genuine_count(), 8 * 4 * 8);
    assert_eq!(um.pair_count(), 1024);
}

#[test]
fn mask_roc_symmetry_and_errors() {
    let logits = [[0.1, 0.5], [0.2, -0.3], [1.0, 1.4], [0.0, 0.1], [0.3, 0.2]];
    let labels = [true, false, true, false, true];
    let a = mask_roc_from_logits(&logits, &labels).unwrap();
    let inverted: Vec<bool> = labels.iter().map(|l| !l).collect();
    let b = mask_roc_from_logits(&logits, &inverted).unwrap();
    assert!((a.auc + b.auc - 1.0).abs() < 1e-12);
    assert!(mask_roc_from_logits(&logits, &[true; 5]).is_err());
    assert!(mask_roc_from_logits(&logits, &[true]).is_err());
}
