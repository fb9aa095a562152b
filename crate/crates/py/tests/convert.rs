use mmpt_core::harness::StepLog;
use mmpt_core::losses::{LossReport, LossWeights};
use mmpt_core::MmptError;
use mmpt_py::convert::{error_class, points_from_rows, rows_from_points, step_fields, ErrorClass};

#[test]
fn rows_roundtrip() {
    let rows = vec![vec![0.5, -1.0, 2.0], vec![0.0, 0.0, 1e-300]];
    let pts = points_from_rows(&rows).unwrap();
    assert_eq!(pts, vec![[0.5, -1.0, 2.0], [0.0, 0.0, 1e-300]]);
    assert_eq!(rows_from_points(&pts), rows);
}

#[test]
fn wrong_arity_is_rejected() {
    let err = points_from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0]]).unwrap_err();
    assert!(matches!(err, MmptError::InvalidArgument(ref m) if m.contains("row 1")));
    assert!(points_from_rows(&[]).unwrap().is_empty());
}

#[test]
fn step_fields_follow_log_order() {
    let log = StepLog {
        step: 3,
        lr: 1e-4,
        report: LossReport::from_terms(1.0, 2.0, 3.0, 4.0, 5.0, &LossWeights::default()),
    };
    let f = step_fields(&log);
    let names: Vec<&str> = f.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, ["step", "lr", "rec_cd", "rec_bce", "moco", "iml", "cml", "joint"]);
    assert_eq!(f[0].1, 3.0);
    assert_eq!(f[7].1, log.report.joint);
}

#[test]
fn error_classes() {
    assert_eq!(error_class(&MmptError::Parse("x".into())), ErrorClass::Value);
    assert_eq!(error_class(&MmptError::Checkpoint("x".into())), ErrorClass::Os);
    assert_eq!(error_class(&MmptError::Numeric("x".into())), ErrorClass::Arithmetic);
    assert_eq!(error_class(&MmptError::InvalidState("x".into())), ErrorClass::Runtime);
}
