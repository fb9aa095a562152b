//! Plain-Rust conversions shared by the Python wrappers.

use mmpt_core::geometry::Point;
use mmpt_core::harness::StepLog;
use mmpt_core::MmptError;

/// Rows of exactly three finite coordinates.
pub fn points_from_rows(rows: &[Vec<f64>]) -> Result<Vec<Point>, MmptError> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| match r.as_slice() {
            [x, y, z] => Ok([*x, *y, *z]),
            _ => Err(MmptError::InvalidArgument(format!(
                "row {i} has {} coordinates, expected 3",
                r.len()
            ))),
        })
        .collect()
}

pub fn rows_from_points(points: &[Point]) -> Vec<Vec<f64>> {
    points.iter().map(|p| p.to_vec()).collect()
}

/// Name/value pairs of a training step record, in log order.
pub fn step_fields(log: &StepLog) -> [(&'static str, f64); 8] {
    let r = &log.report;
    [
        ("step", log.step as f64),
        ("lr", log.lr),
        ("rec_cd", r.rec_cd),
        ("rec_bce", r.rec_bce),
        ("moco", r.moco),
        ("iml", r.iml),
        ("cml", r.cml),
        ("joint", r.joint),
    ]
}

/// Python exception class used for each error kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Value,
    Os,
    Arithmetic,
    Runtime,
}

pub fn error_class(e: &MmptError) -> ErrorClass {
    match e {
        MmptError::InvalidCloud(_) | MmptError::InvalidArgument(_) | MmptError::Shape(_) | MmptError::Parse(_) => ErrorClass::Value,
        MmptError::Io(_) | MmptError::Checkpoint(_) => ErrorClass::Os,
        MmptError::Numeric(_) => ErrorClass::Arithmetic,
        MmptError::InvalidState(_) => ErrorClass::Runtime,
    }
}
