use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::GroupedDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FindingKind {
    EmptyMask,
    FullMask,
    ShapeMismatch,
    DuplicateStem,
}

impl FindingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::EmptyMask => "empty-mask",
            Self::FullMask => "full-mask",
            Self::ShapeMismatch => "shape-mismatch",
            Self::DuplicateStem => "duplicate-stem",
        }
    }
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub group: String,
    pub stem: String,
}

/// Structural annotation problems. Whether a mask marks the right object
/// class is not checked.
pub fn validate_dataset(ds: &GroupedDataset) -> Vec<Finding> {
    let mut findings = Vec::new();
    for g in &ds.groups {
        let mut seen = BTreeSet::new();
        for s in &g.samples {
            let mut push = |kind| {
                findings.push(Finding {
                    kind,
                    group: g.name.clone(),
                    stem: s.stem.clone(),
                })
            };
            if !seen.insert(s.stem.as_str()) {
                push(FindingKind::DuplicateStem);
            }
            if (s.mask.height(), s.mask.width()) != (s.image.height(), s.image.width()) {
                push(FindingKind::ShapeMismatch);
            }
            if s.mask.is_empty() {
                push(FindingKind::EmptyMask);
            } else if s.mask.is_full() {
                push(FindingKind::FullMask);
            }
        }
    }
    findings
}
