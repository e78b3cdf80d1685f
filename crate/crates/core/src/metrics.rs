//! The eight slide-quality metrics and the vector that carries them.
//!
//! Every metric lives in `[0, 1]` with the convention that lower values
//! mean a more severe quality problem. A metric whose inputs were absent
//! or degenerate is *not evaluable*; consumers impute 1.0 and carry a
//! warning flag instead of failing the slide.

use crate::num::Real;
use serde::{Deserialize, Serialize};

pub const METRIC_COUNT: usize = 8;

/// Identity of one quality metric. The wire names `q1`..`q8` are part of
/// the score-model file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    GridArtifact,
    Focus,
    Marker,
    Bubble,
    Stain,
    CellCount,
    CellMass,
    Neutrophil,
}

impl Metric {
    pub const ALL: [Metric; METRIC_COUNT] = [
        Metric::GridArtifact,
        Metric::Focus,
        Metric::Marker,
        Metric::Bubble,
        Metric::Stain,
        Metric::CellCount,
        Metric::CellMass,
        Metric::Neutrophil,
    ];

    /// Position in the feature vector (0-based).
    pub fn index(self) -> usize {
        Metric::ALL.iter().position(|m| *m == self).unwrap()
    }

    /// Feature name used in model files and reports: `q1`..`q8`.
    pub fn feature_name(self) -> &'static str {
        ["q1", "q2", "q3", "q4", "q5", "q6", "q7", "q8"][self.index()]
    }

    pub fn from_feature_name(name: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.feature_name() == name)
    }

    /// Whether a low value points at the scanning process (vs slide
    /// preparation). Grid artifacts and defocus come from the scanner;
    /// everything else is on the slide itself.
    pub fn is_scanning_fault(self) -> bool {
        matches!(self, Metric::GridArtifact | Metric::Focus)
    }
}

/// The eight metric values. `None` marks a metric that was not evaluable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVector<R> {
    pub values: [Option<R>; METRIC_COUNT],
}

impl<R: Real> Default for MetricVector<R> {
    fn default() -> Self {
        Self { values: [None; METRIC_COUNT] }
    }
}

impl<R: Real> MetricVector<R> {
    pub fn get(&self, m: Metric) -> Option<R> {
        self.values[m.index()]
    }

    pub fn set(&mut self, m: Metric, v: Option<R>) {
        self.values[m.index()] = v;
    }

    pub fn evaluable_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Dense feature vector for the score model: not-evaluable entries are
    /// imputed to 1.0 (assume no evidence of a problem).
    pub fn imputed(&self) -> [R; METRIC_COUNT] {
        self.values.map(|v| v.unwrap_or_else(R::one))
    }

    /// Metrics that were imputed rather than measured.
    pub fn imputed_metrics(&self) -> Vec<Metric> {
        Metric::ALL.into_iter().filter(|m| self.get(*m).is_none()).collect()
    }

    pub fn from_values(values: [R; METRIC_COUNT]) -> Self {
        Self { values: values.map(Some) }
    }
}
