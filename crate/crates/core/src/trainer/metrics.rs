use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "episode_return",
    "td_loss",
    "v_loss",
    "q_beta_loss",
    "actor_q_term",
    "constraint_term",
    "mean_weight",
    "frac_positive_weight",
];

/// One metrics row. `episode_return` is the mean evaluation return at `step`;
/// the loss columns average every gradient step since the previous row and are
/// empty when no gradient step ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode_return: Option<f64>,
    pub td_loss: Option<f64>,
    pub v_loss: Option<f64>,
    pub q_beta_loss: Option<f64>,
    pub actor_q_term: Option<f64>,
    pub constraint_term: Option<f64>,
    pub mean_weight: Option<f64>,
    pub frac_positive_weight: Option<f64>,
}

pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Writes rows as CSV; the header is written on construction so an empty run
/// still yields a well-formed file.
pub struct CsvMetrics<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvMetrics<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(inner);
        writer.write_record(METRICS_HEADER)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| crate::Error::Io(e.into_error()))
    }
}

impl<W: Write> MetricsSink for CsvMetrics<W> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Running sums of the per-gradient-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Accumulator {
    count: u64,
    sums: [f64; 7],
}

impl Accumulator {
    pub fn add(&mut self, s: &StepStats) {
        self.count += 1;
        let vals = [
            s.td_loss,
            s.v_loss,
            s.q_beta_loss,
            s.actor_q_term,
            s.constraint_term,
            s.mean_weight,
            s.frac_positive_weight,
        ];
        for (acc, v) in self.sums.iter_mut().zip(vals) {
            *acc += v;
        }
    }

    pub fn take_row(&mut self, step: u64, episode_return: Option<f64>) -> MetricsRow {
        let avg = |i: usize| (self.count > 0).then(|| self.sums[i] / self.count as f64);
        let row = MetricsRow {
            step,
            episode_return,
            td_loss: avg(0),
            v_loss: avg(1),
            q_beta_loss: avg(2),
            actor_q_term: avg(3),
            constraint_term: avg(4),
            mean_weight: avg(5),
            frac_positive_weight: avg(6),
        };
        *self = Self::default();
        row
    }
}

/// Diagnostics of one gradient step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub td_loss: f64,
    pub v_loss: f64,
    pub q_beta_loss: f64,
    /// `mean_i min_k Q_k(s_i, a'_i)` for the sampled actions.
    pub actor_q_term: f64,
    /// Weighted flow-matching loss before scaling by lambda.
    pub constraint_term: f64,
    pub mean_weight: f64,
    pub frac_positive_weight: f64,
}
