//! Global accuracy, time-to-accuracy, stability, effectiveness and the
//! simulated round clock.
//!
//! Accuracies are kept as exact `correct / total` ratios so that derived
//! statistics (mean, variance) are computed in rational arithmetic and rounded
//! once.

use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::resource::{estimate_times, DeviceProfile, VariantStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
}

impl Accuracy {
    pub fn new(correct: u64, total: u64) -> Self {
        assert!(correct <= total, "correct {correct} exceeds total {total}");
        Accuracy { correct, total }
    }

    pub fn from_predictions(pred: &[usize], labels: &[usize]) -> Self {
        assert_eq!(pred.len(), labels.len());
        let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Accuracy::new(correct as u64, labels.len() as u64)
    }

    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn ratio(&self) -> BigRational {
        BigRational::new(BigInt::from(self.correct), BigInt::from(self.total.max(1)))
    }
}

/// Mean of accuracies, computed exactly.
pub fn mean_accuracy(values: &[Accuracy]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let sum = values.iter().fold(BigRational::zero(), |acc, a| acc + a.ratio());
    (sum / BigRational::from_integer(BigInt::from(values.len()))).to_f64().unwrap_or(f64::NAN)
}

/// Population variance of per-client accuracies.
pub fn stability(values: &[Accuracy]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = BigRational::from_integer(BigInt::from(values.len()));
    let ratios: Vec<BigRational> = values.iter().map(Accuracy::ratio).collect();
    let mean = ratios.iter().fold(BigRational::zero(), |a, r| a + r) / &n;
    let ss = ratios.iter().fold(BigRational::zero(), |a, r| {
        let d = r - &mean;
        a + &d * &d
    });
    (ss / n).to_f64().unwrap_or(f64::NAN)
}

/// Accuracy improvement of a strategy over the smallest-homogeneous baseline.
pub fn effectiveness(strategy_accuracy: f64, baseline_accuracy: f64) -> f64 {
    strategy_accuracy - baseline_accuracy
}

/// Cumulative simulated time at the first record reaching `threshold`.
pub fn time_to_accuracy(records: &[RoundRecord], threshold: f64) -> Option<f64> {
    records
        .iter()
        .find(|r| r.global_accuracy >= threshold)
        .map(|r| r.simulated_time_s)
}

/// Per-client cost of one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientRoundCost {
    pub train_s: f64,
    pub comm_s: f64,
}

/// Synchronous-round clock: a round lasts as long as its slowest client.
#[derive(Clone, Debug, Default)]
pub struct SimClock {
    elapsed_s: f64,
    rounds: Vec<RoundTiming>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundTiming {
    pub duration_s: f64,
    pub max_train_s: f64,
    pub max_comm_s: f64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn elapsed_s(&self) -> f64 {
        self.elapsed_s
    }

    pub fn rounds(&self) -> &[RoundTiming] {
        &self.rounds
    }

    /// Adds `max_k (train_k + comm_k)` to the clock and returns the timing.
    pub fn advance(&mut self, costs: &[ClientRoundCost]) -> RoundTiming {
        let mut t = RoundTiming {
            duration_s: 0.0,
            max_train_s: 0.0,
            max_comm_s: 0.0,
        };
        for c in costs {
            t.duration_s = t.duration_s.max(c.train_s + c.comm_s);
            t.max_train_s = t.max_train_s.max(c.train_s);
            t.max_comm_s = t.max_comm_s.max(c.comm_s);
        }
        self.elapsed_s += t.duration_s;
        self.rounds.push(t);
        t
    }
}

/// Prices one round for the selected clients and advances `clock`.
///
/// `assignments`, `profiles` and `samples` are indexed by client id.
pub fn advance_clock(
    clock: &mut SimClock,
    selected: &[usize],
    assignments: &[VariantStats],
    profiles: &[DeviceProfile],
    samples: &[usize],
    local_epochs: usize,
) -> RoundTiming {
    let costs: Vec<ClientRoundCost> = selected
        .iter()
        .map(|&c| {
            let (train_s, comm_s) = estimate_times(&assignments[c], &profiles[c], samples[c], local_epochs);
            ClientRoundCost { train_s, comm_s }
        })
        .collect();
    clock.advance(&costs)
}

/// One evaluated round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    pub simulated_time_s: f64,
    pub global_accuracy: f64,
    /// Indexed by client id; measured on the shared global test set.
    pub per_client_accuracy: Vec<Accuracy>,
    pub max_train_s: f64,
    pub max_comm_s: f64,
}

impl RoundRecord {
    pub fn stability(&self) -> f64 {
        stability(&self.per_client_accuracy)
    }

    pub fn mean_client_accuracy(&self) -> f64 {
        mean_accuracy(&self.per_client_accuracy)
    }
}

/// Serialises records as
/// `round,sim_time_s,global_acc,stability_var,mean_client_acc[,client_<k>...]`.
pub fn records_to_csv(records: &[RoundRecord], per_client_columns: bool) -> String {
    let mut out = String::from("round,sim_time_s,global_acc,stability_var,mean_client_acc");
    let clients = records.first().map_or(0, |r| r.per_client_accuracy.len());
    if per_client_columns {
        for k in 0..clients {
            let _ = write!(out, ",client_{k}");
        }
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.round,
            r.simulated_time_s,
            r.global_accuracy,
            r.stability(),
            r.mean_client_accuracy()
        );
        if per_client_columns {
            for a in &r.per_client_accuracy {
                let _ = write!(out, ",{}", a.value());
            }
        }
        out.push('\n');
    }
    out
}

/// Four-metric summary of one run (or the mean over repeats).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub final_global_accuracy: f64,
    /// `None` when the target accuracy was never reached.
    pub time_to_accuracy_s: Option<f64>,
    pub stability_variance: f64,
    pub effectiveness_delta: f64,
}

impl MetricsReport {
    /// Arithmetic mean over repeats. Time-to-accuracy is reported only when
    /// every repeat reached the target.
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let mean_of = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let tta = reports
            .iter()
            .map(|r| r.time_to_accuracy_s)
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        MetricsReport {
            final_global_accuracy: mean_of(|r| r.final_global_accuracy),
            time_to_accuracy_s: tta,
            stability_variance: mean_of(|r| r.stability_variance),
            effectiveness_delta: mean_of(|r| r.effectiveness_delta),
        }
    }
}
