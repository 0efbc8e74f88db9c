//! Metric aggregation and the CSV schemas every stage emits.

use crate::error::{Error, Result};
use crate::federation::RoundMetrics;
use crate::moe::FinetuneRow;
use crate::theory::BoundCheck;

/// Sample-count-weighted mean of per-client accuracies.
pub fn a_total(entries: &[(usize, f64)]) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::EmptyInput { context: "a_total" });
    }
    let mut total = 0usize;
    let mut acc = 0.0;
    for &(n, a) in entries {
        if n == 0 {
            return Err(Error::InvalidParameter {
                name: "sample_count",
                message: "client weight must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::InvalidParameter {
                name: "accuracy",
                message: format!("must be in [0, 1], got {a}"),
            });
        }
        total += n;
    }
    for &(n, a) in entries {
        acc += n as f64 / total as f64 * a;
    }
    Ok(acc)
}

/// Shortest round-trip decimal form; stable across runs for identical floats.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Pretraining metrics: one row per client per round plus a global row with
/// client_id = -1 carrying the mean train loss and the weighted accuracy.
pub fn phase1_csv(history: &[RoundMetrics]) -> String {
    let mut out = String::from("round,client_id,train_loss,test_accuracy,a_total\n");
    for round in history {
        for m in &round.per_client {
            out.push_str(&format!(
                "{},{},{},{},\n",
                round.round,
                m.client,
                fmt_f64(m.train_loss),
                fmt_f64(m.test_accuracy)
            ));
        }
        out.push_str(&format!(
            "{},-1,{},,{}\n",
            round.round,
            fmt_f64(round.mean_train_loss),
            fmt_f64(round.a_total)
        ));
    }
    out
}

/// Gate fine-tuning metrics, one row per client per epoch.
pub fn phase2_csv(rows: &[FinetuneRow]) -> String {
    let mut out = String::from("client_id,epoch,loss,test_accuracy,kept_expert_count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.client,
            r.epoch,
            fmt_f64(r.loss),
            fmt_f64(r.test_accuracy),
            r.kept_experts
        ));
    }
    out
}

/// Per-client energy report rows: one row per pool entry.
pub fn energy_csv(reports: &[(usize, &crate::energy::EnergyReport)]) -> String {
    let mut out = String::from("client_id,expert_id,confidence,kept\n");
    for (client, report) in reports {
        for (expert, (&conf, &kept)) in report.confidence.iter().zip(&report.kept).enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                client,
                expert,
                fmt_f64(conf),
                kept
            ));
        }
    }
    out
}

/// Bound verification grid.
pub fn theorem_csv(checks: &[BoundCheck]) -> String {
    let mut out = String::from("M,p,alpha,bound,exact,mc_estimate,mc_se,pass\n");
    for c in checks {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.params.experts,
            fmt_f64(c.params.accuracy),
            fmt_f64(c.params.advantage),
            fmt_f64(c.bound),
            fmt_f64(c.exact),
            fmt_f64(c.mc_estimate),
            fmt_f64(c.mc_se),
            c.pass
        ));
    }
    out
}

/// Final evaluation: per-client accuracies before and after fine-tuning.
pub struct EvalRow {
    pub client: usize,
    pub train_count: usize,
    pub phase1_accuracy: f64,
    pub phase2_accuracy: f64,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("client_id,train_count,phase1_accuracy,phase2_accuracy,delta\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.client,
            r.train_count,
            fmt_f64(r.phase1_accuracy),
            fmt_f64(r.phase2_accuracy),
            fmt_f64(r.phase2_accuracy - r.phase1_accuracy)
        ));
    }
    out
}
