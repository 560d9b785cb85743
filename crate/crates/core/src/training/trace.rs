use crate::error::{ensure, Error, Result};

/// EMA coefficient applied to per-step losses for reporting.
pub const SMOOTHING: f64 = 0.99;

/// Per-step training loss of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub label: String,
    losses: Vec<f64>,
}

impl LossTrace {
    pub fn new(label: impl Into<String>) -> Self {
        LossTrace {
            label: label.into(),
            losses: Vec::new(),
        }
    }

    pub fn from_losses(label: impl Into<String>, losses: Vec<f64>) -> Self {
        LossTrace {
            label: label.into(),
            losses,
        }
    }

    pub fn push(&mut self, loss: f64) {
        self.losses.push(loss);
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// `s₀ = l₀`, `sₜ = 0.99·sₜ₋₁ + 0.01·lₜ`.
    pub fn smoothed(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.losses.len());
        let mut s = None;
        for &l in &self.losses {
            let next = match s {
                None => l,
                Some(prev) => SMOOTHING * prev + (1.0 - SMOOTHING) * l,
            };
            out.push(next);
            s = Some(next);
        }
        out
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.smoothed().last().copied()
    }
}

fn check_label(label: &str) -> Result<()> {
    ensure!(
        !label.is_empty() && !label.contains([',', '\n', '\r', '"']),
        "run label {label:?} must be non-empty and free of commas, quotes and newlines"
    );
    Ok(())
}

/// CSV with columns `run,step,loss`; steps count from 1.
pub fn emit_loss_curves(traces: &[LossTrace]) -> Result<String> {
    let mut out = String::from("run,step,loss\n");
    for t in traces {
        check_label(&t.label)?;
        for (i, l) in t.losses.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", t.label, i + 1, l));
        }
    }
    Ok(out)
}

/// Inverse of [`emit_loss_curves`]; runs keep their first-seen order.
pub fn parse_loss_curves(csv: &str) -> Result<Vec<LossTrace>> {
    let bad = |d: String| Error::format("loss csv", d);
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h.trim() == "run,step,loss" => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let mut traces: Vec<LossTrace> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let (Some(run), Some(step), Some(loss), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad(format!("line {}: {line:?}", n + 2)));
        };
        let step: usize = step.parse().map_err(|_| bad(format!("line {}: step {step:?}", n + 2)))?;
        let loss: f64 = loss.parse().map_err(|_| bad(format!("line {}: loss {loss:?}", n + 2)))?;
        let idx = match traces.iter().position(|t| t.label == run) {
            Some(i) => i,
            None => {
                traces.push(LossTrace::new(run));
                traces.len() - 1
            }
        };
        let t = &mut traces[idx];
        if step != t.losses.len() + 1 {
            return Err(bad(format!("line {}: run {run} step {step} out of order", n + 2)));
        }
        t.push(loss);
    }
    Ok(traces)
}
