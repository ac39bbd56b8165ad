//! Finite control sets and piecewise-constant (possibly spiked) controls.
//!
//! A control is stored as one index into `U` per time step, so every value
//! lies in `U` by construction. An optional feedback rule replaces the index
//! on a window of steps by a function of the state at a decision step.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite control set `U ⊂ ℝᵐ`, not necessarily convex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    values: Vec<Vec<f64>>,
}

impl ControlSet {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = values.first() else {
            return Err(Error::InvalidInput("control set is empty".into()));
        };
        let m = first.len();
        if values.iter().any(|v| v.len() != m) {
            return Err(Error::InvalidInput("control values differ in dimension".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("control values must be finite".into()));
        }
        Ok(Self { values })
    }

    /// `U = {u₀, u₁, …}` with scalar controls.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|v| vec![*v]).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn value(&self, index: usize) -> &[f64] {
        &self.values[index]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn index_of(&self, v: &[f64]) -> Option<usize> {
        self.values.iter().position(|u| u.as_slice() == v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    PiecewiseConstant,
    Spiked,
}

pub type FeedbackFn = dyn Fn(&[f64]) -> usize + Send + Sync;

/// State-dependent index rule applied on steps `start..end`, evaluated on the
/// state at `decision_step`.
#[derive(Clone)]
pub struct FeedbackRule {
    pub start: usize,
    pub end: usize,
    pub decision_step: usize,
    rule: Arc<FeedbackFn>,
}

impl fmt::Debug for FeedbackRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackRule")
            .field("start", &self.start)
            .field("end", &self.end)
            .field("decision_step", &self.decision_step)
            .finish()
    }
}

impl FeedbackRule {
    pub fn new<F>(start: usize, end: usize, decision_step: usize, rule: F) -> Self
    where
        F: Fn(&[f64]) -> usize + Send + Sync + 'static,
    {
        Self { start, end, decision_step, rule: Arc::new(rule) }
    }

    pub fn choose(&self, state: &[f64]) -> usize {
        (self.rule)(state)
    }

    pub fn covers(&self, k: usize) -> bool {
        (self.start..self.end).contains(&k)
    }
}

/// Admissible control: one `U`-index per grid step.
#[derive(Clone, Debug)]
pub struct ControlProcess {
    set: ControlSet,
    schedule: Vec<usize>,
    kind: ControlKind,
    feedback: Option<FeedbackRule>,
}

impl ControlProcess {
    pub fn from_schedule(set: ControlSet, schedule: Vec<usize>) -> Result<Self> {
        if let Some(bad) = schedule.iter().find(|i| **i >= set.len()) {
            return Err(Error::InvalidInput(format!("control index {bad} outside U of size {}", set.len())));
        }
        Ok(Self { set, schedule, kind: ControlKind::PiecewiseConstant, feedback: None })
    }

    pub fn constant(set: ControlSet, steps: usize, index: usize) -> Result<Self> {
        Self::from_schedule(set, vec![index; steps])
    }

    /// Splits `steps` into `indices.len()` equal intervals, interval `j`
    /// carrying `U[indices[j]]`.
    pub fn piecewise(set: ControlSet, steps: usize, indices: &[usize]) -> Result<Self> {
        let n_int = indices.len();
        if n_int == 0 || !steps.is_multiple_of(n_int) {
            return Err(Error::InvalidGrid(format!(
                "{steps} steps cannot be split into {n_int} equal control intervals"
            )));
        }
        let per = steps / n_int;
        Self::from_schedule(set, (0..steps).map(|k| indices[k / per]).collect())
    }

    pub fn set(&self) -> &ControlSet {
        &self.set
    }

    pub fn kind(&self) -> ControlKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.schedule.len()
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn feedback(&self) -> Option<&FeedbackRule> {
        self.feedback.as_ref()
    }

    /// Index used on step `k` when no feedback rule applies there.
    pub fn scheduled_index(&self, k: usize) -> usize {
        self.schedule[k]
    }

    /// Index used on step `k`; `decision_state` is the state at the feedback
    /// rule's decision step and is only read inside the feedback window.
    pub fn index_at(&self, k: usize, decision_state: Option<&[f64]>) -> usize {
        match (&self.feedback, decision_state) {
            (Some(fb), Some(x)) if fb.covers(k) => fb.choose(x).min(self.set.len() - 1),
            _ => self.schedule[k],
        }
    }

    pub fn value_at(&self, k: usize) -> &[f64] {
        self.set.value(self.schedule[k])
    }

    /// Interval-level indices if the schedule is constant on `n_intervals`
    /// equal blocks.
    pub fn interval_indices(&self, n_intervals: usize) -> Option<Vec<usize>> {
        let steps = self.steps();
        if n_intervals == 0 || !steps.is_multiple_of(n_intervals) {
            return None;
        }
        let per = steps / n_intervals;
        let out: Vec<usize> = (0..n_intervals).map(|j| self.schedule[j * per]).collect();
        (0..steps).all(|k| self.schedule[k] == out[k / per]).then_some(out)
    }

    /// Replaces the schedule on `start..end` by `index`.
    pub fn with_window(&self, start: usize, end: usize, index: usize) -> Result<Self> {
        if end > self.steps() || start >= end {
            return Err(Error::InvalidInput(format!("window {start}..{end} outside 0..{}", self.steps())));
        }
        if index >= self.set.len() {
            return Err(Error::InvalidInput(format!("control index {index} outside U")));
        }
        let mut out = self.clone();
        out.schedule[start..end].iter_mut().for_each(|i| *i = index);
        out.kind = ControlKind::Spiked;
        Ok(out)
    }

    /// Attaches a feedback rule; it must decide no later than it starts acting.
    pub fn with_feedback(&self, rule: FeedbackRule) -> Result<Self> {
        if rule.decision_step > rule.start {
            return Err(Error::NonAdaptedControl(format!(
                "feedback acting from step {} reads the state at step {}",
                rule.start, rule.decision_step
            )));
        }
        if rule.end > self.steps() || rule.start >= rule.end {
            return Err(Error::InvalidInput(format!("feedback window {}..{} invalid", rule.start, rule.end)));
        }
        let mut out = self.clone();
        out.feedback = Some(rule);
        out.kind = ControlKind::Spiked;
        Ok(out)
    }

    /// Checks the control against a grid of `steps` steps.
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.steps() != steps {
            return Err(Error::InvalidGrid(format!(
                "control has {} steps, grid has {steps}",
                self.steps()
            )));
        }
        if let Some(fb) = &self.feedback {
            if fb.decision_step > fb.start {
                return Err(Error::NonAdaptedControl(format!(
                    "feedback decision step {} after window start {}",
                    fb.decision_step, fb.start
                )));
            }
        }
        Ok(())
    }

    /// Whether both controls use the same index on every step, ignoring feedback.
    pub fn same_schedule(&self, other: &Self) -> bool {
        self.set == other.set && self.schedule == other.schedule && self.feedback.is_none() && other.feedback.is_none()
    }
}
