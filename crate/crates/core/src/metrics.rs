//! Multi-label evaluation: per-class confusion counts, per-class F1, the
//! macro average over classes, and the micro F1 over pooled counts.

use crate::error::{Error, Result};

/// Confusion counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.true_pos += 1,
            (true, false) => self.false_pos += 1,
            (false, true) => self.false_neg += 1,
            (false, false) => self.true_neg += 1,
        }
    }

    /// F1 = 2tp / (2tp + fp + fn); defined as 0 when the class never
    /// appears in predictions or targets.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.true_pos + self.false_pos + self.false_neg;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.true_pos as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        let denom = self.true_pos + self.false_pos;
        if denom == 0 {
            0.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let denom = self.true_pos + self.false_neg;
        if denom == 0 {
            0.0
        } else {
            self.true_pos as f64 / denom as f64
        }
    }

    pub fn support(&self) -> u64 {
        self.true_pos + self.false_neg
    }
}

/// Accumulates decisions against labels across samples.
#[derive(Clone, Debug)]
pub struct Evaluation {
    counts: Vec<ConfusionCounts>,
    samples: u64,
}

impl Evaluation {
    pub fn new(classes: usize) -> Evaluation {
        Evaluation {
            counts: vec![ConfusionCounts::default(); classes],
            samples: 0,
        }
    }

    pub fn record(&mut self, decisions: &[bool], labels: &[f64]) -> Result<()> {
        if decisions.len() != self.counts.len() || labels.len() != self.counts.len() {
            return Err(Error::Shape(format!(
                "expected {} classes, got {} decisions and {} labels",
                self.counts.len(),
                decisions.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        for (c, count) in self.counts.iter_mut().enumerate() {
            count.add(decisions[c], labels[c] == 1.0);
        }
        self.samples += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[ConfusionCounts] {
        &self.counts
    }

    pub fn report(&self, class_names: Option<&[String]>) -> F1Report {
        let per_class: Vec<ClassF1> = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| ClassF1 {
                name: class_names
                    .and_then(|names| names.get(i).cloned())
                    .unwrap_or_else(|| format!("class-{i}")),
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                support: c.support(),
            })
            .collect();
        let macro_f1 = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(|c| c.f1).sum::<f64>() / per_class.len() as f64
        };
        let pooled = self
            .counts
            .iter()
            .fold(ConfusionCounts::default(), |mut acc, c| {
                acc.true_pos += c.true_pos;
                acc.false_pos += c.false_pos;
                acc.false_neg += c.false_neg;
                acc.true_neg += c.true_neg;
                acc
            });
        F1Report {
            per_class,
            macro_f1,
            micro_f1: pooled.f1(),
            samples: self.samples,
        }
    }
}

/// Per-class and aggregate F1 scores.
#[derive(Clone, Debug, serde::Serialize)]
pub struct F1Report {
    pub per_class: Vec<ClassF1>,
    /// Mean of the per-class F1 scores.
    pub macro_f1: f64,
    /// F1 over counts pooled across classes.
    pub micro_f1: f64,
    pub samples: u64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ClassF1 {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl F1Report {
    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let name_w = self
            .per_class
            .iter()
            .map(|c| c.name.len())
            .chain(std::iter::once("class".len()))
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        out.push_str(&format!(
            "{:name_w$}  {:>9}  {:>9}  {:>9}  {:>8}\n",
            "class", "precision", "recall", "f1", "support"
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{:name_w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}\n",
                c.name, c.precision, c.recall, c.f1, c.support
            ));
        }
        out.push_str(&format!(
            "macro_f1={:.4} micro_f1={:.4} samples={}\n",
            self.macro_f1, self.micro_f1, self.samples
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
