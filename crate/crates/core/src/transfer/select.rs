use std::io::Read;

use serde::Serialize;

use crate::error::{Error, Result};

/// Transfer results: `scores[s][t]` is the metric obtained on target `t`
/// after fine-tuning on source `s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMatrix {
    sources: Vec<String>,
    targets: Vec<String>,
    scores: Vec<Vec<f64>>,
}

impl EvalMatrix {
    pub fn new(sources: Vec<String>, targets: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if sources.is_empty() || targets.is_empty() {
            return Err(Error::contract("evaluation matrix needs at least one source and one target"));
        }
        if scores.len() != sources.len() {
            return Err(Error::contract(format!(
                "{} score rows for {} sources",
                scores.len(),
                sources.len()
            )));
        }
        for (name, row) in sources.iter().zip(&scores) {
            if row.len() != targets.len() {
                return Err(Error::contract(format!(
                    "source `{name}` has {} scores for {} targets",
                    row.len(),
                    targets.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::contract(format!("source `{name}` has non-finite score {v}")));
            }
        }
        Ok(EvalMatrix {
            sources,
            targets,
            scores,
        })
    }

    /// Parse CSV with a header row `source,<target>...` and one row per
    /// source.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(csv_error)?.clone();
        if header.len() < 2 {
            return Err(Error::Data("CSV header needs a source column and at least one target".into()));
        }
        let targets: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let (mut sources, mut scores) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(csv_error)?;
            let line = rec.position().map_or(0, |p| p.line());
            let mut fields = rec.iter();
            sources.push(fields.next().unwrap_or_default().to_string());
            let row = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Data(format!("line {line}: `{f}` is not a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            scores.push(row);
        }
        EvalMatrix::new(sources, targets, scores).map_err(|e| match e {
            Error::Contract(m) => Error::Data(m),
            other => other,
        })
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.scores[source][target]
    }

    /// Mean over targets for each source, in source order.
    pub fn row_means(&self) -> Vec<f64> {
        self.scores
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }
}

fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::Parse {
        offset,
        reason: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub best: String,
    pub average: f64,
    /// `(source, mean over targets)` in input order.
    pub averages: Vec<(String, f64)>,
}

/// The source with the best mean transfer score. Ties go to the source
/// listed first.
pub fn select_best_source(m: &EvalMatrix) -> Selection {
    let means = m.row_means();
    let mut best = 0;
    for (i, &v) in means.iter().enumerate() {
        if v > means[best] {
            best = i;
        }
    }
    Selection {
        best: m.sources[best].clone(),
        average: means[best],
        averages: m.sources.iter().cloned().zip(means).collect(),
    }
}
