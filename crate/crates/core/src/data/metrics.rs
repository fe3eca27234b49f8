//! JSON-lines metrics stream: one `epoch` record per epoch per mode, then
//! one `summary` record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{epochs_to_threshold, EpochStats, RunHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSummary {
    pub epochs: usize,
    pub final_val_error: f64,
    pub final_train_error: Option<f64>,
    pub epochs_to_threshold: Option<usize>,
    pub mean_variance: Option<f64>,
    pub top_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub seed: u64,
    pub threshold: Option<f64>,
    pub baseline: Option<ModeSummary>,
    pub gpgl: Option<ModeSummary>,
}

impl ModeSummary {
    pub fn from_history(history: &RunHistory, threshold: Option<f64>) -> Self {
        let last = history.epochs.last();
        Self {
            epochs: history.epochs.len(),
            final_val_error: history.final_error(),
            final_train_error: last.map(|e| e.train_error),
            epochs_to_threshold: threshold.and_then(|t| epochs_to_threshold(&history.epochs, t)),
            mean_variance: last.and_then(|e| e.mean_variance),
            top_mass: last.and_then(|e| e.top_mass),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Epoch(EpochStats),
    Summary(RunSummary),
}

/// Line-buffered writer; records are appended in call order.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Writes every epoch of each history in order, then `summary`.
pub fn write_metrics(path: &Path, histories: &[&RunHistory], summary: &RunSummary) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for h in histories {
        for e in &h.epochs {
            w.write(&MetricsRecord::Epoch(e.clone()))?;
        }
    }
    w.write(&MetricsRecord::Summary(summary.clone()))?;
    w.finish()
}

/// Parses a metrics file; blank lines are skipped.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    fn stats(mode: Mode, epoch: usize) -> EpochStats {
        let gp = mode == Mode::Gpgl;
        EpochStats {
            mode,
            epoch,
            lr: 0.1,
            batches: 7,
            mu: 0.9,
            train_error: 0.1 + 0.2,
            val_error: 1.0 / 3.0,
            mag_ce1: std::f64::consts::PI,
            mag_kl: gp.then_some(1e-300),
            mag_ce2: gp.then_some(0.0),
            mean_variance: gp.then_some(0.123456789012345678),
            top_mass: gp.then_some(0.7),
            anchor_spread: gp.then_some(2.5),
            anchor_spread_ratio: gp.then_some(0.25),
        }
    }

    fn history(mode: Mode, n: usize) -> RunHistory {
        RunHistory {
            mode,
            initial_mu: 0.9,
            epochs: (1..=n).map(|e| stats(mode, e)).collect(),
            wall_seconds: vec![0.0; n],
        }
    }

    fn summary(b: &RunHistory, g: &RunHistory) -> RunSummary {
        RunSummary {
            seed: 3,
            threshold: Some(0.5),
            baseline: Some(ModeSummary::from_history(b, Some(0.5))),
            gpgl: Some(ModeSummary::from_history(g, Some(0.5))),
        }
    }

    #[test]
    fn two_epochs_two_modes_give_five_records() {
        let (b, g) = (history(Mode::Baseline, 2), history(Mode::Gpgl, 2));
        let f = tempfile::NamedTempFile::new().unwrap();
        write_metrics(f.path(), &[&b, &g], &summary(&b, &g)).unwrap();
        let recs = read_metrics(f.path()).unwrap();
        assert_eq!(recs.len(), 5);
        let epochs: Vec<EpochStats> = recs
            .iter()
            .filter_map(|r| match r {
                MetricsRecord::Epoch(e) => Some(e.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(epochs, [b.epochs.clone(), g.epochs.clone()].concat());
        assert_eq!(recs[4], MetricsRecord::Summary(summary(&b, &g)));
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.lines().all(|l| l.contains("\"kind\":")));
    }

    #[test]
    fn empty_history_writes_only_the_summary() {
        let (b, g) = (history(Mode::Baseline, 0), history(Mode::Gpgl, 0));
        let f = tempfile::NamedTempFile::new().unwrap();
        write_metrics(f.path(), &[&b, &g], &summary(&b, &g)).unwrap();
        let recs = read_metrics(f.path()).unwrap();
        assert!(matches!(recs.as_slice(), [MetricsRecord::Summary(_)]));
    }

    #[test]
    fn bad_line_is_located() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "{\"kind\":\"summary\",\"seed\":1,\"threshold\":null,\"baseline\":null,\"gpgl\":null}\nnot json\n").unwrap();
        match read_metrics(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
