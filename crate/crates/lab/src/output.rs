//! Files written by runs: newline-delimited JSON records, parameter
//! checkpoints and plot CSVs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use gdsd_core::numerics::ParamVector;
use gdsd_core::trainer::StepMetrics;
use serde::{Deserialize, Serialize};

/// One line of `metrics.ndjson`. Field order is the key order on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Seconds since the run started, when enabled.
    pub wall_time: Option<f64>,
    pub mean_reward: f64,
    pub loss_total: f64,
    pub loss_match: f64,
    pub loss_reg: f64,
    pub grad_norm: f64,
    pub old_refreshed: bool,
}

impl MetricsRecord {
    pub fn new(m: &StepMetrics, wall_time: Option<f64>) -> Self {
        Self {
            step: m.step,
            wall_time,
            mean_reward: m.mean_reward,
            loss_total: m.loss_total,
            loss_match: m.loss_match,
            loss_reg: m.loss_reg,
            grad_norm: m.grad_norm,
            old_refreshed: m.old_refreshed,
        }
    }
}

/// Appends serializable records, one JSON object per line.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> anyhow::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn flush(&mut self) -> anyhow::Result<()> {
        self.out
            .flush()
            .with_context(|| format!("flushing {}", self.path.display()))
    }
}

pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub objective: String,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn params(&self) -> anyhow::Result<ParamVector> {
        Ok(ParamVector::new(self.params.clone())?)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.json"))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> anyhow::Result<()> {
    let s = serde_json::to_string(ckpt)?;
    std::fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// `reward.csv` and `loss.csv` from the metrics of a run.
pub fn write_plot_data(dir: &Path, records: &[MetricsRecord]) -> anyhow::Result<()> {
    let mut reward = String::from("step,mean_reward\n");
    let mut loss = String::from("step,loss_total\n");
    for r in records {
        reward.push_str(&format!("{},{:?}\n", r.step, r.mean_reward));
        loss.push_str(&format!("{},{:?}\n", r.step, r.loss_total));
    }
    std::fs::write(dir.join("reward.csv"), reward)?;
    std::fs::write(dir.join("loss.csv"), loss)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            wall_time: None,
            mean_reward: 0.25,
            loss_total: 1.5,
            loss_match: 1.0,
            loss_reg: 0.5,
            grad_norm: 3.0,
            old_refreshed: step.is_multiple_of(8),
        }
    }

    #[test]
    fn metrics_key_order_is_fixed() {
        let s = serde_json::to_string(&record(8)).unwrap();
        assert_eq!(
            s,
            r#"{"step":8,"wall_time":null,"mean_reward":0.25,"loss_total":1.5,"loss_match":1.0,"loss_reg":0.5,"grad_norm":3.0,"old_refreshed":true}"#
        );
    }

    #[test]
    fn records_and_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndjson");
        let mut w = RecordWriter::create(&path).unwrap();
        for s in 1..=3 {
            w.write(&record(s)).unwrap();
        }
        w.flush().unwrap();
        let back: Vec<MetricsRecord> = read_records(&path).unwrap();
        assert_eq!(back, (1..=3).map(record).collect::<Vec<_>>());

        let ckpt = Checkpoint {
            step: 5,
            objective: "gdsd_tlc".into(),
            params: vec![0.1, -1e-300, 1.0 / 3.0, 7e12],
        };
        let p = checkpoint_path(dir.path(), 5);
        assert!(p.ends_with("step_000005.json"));
        write_checkpoint(&p, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), ckpt);
    }

    #[test]
    fn plot_csvs() {
        let dir = tempfile::tempdir().unwrap();
        write_plot_data(dir.path(), &[record(1), record(2)]).unwrap();
        let r = std::fs::read_to_string(dir.path().join("reward.csv")).unwrap();
        assert_eq!(r, "step,mean_reward\n1,0.25\n2,0.25\n");
        let l = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(l, "step,loss_total\n1,1.5\n2,1.5\n");
    }
}
