//! CSV rendering of a finalized run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{read_lines, EpochRecord, RoundRecord, LOGS_DIR, RESULTS_DIR, SERVER_LOG};
use crate::error::{Error, IoContext, Result};
use crate::metrics;

pub const CLIENTS_CSV: &str = "clients.csv";
pub const SERVER_CSV: &str = "server.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportSummary {
    pub epoch_rows: usize,
    pub round_rows: usize,
    pub skipped_lines: usize,
}

fn load_run(run: &Path) -> Result<(Vec<EpochRecord>, Vec<RoundRecord>, usize)> {
    let results = run.join(RESULTS_DIR);
    let mut files: Vec<_> = fs::read_dir(&results)
        .at(&results)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut epochs = Vec::new();
    let mut skipped = 0;
    for f in files {
        let (mut recs, s) = read_lines::<EpochRecord>(&f)?;
        epochs.append(&mut recs);
        skipped += s;
    }
    epochs.sort_by_key(|r| (r.client_id, r.round, r.epoch));
    let server = run.join(LOGS_DIR).join(SERVER_LOG);
    let (rounds, s) = if server.exists() {
        read_lines::<RoundRecord>(&server)?
    } else {
        (Vec::new(), 0)
    };
    Ok((epochs, rounds, skipped + s))
}

/// Writes `clients.csv` and `server.csv` for `run` into `out`.
pub fn render_report(run: &Path, out: &Path) -> Result<ReportSummary> {
    let (epochs, rounds, skipped_lines) = load_run(run)?;
    let mut clients = String::from("client_id,round,epoch,micro_f1,macro_f1,weighted_f1\n");
    for r in &epochs {
        let m = &r.metrics;
        writeln!(
            clients,
            "{},{},{},{},{},{}",
            r.client_id, r.round, r.epoch, m.micro_f1, m.macro_f1, m.weighted_f1
        )
        .unwrap();
    }
    let mut server = String::from("round,accuracy_distributed,loss_distributed\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rounds {
        writeln!(server, "{},{},{}", r.round, opt(r.accuracy_distributed), opt(r.loss_distributed)).unwrap();
    }
    fs::create_dir_all(out).at(out)?;
    fs::write(out.join(CLIENTS_CSV), clients).at(out.join(CLIENTS_CSV))?;
    fs::write(out.join(SERVER_CSV), server).at(out.join(SERVER_CSV))?;
    Ok(ReportSummary {
        epoch_rows: epochs.len(),
        round_rows: rounds.len(),
        skipped_lines,
    })
}

/// Recomputes every logged metrics report from its confusion matrix and
/// returns the largest absolute deviation across F1 values and accuracy.
pub fn verify_run(run: &Path) -> Result<f64> {
    let (epochs, _, _) = load_run(run)?;
    let mut worst = 0.0f64;
    for r in &epochs {
        let fresh = metrics::compute::<f64>(&r.confusion)?;
        let logged = &r.metrics;
        if fresh.f1.len() != logged.f1.len() {
            return Err(Error::Storage(format!(
                "client {} round {} epoch {}: class count differs",
                r.client_id, r.round, r.epoch
            )));
        }
        let pairs = fresh
            .f1
            .iter()
            .zip(&logged.f1)
            .chain([
                (&fresh.micro_f1, &logged.micro_f1),
                (&fresh.macro_f1, &logged.macro_f1),
                (&fresh.weighted_f1, &logged.weighted_f1),
                (&fresh.accuracy, &logged.accuracy),
            ]);
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::super::{append_line, client_log_name, RoundStatus};
    use super::*;
    use crate::metrics::ConfusionMatrix;

    #[test]
    fn renders_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run-0");
        let confusion = ConfusionMatrix::from_rows(&[vec![2, 0], vec![1, 1]]).unwrap();
        for client in [1u32, 0] {
            for epoch in [2u32, 1] {
                let rec = EpochRecord {
                    client_id: client,
                    round: 1,
                    epoch,
                    test_loss: 0.3,
                    num_test: 4,
                    metrics: metrics::compute(&confusion).unwrap(),
                    confusion: confusion.clone(),
                };
                append_line(&run.join(RESULTS_DIR).join(client_log_name(client)), &rec).unwrap();
            }
        }
        let round = RoundRecord {
            round: 1,
            status: RoundStatus::Ok,
            sampled: vec![0, 1],
            participants: vec![0, 1],
            eval_participants: vec![0, 1],
            loss_distributed: Some(0.25),
            accuracy_distributed: Some(0.75),
            discarded_stale: 0,
            params_sha256: String::new(),
        };
        append_line(&run.join(LOGS_DIR).join(SERVER_LOG), &round).unwrap();
        let out = dir.path().join("report");
        let summary = render_report(&run, &out).unwrap();
        assert_eq!((summary.epoch_rows, summary.round_rows), (4, 1));
        let csv = fs::read_to_string(out.join(CLIENTS_CSV)).unwrap();
        let keys: Vec<&str> = csv.lines().skip(1).map(|l| &l[..5]).collect();
        assert_eq!(keys, vec!["0,1,1", "0,1,2", "1,1,1", "1,1,2"]);
        assert_eq!(
            fs::read_to_string(out.join(SERVER_CSV)).unwrap(),
            "round,accuracy_distributed,loss_distributed\n1,0.75,0.25\n"
        );
        assert_eq!(verify_run(&run).unwrap(), 0.0);
    }
}
