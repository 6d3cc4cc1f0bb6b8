//! Plain-text summary of whatever stages have run.

use std::fmt::Write as _;

use rhcbf::datasets::Manifest;
use rhcbf::verifier::VerificationReport;

use crate::config::ExperimentConfig;
use crate::pipeline::{from_json, Layout, TrainSummary};
use crate::{read_file, write_file, Result};

fn fractions(v: &[f64; 4]) -> String {
    format!("safe {:.4}  ring {:.4}  flow {:.4}  jump {:.4}", v[0], v[1], v[2], v[3])
}

pub fn build_report(cfg: &ExperimentConfig) -> Result<String> {
    let layout = Layout::new(&cfg.out);
    let mut s = String::new();
    writeln!(s, "# Experiment report").unwrap();
    writeln!(s, "\noutput: {}\nseed: {}", cfg.out.display(), cfg.seed).unwrap();

    writeln!(s, "\n## Dataset").unwrap();
    match from_json::<serde_json::Value>(&layout.data().join("manifest.json")) {
        Ok(v) => {
            let m: Manifest = serde_json::from_value(v.clone()).unwrap_or_default();
            writeln!(
                s,
                "flow samples {}, jump samples {}, ring samples {}, dropped runs {} of {}",
                m.stats.flow_samples, m.stats.jump_samples, m.ring_count, m.stats.dropped_runs, m.stats.runs
            )
            .unwrap();
            writeln!(s, "config hash {}", m.config_hash).unwrap();
        }
        Err(_) => writeln!(s, "not collected").unwrap(),
    }

    writeln!(s, "\n## Training").unwrap();
    for &v in &cfg.train.variants {
        match from_json::<TrainSummary>(&layout.train_summary(v)) {
            Ok(t) => {
                writeln!(s, "{}: {} epochs, best epoch {}", v.name(), t.epochs, t.best_epoch).unwrap();
                writeln!(s, "  final violations: {}", fractions(&t.final_violation)).unwrap();
                writeln!(s, "  best violations:  {}", fractions(&t.best_violation)).unwrap();
            }
            Err(_) => writeln!(s, "{}: not trained", v.name()).unwrap(),
        }
    }

    writeln!(s, "\n## Verification").unwrap();
    for &v in &cfg.train.variants {
        let path = layout.verify_report(v);
        match read_file(&path).and_then(|t| Ok(VerificationReport::from_json(&t)?)) {
            Ok(r) => {
                writeln!(s, "{}:", v.name()).unwrap();
                for line in r.summary().lines() {
                    writeln!(s, "  {line}").unwrap();
                }
            }
            Err(_) => writeln!(s, "{}: not verified", v.name()).unwrap(),
        }
    }

    writeln!(s, "\n## Sweep").unwrap();
    match read_file(&layout.sweep().join("aggregate.csv")) {
        Ok(text) => {
            writeln!(s, "```").unwrap();
            s.push_str(&text);
            writeln!(s, "```").unwrap();
        }
        Err(_) => writeln!(s, "not run").unwrap(),
    }
    Ok(s)
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let text = build_report(cfg)?;
    write_file(&Layout::new(&cfg.out).root.join("report.md"), text.as_bytes())?;
    Ok(text)
}
