//! Plot-ready tables derived from the per-phase `rounds.csv` files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pwff_core::fed::Phase;
use serde::Deserialize;

use crate::artifacts::{display, Layout};

/// One parsed line of a rounds file.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct Row {
    pub round: usize,
    pub strategy: String,
    pub client_id: String,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub bits: u64,
    pub delay_s: f64,
    #[serde(rename = "energy_J")]
    pub energy_j: f64,
    pub r_helpful: Option<f64>,
    pub r_harmless: Option<f64>,
    pub r_total: Option<f64>,
}

impl Row {
    pub fn is_global(&self) -> bool {
        self.client_id == "GLOBAL"
    }

    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "loss" => self.loss,
            "accuracy" => self.accuracy,
            "bits" => Some(self.bits as f64),
            "delay_s" => Some(self.delay_s),
            "energy_J" => Some(self.energy_j),
            "r_helpful" => self.r_helpful,
            "r_harmless" => self.r_harmless,
            "r_total" => self.r_total,
            _ => None,
        }
    }
}

pub fn read_rounds(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().collect::<std::result::Result<Vec<Row>, _>>().with_context(|| format!("parsing {}", path.display()))
}

fn series_metrics(phase: Phase) -> &'static [&'static str] {
    match phase {
        Phase::Instruct => &["loss", "accuracy", "bits", "delay_s", "energy_J"],
        Phase::Reward => &["loss", "accuracy", "bits", "delay_s", "energy_J"],
        Phase::Align => &["loss", "r_helpful", "r_harmless", "r_total", "bits", "delay_s", "energy_J"],
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Global rows of every phase present on disk, keyed by phase.
fn load_globals(layout: &Layout) -> Result<BTreeMap<Phase, Vec<Row>>> {
    let mut out = BTreeMap::new();
    for p in Phase::ALL {
        let path = layout.rounds(p);
        if path.is_file() {
            out.insert(p, read_rounds(&path)?.into_iter().filter(Row::is_global).collect());
        }
    }
    Ok(out)
}

fn strategies(globals: &BTreeMap<Phase, Vec<Row>>) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for rows in globals.values() {
        for r in rows {
            if !names.contains(&r.strategy) {
                names.push(r.strategy.clone());
            }
        }
    }
    names
}

pub const COMPARISON_HEADER: [&str; 8] =
    ["strategy", "accuracy", "bits", "delay_s", "energy_J", "r_helpful", "r_harmless", "r_total"];

/// Strategy × final accuracy, mean per-round instruct cost, and final
/// alignment rewards. Missing phases leave blank cells.
pub fn comparison(layout: &Layout) -> Result<Vec<[String; 8]>> {
    let globals = load_globals(layout)?;
    let mut table = Vec::new();
    for s in strategies(&globals) {
        let rows = |p: Phase| -> Vec<&Row> {
            globals.get(&p).map(|v| v.iter().filter(|r| r.strategy == s).collect()).unwrap_or_default()
        };
        let instr = rows(Phase::Instruct);
        let align = rows(Phase::Align);
        let mean = |f: fn(&Row) -> f64| -> Option<f64> {
            (!instr.is_empty()).then(|| instr.iter().map(|r| f(r)).sum::<f64>() / instr.len() as f64)
        };
        let last_align = align.last();
        table.push([
            s.clone(),
            cell(instr.last().and_then(|r| r.accuracy)),
            cell(mean(|r| r.bits as f64)),
            cell(mean(|r| r.delay_s)),
            cell(mean(|r| r.energy_j)),
            cell(last_align.and_then(|r| r.r_helpful)),
            cell(last_align.and_then(|r| r.r_harmless)),
            cell(last_align.and_then(|r| r.r_total)),
        ]);
    }
    Ok(table)
}

pub fn write_comparison(layout: &Layout) -> Result<()> {
    let mut w = csv::Writer::from_path(layout.comparison())?;
    w.write_record(COMPARISON_HEADER)?;
    for row in comparison(layout)? {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-round series, one file per phase and metric with one column per
/// strategy, plus the comparison table. Returns the files written.
pub fn render(layout: &Layout) -> Result<Vec<String>> {
    let globals = load_globals(layout)?;
    if globals.is_empty() {
        let expected: Vec<String> = Phase::ALL.iter().map(|&p| display(&layout.root, &layout.rounds(p))).collect();
        bail!("no round metrics in {}; expected one or more of: {}", layout.root.display(), expected.join(", "));
    }
    let dir = layout.report_dir();
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (&phase, rows) in &globals {
        let names = strategies(&BTreeMap::from([(phase, rows.clone())]));
        let mut by_round: BTreeMap<usize, Vec<Option<&Row>>> = BTreeMap::new();
        for r in rows {
            let k = names.iter().position(|n| *n == r.strategy).expect("listed");
            by_round.entry(r.round).or_insert_with(|| vec![None; names.len()])[k] = Some(r);
        }
        for &m in series_metrics(phase) {
            let path = dir.join(format!("{}_{}.csv", phase.as_str(), m));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(std::iter::once("round".to_string()).chain(names.iter().cloned()))?;
            for (round, cols) in &by_round {
                let vals = cols.iter().map(|r| cell(r.and_then(|r| r.metric(m))));
                w.write_record(std::iter::once(round.to_string()).chain(vals))?;
            }
            w.flush()?;
            written.push(display(&layout.root, &path));
        }
    }
    write_comparison(layout)?;
    written.push(display(&layout.root, &layout.comparison()));
    Ok(written)
}
