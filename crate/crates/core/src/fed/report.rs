use std::io::Write;

use super::run::Phase;
use super::strategy::StrategyName;
use crate::error::{PwffError, Result};

pub const CSV_HEADER: [&str; 11] = [
    "round",
    "strategy",
    "client_id",
    "loss",
    "accuracy",
    "bits",
    "delay_s",
    "energy_J",
    "r_helpful",
    "r_harmless",
    "r_total",
];

/// One row of a round report; `client = None` is the global row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientRound {
    pub client: Option<usize>,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub bits: u64,
    pub delay_s: f64,
    pub energy_j: f64,
    pub r_helpful: Option<f64>,
    pub r_harmless: Option<f64>,
    pub forbidden_rate: Option<f64>,
}

impl ClientRound {
    pub fn r_total(&self) -> Option<f64> {
        Some(self.r_helpful? + self.r_harmless?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub phase: Phase,
    pub round: usize,
    pub strategy: StrategyName,
    pub clients: Vec<ClientRound>,
    pub global: ClientRound,
}

impl RoundReport {
    /// Uplink (and, if metered, downlink) bits summed over clients.
    pub fn bits(&self) -> u64 {
        self.global.bits
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn row(round: usize, strategy: StrategyName, r: &ClientRound) -> [String; 11] {
    [
        round.to_string(),
        strategy.to_string(),
        r.client.map(|c| c.to_string()).unwrap_or_else(|| "GLOBAL".into()),
        opt(r.loss),
        opt(r.accuracy),
        r.bits.to_string(),
        r.delay_s.to_string(),
        r.energy_j.to_string(),
        opt(r.r_helpful),
        opt(r.r_harmless),
        opt(r.r_total()),
    ]
}

/// Client rows followed by the global row for every round.
pub fn write_csv<W: Write>(reports: &[RoundReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| PwffError::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for rep in reports {
        for c in rep.clients.iter().chain(std::iter::once(&rep.global)) {
            w.write_record(row(rep.round, rep.strategy, c)).map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rep = RoundReport {
            phase: Phase::Instruct,
            round: 1,
            strategy: StrategyName::Pwff,
            clients: vec![ClientRound { client: Some(0), loss: Some(0.5), bits: 32, ..Default::default() }],
            global: ClientRound {
                accuracy: Some(0.25),
                bits: 32,
                r_helpful: Some(0.5),
                r_harmless: Some(1.0),
                ..Default::default()
            },
        };
        let mut buf = Vec::new();
        write_csv(&[rep], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "round,strategy,client_id,loss,accuracy,bits,delay_s,energy_J,r_helpful,r_harmless,r_total"
        );
        assert_eq!(lines[1], "1,PWFF,0,0.5,,32,0,0,,,");
        assert_eq!(lines[2], "1,PWFF,GLOBAL,,0.25,32,0,0,0.5,1,1.5");
    }
}
