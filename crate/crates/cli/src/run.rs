//! Phase execution with checkpoint hand-off between subcommands.

use std::fs;

use anyhow::{bail, Context, Result};
use pwff_core::fed::{write_csv, Federation, Phase, RoundReport, StrategyName};
use pwff_core::model::checkpoint;

use crate::artifacts::{display, Layout};
use crate::config::ExperimentConfig;
use crate::report;

const OBJECTIVES: [&str; 2] = ["helpful", "harmless"];

/// Checkpoints a phase reads, per strategy, with the subcommand producing them.
fn required(cfg: &ExperimentConfig, layout: &Layout, phase: Phase) -> Vec<(std::path::PathBuf, Phase)> {
    let mut need = Vec::new();
    for &s in &cfg.strategies {
        if phase != Phase::Instruct {
            for c in 0..cfg.n_clients {
                need.push((layout.client_checkpoint(s, c), Phase::Instruct));
            }
        }
        if phase == Phase::Align {
            for o in OBJECTIVES {
                need.push((layout.reward_checkpoint(s, o), Phase::Reward));
            }
        }
    }
    need
}

fn check_inputs(cfg: &ExperimentConfig, layout: &Layout, phase: Phase) -> Result<()> {
    for (path, producer) in required(cfg, layout, phase) {
        if !path.is_file() {
            bail!(
                "the {} phase needs checkpoint {} in {}; run `pwff-sim {}` with the same config and --out first",
                phase.as_str(),
                display(&layout.root, &path),
                layout.root.display(),
                producer.as_str()
            );
        }
    }
    Ok(())
}

/// A federation for `s` with every earlier phase restored from disk.
fn restore(cfg: &ExperimentConfig, layout: &Layout, s: StrategyName, phase: Phase) -> Result<Federation> {
    let mut fed = Federation::new(cfg.sim(), s, cfg.seed)?;
    if phase != Phase::Instruct {
        let models = (0..cfg.n_clients)
            .map(|c| checkpoint::load(&layout.client_checkpoint(s, c)))
            .collect::<pwff_core::Result<Vec<_>>>()?;
        fed.resume_instruct(models).with_context(|| format!("restoring {} instruct checkpoints", s))?;
    }
    if phase == Phase::Align {
        let helpful = checkpoint::load(&layout.reward_checkpoint(s, "helpful"))?;
        let harmless = checkpoint::load(&layout.reward_checkpoint(s, "harmless"))?;
        fed.resume_reward(helpful, harmless).with_context(|| format!("restoring {} reward checkpoints", s))?;
    }
    Ok(fed)
}

fn save(fed: &Federation, layout: &Layout, phase: Phase) -> Result<()> {
    let s = fed.strategy.name;
    match phase {
        Phase::Instruct => {
            for c in &fed.clients {
                checkpoint::save(c.model.params(), &layout.client_checkpoint(s, c.id))?;
            }
        }
        Phase::Reward => {
            let rms = fed.server.reward.as_ref().context("reward phase left no global reward models")?;
            checkpoint::save(rms.helpful.params(), &layout.reward_checkpoint(s, "helpful"))?;
            checkpoint::save(rms.harmless.params(), &layout.reward_checkpoint(s, "harmless"))?;
        }
        Phase::Align => {}
    }
    Ok(())
}

/// Run one phase for every configured strategy, then refresh the tables.
pub fn run_phase(cfg: &ExperimentConfig, layout: &Layout, phase: Phase) -> Result<()> {
    check_inputs(cfg, layout, phase)?;
    let mut reports: Vec<RoundReport> = Vec::new();
    for &s in &cfg.strategies {
        let mut fed = restore(cfg, layout, s, phase)?;
        let r = fed.run_phase(phase).with_context(|| format!("{} phase failed for {}", phase.as_str(), s))?;
        save(&fed, layout, phase)?;
        reports.extend(r);
    }
    let path = layout.rounds(phase);
    fs::create_dir_all(path.parent().expect("phase dir"))?;
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(&reports, std::io::BufWriter::new(file))?;
    report::write_comparison(layout)?;
    Ok(())
}

/// Entry point for the phase subcommands: `phases` run in order.
pub fn execute(cfg: &ExperimentConfig, layout: &Layout, phases: &[Phase]) -> Result<()> {
    fs::create_dir_all(&layout.root).with_context(|| format!("creating {}", layout.root.display()))?;
    let marker = layout.error_marker();
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    fs::write(layout.config(), cfg.resolved())?;
    let mut result = Ok(());
    for &p in phases {
        result = run_phase(cfg, layout, p);
        if result.is_err() {
            break;
        }
    }
    if let Err(e) = &result {
        fs::write(&marker, format!("{:#}\n", e))?;
    }
    result
}
