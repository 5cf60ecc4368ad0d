use std::io::Write;

use anyhow::Result;
use covrank::synth::{generate, write_biased_tabular};
use covrank::votes::Format;
use log::info;

use crate::config::RunConfig;
use crate::output::{create, fresh_dir, write_json};

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synth.mixture(cfg.seed)?;
    let (vs, truth) = generate(&spec)?;
    let dir = cfg.out.join("synth");
    fresh_dir(&dir)?;

    let mut w = create(&dir.join("votes.jsonl"))?;
    vs.write(&mut w, Format::JsonLines)?;
    w.flush()?;
    let mut w = create(&dir.join("ground_truth.json"))?;
    truth.write_json(&mut w)?;
    w.flush()?;
    write_json(&dir.join("spec.json"), &spec)?;

    if cfg.synth.tabular_rows > 0 {
        let mut w = create(&dir.join("tabular.csv"))?;
        write_biased_tabular(&mut w, cfg.synth.tabular_rows, cfg.seed)?;
        w.flush()?;
    }
    info!("wrote {} votes to {}", vs.len(), dir.display());
    Ok(())
}
