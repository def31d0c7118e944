use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::events::write_jsonl;
use crate::netsim::FaultAction;

use super::campaign::{CampaignResult, Mode, OracleFinding, StepRecord};
use super::config::CampaignConfig;
use super::HarnessError;

/// Layout version of a campaign directory.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub mode: Mode,
    pub seed: u64,
    pub steps: u64,
    pub distinct_states: u64,
    pub findings: u64,
    pub digest: String,
}

impl Manifest {
    pub fn current_tool_version() -> String {
        format!("chronofuzz {}", env!("CARGO_PKG_VERSION"))
    }

    /// Replay is only meaningful on the build that recorded the campaign.
    pub fn check_tool_version(&self) -> Result<(), HarnessError> {
        let current = Self::current_tool_version();
        if self.tool_version != current {
            return Err(HarnessError::VersionMismatch { recorded: self.tool_version.clone(), current });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCampaign {
    pub config: CampaignConfig,
    pub manifest: Manifest,
    pub steps: Vec<StepRecord>,
    pub faults: Vec<FaultAction>,
    pub findings: Vec<OracleFinding>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| io_err(path, e))
}

/// Writes every campaign artefact into `dir`, creating it if needed.
pub fn write_campaign(dir: &Path, result: &CampaignResult) -> Result<Manifest, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tool_version: Manifest::current_tool_version(),
        mode: result.mode,
        seed: result.config.seed,
        steps: result.steps.len() as u64,
        distinct_states: result.distinct_states() as u64,
        findings: result.findings.len() as u64,
        digest: result.digest(),
    };

    let path = dir.join("config.toml");
    fs::write(&path, result.config.to_toml_string()).map_err(|e| io_err(&path, e))?;
    write_json(&dir.join("manifest.json"), &manifest)?;

    let path = dir.join("steps.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for s in &result.steps {
        w.serialize(s).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let faults: Vec<FaultAction> = result.steps.iter().map(StepRecord::fault).collect();
    write_json(&dir.join("faults.json"), &faults)?;
    write_json(&dir.join("findings.json"), &result.findings)?;

    let path = dir.join("states.csv");
    result.registry.write_csv(create(&path)?).map_err(|e| io_err(&path, e))?;
    let path = dir.join("qtable.csv");
    result.qtable.write_csv(create(&path)?).map_err(|e| io_err(&path, e))?;
    let path = dir.join("qtable.json");
    result.qtable.save_checkpoint(create(&path)?).map_err(|e| io_err(&path, e))?;

    if !result.events.is_empty() {
        let path = dir.join("events.jsonl");
        let mut w = create(&path)?;
        write_jsonl(&mut w, &result.events).map_err(|e| io_err(&path, e))?;
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    for (step, dot) in &result.dots {
        let path = dir.join(format!("timeline_step{step}.dot"));
        fs::write(&path, dot).map_err(|e| io_err(&path, e))?;
    }
    Ok(manifest)
}

/// Reads back what replay and reporting need.
pub fn load_campaign(dir: &Path) -> Result<LoadedCampaign, HarnessError> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(HarnessError::VersionMismatch {
            recorded: format!("format {}", manifest.format_version),
            current: format!("format {FORMAT_VERSION}"),
        });
    }
    let path = dir.join("config.toml");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let config = CampaignConfig::from_toml_str(&text)?;
    let path = dir.join("steps.csv");
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(&path).map_err(|e| io_err(&path, e))?));
    let steps = r
        .deserialize()
        .collect::<Result<Vec<StepRecord>, _>>()
        .map_err(|e| io_err(&path, e))?;
    let faults = read_json(&dir.join("faults.json"))?;
    let findings = read_json(&dir.join("findings.json"))?;
    Ok(LoadedCampaign { config, manifest, steps, faults, findings })
}
