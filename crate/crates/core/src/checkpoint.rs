//! Checkpoint directories: parameters as GRID1 f64 records, the run config
//! and a manifest with the training stage and file hashes.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::dataset::write_manifest;
use crate::data::grid1::{self, Record};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const PARAMS_FILE: &str = "params.grid1";
const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PretrainGlobal,
    OneStep,
    RolloutFt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainGlobal => "pretrain-global",
            Stage::OneStep => "one-step",
            Stage::RolloutFt => "rollout-ft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Stage::PretrainGlobal, Stage::OneStep, Stage::RolloutFt].into_iter().find(|st| st.name() == s)
    }
}

/// Parsed `manifest.toml`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    pub entries: toml::Table,
    pub files: Vec<(String, String)>,
}

impl Manifest {
    pub fn entry(&self, key: &str) -> Option<&str> {
        self.entries.get(key).and_then(|v| v.as_str())
    }
}

/// Reads a manifest and verifies every listed file hash.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::Pipeline(format!("cannot read {}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse(0, e.to_string()))?;
    let take = |t: &mut toml::Table, key: &str| -> Result<String> {
        t.remove(key)
            .and_then(|v| v.as_str().map(str::to_string))
            .ok_or_else(|| Error::Pipeline(format!("{} lacks `{key}`", path.display())))
    };
    let kind = take(&mut table, "kind")?;
    let config_hash = take(&mut table, "config_hash")?;
    let files = match table.remove("files") {
        Some(toml::Value::Table(f)) => f.into_iter().map(|(k, v)| (k, v.as_str().unwrap_or_default().to_string())).collect::<Vec<_>>(),
        _ => Vec::new(),
    };
    for (name, hash) in &files {
        let actual =
            crate::data::sha256_file(&dir.join(name)).map_err(|e| Error::Pipeline(format!("{}: {e}", dir.join(name).display())))?;
        if &actual != hash {
            return Err(Error::Pipeline(format!("{} does not match its manifest hash", dir.join(name).display())));
        }
    }
    Ok(Manifest { kind, config_hash, entries: table, files })
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: RunConfig,
    pub params: ParamStore,
    pub manifest: Manifest,
}

/// Writes `params` with stage metadata; `extra` entries and `extra_files`
/// (already present in `dir`) go into the manifest.
pub fn save(
    dir: &Path,
    stage: Stage,
    run: &RunConfig,
    seed: u64,
    params: &ParamStore,
    extra: &[(&str, String)],
    extra_files: &[String],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let records: Vec<Record> = params.iter().map(|(n, t)| Record::f64(n, t.clone())).collect();
    grid1::write(&dir.join(PARAMS_FILE), &records)?;
    fs::write(dir.join(CONFIG_FILE), run.to_toml())?;
    let mut entries = vec![("stage", stage.name().to_string()), ("seed", seed.to_string())];
    entries.extend(extra.iter().cloned());
    let mut files = vec![PARAMS_FILE.to_string(), CONFIG_FILE.to_string()];
    files.extend(extra_files.iter().cloned());
    write_manifest(dir, "checkpoint", &run.hash(), &entries, &files)
}

/// Loads a checkpoint, checking hashes and that it was written by `want`.
pub fn load(dir: &Path, want: Stage) -> Result<Checkpoint> {
    if !dir.join("manifest.toml").exists() {
        return Err(Error::Pipeline(format!(
            "no {} checkpoint at {}; run `train --stage {}` first",
            want.name(),
            dir.display(),
            want.name()
        )));
    }
    let manifest = read_manifest(dir)?;
    let stage = manifest.entry("stage").and_then(Stage::parse);
    if manifest.kind != "checkpoint" || stage != Some(want) {
        return Err(Error::Pipeline(format!(
            "{} holds a {} artifact, expected a {} checkpoint",
            dir.display(),
            manifest.entry("stage").unwrap_or(&manifest.kind),
            want.name()
        )));
    }
    let config = RunConfig::from_toml(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let mut params = ParamStore::new();
    for r in grid1::read(&dir.join(PARAMS_FILE))? {
        params.insert(r.name.clone(), r.data.to_f64());
    }
    Ok(Checkpoint { stage: want, config, params, manifest })
}
