//! `forecast`: autoregressive rollouts written as GRID1 records plus CSV exports.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;

use scalemixer_core::checkpoint::{self, read_manifest, Checkpoint, Stage};
use scalemixer_core::config::{LEAD_HOURS, REGIONAL_VARIABLES};
use scalemixer_core::data::dataset::{iso_timestamp, write_geometry, write_manifest, Split, GLOBAL_VARIABLES};
use scalemixer_core::data::grid1::{self, Record};
use scalemixer_core::forecaster;
use scalemixer_core::{Error, Tensor};

use crate::pipeline::load_data;

/// Name of the regional record at `lead` hours.
pub fn regional_record_name(lead: usize) -> String {
    format!("u_lead_{lead:03}")
}

pub fn global_record_name(lead: usize) -> String {
    format!("global_lead_{lead:03}")
}

pub fn origin_dir_name(origin: usize) -> String {
    format!("origin_{origin:06}")
}

/// Loads a regional-capable checkpoint (one-step or rollout fine-tuned).
pub fn load_forecaster(dir: &Path) -> Result<Checkpoint> {
    let stage = if dir.join("manifest.toml").exists() { read_manifest(dir)?.entry("stage").and_then(Stage::parse) } else { None };
    match stage {
        Some(Stage::RolloutFt) => Ok(checkpoint::load(dir, Stage::RolloutFt)?),
        Some(Stage::PretrainGlobal) => Err(Error::Pipeline(format!(
            "{} holds only the global model; forecasting needs a one-step or rollout-ft checkpoint",
            dir.display()
        ))
        .into()),
        _ => Ok(checkpoint::load(dir, Stage::OneStep)?),
    }
}

/// Which initial conditions to forecast from.
#[derive(Clone, Copy, Debug)]
pub enum Origins {
    /// A single analysis hour.
    Hour(usize),
    /// Every usable origin of a split.
    Split(Split),
}

fn write_field_csv(path: &Path, frames: &[(usize, &Tensor)], lat: &[f64], lon: &[f64], var: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lead_hour", "lat", "lon", "value"])?;
    for (lead, t) in frames {
        let c = t.last_dim();
        for (i, la) in lat.iter().enumerate() {
            for (j, lo) in lon.iter().enumerate() {
                let v = t.data()[(i * lon.len() + j) * c + var];
                w.write_record([lead.to_string(), la.to_string(), lo.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs `steps` coupled steps from each origin and writes one directory per origin.
pub fn forecast(
    checkpoint_dir: &Path,
    data_dir: &Path,
    origins: Origins,
    steps: usize,
    csv: bool,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if steps == 0 {
        return Err(Error::config("--steps", "must be at least 1").into());
    }
    let ck = load_forecaster(checkpoint_dir)?;
    let run = &ck.config;
    let loaded = load_data(data_dir, run).map_err(|e| match e.downcast::<Error>() {
        Ok(Error::Config { message, .. }) => Error::geometry(format!("checkpoint and inputs disagree: {message}")).into(),
        Ok(other) => other.into(),
        Err(e) => e,
    })?;
    let (data, stats) = (&loaded.data, &loaded.stats);
    let hours = match origins {
        Origins::Hour(h) => {
            if h % LEAD_HOURS != 0 || h + 1 < scalemixer_core::config::HISTORY_FRAMES || h >= data.n_hours() {
                return Err(Error::config("--origin", format!("hour {h} is not a usable analysis time")).into());
            }
            vec![h]
        }
        Origins::Split(split) => data.sample_origins(split, steps),
    };
    if hours.is_empty() {
        return Err(Error::Pipeline("no usable forecast origins".into()).into());
    }
    fs::create_dir_all(out)?;
    let ckpt_hash = scalemixer_core::data::sha256_file(&checkpoint_dir.join("params.grid1"))?;
    let pred_stats = stats.global_predicted(&run.model);
    let gvars: Vec<&str> = GLOBAL_VARIABLES[..run.model.predicted_channels()].to_vec();
    let mut rng = scalemixer_core::train::eval_rng(seed);
    let mut written = Vec::new();
    let mut all_files = Vec::new();
    for &t0 in &hours {
        let sample = data.sample(t0, 0, stats, &run.model)?;
        let bundles = forecaster::rollout(&ck.params, &run.model, &sample.global, &sample.regional, steps, &mut rng)?;
        let name = origin_dir_name(t0);
        let dir = out.join(&name);
        fs::create_dir_all(&dir)?;
        let mut regional = Vec::new();
        let mut global = Vec::new();
        for (n, b) in bundles.iter().enumerate() {
            for (dt, f) in b.regional.iter().enumerate() {
                let lead = n * LEAD_HOURS + dt + 1;
                regional.push(Record::f64(regional_record_name(lead), stats.regional.inverse(f)?));
            }
            global.push(Record::f64(global_record_name((n + 1) * LEAD_HOURS), pred_stats.inverse(&b.global)?));
        }
        grid1::write(&dir.join("regional.grid1"), &regional)?;
        grid1::write(&dir.join("global.grid1"), &global)?;
        let ts = iso_timestamp(data.start_day, t0);
        write_geometry(&dir.join("regional.geom"), &data.regional_lat, &data.regional_lon, &REGIONAL_VARIABLES, &ts)?;
        write_geometry(&dir.join("global.geom"), &data.global_lat, &data.global_lon, &gvars, &ts)?;
        let mut files =
            vec!["regional.grid1", "global.grid1", "regional.geom", "global.geom"].into_iter().map(String::from).collect::<Vec<_>>();
        if csv {
            fs::create_dir_all(dir.join("csv"))?;
            let frames: Vec<(usize, &Tensor)> = regional
                .iter()
                .enumerate()
                .map(|(i, r)| match &r.data {
                    grid1::RecordData::F64(t) => (i + 1, t),
                    grid1::RecordData::F32(_) => unreachable!("forecasts are written as f64"),
                })
                .collect();
            for (k, v) in REGIONAL_VARIABLES.iter().enumerate() {
                let f = format!("csv/regional_{v}.csv");
                write_field_csv(&dir.join(&f), &frames, &data.regional_lat, &data.regional_lon, k)?;
                files.push(f);
            }
            let gframes: Vec<(usize, &Tensor)> = global
                .iter()
                .enumerate()
                .map(|(i, r)| match &r.data {
                    grid1::RecordData::F64(t) => ((i + 1) * LEAD_HOURS, t),
                    grid1::RecordData::F32(_) => unreachable!("forecasts are written as f64"),
                })
                .collect();
            for (k, v) in gvars.iter().enumerate() {
                let f = format!("csv/global_{v}.csv");
                write_field_csv(&dir.join(&f), &gframes, &data.global_lat, &data.global_lon, k)?;
                files.push(f);
            }
        }
        write_manifest(
            &dir,
            "forecast",
            &run.hash(),
            &[
                ("origin_hour", t0.to_string()),
                ("origin_time", ts.clone()),
                ("steps", steps.to_string()),
                ("checkpoint_sha256", ckpt_hash.clone()),
            ],
            &files,
        )?;
        all_files.push(format!("{name}/manifest.toml"));
        written.push(dir);
    }
    write_manifest(
        out,
        "forecast-set",
        &run.hash(),
        &[("steps", steps.to_string()), ("origins", hours.len().to_string()), ("seed", seed.to_string())],
        &all_files,
    )?;
    Ok(written)
}
