//! `gen-data`, `train` and `gradcheck`.

use std::fs;
use std::path::Path;

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalemixer_core::checkpoint::{self, read_manifest, Stage};
use scalemixer_core::config::RunConfig;
use scalemixer_core::data::dataset::{check_geometry, generate_synthetic, write_manifest, Dataset, NormStats, Split};
use scalemixer_core::data::stations::{Station, StationSet};
use scalemixer_core::gradcheck::SiteReport;
use scalemixer_core::train::{self, regional_log_columns, write_log_csv, TrainContext};
use scalemixer_core::verify::{gradcheck_suite, GradcheckSettings};
use scalemixer_core::Error;

use crate::GradcheckFailed;

/// Stations at a few regional grid nodes plus points between nodes.
fn sample_stations(data: &Dataset, seed: u64) -> StationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5747_4154);
    let (lat, lon) = (&data.regional_lat, &data.regional_lon);
    let mut stations = Vec::new();
    for k in 0..12 {
        let (i, j) = (rng.gen_range(0..lat.len() - 1), rng.gen_range(0..lon.len() - 1));
        let (la, lo) = if k % 2 == 0 {
            (lat[i], lon[j])
        } else {
            let (fi, fj): (f64, f64) = (rng.gen(), rng.gen());
            (lat[i] + fi * (lat[i + 1] - lat[i]), lon[j] + fj * (lon[j + 1] - lon[j]))
        };
        stations.push(Station { id: format!("S{k:02}"), lat: la, lon: lo, values: Vec::new() });
    }
    StationSet { stations }
}

pub fn gen_data(run: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let data = generate_synthetic(&run.data, seed)?;
    let stats = data.compute_stats()?;
    fs::create_dir_all(out)?;
    sample_stations(&data, seed).write_csv(&out.join("stations.csv"), &[])?;
    data.write_dir(out, &stats, &run.to_toml(), &run.hash())?;
    // Rewrite the manifest so it also covers the station list.
    let manifest = read_manifest(out)?;
    let mut files: Vec<String> = manifest.files.iter().map(|(f, _)| f.clone()).collect();
    files.push("stations.csv".into());
    let extra: Vec<(String, String)> = manifest
        .entries
        .iter()
        .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
        .chain([("seed".to_string(), seed.to_string())])
        .collect();
    let extra: Vec<(&str, String)> = extra.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_manifest(out, "dataset", &run.hash(), &extra, &files)?;
    Ok(())
}

/// A verified dataset directory with its statistics.
pub struct LoadedData {
    pub data: Dataset,
    pub stats: NormStats,
}

pub fn load_data(dir: &Path, run: &RunConfig) -> Result<LoadedData> {
    if !dir.join("manifest.toml").exists() {
        return Err(Error::Pipeline(format!("no dataset at {}; run `gen-data` first", dir.display())).into());
    }
    let manifest = read_manifest(dir)?;
    if manifest.kind != "dataset" {
        return Err(Error::Pipeline(format!("{} is a {} directory, not a dataset", dir.display(), manifest.kind)).into());
    }
    let generated = RunConfig::from_toml(&fs::read_to_string(dir.join("config.toml"))?)?;
    if generated.data != run.data {
        return Err(Error::config("data", format!("{} was generated with a different scenario", dir.display())).into());
    }
    let data = Dataset::read_dir(dir)?;
    check_geometry(&data, &run.model)?;
    let stats = NormStats::from_toml(&fs::read_to_string(dir.join("stats.toml"))?)?;
    Ok(LoadedData { data, stats })
}

/// Result of a training stage, as recorded in its manifest.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub entries: Vec<(String, String)>,
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

pub fn train(run: &RunConfig, seed: u64, stage: Stage, data_dir: &Path, init: Option<&Path>, out: &Path) -> Result<TrainSummary> {
    let needs = match stage {
        Stage::PretrainGlobal => None,
        Stage::OneStep => Some(Stage::PretrainGlobal),
        Stage::RolloutFt => Some(Stage::OneStep),
    };
    let prior = match (needs, init) {
        (None, _) => None,
        (Some(want), Some(dir)) => Some(checkpoint::load(dir, want)?),
        (Some(want), None) => {
            return Err(Error::Pipeline(format!("stage {} needs a {} checkpoint (pass --init)", stage.name(), want.name())).into())
        }
    };
    let loaded = load_data(data_dir, run)?;
    let ctx = TrainContext { run, data: &loaded.data, stats: &loaded.stats, seed };
    fs::create_dir_all(out)?;
    let mut entries: Vec<(String, String)> = Vec::new();
    let mut files = vec!["train_log.csv".to_string()];
    let result = match stage {
        Stage::PretrainGlobal => {
            let r = train::pretrain_global(&ctx)?;
            write_log_csv(&out.join("train_log.csv"), &["val_loss".to_string()], &r.log)?;
            let val = train::evaluate_global(&ctx, &r.params, Split::Val)?;
            entries.push(("val_loss".into(), fmt(val)));
            r
        }
        Stage::OneStep => {
            let global = prior.expect("checked above").params;
            let r = train::train_one_step(&ctx, &train::global_subset(&global))?;
            write_log_csv(&out.join("train_log.csv"), &regional_log_columns(), &r.log)?;
            let scores = train::evaluate_one_step(&ctx, &r.params, Split::Val)?;
            entries.push(("val_mae_normalized".into(), fmt(scores.mae_normalized)));
            r
        }
        Stage::RolloutFt => {
            let start = prior.expect("checked above").params;
            let steps = run.eval.rollout_steps;
            let before = train::evaluate_rollout(&ctx, &start, Split::Val, steps)?;
            let r = train::train_rollout_finetune(&ctx, start)?;
            write_log_csv(&out.join("train_log.csv"), &regional_log_columns(), &r.log)?;
            let after = train::evaluate_rollout(&ctx, &r.params, Split::Val, steps)?;
            let mut w = csv::Writer::from_path(out.join("rollout_eval.csv"))?;
            w.write_record(["lead_hour", "val_mae_before", "val_mae_after"])?;
            for (lead, (b, a)) in before.mae_normalized.iter().zip(&after.mae_normalized).enumerate() {
                w.write_record([(lead + 1).to_string(), fmt(*b), fmt(*a)])?;
            }
            w.flush()?;
            files.push("rollout_eval.csv".into());
            let last = before.mae_normalized.len() - 1;
            entries.push(("lead1_mae_before".into(), fmt(before.mae_normalized[0])));
            entries.push(("lead1_mae_after".into(), fmt(after.mae_normalized[0])));
            entries.push((format!("lead{}_mae_before", last + 1), fmt(before.mae_normalized[last])));
            entries.push((format!("lead{}_mae_after", last + 1), fmt(after.mae_normalized[last])));
            r
        }
    };
    entries.push(("final_loss".into(), fmt(result.final_loss)));
    let extra: Vec<(&str, String)> = entries.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    checkpoint::save(out, stage, run, seed, &result.params, &extra, &files)?;
    Ok(TrainSummary { final_loss: result.final_loss, entries })
}

/// Runs the full verification suite; fails with [`GradcheckFailed`] above `tol`.
pub fn gradcheck(
    run: &RunConfig,
    seed: u64,
    tol: f64,
    out: Option<&Path>,
    mut print: impl FnMut(&SiteReport, bool),
) -> Result<Vec<SiteReport>> {
    let reports = gradcheck_suite(&run.model, seed, &GradcheckSettings::default())?;
    for r in &reports {
        print(r, r.passes(tol));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("gradcheck.csv"))?;
        w.write_record(["site", "worst_rel_err", "checked", "pass"])?;
        for r in &reports {
            w.write_record([r.name.clone(), format!("{:e}", r.worst_rel_err), r.checked.to_string(), r.passes(tol).to_string()])?;
        }
        w.flush()?;
        write_manifest(
            dir,
            "gradcheck",
            &run.hash(),
            &[("seed", seed.to_string()), ("tol", format!("{tol:e}"))],
            &["gradcheck.csv".into()],
        )?;
    }
    let failed = reports.iter().filter(|r| !r.passes(tol)).count();
    if failed > 0 {
        return Err(GradcheckFailed { failed, total: reports.len(), tol }.into());
    }
    Ok(reports)
}
