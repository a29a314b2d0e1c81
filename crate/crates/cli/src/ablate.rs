//! `ablate`: sampling/coupling variants and the depth sweep around one global checkpoint.

use std::fs;
use std::path::Path;

use anyhow::Result;

use scalemixer_core::ablation::{relative_delta, run_ablation, VariantRun};
use scalemixer_core::checkpoint::{self, Stage};
use scalemixer_core::config::RunConfig;
use scalemixer_core::data::dataset::write_manifest;
use scalemixer_core::train::{self, TrainContext};

use crate::pipeline::load_data;

/// Deterministic outcome of an ablation (timings excluded).
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub main: Vec<VariantRun>,
    pub sweep: Vec<VariantRun>,
    pub table: String,
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

fn write_scores(path: &Path, runs: &[VariantRun], full: &VariantRun) -> Result<()> {
    let f = &full.scores;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "t_rmse", "u_rmse", "t_delta", "u_delta", "val_mae", "val_mae_delta", "final_train_loss"])?;
    for r in runs {
        let s = &r.scores;
        w.write_record([
            s.variant.label(),
            fmt(s.t_rmse),
            fmt(s.u_rmse),
            fmt(relative_delta(s.t_rmse, f.t_rmse)),
            fmt(relative_delta(s.u_rmse, f.u_rmse)),
            fmt(s.val_mae),
            fmt(relative_delta(s.val_mae, f.val_mae)),
            fmt(s.final_train_loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn render(title: &str, runs: &[VariantRun], full: &VariantRun) -> String {
    let f = &full.scores;
    let pct = |v: f64, b: f64| format!("{:+.1}%", 100.0 * relative_delta(v, b));
    let mut s = format!(
        "{title}\n{:<12}{:>11}{:>9}{:>11}{:>9}{:>11}{:>9}{:>12}\n",
        "variant", "T RMSE", "dT", "U RMSE", "dU", "val MAE", "dMAE", "s/step"
    );
    for r in runs {
        let v = &r.scores;
        s.push_str(&format!(
            "{:<12}{:>11.4}{:>9}{:>11.4}{:>9}{:>11.4}{:>9}{:>12.4}\n",
            v.variant.label(),
            v.t_rmse,
            pct(v.t_rmse, f.t_rmse),
            v.u_rmse,
            pct(v.u_rmse, f.u_rmse),
            v.val_mae,
            pct(v.val_mae, f.val_mae),
            r.seconds_per_step
        ));
    }
    s
}

/// Trains every variant from the global checkpoint in `global_dir` and writes
/// the score tables, a timing table and one checkpoint per variant.
pub fn ablate(
    run: &RunConfig,
    seed: u64,
    data_dir: &Path,
    global_dir: &Path,
    out: &Path,
    mut progress: impl FnMut(&VariantRun),
) -> Result<AblationOutcome> {
    let global = checkpoint::load(global_dir, Stage::PretrainGlobal)?;
    let loaded = load_data(data_dir, run)?;
    let ctx = TrainContext { run, data: &loaded.data, stats: &loaded.stats, seed };
    let (main, sweep) = run_ablation(&ctx, &train::global_subset(&global.params), &mut progress)?;
    let full = &main[0];
    fs::create_dir_all(out)?;
    write_scores(&out.join("ablation_variants.csv"), &main, full)?;
    write_scores(&out.join("ablation_depth.csv"), &sweep, full)?;

    // Wall-clock numbers vary between runs, so they stay out of the manifest.
    let mut w = csv::Writer::from_path(out.join("timing.csv"))?;
    w.write_record(["variant", "seconds_per_step", "train_seconds"])?;
    for r in main.iter().chain(&sweep) {
        w.write_record([r.scores.variant.label(), format!("{:.6}", r.seconds_per_step), format!("{:.3}", r.train_seconds)])?;
    }
    w.flush()?;
    let table = format!(
        "{}\n{}\nRMSE averaged over lead times 1..={} h; deltas relative to the full model.\n",
        render("sampling and coupling variants", &main, full),
        render("regional depth", &sweep, full),
        run.eval.ablation_lead_hours
    );
    fs::write(out.join("ablation.txt"), &table)?;

    let mut files = vec!["ablation_variants.csv".to_string(), "ablation_depth.csv".to_string()];
    for r in main.iter().chain(&sweep) {
        let label = r.scores.variant.label();
        let sub = format!("variants/{label}");
        let vrun = r.scores.variant.apply(run);
        let extra = [("val_mae_normalized", fmt(r.scores.val_mae)), ("final_loss", fmt(r.scores.final_train_loss))];
        checkpoint::save(&out.join(&sub), Stage::OneStep, &vrun, seed, &r.params, &extra, &[])?;
        files.push(format!("{sub}/manifest.toml"));
    }
    files.dedup();
    write_manifest(out, "ablation", &run.hash(), &[("seed", seed.to_string())], &files)?;
    Ok(AblationOutcome { main, sweep, table })
}
