mod common;

use std::fs;
use std::path::Path;

use common::{p, read_csv, scalemixer, toy_pipeline, tree_digest, write_config};
use scalemixer_core::ablation::Variant;
use scalemixer_core::checkpoint::{self, Stage};
use scalemixer_core::config::{RunConfig, REGIONAL_VARIABLES};
use scalemixer_core::data::dataset::{write_manifest, Dataset};
use scalemixer_core::data::grid1::{self, Record};
use scalemixer_core::forecaster;

use scalemixer_cli::evaluate::{self, REPORT_HOURS};

fn parse(s: &str) -> f64 {
    s.parse().unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn stage_prerequisites_and_config_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig::toy();
    let cfg = write_config(dir.path(), &run);
    let base = ["--config", p(&cfg)];
    let with = |rest: &[&str]| -> Vec<String> { base.iter().chain(rest).map(|s| s.to_string()).collect() };

    // No dataset yet.
    let data = dir.path().join("data");
    let out = scalemixer(&with(&["train", "--stage", "pretrain-global", "--data", p(&data), "--out", p(&dir.path().join("g"))]));
    assert_eq!(out.code, 3, "{}", out.stderr);
    assert!(out.stderr.contains("gen-data"), "{}", out.stderr);

    assert_eq!(scalemixer(&with(&["gen-data", "--out", p(&data)])).code, 0);
    let out = scalemixer(&with(&["train", "--stage", "one-step", "--data", p(&data), "--out", p(&dir.path().join("r"))]));
    assert_eq!(out.code, 3, "{}", out.stderr);
    assert!(out.stderr.contains("pretrain-global"), "{}", out.stderr);

    // A one-step stage pointed at a directory without a checkpoint.
    let out =
        scalemixer(&with(&["train", "--stage", "rollout-ft", "--data", p(&data), "--init", p(&data), "--out", p(&dir.path().join("r"))]));
    assert_eq!(out.code, 3, "{}", out.stderr);

    // Forecasting needs a regional checkpoint.
    let global = dir.path().join("g");
    let params = forecaster::build_model(&run.model, 0).unwrap();
    checkpoint::save(&global, Stage::PretrainGlobal, &run, 0, &params, &[], &[]).unwrap();
    let out =
        scalemixer(&with(&["forecast", "--checkpoint", p(&global), "--data", p(&data), "--steps", "1", "--out", p(&dir.path().join("f"))]));
    assert_eq!(out.code, 3, "{}", out.stderr);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\ndimm = 3\n").unwrap();
    let out = scalemixer(&["--config", p(&bad), "gen-data", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.code, 2, "{}", out.stderr);
    assert!(out.stderr.contains("dimm"), "{}", out.stderr);

    let out = scalemixer(&with(&["train", "--stage", "warmup", "--data", p(&data), "--out", p(&dir.path().join("x"))]));
    assert_eq!(out.code, 2, "{}", out.stderr);

    // A dataset generated under another scenario is a config error.
    let mut other = run.clone();
    other.data.base_wind += 0.5;
    let other_cfg = write_config(&dir.path().join("other"), &other);
    let out = scalemixer(&[
        "--config",
        p(&other_cfg),
        "train",
        "--stage",
        "pretrain-global",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(out.code, 2, "{}", out.stderr);
}

#[test]
fn divergence_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunConfig::toy();
    run.train.pretrain_lr = f64::INFINITY;
    let cfg = write_config(dir.path(), &run);
    let data = dir.path().join("data");
    assert_eq!(scalemixer(&["--config", p(&cfg), "gen-data", "--out", p(&data)]).code, 0);
    let out =
        scalemixer(&["--config", p(&cfg), "train", "--stage", "pretrain-global", "--data", p(&data), "--out", p(&dir.path().join("g"))]);
    assert_eq!(out.code, 4, "{}", out.stderr);
    assert!(out.stderr.contains("diverged"), "{}", out.stderr);
}

#[test]
fn gradcheck_honors_tolerance_and_names_every_site() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &RunConfig::toy());
    let out = scalemixer(&["--config", p(&cfg), "gradcheck", "--tol", "1e-30", "--out", p(&dir.path().join("gc"))]);
    assert_eq!(out.code, 4, "{}", out.stderr);
    for site in [
        "attention.self",
        "attention.cross",
        "adaln",
        "scalemixer.importance",
        "scalemixer.glo_to_pos",
        "scalemixer.refine",
        "scalemixer.pos_to_reg",
        "scalemixer.adapter",
        "model.toy.rollout2",
    ] {
        assert!(out.stdout.lines().any(|l| l.starts_with(site)), "{site} missing from report");
    }
    let rows = read_csv(&dir.path().join("gc/gradcheck.csv"));
    assert_eq!(rows[0], ["site", "worst_rel_err", "checked", "pass"]);
    assert!(rows[1..].iter().all(|r| r[3] == "false" || parse(&r[1]) == 0.0));
}

#[test]
fn identity_forecast_reproduces_last_observed_frame() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig::toy();
    let cfg = write_config(dir.path(), &run);
    let data = dir.path().join("data");
    common::ok(&["--config", p(&cfg), "gen-data", "--out", p(&data)]);
    let ck = dir.path().join("init");
    checkpoint::save(&ck, Stage::OneStep, &run, 0, &forecaster::build_model(&run.model, 0).unwrap(), &[], &[]).unwrap();
    let fc = dir.path().join("fc");
    common::ok(&[
        "--config",
        p(&cfg),
        "forecast",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--origin",
        "180",
        "--steps",
        "2",
        "--out",
        p(&fc),
    ]);

    let ds = Dataset::read_dir(&data).unwrap();
    let last: scalemixer_core::Tensor = ds.regional_at(180).unwrap().cast();
    let records = grid1::read(&fc.join("origin_000180/regional.grid1")).unwrap();
    let names: Vec<&str> = records.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names.len(), 12);
    assert_eq!(names[0], "u_lead_001");
    assert_eq!(names[11], "u_lead_012");
    for r in &records {
        assert!(r.data.to_f64().max_abs_diff(&last) <= 1e-9, "{}", r.name);
    }
    let g = grid1::read(&fc.join("origin_000180/global.grid1")).unwrap();
    assert_eq!(g.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["global_lead_006", "global_lead_012"]);

    let header = &read_csv(&fc.join("origin_000180/csv/regional_U.csv"))[0];
    assert_eq!(header, &["lead_hour", "lat", "lon", "value"]);
    let geom = scalemixer_core::data::dataset::read_geometry(&fc.join("origin_000180/regional.geom")).unwrap();
    assert_eq!(geom.variables, REGIONAL_VARIABLES);

    // Origins that cannot be initialized are rejected.
    let out =
        scalemixer(&["--config", p(&cfg), "forecast", "--checkpoint", p(&ck), "--data", p(&data), "--origin", "181", "--out", p(&fc)]);
    assert_eq!(out.code, 2, "{}", out.stderr);
}

/// Writes a forecast set whose regional leads are `truth + offset(lead)`.
fn synthetic_forecast(dir: &Path, ds: &Dataset, t0: usize, leads: usize, offset: impl Fn(usize, usize) -> f64) {
    let sub = dir.join(format!("origin_{t0:06}"));
    fs::create_dir_all(&sub).unwrap();
    let records: Vec<Record> = (1..=leads)
        .map(|lead| {
            let mut t: scalemixer_core::Tensor = ds.regional_at(t0 + lead).unwrap().cast();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += offset(lead, i);
            }
            Record::f64(format!("u_lead_{lead:03}"), t)
        })
        .collect();
    grid1::write(&sub.join("regional.grid1"), &records).unwrap();
    write_manifest(&sub, "forecast", "x", &[("origin_hour", t0.to_string())], &["regional.grid1".into()]).unwrap();
    write_manifest(dir, "forecast-set", "x", &[], &[format!("origin_{t0:06}/manifest.toml")]).unwrap();
}

#[test]
fn eval_of_perfect_forecast_has_zero_rmse_and_unit_acc() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig::toy();
    let cfg = write_config(dir.path(), &run);
    let data = dir.path().join("data");
    common::ok(&["--config", p(&cfg), "gen-data", "--out", p(&data)]);
    let ds = Dataset::read_dir(&data).unwrap();
    let fc = dir.path().join("fc");
    synthetic_forecast(&fc, &ds, 174, REPORT_HOURS, |_, _| 0.0);
    let out = dir.path().join("eval");
    common::ok(&["--config", p(&cfg), "eval", "--forecast", p(&fc), "--truth", p(&data), "--out", p(&out)]);

    let rows = read_csv(&out.join("metrics.csv"));
    let v = REGIONAL_VARIABLES.len();
    assert_eq!(rows.len() - 1, REPORT_HOURS * v + v);
    assert_eq!(rows[0], ["lead_hour", "variable", "rmse", "acc", "mae", "origins"]);
    for r in &rows[1..] {
        assert_eq!(parse(&r[2]), 0.0, "{r:?}");
        assert!(r[3].is_empty() || (parse(&r[3]) - 1.0).abs() <= 1e-12, "{r:?}");
        assert_eq!(parse(&r[4]), 0.0);
    }
    assert!(rows[1..].iter().any(|r| !r[3].is_empty()));
    assert_eq!(rows.last().unwrap()[0], "avg");
}

#[test]
fn missing_leads_are_reported_as_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig::toy();
    let cfg = write_config(dir.path(), &run);
    let data = dir.path().join("data");
    common::ok(&["--config", p(&cfg), "gen-data", "--out", p(&data)]);
    let ds = Dataset::read_dir(&data).unwrap();
    let fc = dir.path().join("fc");
    synthetic_forecast(&fc, &ds, 174, 12, |lead, _| lead as f64);
    let report = evaluate::evaluate(&fc, &data, None, None).unwrap();
    assert_eq!(report.gaps, (13..=REPORT_HOURS).collect::<Vec<_>>());
    let mae_u = report.summary_mae[0].unwrap();
    assert!((mae_u - 6.5).abs() <= 1e-9, "{mae_u}");
    let text = evaluate::write_report(&report, &dir.path().join("eval"), "x").unwrap();
    assert!(text.contains("missing lead times: 13, 14"), "{text}");
    let rows = read_csv(&dir.path().join("eval/metrics.csv"));
    let gap = rows.iter().find(|r| r[0] == "13").unwrap();
    assert!(gap[2].is_empty() && gap[4].is_empty() && gap[5] == "0");
}

#[test]
fn station_block_matches_grid_errors_at_grid_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig::toy();
    let cfg = write_config(dir.path(), &run);
    let data = dir.path().join("data");
    common::ok(&["--config", p(&cfg), "gen-data", "--out", p(&data)]);
    let ds = Dataset::read_dir(&data).unwrap();
    let fc = dir.path().join("fc");
    let offset = |lead: usize, i: usize| ((lead * 31 + i * 7) % 13) as f64 * 0.1 - 0.6;
    synthetic_forecast(&fc, &ds, 174, 6, offset);

    let nodes = [(0usize, 0usize), (3, 7), (19, 19)];
    let mut text = String::from("id,lat,lon\n");
    for (k, (i, j)) in nodes.iter().enumerate() {
        text.push_str(&format!("N{k},{},{}\n", ds.regional_lat[*i], ds.regional_lon[*j]));
    }
    let st = dir.path().join("st.csv");
    fs::write(&st, text).unwrap();
    let report = evaluate::evaluate(&fc, &data, Some(&st), None).unwrap();
    let stations = report.stations.unwrap();
    let (w, v) = (ds.regional_lon.len(), REGIONAL_VARIABLES.len());
    for (k, &(i, j)) in nodes.iter().enumerate() {
        for var in 0..v {
            let idx = (i * w + j) * v + var;
            let want = ((1..=6).map(|lead| offset(lead, idx).powi(2)).sum::<f64>() / 6.0).sqrt();
            assert!((stations[k].rmse[var] - want).abs() <= 1e-9, "station {k} var {var}");
        }
    }
}

#[test]
fn eval_of_own_forecast_reproduces_training_validation_mae() {
    let dir = tempfile::tempdir().unwrap();
    let t = toy_pipeline(dir.path(), &RunConfig::toy(), 3);

    let header = read_csv(&t.one_step.join("train_log.csv"));
    let mut want = vec!["step", "lr", "train_loss"].into_iter().map(String::from).collect::<Vec<_>>();
    want.extend(REGIONAL_VARIABLES.iter().map(|v| format!("val_mae_{v}")));
    assert_eq!(header[0], want);
    let last = header.last().unwrap();

    let fc = dir.path().join("fc");
    t.ok(
        3,
        &[
            "forecast",
            "--checkpoint",
            p(&t.one_step),
            "--data",
            p(&t.data),
            "--split",
            "val",
            "--steps",
            "1",
            "--skip-csv",
            "--out",
            p(&fc),
        ],
    );
    assert!(!fc.join("origin_000174/csv").exists());
    let ev = dir.path().join("eval");
    t.ok(3, &["eval", "--forecast", p(&fc), "--truth", p(&t.data), "--out", p(&ev)]);
    let rows = read_csv(&ev.join("metrics.csv"));
    for (k, var) in REGIONAL_VARIABLES.iter().enumerate() {
        let avg = rows.iter().find(|r| r[0] == "avg" && r[1] == *var).unwrap();
        let (got, logged) = (parse(&avg[4]), parse(&last[3 + k]));
        assert!(close(got, logged, 1e-9), "{var}: eval {got} vs log {logged}");
    }

    // The rollout stage records before/after scores at every lead.
    let roll = read_csv(&t.rollout.join("rollout_eval.csv"));
    assert_eq!(roll[0], ["lead_hour", "val_mae_before", "val_mae_after"]);
    assert_eq!(roll.len() - 1, RunConfig::toy().eval.rollout_steps * 6);
}

#[test]
fn commands_are_deterministic_given_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig::toy();
    let a = toy_pipeline(&dir.path().join("a"), &run, 11);
    let b = toy_pipeline(&dir.path().join("b"), &run, 11);
    for (x, y) in [(&a.data, &b.data), (&a.global, &b.global), (&a.one_step, &b.one_step), (&a.rollout, &b.rollout)] {
        assert_eq!(tree_digest(x, &[]), tree_digest(y, &[]), "{}", x.display());
    }
    let c = toy_pipeline(&dir.path().join("c"), &run, 12);
    assert_ne!(tree_digest(&a.data, &[]), tree_digest(&c.data, &[]));
}

#[test]
fn ablation_rows_deltas_and_standalone_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig::toy();
    let t = toy_pipeline(dir.path(), &run, 5);
    let out = dir.path().join("ablate");
    t.ok(5, &["ablate", "--data", p(&t.data), "--global", p(&t.global), "--out", p(&out)]);

    let main = read_csv(&out.join("ablation_variants.csv"));
    let labels: Vec<&str> = main[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["ScaleMixer", "A", "B", "C", "D"]);
    let depth = read_csv(&out.join("ablation_depth.csv"));
    let want: Vec<String> = run.eval.k_sweep.iter().map(|k| format!("k={k}")).collect();
    assert_eq!(depth[1..].iter().map(|r| r[0].clone()).collect::<Vec<_>>(), want);
    let full = &main[1];
    for r in main[1..].iter().chain(&depth[1..]) {
        for (value, delta) in [(1, 3), (2, 4), (5, 6)] {
            let expect = (parse(&r[value]) - parse(&full[value])) / parse(&full[value]);
            assert_eq!(parse(&r[delta]), parse(&format!("{expect:.17e}")), "{r:?}");
        }
    }

    // Variant D trained directly as a standalone regional model.
    let d_run = Variant::D.apply(&run);
    let d_cfg = write_config(&dir.path().join("d"), &d_run);
    let d_out = dir.path().join("d/model");
    common::ok(&[
        "--config",
        p(&d_cfg),
        "--seed",
        "5",
        "train",
        "--stage",
        "one-step",
        "--data",
        p(&t.data),
        "--init",
        p(&t.global),
        "--out",
        p(&d_out),
    ]);
    let m = checkpoint::read_manifest(&d_out).unwrap();
    let d_row = &main[5];
    assert_eq!(m.entry("val_mae_normalized").unwrap(), d_row[5]);
    assert_eq!(m.entry("final_loss").unwrap(), d_row[7]);
    assert_eq!(fs::read(d_out.join("params.grid1")).unwrap(), fs::read(out.join("variants/D/params.grid1")).unwrap());

    // Timing lives outside the hashed artifacts.
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(!manifest.contains("timing.csv"));
    assert!(out.join("timing.csv").exists());
}
