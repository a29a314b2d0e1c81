//! `eval`: per-lead RMSE, ACC and MAE of regional forecasts against truth,
//! with an optional station block.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Result;

use scalemixer_core::checkpoint::read_manifest;
use scalemixer_core::config::REGIONAL_VARIABLES;
use scalemixer_core::data::dataset::{write_manifest, Climatology, Dataset};
use scalemixer_core::data::grid1;
use scalemixer_core::data::metrics::{acc, lat_weighted_rmse};
use scalemixer_core::data::stations::{station_interpolate, StationSet};
use scalemixer_core::field::GridField;
use scalemixer_core::forecaster::mae_per_variable;
use scalemixer_core::{Error, Tensor};

/// Averages at one lead time; `None` marks a gap.
#[derive(Clone, Debug, PartialEq)]
pub struct LeadScores {
    pub lead: usize,
    pub origins: usize,
    pub rmse: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub mae: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationScore {
    pub id: String,
    pub rmse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub leads: Vec<LeadScores>,
    /// Mean over the leads with data, per variable.
    pub summary_rmse: Vec<Option<f64>>,
    pub summary_acc: Vec<Option<f64>>,
    pub summary_mae: Vec<Option<f64>>,
    pub gaps: Vec<usize>,
    pub stations: Option<Vec<StationScore>>,
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values.into_iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

struct Accumulator {
    rmse: Vec<Vec<f64>>,
    acc: Vec<Vec<f64>>,
    mae: Vec<Vec<f64>>,
    origins: usize,
}

impl Accumulator {
    fn new(v: usize) -> Self {
        Self { rmse: vec![Vec::new(); v], acc: vec![Vec::new(); v], mae: vec![Vec::new(); v], origins: 0 }
    }
}

/// Lead times covered by a report.
pub const REPORT_HOURS: usize = 48;

/// Regional forecast records are named `u_lead_NNN`.
const REGIONAL_PREFIX: &str = "u_lead_";

fn read_regional(dir: &Path) -> Result<BTreeMap<usize, Tensor>> {
    let mut out = BTreeMap::new();
    for r in grid1::read(&dir.join("regional.grid1"))? {
        if let Some(lead) = r.name.strip_prefix(REGIONAL_PREFIX).and_then(|s| s.parse::<usize>().ok()) {
            out.insert(lead, r.data.to_f64());
        }
    }
    Ok(out)
}

/// Scores every origin directory under `forecast_dir` against the dataset in `truth_dir`.
pub fn evaluate(forecast_dir: &Path, truth_dir: &Path, stations: Option<&Path>, max_lead: Option<usize>) -> Result<EvalReport> {
    let set = read_manifest(forecast_dir)?;
    if set.kind != "forecast-set" {
        return Err(Error::Pipeline(format!("{} is not a forecast directory", forecast_dir.display())).into());
    }
    let truth = Dataset::read_dir(truth_dir)?;
    let clim = Climatology::from_records(&grid1::read(&truth_dir.join("climatology.grid1"))?)?;
    let station_set = stations.map(StationSet::read_csv).transpose()?;
    let v = REGIONAL_VARIABLES.len();
    let horizon = max_lead.unwrap_or(REPORT_HOURS);
    let mut acc_by_lead: Vec<Accumulator> = (0..horizon).map(|_| Accumulator::new(v)).collect();
    let mut station_sq: Option<Vec<(Vec<f64>, usize)>> = station_set.as_ref().map(|s| vec![(vec![0.0; v], 0); s.stations.len()]);

    let mut origin_dirs: Vec<_> = set.files.iter().filter_map(|(f, _)| f.strip_suffix("/manifest.toml")).collect();
    origin_dirs.sort();
    for name in origin_dirs {
        let dir = forecast_dir.join(name);
        let m = read_manifest(&dir)?;
        let t0: usize = m
            .entry("origin_hour")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(0, format!("{} lacks origin_hour", dir.display())))?;
        let preds = read_regional(&dir)?;
        for lead in 1..=horizon {
            let (Some(pred), Some(obs)) = (preds.get(&lead), truth.regional.get(t0 + lead)) else {
                continue;
            };
            let obs: Tensor = obs.cast();
            let ts = truth.timestamp(t0 + lead);
            let a = &mut acc_by_lead[lead - 1];
            a.origins += 1;
            let r = lat_weighted_rmse(pred, &obs, &truth.regional_lat)?;
            let c = acc(pred, &obs, clim.at(ts)?, &truth.regional_lat)?;
            let e = mae_per_variable(pred, &obs)?;
            for k in 0..v {
                a.rmse[k].push(r[k]);
                if let Some(x) = c[k] {
                    a.acc[k].push(x);
                }
                a.mae[k].push(e[k]);
            }
            if let (Some(set), Some(sq)) = (&station_set, station_sq.as_mut()) {
                let vars: Vec<String> = REGIONAL_VARIABLES.iter().map(|s| s.to_string()).collect();
                let pf = GridField::new(pred.clone(), truth.regional_lat.clone(), truth.regional_lon.clone(), vars.clone())?;
                let tf = GridField::new(obs, truth.regional_lat.clone(), truth.regional_lon.clone(), vars)?;
                for (i, (p, t)) in station_interpolate(&pf, set).into_iter().zip(station_interpolate(&tf, set)).enumerate() {
                    if let (Ok(p), Ok(t)) = (p, t) {
                        for k in 0..v {
                            sq[i].0[k] += (p[k] - t[k]).powi(2);
                        }
                        sq[i].1 += 1;
                    }
                }
            }
        }
    }

    let avg = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let leads: Vec<LeadScores> = acc_by_lead
        .iter()
        .enumerate()
        .map(|(i, a)| LeadScores {
            lead: i + 1,
            origins: a.origins,
            rmse: a.rmse.iter().map(|x| avg(x)).collect(),
            acc: a.acc.iter().map(|x| avg(x)).collect(),
            mae: a.mae.iter().map(|x| avg(x)).collect(),
        })
        .collect();
    let gaps = leads.iter().filter(|l| l.origins == 0).map(|l| l.lead).collect();
    let summary =
        |f: fn(&LeadScores) -> &Vec<Option<f64>>| -> Vec<Option<f64>> { (0..v).map(|k| mean(leads.iter().map(|l| f(l)[k]))).collect() };
    let stations = station_set.map(|set| {
        set.stations
            .iter()
            .zip(station_sq.expect("allocated with the station set"))
            .map(|(s, (sq, n))| StationScore {
                id: s.id.clone(),
                rmse: sq.iter().map(|x| if n > 0 { (x / n as f64).sqrt() } else { f64::NAN }).collect(),
            })
            .collect()
    });
    Ok(EvalReport {
        summary_rmse: summary(|l| &l.rmse),
        summary_acc: summary(|l| &l.acc),
        summary_mae: summary(|l| &l.mae),
        leads,
        gaps,
        stations,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

/// `metrics.csv` (one row per lead and variable, then one `avg` row per
/// variable), `metrics.txt`, optional `stations.csv`, and a manifest.
pub fn write_report(report: &EvalReport, out: &Path, config_hash: &str) -> Result<String> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    w.write_record(["lead_hour", "variable", "rmse", "acc", "mae", "origins"])?;
    for l in &report.leads {
        for (k, var) in REGIONAL_VARIABLES.iter().enumerate() {
            w.write_record([l.lead.to_string(), var.to_string(), cell(l.rmse[k]), cell(l.acc[k]), cell(l.mae[k]), l.origins.to_string()])?;
        }
    }
    for (k, var) in REGIONAL_VARIABLES.iter().enumerate() {
        w.write_record([
            "avg".to_string(),
            var.to_string(),
            cell(report.summary_rmse[k]),
            cell(report.summary_acc[k]),
            cell(report.summary_mae[k]),
            String::new(),
        ])?;
    }
    w.flush()?;
    let mut files = vec!["metrics.csv".to_string(), "metrics.txt".to_string()];

    let mut text = format!("{:<8}{:>14}{:>10}{:>14}\n", "var", "RMSE", "ACC", "MAE");
    let show = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    for (k, var) in REGIONAL_VARIABLES.iter().enumerate() {
        text.push_str(&format!(
            "{var:<8}{:>14}{:>10}{:>14}\n",
            show(report.summary_rmse[k], 4),
            show(report.summary_acc[k], 3),
            show(report.summary_mae[k], 4)
        ));
    }
    let covered = report.leads.len() - report.gaps.len();
    text.push_str(&format!("averaged over {covered} of {} lead times\n", report.leads.len()));
    if !report.gaps.is_empty() {
        text.push_str(&format!("missing lead times: {}\n", report.gaps.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(", ")));
    }
    if let Some(st) = &report.stations {
        let mut w = csv::Writer::from_path(out.join("stations.csv"))?;
        let mut header = vec!["id".to_string()];
        header.extend(REGIONAL_VARIABLES.iter().map(|v| format!("rmse_{v}")));
        w.write_record(&header)?;
        for s in st {
            let mut row = vec![s.id.clone()];
            row.extend(s.rmse.iter().map(|x| if x.is_finite() { format!("{x:.12e}") } else { String::new() }));
            w.write_record(&row)?;
        }
        w.flush()?;
        files.push("stations.csv".into());
        text.push_str("\nstation RMSE\n");
        for s in st {
            text.push_str(&format!("{:<8}", s.id));
            for x in &s.rmse {
                text.push_str(&format!("{x:>12.4}"));
            }
            text.push('\n');
        }
    }
    fs::write(out.join("metrics.txt"), &text)?;
    write_manifest(out, "evaluation", config_hash, &[("gaps", report.gaps.len().to_string())], &files)?;
    Ok(text)
}
