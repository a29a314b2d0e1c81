//! Paired global/regional sequences, chronological splits, normalization and
//! the on-disk dataset layout.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ScenarioConfig, HISTORY_FRAMES, LEAD_HOURS, REFINEMENT, REGIONAL_VARIABLES};
use crate::data::grid1::{self, Record, RecordData};
use crate::data::normalize::ChannelStats;
use crate::data::synthetic::SyntheticWorld;
use crate::error::{Error, Result};
use crate::field::{split_channels, GlobalState, RegionalState, Timestamp};
use crate::tensor::Tensor;

pub const GLOBAL_VARIABLES: [&str; 8] = ["u_l1", "u_l2", "v_l1", "v_l2", "T", "Q", "orography", "land_fraction"];

/// Hours between global frames.
pub const GLOBAL_STRIDE: usize = LEAD_HOURS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Hour ranges of the 70/15/15 chronological split; boundaries fall on global frames.
pub fn split_ranges(n_hours: usize) -> [Range<usize>; 3] {
    let align = |h: usize| h / GLOBAL_STRIDE * GLOBAL_STRIDE;
    let a = align(n_hours * 70 / 100);
    let b = align(n_hours * 85 / 100);
    [0..a, a..b, b..n_hours]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub start_day: usize,
    /// Frame `g` is hour `6g`; `H×W×8`.
    pub global: Vec<Tensor<f32>>,
    /// Hourly `h×w×7` regional frames.
    pub regional: Vec<Tensor<f32>>,
    pub topography: Tensor<f32>,
    pub land_sea_mask: Tensor<f32>,
    pub global_lat: Vec<f64>,
    pub global_lon: Vec<f64>,
    pub regional_lat: Vec<f64>,
    pub regional_lon: Vec<f64>,
}

fn to_f32(shape: Vec<usize>, v: &[f64]) -> Tensor<f32> {
    Tensor::raw(shape, v.iter().map(|&x| x as f32).collect())
}

/// Runs the synthetic world for `scn.n_timesteps` hours.
pub fn generate_synthetic(scn: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    let mut world = SyntheticWorld::new(scn, seed)?;
    let (h, w) = (scn.global_height, scn.global_width);
    let (rh, rw) = (scn.region_height, scn.region_width);
    let mut global = Vec::new();
    let mut regional = Vec::with_capacity(scn.n_timesteps);
    for hour in 0..scn.n_timesteps {
        let frame = world.fine_frame();
        regional.push(to_f32(vec![rh, rw, REGIONAL_VARIABLES.len()], &world.regional_frame(&frame)));
        if hour % GLOBAL_STRIDE == 0 {
            global.push(to_f32(vec![h, w, GLOBAL_VARIABLES.len()], &world.global_frame(&frame)));
        }
        if hour + 1 < scn.n_timesteps {
            world.step();
        }
    }
    let flat = world.fine_latitudes();
    let flon = world.fine_longitudes();
    Ok(Dataset {
        start_day: scn.start_day,
        global,
        regional,
        topography: to_f32(vec![rh, rw, 1], &world.regional_crop(world.orography())),
        land_sea_mask: to_f32(vec![rh, rw, 1], &world.regional_crop(world.land_sea_mask())),
        global_lat: (0..h).map(|i| 90.0 - (i as f64 + 0.5) * 180.0 / h as f64).collect(),
        global_lon: (0..w).map(|j| (j as f64 + 0.5) * 360.0 / w as f64).collect(),
        regional_lat: flat[scn.region_row..scn.region_row + rh].to_vec(),
        regional_lon: flon[scn.region_col..scn.region_col + rw].to_vec(),
    })
}

/// Normalization statistics, all computed on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub global: ChannelStats,
    pub regional: ChannelStats,
    pub topography: ChannelStats,
}

impl NormStats {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("stats serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(0, e.to_string()))
    }

    /// Statistics of the predicted global channels.
    pub fn global_predicted(&self, cfg: &ModelConfig) -> ChannelStats {
        self.global.slice(0, cfg.predicted_channels())
    }
}

/// A normalized training/evaluation example starting at hour `t0`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub t0: usize,
    pub global: GlobalState,
    pub regional: RegionalState,
    /// Normalized predicted-channel global truth at `t0 + 6(n+1)`.
    pub global_targets: Vec<Tensor>,
    /// Normalized regional truth at `t0 + 1 …`, hourly.
    pub regional_targets: Vec<Tensor>,
}

impl Dataset {
    pub fn n_hours(&self) -> usize {
        self.regional.len()
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        split_ranges(self.n_hours())[split as usize].clone()
    }

    pub fn timestamp(&self, hour: usize) -> Timestamp {
        Timestamp::from_hours(self.start_day, hour)
    }

    /// Hours `t0` at which a sample with `steps` coupled steps fits inside `split`.
    pub fn sample_origins(&self, split: Split, steps: usize) -> Vec<usize> {
        let r = self.split_range(split);
        (r.start..r.end)
            .filter(|&t| t % GLOBAL_STRIDE == 0 && t >= r.start + HISTORY_FRAMES - 1 && t + LEAD_HOURS * steps < r.end)
            .collect()
    }

    pub fn compute_stats(&self) -> Result<NormStats> {
        let r = self.split_range(Split::Train);
        let global: Vec<&Tensor<f32>> =
            self.global.iter().enumerate().filter(|(g, _)| r.contains(&(g * GLOBAL_STRIDE))).map(|(_, t)| t).collect();
        Ok(NormStats {
            global: ChannelStats::from_frames(global)?,
            regional: ChannelStats::from_frames(&self.regional[r])?,
            topography: ChannelStats::from_frames([&self.topography])?,
        })
    }

    pub fn global_at(&self, hour: usize) -> Result<&Tensor<f32>> {
        if hour % GLOBAL_STRIDE != 0 {
            return Err(Error::contract(format!("no global frame at hour {hour}")));
        }
        self.global.get(hour / GLOBAL_STRIDE).ok_or_else(|| Error::contract(format!("hour {hour} beyond the global series")))
    }

    pub fn regional_at(&self, hour: usize) -> Result<&Tensor<f32>> {
        self.regional.get(hour).ok_or_else(|| Error::contract(format!("hour {hour} beyond the regional series")))
    }

    /// Regional statics as model inputs: normalized topography and the raw mask.
    pub fn regional_statics(&self, stats: &NormStats) -> Result<(Tensor, Tensor)> {
        Ok((stats.topography.zscore(&self.topography.cast())?, self.land_sea_mask.cast()))
    }

    pub fn sample(&self, t0: usize, steps: usize, stats: &NormStats, cfg: &ModelConfig) -> Result<Sample> {
        if t0 + 1 < HISTORY_FRAMES {
            return Err(Error::contract(format!("t0 = {t0} leaves no room for {HISTORY_FRAMES} history frames")));
        }
        let global = GlobalState::new(stats.global.zscore(&self.global_at(t0)?.cast())?, cfg)?;
        let history =
            (t0 + 1 - HISTORY_FRAMES..=t0).map(|h| stats.regional.zscore(&self.regional_at(h)?.cast())).collect::<Result<Vec<_>>>()?;
        let (topo, lsm) = self.regional_statics(stats)?;
        let regional = RegionalState::new(history, topo, lsm, self.timestamp(t0), cfg)?;
        let mut global_targets = Vec::with_capacity(steps);
        for n in 1..=steps {
            let g = stats.global.zscore(&self.global_at(t0 + LEAD_HOURS * n)?.cast())?;
            global_targets.push(split_channels(&g, cfg.predicted_channels()).0);
        }
        let regional_targets =
            (1..=LEAD_HOURS * steps).map(|dt| stats.regional.zscore(&self.regional_at(t0 + dt)?.cast())).collect::<Result<Vec<_>>>()?;
        Ok(Sample { t0, global, regional, global_targets, regional_targets })
    }

    /// Per (hour-of-day, cell, variable) mean of the training regional frames, physical units.
    pub fn climatology(&self) -> Result<Climatology> {
        let r = self.split_range(Split::Train);
        let mut sums: Vec<Option<(Tensor, usize)>> = vec![None; 24];
        for hour in r {
            let t: Tensor = self.regional[hour].cast();
            let ts = self.timestamp(hour);
            let slot = &mut sums[ts.hour_of_day as usize];
            match slot {
                None => *slot = Some((t, 1)),
                Some((acc, n)) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                    *n += 1;
                }
            }
        }
        Ok(Climatology { by_hour: sums.into_iter().map(|s| s.map(|(t, n)| t.map(|v| v / n as f64))).collect() })
    }

    /// Writes the split files, statics, sidecars and manifest into `dir`.
    pub fn write_dir(&self, dir: &Path, stats: &NormStats, config_toml: &str, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for split in Split::ALL {
            let r = self.split_range(split);
            let globals: Vec<&Tensor<f32>> =
                self.global.iter().enumerate().filter(|(g, _)| r.contains(&(g * GLOBAL_STRIDE))).map(|(_, t)| t).collect();
            let records = vec![
                Record::f64("first_hour", Tensor::from_vec(vec![r.start as f64])),
                Record::f32("global", stack(&globals)?),
                Record::f32("regional", stack(&self.regional[r.clone()].iter().collect::<Vec<_>>())?),
            ];
            let name = format!("{}.grid1", split.name());
            grid1::write(&dir.join(&name), &records)?;
            files.push(name);
        }
        let statics = vec![
            Record::f32("topography", self.topography.clone()),
            Record::f32("land_sea_mask", self.land_sea_mask.clone()),
            Record::f64("global_lat", Tensor::from_vec(self.global_lat.clone())),
            Record::f64("global_lon", Tensor::from_vec(self.global_lon.clone())),
            Record::f64("regional_lat", Tensor::from_vec(self.regional_lat.clone())),
            Record::f64("regional_lon", Tensor::from_vec(self.regional_lon.clone())),
            Record::f64("start_day", Tensor::from_vec(vec![self.start_day as f64])),
        ];
        grid1::write(&dir.join("statics.grid1"), &statics)?;
        files.push("statics.grid1".into());
        let clim = self.climatology()?;
        grid1::write(&dir.join("climatology.grid1"), &clim.to_records())?;
        files.push("climatology.grid1".into());
        fs::write(dir.join("stats.toml"), stats.to_toml())?;
        files.push("stats.toml".into());
        let ts = iso_timestamp(self.start_day, 0);
        let gvars: Vec<&str> = GLOBAL_VARIABLES.to_vec();
        write_geometry(&dir.join("global.geom"), &self.global_lat, &self.global_lon, &gvars, &ts)?;
        write_geometry(&dir.join("regional.geom"), &self.regional_lat, &self.regional_lon, &REGIONAL_VARIABLES, &ts)?;
        files.push("global.geom".into());
        files.push("regional.geom".into());
        fs::write(dir.join("config.toml"), config_toml)?;
        write_manifest(dir, "dataset", config_hash, &[("hours", self.n_hours().to_string())], &files)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let statics = grid1::read(&dir.join("statics.grid1"))?;
        let f32_rec = |recs: &[Record], name: &str| -> Result<Tensor<f32>> {
            match grid1::find(recs, name)? {
                RecordData::F32(t) => Ok(t.clone()),
                RecordData::F64(t) => Ok(t.cast()),
            }
        };
        let vec_rec = |recs: &[Record], name: &str| -> Result<Vec<f64>> { Ok(grid1::find(recs, name)?.to_f64().into_data()) };
        let mut global = Vec::new();
        let mut regional = Vec::new();
        for split in Split::ALL {
            let recs = grid1::read(&dir.join(format!("{}.grid1", split.name())))?;
            let first = vec_rec(&recs, "first_hour")?[0] as usize;
            if first != regional.len() {
                return Err(Error::parse(0, format!("{} split starts at hour {first}, expected {}", split.name(), regional.len())));
            }
            global.extend(unstack(&f32_rec(&recs, "global")?));
            regional.extend(unstack(&f32_rec(&recs, "regional")?));
        }
        Ok(Self {
            start_day: vec_rec(&statics, "start_day")?[0] as usize,
            global,
            regional,
            topography: f32_rec(&statics, "topography")?,
            land_sea_mask: f32_rec(&statics, "land_sea_mask")?,
            global_lat: vec_rec(&statics, "global_lat")?,
            global_lon: vec_rec(&statics, "global_lon")?,
            regional_lat: vec_rec(&statics, "regional_lat")?,
            regional_lon: vec_rec(&statics, "regional_lon")?,
        })
    }
}

/// Stacks equally shaped frames along a new leading axis.
pub fn stack<T: crate::tensor::Real>(frames: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = frames.first() else {
        return Ok(Tensor::raw(vec![0], Vec::new()));
    };
    let mut data = Vec::with_capacity(first.numel() * frames.len());
    for f in frames {
        if f.shape() != first.shape() {
            return Err(Error::dim(format!("cannot stack {:?} with {:?}", f.shape(), first.shape())));
        }
        data.extend_from_slice(f.data());
    }
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::raw(shape, data))
}

pub fn unstack<T: crate::tensor::Real>(t: &Tensor<T>) -> Vec<Tensor<T>> {
    if t.shape().len() < 2 || t.shape()[0] == 0 {
        return Vec::new();
    }
    let inner = t.shape()[1..].to_vec();
    let n: usize = inner.iter().product();
    t.data().chunks(n).map(|c| Tensor::raw(inner.clone(), c.to_vec())).collect()
}

/// Per hour-of-day mean regional fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Climatology {
    pub by_hour: Vec<Option<Tensor>>,
}

impl Climatology {
    pub fn at(&self, ts: Timestamp) -> Result<&Tensor> {
        self.by_hour[ts.hour_of_day as usize % 24]
            .as_ref()
            .ok_or_else(|| Error::contract(format!("no climatology for hour {}", ts.hour_of_day)))
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.by_hour.iter().enumerate().filter_map(|(h, t)| t.as_ref().map(|t| Record::f64(format!("hour_{h:02}"), t.clone()))).collect()
    }

    pub fn from_records(records: &[Record]) -> Result<Self> {
        let mut by_hour = vec![None; 24];
        for r in records {
            let h: usize = r
                .name
                .strip_prefix("hour_")
                .and_then(|s| s.parse().ok())
                .filter(|h| *h < 24)
                .ok_or_else(|| Error::parse(0, format!("unexpected climatology record `{}`", r.name)))?;
            by_hour[h] = Some(r.data.to_f64());
        }
        Ok(Self { by_hour })
    }
}

/// `YYYY-MM-DDTHH:00:00Z` for a non-leap reference year.
pub fn iso_timestamp(start_day: usize, hours: usize) -> String {
    const DAYS: [usize; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let total_days = start_day - 1 + hours / 24;
    let year = 2001 + total_days / 365;
    let mut doy = total_days % 365;
    let mut month = 0;
    while doy >= DAYS[month] {
        doy -= DAYS[month];
        month += 1;
    }
    format!("{year:04}-{:02}-{:02}T{:02}:00:00Z", month + 1, doy + 1, hours % 24)
}

/// Plain-text geometry sidecar.
pub fn write_geometry(path: &Path, lat: &[f64], lon: &[f64], variables: &[&str], timestamp: &str) -> Result<()> {
    let step = |v: &[f64]| if v.len() > 1 { v[1] - v[0] } else { 0.0 };
    let text = format!(
        "lat0 = {}\ndlat = {}\nlon0 = {}\ndlon = {}\nvariables = {}\ntimestamp = {}\n",
        lat[0],
        step(lat),
        lon[0],
        step(lon),
        variables.join(","),
        timestamp
    );
    fs::write(path, text)?;
    Ok(())
}

/// Parsed geometry sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub lat0: f64,
    pub dlat: f64,
    pub lon0: f64,
    pub dlon: f64,
    pub variables: Vec<String>,
    pub timestamp: String,
}

pub fn read_geometry(path: &Path) -> Result<Geometry> {
    let text = fs::read_to_string(path)?;
    let mut kv = std::collections::HashMap::new();
    let mut offset = 0u64;
    for line in text.lines() {
        if !line.trim().is_empty() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(offset, format!("expected key = value, got `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        offset += line.len() as u64 + 1;
    }
    let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::parse(0, format!("missing key `{k}`")));
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::parse(0, format!("`{k}` is not a number"))) };
    Ok(Geometry {
        lat0: num("lat0")?,
        dlat: num("dlat")?,
        lon0: num("lon0")?,
        dlon: num("dlon")?,
        variables: get("variables")?.split(',').map(str::to_string).collect(),
        timestamp: get("timestamp")?,
    })
}

/// `manifest.toml` with the config hash, extra entries and per-file SHA-256.
pub fn write_manifest(dir: &Path, kind: &str, config_hash: &str, extra: &[(&str, String)], files: &[String]) -> Result<()> {
    let mut text = format!("kind = \"{kind}\"\nconfig_hash = \"{config_hash}\"\n");
    for (k, v) in extra {
        text.push_str(&format!("{k} = \"{v}\"\n"));
    }
    text.push_str("\n[files]\n");
    let mut sorted = files.to_vec();
    sorted.sort();
    for f in sorted {
        text.push_str(&format!("\"{f}\" = \"{}\"\n", super::sha256_file(&dir.join(&f))?));
    }
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Cross-checks the dataset geometry against the model configuration.
pub fn check_geometry(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    let g = ds.global.first().ok_or_else(|| Error::geometry("dataset has no global frames"))?;
    let r = ds.regional.first().ok_or_else(|| Error::geometry("dataset has no regional frames"))?;
    let gw = [cfg.global_height, cfg.global_width, cfg.global_channels()];
    let rw = [cfg.regional_height, cfg.regional_width, cfg.regional_vars];
    if g.shape() != gw || r.shape() != rw {
        return Err(Error::geometry(format!("dataset frames {:?} / {:?} do not match model {gw:?} / {rw:?}", g.shape(), r.shape())));
    }
    if ds.global_lat.len() * REFINEMENT < ds.regional_lat.len() {
        return Err(Error::geometry("regional grid larger than the global grid"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScenarioConfig {
        ScenarioConfig {
            global_height: 8,
            global_width: 16,
            region_row: 10,
            region_col: 20,
            region_height: 20,
            region_width: 20,
            n_timesteps: 60,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn splits_are_chronological_and_aligned() {
        let [a, b, c] = split_ranges(960);
        assert_eq!((a.start, a.end, b.end, c.end), (0, 672, 816, 960));
        let [a, b, _] = split_ranges(1000);
        assert_eq!(a.end % 6, 0);
        assert_eq!(b.end % 6, 0);
    }

    #[test]
    fn generation_is_deterministic_and_samples_fit() {
        let scn = tiny();
        let ds = generate_synthetic(&scn, 4).unwrap();
        assert_eq!(ds, generate_synthetic(&scn, 4).unwrap());
        assert_eq!(ds.n_hours(), 60);
        assert_eq!(ds.global.len(), 10);
        let origins = ds.sample_origins(Split::Train, 1);
        assert_eq!(origins, vec![6, 12, 18, 24, 30]);
        assert!(ds.sample_origins(Split::Val, 1).is_empty());
    }

    #[test]
    fn directory_round_trip() {
        let scn = tiny();
        let ds = generate_synthetic(&scn, 2).unwrap();
        let stats = ds.compute_stats().unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path(), &stats, "", "abc").unwrap();
        assert_eq!(Dataset::read_dir(dir.path()).unwrap(), ds);
        let geom = read_geometry(&dir.path().join("regional.geom")).unwrap();
        assert_eq!(geom.variables.len(), 7);
        assert_eq!(geom.timestamp, "2001-01-01T00:00:00Z");
        let s = NormStats::from_toml(&fs::read_to_string(dir.path().join("stats.toml")).unwrap()).unwrap();
        assert_eq!(s, stats);
    }

    #[test]
    fn iso_dates() {
        assert_eq!(iso_timestamp(1, 0), "2001-01-01T00:00:00Z");
        assert_eq!(iso_timestamp(32, 30), "2001-02-02T06:00:00Z");
        assert_eq!(iso_timestamp(365, 24), "2002-01-01T00:00:00Z");
    }
}
