//! Point stations and bilinear interpolation of gridded fields to them.

use std::path::Path;

use crate::error::{Error, Result};
use crate::field::GridField;

#[derive(Clone, Debug, PartialEq)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// Observed values, one per variable (may be empty).
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StationSet {
    pub stations: Vec<Station>,
}

impl StationSet {
    /// Reads `id,lat,lon[,value...]` with a header row.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "lat" || &headers[2] != "lon" {
            return Err(Error::parse(0, "station header must start with id,lat,lon"));
        }
        let mut stations = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let offset = rec.position().map_or(0, |p| p.byte());
            let num = |i: usize| -> Result<f64> {
                rec.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(|| Error::parse(offset, format!("column {i} is not a number")))
            };
            stations.push(Station {
                id: rec.get(0).unwrap_or_default().to_string(),
                lat: num(1)?,
                lon: num(2)?,
                values: (3..rec.len()).map(num).collect::<Result<_>>()?,
            });
        }
        Ok(Self { stations })
    }

    pub fn write_csv(&self, path: &Path, value_names: &[&str]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id", "lat", "lon"];
        header.extend_from_slice(value_names);
        w.write_record(&header)?;
        for s in &self.stations {
            let mut row = vec![s.id.clone(), s.lat.to_string(), s.lon.to_string()];
            row.extend(s.values.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fractional `(row, col)` of a point on a regular lat/lon grid, or `None`
/// outside the node hull.
pub fn grid_position(field: &GridField, lat: f64, lon: f64) -> Option<(f64, f64)> {
    let axis = |nodes: &[f64], x: f64| -> Option<f64> {
        if nodes.len() == 1 {
            return (x == nodes[0]).then_some(0.0);
        }
        let step = nodes[1] - nodes[0];
        let f = (x - nodes[0]) / step;
        let last = (nodes.len() - 1) as f64;
        (f >= -1e-9 && f <= last + 1e-9).then(|| f.clamp(0.0, last))
    };
    Some((axis(&field.lat, lat)?, axis(&field.lon, lon)?))
}

/// Bilinear values of every channel at each station; out-of-grid stations
/// yield an error entry instead of failing the whole set.
pub fn station_interpolate(field: &GridField, stations: &StationSet) -> Vec<Result<Vec<f64>>> {
    let (h, w, c) = (field.height(), field.width(), field.channels());
    let data = field.data.data();
    stations
        .stations
        .iter()
        .map(|s| {
            let (r, q) = grid_position(field, s.lat, s.lon)
                .ok_or_else(|| Error::geometry(format!("station {} at ({}, {}) lies outside the grid", s.id, s.lat, s.lon)))?;
            let (r0, c0) = ((r.floor() as usize).min(h.saturating_sub(2)), (q.floor() as usize).min(w.saturating_sub(2)));
            let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
            let (fr, fc) = (r - r0 as f64, q - c0 as f64);
            let at = |i: usize, j: usize, k: usize| data[(i * w + j) * c + k];
            Ok((0..c)
                .map(|k| {
                    (1.0 - fr) * ((1.0 - fc) * at(r0, c0, k) + fc * at(r0, c1, k)) + fr * ((1.0 - fc) * at(r1, c0, k) + fc * at(r1, c1, k))
                })
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    fn grid() -> GridField {
        let data = Tensor::new(vec![3, 4, 2], (0..24).map(|i| (i * i) as f64 * 0.1).collect()).unwrap();
        GridField::new(data, vec![10.0, 9.0, 8.0], vec![100.0, 100.5, 101.0, 101.5], vec!["a".into(), "b".into()]).unwrap()
    }

    fn st(lat: f64, lon: f64) -> StationSet {
        StationSet { stations: vec![Station { id: "s".into(), lat, lon, values: vec![] }] }
    }

    #[test]
    fn node_midpoint_and_outside() {
        let f = grid();
        let v = station_interpolate(&f, &st(9.0, 101.0)).remove(0).unwrap();
        assert_eq!(v, vec![f.data.at(&[1, 2, 0]), f.data.at(&[1, 2, 1])]);
        let m = station_interpolate(&f, &st(9.0, 100.75)).remove(0).unwrap();
        assert!((m[0] - 0.5 * (f.data.at(&[1, 1, 0]) + f.data.at(&[1, 2, 0]))).abs() < 1e-12);
        let mut set = st(7.0, 100.0);
        set.stations.push(st(8.5, 100.2).stations.remove(0));
        let out = station_interpolate(&f, &set);
        assert!(out[0].is_err() && out[1].is_ok());
    }

    #[test]
    fn constant_field_and_bilinear_cross_check() {
        let mut f = grid();
        f.data = Tensor::full(&[3, 4, 2], 2.5);
        assert_eq!(station_interpolate(&f, &st(8.3, 101.2)).remove(0).unwrap(), vec![2.5, 2.5]);

        let f = grid();
        for (lat, lon) in [(9.3, 100.1), (8.0, 101.5), (10.0, 100.0), (8.7, 100.9)] {
            let v = station_interpolate(&f, &st(lat, lon)).remove(0).unwrap();
            let (r, c) = grid_position(&f, lat, lon).unwrap();
            let mut g = Graph::new();
            let field = g.constant(f.data.clone());
            let coords = g.constant(Tensor::new(vec![1, 2], vec![r, c]).unwrap());
            let s = g.bilinear_sample(field, coords).unwrap();
            for k in 0..2 {
                assert!((g.value(s).data()[k] - v[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.csv");
        let set = StationSet {
            stations: vec![
                Station { id: "A1".into(), lat: 1.5, lon: 2.25, values: vec![3.0, -1.0] },
                Station { id: "B".into(), lat: -4.0, lon: 0.0, values: vec![0.5, 2.0] },
            ],
        };
        set.write_csv(&path, &["T", "U"]).unwrap();
        assert_eq!(StationSet::read_csv(&path).unwrap(), set);
    }
}
