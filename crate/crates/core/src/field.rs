//! Domain types shared by the models, the data pipeline and the CLI.

use crate::autodiff::Var;
use crate::config::{ModelConfig, HISTORY_FRAMES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A georeferenced `lat × lon × channels` array.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub data: Tensor,
    /// Row-centre latitudes in degrees, one per row.
    pub lat: Vec<f64>,
    /// Column-centre longitudes in degrees, one per column.
    pub lon: Vec<f64>,
    pub variables: Vec<String>,
}

impl GridField {
    pub fn new(data: Tensor, lat: Vec<f64>, lon: Vec<f64>, variables: Vec<String>) -> Result<Self> {
        match data.shape() {
            [h, w, c] if *h == lat.len() && *w == lon.len() && *c == variables.len() => {}
            s => {
                return Err(Error::geometry(format!(
                    "field {s:?} with {} lats, {} lons, {} variables",
                    lat.len(),
                    lon.len(),
                    variables.len()
                )))
            }
        }
        Ok(Self { data, lat, lon, variables })
    }

    pub fn height(&self) -> usize {
        self.lat.len()
    }

    pub fn width(&self) -> usize {
        self.lon.len()
    }

    pub fn channels(&self) -> usize {
        self.variables.len()
    }
}

/// Tokens inside a graph together with the grid they tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Full global state `H×W×C`: upper-air channels (variable-major over levels),
/// then surface channels, then static channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub field: Tensor,
}

impl GlobalState {
    pub fn new(field: Tensor, cfg: &ModelConfig) -> Result<Self> {
        let want = [cfg.global_height, cfg.global_width, cfg.global_channels()];
        if field.shape() != want {
            return Err(Error::geometry(format!("global state {:?}, expected {want:?}", field.shape())));
        }
        Ok(Self { field })
    }

    /// The static channels (last `static_channels` of the stack).
    pub fn static_channels(&self, cfg: &ModelConfig) -> Tensor {
        split_channels(&self.field, cfg.predicted_channels()).1
    }

    /// The predicted channels (everything except the static tail).
    pub fn dynamic_channels(&self, cfg: &ModelConfig) -> Tensor {
        split_channels(&self.field, cfg.predicted_channels()).0
    }

    /// Rebuilds a full state from predicted channels plus carried-over statics.
    pub fn from_prediction(pred: &Tensor, statics: &Tensor) -> Self {
        Self { field: join_channels(pred, statics) }
    }
}

/// Splits `H×W×C` into channels `[0, at)` and `[at, C)`.
pub fn split_channels(t: &Tensor, at: usize) -> (Tensor, Tensor) {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut a = Vec::with_capacity(h * w * at);
    let mut b = Vec::with_capacity(h * w * (c - at));
    for cell in t.data().chunks(c) {
        a.extend_from_slice(&cell[..at]);
        b.extend_from_slice(&cell[at..]);
    }
    let right = if c > at { Tensor::raw(vec![h, w, c - at], b) } else { Tensor::raw(vec![h, w, 1], vec![0.0; h * w]) };
    (Tensor::raw(vec![h, w, at], a), right)
}

pub fn join_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, w, ca) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[2];
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for (x, y) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        out.extend_from_slice(x);
        out.extend_from_slice(y);
    }
    Tensor::raw(vec![h, w, ca + cb], out)
}

/// Hour-of-day and day-of-year of the newest frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timestamp {
    pub hour_of_day: f64,
    pub day_of_year: f64,
}

impl Timestamp {
    /// Timestamp `hours` after 00 UTC of `start_day`.
    pub fn from_hours(start_day: usize, hours: usize) -> Self {
        Self { hour_of_day: (hours % 24) as f64, day_of_year: ((start_day - 1 + hours / 24) % 365 + 1) as f64 }
    }

    pub fn advanced(self, hours: usize) -> Self {
        let total = self.hour_of_day as usize + hours;
        let day = (self.day_of_year as usize - 1 + total / 24) % 365 + 1;
        Self { hour_of_day: (total % 24) as f64, day_of_year: day as f64 }
    }

    /// `[sin, cos]` of hour-of-day followed by `[sin, cos]` of day-of-year.
    pub fn encoding(self) -> [f64; 4] {
        let tau = 2.0 * std::f64::consts::PI;
        let h = tau * self.hour_of_day / 24.0;
        let d = tau * (self.day_of_year - 1.0) / 365.0;
        [h.sin(), h.cos(), d.sin(), d.cos()]
    }
}

/// Six hourly regional frames (oldest first), static conditioning and time.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionalState {
    pub history: Vec<Tensor>,
    pub topography: Tensor,
    pub land_sea_mask: Tensor,
    pub timestamp: Timestamp,
}

impl RegionalState {
    pub fn new(history: Vec<Tensor>, topography: Tensor, land_sea_mask: Tensor, timestamp: Timestamp, cfg: &ModelConfig) -> Result<Self> {
        if history.len() != HISTORY_FRAMES {
            return Err(Error::contract(format!("regional history needs exactly {HISTORY_FRAMES} hourly frames, got {}", history.len())));
        }
        let frame = [cfg.regional_height, cfg.regional_width, cfg.regional_vars];
        let stat = [cfg.regional_height, cfg.regional_width, 1];
        if let Some(f) = history.iter().find(|f| f.shape() != frame) {
            return Err(Error::geometry(format!("regional frame {:?}, expected {frame:?}", f.shape())));
        }
        if topography.shape() != stat || land_sea_mask.shape() != stat {
            return Err(Error::geometry(format!("static regional fields must be {stat:?}")));
        }
        Ok(Self { history, topography, land_sea_mask, timestamp })
    }

    pub fn last_frame(&self) -> &Tensor {
        self.history.last().expect("non-empty history")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_split_join_round_trip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let (a, b) = split_channels(&t, 3);
        assert_eq!(a.shape(), &[2, 3, 3]);
        assert_eq!(b.shape(), &[2, 3, 1]);
        assert_eq!(join_channels(&a, &b), t);
    }

    #[test]
    fn timestamps_wrap() {
        let t = Timestamp::from_hours(365, 23);
        assert_eq!((t.hour_of_day, t.day_of_year), (23.0, 365.0));
        let u = t.advanced(6);
        assert_eq!((u.hour_of_day, u.day_of_year), (5.0, 1.0));
        let e = Timestamp::from_hours(1, 0).encoding();
        assert!((e[1] - 1.0).abs() < 1e-15 && (e[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn regional_state_rejects_wrong_frame_count() {
        let cfg = ModelConfig::desk();
        let frame = Tensor::zeros(&[40, 60, 7]);
        let s = Tensor::zeros(&[40, 60, 1]);
        let ts = Timestamp::from_hours(1, 0);
        assert!(RegionalState::new(vec![frame.clone(); 5], s.clone(), s.clone(), ts, &cfg).is_err());
        assert!(RegionalState::new(vec![frame; 6], s.clone(), s, ts, &cfg).is_ok());
    }
}
