//! A synthetic multiscale atmosphere on a fine lat/lon grid.
//!
//! Two smooth tracers (temperature and moisture anomalies) are carried by
//! semi-Lagrangian advection under a slowly rotating mean wind plus
//! propagating large-scale streamfunction modes. Near-surface wind is the
//! large-scale wind scaled up over ridges and down in valleys. The coarse
//! grid sees exact 5×5 block averages of the fine surface fields, the
//! large-scale wind on two levels, and extra upper-level modes that never
//! touch the fine grid.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ScenarioConfig, REFINEMENT};
use crate::error::Result;

/// Number of propagating streamfunction modes.
const MODES: usize = 3;
/// Separable components per noise draw.
const NOISE_TERMS: usize = 4;

#[derive(Clone, Debug)]
struct Mode {
    kx: f64,
    ky: f64,
    omega: f64,
    phase: f64,
    /// Streamfunction amplitude (fine cells²/h).
    amp: f64,
}

/// Coarse-only upper-level pattern.
#[derive(Clone, Debug)]
struct ExtraMode {
    n: f64,
    m: f64,
    omega: f64,
    phase: f64,
}

/// Fine-grid fields of one hour, channel-major (`[channel][row·W + col]`).
pub struct FineFrame {
    pub height: usize,
    pub width: usize,
    /// U, V, T, Q, P, TCC, SSRD.
    pub channels: Vec<Vec<f64>>,
    /// Large-scale wind components in the same units as U and V.
    pub wind_u: Vec<f64>,
    pub wind_v: Vec<f64>,
}

pub struct SyntheticWorld {
    scn: ScenarioConfig,
    hf: usize,
    wf: usize,
    lat: Vec<f64>,
    orography: Vec<f64>,
    land_sea: Vec<f64>,
    factor: Vec<f64>,
    slope_x: Vec<f64>,
    slope_y: Vec<f64>,
    tracer_t: Vec<f64>,
    tracer_q: Vec<f64>,
    modes: Vec<Mode>,
    extra: [ExtraMode; 2],
    theta0: f64,
    rng: ChaCha8Rng,
    hour: usize,
}

fn smooth_1d(rng: &mut ChaCha8Rng, n: usize, periodic: bool) -> Vec<f64> {
    // Three sinusoids with amplitude √(2/3): unit RMS.
    let amp = (2.0f64 / 3.0).sqrt();
    let waves: Vec<(f64, f64)> = (0..3)
        .map(|_| {
            let k = if periodic { 2.0 * PI * rng.gen_range(2..=10) as f64 / n as f64 } else { 2.0 * PI / rng.gen_range(30.0..150.0) };
            (k, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    (0..n).map(|i| waves.iter().map(|(k, p)| amp * (k * i as f64 + p).sin()).sum()).collect()
}

/// Smooth unit-RMS random field as a sum of separable products.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, terms: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let norm = 1.0 / (terms as f64).sqrt();
    for _ in 0..terms {
        let fy = smooth_1d(rng, h, false);
        let gx = smooth_1d(rng, w, true);
        for (y, &a) in fy.iter().enumerate() {
            let row = &mut out[y * w..(y + 1) * w];
            for (o, &b) in row.iter_mut().zip(&gx) {
                *o += norm * a * b;
            }
        }
    }
    out
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [0.5 * (-t3 + 2.0 * t2 - t), 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0), 0.5 * (-3.0 * t3 + 4.0 * t2 + t), 0.5 * (t3 - t2)]
}

/// Mean of each `r×r` block of a `h×w` field, summed row-major.
pub fn block_average(fine: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let (ch, cw) = (h / r, w / r);
    let mut out = Vec::with_capacity(ch * cw);
    let n = (r * r) as f64;
    for i in 0..ch {
        for j in 0..cw {
            let mut s = 0.0;
            for dy in 0..r {
                for dx in 0..r {
                    s += fine[(i * r + dy) * w + j * r + dx];
                }
            }
            out.push(s / n);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SyntheticWorld {
    pub fn new(scn: &ScenarioConfig, seed: u64) -> Result<Self> {
        scn.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hf, wf) = (scn.fine_height(), scn.fine_width());
        let lat: Vec<f64> = (0..hf).map(|y| 90.0 - (y as f64 + 0.5) * 180.0 / hf as f64).collect();

        // Continents: Gaussian blobs, one centred on the region so it has terrain.
        let mut blobs: Vec<(f64, f64, f64, f64)> = vec![(
            (scn.region_row + scn.region_height / 2) as f64,
            (scn.region_col + scn.region_width / 2) as f64,
            0.35 * scn.region_height as f64 + 4.0,
            0.35 * scn.region_width as f64 + 4.0,
        )];
        for _ in 0..5 {
            blobs.push((
                rng.gen_range(0.15..0.85) * hf as f64,
                rng.gen_range(0.0..1.0) * wf as f64,
                rng.gen_range(0.06..0.18) * hf as f64,
                rng.gen_range(0.04..0.12) * wf as f64,
            ));
        }
        let ridge_angle: f64 = rng.gen_range(0.0..PI);
        let lambda = scn.ridge_wavelength;
        let mut orography = vec![0.0; hf * wf];
        let mut land_sea = vec![0.0; hf * wf];
        for y in 0..hf {
            for x in 0..wf {
                let mut l = 0.0;
                for &(cy, cx, sy, sx) in &blobs {
                    let dy = y as f64 - cy;
                    let mut dx = (x as f64 - cx).abs();
                    dx = dx.min(wf as f64 - dx);
                    l += (-(dy * dy) / (2.0 * sy * sy) - (dx * dx) / (2.0 * sx * sx)).exp();
                }
                let l = l.min(1.0);
                let phase = 2.0 * PI * (x as f64 * ridge_angle.cos() + y as f64 * ridge_angle.sin()) / lambda
                    + 1.5 * (2.0 * PI * y as f64 / (3.0 * lambda)).sin();
                let r = 0.5 * (1.0 + phase.sin());
                let i = y * wf + x;
                orography[i] = scn.ridge_amplitude * l * r * r;
                land_sea[i] = if l > 0.5 { 1.0 } else { 0.0 };
            }
        }
        let mean_z = orography.iter().sum::<f64>() / orography.len() as f64;
        let amp = scn.ridge_amplitude.abs().max(1e-12);
        let factor: Vec<f64> = orography.iter().map(|&z| (1.0 + scn.terrain_wind_gain * (z - mean_z) / amp).max(0.1)).collect();
        let mut slope_x = vec![0.0; hf * wf];
        let mut slope_y = vec![0.0; hf * wf];
        for y in 0..hf {
            for x in 0..wf {
                let (xl, xr) = ((x + wf - 1) % wf, (x + 1) % wf);
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(hf - 1));
                slope_x[y * wf + x] = (orography[y * wf + xr] - orography[y * wf + xl]) / 2.0;
                slope_y[y * wf + x] = (orography[yd * wf + x] - orography[yu * wf + x]) / (yd - yu).max(1) as f64;
            }
        }

        let modes = (0..MODES)
            .map(|_| {
                let kx = 2.0 * PI * rng.gen_range(1..=3) as f64 / wf as f64;
                let ky = 2.0 * PI / (rng.gen_range(0.6..1.5) * hf as f64);
                let k = (kx * kx + ky * ky).sqrt();
                let speed = rng.gen_range(-1.0..1.0) * 0.6 * scn.base_wind.abs().max(0.5);
                Mode {
                    kx,
                    ky,
                    omega: speed * kx,
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amp: scn.mode_amplitude / ((MODES as f64).sqrt() * k),
                }
            })
            .collect();
        let mut extra_mode = || ExtraMode {
            n: rng.gen_range(1..=3) as f64,
            m: rng.gen_range(0.5..1.5),
            omega: rng.gen_range(0.02..0.08),
            phase: rng.gen_range(0.0..2.0 * PI),
        };
        let extra = [extra_mode(), extra_mode()];
        let theta0 = rng.gen_range(0.0..2.0 * PI);
        let tracer_t = smooth_field(&mut rng, hf, wf, 8);
        let tracer_q = smooth_field(&mut rng, hf, wf, 8);
        let noise_seed = rng.gen();
        Ok(Self {
            scn: scn.clone(),
            hf,
            wf,
            lat,
            orography,
            land_sea,
            factor,
            slope_x,
            slope_y,
            tracer_t,
            tracer_q,
            modes,
            extra,
            theta0,
            rng: ChaCha8Rng::seed_from_u64(noise_seed),
            hour: 0,
        })
    }

    pub fn hour(&self) -> usize {
        self.hour
    }

    pub fn fine_latitudes(&self) -> &[f64] {
        &self.lat
    }

    pub fn fine_longitudes(&self) -> Vec<f64> {
        (0..self.wf).map(|x| (x as f64 + 0.5) * 360.0 / self.wf as f64).collect()
    }

    pub fn orography(&self) -> &[f64] {
        &self.orography
    }

    pub fn land_sea_mask(&self) -> &[f64] {
        &self.land_sea
    }

    /// Large-scale wind `(wx, wy)` in fine cells per hour and the velocity-scaled
    /// streamfunction at time `t` hours.
    fn wind(&self, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (hf, wf) = (self.hf, self.wf);
        let theta = if self.scn.rotation_period > 0.0 { self.theta0 + 2.0 * PI * t / self.scn.rotation_period } else { self.theta0 };
        let (bx, by) = (self.scn.base_wind * theta.cos(), self.scn.base_wind * theta.sin());
        let mut wx = vec![bx; hf * wf];
        let mut wy = vec![by; hf * wf];
        let mut psi = vec![0.0; hf * wf];
        for m in &self.modes {
            let k = (m.kx * m.kx + m.ky * m.ky).sqrt();
            let cols: Vec<(f64, f64)> = (0..wf).map(|x| (m.kx * x as f64).sin_cos()).collect();
            for y in 0..hf {
                let (sy, cy) = (m.ky * y as f64 - m.omega * t + m.phase).sin_cos();
                let base = y * wf;
                for (x, &(sx, cx)) in cols.iter().enumerate() {
                    let c = cx * cy - sx * sy;
                    let s = sx * cy + cx * sy;
                    wx[base + x] -= m.amp * m.ky * c;
                    wy[base + x] += m.amp * m.kx * c;
                    psi[base + x] += m.amp * k * s;
                }
            }
        }
        (wx, wy, psi)
    }

    fn advect(&self, field: &[f64], wx: &[f64], wy: &[f64]) -> Vec<f64> {
        let (hf, wf) = (self.hf, self.wf);
        let mut out = vec![0.0; hf * wf];
        for y in 0..hf {
            for x in 0..wf {
                let i = y * wf + x;
                let dy = y as f64 - wy[i];
                let dx = x as f64 - wx[i];
                let (y0, x0) = (dy.floor(), dx.floor());
                let (wyk, wxk) = (catmull_rom(dy - y0), catmull_rom(dx - x0));
                let mut acc = 0.0;
                for (a, wa) in wyk.iter().enumerate() {
                    let yy = (y0 as i64 - 1 + a as i64).clamp(0, hf as i64 - 1) as usize;
                    let row = &field[yy * wf..(yy + 1) * wf];
                    let mut r = 0.0;
                    for (b, wb) in wxk.iter().enumerate() {
                        let xx = (x0 as i64 - 1 + b as i64).rem_euclid(wf as i64) as usize;
                        r += wb * row[xx];
                    }
                    acc += wa * r;
                }
                out[i] = acc;
            }
        }
        out
    }

    /// Advances the world by one hour.
    pub fn step(&mut self) {
        let (wx, wy, _) = self.wind(self.hour as f64 + 0.5);
        let (wx, wy): (Vec<f64>, Vec<f64>) =
            (wx.iter().zip(&self.factor).map(|(w, f)| w * f).collect(), wy.iter().zip(&self.factor).map(|(w, f)| w * f).collect());
        self.tracer_t = self.advect(&self.tracer_t, &wx, &wy);
        self.tracer_q = self.advect(&self.tracer_q, &wx, &wy);
        let eps = self.scn.noise_scale.min(1.0);
        if eps > 0.0 {
            let rho = (1.0 - eps * eps).sqrt();
            for tracer in [0, 1] {
                let noise = smooth_field(&mut self.rng, self.hf, self.wf, NOISE_TERMS);
                let field = if tracer == 0 { &mut self.tracer_t } else { &mut self.tracer_q };
                for (v, n) in field.iter_mut().zip(noise) {
                    *v = rho * *v + eps * n;
                }
            }
        }
        self.hour += 1;
    }

    /// Fine-grid fields of the current hour.
    pub fn fine_frame(&self) -> FineFrame {
        let (hf, wf) = (self.hf, self.wf);
        let (wx, wy, psi) = self.wind(self.hour as f64);
        let mut ch = vec![vec![0.0; hf * wf]; 7];
        for y in 0..hf {
            let (sl, cl) = self.lat[y].to_radians().sin_cos();
            for x in 0..wf {
                let i = y * wf + x;
                let (z, f) = (self.orography[i], self.factor[i]);
                let (tt, tq) = (self.tracer_t[i], self.tracer_q[i]);
                let lift = f * (wx[i] * self.slope_x[i] + wy[i] * self.slope_y[i]);
                let tcc = sigmoid(1.5 * tq + 4.0 * lift - 0.5);
                ch[0][i] = 10.0 * wx[i] * f;
                ch[1][i] = -10.0 * wy[i] * f;
                ch[2][i] = 300.0 - 25.0 * sl * sl - 6.5 * z + 3.0 * tt;
                ch[3][i] = 8.0 * cl + 2.5 * tq - 2.0 * z;
                ch[4][i] = 1010.0 - 80.0 * z + 15.0 * psi[i];
                ch[5][i] = tcc;
                ch[6][i] = 900.0 * cl.max(0.0) * (1.0 - 0.75 * tcc);
            }
        }
        FineFrame {
            height: hf,
            width: wf,
            channels: ch,
            wind_u: wx.iter().map(|w| 10.0 * w).collect(),
            wind_v: wy.iter().map(|w| -10.0 * w).collect(),
        }
    }

    /// `h×w×7` crop of the region, channel-last.
    pub fn regional_frame(&self, frame: &FineFrame) -> Vec<f64> {
        let s = &self.scn;
        let mut out = Vec::with_capacity(s.region_height * s.region_width * 7);
        for y in s.region_row..s.region_row + s.region_height {
            for x in s.region_col..s.region_col + s.region_width {
                let i = y * self.wf + x;
                out.extend(frame.channels.iter().map(|c| c[i]));
            }
        }
        out
    }

    /// Crop of a fine single-channel field to the region.
    pub fn regional_crop(&self, fine: &[f64]) -> Vec<f64> {
        let s = &self.scn;
        (s.region_row..s.region_row + s.region_height)
            .flat_map(|y| (s.region_col..s.region_col + s.region_width).map(move |x| fine[y * self.wf + x]))
            .collect()
    }

    /// `H×W×8` coarse state, channel-last: u (2 levels), v (2 levels),
    /// surface T and Q, orography, land fraction.
    pub fn global_frame(&self, frame: &FineFrame) -> Vec<f64> {
        let (hf, wf, r) = (self.hf, self.wf, REFINEMENT);
        let (h, w) = (hf / r, wf / r);
        let t = self.hour as f64;
        let u1 = block_average(&frame.wind_u, hf, wf, r);
        let v1 = block_average(&frame.wind_v, hf, wf, r);
        let tt = block_average(&frame.channels[2], hf, wf, r);
        let qq = block_average(&frame.channels[3], hf, wf, r);
        let oro = block_average(&self.orography, hf, wf, r);
        let lsm = block_average(&self.land_sea, hf, wf, r);
        let extra = |e: &ExtraMode, i: usize, j: usize| {
            4.0 * self.scn.mode_amplitude
                * (2.0 * PI * (e.n * j as f64 / w as f64 + e.m * i as f64 / h as f64) - e.omega * t + e.phase).sin()
        };
        let mut out = Vec::with_capacity(h * w * 8);
        for i in 0..h {
            for j in 0..w {
                let c = i * w + j;
                out.extend_from_slice(&[
                    u1[c],
                    1.5 * u1[c] + extra(&self.extra[0], i, j),
                    v1[c],
                    1.5 * v1[c] + extra(&self.extra[1], i, j),
                    tt[c],
                    qq[c],
                    oro[c],
                    lsm[c],
                ]);
            }
        }
        out
    }
}
