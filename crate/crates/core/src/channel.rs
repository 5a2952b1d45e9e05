//! Geometric multipath channels between the last TX metasurface layer and
//! each user's outermost RX layer, with a dual-polarised extension.
//!
//! Angles are measured per array: the elevation `ϑ ∈ [0, π/2)` is the angle
//! between the path direction and the array normal (z), the azimuth
//! `φ ∈ [0, 2π)` is measured in the array plane from +x. Steering vectors
//! follow the x-major Kronecker order used for unit indices.

use std::f64::consts::{PI, TAU};
use std::path::Path as FsPath;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metasurface::{PanelLayout, Polarization, SPEED_OF_LIGHT};
use crate::wavemath::{CMat, RngStreams};

/// Format tag written at the top of exported realizations.
pub const CHANNEL_FORMAT: &str = "simlink-channel";
pub const CHANNEL_VERSION: u32 = 1;

/// Path-loss parameters of the log-distance model with shadowing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLossModel {
    /// Reference distance `d0` in metres.
    pub reference_distance: f64,
    pub exponent: f64,
    /// Shadowing standard deviation in dB.
    pub shadowing_db: f64,
    /// Wavelength used by the free-space term, metres.
    pub wavelength: f64,
}

/// Free-space loss at `d0` plus the log-distance slope, in dB, without shadowing.
pub fn mean_path_loss_db(d: f64, m: &PathLossModel) -> Result<f64> {
    let d0 = m.reference_distance;
    if !(d0 > 0.0) || !(d >= d0) {
        return Err(Error::domain(format!(
            "path loss needs d >= d0 > 0, got d={d}, d0={d0}"
        )));
    }
    Ok(20.0 * (4.0 * PI * d0 / m.wavelength).log10() + 10.0 * m.exponent * (d / d0).log10())
}

/// Path loss in dB including one shadowing draw `X ~ N(0, δ²)` from `rng`.
pub fn path_loss_db(d: f64, m: &PathLossModel, rng: &mut impl Rng) -> Result<f64> {
    let base = mean_path_loss_db(d, m)?;
    let x: f64 = rng.sample(StandardNormal);
    Ok(base + m.shadowing_db * x)
}

/// How the polarisation phase offsets `ψ` of a dual-polarised link are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhaseOffsets {
    /// A property of the link: the same `ψ^{00}, ψ^{01}, ψ^{10}, ψ^{11}` in every realization.
    Fixed { psi: [f64; 4] },
    /// Redrawn uniformly on `[0, 2π)` for every realization.
    Uniform,
}

impl Default for PhaseOffsets {
    fn default() -> Self {
        PhaseOffsets::Fixed { psi: [0.0; 4] }
    }
}

/// Scene geometry and scatterer statistics shared by all realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub bs_position: [f64; 3],
    pub user_positions: Vec<[f64; 3]>,
    /// Number of non-line-of-sight paths `S`.
    pub scatterers: usize,
    /// Ratio of line-of-sight to aggregate scattered power, dB.
    pub rician_k_db: f64,
    /// Mean of the exponential excess delay of scattered paths, seconds.
    pub mean_excess_delay: f64,
    pub path_loss: PathLossModel,
    /// Polarisation conversion power ratio `ε`.
    pub epsilon: f64,
    #[serde(default)]
    pub phase_offsets: PhaseOffsets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub gain: Complex64,
    /// Seconds.
    pub delay: f64,
    pub tx_elevation: f64,
    pub tx_azimuth: f64,
    pub rx_elevation: f64,
    pub rx_azimuth: f64,
    pub los: bool,
}

/// All paths from the base station to one user; `paths[0]` is line of sight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<Path>,
    /// Large-scale loss applied to this user, dB (shadowing included).
    pub path_loss_db: f64,
}

/// Elevation from the z-normal and azimuth of a direction vector.
fn direction_angles(v: [f64; 3]) -> Result<(f64, f64)> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let el = (v[2].abs() / n).min(1.0).acos();
    if !(el < PI / 2.0) {
        return Err(Error::domain(
            "line-of-sight direction lies in the array plane (elevation = π/2)",
        ));
    }
    let az = v[1].atan2(v[0]).rem_euclid(TAU);
    Ok((el, if az >= TAU { 0.0 } else { az }))
}

/// Draws the path set of user `j`. `rng` supplies shadowing, scatterer
/// angles, delays and small-scale gains in that order.
pub fn sample_paths(scene: &Scene, j: usize, rng: &mut impl Rng) -> Result<PathSet> {
    let ue = *scene
        .user_positions
        .get(j)
        .ok_or_else(|| Error::config(format!("no user {j} in scene")))?;
    let bs = scene.bs_position;
    let d_vec = [ue[0] - bs[0], ue[1] - bs[1], ue[2] - bs[2]];
    let d = (d_vec[0].powi(2) + d_vec[1].powi(2) + d_vec[2].powi(2)).sqrt();
    if !(d > 0.0) {
        return Err(Error::domain(format!("user {j} sits at the base station")));
    }
    let pl = path_loss_db(d, &scene.path_loss, rng)?;
    let los_amp = 10f64.powf(-pl / 20.0);
    let (tx_el, tx_az) = direction_angles(d_vec)?;
    let (rx_el, rx_az) = direction_angles([-d_vec[0], -d_vec[1], -d_vec[2]])?;
    let tau0 = d / SPEED_OF_LIGHT;
    let mut paths = vec![Path {
        gain: Complex64::new(los_amp, 0.0),
        delay: tau0,
        tx_elevation: tx_el,
        tx_azimuth: tx_az,
        rx_elevation: rx_el,
        rx_azimuth: rx_az,
        los: true,
    }];
    if scene.scatterers > 0 {
        if !(scene.mean_excess_delay > 0.0) {
            return Err(Error::config("mean excess delay must be positive"));
        }
        let excess = Exp::new(1.0 / scene.mean_excess_delay)
            .map_err(|e| Error::config(format!("excess delay law: {e}")))?;
        let mut raw = Vec::with_capacity(scene.scatterers);
        for _ in 0..scene.scatterers {
            let tx_el = rng.random_range(0.0..PI / 2.0);
            let tx_az = rng.random_range(0.0..TAU);
            let rx_el = rng.random_range(0.0..PI / 2.0);
            let rx_az = rng.random_range(0.0..TAU);
            let delay = tau0 + excess.sample(rng);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            raw.push((Complex64::new(re, im), delay, tx_el, tx_az, rx_el, rx_az));
        }
        let total: f64 = raw.iter().map(|r| r.0.norm_sqr()).sum();
        let target = los_amp * los_amp / 10f64.powf(scene.rician_k_db / 10.0);
        let scale = if total > 0.0 { (target / total).sqrt() } else { 0.0 };
        for (g, delay, tx_el, tx_az, rx_el, rx_az) in raw {
            paths.push(Path {
                gain: g * scale,
                delay,
                tx_elevation: tx_el,
                tx_azimuth: tx_az,
                rx_elevation: rx_el,
                rx_azimuth: rx_az,
                los: false,
            });
        }
    }
    Ok(PathSet {
        paths,
        path_loss_db: pl,
    })
}

/// Planar-array response `α_x(ψ_x) ⊗ α_y(ψ_y)` with
/// `ψ_x = 2π f d sinϑ sinφ / c` and `ψ_y = 2π f d cosϑ / c`.
pub fn steering_vector(layout: &PanelLayout, elevation: f64, azimuth: f64, freq: f64) -> CMat {
    let k = 2.0 * PI * freq * layout.unit_spacing / SPEED_OF_LIGHT;
    let px = k * elevation.sin() * azimuth.sin();
    let py = k * elevation.cos();
    let (nx, ny) = (layout.units_x, layout.units_y);
    CMat::from_fn(nx * ny, 1, |m, _| {
        let (ix, iy) = (m / ny, m % ny);
        Complex64::from_polar(1.0, ix as f64 * px + iy as f64 * py)
    })
}

/// `G = Σ_s g_s e^{−j2πfτ_s} α^r_s (α^t_s)ᴴ`, `N × M`.
pub fn channel_matrix(paths: &PathSet, freq: f64, tx: &PanelLayout, rx: &PanelLayout) -> CMat {
    let (n, m) = (rx.units(), tx.units());
    let mut g = CMat::zeros(n, m);
    for p in &paths.paths {
        let coef = p.gain * Complex64::from_polar(1.0, -2.0 * PI * freq * p.delay);
        let at = steering_vector(tx, p.tx_elevation, p.tx_azimuth, freq);
        let ar = steering_vector(rx, p.rx_elevation, p.rx_azimuth, freq);
        let (at, ar) = (at.as_slice(), ar.as_slice());
        for r in 0..n {
            let cr = coef * ar[r];
            for c in 0..m {
                g[(r, c)] += cr * at[c].conj();
            }
        }
    }
    g
}

/// `(1 − ε)/ε`.
pub fn xpd(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::domain(format!(
            "polarisation conversion ratio must lie in (0, 1) for a finite cross-polar scale, got {epsilon}"
        )));
    }
    Ok((1.0 - epsilon) / epsilon)
}

/// Phase offsets `ψ^{00}, ψ^{01}, ψ^{10}, ψ^{11}`, uniform on `[0, 2π)`.
pub fn sample_polarization_phases(rng: &mut impl Rng) -> [f64; 4] {
    std::array::from_fn(|_| rng.random_range(0.0..TAU))
}

/// Dual-polarised channel `[[G00, G01], [G10, G11]]`; co-polar blocks are
/// `e^{jψ}G`, cross-polar blocks `e^{jψ}G/√XPD`.
pub fn dp_channel(g: &CMat, epsilon: f64, psi: [f64; 4]) -> Result<CMat> {
    let cross = 1.0 / xpd(epsilon)?.sqrt();
    let (n, m) = g.shape();
    let mut out = CMat::zeros(2 * n, 2 * m);
    let amps = [1.0, cross, cross, 1.0];
    for (b, (&a, &ph)) in amps.iter().zip(&psi).enumerate() {
        let (q, p) = (b / 2, b % 2);
        let s = Complex64::from_polar(a, ph);
        for r in 0..n {
            for c in 0..m {
                out[(q * n + r, p * m + c)] = s * g[(r, c)];
            }
        }
    }
    Ok(out)
}

/// One user's channel on every subcarrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserChannel {
    pub paths: PathSet,
    /// `ψ^{00}, ψ^{01}, ψ^{10}, ψ^{11}`; present for dual polarisation.
    pub polarization_phases: Option<[f64; 4]>,
    /// Per-subcarrier matrix: `N × M`, or `2N × 2M` for dual polarisation.
    pub matrices: Vec<CMat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub polarization: Polarization,
    pub frequencies: Vec<f64>,
    pub users: Vec<UserChannel>,
}

impl ChannelRealization {
    pub fn matrix(&self, user: usize, subcarrier: usize) -> &CMat {
        &self.users[user].matrices[subcarrier]
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().flat_map(|u| &u.matrices).all(CMat::is_finite)
    }

    /// Rebuilds the matrices from the stored paths and polarisation phases.
    pub fn rebuild(&self, tx: &PanelLayout, rx: &PanelLayout, epsilon: f64) -> Result<ChannelRealization> {
        let users = self
            .users
            .iter()
            .map(|u| {
                let matrices = self
                    .frequencies
                    .iter()
                    .map(|&f| {
                        let g = channel_matrix(&u.paths, f, tx, rx);
                        match (self.polarization, u.polarization_phases) {
                            (Polarization::Single, _) => Ok(g),
                            (Polarization::Dual, Some(psi)) => dp_channel(&g, epsilon, psi),
                            (Polarization::Dual, None) => {
                                Err(Error::config("dual-polarised user without phase offsets"))
                            }
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(UserChannel {
                    paths: u.paths.clone(),
                    polarization_phases: u.polarization_phases,
                    matrices,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChannelRealization {
            polarization: self.polarization,
            frequencies: self.frequencies.clone(),
            users,
        })
    }
}

/// Everything needed to draw realizations for one link configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub scene: Scene,
    pub tx: PanelLayout,
    pub rx: PanelLayout,
    pub frequencies: Vec<f64>,
    pub polarization: Polarization,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        self.tx.validate()?;
        self.rx.validate()?;
        if self.scene.user_positions.is_empty() {
            return Err(Error::config("scene has no users"));
        }
        if self.frequencies.is_empty() {
            return Err(Error::config("no subcarriers"));
        }
        if self.polarization == Polarization::Dual {
            xpd(self.scene.epsilon)?;
            if let PhaseOffsets::Fixed { psi } = self.scene.phase_offsets {
                if psi.iter().any(|p| !p.is_finite()) {
                    return Err(Error::config("polarisation phase offsets must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Realization number `index` of the distribution seeded by `streams`.
    pub fn realization(&self, streams: &RngStreams, index: u64) -> Result<ChannelRealization> {
        self.validate()?;
        let mut rng = streams.stream("channel", index);
        let mut users = Vec::with_capacity(self.scene.user_positions.len());
        for j in 0..self.scene.user_positions.len() {
            let paths = sample_paths(&self.scene, j, &mut rng)?;
            let psi = match self.polarization {
                Polarization::Single => None,
                Polarization::Dual => Some(match self.scene.phase_offsets {
                    PhaseOffsets::Fixed { psi } => psi,
                    PhaseOffsets::Uniform => sample_polarization_phases(&mut rng),
                }),
            };
            users.push(UserChannel {
                paths,
                polarization_phases: psi,
                matrices: Vec::new(),
            });
        }
        ChannelRealization {
            polarization: self.polarization,
            frequencies: self.frequencies.clone(),
            users,
        }
        .rebuild(&self.tx, &self.rx, self.scene.epsilon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Statistical,
    Instantaneous,
}

/// Source of channel realizations for training and evaluation.
#[derive(Debug, Clone)]
pub enum ChannelProvider {
    /// Fresh i.i.d. realization per request; request `k` is reproducible.
    Statistical {
        spec: ChannelSpec,
        streams: RngStreams,
        next: u64,
    },
    /// The same stored realization on every request.
    Instantaneous { realization: ChannelRealization },
}

impl ChannelProvider {
    pub fn statistical(spec: ChannelSpec, streams: RngStreams) -> Result<Self> {
        spec.validate()?;
        Ok(ChannelProvider::Statistical {
            spec,
            streams,
            next: 0,
        })
    }

    pub fn instantaneous(realization: ChannelRealization) -> Self {
        ChannelProvider::Instantaneous { realization }
    }

    pub fn mode(&self) -> ProviderMode {
        match self {
            ChannelProvider::Statistical { .. } => ProviderMode::Statistical,
            ChannelProvider::Instantaneous { .. } => ProviderMode::Instantaneous,
        }
    }

    pub fn provide(&mut self) -> Result<ChannelRealization> {
        match self {
            ChannelProvider::Statistical {
                spec,
                streams,
                next,
            } => {
                let r = spec.realization(streams, *next)?;
                *next += 1;
                Ok(r)
            }
            ChannelProvider::Instantaneous { realization } => Ok(realization.clone()),
        }
    }
}

/// Self-describing export of one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelFile {
    pub format: String,
    pub version: u32,
    pub spec: ChannelSpec,
    pub master_seed: u64,
    pub index: u64,
    pub realization: ChannelRealization,
}

impl ChannelFile {
    pub fn new(spec: ChannelSpec, master_seed: u64, index: u64, realization: ChannelRealization) -> Self {
        ChannelFile {
            format: CHANNEL_FORMAT.into(),
            version: CHANNEL_VERSION,
            spec,
            master_seed,
            index,
            realization,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::config(format!("serialising channel: {e}")))
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let f: ChannelFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if f.format != CHANNEL_FORMAT || f.version != CHANNEL_VERSION {
            return Err(Error::parse(
                origin,
                format!("expected {CHANNEL_FORMAT} v{CHANNEL_VERSION}, found {} v{}", f.format, f.version),
            ));
        }
        Ok(f)
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// Noise standard deviation per real dimension for a complex noise power in dBm.
pub fn noise_std_per_dim(noise_power_dbm: f64) -> f64 {
    (dbm_to_watts(noise_power_dbm) / 2.0).sqrt()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Circularly-symmetric complex Gaussian matrix with total variance `power` per entry.
pub fn complex_noise(rows: usize, cols: usize, power: f64, rng: &mut impl Rng) -> CMat {
    let sd = (power / 2.0).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    CMat::from_fn(rows, cols, |_, _| {
        Complex64::new(sd * normal.sample(rng), sd * normal.sample(rng))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metasurface::Side;

    pub(crate) fn table_scene() -> Scene {
        Scene {
            bs_position: [0.0, 0.0, 0.0],
            user_positions: vec![[10.0, 0.0, 20.0], [20.0, 0.0, 20.0], [0.0, 0.0, 30.0]],
            scatterers: 100,
            rician_k_db: 10.0,
            mean_excess_delay: 100e-9,
            path_loss: PathLossModel {
                reference_distance: 1.0,
                exponent: 3.5,
                shadowing_db: 9.0,
                wavelength: 0.0107,
            },
            epsilon: 0.2,
            phase_offsets: PhaseOffsets::Uniform,
        }
    }

    fn panel(side: Side, n: usize) -> PanelLayout {
        PanelLayout {
            side,
            units_x: n,
            units_y: n,
            unit_spacing: 0.0107 / 2.0,
            layer_spacing: 0.0107 / 2.0,
            layer_count: 1,
            antennas_x: 2,
            antennas_y: 2,
        }
    }

    #[test]
    fn free_space_term_at_reference() {
        let m = PathLossModel {
            reference_distance: 1.0,
            exponent: 3.5,
            shadowing_db: 0.0,
            wavelength: 0.0107,
        };
        let pl = mean_path_loss_db(1.0, &m).unwrap();
        let oracle = 20.0 * (4.0 * PI / 0.0107f64).log10();
        assert!((pl - oracle).abs() < 1e-12);
        assert!((pl - 61.40).abs() < 0.01, "{pl}");
        let slope = mean_path_loss_db(2.0, &m).unwrap() - pl;
        assert!((slope - 35.0 * 2f64.log10()).abs() < 1e-12);
        assert!((slope - 10.54).abs() < 0.005);
        assert!(matches!(mean_path_loss_db(0.5, &m), Err(Error::Domain(_))));
    }

    #[test]
    fn shadowing_spread() {
        let m = PathLossModel {
            reference_distance: 1.0,
            exponent: 3.5,
            shadowing_db: 9.0,
            wavelength: 0.0107,
        };
        let mut rng = RngStreams::new(11).stream("shadowing", 0);
        let base = mean_path_loss_db(5.0, &m).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| path_loss_db(5.0, &m, &mut rng).unwrap() - base).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        assert!((sd - 9.0).abs() < 0.5, "{sd}");
    }

    #[test]
    fn los_only_delay_and_determinism() {
        let mut scene = table_scene();
        scene.scatterers = 0;
        let p = sample_paths(&scene, 0, &mut RngStreams::new(1).stream("c", 0)).unwrap();
        assert_eq!(p.paths.len(), 1);
        let tau = 500f64.sqrt() / SPEED_OF_LIGHT;
        assert!((p.paths[0].delay - tau).abs() < 1e-20);
        assert!((tau - 74.6e-9).abs() < 0.05e-9);
        let full = table_scene();
        let a = sample_paths(&full, 1, &mut RngStreams::new(3).stream("c", 0)).unwrap();
        let b = sample_paths(&full, 1, &mut RngStreams::new(3).stream("c", 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.paths.len(), 101);
        assert!(a.paths[1..].iter().all(|q| q.delay >= a.paths[0].delay));
        assert!(a.paths.iter().all(|q| (0.0..PI / 2.0).contains(&q.tx_elevation)
            && (0.0..TAU).contains(&q.rx_azimuth)));
    }

    #[test]
    fn scattered_power_follows_rician_factor() {
        let p = sample_paths(&table_scene(), 0, &mut RngStreams::new(5).stream("c", 0)).unwrap();
        let los = p.paths[0].gain.norm_sqr();
        let nlos: f64 = p.paths[1..].iter().map(|q| q.gain.norm_sqr()).sum();
        assert!((los / nlos - 10.0).abs() < 1e-9);
    }

    #[test]
    fn user_at_base_station_rejected() {
        let mut s = table_scene();
        s.user_positions[0] = [0.0; 3];
        assert!(matches!(
            sample_paths(&s, 0, &mut RngStreams::new(1).stream("c", 0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn steering_vector_basics() {
        let l = panel(Side::Tx, 10);
        let a = steering_vector(&l, 0.7, 2.1, 28e9);
        assert_eq!(a.shape(), (100, 1));
        assert_eq!(a[(0, 0)], Complex64::new(1.0, 0.0));
        assert!(a.as_slice().iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_path_channel_is_rank_one_with_known_norm() {
        let (tx, rx) = (panel(Side::Tx, 4), panel(Side::Rx, 3));
        let p = PathSet {
            path_loss_db: 0.0,
            paths: vec![Path {
                gain: Complex64::new(0.3, -0.4),
                delay: 50e-9,
                tx_elevation: 0.4,
                tx_azimuth: 1.0,
                rx_elevation: 0.9,
                rx_azimuth: 4.0,
                los: true,
            }],
        };
        let g = channel_matrix(&p, 28e9, &tx, &rx);
        assert!((g.frobenius_norm() - 0.5 * (9.0f64 * 16.0).sqrt()).abs() < 1e-12);
        // Every 2×2 minor of an outer product vanishes.
        for r in 1..g.rows() {
            for c in 1..g.cols() {
                let det = g[(0, 0)] * g[(r, c)] - g[(0, c)] * g[(r, 0)];
                assert!(det.norm() < 1e-12);
            }
        }
        let g2 = channel_matrix(&p, 28.04e9, &tx, &rx);
        assert!((g2.frobenius_norm() - g.frobenius_norm()).abs() < 1e-12);
        assert!(g2.rel_frobenius_dist(&g) > 1e-6);
    }

    #[test]
    fn dual_polarised_block_norms() {
        assert!((xpd(0.2).unwrap() - 4.0).abs() < 1e-12);
        let g = CMat::from_fn(3, 4, |r, c| Complex64::new(r as f64 + 1.0, c as f64 - 1.5));
        let d = dp_channel(&g, 0.2, [0.1, 0.2, 0.3, 0.4]).unwrap();
        let blk = |q: usize, p: usize| d.block(q * 3, p * 4, 3, 4).frobenius_norm();
        assert!((blk(0, 1) / blk(0, 0) - 0.5).abs() < 1e-12);
        assert!((blk(1, 0) / blk(1, 1) - 0.5).abs() < 1e-12);
        let e = dp_channel(&g, 0.5, [0.0; 4]).unwrap();
        let n00 = e.block(0, 0, 3, 4).frobenius_norm();
        for (q, p) in [(0, 1), (1, 0), (1, 1)] {
            assert!((e.block(q * 3, p * 4, 3, 4).frobenius_norm() - n00).abs() < 1e-12);
        }
        for bad in [0.0, 1.0, 1.5, -0.1] {
            assert!(matches!(dp_channel(&g, bad, [0.0; 4]), Err(Error::Domain(_))));
        }
    }

    fn spec(pol: Polarization) -> ChannelSpec {
        let mut scene = table_scene();
        scene.scatterers = 5;
        ChannelSpec {
            scene,
            tx: panel(Side::Tx, 3),
            rx: panel(Side::Rx, 3),
            frequencies: vec![27.99e9, 28.01e9],
            polarization: pol,
        }
    }

    #[test]
    fn providers() {
        let r0 = spec(Polarization::Single).realization(&RngStreams::new(8), 0).unwrap();
        let mut inst = ChannelProvider::instantaneous(r0.clone());
        assert_eq!(inst.provide().unwrap(), inst.provide().unwrap());
        let mut stat = ChannelProvider::statistical(spec(Polarization::Single), RngStreams::new(8)).unwrap();
        let a = stat.provide().unwrap();
        let b = stat.provide().unwrap();
        assert_eq!(a, r0);
        assert!(a.matrix(0, 0).rel_frobenius_dist(b.matrix(0, 0)) > 0.0);
        let again = spec(Polarization::Single).realization(&RngStreams::new(8), 1).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn dual_realization_shapes_and_round_trip() {
        let s = spec(Polarization::Dual);
        let r = s.realization(&RngStreams::new(2), 4).unwrap();
        assert_eq!(r.matrix(2, 1).shape(), (18, 18));
        let file = ChannelFile::new(s.clone(), 2, 4, r.clone());
        let back = ChannelFile::from_json(&file.to_json().unwrap(), "mem").unwrap();
        assert_eq!(back, file);
        let rebuilt = back.realization.rebuild(&s.tx, &s.rx, s.scene.epsilon).unwrap();
        assert_eq!(rebuilt, r);
    }

    #[test]
    fn phase_offset_modes() {
        let mut s = spec(Polarization::Dual);
        let psi = |s: &ChannelSpec, k| s.realization(&RngStreams::new(3), k).unwrap().users[0].polarization_phases.unwrap();
        assert_ne!(psi(&s, 0), psi(&s, 1));
        s.scene.phase_offsets = PhaseOffsets::Fixed { psi: [0.1, 0.2, 0.3, 0.4] };
        assert_eq!(psi(&s, 0), [0.1, 0.2, 0.3, 0.4]);
        assert_eq!(psi(&s, 1), [0.1, 0.2, 0.3, 0.4]);
        s.scene.phase_offsets = PhaseOffsets::Fixed { psi: [f64::NAN, 0.0, 0.0, 0.0] };
        assert!(s.realization(&RngStreams::new(3), 0).is_err());
    }

    #[test]
    fn wrong_version_rejected() {
        let s = spec(Polarization::Single);
        let r = s.realization(&RngStreams::new(2), 0).unwrap();
        let mut file = ChannelFile::new(s, 2, 0, r);
        file.version = 99;
        let text = serde_json::to_string(&file).unwrap();
        assert!(matches!(ChannelFile::from_json(&text, "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn dbm_conversions() {
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-15);
        assert!((watts_to_dbm(1e-3)).abs() < 1e-12);
        assert!((noise_std_per_dim(-110.0) - (0.5e-14f64).sqrt()).abs() < 1e-22);
    }
}
