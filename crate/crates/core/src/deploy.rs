//! Deployment artefacts: per-device weight bundles, quantised phase maps
//! and measured calibration matrices.
//!
//! # Bundle file
//!
//! ```text
//! simlink-bundle v1 sha256=<64 lowercase hex digits>
//! <payload JSON>
//! ```
//!
//! The digest covers the payload bytes exactly as stored, so any change to
//! them, including ones that would parse to the same values, is detected.
//!
//! # Phase map file
//!
//! ```text
//! simlink-phase-map v1
//! side=tx layers=3 pols=1 units_x=10 units_y=10 bits=8
//! layer,pol,ix,iy,level
//! 1,0,0,0,17
//! ```
//!
//! Records are layer-major, then polarisation, then unit rows (`ix`) and
//! columns (`iy`). The programmed phase is `level · 2π / 2^bits`.
//!
//! # Calibration file
//!
//! ```text
//! simlink-calibration v1
//! source=<free text>
//! matrix side=tx gap=1 subcarrier=0 rows=16 cols=4
//! row,col,re,im
//! 0,0,0.12,-0.3
//! ```
//!
//! Gap `l` of the TX side is the propagation from plane `l-1` to plane `l`
//! (plane 0 being the antennas); RX gaps are numbered the same way from the
//! antenna side. Each matrix lists all `rows · cols` entries.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emnn::{build_model, rx_group, ue_group, EmnnModel, ModelSpec, RunningStats, GROUP_BS, GROUP_TX};
use crate::error::{Error, Result};
use crate::metasurface::{MetasurfaceStack, PanelLayout, Polarization, PropagationSet, Side};
use crate::wavemath::{wrap_phase, CMat, Param};

pub const BUNDLE_MAGIC: &str = "simlink-bundle";
pub const PHASE_MAP_MAGIC: &str = "simlink-phase-map";
pub const CALIBRATION_MAGIC: &str = "simlink-calibration";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Role {
    Bs,
    Ue { user: usize },
}

/// Uniform phase codebook with `2^bits` levels on `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantization {
    pub bits: u32,
}

impl Quantization {
    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > 24 {
            return Err(Error::config(format!("phase quantisation needs 1..=24 bits, got {bits}")));
        }
        Ok(Quantization { bits })
    }

    pub fn levels(self) -> u32 {
        1 << self.bits
    }

    pub fn step(self) -> f64 {
        TAU / self.levels() as f64
    }

    pub fn level(self, theta: f64) -> u32 {
        ((wrap_phase(theta) / self.step()).round() as u64 % self.levels() as u64) as u32
    }

    pub fn phase(self, level: u32) -> f64 {
        level as f64 * self.step()
    }
}

/// Snaps every phase to the nearest codebook level.
pub fn quantize_phases(phases: &[f64], bits: u32) -> Result<(Vec<f64>, Quantization)> {
    let q = Quantization::new(bits)?;
    Ok((phases.iter().map(|&t| q.phase(q.level(t))).collect(), q))
}

/// Copy of `model` with every metasurface phase quantised.
pub fn quantize_model(model: &EmnnModel, bits: u32) -> Result<EmnnModel> {
    let q = Quantization::new(bits)?;
    let mut out = model.clone();
    let ids: Vec<_> = out
        .store
        .iter()
        .filter(|(_, p)| p.kind == crate::wavemath::ParamKind::Phase)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for t in &mut out.store.get_mut(id).data {
            *t = q.phase(q.level(*t));
        }
    }
    Ok(out)
}

/// Payload of one device bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployBundle {
    pub role: Role,
    pub model_version: u32,
    pub config_hash: String,
    /// Present when the metasurface phases were quantised.
    pub quantization: Option<Quantization>,
    pub params: Vec<Param>,
    /// Batch-norm running statistics (UE bundles only).
    pub running: Vec<RunningStats>,
}

impl DeployBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = serde_json::to_vec(self).map_err(|e| Error::config(format!("serialising bundle: {e}")))?;
        let digest = hex::encode(Sha256::digest(&payload));
        let mut out = format!("{BUNDLE_MAGIC} v{FORMAT_VERSION} sha256={digest}\n").into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Verifies the digest over the stored payload bytes, then parses them.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(origin, "missing bundle header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(origin, "header is not UTF-8"))?;
        let prefix = format!("{BUNDLE_MAGIC} v{FORMAT_VERSION} sha256=");
        let stored = header
            .strip_prefix(&prefix)
            .ok_or_else(|| Error::parse(origin, format!("expected `{prefix}…` header")))?;
        let payload = &bytes[nl + 1..];
        let actual = hex::encode(Sha256::digest(payload));
        if stored != actual {
            return Err(Error::parse(origin, "bundle digest mismatch"));
        }
        serde_json::from_slice(payload).map_err(|e| Error::parse(origin, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Splits a model into one BS bundle followed by one bundle per user.
pub fn partition(model: &EmnnModel, config_hash: &str, quantization: Option<Quantization>) -> Vec<DeployBundle> {
    let collect = |groups: &[String]| -> Vec<Param> {
        model
            .store
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(_, p)| p.clone())
            .collect()
    };
    let mut out = vec![DeployBundle {
        role: Role::Bs,
        model_version: FORMAT_VERSION,
        config_hash: config_hash.into(),
        quantization,
        params: collect(&[GROUP_BS.to_string(), GROUP_TX.to_string()]),
        running: Vec::new(),
    }];
    for j in 0..model.spec.users() {
        out.push(DeployBundle {
            role: Role::Ue { user: j },
            model_version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            quantization,
            params: collect(&[rx_group(j), ue_group(j)]),
            running: model.running[j].clone(),
        });
    }
    out
}

/// Rebuilds a model from its bundles. Every parameter must be supplied exactly once.
pub fn reassemble(spec: &ModelSpec, prop: PropagationSet, bundles: &[DeployBundle]) -> Result<EmnnModel> {
    let mut model = build_model(spec, prop, 0)?;
    let mut seen = BTreeMap::new();
    for b in bundles {
        for p in &b.params {
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| Error::config(format!("bundle parameter `{}` is not part of the model", p.name)))?;
            if seen.insert(p.name.clone(), ()).is_some() {
                return Err(Error::config(format!("parameter `{}` appears in two bundles", p.name)));
            }
            let slot = model.store.get_mut(id);
            if (slot.rows, slot.cols, &slot.group, slot.kind) != (p.rows, p.cols, &p.group, p.kind) {
                return Err(Error::config(format!("bundle parameter `{}` has the wrong shape or role", p.name)));
            }
            slot.data = p.data.clone();
        }
        if let Role::Ue { user } = b.role {
            if user >= spec.users() {
                return Err(Error::config(format!("bundle for user {user} of a {}-user model", spec.users())));
            }
            model.running[user] = b.running.clone();
        }
    }
    if seen.len() != model.store.len() {
        let missing: Vec<_> = model
            .store
            .iter()
            .filter(|(_, p)| !seen.contains_key(&p.name))
            .map(|(_, p)| p.name.clone())
            .collect();
        return Err(Error::config(format!("bundles do not cover {missing:?}")));
    }
    Ok(model)
}

/// Quantised phase levels of one metasurface stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseMap {
    pub side: Side,
    pub units_x: usize,
    pub units_y: usize,
    pub pols: usize,
    pub quantization: Quantization,
    /// `levels[layer][pol][unit]`.
    pub levels: Vec<Vec<Vec<u32>>>,
}

fn side_label(s: Side) -> &'static str {
    match s {
        Side::Tx => "tx",
        Side::Rx => "rx",
    }
}

fn parse_side(s: &str) -> Option<Side> {
    match s {
        "tx" => Some(Side::Tx),
        "rx" => Some(Side::Rx),
        _ => None,
    }
}

/// Parses `k=v` words of a header line.
fn header_fields<'a>(line: &'a str, origin: &str) -> Result<BTreeMap<&'a str, &'a str>> {
    line.split_whitespace()
        .map(|w| {
            w.split_once('=')
                .ok_or_else(|| Error::parse(origin, format!("expected key=value, found `{w}`")))
        })
        .collect()
}

fn field<T: std::str::FromStr>(f: &BTreeMap<&str, &str>, key: &str, origin: &str) -> Result<T> {
    f.get(key)
        .ok_or_else(|| Error::parse(origin, format!("missing `{key}`")))?
        .parse()
        .map_err(|_| Error::parse(origin, format!("bad value for `{key}`")))
}

impl PhaseMap {
    pub fn from_stack(stack: &MetasurfaceStack, q: Quantization) -> Result<Self> {
        stack.validate()?;
        Ok(PhaseMap {
            side: stack.layout.side,
            units_x: stack.layout.units_x,
            units_y: stack.layout.units_y,
            pols: stack.polarization.count(),
            quantization: q,
            levels: stack
                .phases
                .iter()
                .map(|layer| layer.iter().map(|pol| pol.iter().map(|&t| q.level(t)).collect()).collect())
                .collect(),
        })
    }

    pub fn records(&self) -> usize {
        self.levels.len() * self.pols * self.units_x * self.units_y
    }

    /// Stack with the programmed phases on `layout`.
    pub fn to_stack(&self, layout: &PanelLayout) -> Result<MetasurfaceStack> {
        if (layout.units_x, layout.units_y, layout.layer_count, layout.side)
            != (self.units_x, self.units_y, self.levels.len(), self.side)
        {
            return Err(Error::config("phase map does not match the panel layout"));
        }
        let polarization = if self.pols == 2 {
            Polarization::Dual
        } else {
            Polarization::Single
        };
        let s = MetasurfaceStack {
            layout: *layout,
            polarization,
            phases: self
                .levels
                .iter()
                .map(|l| l.iter().map(|p| p.iter().map(|&v| self.quantization.phase(v)).collect()).collect())
                .collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{PHASE_MAP_MAGIC} v{FORMAT_VERSION}\nside={} layers={} pols={} units_x={} units_y={} bits={}\nlayer,pol,ix,iy,level\n",
            side_label(self.side),
            self.levels.len(),
            self.pols,
            self.units_x,
            self.units_y,
            self.quantization.bits
        );
        for (l, layer) in self.levels.iter().enumerate() {
            for (p, pol) in layer.iter().enumerate() {
                for (m, v) in pol.iter().enumerate() {
                    s.push_str(&format!("{},{p},{},{},{v}\n", l + 1, m / self.units_y, m % self.units_y));
                }
            }
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let magic = format!("{PHASE_MAP_MAGIC} v{FORMAT_VERSION}");
        if lines.next() != Some(magic.as_str()) {
            return Err(Error::parse(origin, format!("expected `{magic}`")));
        }
        let f = header_fields(lines.next().unwrap_or(""), origin)?;
        let side = parse_side(f.get("side").copied().unwrap_or("")).ok_or_else(|| Error::parse(origin, "bad side"))?;
        let (layers, pols): (usize, usize) = (field(&f, "layers", origin)?, field(&f, "pols", origin)?);
        let (ux, uy): (usize, usize) = (field(&f, "units_x", origin)?, field(&f, "units_y", origin)?);
        let q = Quantization::new(field(&f, "bits", origin)?).map_err(|e| Error::parse(origin, e.to_string()))?;
        if !(1..=2).contains(&pols) || layers == 0 || ux == 0 || uy == 0 {
            return Err(Error::parse(origin, "layers, units and pols must be positive (pols 1 or 2)"));
        }
        if lines.next() != Some("layer,pol,ix,iy,level") {
            return Err(Error::parse(origin, "missing column header"));
        }
        let units = ux * uy;
        let mut levels = vec![vec![vec![0u32; units]; pols]; layers];
        let mut count = 0;
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::parse(origin, format!("record {}: `{line}`", n + 1));
            let v: Vec<u64> = line
                .split(',')
                .map(|x| x.trim().parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let [l, p, ix, iy, lev] = v[..] else { return Err(bad()) };
            let (l, p, ix, iy) = (l as usize, p as usize, ix as usize, iy as usize);
            // Records must follow the documented order.
            let expect = count;
            let (el, rem) = (expect / (pols * units), expect % (pols * units));
            let (ep, em) = (rem / units, rem % units);
            if l != el + 1 || p != ep || ix * uy + iy != em || iy >= uy || lev >= q.levels() as u64 {
                return Err(bad());
            }
            levels[el][ep][em] = lev as u32;
            count += 1;
        }
        if count != layers * pols * units {
            return Err(Error::parse(origin, format!("expected {} records, found {count}", layers * pols * units)));
        }
        Ok(PhaseMap {
            side,
            units_x: ux,
            units_y: uy,
            pols,
            quantization: q,
            levels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Exports the quantised phase map of a stack as text.
pub fn export_phase_map(stack: &MetasurfaceStack, q: Quantization) -> Result<String> {
    Ok(PhaseMap::from_stack(stack, q)?.to_text())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEntry {
    pub side: Side,
    /// 1-based gap index.
    pub gap: usize,
    pub subcarrier: usize,
    pub matrix: CMat,
}

/// Measured transmission matrices replacing analytic ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub source: String,
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationSet {
    /// Calibration equal to the analytic matrices of `prop`.
    pub fn from_propagation(prop: &PropagationSet, source: &str) -> Self {
        let mut entries = Vec::new();
        for i in 0..prop.subcarriers() {
            for (side, mats) in [(Side::Tx, &prop.tx[i]), (Side::Rx, &prop.rx[i])] {
                for (g, m) in mats.iter().enumerate() {
                    entries.push(CalibrationEntry {
                        side,
                        gap: g + 1,
                        subcarrier: i,
                        matrix: m.clone(),
                    });
                }
            }
        }
        CalibrationSet {
            source: source.into(),
            entries,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CALIBRATION_MAGIC} v{FORMAT_VERSION}\nsource={}\n", self.source.replace('\n', " "));
        for e in &self.entries {
            let (r, c) = e.matrix.shape();
            s.push_str(&format!(
                "matrix side={} gap={} subcarrier={} rows={r} cols={c}\nrow,col,re,im\n",
                side_label(e.side),
                e.gap,
                e.subcarrier
            ));
            for i in 0..r {
                for j in 0..c {
                    let z = e.matrix[(i, j)];
                    s.push_str(&format!("{i},{j},{:e},{:e}\n", z.re, z.im));
                }
            }
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let magic = format!("{CALIBRATION_MAGIC} v{FORMAT_VERSION}");
        if lines.next().map(|(_, l)| l) != Some(magic.as_str()) {
            return Err(Error::parse(origin, format!("expected `{magic}`")));
        }
        let source = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("source=")
                .ok_or_else(|| Error::parse(origin, "missing source line"))?
                .to_string(),
            None => return Err(Error::parse(origin, "missing source line")),
        };
        let mut entries = Vec::new();
        while let Some((n, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let at = |msg: String| Error::parse(origin, format!("line {}: {msg}", n + 1));
            let rest = line.strip_prefix("matrix ").ok_or_else(|| at(format!("expected a matrix header, found `{line}`")))?;
            let f = header_fields(rest, origin)?;
            let side = parse_side(f.get("side").copied().unwrap_or("")).ok_or_else(|| at("bad side".into()))?;
            let gap: usize = field(&f, "gap", origin)?;
            let subcarrier: usize = field(&f, "subcarrier", origin)?;
            let (rows, cols): (usize, usize) = (field(&f, "rows", origin)?, field(&f, "cols", origin)?);
            if gap == 0 || rows == 0 || cols == 0 {
                return Err(at("gap, rows and cols must be positive".into()));
            }
            match lines.next() {
                Some((_, "row,col,re,im")) => {}
                _ => return Err(at("missing column header".into())),
            }
            let mut m = CMat::zeros(rows, cols);
            for k in 0..rows * cols {
                let (ln, rec) = lines.next().ok_or_else(|| at(format!("matrix ends after {k} of {} entries", rows * cols)))?;
                let bad = || Error::parse(origin, format!("line {}: `{rec}`", ln + 1));
                let parts: Vec<&str> = rec.split(',').map(str::trim).collect();
                let [r, c, re, im] = parts[..] else { return Err(bad()) };
                let (r, c): (usize, usize) = (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
                let (re, im): (f64, f64) = (re.parse().map_err(|_| bad())?, im.parse().map_err(|_| bad())?);
                if (r, c) != (k / cols, k % cols) || !re.is_finite() || !im.is_finite() {
                    return Err(bad());
                }
                m[(r, c)] = Complex64::new(re, im);
            }
            entries.push(CalibrationEntry {
                side,
                gap,
                subcarrier,
                matrix: m,
            });
        }
        Ok(CalibrationSet { source, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Replaces the model's transmission matrices with the calibrated ones.
/// All entries are checked before anything is changed.
pub fn apply_calibration(model: &mut EmnnModel, cal: &CalibrationSet) -> Result<()> {
    for e in &cal.entries {
        let mats = match e.side {
            Side::Tx => model.prop.tx.get(e.subcarrier),
            Side::Rx => model.prop.rx.get(e.subcarrier),
        }
        .ok_or_else(|| Error::config(format!("calibration subcarrier {} out of range", e.subcarrier)))?;
        let target = mats.get(e.gap - 1).ok_or_else(|| {
            Error::config(format!("calibration {} gap {} out of range", side_label(e.side), e.gap))
        })?;
        if target.shape() != e.matrix.shape() {
            return Err(Error::config(format!(
                "calibration {} gap {} subcarrier {}: expected {:?}, found {:?}",
                side_label(e.side),
                e.gap,
                e.subcarrier,
                target.shape(),
                e.matrix.shape()
            )));
        }
        if !e.matrix.is_finite() {
            return Err(Error::config("calibration matrix has non-finite entries"));
        }
    }
    for e in &cal.entries {
        let slot = match e.side {
            Side::Tx => &mut model.prop.tx[e.subcarrier][e.gap - 1],
            Side::Rx => &mut model.prop.rx[e.subcarrier][e.gap - 1],
        };
        *slot = e.matrix.clone();
    }
    Ok(())
}
