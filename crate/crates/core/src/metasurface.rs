//! Metasurface stacks: unit geometry, inter-layer diffraction and the
//! layered transmission chains of single- and dual-polarised devices.
//!
//! Layer 0 of a stack is the antenna plane; layers `1..=layer_count` are the
//! programmable metasurfaces. Layers are parallel to the x–y plane, spaced
//! `layer_spacing` apart along z, and every plane is a grid centred on the
//! z-axis with pitch `unit_spacing`. Unit `(ix, iy)` has linear index
//! `ix · units_y + iy`, matching the x-major Kronecker order of steering vectors.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavemath::{cmatmul, CMat};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Tx,
    Rx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarization {
    Single,
    Dual,
}

impl Polarization {
    pub fn count(self) -> usize {
        match self {
            Polarization::Single => 1,
            Polarization::Dual => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanelLayout {
    pub side: Side,
    pub units_x: usize,
    pub units_y: usize,
    /// Unit pitch in metres (`d`); unit area is `d²`.
    pub unit_spacing: f64,
    /// Distance between adjacent layers in metres.
    pub layer_spacing: f64,
    pub layer_count: usize,
    pub antennas_x: usize,
    pub antennas_y: usize,
}

impl PanelLayout {
    pub fn units(&self) -> usize {
        self.units_x * self.units_y
    }

    pub fn antennas(&self) -> usize {
        self.antennas_x * self.antennas_y
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("units_x", self.units_x),
            ("units_y", self.units_y),
            ("layer_count", self.layer_count),
            ("antennas_x", self.antennas_x),
            ("antennas_y", self.antennas_y),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{:?} panel: {name} must be >= 1", self.side)));
            }
        }
        if !(self.unit_spacing > 0.0 && self.layer_spacing > 0.0) {
            return Err(Error::config(format!("{:?} panel: spacings must be positive", self.side)));
        }
        if self.antennas_x > self.units_x || self.antennas_y > self.units_y {
            return Err(Error::config(format!(
                "{:?} panel: {}x{} antennas do not fit behind a {}x{} metasurface",
                self.side, self.antennas_x, self.antennas_y, self.units_x, self.units_y
            )));
        }
        Ok(())
    }

    /// Centres of the elements of plane `layer` (0 = antennas).
    pub fn positions(&self, layer: usize) -> Vec<[f64; 3]> {
        let (nx, ny) = if layer == 0 {
            (self.antennas_x, self.antennas_y)
        } else {
            (self.units_x, self.units_y)
        };
        let z = layer as f64 * self.layer_spacing;
        let cx = (nx as f64 - 1.0) / 2.0;
        let cy = (ny as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(nx * ny);
        for ix in 0..nx {
            for iy in 0..ny {
                out.push([
                    (ix as f64 - cx) * self.unit_spacing,
                    (iy as f64 - cy) * self.unit_spacing,
                    z,
                ]);
            }
        }
        out
    }

    /// `(ix, iy)` grid coordinates of unit `m` on a metasurface layer.
    pub fn unit_coords(&self, m: usize) -> (usize, usize) {
        (m / self.units_y, m % self.units_y)
    }
}

/// `N^c` subcarrier centre frequencies spaced `B/N^c` apart and centred on `f0`.
pub fn subcarrier_frequencies(f0: f64, bandwidth: f64, count: usize) -> Vec<f64> {
    let step = bandwidth / count as f64;
    (0..count)
        .map(|i| f0 - bandwidth / 2.0 + (i as f64 + 0.5) * step)
        .collect()
}

/// Rayleigh–Sommerfeld coefficient between two element centres.
pub fn rs_coefficient(src: [f64; 3], dst: [f64; 3], area: f64, freq: f64) -> Result<Complex64> {
    let d = [dst[0] - src[0], dst[1] - src[1], dst[2] - src[2]];
    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !(r > 0.0) {
        return Err(Error::config("diffraction between coincident elements (zero distance)"));
    }
    let cos_chi = d[2].abs() / r;
    let k = freq / SPEED_OF_LIGHT;
    let amp = area * cos_chi / r;
    let near = Complex64::new(1.0 / (2.0 * PI * r), -k);
    Ok(amp * near * Complex64::from_polar(1.0, 2.0 * PI * r * k))
}

/// Diffraction matrix from plane `from` to the adjacent plane `to` of a
/// stack; rows index `to`, columns index `from`.
pub fn diffraction_matrix(layout: &PanelLayout, from: usize, to: usize, freq: f64) -> Result<CMat> {
    if from.abs_diff(to) != 1 || from.max(to) > layout.layer_count {
        return Err(Error::config(format!(
            "no layer gap {from}->{to} in a {}-layer stack",
            layout.layer_count
        )));
    }
    // Only the relative offset matters, so the source plane sits at z = 0.
    let dz = (to as f64 - from as f64) * layout.layer_spacing;
    let src: Vec<[f64; 3]> = layout.positions(from).into_iter().map(|[x, y, _]| [x, y, 0.0]).collect();
    let dst: Vec<[f64; 3]> = layout.positions(to).into_iter().map(|[x, y, _]| [x, y, dz]).collect();
    let area = layout.unit_spacing * layout.unit_spacing;
    let mut m = CMat::zeros(dst.len(), src.len());
    for (r, q) in dst.iter().enumerate() {
        for (c, p) in src.iter().enumerate() {
            m[(r, c)] = rs_coefficient(*p, *q, area, freq)?;
        }
    }
    Ok(m)
}

/// Fixed diffraction matrices of a TX and an RX stack for every subcarrier.
///
/// `tx[i][l-1]` is `V_i^l` (layer `l-1` → `l`, `V_i^1` is `M × A^t`);
/// `rx[i][k-1]` is `U_i^k` (layer `k` → `k-1`, `U_i^1` is `A^r × N`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSet {
    pub frequencies: Vec<f64>,
    pub tx: Vec<Vec<CMat>>,
    pub rx: Vec<Vec<CMat>>,
}

impl PropagationSet {
    pub fn build(tx: &PanelLayout, rx: &PanelLayout, frequencies: &[f64]) -> Result<Self> {
        tx.validate()?;
        rx.validate()?;
        let mut tx_mats = Vec::with_capacity(frequencies.len());
        let mut rx_mats = Vec::with_capacity(frequencies.len());
        for &f in frequencies {
            tx_mats.push(stack_gaps(tx, f, |l| (l - 1, l))?);
            rx_mats.push(stack_gaps(rx, f, |k| (k, k - 1))?);
        }
        Ok(PropagationSet {
            frequencies: frequencies.to_vec(),
            tx: tx_mats,
            rx: rx_mats,
        })
    }

    pub fn subcarriers(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_finite(&self) -> bool {
        self.tx.iter().chain(&self.rx).flatten().all(CMat::is_finite)
    }
}

fn stack_gaps(
    layout: &PanelLayout,
    f: f64,
    gap: impl Fn(usize) -> (usize, usize),
) -> Result<Vec<CMat>> {
    let mut out: Vec<CMat> = Vec::with_capacity(layout.layer_count);
    for l in 1..=layout.layer_count {
        if l >= 3 {
            // Identical layers: every inner gap has the same geometry.
            let inner = out[1].clone();
            out.push(inner);
        } else {
            let (a, b) = gap(l);
            out.push(diffraction_matrix(layout, a, b, f)?);
        }
    }
    Ok(out)
}

/// Geometry plus phase configuration of one device.
///
/// `phases[layer][pol]` holds the per-unit phases of metasurface layer
/// `layer + 1` for polarisation `pol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetasurfaceStack {
    pub layout: PanelLayout,
    pub polarization: Polarization,
    pub phases: Vec<Vec<Vec<f64>>>,
}

impl MetasurfaceStack {
    pub fn zeros(layout: PanelLayout, polarization: Polarization) -> Self {
        let phases = vec![vec![vec![0.0; layout.units()]; polarization.count()]; layout.layer_count];
        MetasurfaceStack {
            layout,
            polarization,
            phases,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.phases.len() != self.layout.layer_count {
            return Err(Error::config(format!(
                "stack has {} phase layers for {} metasurface layers",
                self.phases.len(),
                self.layout.layer_count
            )));
        }
        for layer in &self.phases {
            if layer.len() != self.polarization.count()
                || layer.iter().any(|p| p.len() != self.layout.units())
            {
                return Err(Error::config("phase vector shape does not match layout"));
            }
        }
        Ok(())
    }

    /// Transmission coefficients `e^{jθ}` of one layer and polarisation.
    pub fn coefficients(&self, layer: usize, pol: usize) -> Vec<Complex64> {
        self.phases[layer][pol]
            .iter()
            .map(|t| Complex64::from_polar(1.0, *t))
            .collect()
    }

    /// Stack with only polarisation `pol`, as a single-polarisation device.
    pub fn polarization_slice(&self, pol: usize) -> MetasurfaceStack {
        MetasurfaceStack {
            layout: self.layout,
            polarization: Polarization::Single,
            phases: self.phases.iter().map(|l| vec![l[pol].clone()]).collect(),
        }
    }
}

fn check_prop(stack: &MetasurfaceStack, mats: &[CMat], first_shape: (usize, usize)) -> Result<()> {
    stack.validate()?;
    if mats.len() != stack.layout.layer_count {
        return Err(Error::config(format!(
            "{} propagation matrices for a {}-layer stack",
            mats.len(),
            stack.layout.layer_count
        )));
    }
    if mats[0].shape() != first_shape {
        return Err(Error::config(format!(
            "first-gap matrix is {:?}, stack expects {:?}",
            mats[0].shape(),
            first_shape
        )));
    }
    let m = stack.layout.units();
    if mats[1..].iter().any(|v| v.shape() != (m, m)) {
        return Err(Error::config("inner propagation matrices must be square over the units"));
    }
    Ok(())
}

fn tx_chain_pol(stack: &MetasurfaceStack, prop: &PropagationSet, i: usize, pol: usize) -> Result<CMat> {
    let mats = prop
        .tx
        .get(i)
        .ok_or_else(|| Error::config(format!("no subcarrier {i}")))?;
    check_prop(stack, mats, (stack.layout.units(), stack.layout.antennas()))?;
    let mut t = mats[0].phase_rows(&stack.phases[0][pol]);
    for l in 1..stack.layout.layer_count {
        t = cmatmul(&mats[l], &t)?.phase_rows(&stack.phases[l][pol]);
    }
    Ok(t)
}

fn rx_chain_pol(stack: &MetasurfaceStack, prop: &PropagationSet, i: usize, pol: usize) -> Result<CMat> {
    let mats = prop
        .rx
        .get(i)
        .ok_or_else(|| Error::config(format!("no subcarrier {i}")))?;
    check_prop(stack, mats, (stack.layout.antennas(), stack.layout.units()))?;
    let k = stack.layout.layer_count;
    let mut r = mats[k - 1].phase_cols(&stack.phases[k - 1][pol]);
    for layer in (0..k - 1).rev() {
        r = cmatmul(&mats[layer].phase_cols(&stack.phases[layer][pol]), &r)?;
    }
    Ok(r)
}

fn require_side(stack: &MetasurfaceStack, side: Side) -> Result<()> {
    if stack.layout.side != side {
        return Err(Error::config(format!(
            "{:?} chain requested for a {:?} stack",
            side, stack.layout.side
        )));
    }
    Ok(())
}

/// `T_i = Φ^L V_i^L ⋯ Φ^1 V_i^1`, `M × A^t`.
pub fn tx_chain(stack: &MetasurfaceStack, prop: &PropagationSet, i: usize) -> Result<CMat> {
    require_side(stack, Side::Tx)?;
    if stack.polarization != Polarization::Single {
        return Err(Error::config("tx_chain needs a single-polarisation stack; use dp_chain"));
    }
    tx_chain_pol(stack, prop, i, 0)
}

/// `R_i = U_i^1 Ψ^1 ⋯ U_i^K Ψ^K`, `A^r × N`.
pub fn rx_chain(stack: &MetasurfaceStack, prop: &PropagationSet, i: usize) -> Result<CMat> {
    require_side(stack, Side::Rx)?;
    if stack.polarization != Polarization::Single {
        return Err(Error::config("rx_chain needs a single-polarisation stack; use dp_chain"));
    }
    rx_chain_pol(stack, prop, i, 0)
}

/// Block-diagonal dual-polarisation chain; block `p` is the single-polarisation
/// chain built from the phases of polarisation `p`.
pub fn dp_chain(stack: &MetasurfaceStack, prop: &PropagationSet, i: usize, side: Side) -> Result<CMat> {
    require_side(stack, side)?;
    if stack.polarization != Polarization::Dual {
        return Err(Error::config("dp_chain needs a dual-polarisation stack"));
    }
    let blocks = [0, 1]
        .iter()
        .map(|&p| match side {
            Side::Tx => tx_chain_pol(stack, prop, i, p),
            Side::Rx => rx_chain_pol(stack, prop, i, p),
        })
        .collect::<Result<Vec<_>>>()?;
    let (r, c) = blocks[0].shape();
    let mut out = CMat::zeros(2 * r, 2 * c);
    for (p, b) in blocks.iter().enumerate() {
        for rr in 0..r {
            for cc in 0..c {
                out[(p * r + rr, p * c + cc)] = b[(rr, cc)];
            }
        }
    }
    Ok(out)
}
