//! Equivalent-circuit ground truth for the two-layer unit cell.
//!
//! The cell is modeled as a top shunt branch (PIN diode: series R_v, L_v and
//! an effective capacitance) and a bottom shunt branch (varactor in series
//! with a fixed package inductance and loss), separated by a lossy dielectric
//! slab. The three two-ports are cascaded as ABCD matrices and converted to
//! S-parameters against the oblique-incidence wave impedance of free space.

use std::f64::consts::PI;
use std::ops::Mul;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const C0: f64 = 299_792_458.0;
/// Impedance of free space, ohms.
pub const ETA0: f64 = 376.730_313_668;

/// Frequency bands covered by the dataset, GHz.
pub const FREQ_BANDS_GHZ: [(f64, f64); 2] = [(5.0, 11.0), (15.0, 25.0)];
pub const THETA_RANGE_DEG: (f64, f64) = (0.0, 89.0);
pub const SPACING_RANGE: (f64, f64) = (0.25, 0.5);
pub const CVT_RANGE_FF: (f64, f64) = (50.0, 353.0);
pub const CVB_RANGE_PF: (f64, f64) = (0.64, 8.86);
pub const RV_RANGE_OHM: (f64, f64) = (0.8, 50.0);
pub const LV_RANGE_PH: (f64, f64) = (750.0, 850.0);
pub const ARRAY_SIZES: [u32; 5] = [2, 3, 4, 5, 6];

pub const N_FEATURES: usize = 8;

/// Column names in feature order; frequency is always feature 0.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "freq_ghz",
    "theta_deg",
    "spacing_lambda",
    "cvt_ff",
    "cvb_pf",
    "rv_ohm",
    "lv_ph",
    "array_n",
];

/// The eight physical design features of one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignVector {
    pub freq_ghz: f64,
    pub theta_deg: f64,
    pub spacing_lambda: f64,
    pub cvt_ff: f64,
    pub cvb_pf: f64,
    pub rv_ohm: f64,
    pub lv_ph: f64,
    pub array_n: u32,
}

fn check_range(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::domain(format!("{name} is not finite")));
    }
    if v < lo || v > hi {
        return Err(Error::domain(format!("{name} = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

pub fn in_freq_domain(freq_ghz: f64) -> bool {
    FREQ_BANDS_GHZ
        .iter()
        .any(|&(lo, hi)| freq_ghz >= lo && freq_ghz <= hi)
}

impl DesignVector {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        freq_ghz: f64,
        theta_deg: f64,
        spacing_lambda: f64,
        cvt_ff: f64,
        cvb_pf: f64,
        rv_ohm: f64,
        lv_ph: f64,
        array_n: u32,
    ) -> Result<Self> {
        let d = DesignVector {
            freq_ghz,
            theta_deg,
            spacing_lambda,
            cvt_ff,
            cvb_pf,
            rv_ohm,
            lv_ph,
            array_n,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.freq_ghz.is_finite() || !in_freq_domain(self.freq_ghz) {
            return Err(Error::domain(format!(
                "freq_ghz = {} outside [5, 11] ∪ [15, 25]",
                self.freq_ghz
            )));
        }
        check_range("theta_deg", self.theta_deg, THETA_RANGE_DEG)?;
        check_range("spacing_lambda", self.spacing_lambda, SPACING_RANGE)?;
        check_range("cvt_ff", self.cvt_ff, CVT_RANGE_FF)?;
        check_range("cvb_pf", self.cvb_pf, CVB_RANGE_PF)?;
        check_range("rv_ohm", self.rv_ohm, RV_RANGE_OHM)?;
        check_range("lv_ph", self.lv_ph, LV_RANGE_PH)?;
        if !ARRAY_SIZES.contains(&self.array_n) {
            return Err(Error::domain(format!(
                "array_n = {} not in {{2, 3, 4, 5, 6}}",
                self.array_n
            )));
        }
        Ok(())
    }

    /// Raw feature vector in column order.
    pub fn to_features(&self) -> [f64; N_FEATURES] {
        [
            self.freq_ghz,
            self.theta_deg,
            self.spacing_lambda,
            self.cvt_ff,
            self.cvb_pf,
            self.rv_ohm,
            self.lv_ph,
            self.array_n as f64,
        ]
    }
}

/// Transmittance, reflectance and absorbance of one design point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseTriple {
    pub transmittance: f64,
    pub reflectance: f64,
    pub absorbance: f64,
}

impl ResponseTriple {
    pub fn new(transmittance: f64, reflectance: f64, absorbance: f64) -> Self {
        ResponseTriple {
            transmittance,
            reflectance,
            absorbance,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.transmittance, self.reflectance, self.absorbance]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        ResponseTriple::new(a[0], a[1], a[2])
    }

    pub fn sum(&self) -> f64 {
        self.transmittance + self.reflectance + self.absorbance
    }

    /// Checks bounds and closure within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (name, v) in [
            ("transmittance", self.transmittance),
            ("reflectance", self.reflectance),
            ("absorbance", self.absorbance),
        ] {
            if !v.is_finite() || !(-tol..=1.0 + tol).contains(&v) {
                return Err(Error::domain(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if (self.sum() - 1.0).abs() > tol {
            return Err(Error::domain(format!(
                "T + R + A = {} differs from 1",
                self.sum()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Polarization {
    #[default]
    Te,
    Tm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub wavelength_mm: f64,
    pub substrate_er: f64,
    pub substrate_tand: f64,
    pub substrate_thickness_mm: f64,
    pub bottom_l_ph: f64,
    pub bottom_r_ohm: f64,
    pub coupling_kappa_spacing: f64,
    pub coupling_kappa_array: f64,
    pub polarization: Polarization,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            wavelength_mm: 45.0,
            substrate_er: 4.3,
            substrate_tand: 0.025,
            substrate_thickness_mm: 2.0,
            bottom_l_ph: 800.0,
            bottom_r_ohm: 0.5,
            coupling_kappa_spacing: 0.08,
            coupling_kappa_array: 0.05,
            polarization: Polarization::Te,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.wavelength_mm,
            self.substrate_er,
            self.substrate_tand,
            self.substrate_thickness_mm,
            self.bottom_l_ph,
            self.bottom_r_ohm,
            self.coupling_kappa_spacing,
            self.coupling_kappa_array,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("oracle parameters must be finite"));
        }
        if self.substrate_er < 1.0 {
            return Err(Error::config("substrate_er must be >= 1"));
        }
        if self.substrate_tand < 0.0 {
            return Err(Error::config("substrate_tand must be >= 0"));
        }
        if self.substrate_thickness_mm <= 0.0 {
            return Err(Error::config("substrate_thickness_mm must be > 0"));
        }
        if self.bottom_r_ohm < 0.0 || self.bottom_l_ph < 0.0 {
            return Err(Error::config("bottom branch R and L must be >= 0"));
        }
        if self.wavelength_mm <= 0.0 {
            return Err(Error::config("wavelength_mm must be > 0"));
        }
        Ok(())
    }
}

/// Series R-L-C impedance `R + j(ωL − 1/(ωC))`.
pub fn series_rlc_impedance(r: f64, l: f64, c: f64, f: f64) -> Result<Complex64> {
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::domain(format!("frequency must be positive, got {f}")));
    }
    if !(c > 0.0) {
        return Err(Error::domain(format!("capacitance must be positive, got {c}")));
    }
    if l < 0.0 || r < 0.0 {
        return Err(Error::domain("resistance and inductance must be >= 0"));
    }
    let w = 2.0 * PI * f;
    Ok(Complex64::new(r, w * l - 1.0 / (w * c)))
}

/// Port impedance seen by an obliquely incident plane wave.
pub fn wave_impedance(theta_deg: f64, pol: Polarization) -> Result<f64> {
    check_range("theta_deg", theta_deg, THETA_RANGE_DEG)?;
    let cos = theta_deg.to_radians().cos();
    Ok(match pol {
        Polarization::Te => ETA0 / cos,
        Polarization::Tm => ETA0 * cos,
    })
}

/// 2x2 transfer (ABCD) matrix of a two-port.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Abcd {
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

impl Abcd {
    pub fn identity() -> Self {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        Abcd {
            a: one,
            b: zero,
            c: zero,
            d: one,
        }
    }

    pub fn det(&self) -> Complex64 {
        self.a * self.d - self.b * self.c
    }
}

impl Mul for Abcd {
    type Output = Abcd;

    fn mul(self, o: Abcd) -> Abcd {
        Abcd {
            a: self.a * o.a + self.b * o.c,
            b: self.a * o.b + self.b * o.d,
            c: self.c * o.a + self.d * o.c,
            d: self.c * o.b + self.d * o.d,
        }
    }
}

pub fn abcd_shunt(y: Complex64) -> Result<Abcd> {
    if !y.re.is_finite() || !y.im.is_finite() {
        return Err(Error::domain("shunt admittance must be finite"));
    }
    Ok(Abcd {
        c: y,
        ..Abcd::identity()
    })
}

/// Lossy dielectric slab of thickness `thickness_mm` crossed at incidence `theta_deg`.
///
/// The refraction angle comes from Snell's law on the real permittivity; the
/// slab's characteristic impedance follows the same polarization convention as
/// [`wave_impedance`].
pub fn abcd_line(
    thickness_mm: f64,
    er: f64,
    tand: f64,
    f: f64,
    theta_deg: f64,
    pol: Polarization,
) -> Result<Abcd> {
    if !(thickness_mm >= 0.0) || !(er >= 1.0) || !(tand >= 0.0) {
        return Err(Error::domain(
            "line requires thickness >= 0, er >= 1 and tand >= 0",
        ));
    }
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::domain(format!("frequency must be positive, got {f}")));
    }
    check_range("theta_deg", theta_deg, THETA_RANGE_DEG)?;
    if thickness_mm == 0.0 {
        return Ok(Abcd::identity());
    }

    let sin_t = theta_deg.to_radians().sin() / er.sqrt();
    let cos_t = (1.0 - sin_t * sin_t).sqrt();
    let eps = Complex64::new(er, -er * tand);
    let n = eps.sqrt();
    let k0 = 2.0 * PI * f / C0;
    let gamma = Complex64::i() * k0 * n * cos_t;
    let gl = gamma * (thickness_mm * 1e-3);

    let eta = ETA0 / n;
    let zc = match pol {
        Polarization::Te => eta / cos_t,
        Polarization::Tm => eta * cos_t,
    };
    let (ch, sh) = (gl.cosh(), gl.sinh());
    Ok(Abcd {
        a: ch,
        b: zc * sh,
        c: sh / zc,
        d: ch,
    })
}

/// Converts an ABCD matrix to `(S11, S21)` with reference impedance `z0` on both ports.
pub fn abcd_to_sparams(m: &Abcd, z0: f64) -> Result<(Complex64, Complex64)> {
    if !(z0 > 0.0) || !z0.is_finite() {
        return Err(Error::domain(format!("z0 must be positive, got {z0}")));
    }
    let b = m.b / z0;
    let c = m.c * z0;
    let delta = m.a + b + c + m.d;
    if delta.norm() == 0.0 {
        return Err(Error::SingularNetwork);
    }
    let s11 = (m.a + b - c - m.d) / delta;
    let s21 = Complex64::new(2.0, 0.0) / delta;
    Ok((s11, s21))
}

/// Intermediate quantities of one cascade evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CircuitSolution {
    pub c_eff: f64,
    pub matrix: Abcd,
    pub z0: f64,
    pub s11: Complex64,
    pub s21: Complex64,
    /// `1 − |S11|² − |S21|²` before clamping.
    pub raw_absorbance: f64,
}

/// Effective top capacitance in farads after the coupling perturbation.
pub fn effective_top_capacitance(d: &DesignVector, cfg: &OracleConfig) -> f64 {
    d.cvt_ff
        * 1e-15
        * (1.0 + cfg.coupling_kappa_spacing * (0.5 - d.spacing_lambda))
        * (1.0 + cfg.coupling_kappa_array / d.array_n as f64)
}

/// Evaluates the cascade without checking the design-feature domain.
///
/// Physical preconditions of the sub-operations still apply. Used directly for
/// lossless overrides (e.g. `rv_ohm = 0`) that lie outside the dataset domain.
pub fn evaluate_circuit(d: &DesignVector, cfg: &OracleConfig) -> Result<CircuitSolution> {
    let f = d.freq_ghz * 1e9;
    let c_eff = effective_top_capacitance(d, cfg);
    let z_top = series_rlc_impedance(d.rv_ohm, d.lv_ph * 1e-12, c_eff, f)?;
    let z_bot = series_rlc_impedance(cfg.bottom_r_ohm, cfg.bottom_l_ph * 1e-12, d.cvb_pf * 1e-12, f)?;
    let m = abcd_shunt(z_top.inv())?
        * abcd_line(
            cfg.substrate_thickness_mm,
            cfg.substrate_er,
            cfg.substrate_tand,
            f,
            d.theta_deg,
            cfg.polarization,
        )?
        * abcd_shunt(z_bot.inv())?;
    let z0 = wave_impedance(d.theta_deg, cfg.polarization)?;
    let (s11, s21) = abcd_to_sparams(&m, z0)?;
    let raw_absorbance = 1.0 - (s11.norm_sqr() + s21.norm_sqr());
    Ok(CircuitSolution {
        c_eff,
        matrix: m,
        z0,
        s11,
        s21,
        raw_absorbance,
    })
}

/// Closes `(T, R)` into a triple whose left-to-right sum is exactly 1.
fn close_energy(t: f64, r: f64) -> ResponseTriple {
    let (t, r) = if t + r > 1.0 { (t, 1.0 - t) } else { (t, r) };
    let mut a = 1.0 - (t + r);
    if a < 0.0 {
        a = 0.0;
    }
    // one ulp nudge if rounding left the sum off by one
    let mut out = ResponseTriple::new(t, r, a);
    for _ in 0..4 {
        let s = out.sum();
        if s == 1.0 {
            break;
        }
        out.absorbance = (out.absorbance + (1.0 - s)).max(0.0);
    }
    out
}

/// Ground-truth response for a validated design point.
pub fn unit_cell_response(d: &DesignVector, cfg: &OracleConfig) -> Result<ResponseTriple> {
    d.validate()?;
    response_unchecked(d, cfg)
}

/// [`unit_cell_response`] without the feature-domain check.
pub fn response_unchecked(d: &DesignVector, cfg: &OracleConfig) -> Result<ResponseTriple> {
    let sol = evaluate_circuit(d, cfg)?;
    Ok(close_energy(sol.s21.norm_sqr(), sol.s11.norm_sqr()))
}
