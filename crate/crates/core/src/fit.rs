//! Calibration fitting: solves for per-component durations so that the
//! simulated end-to-end verification totals reproduce a set of measured
//! reference totals.
//!
//! The model is linear in the unknown components, so fitting is a bounded
//! least-squares problem: non-negative (lower-bounded) Lawson-Hanson NNLS
//! with a small ridge pulling unidentifiable directions toward the supplied
//! priors. The solver fails loudly when any target cannot be met within 5%,
//! e.g. when a target undercuts the hard DTMF signal-time floor.

use crate::calibration::{
    DtmfPerDigit, JitterConfig, LatencyCalibration, MiscDurations, NoiseCalibration,
    RecognitionDelays, CALIBRATION_SCHEMA,
};
use crate::civ::{PlatformProfile, ProfileKind, Variant};
use crate::signaling::NetworkKind;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const TARGETS_SCHEMA: &str = "civ-fit-targets/1";
pub const BOUNDS_SCHEMA: &str = "civ-fit-bounds/1";

/// Relative residual above which the fit is rejected.
pub const MAX_RELATIVE_RESIDUAL: f64 = 0.05;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fit input parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("io error reading fit input: {0}")]
    Io(#[from] std::io::Error),
    #[error("fit field {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("infeasible: target {label:?} missed by {residual_pct:.1}% (> {max_pct:.0}%)")]
    Infeasible {
        label: String,
        residual_pct: f64,
        max_pct: f64,
    },
}

fn invalid(field: &str, message: impl Into<String>) -> FitError {
    FitError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// One measured end-to-end total to reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTarget {
    pub label: String,
    pub caller: ProfileKind,
    pub callee: ProfileKind,
    pub variant: Variant,
    #[serde(default = "default_n")]
    pub n: usize,
    pub total_ms: f64,
}

fn default_n() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTargets {
    pub schema: String,
    pub targets: Vec<FitTarget>,
}

impl FitTargets {
    pub fn from_toml_str(text: &str) -> Result<Self, FitError> {
        let t: FitTargets = toml::from_str(text)?;
        if !t.schema.starts_with("civ-fit-targets/") {
            return Err(invalid("schema", format!("unknown schema {:?}", t.schema)));
        }
        if t.targets.is_empty() {
            return Err(invalid("targets", "at least one target required"));
        }
        for (i, target) in t.targets.iter().enumerate() {
            if target.total_ms <= 0.0 || !target.total_ms.is_finite() {
                return Err(invalid(&format!("targets[{i}].total_ms"), "must be > 0"));
            }
        }
        Ok(t)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FitError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Values the fit does not touch, plus per-parameter lower bounds and
/// priors. Parameters absent from `lower` default to 0; absent from
/// `prior` default to their lower bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub schema: String,
    #[serde(default)]
    pub lower: BTreeMap<String, f64>,
    #[serde(default)]
    pub prior: BTreeMap<String, f64>,
    pub fixed: FixedValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedValues {
    pub analogue_snr_db: f64,
    #[serde(default)]
    pub cnam_lookup_ms: f64,
    #[serde(default)]
    pub day_night_pct: f64,
}

impl FitBounds {
    pub fn from_toml_str(text: &str) -> Result<Self, FitError> {
        let b: FitBounds = toml::from_str(text)?;
        if !b.schema.starts_with("civ-fit-bounds/") {
            return Err(invalid("schema", format!("unknown schema {:?}", b.schema)));
        }
        for (k, v) in b.lower.iter().chain(b.prior.iter()) {
            if !v.is_finite() || *v < 0.0 {
                return Err(invalid(k, "bounds and priors must be finite and >= 0"));
            }
        }
        Ok(b)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FitError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Parameter space
// ---------------------------------------------------------------------------

const SETUP_PAIRS: [(NetworkKind, NetworkKind); 9] = {
    use NetworkKind::*;
    [
        (VoipSip, VoipSip),
        (PstnAnalogue, PstnAnalogue),
        (CellularCs, CellularCs),
        (PstnAnalogue, CellularCs),
        (CellularCs, PstnAnalogue),
        (VoipSip, PstnAnalogue),
        (PstnAnalogue, VoipSip),
        (VoipSip, CellularCs),
        (CellularCs, VoipSip),
    ]
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Param {
    Setup(usize), // index into SETUP_PAIRS
    MissedCallExtra,
    DigitalPerDigit,
    OobPerDigit,
    AnalogueExtraPerDigit,
    Recognition(ProfileKind),
    GatewayConversion,
}

fn param_list() -> Vec<Param> {
    let mut params: Vec<Param> = (0..SETUP_PAIRS.len()).map(Param::Setup).collect();
    params.push(Param::MissedCallExtra);
    params.push(Param::DigitalPerDigit);
    params.push(Param::OobPerDigit);
    params.push(Param::AnalogueExtraPerDigit);
    for kind in ProfileKind::ALL {
        params.push(Param::Recognition(kind));
    }
    params.push(Param::GatewayConversion);
    params
}

pub fn param_name(index: usize) -> String {
    match param_list()[index] {
        Param::Setup(i) => {
            let (a, b) = SETUP_PAIRS[i];
            format!("setup:{}:{}", a.as_str(), b.as_str())
        }
        Param::MissedCallExtra => "missed-call-extra".to_string(),
        Param::DigitalPerDigit => "dtmf:digital-event".to_string(),
        Param::OobPerDigit => "dtmf:out-of-band".to_string(),
        Param::AnalogueExtraPerDigit => "dtmf:analogue-extra".to_string(),
        Param::Recognition(kind) => format!("recognition:{}", kind.as_str()),
        Param::GatewayConversion => "gateway-conversion".to_string(),
    }
}

pub fn param_count() -> usize {
    param_list().len()
}

fn network_of(profile: ProfileKind) -> NetworkKind {
    match profile {
        ProfileKind::Sip => NetworkKind::VoipSip,
        ProfileKind::Cellular => NetworkKind::CellularCs,
        ProfileKind::LandlineTruecall => NetworkKind::PstnAnalogue,
    }
}

fn setup_index(origin: NetworkKind, dest: NetworkKind) -> usize {
    SETUP_PAIRS
        .iter()
        .position(|&(a, b)| a == origin && b == dest)
        .expect("all pairs listed")
}

/// Linear expression over the parameter vector: coefficients plus a constant
/// (milliseconds) for the fixed signal-time and pause terms.
#[derive(Debug, Clone)]
struct LinExpr {
    coeffs: Vec<f64>,
    constant: f64,
}

impl LinExpr {
    fn zero() -> Self {
        Self {
            coeffs: vec![0.0; param_count()],
            constant: 0.0,
        }
    }

    fn add(&mut self, p: Param, c: f64) {
        let idx = param_list().iter().position(|&q| q == p).expect("known param");
        self.coeffs[idx] += c;
    }
}

fn profile_timing_total_ms(kind: ProfileKind) -> f64 {
    // Mirrors PlatformProfile::builtin's DTMF timing.
    let cfg = match kind {
        ProfileKind::Sip => crate::dtmf::TimingConfig::sip_incall(),
        _ => crate::dtmf::TimingConfig::analogue_landline(),
    };
    (cfg.mark_ms + cfg.space_ms) as f64
}

fn dial_string_pause_ms(kind: ProfileKind) -> f64 {
    match kind {
        ProfileKind::Cellular => 2_000.0,
        _ => 0.0,
    }
}

/// One DTMF transmission of `n` digits from `sender` to `receiver` over the
/// direct link between their home networks.
fn dtmf_leg(expr: &mut LinExpr, sender: ProfileKind, receiver: ProfileKind, n: usize) {
    let sn = network_of(sender);
    let rn = network_of(receiver);
    let nf = n as f64;
    let analogue = sn == NetworkKind::PstnAnalogue || rn == NetworkKind::PstnAnalogue;
    let cellular = sn == NetworkKind::CellularCs || rn == NetworkKind::CellularCs;
    if analogue {
        expr.constant += nf * profile_timing_total_ms(sender);
        expr.add(Param::AnalogueExtraPerDigit, nf);
    } else if cellular {
        expr.add(Param::OobPerDigit, nf);
    } else {
        expr.add(Param::DigitalPerDigit, nf);
    }
    expr.add(Param::Recognition(receiver), nf);
    if sn != rn {
        expr.add(Param::GatewayConversion, 1.0);
    }
}

/// The added verification latency of one (caller, callee, variant) flow as a
/// linear expression over the calibration parameters. This mirrors the
/// engine's milestone accounting exactly.
fn total_expression(caller: ProfileKind, callee: ProfileKind, variant: Variant, n: usize) -> LinExpr {
    let a_net = network_of(caller); // caller under verification
    let b_net = network_of(callee); // verifier
    let mut expr = LinExpr::zero();
    match variant {
        Variant::CliDtmf => {
            // Challenge: abandoned call whose CLI arrives with the missed
            // call record; response: DTMF on the held initial call.
            expr.add(Param::Setup(setup_index(b_net, a_net)), 1.0);
            expr.add(Param::MissedCallExtra, 1.0);
            dtmf_leg(&mut expr, caller, callee, n);
        }
        Variant::CliCli => {
            expr.add(Param::Setup(setup_index(b_net, a_net)), 1.0);
            expr.add(Param::MissedCallExtra, 1.0);
            expr.add(Param::Setup(setup_index(a_net, b_net)), 1.0);
            expr.add(Param::MissedCallExtra, 1.0);
        }
        Variant::DtmfDtmf2Setup => {
            expr.add(Param::Setup(setup_index(b_net, a_net)), 1.0);
            expr.constant += dial_string_pause_ms(callee);
            dtmf_leg(&mut expr, callee, caller, n);
            dtmf_leg(&mut expr, caller, callee, n);
        }
        Variant::DtmfDtmf3Setup => {
            expr.add(Param::Setup(setup_index(b_net, a_net)), 1.0);
            expr.constant += dial_string_pause_ms(callee);
            dtmf_leg(&mut expr, callee, caller, n);
            expr.add(Param::Setup(setup_index(a_net, b_net)), 1.0);
            expr.constant += dial_string_pause_ms(caller);
            dtmf_leg(&mut expr, caller, callee, n);
        }
    }
    expr
}

/// Predicted total for a parameter vector, milliseconds.
fn predict(expr: &LinExpr, x: &DVector<f64>) -> f64 {
    expr.constant + expr.coeffs.iter().zip(x.iter()).map(|(c, v)| c * v).sum::<f64>()
}

// ---------------------------------------------------------------------------
// NNLS
// ---------------------------------------------------------------------------

/// Lawson-Hanson non-negative least squares: min ||a x - b|| s.t. x >= 0.
/// `a` must have full column rank on every passive subset, which the ridge
/// stacking below guarantees.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-10 * a.amax().max(1.0);

    for _ in 0..(10 * n.max(4)) {
        let w = a.transpose() * (b - a * &x);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol {
                if best.map(|(_, v)| w[j] > v).unwrap_or(true) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;

        loop {
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let ap = a.select_columns(cols.iter());
            let ata = ap.transpose() * &ap;
            let atb = ap.transpose() * b;
            let z_p = ata
                .cholesky()
                .map(|ch| ch.solve(&atb))
                .unwrap_or_else(|| ap.svd(true, true).solve(b, 1e-12).expect("solvable"));
            if z_p.iter().all(|&v| v > tol) {
                x.fill(0.0);
                for (k, &j) in cols.iter().enumerate() {
                    x[j] = z_p[k];
                }
                break;
            }
            // Step back to the feasible boundary and drop the blocking column.
            let mut alpha = f64::INFINITY;
            for (k, &j) in cols.iter().enumerate() {
                if z_p[k] <= tol {
                    let denom = x[j] - z_p[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &j) in cols.iter().enumerate() {
                x[j] += alpha * (z_p[k] - x[j]);
                if x[j] <= tol {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    x
}

/// Small pull toward the priors; dominated by any actual measurement but
/// enough to pin directions the targets leave free.
const RIDGE: f64 = 1e-3;

/// Per-target relative residual of a fitted calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub labels: Vec<String>,
    pub predicted_ms: Vec<f64>,
    pub target_ms: Vec<f64>,
    pub relative_residual: Vec<f64>,
}

/// Solves for a calibration reproducing the targets. Deterministic: the same
/// inputs produce the identical file.
pub fn fit_calibration(
    targets: &FitTargets,
    bounds: &FitBounds,
) -> Result<(LatencyCalibration, FitReport), FitError> {
    let params = param_list();
    let np = params.len();
    let nt = targets.targets.len();

    let lower = DVector::from_iterator(
        np,
        (0..np).map(|i| bounds.lower.get(&param_name(i)).copied().unwrap_or(0.0)),
    );
    let prior = DVector::from_iterator(
        np,
        (0..np).map(|i| {
            bounds
                .prior
                .get(&param_name(i))
                .copied()
                .unwrap_or(lower[i])
                .max(lower[i])
        }),
    );

    let exprs: Vec<LinExpr> = targets
        .targets
        .iter()
        .map(|t| total_expression(t.caller, t.callee, t.variant, t.n))
        .collect();

    // Stack the measurement rows with the ridge rows; substitute
    // y = x - lower so plain NNLS enforces the lower bounds.
    let mut a = DMatrix::zeros(nt + np, np);
    let mut b = DVector::zeros(nt + np);
    for (r, (t, e)) in targets.targets.iter().zip(&exprs).enumerate() {
        let mut rhs = t.total_ms - e.constant;
        for (c, coef) in e.coeffs.iter().enumerate() {
            a[(r, c)] = *coef;
            rhs -= coef * lower[c];
        }
        b[r] = rhs;
    }
    for c in 0..np {
        a[(nt + c, c)] = RIDGE;
        b[nt + c] = RIDGE * (prior[c] - lower[c]);
    }

    let y = nnls(&a, &b);
    let x = y + lower;

    let mut report = FitReport {
        labels: Vec::new(),
        predicted_ms: Vec::new(),
        target_ms: Vec::new(),
        relative_residual: Vec::new(),
    };
    for (t, e) in targets.targets.iter().zip(&exprs) {
        let predicted = predict(e, &x);
        let residual = (predicted - t.total_ms).abs() / t.total_ms;
        report.labels.push(t.label.clone());
        report.predicted_ms.push(predicted);
        report.target_ms.push(t.total_ms);
        report.relative_residual.push(residual);
    }
    if let Some(worst) = report
        .relative_residual
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite residuals"))
    {
        if *worst.1 > MAX_RELATIVE_RESIDUAL {
            return Err(FitError::Infeasible {
                label: report.labels[worst.0].clone(),
                residual_pct: worst.1 * 100.0,
                max_pct: MAX_RELATIVE_RESIDUAL * 100.0,
            });
        }
    }

    let value = |p: Param| -> f64 {
        let idx = params.iter().position(|&q| q == p).expect("known");
        // Round to whole microseconds so files and engine agree exactly.
        (x[idx] * 1000.0).round() / 1000.0
    };
    let mut call_setup_ms: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (i, (origin, dest)) in SETUP_PAIRS.iter().enumerate() {
        call_setup_ms
            .entry(origin.as_str().to_string())
            .or_default()
            .insert(dest.as_str().to_string(), value(Param::Setup(i)));
    }
    let cal = LatencyCalibration {
        schema: CALIBRATION_SCHEMA.to_string(),
        call_setup_ms,
        dtmf_per_digit_ms: DtmfPerDigit {
            digital_event: value(Param::DigitalPerDigit),
            out_of_band: value(Param::OobPerDigit),
            analogue_extra: value(Param::AnalogueExtraPerDigit),
        },
        recognition_ms: RecognitionDelays {
            sip: value(Param::Recognition(ProfileKind::Sip)),
            cellular: value(Param::Recognition(ProfileKind::Cellular)),
            landline_truecall: value(Param::Recognition(ProfileKind::LandlineTruecall)),
        },
        misc_ms: MiscDurations {
            missed_call_delivery_extra: value(Param::MissedCallExtra),
            gateway_conversion: value(Param::GatewayConversion),
            cnam_lookup: bounds.fixed.cnam_lookup_ms,
        },
        noise: NoiseCalibration {
            analogue_snr_db: bounds.fixed.analogue_snr_db,
        },
        jitter: JitterConfig {
            day_night_pct: bounds.fixed.day_night_pct,
        },
    };
    cal.validate()
        .map_err(|e| invalid("output", e.to_string()))?;
    Ok((cal, report))
}

/// Model-predicted total for a profile pair and variant under an existing
/// calibration; used to cross-check the fitter's linear model against the
/// engine.
pub fn predicted_total_ms(
    cal: &LatencyCalibration,
    caller: ProfileKind,
    callee: ProfileKind,
    variant: Variant,
    n: usize,
) -> f64 {
    let expr = total_expression(caller, callee, variant, n);
    let params = param_list();
    let x = DVector::from_iterator(
        params.len(),
        params.iter().map(|p| match *p {
            Param::Setup(i) => {
                let (a, b) = SETUP_PAIRS[i];
                cal.call_setup_ms[a.as_str()][b.as_str()]
            }
            Param::MissedCallExtra => cal.misc_ms.missed_call_delivery_extra,
            Param::DigitalPerDigit => cal.dtmf_per_digit_ms.digital_event,
            Param::OobPerDigit => cal.dtmf_per_digit_ms.out_of_band,
            Param::AnalogueExtraPerDigit => cal.dtmf_per_digit_ms.analogue_extra,
            Param::Recognition(k) => match k {
                ProfileKind::Sip => cal.recognition_ms.sip,
                ProfileKind::Cellular => cal.recognition_ms.cellular,
                ProfileKind::LandlineTruecall => cal.recognition_ms.landline_truecall,
            },
            Param::GatewayConversion => cal.misc_ms.gateway_conversion,
        }),
    );
    predict(&expr, &x)
}

/// The variant the engine would use between two builtin profiles; exposed so
/// sweep drivers and the fitter agree with the agents.
pub fn engine_variant(caller: ProfileKind, callee: ProfileKind, cal: &LatencyCalibration) -> Variant {
    let cp = PlatformProfile::builtin(caller, cal);
    let ep = PlatformProfile::builtin(callee, cal);
    crate::simnet::preferred_variant(&cp, &ep, 4)
}
