//! Desk-scale frequency surrogate: a single equivalent machine with a
//! first-order governor, driven by step changes in net load. Used to turn
//! incentive tampering into demand steps and check them against standard
//! under/over-frequency relay settings.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{clip_to_capacity, CustomerTruth};

/// Fixed integration step, seconds.
pub const DT_S: f64 = 0.01;

/// Equivalent-machine parameters, per unit on `base_mva`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridParams {
    /// System base, MW.
    pub base_mva: f64,
    /// Inertia constant, seconds.
    pub inertia_h: f64,
    /// Load damping, p.u.
    pub damping_d: f64,
    /// Governor droop, p.u.
    pub droop_r: f64,
    /// Governor time constant, seconds.
    pub governor_tc: f64,
    /// Nominal frequency, p.u.
    pub nominal_freq: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            base_mva: 13.4,
            inertia_h: 4.0,
            damping_d: 1.0,
            droop_r: 0.05,
            governor_tc: 0.5,
            nominal_freq: 1.0,
        }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inertia_h > 0.0 && self.droop_r > 0.0 && self.governor_tc > 0.0) {
            return Err(Error::InvalidParameter(
                "inertia, droop, and governor time constant must be positive".into(),
            ));
        }
        if !(self.base_mva > 0.0) {
            return Err(Error::InvalidParameter("system base must be positive".into()));
        }
        Ok(())
    }

    /// Steady-state frequency deviation after a sustained load step, p.u.
    pub fn droop_steady_state(&self, delta_p_pu: f64) -> f64 {
        -delta_p_pu / (self.damping_d + 1.0 / self.droop_r)
    }
}

/// Simulated frequency response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyTrace {
    /// Uniformly spaced samples of (time s, frequency p.u.).
    pub samples: Vec<(f64, f64)>,
    pub f_min: f64,
    pub f_max: f64,
}

impl FrequencyTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "time_s,freq_pu")?;
        for &(t, f) in &self.samples {
            writeln!(w, "{},{}", crate::model::round_sig9(t), crate::model::round_sig9(f))?;
        }
        Ok(())
    }

    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Relay settings, p.u.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RelayThresholds {
    pub under: f64,
    pub over: f64,
}

impl Default for RelayThresholds {
    fn default() -> Self {
        // IEEE Std 1547 recommended under/over-frequency trip settings.
        Self {
            under: 0.9916,
            over: 1.0083,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelayKind {
    UnderFrequency,
    OverFrequency,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RelayTrip {
    pub time_s: f64,
    pub kind: RelayKind,
    pub freq_pu: f64,
}

/// Applies a tampered incentive to the DR window of an hourly demand
/// profile. Inside the window the demand drops by the aggregate capped
/// response at `lambda_factor` times the benign incentive; the rest of the
/// profile is untouched. Profile in MW, responses in kW.
pub fn attack_demand_profile(
    baseline_mw: &[f64],
    customers: &[CustomerTruth],
    lambda_benign: f64,
    lambda_factor: f64,
    window: Range<usize>,
) -> Result<Vec<f64>> {
    if !(lambda_factor > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "incentive factor must be positive, got {lambda_factor}"
        )));
    }
    crate::model::check_lambda(lambda_benign)?;
    if window.end > baseline_mw.len() || window.start >= window.end {
        return Err(Error::InvalidInput(format!(
            "window {}..{} does not fit a {}-hour profile",
            window.start,
            window.end,
            baseline_mw.len()
        )));
    }
    let lambda = lambda_factor * lambda_benign;
    let curtailment_kw: f64 = customers
        .iter()
        .map(|c| {
            clip_to_capacity(
                c.beta.beta1 * lambda + c.beta.beta0,
                c.x_max,
            )
        })
        .sum();
    let curtailment_mw = curtailment_kw / 1000.0;
    let mut profile = baseline_mw.to_vec();
    for hour in window {
        profile[hour] -= curtailment_mw;
    }
    Ok(profile)
}

/// Integrates the surrogate over `[0, t_end]` with load steps applied at
/// their times (MW, positive = load increase). Fixed-step fourth-order
/// Runge-Kutta on the rotor and governor states.
pub fn simulate_frequency(
    params: &GridParams,
    load_steps_mw: &[(f64, f64)],
    t_end: f64,
) -> Result<FrequencyTrace> {
    params.validate()?;
    if !(t_end > 0.0) {
        return Err(Error::InvalidInput(format!(
            "simulation span must be positive, got {t_end}"
        )));
    }
    for pair in load_steps_mw.windows(2) {
        if pair[1].0 < pair[0].0 {
            return Err(Error::Ordering(
                "load steps must be sorted by time".into(),
            ));
        }
    }

    let load_pu = |t: f64| -> f64 {
        load_steps_mw
            .iter()
            .take_while(|&&(ts, _)| ts <= t)
            .map(|&(_, mw)| mw)
            .sum::<f64>()
            / params.base_mva
    };

    // State: frequency deviation and governor mechanical power, both p.u.
    let derivs = |t: f64, df: f64, pm: f64| -> (f64, f64) {
        let dp_e = load_pu(t);
        let ddf = (pm - dp_e - params.damping_d * df) / (2.0 * params.inertia_h);
        let dpm = (-df / params.droop_r - pm) / params.governor_tc;
        (ddf, dpm)
    };

    let steps = (t_end / DT_S).ceil() as usize;
    let mut df = 0.0;
    let mut pm = 0.0;
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push((0.0, params.nominal_freq));
    let mut f_min = params.nominal_freq;
    let mut f_max = params.nominal_freq;
    for k in 0..steps {
        let t = k as f64 * DT_S;
        let (k1f, k1p) = derivs(t, df, pm);
        let (k2f, k2p) = derivs(t + DT_S / 2.0, df + DT_S / 2.0 * k1f, pm + DT_S / 2.0 * k1p);
        let (k3f, k3p) = derivs(t + DT_S / 2.0, df + DT_S / 2.0 * k2f, pm + DT_S / 2.0 * k2p);
        let (k4f, k4p) = derivs(t + DT_S, df + DT_S * k3f, pm + DT_S * k3p);
        df += DT_S / 6.0 * (k1f + 2.0 * k2f + 2.0 * k3f + k4f);
        pm += DT_S / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        let f = params.nominal_freq + df;
        f_min = f_min.min(f);
        f_max = f_max.max(f);
        samples.push(((k + 1) as f64 * DT_S, f));
    }

    Ok(FrequencyTrace {
        samples,
        f_min,
        f_max,
    })
}

/// First crossing of each threshold, at most one trip per direction.
pub fn relay_check(trace: &FrequencyTrace, thresholds: &RelayThresholds) -> Vec<RelayTrip> {
    let mut trips = Vec::new();
    let mut under_fired = false;
    let mut over_fired = false;
    for &(t, f) in &trace.samples {
        if !under_fired && f < thresholds.under {
            trips.push(RelayTrip {
                time_s: t,
                kind: RelayKind::UnderFrequency,
                freq_pu: f,
            });
            under_fired = true;
        }
        if !over_fired && f > thresholds.over {
            trips.push(RelayTrip {
                time_s: t,
                kind: RelayKind::OverFrequency,
                freq_pu: f,
            });
            over_fired = true;
        }
        if under_fired && over_fired {
            break;
        }
    }
    trips
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BetaParams, CustomerId};
    use approx::assert_relative_eq;

    fn small_fleet() -> Vec<CustomerTruth> {
        (0..10)
            .map(|i| {
                CustomerTruth::new(
                    CustomerId(i),
                    BetaParams::new(5.0 + i as f64, 2.0),
                    50.0,
                    0.0,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn no_steps_keeps_nominal_frequency() {
        let trace = simulate_frequency(&GridParams::default(), &[], 5.0).unwrap();
        for &(_, f) in &trace.samples {
            assert_eq!(f, 1.0);
        }
        assert_eq!(trace.f_min, 1.0);
        assert_eq!(trace.f_max, 1.0);
    }

    #[test]
    fn steady_state_matches_droop_formula() {
        let params = GridParams::default();
        // 0.1 p.u. load increase on the default base.
        let step_mw = 0.1 * params.base_mva;
        let trace = simulate_frequency(&params, &[(1.0, step_mw)], 40.0).unwrap();
        let final_f = trace.samples.last().unwrap().1;
        let expected = 1.0 + params.droop_steady_state(0.1);
        assert_relative_eq!(expected, 1.0 - 0.1 / 21.0, max_relative = 1e-12);
        assert!((final_f - expected).abs() < 1e-4);
    }

    #[test]
    fn steady_state_holds_across_step_sweep() {
        let params = GridParams::default();
        for &dp in &[-0.6, -0.3, -0.05, 0.05, 0.3, 0.8] {
            let trace =
                simulate_frequency(&params, &[(1.0, dp * params.base_mva)], 60.0).unwrap();
            let final_f = trace.samples.last().unwrap().1;
            let expected = 1.0 + params.droop_steady_state(dp);
            assert!(
                (final_f - expected).abs() < 1e-4,
                "step {dp}: {final_f} vs {expected}"
            );
        }
    }

    #[test]
    fn excursion_direction_opposes_step_sign_and_grows_with_magnitude() {
        let params = GridParams::default();
        let drop = simulate_frequency(&params, &[(1.0, -5.0)], 20.0).unwrap();
        assert!(drop.f_max > 1.0);
        let rise = simulate_frequency(&params, &[(1.0, 5.0)], 20.0).unwrap();
        assert!(rise.f_min < 1.0);

        let mut last_peak = 0.0;
        for &mw in &[1.0, 2.0, 4.0, 8.0] {
            let trace = simulate_frequency(&params, &[(1.0, mw)], 20.0).unwrap();
            let peak = (1.0 - trace.f_min).abs();
            assert!(peak >= last_peak);
            last_peak = peak;
        }
    }

    #[test]
    fn trace_settles_with_positive_damping() {
        let params = GridParams::default();
        let trace = simulate_frequency(&params, &[(1.0, 3.0), (2.5, -1.0)], 60.0).unwrap();
        let tail: Vec<f64> = trace
            .samples
            .iter()
            .rev()
            .take(100)
            .map(|&(_, f)| f)
            .collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var = tail.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / tail.len() as f64;
        assert!(var < 1e-8, "tail variance {var}");
    }

    #[test]
    fn unsorted_steps_are_rejected() {
        let params = GridParams::default();
        assert!(matches!(
            simulate_frequency(&params, &[(2.0, 1.0), (1.0, 1.0)], 10.0),
            Err(Error::Ordering(_))
        ));
    }

    #[test]
    fn relay_check_directions() {
        let thresholds = RelayThresholds::default();
        let flat = FrequencyTrace {
            samples: vec![(0.0, 1.0), (1.0, 1.0)],
            f_min: 1.0,
            f_max: 1.0,
        };
        assert!(relay_check(&flat, &thresholds).is_empty());

        let dipping = FrequencyTrace {
            samples: vec![(0.0, 1.0), (1.0, 0.981), (2.0, 1.0)],
            f_min: 0.981,
            f_max: 1.0,
        };
        let trips = relay_check(&dipping, &thresholds);
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[0].kind, RelayKind::UnderFrequency);

        let peaking = FrequencyTrace {
            samples: vec![(0.0, 1.0), (1.0, 1.018), (2.0, 1.02), (3.0, 1.0)],
            f_min: 1.0,
            f_max: 1.02,
        };
        let trips = relay_check(&peaking, &thresholds);
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[0].kind, RelayKind::OverFrequency);
        // First crossing only.
        assert_relative_eq!(trips[0].time_s, 1.0);
    }

    #[test]
    fn demand_profile_factor_one_is_benign() {
        let customers = small_fleet();
        let baseline = vec![10.0; 24];
        let benign =
            attack_demand_profile(&baseline, &customers, 1.5, 1.0, 11..15).unwrap();
        let again = attack_demand_profile(&baseline, &customers, 1.5, 1.0, 11..15).unwrap();
        assert_eq!(benign, again);
        assert!(benign[12] < baseline[12]);
        assert_eq!(benign[9], baseline[9]);
    }

    #[test]
    fn demand_profile_scaling_directions_and_cap() {
        let customers = small_fleet();
        let baseline = vec![10.0; 24];
        let lambda = 1.5;
        let window = 11..15;
        let benign =
            attack_demand_profile(&baseline, &customers, lambda, 1.0, window.clone()).unwrap();
        let inflated =
            attack_demand_profile(&baseline, &customers, lambda, 50.0, window.clone()).unwrap();
        let deflated =
            attack_demand_profile(&baseline, &customers, lambda, 0.25, window.clone()).unwrap();

        let total_capacity_mw: f64 = customers.iter().map(|c| c.x_max).sum::<f64>() / 1000.0;
        for hour in window {
            let benign_cut = baseline[hour] - benign[hour];
            let inflated_cut = baseline[hour] - inflated[hour];
            let deflated_cut = baseline[hour] - deflated[hour];
            assert!(inflated_cut >= benign_cut);
            assert!(inflated_cut <= total_capacity_mw + 1e-12);
            assert!(deflated_cut <= benign_cut);
        }
        // At 50x the incentive every customer saturates.
        assert_relative_eq!(baseline[11] - inflated[11], total_capacity_mw);
    }

    #[test]
    fn demand_profile_rejects_bad_windows_and_factors() {
        let customers = small_fleet();
        let baseline = vec![10.0; 24];
        assert!(attack_demand_profile(&baseline, &customers, 1.5, 0.0, 11..15).is_err());
        assert!(attack_demand_profile(&baseline, &customers, 1.5, 2.0, 20..30).is_err());
        assert!(attack_demand_profile(&baseline, &customers, -1.0, 2.0, 11..15).is_err());
    }

    #[test]
    fn csv_export_writes_header_and_rows() {
        let trace = simulate_frequency(&GridParams::default(), &[(0.5, 2.0)], 1.0).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "time_s,freq_pu");
        assert_eq!(lines.count(), trace.samples.len());
    }
}
