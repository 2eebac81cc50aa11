//! Energy and CO2-equivalent estimates from measured wall-clock time and a
//! configured device power and grid carbon intensity.

use std::time::Instant;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionsConfig {
    #[serde(default = "default_watts")]
    pub device_power_watts: f64,
    #[serde(default = "default_intensity")]
    pub carbon_intensity_kg_per_kwh: f64,
}

fn default_watts() -> f64 {
    65.0
}

fn default_intensity() -> f64 {
    0.4
}

impl Default for EmissionsConfig {
    fn default() -> Self {
        Self {
            device_power_watts: default_watts(),
            carbon_intensity_kg_per_kwh: default_intensity(),
        }
    }
}

impl EmissionsConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.device_power_watts) || !ok(self.carbon_intensity_kg_per_kwh) {
            return Err(format!(
                "device power ({}) and carbon intensity ({}) must be positive",
                self.device_power_watts, self.carbon_intensity_kg_per_kwh
            ));
        }
        Ok(())
    }

    pub fn kwh(&self, seconds: f64) -> f64 {
        seconds / 3600.0 * self.device_power_watts / 1000.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionsReport {
    pub elapsed_seconds: f64,
    pub energy_kwh: f64,
    pub co2eq_kg: f64,
    /// False when the clock failed; the other fields are then zero.
    pub timing_valid: bool,
}

impl EmissionsReport {
    pub fn from_seconds(seconds: f64, config: &EmissionsConfig) -> Self {
        let seconds = seconds.max(0.0);
        let energy_kwh = config.kwh(seconds);
        Self {
            elapsed_seconds: seconds,
            energy_kwh,
            co2eq_kg: energy_kwh * config.carbon_intensity_kg_per_kwh,
            timing_valid: true,
        }
    }

    pub fn invalid() -> Self {
        Self {
            elapsed_seconds: 0.0,
            energy_kwh: 0.0,
            co2eq_kg: 0.0,
            timing_valid: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClockError(pub String);

/// Source of monotone timestamps in seconds.
pub trait Clock {
    fn now(&self) -> Result<f64, ClockError>;
}

/// Monotone process clock.
#[derive(Clone, Copy, Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Result<f64, ClockError> {
        Ok(self.origin.elapsed().as_secs_f64())
    }
}

pub fn track<T>(config: &EmissionsConfig, run: impl FnOnce() -> T) -> (T, EmissionsReport) {
    track_with_clock(&SystemClock::default(), config, run)
}

/// Runs `run` between two clock readings. A failing clock flags the report
/// as invalid but still returns the run's result.
pub fn track_with_clock<T, C: Clock>(clock: &C, config: &EmissionsConfig, run: impl FnOnce() -> T) -> (T, EmissionsReport) {
    let start = clock.now();
    let out = run();
    let report = match (start, clock.now()) {
        (Ok(a), Ok(b)) if b >= a => EmissionsReport::from_seconds(b - a, config),
        _ => EmissionsReport::invalid(),
    };
    (out, report)
}
