//! Scenario files. Positions are given in km, angles in degrees, the range
//! noise in meters; everything is converted to meters and radians when the
//! file is turned into a [`Scenario`].
//!
//! ```toml
//! [[sensors]]
//! position_km = [0.0, -15.0, 0.0]
//! orientation_deg = [0.0, 0.0, 0.0]          # optional, roll/pitch/yaw
//! biases = { range_km = -0.5, elevation_deg = -2.0, roll_deg = -2.0, pitch_deg = 1.0, yaw_deg = -1.0 }
//! noise = { sigma_range_m = 0.05, sigma_azimuth_deg = 0.02, sigma_elevation_deg = 0.02 }
//!
//! [target]
//! initial_km = [-30.0, -5.0, 8.0]
//! velocity_kmps = [0.0, 0.3, 0.0]
//! q_m2ps3 = 0.5
//!
//! [schedule]
//! period_s = 10.0
//! offsets_s = [2.5]                          # one per sensor
//! count_per_sensor = 20
//! ```
//!
//! `biases.azimuth_deg` is also accepted (default 0); the estimator never
//! estimates it. Unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::geometry::{EulerAngles, Vec3};
use crate::model::{MotionSpec, NoiseSigmas, Scenario, Schedule, SensorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub sensors: Vec<SensorEntry>,
    pub target: TargetEntry,
    pub schedule: ScheduleEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorEntry {
    pub position_km: [f64; 3],
    #[serde(default)]
    pub orientation_deg: [f64; 3],
    #[serde(default)]
    pub biases: BiasEntry,
    #[serde(default)]
    pub noise: NoiseEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasEntry {
    #[serde(default)]
    pub range_km: f64,
    #[serde(default)]
    pub elevation_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub azimuth_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEntry {
    #[serde(default)]
    pub sigma_range_m: f64,
    #[serde(default)]
    pub sigma_azimuth_deg: f64,
    #[serde(default)]
    pub sigma_elevation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetEntry {
    pub initial_km: [f64; 3],
    pub velocity_kmps: [f64; 3],
    pub q_m2ps3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub period_s: f64,
    pub offsets_s: Vec<f64>,
    pub count_per_sensor: usize,
}

fn km(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2]) * 1e3
}

impl ScenarioConfig {
    /// Four sensors with the reference positions and biases, staggered
    /// 2.5 s apart at a 10 s period, 20 reports each, target starting at
    /// [-30, -5, 8] km with velocity [0, 0.3, 0] km/s. Noise:
    /// σρ = 0.05 m, σφ = ση = 0.02°, q = 0.5 m²/s³.
    pub fn table1() -> Self {
        let rows: [([f64; 3], [f64; 5]); 4] = [
            ([0.0, -15.0, 0.0], [-0.5, -2.0, -2.0, 1.0, -1.0]),
            ([-20.0, 5.0, 2.0], [0.3, -2.0, 2.0, -1.0, -1.0]),
            ([20.0, 5.0, 0.0], [-0.4, -2.0, 2.0, -2.0, 2.0]),
            ([0.0, 10.0, -1.0], [-0.2, -1.0, -2.0, -1.0, 1.0]),
        ];
        let sensors = rows
            .iter()
            .map(|(pos, b)| SensorEntry {
                position_km: *pos,
                orientation_deg: [0.0; 3],
                biases: BiasEntry {
                    range_km: b[0],
                    elevation_deg: b[1],
                    roll_deg: b[2],
                    pitch_deg: b[3],
                    yaw_deg: b[4],
                    azimuth_deg: 0.0,
                },
                noise: NoiseEntry {
                    sigma_range_m: 0.05,
                    sigma_azimuth_deg: 0.02,
                    sigma_elevation_deg: 0.02,
                },
            })
            .collect();
        ScenarioConfig {
            sensors,
            target: TargetEntry {
                initial_km: [-30.0, -5.0, 8.0],
                velocity_kmps: [0.0, 0.3, 0.0],
                q_m2ps3: 0.5,
            },
            schedule: ScheduleEntry {
                period_s: 10.0,
                offsets_s: vec![2.5, 5.0, 7.5, 10.0],
                count_per_sensor: 20,
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sensors.is_empty() {
            return Err(ConfigError::invalid("sensors", "at least one sensor is required"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        for (i, s) in self.sensors.iter().enumerate() {
            let at = |f: &str| format!("sensors[{i}].{f}");
            if !finite(&s.position_km) {
                return Err(ConfigError::invalid(at("position_km"), "must be finite"));
            }
            if !finite(&s.orientation_deg) {
                return Err(ConfigError::invalid(at("orientation_deg"), "must be finite"));
            }
            let b = &s.biases;
            if !finite(&[
                b.range_km,
                b.elevation_deg,
                b.roll_deg,
                b.pitch_deg,
                b.yaw_deg,
                b.azimuth_deg,
            ]) {
                return Err(ConfigError::invalid(at("biases"), "must be finite"));
            }
            for (name, v) in [
                ("noise.sigma_range_m", s.noise.sigma_range_m),
                ("noise.sigma_azimuth_deg", s.noise.sigma_azimuth_deg),
                ("noise.sigma_elevation_deg", s.noise.sigma_elevation_deg),
            ] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(ConfigError::invalid(at(name), format!("must be >= 0, got {v}")));
                }
            }
        }
        let t = &self.target;
        if !finite(&t.initial_km) {
            return Err(ConfigError::invalid("target.initial_km", "must be finite"));
        }
        if !finite(&t.velocity_kmps) {
            return Err(ConfigError::invalid("target.velocity_kmps", "must be finite"));
        }
        if !(t.q_m2ps3 >= 0.0 && t.q_m2ps3.is_finite()) {
            return Err(ConfigError::invalid("target.q_m2ps3", "must be >= 0"));
        }
        let s = &self.schedule;
        if !(s.period_s > 0.0 && s.period_s.is_finite()) {
            return Err(ConfigError::invalid("schedule.period_s", "must be > 0"));
        }
        if s.count_per_sensor == 0 {
            return Err(ConfigError::invalid("schedule.count_per_sensor", "must be >= 1"));
        }
        if s.offsets_s.len() != self.sensors.len() {
            return Err(ConfigError::invalid(
                "schedule.offsets_s",
                format!(
                    "expected one offset per sensor ({}), got {}",
                    self.sensors.len(),
                    s.offsets_s.len()
                ),
            ));
        }
        if let Some(i) = s.offsets_s.iter().position(|o| !(o.is_finite() && *o >= 0.0)) {
            return Err(ConfigError::invalid(
                format!("schedule.offsets_s[{i}]"),
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }

    pub fn to_scenario(&self) -> Result<Scenario, ConfigError> {
        self.validate()?;
        let sensors = self
            .sensors
            .iter()
            .map(|s| {
                let b = &s.biases;
                let [r, p, y] = s.orientation_deg;
                SensorConfig {
                    position: km(s.position_km),
                    orientation: EulerAngles::from_degrees(r, p, y),
                    orientation_bias: EulerAngles::from_degrees(b.roll_deg, b.pitch_deg, b.yaw_deg),
                    range_bias: b.range_km * 1e3,
                    azimuth_bias: b.azimuth_deg.to_radians(),
                    elevation_bias: b.elevation_deg.to_radians(),
                    noise: NoiseSigmas::new(
                        s.noise.sigma_range_m,
                        s.noise.sigma_azimuth_deg.to_radians(),
                        s.noise.sigma_elevation_deg.to_radians(),
                    ),
                }
            })
            .collect();
        let schedule = Schedule::periodic(
            &self.schedule.offsets_s,
            self.schedule.period_s,
            self.schedule.count_per_sensor,
        )
        .map_err(|e| ConfigError::invalid("schedule", e.to_string()))?;
        Ok(Scenario {
            sensors,
            motion: MotionSpec {
                initial_position: km(self.target.initial_km),
                velocity: km(self.target.velocity_kmps),
                q: self.target.q_m2ps3,
            },
            schedule,
        })
    }

    pub fn with_noise(mut self, sigma_range_m: f64, sigma_angle_deg: f64) -> Self {
        for s in &mut self.sensors {
            s.noise = NoiseEntry {
                sigma_range_m,
                sigma_azimuth_deg: sigma_angle_deg,
                sigma_elevation_deg: sigma_angle_deg,
            };
        }
        self
    }

    pub fn with_q(mut self, q: f64) -> Self {
        self.target.q_m2ps3 = q;
        self
    }

    /// Multiplies every bias by `c`.
    pub fn with_bias_scale(mut self, c: f64) -> Self {
        for s in &mut self.sensors {
            let b = &mut s.biases;
            b.range_km *= c;
            b.elevation_deg *= c;
            b.roll_deg *= c;
            b.pitch_deg *= c;
            b.yaw_deg *= c;
            b.azimuth_deg *= c;
        }
        self
    }

    pub fn noiseless(self) -> Self {
        self.with_noise(0.0, 0.0).with_q(0.0)
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::table1()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_round_trips_through_toml() {
        let cfg = ScenarioConfig::table1();
        let text = cfg.to_toml_string();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn units_are_converted() {
        let sc = ScenarioConfig::table1().to_scenario().unwrap();
        let s1 = &sc.sensors[0];
        assert_eq!(s1.position, Vec3::new(0.0, -15e3, 0.0));
        assert_eq!(s1.range_bias, -500.0);
        assert!((s1.elevation_bias - (-2.0f64).to_radians()).abs() < 1e-15);
        assert!((s1.noise.azimuth - 0.02f64.to_radians()).abs() < 1e-18);
        assert_eq!(sc.motion.velocity, Vec3::new(0.0, 300.0, 0.0));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut text = ScenarioConfig::table1().to_toml_string();
        text = text.replace("q_m2ps3", "q_m2ps3 = 1.0\nspeed");
        let err = ScenarioConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut cfg = ScenarioConfig::table1();
        cfg.sensors[2].noise.sigma_range_m = -1.0;
        match cfg.validate().unwrap_err() {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "sensors[2].noise.sigma_range_m"),
            e => panic!("unexpected {e}"),
        }
        let mut cfg = ScenarioConfig::table1();
        cfg.schedule.offsets_s.pop();
        match cfg.validate().unwrap_err() {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "schedule.offsets_s"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn minimal_file_parses() {
        let text = r#"
            [[sensors]]
            position_km = [0.0, 0.0, 0.0]

            [target]
            initial_km = [1.0, 2.0, 3.0]
            velocity_kmps = [0.0, 0.1, 0.0]
            q_m2ps3 = 0.0

            [schedule]
            period_s = 10.0
            offsets_s = [1.0]
            count_per_sensor = 1
        "#;
        let sc = ScenarioConfig::from_toml_str(text).unwrap().to_scenario().unwrap();
        assert_eq!(sc.schedule.len(), 1);
        assert_eq!(sc.sensors[0].range_bias, 0.0);
    }

    #[test]
    fn bias_scale_multiplies_everything() {
        let cfg = ScenarioConfig::table1().with_bias_scale(2.0);
        assert_eq!(cfg.sensors[0].biases.range_km, -1.0);
        assert_eq!(cfg.sensors[2].biases.yaw_deg, 4.0);
    }
}
