//! Scenario definition, nearly-constant-velocity target simulation and
//! biased asynchronous measurement generation.

use nalgebra::Matrix2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::ModelError;
use crate::geometry::{
    compensation_factor, rot_x, rot_y, rotation_matrix, sphere_to_cart, wrap_angle, EulerAngles,
    SphericalReading, Vec3,
};

/// Standard deviations of the range (m), azimuth (rad) and elevation (rad) noise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSigmas {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl NoiseSigmas {
    pub fn new(range: f64, azimuth: f64, elevation: f64) -> Self {
        Self {
            range,
            azimuth,
            elevation,
        }
    }

    /// `(λφ, λη)` for the debiased conversion.
    pub fn compensation(&self) -> (f64, f64) {
        (
            compensation_factor(self.azimuth),
            compensation_factor(self.elevation),
        )
    }

    pub fn as_tuple(&self) -> (f64, f64, f64) {
        (self.range, self.azimuth, self.elevation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub position: Vec3,
    /// Orientation reported by the sensor's own attitude system.
    pub orientation: EulerAngles,
    /// True orientation = `orientation + orientation_bias`.
    pub orientation_bias: EulerAngles,
    pub range_bias: f64,
    /// Only used by the simulator; the estimator fixes it at zero.
    pub azimuth_bias: f64,
    pub elevation_bias: f64,
    pub noise: NoiseSigmas,
}

impl SensorConfig {
    pub fn unbiased(position: Vec3) -> Self {
        Self {
            position,
            orientation: EulerAngles::zero(),
            orientation_bias: EulerAngles::zero(),
            range_bias: 0.0,
            azimuth_bias: 0.0,
            elevation_bias: 0.0,
            noise: NoiseSigmas::default(),
        }
    }

    pub fn true_orientation(&self) -> EulerAngles {
        self.orientation.compose(&self.orientation_bias)
    }
}

/// Initial state at `t = 0` and the motion noise density `q` (m²/s³).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSpec {
    pub initial_position: Vec3,
    pub velocity: Vec3,
    pub q: f64,
}

/// Time-ordered observation schedule, one sensor per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    entries: Vec<(f64, usize)>,
}

impl Schedule {
    pub fn new(entries: Vec<(f64, usize)>) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::Schedule("no instances".into()));
        }
        for (i, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(ModelError::Schedule(format!(
                    "time stamps must increase strictly (instances {} and {})",
                    i + 1,
                    i + 2
                )));
            }
        }
        if let Some(&(t, _)) = entries.iter().find(|(t, _)| !t.is_finite()) {
            return Err(ModelError::Schedule(format!("non-finite time stamp {t}")));
        }
        Ok(Self { entries })
    }

    /// Sensor `m` reports at `offsets[m] + j·period` for `j = 0..count`.
    pub fn periodic(offsets: &[f64], period: f64, count: usize) -> Result<Self, ModelError> {
        let mut entries: Vec<(f64, usize)> = offsets
            .iter()
            .enumerate()
            .flat_map(|(m, &off)| (0..count).map(move |j| (off + j as f64 * period, m)))
            .collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.entries[k].0
    }

    pub fn sensor(&self, k: usize) -> usize {
        self.entries[k].1
    }

    pub fn entries(&self) -> &[(f64, usize)] {
        &self.entries
    }

    /// `T_k = t_{k+1} - t_k`, length `K - 1`.
    pub fn intervals(&self) -> Vec<f64> {
        self.entries.windows(2).map(|w| w[1].0 - w[0].0).collect()
    }

    pub fn max_sensor(&self) -> usize {
        self.entries.iter().map(|e| e.1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub instance: usize,
    pub sensor: usize,
    pub time: f64,
    pub reading: SphericalReading,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthTrack {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl TruthTrack {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// The generator used for a single run. Runs share a seed and differ in
/// their ChaCha stream, so they never overlap.
pub fn run_rng(base_seed: u64, run: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(base_seed);
    rng.set_stream(run);
    rng
}

pub fn simulate_track(motion: &MotionSpec, schedule: &Schedule, seed: u64) -> TruthTrack {
    simulate_track_with(motion, schedule, &mut ChaCha20Rng::seed_from_u64(seed))
}

/// Propagates the target from `t = 0` through every scheduled instance.
///
/// Position and velocity noise over an interval `T` are drawn jointly per
/// axis with covariance `q·[[T³/3, T²/2], [T²/2, T]]`.
pub fn simulate_track_with<R: Rng + ?Sized>(
    motion: &MotionSpec,
    schedule: &Schedule,
    rng: &mut R,
) -> TruthTrack {
    let mut positions = Vec::with_capacity(schedule.len());
    let mut velocities = Vec::with_capacity(schedule.len());
    let mut pos = motion.initial_position;
    let mut vel = motion.velocity;
    let mut t_prev = 0.0;
    for &(t, _) in schedule.entries() {
        let dt = t - t_prev;
        let (n_pos, n_vel) = motion_noise(motion.q, dt, rng);
        pos = pos + dt * vel + n_pos;
        vel += n_vel;
        positions.push(pos);
        velocities.push(vel);
        t_prev = t;
    }
    TruthTrack {
        positions,
        velocities,
    }
}

/// One joint draw of the position and velocity process noise over `dt`.
pub fn motion_noise<R: Rng + ?Sized>(q: f64, dt: f64, rng: &mut R) -> (Vec3, Vec3) {
    if q == 0.0 || dt == 0.0 {
        return (Vec3::zeros(), Vec3::zeros());
    }
    let cov = q * Matrix2::new(dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt);
    let l = cov
        .cholesky()
        .expect("motion covariance is positive definite for q, dt > 0")
        .unpack();
    let mut n_pos = Vec3::zeros();
    let mut n_vel = Vec3::zeros();
    for axis in 0..3 {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        n_pos[axis] = l[(0, 0)] * a;
        n_vel[axis] = l[(1, 0)] * a + l[(1, 1)] * b;
    }
    (n_pos, n_vel)
}

/// Biased, noisy reading of `position` by `sensor`.
///
/// The local vector is formed as `R_yᵀ R_xᵀ (ξ - p)`; the yaw rotation only
/// shifts the azimuth, so it is applied together with the azimuth bias as a
/// single offset `γ + (Δγ + Δφ)`.
pub fn measure(
    position: &Vec3,
    sensor: &SensorConfig,
    noise: &Vec3,
) -> Result<SphericalReading, ModelError> {
    let rel = position - sensor.position;
    if rel.norm() == 0.0 {
        return Err(ModelError::CoincidentTarget);
    }
    let truth = sensor.true_orientation();
    let tilted = rot_y(truth.pitch).transpose() * rot_x(truth.roll).transpose() * rel;
    let range = tilted.norm();
    let planar = tilted.x.hypot(tilted.y);
    let omega = if tilted.x == 0.0 && tilted.y == 0.0 {
        0.0
    } else {
        tilted.y.atan2(tilted.x)
    };
    let upsilon = tilted.z.atan2(planar);
    let yaw_offset = sensor.orientation.yaw + (sensor.orientation_bias.yaw + sensor.azimuth_bias);
    Ok(SphericalReading {
        range: range - sensor.range_bias + noise[0],
        azimuth: wrap_angle(omega - yaw_offset + noise[1]),
        elevation: upsilon - sensor.elevation_bias + noise[2],
    })
}

/// Inverse of [`measure`] at the true biases and zero noise.
pub fn noiseless_position(reading: &SphericalReading, sensor: &SensorConfig) -> Vec3 {
    let debiased = SphericalReading {
        range: reading.range + sensor.range_bias,
        azimuth: reading.azimuth + sensor.azimuth_bias,
        elevation: reading.elevation + sensor.elevation_bias,
    };
    rotation_matrix(&sensor.true_orientation())
        * sphere_to_cart(&debiased, 1.0, 1.0).expect("unit compensation")
        + sensor.position
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub sensors: Vec<SensorConfig>,
    pub motion: MotionSpec,
    pub schedule: Schedule,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ModelError> {
        let count = self.sensors.len();
        if let Some(&(_, index)) = self.schedule.entries().iter().find(|e| e.1 >= count) {
            return Err(ModelError::UnknownSensor { index, count });
        }
        Ok(())
    }

    /// Copy with every noise source switched off.
    pub fn noiseless(&self) -> Scenario {
        let mut out = self.clone();
        out.motion.q = 0.0;
        for s in &mut out.sensors {
            s.noise = NoiseSigmas::default();
        }
        out
    }
}

/// Everything one simulated run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sensors: Vec<SensorConfig>,
    pub schedule: Schedule,
    pub truth: TruthTrack,
    pub measurements: Vec<Measurement>,
}

/// Simulates the track, then one reading per instance by the scheduled sensor.
pub fn generate_scenario<R: Rng + ?Sized>(
    scenario: &Scenario,
    rng: &mut R,
) -> Result<Dataset, ModelError> {
    scenario.validate()?;
    let truth = simulate_track_with(&scenario.motion, &scenario.schedule, rng);
    let mut measurements = Vec::with_capacity(truth.len());
    for (k, &(time, sensor)) in scenario.schedule.entries().iter().enumerate() {
        let cfg = &scenario.sensors[sensor];
        let noise = Vec3::new(
            cfg.noise.range * rng.sample::<f64, _>(StandardNormal),
            cfg.noise.azimuth * rng.sample::<f64, _>(StandardNormal),
            cfg.noise.elevation * rng.sample::<f64, _>(StandardNormal),
        );
        let reading = measure(&truth.positions[k], cfg, &noise)?;
        measurements.push(Measurement {
            instance: k,
            sensor,
            time,
            reading,
        });
    }
    Ok(Dataset {
        sensors: scenario.sensors.clone(),
        schedule: scenario.schedule.clone(),
        truth,
        measurements,
    })
}
