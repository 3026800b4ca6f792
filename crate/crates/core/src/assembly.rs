//! Residual model, weight blocks and the per-block linear coefficients used by
//! the coordinate-descent solver.
//!
//! For consecutive instances `k, k+1` the residual is the 6-vector
//!
//! ```text
//! r_k = [ g_{k+1} - g_k - T_k·v_k ]
//!       [ v_{k+1} - v_k           ]
//! ```
//!
//! where `g_k` is the reading of instance `k` converted to the global frame
//! with the current bias estimate. The objective is `Σ r_kᵀ Q_k r_k`.
//!
//! With every block but one held fixed, `r` is affine in the free block (the
//! velocities, the range biases, or `(cos Δϑ_m, sin Δϑ_m)` for one of the four
//! angle kinds). Those affine maps are assembled here as block-sparse `H` and
//! a stacked constant `c` such that the stacked residual equals `H x + c`.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector6};

use crate::error::AssemblyError;
use crate::geometry::{
    converted_covariance, rot_x, rot_y, rot_z, rotation_matrix, sphere_to_cart_unchecked,
    wrap_angle, EulerAngles, Mat3, SphericalReading, Vec3,
};
use crate::model::{Dataset, Measurement, SensorConfig};

/// Diagonal regularization added to a singular pseudo-ML block before inversion.
pub const WEIGHT_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AngleKind {
    Elevation,
    Roll,
    Pitch,
    Yaw,
}

impl AngleKind {
    /// Update order within a sweep.
    pub const ALL: [AngleKind; 4] = [
        AngleKind::Elevation,
        AngleKind::Roll,
        AngleKind::Pitch,
        AngleKind::Yaw,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AngleKind::Elevation => "elevation",
            AngleKind::Roll => "roll",
            AngleKind::Pitch => "pitch",
            AngleKind::Yaw => "yaw",
        }
    }
}

impl fmt::Display for AngleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BiasKind {
    Range,
    Angle(AngleKind),
}

impl BiasKind {
    pub const ALL: [BiasKind; 5] = [
        BiasKind::Range,
        BiasKind::Angle(AngleKind::Elevation),
        BiasKind::Angle(AngleKind::Roll),
        BiasKind::Angle(AngleKind::Pitch),
        BiasKind::Angle(AngleKind::Yaw),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BiasKind::Range => "range",
            BiasKind::Angle(a) => a.name(),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for BiasKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Estimated biases of every sensor: range in meters, angles in radians.
/// The azimuth bias is not part of the model (it is absorbed by yaw).
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSet {
    pub range: Vec<f64>,
    pub elevation: Vec<f64>,
    pub roll: Vec<f64>,
    pub pitch: Vec<f64>,
    pub yaw: Vec<f64>,
}

impl BiasSet {
    pub fn zeros(sensors: usize) -> Self {
        Self {
            range: vec![0.0; sensors],
            elevation: vec![0.0; sensors],
            roll: vec![0.0; sensors],
            pitch: vec![0.0; sensors],
            yaw: vec![0.0; sensors],
        }
    }

    /// The biases the simulator used, with any azimuth bias folded into yaw.
    pub fn from_sensors(sensors: &[SensorConfig]) -> Self {
        Self {
            range: sensors.iter().map(|s| s.range_bias).collect(),
            elevation: sensors.iter().map(|s| s.elevation_bias).collect(),
            roll: sensors.iter().map(|s| s.orientation_bias.roll).collect(),
            pitch: sensors.iter().map(|s| s.orientation_bias.pitch).collect(),
            yaw: sensors
                .iter()
                .map(|s| s.orientation_bias.yaw + s.azimuth_bias)
                .collect(),
        }
    }

    pub fn num_sensors(&self) -> usize {
        self.range.len()
    }

    pub fn get(&self, kind: BiasKind) -> &[f64] {
        match kind {
            BiasKind::Range => &self.range,
            BiasKind::Angle(a) => self.angles(a),
        }
    }

    pub fn angles(&self, kind: AngleKind) -> &[f64] {
        match kind {
            AngleKind::Elevation => &self.elevation,
            AngleKind::Roll => &self.roll,
            AngleKind::Pitch => &self.pitch,
            AngleKind::Yaw => &self.yaw,
        }
    }

    pub fn angles_mut(&mut self, kind: AngleKind) -> &mut Vec<f64> {
        match kind {
            AngleKind::Elevation => &mut self.elevation,
            AngleKind::Roll => &mut self.roll,
            AngleKind::Pitch => &mut self.pitch,
            AngleKind::Yaw => &mut self.yaw,
        }
    }

    /// Replaces one angle kind, wrapping every value into `[-π, π]`.
    pub fn set_angles(&mut self, kind: AngleKind, values: &[f64]) {
        let dst = self.angles_mut(kind);
        dst.clear();
        dst.extend(values.iter().map(|&a| wrap_angle(a)));
    }

    pub fn orientation(&self, m: usize) -> EulerAngles {
        EulerAngles {
            roll: self.roll[m],
            pitch: self.pitch[m],
            yaw: self.yaw[m],
        }
    }

    /// Largest absolute component difference, angle differences wrapped.
    pub fn max_abs_diff(&self, other: &BiasSet) -> f64 {
        let mut d = self
            .range
            .iter()
            .zip(&other.range)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        for kind in AngleKind::ALL {
            for (a, b) in self.angles(kind).iter().zip(other.angles(kind)) {
                d = d.max(wrap_angle(a - b).abs());
            }
        }
        d
    }
}

/// Stacked velocities `(v_1, …, v_K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTrack(pub Vec<Vec3>);

impl VelocityTrack {
    pub fn zeros(instances: usize) -> Self {
        Self(vec![Vec3::zeros(); instances])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_iterator(3 * self.0.len(), self.0.iter().flat_map(|v| v.iter().copied()))
    }

    pub fn from_dvector(x: &DVector<f64>) -> Self {
        assert_eq!(x.len() % 3, 0, "stacked velocity length must be a multiple of 3");
        Self(
            (0..x.len() / 3)
                .map(|k| Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    /// `Q_k = I`: plain nonlinear least squares.
    Identity,
    /// `Q_k` is the inverse of the approximate covariance of `r_k` given the
    /// motion noise density `q` (m²/s³).
    PseudoMl { q: f64 },
}

impl WeightMode {
    pub fn label(&self) -> &'static str {
        match self {
            WeightMode::Identity => "nls",
            WeightMode::PseudoMl { .. } => "pml",
        }
    }
}

/// The block-diagonal weight `Q = blkdiag(Q_1, …, Q_{K-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    pub mode: WeightMode,
    pub blocks: Vec<Matrix6<f64>>,
    /// Indices of blocks that needed regularization before inversion.
    pub regularized: Vec<usize>,
}

impl WeightSpec {
    pub fn identity(blocks: usize) -> Self {
        Self {
            mode: WeightMode::Identity,
            blocks: vec![Matrix6::identity(); blocks],
            regularized: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = 6 * self.blocks.len();
        let mut q = DMatrix::zeros(n, n);
        for (k, b) in self.blocks.iter().enumerate() {
            q.view_mut((6 * k, 6 * k), (6, 6)).copy_from(b);
        }
        q
    }
}

/// Inverse of `[[R + qT³/3·I, qT²/2·I], [qT²/2·I, qT·I]]` where `R` is the
/// summed conversion covariance of the two instances.
pub fn pseudo_ml_block(r_sum: &Mat3, q: f64, dt: f64) -> (Matrix6<f64>, bool) {
    let mut cov = Matrix6::zeros();
    let eye = Matrix3::identity();
    cov.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(r_sum + eye * (q * dt.powi(3) / 3.0)));
    cov.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(eye * (q * dt * dt / 2.0)));
    cov.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(eye * (q * dt * dt / 2.0)));
    cov.fixed_view_mut::<3, 3>(3, 3).copy_from(&(eye * (q * dt)));
    let (chol, regularized) = match cov.cholesky() {
        Some(c) if c.l().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) => (c, false),
        _ => {
            let reg = cov + Matrix6::identity() * WEIGHT_REGULARIZATION;
            (
                reg.cholesky()
                    .expect("regularized covariance is positive definite"),
                true,
            )
        }
    };
    let inv = chol.inverse();
    (0.5 * (inv + inv.transpose()), regularized)
}

/// Converted global-frame position of one reading under a bias estimate.
pub fn g_eval(
    measurement: &Measurement,
    sensor: &SensorConfig,
    biases: &BiasSet,
    lambda_az: f64,
    lambda_el: f64,
) -> Result<Vec3, AssemblyError> {
    crate::geometry::check_compensation(lambda_az, lambda_el)?;
    let s = measurement.sensor;
    let range = measurement.reading.range + biases.range[s];
    if !(range > 0.0) {
        return Err(AssemblyError::NonPositiveRange {
            instance: measurement.instance,
            range,
        });
    }
    let debiased = SphericalReading {
        range,
        azimuth: measurement.reading.azimuth,
        elevation: measurement.reading.elevation + biases.elevation[s],
    };
    let rot = rotation_matrix(&sensor.orientation.compose(&biases.orientation(s)));
    Ok(rot * sphere_to_cart_unchecked(&debiased, lambda_az, lambda_el) + sensor.position)
}

/// Block-sparse matrix with 6-row blocks. Each row block holds a list of
/// `(column, 6-vector)` entries; repeated columns are summed on insert.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparse {
    ncols: usize,
    rows: Vec<Vec<(usize, Vector6<f64>)>>,
}

impl BlockSparse {
    pub fn new(row_blocks: usize, ncols: usize) -> Self {
        Self {
            ncols,
            rows: vec![Vec::new(); row_blocks],
        }
    }

    pub fn add(&mut self, row_block: usize, col: usize, value: Vector6<f64>) {
        debug_assert!(col < self.ncols);
        let row = &mut self.rows[row_block];
        match row.iter_mut().find(|(c, _)| *c == col) {
            Some((_, v)) => *v += value,
            None => row.push((col, value)),
        }
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row_blocks(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, k: usize) -> &[(usize, Vector6<f64>)] {
        &self.rows[k]
    }

    /// `H x`, one 6-vector per row block.
    pub fn apply(&self, x: &DVector<f64>) -> Vec<Vector6<f64>> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|(c, v)| v * x[*c]).sum())
            .collect()
    }

    /// `Hᵀ Q H`, accumulated block by block.
    pub fn normal_matrix(&self, q: &[Matrix6<f64>]) -> DMatrix<f64> {
        let mut n = DMatrix::zeros(self.ncols, self.ncols);
        for (row, qk) in self.rows.iter().zip(q) {
            let weighted: Vec<Vector6<f64>> = row.iter().map(|(_, v)| qk * v).collect();
            for (i, (ci, _)) in row.iter().enumerate() {
                for (cj, vj) in row {
                    n[(*ci, *cj)] += weighted[i].dot(vj);
                }
            }
        }
        n
    }

    /// `Hᵀ y` for a stacked vector `y`.
    pub fn transpose_apply(&self, y: &[Vector6<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (row, yk) in self.rows.iter().zip(y) {
            for (c, v) in row {
                out[*c] += v.dot(yk);
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(6 * self.rows.len(), self.ncols);
        for (k, row) in self.rows.iter().enumerate() {
            for (c, v) in row {
                for i in 0..6 {
                    h[(6 * k + i, *c)] += v[i];
                }
            }
        }
        h
    }
}

/// One block update: minimize `‖H x + c‖²_Q` over `x`.
#[derive(Debug, Clone)]
pub struct Subproblem<'w> {
    pub h: BlockSparse,
    pub c: Vec<Vector6<f64>>,
    pub weights: &'w WeightSpec,
}

impl Subproblem<'_> {
    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    /// `H x + c`, per row block.
    pub fn residual(&self, x: &DVector<f64>) -> Vec<Vector6<f64>> {
        self.h
            .apply(x)
            .into_iter()
            .zip(&self.c)
            .map(|(hx, c)| hx + c)
            .collect()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.residual(x)
            .iter()
            .zip(&self.weights.blocks)
            .map(|(r, q)| (q * r).dot(r))
            .sum()
    }

    pub fn normal_matrix(&self) -> DMatrix<f64> {
        self.h.normal_matrix(&self.weights.blocks)
    }

    /// `Hᵀ Q c`.
    pub fn weighted_rhs(&self) -> DVector<f64> {
        let qc: Vec<Vector6<f64>> = self
            .c
            .iter()
            .zip(&self.weights.blocks)
            .map(|(c, q)| q * c)
            .collect();
        self.h.transpose_apply(&qc)
    }

    /// `2 Hᵀ Q (H x + c)`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let qr: Vec<Vector6<f64>> = self
            .residual(x)
            .iter()
            .zip(&self.weights.blocks)
            .map(|(r, q)| q * r)
            .collect();
        2.0 * self.h.transpose_apply(&qr)
    }

    pub fn c_dense(&self) -> DVector<f64> {
        DVector::from_iterator(6 * self.c.len(), self.c.iter().flat_map(|v| v.iter().copied()))
    }
}

/// Per-instance quantities that do not depend on the bias estimate.
#[derive(Debug, Clone)]
struct Instance {
    sensor: usize,
    reading: SphericalReading,
}

/// Measurements plus the sensor geometry they refer to.
#[derive(Debug, Clone)]
pub struct Problem {
    sensors: Vec<SensorConfig>,
    instances: Vec<Instance>,
    intervals: Vec<f64>,
    /// `(λφ, λη)` per sensor, from its configured sigmas.
    compensation: Vec<(f64, f64)>,
}

impl Problem {
    /// Measurements must be in time order with instance indices `0..K`.
    pub fn new(measurements: &[Measurement], sensors: &[SensorConfig]) -> Result<Self, AssemblyError> {
        let mut instances = Vec::with_capacity(measurements.len());
        for (k, m) in measurements.iter().enumerate() {
            if m.instance != k {
                return Err(AssemblyError::Dimension(format!(
                    "measurement {k} carries instance index {}",
                    m.instance
                )));
            }
            if m.sensor >= sensors.len() {
                return Err(AssemblyError::Model(crate::error::ModelError::UnknownSensor {
                    index: m.sensor,
                    count: sensors.len(),
                }));
            }
            instances.push(Instance {
                sensor: m.sensor,
                reading: m.reading,
            });
        }
        let intervals: Vec<f64> = measurements
            .windows(2)
            .map(|w| w[1].time - w[0].time)
            .collect();
        if let Some(k) = intervals.iter().position(|t| !(*t >= 0.0)) {
            return Err(AssemblyError::Dimension(format!(
                "time stamps decrease between instances {k} and {}",
                k + 1
            )));
        }
        Ok(Self {
            compensation: sensors.iter().map(|s| s.noise.compensation()).collect(),
            sensors: sensors.to_vec(),
            instances,
            intervals,
        })
    }

    pub fn from_dataset(data: &Dataset) -> Result<Self, AssemblyError> {
        Self::new(&data.measurements, &data.sensors)
    }

    /// Overrides the compensation factors of every sensor.
    pub fn with_compensation(mut self, lambda_az: f64, lambda_el: f64) -> Result<Self, AssemblyError> {
        crate::geometry::check_compensation(lambda_az, lambda_el)?;
        self.compensation = vec![(lambda_az, lambda_el); self.sensors.len()];
        Ok(self)
    }

    pub fn num_instances(&self) -> usize {
        self.instances.len()
    }

    pub fn num_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn sensors(&self) -> &[SensorConfig] {
        &self.sensors
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    pub fn sensor_of(&self, k: usize) -> usize {
        self.instances[k].sensor
    }

    fn check_biases(&self, biases: &BiasSet) -> Result<(), AssemblyError> {
        let m = self.sensors.len();
        for kind in BiasKind::ALL {
            if biases.get(kind).len() != m {
                return Err(AssemblyError::Dimension(format!(
                    "{kind} biases have {} entries for {m} sensors",
                    biases.get(kind).len()
                )));
            }
        }
        Ok(())
    }

    fn check_velocities(&self, vel: &VelocityTrack) -> Result<(), AssemblyError> {
        if vel.len() != self.instances.len() {
            return Err(AssemblyError::Dimension(format!(
                "{} velocities for {} instances",
                vel.len(),
                self.instances.len()
            )));
        }
        Ok(())
    }

    fn require_pairs(&self) -> Result<(), AssemblyError> {
        if self.instances.len() < 2 {
            return Err(AssemblyError::TooFewInstances(self.instances.len()));
        }
        Ok(())
    }

    fn measurement(&self, k: usize) -> Measurement {
        Measurement {
            instance: k,
            sensor: self.instances[k].sensor,
            time: 0.0,
            reading: self.instances[k].reading,
        }
    }

    /// Debiased range `ρ_k + Δρ`, which must stay positive.
    fn debiased_range(&self, k: usize, biases: &BiasSet) -> Result<f64, AssemblyError> {
        let range = self.instances[k].reading.range + biases.range[self.instances[k].sensor];
        if range > 0.0 {
            Ok(range)
        } else {
            Err(AssemblyError::NonPositiveRange { instance: k, range })
        }
    }

    /// `g_k` for every instance.
    pub fn converted_positions(&self, biases: &BiasSet) -> Result<Vec<Vec3>, AssemblyError> {
        self.check_biases(biases)?;
        (0..self.instances.len())
            .map(|k| {
                let s = self.instances[k].sensor;
                let (la, le) = self.compensation[s];
                g_eval(&self.measurement(k), &self.sensors[s], biases, la, le)
            })
            .collect()
    }

    /// The stacked residual `r_1 … r_{K-1}`.
    pub fn residuals(
        &self,
        biases: &BiasSet,
        vel: &VelocityTrack,
    ) -> Result<Vec<Vector6<f64>>, AssemblyError> {
        self.require_pairs()?;
        self.check_velocities(vel)?;
        let g = self.converted_positions(biases)?;
        Ok(self
            .intervals
            .iter()
            .enumerate()
            .map(|(k, &dt)| {
                let dp = g[k + 1] - g[k] - dt * vel.0[k];
                let dv = vel.0[k + 1] - vel.0[k];
                Vector6::new(dp.x, dp.y, dp.z, dv.x, dv.y, dv.z)
            })
            .collect())
    }

    /// `Σ_k r_kᵀ Q_k r_k`.
    pub fn objective(
        &self,
        biases: &BiasSet,
        vel: &VelocityTrack,
        weights: &WeightSpec,
    ) -> Result<f64, AssemblyError> {
        self.check_weights(weights)?;
        Ok(self
            .residuals(biases, vel)?
            .iter()
            .zip(&weights.blocks)
            .map(|(r, q)| (q * r).dot(r))
            .sum())
    }

    fn check_weights(&self, weights: &WeightSpec) -> Result<(), AssemblyError> {
        let expected = self.instances.len().saturating_sub(1);
        if weights.len() != expected {
            return Err(AssemblyError::Dimension(format!(
                "{} weight blocks for {expected} residual blocks",
                weights.len()
            )));
        }
        Ok(())
    }

    /// Conversion covariance `R_k` of every instance at the given biases.
    pub fn conversion_covariances(&self, biases: &BiasSet) -> Result<Vec<Mat3>, AssemblyError> {
        self.check_biases(biases)?;
        (0..self.instances.len())
            .map(|k| {
                let s = self.instances[k].sensor;
                let sensor = &self.sensors[s];
                let reading = SphericalReading {
                    range: self.debiased_range(k, biases)?,
                    azimuth: self.instances[k].reading.azimuth,
                    elevation: self.instances[k].reading.elevation + biases.elevation[s],
                };
                let rot = rotation_matrix(&sensor.orientation.compose(&biases.orientation(s)));
                Ok(converted_covariance(&reading, sensor.noise.as_tuple(), &rot))
            })
            .collect()
    }

    pub fn build_weights(&self, biases: &BiasSet, mode: WeightMode) -> Result<WeightSpec, AssemblyError> {
        let blocks = self.instances.len().saturating_sub(1);
        match mode {
            WeightMode::Identity => Ok(WeightSpec::identity(blocks)),
            WeightMode::PseudoMl { q } => {
                let cov = self.conversion_covariances(biases)?;
                let mut out = Vec::with_capacity(blocks);
                let mut regularized = Vec::new();
                for (k, &dt) in self.intervals.iter().enumerate() {
                    let (block, reg) = pseudo_ml_block(&(cov[k + 1] + cov[k]), q, dt);
                    if reg {
                        log::warn!(
                            "pseudo-ML weight block {k} is singular (T = {dt}, q = {q}); regularized"
                        );
                        regularized.push(k);
                    }
                    out.push(block);
                }
                Ok(WeightSpec {
                    mode,
                    blocks: out,
                    regularized,
                })
            }
        }
    }

    /// Velocity block: `H` has `[[-T_k I, 0], [-I, I]]` at row block `k`,
    /// columns `3k..3k+6`; `c_k = [g_{k+1} - g_k; 0]`.
    pub fn assemble_velocity<'w>(
        &self,
        biases: &BiasSet,
        weights: &'w WeightSpec,
    ) -> Result<Subproblem<'w>, AssemblyError> {
        self.require_pairs()?;
        self.check_weights(weights)?;
        let g = self.converted_positions(biases)?;
        let k_total = self.instances.len();
        let mut h = BlockSparse::new(k_total - 1, 3 * k_total);
        let mut c = Vec::with_capacity(k_total - 1);
        for (k, &dt) in self.intervals.iter().enumerate() {
            for axis in 0..3 {
                let mut left = Vector6::zeros();
                left[axis] = -dt;
                left[3 + axis] = -1.0;
                h.add(k, 3 * k + axis, left);
                let mut right = Vector6::zeros();
                right[3 + axis] = 1.0;
                h.add(k, 3 * (k + 1) + axis, right);
            }
            let dg = g[k + 1] - g[k];
            c.push(Vector6::new(dg.x, dg.y, dg.z, 0.0, 0.0, 0.0));
        }
        Ok(Subproblem { h, c, weights })
    }

    /// `[p_{s_{k+1}} - p_{s_k} - T_k v_k; v_{k+1} - v_k]`.
    fn motion_offsets(&self, vel: &VelocityTrack) -> Vec<Vector6<f64>> {
        self.intervals
            .iter()
            .enumerate()
            .map(|(k, &dt)| {
                let p = self.sensors[self.instances[k + 1].sensor].position
                    - self.sensors[self.instances[k].sensor].position
                    - dt * vel.0[k];
                let dv = vel.0[k + 1] - vel.0[k];
                Vector6::new(p.x, p.y, p.z, dv.x, dv.y, dv.z)
            })
            .collect()
    }

    /// Unit-range direction `R(ζ+Δζ) · h⁻¹(1, φ, η+Δη)` of every instance.
    fn range_directions(&self, biases: &BiasSet) -> Vec<Vec3> {
        (0..self.instances.len())
            .map(|k| {
                let s = self.instances[k].sensor;
                let (la, le) = self.compensation[s];
                let reading = SphericalReading {
                    range: 1.0,
                    azimuth: self.instances[k].reading.azimuth,
                    elevation: self.instances[k].reading.elevation + biases.elevation[s],
                };
                let rot = rotation_matrix(&self.sensors[s].orientation.compose(&biases.orientation(s)));
                rot * sphere_to_cart_unchecked(&reading, la, le)
            })
            .collect()
    }

    /// Range block: column `s_{k+1}` gets `h_{k+1}`, column `s_k` gets `-h_k`
    /// (summed when they coincide); `c_k = ρ_{k+1} h_{k+1} - ρ_k h_k` plus the
    /// motion offsets.
    pub fn assemble_range<'w>(
        &self,
        biases: &BiasSet,
        vel: &VelocityTrack,
        weights: &'w WeightSpec,
    ) -> Result<Subproblem<'w>, AssemblyError> {
        self.require_pairs()?;
        self.check_biases(biases)?;
        self.check_velocities(vel)?;
        self.check_weights(weights)?;
        let dirs = self.range_directions(biases);
        let offsets = self.motion_offsets(vel);
        let mut h = BlockSparse::new(self.intervals.len(), self.sensors.len());
        let mut c = Vec::with_capacity(self.intervals.len());
        let pad = |v: Vec3| Vector6::new(v.x, v.y, v.z, 0.0, 0.0, 0.0);
        for k in 0..self.intervals.len() {
            let (a, b) = (&self.instances[k], &self.instances[k + 1]);
            h.add(k, b.sensor, pad(dirs[k + 1]));
            h.add(k, a.sensor, -pad(dirs[k]));
            let cst = dirs[k + 1] * b.reading.range - dirs[k] * a.reading.range;
            c.push(pad(cst) + offsets[k]);
        }
        Ok(Subproblem { h, c, weights })
    }

    /// The cos/sin coefficient vectors and the constant part of `g_k - p` for
    /// one angle kind: `g_k - p = h^c cos Δϑ + h^s sin Δϑ + a`.
    pub fn angle_coefficients(
        &self,
        kind: AngleKind,
        k: usize,
        biases: &BiasSet,
    ) -> Result<(Vec3, Vec3, Vec3), AssemblyError> {
        let s = self.instances[k].sensor;
        let (la, le) = self.compensation[s];
        let reading = self.instances[k].reading;
        let range = self.debiased_range(k, biases)?;
        let presumed = self.sensors[s].orientation;
        let est = biases.orientation(s);
        let elevation = reading.elevation + biases.elevation[s];
        let u = sphere_to_cart_unchecked(
            &SphericalReading {
                range,
                azimuth: reading.azimuth,
                elevation,
            },
            la,
            le,
        );
        let full = presumed.compose(&est);
        Ok(match kind {
            AngleKind::Elevation => {
                let (sp, cp) = reading.azimuth.sin_cos();
                let (se, ce) = reading.elevation.sin_cos();
                let kk = range / (la * le);
                let ke = range / le;
                let rot = rotation_matrix(&full);
                let hc = rot * Vec3::new(kk * cp * ce, kk * sp * ce, ke * se);
                let hs = rot * Vec3::new(-kk * cp * se, -kk * sp * se, ke * ce);
                (hc, hs, Vec3::zeros())
            }
            AngleKind::Roll => {
                let inner = rot_x(presumed.roll) * rot_y(full.pitch) * rot_z(full.yaw) * u;
                let (cos_part, sin_part, fixed) = axis_split(0);
                (cos_part * inner, sin_part * inner, fixed * inner)
            }
            AngleKind::Pitch => {
                let outer = rot_x(full.roll);
                let inner = rot_y(presumed.pitch) * rot_z(full.yaw) * u;
                let (cos_part, sin_part, fixed) = axis_split(1);
                (
                    outer * cos_part * inner,
                    outer * sin_part * inner,
                    outer * fixed * inner,
                )
            }
            AngleKind::Yaw => {
                let outer = rot_x(full.roll) * rot_y(full.pitch);
                let inner = rot_z(presumed.yaw) * u;
                let (cos_part, sin_part, fixed) = axis_split(2);
                (
                    outer * cos_part * inner,
                    outer * sin_part * inner,
                    outer * fixed * inner,
                )
            }
        })
    }

    /// Angle block for one kind: row block `k` holds `(h^c_{k+1}, h^s_{k+1})`
    /// at columns `(2s_{k+1}, 2s_{k+1}+1)` and `(-h^c_k, -h^s_k)` at
    /// `(2s_k, 2s_k+1)`. The constant is the motion offset plus the
    /// Δϑ-independent part of `g_{k+1} - g_k`.
    pub fn assemble_angle<'w>(
        &self,
        kind: AngleKind,
        biases: &BiasSet,
        vel: &VelocityTrack,
        weights: &'w WeightSpec,
    ) -> Result<Subproblem<'w>, AssemblyError> {
        self.require_pairs()?;
        self.check_biases(biases)?;
        self.check_velocities(vel)?;
        self.check_weights(weights)?;
        let coeffs = (0..self.instances.len())
            .map(|k| self.angle_coefficients(kind, k, biases))
            .collect::<Result<Vec<_>, _>>()?;
        let offsets = self.motion_offsets(vel);
        let mut h = BlockSparse::new(self.intervals.len(), 2 * self.sensors.len());
        let mut c = Vec::with_capacity(self.intervals.len());
        let pad = |v: Vec3| Vector6::new(v.x, v.y, v.z, 0.0, 0.0, 0.0);
        for k in 0..self.intervals.len() {
            let (sa, sb) = (self.instances[k].sensor, self.instances[k + 1].sensor);
            let (hc_a, hs_a, fixed_a) = &coeffs[k];
            let (hc_b, hs_b, fixed_b) = &coeffs[k + 1];
            h.add(k, 2 * sb, pad(*hc_b));
            h.add(k, 2 * sb + 1, pad(*hs_b));
            h.add(k, 2 * sa, -pad(*hc_a));
            h.add(k, 2 * sa + 1, -pad(*hs_a));
            c.push(pad(fixed_b - fixed_a) + offsets[k]);
        }
        Ok(Subproblem { h, c, weights })
    }
}

/// Splits an elementary rotation about `axis` as
/// `R(θ) = cos θ · D + sin θ · S + E`, returning `(D, S, E)`.
fn axis_split(axis: usize) -> (Mat3, Mat3, Mat3) {
    let mut d = Mat3::identity();
    d[(axis, axis)] = 0.0;
    let mut e = Mat3::zeros();
    e[(axis, axis)] = 1.0;
    let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut s = Mat3::zeros();
    // R_x: (1,2) = -1, (2,1) = 1; R_y: (2,0) = -1, (0,2) = 1; R_z: (0,1) = -1, (1,0) = 1
    s[(i, j)] = -1.0;
    s[(j, i)] = 1.0;
    (d, s, e)
}
