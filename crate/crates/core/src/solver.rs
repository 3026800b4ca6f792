//! Block solvers and the outer coordinate-descent loop.
//!
//! Velocity and range blocks are unconstrained weighted least squares and are
//! solved through a Cholesky factorization of `HᵀQH`. Each angle block is a
//! quadratic over a product of unit circles, handled by a projection ADMM.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::assembly::{AngleKind, BiasSet, Problem, Subproblem, VelocityTrack, WeightMode, WeightSpec};
use crate::error::SolverError;

/// Tolerance on the unit norm of a pair when converting back to an angle.
pub const CIRCLE_TOLERANCE: f64 = 1e-6;

/// A Cholesky factor of a normal matrix, reusable for several right-hand sides.
#[derive(Debug, Clone)]
pub struct NormalFactor {
    chol: Cholesky<f64, Dyn>,
    /// Diagonal jitter that had to be added, zero if none.
    pub jitter: f64,
}

impl NormalFactor {
    /// Factors a symmetric positive-definite matrix. On failure a jitter of
    /// `1e-12·trace` is added to the diagonal once before giving up.
    pub fn new(normal: DMatrix<f64>, block: &str) -> Result<Self, SolverError> {
        let n = normal.nrows();
        if n == 0 {
            return Err(SolverError::RankDeficient {
                block: block.to_string(),
            });
        }
        if let Some(chol) = normal.clone().cholesky() {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let jitter = 1e-12 * normal.trace();
        if !(jitter > 0.0) || !jitter.is_finite() {
            return Err(SolverError::RankDeficient {
                block: block.to_string(),
            });
        }
        let shifted = normal + DMatrix::identity(n, n) * jitter;
        match shifted.cholesky() {
            // a pivot no larger than the jitter itself means the matrix was
            // singular at working precision
            Some(chol) if chol.l_dirty().diagonal().min().powi(2) > 2.0 * jitter => {
                log::warn!("{block} normal matrix needed a diagonal jitter of {jitter:e}");
                Ok(Self { chol, jitter })
            }
            _ => Err(SolverError::RankDeficient {
                block: block.to_string(),
            }),
        }
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Minimizer of `‖H x + c‖²_Q`: `x = -(HᵀQH)⁻¹ HᵀQc`.
pub fn solve_weighted_ls(sub: &Subproblem) -> Result<DVector<f64>, SolverError> {
    let factor = NormalFactor::new(sub.normal_matrix(), "least-squares")?;
    Ok(solve_with_factor(&factor, sub))
}

pub fn solve_with_factor(factor: &NormalFactor, sub: &Subproblem) -> DVector<f64> {
    -factor.solve(&sub.weighted_rhs())
}

/// `(cos θ_1, sin θ_1, …, cos θ_M, sin θ_M)`.
pub fn pairs_from_angles(angles: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        2 * angles.len(),
        angles.iter().flat_map(|a| {
            let (s, c) = a.sin_cos();
            [c, s]
        }),
    )
}

/// Inverse of [`pairs_from_angles`]; every pair must lie on the unit circle.
pub fn angles_from_pairs(x: &DVector<f64>) -> Result<Vec<f64>, SolverError> {
    if x.len() % 2 != 0 {
        return Err(crate::error::GeometryError::OddLength(x.len()).into());
    }
    (0..x.len() / 2)
        .map(|m| {
            let (c, s) = (x[2 * m], x[2 * m + 1]);
            let norm = c.hypot(s);
            if !((norm - 1.0).abs() <= CIRCLE_TOLERANCE) {
                return Err(SolverError::NotOnCircles { pair: m, norm });
            }
            Ok(s.atan2(c))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// Mean of the diagonal of `HᵀQH`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmOptions {
    pub penalty: Penalty,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            penalty: Penalty::Auto,
            tolerance: 1e-9,
            max_iterations: 50_000,
        }
    }
}

/// ADMM iterate: primal `x`, split variable `z ∈ C`, multiplier `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub lambda: DVector<f64>,
    pub penalty: f64,
}

impl AdmmState {
    /// Starts at a feasible point with zero multiplier.
    pub fn at(z: DVector<f64>) -> Self {
        Self {
            x: z.clone(),
            lambda: DVector::zeros(z.len()),
            z,
            penalty: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmOutcome {
    pub state: AdmmState,
    pub iterations: usize,
    /// `‖x - z‖` at the last iteration.
    pub primal: f64,
    /// `ρ‖z⁺ - z‖` divided by the mean diagonal of `HᵀQH`.
    pub dual: f64,
    pub converged: bool,
}

impl AdmmOutcome {
    pub fn solution(&self) -> &DVector<f64> {
        &self.state.z
    }
}

/// Projection ADMM for `min ‖H x + c‖²_Q` subject to every pair of `x` lying
/// on the unit circle.
///
/// The dual residual is measured relative to the mean diagonal of `HᵀQH` so
/// the tolerance does not depend on the units of `H`; with the automatic
/// penalty this is just `‖z⁺ - z‖`.
pub fn admm_qcqp(
    sub: &Subproblem,
    opts: &AdmmOptions,
    warm_start: Option<&AdmmState>,
) -> Result<AdmmOutcome, SolverError> {
    let n = sub.dim();
    if n % 2 != 0 {
        return Err(crate::error::GeometryError::OddLength(n).into());
    }
    let a = sub.normal_matrix();
    let scale = a.trace() / n as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(SolverError::RankDeficient {
            block: "angle".to_string(),
        });
    }
    let rho = match opts.penalty {
        Penalty::Auto => scale,
        Penalty::Fixed(r) if r > 0.0 && r.is_finite() => r,
        Penalty::Fixed(_) => {
            return Err(SolverError::RankDeficient {
                block: "angle (non-positive penalty)".to_string(),
            })
        }
    };
    // x-update in closed form: x = g + P (ρz - λ) with P = (A + ρ/2·I)⁻¹ / 2
    let factor = NormalFactor::new(&a + DMatrix::identity(n, n) * (rho / 2.0), "angle")?;
    let p = factor.inverse() * 0.5;
    let g = -(&p * (2.0 * sub.weighted_rhs()));

    let mut state = match warm_start {
        Some(s) => {
            if s.x.len() != n || s.z.len() != n || s.lambda.len() != n {
                return Err(crate::error::AssemblyError::Dimension(format!(
                    "warm start has length {} for a {n}-dimensional block",
                    s.z.len()
                ))
                .into());
            }
            AdmmState {
                penalty: rho,
                ..s.clone()
            }
        }
        None => {
            // the unconstrained minimizer lies near the circles when the data
            // are nearly consistent; fall back to the shrunk point otherwise
            let x0 = match NormalFactor::new(a.clone(), "angle") {
                Ok(f) => -f.solve(&sub.weighted_rhs()),
                Err(_) => g.clone(),
            };
            let z = project_or_axis(&x0);
            AdmmState {
                x: z.clone(),
                z,
                lambda: DVector::zeros(n),
                penalty: rho,
            }
        }
    };

    let mut w = DVector::zeros(n);
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        w.copy_from(&state.z);
        w *= rho;
        w -= &state.lambda;
        state.x.copy_from(&g);
        state.x.gemv(1.0, &p, &w, 1.0);

        let mut dz2 = 0.0;
        let mut primal2 = 0.0;
        for m in 0..n / 2 {
            let (i, j) = (2 * m, 2 * m + 1);
            let (u, v) = (state.lambda[i] / rho + state.x[i], state.lambda[j] / rho + state.x[j]);
            let r = u.hypot(v);
            if !(r > 0.0) || !r.is_finite() {
                return Err(crate::error::GeometryError::DegeneratePair(m).into());
            }
            let (zu, zv) = (u / r, v / r);
            dz2 += (zu - state.z[i]).powi(2) + (zv - state.z[j]).powi(2);
            state.z[i] = zu;
            state.z[j] = zv;
            let (du, dv) = (state.x[i] - zu, state.x[j] - zv);
            primal2 += du * du + dv * dv;
            state.lambda[i] += rho * du;
            state.lambda[j] += rho * dv;
        }
        dual = rho / scale * dz2.sqrt();
        primal = primal2.sqrt();
        if primal <= opts.tolerance && dual <= opts.tolerance {
            return Ok(AdmmOutcome {
                state,
                iterations: it,
                primal,
                dual,
                converged: true,
            });
        }
    }
    Ok(AdmmOutcome {
        state,
        iterations: opts.max_iterations,
        primal,
        dual,
        converged: false,
    })
}

/// Projects onto the circles, sending zero pairs to `(1, 0)`.
fn project_or_axis(x: &DVector<f64>) -> DVector<f64> {
    let mut out = x.clone();
    for m in 0..x.len() / 2 {
        let r = x[2 * m].hypot(x[2 * m + 1]);
        if r > 0.0 && r.is_finite() {
            out[2 * m] /= r;
            out[2 * m + 1] /= r;
        } else {
            out[2 * m] = 1.0;
            out[2 * m + 1] = 0.0;
        }
    }
    out
}

/// Stationarity residual of the x-update:
/// `‖2HᵀQ(Hx + c) + λ + ρ(x - z)‖`.
pub fn admm_stationarity(sub: &Subproblem, state: &AdmmState) -> f64 {
    (sub.gradient(&state.x) + &state.lambda + (&state.x - &state.z) * state.penalty).norm()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcdOptions {
    pub weight: WeightMode,
    /// Stop when no bias estimate moves by more than this between sweeps.
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub admm: AdmmOptions,
}

impl Default for BcdOptions {
    fn default() -> Self {
        Self {
            weight: WeightMode::Identity,
            tolerance: 1e-5,
            max_sweeps: 1000,
            admm: AdmmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    SweepLimit,
}

/// Block names in update order, matching the columns of
/// [`SolveReport::block_objectives`].
pub const BLOCK_ORDER: [&str; 6] = ["velocity", "range", "elevation", "roll", "pitch", "yaw"];

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub biases: BiasSet,
    pub velocities: VelocityTrack,
    /// Objective at the start (after the initial velocity fit) and after every sweep.
    pub objective_history: Vec<f64>,
    /// Objective after each block update, one row per sweep.
    pub block_objectives: Vec<[f64; 6]>,
    /// ADMM iterations per angle block, one row per sweep.
    pub admm_iterations: Vec<[usize; 4]>,
    /// Largest bias change per sweep.
    pub bias_changes: Vec<f64>,
    pub sweeps: usize,
    pub termination: Termination,
    pub weights: WeightSpec,
}

impl SolveReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_history.last().expect("history is never empty")
    }

    /// Largest relative increase between consecutive recorded objectives,
    /// over both sweep-level and block-level values.
    pub fn max_relative_increase(&self) -> f64 {
        let mut seq = vec![self.objective_history[0]];
        for row in &self.block_objectives {
            seq.extend_from_slice(row);
        }
        seq.windows(2)
            .map(|w| (w[1] - w[0]) / w[0].abs().max(f64::MIN_POSITIVE))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn tag(block: &str, sweep: usize) -> impl Fn(SolverError) -> SolverError + '_ {
    move |source| SolverError::Block {
        block: block.to_string(),
        sweep,
        source: Box::new(source),
    }
}

/// Cyclic block-coordinate descent over velocities, range biases and the four
/// angle kinds. Weights are built once from `init`.
pub fn bcd(problem: &Problem, init: &BiasSet, opts: &BcdOptions) -> Result<SolveReport, SolverError> {
    let weights = problem.build_weights(init, opts.weight)?;
    let mut biases = init.clone();

    let vel_sub = problem.assemble_velocity(&biases, &weights).map_err(|e| tag("velocity", 0)(e.into()))?;
    let vel_factor = NormalFactor::new(vel_sub.normal_matrix(), "velocity").map_err(tag("velocity", 0))?;
    let mut velocities = VelocityTrack::from_dvector(&solve_with_factor(&vel_factor, &vel_sub));
    let mut objective_history = vec![problem.objective(&biases, &velocities, &weights)?];

    let mut warm: [Option<AdmmState>; 4] = Default::default();
    let mut block_objectives = Vec::new();
    let mut admm_iterations = Vec::new();
    let mut bias_changes = Vec::new();
    let mut termination = Termination::SweepLimit;
    let mut sweeps = 0;

    for sweep in 1..=opts.max_sweeps {
        sweeps = sweep;
        let previous = biases.clone();
        let mut objectives = [0.0; 6];
        let mut iterations = [0; 4];

        let sub = problem
            .assemble_velocity(&biases, &weights)
            .map_err(|e| tag("velocity", sweep)(e.into()))?;
        velocities = VelocityTrack::from_dvector(&solve_with_factor(&vel_factor, &sub));
        objectives[0] = problem.objective(&biases, &velocities, &weights)?;

        let sub = problem
            .assemble_range(&biases, &velocities, &weights)
            .map_err(|e| tag("range", sweep)(e.into()))?;
        biases.range = solve_weighted_ls(&sub)
            .map_err(|e| match e {
                SolverError::RankDeficient { .. } => SolverError::RankDeficient {
                    block: "range".to_string(),
                },
                other => other,
            })
            .map_err(tag("range", sweep))?
            .iter()
            .copied()
            .collect();
        objectives[1] = problem.objective(&biases, &velocities, &weights)?;

        for (i, kind) in AngleKind::ALL.into_iter().enumerate() {
            let name = kind.name();
            let sub = problem
                .assemble_angle(kind, &biases, &velocities, &weights)
                .map_err(|e| tag(name, sweep)(e.into()))?;
            let start = warm[i]
                .take()
                .unwrap_or_else(|| AdmmState::at(pairs_from_angles(biases.angles(kind))));
            let outcome = admm_qcqp(&sub, &opts.admm, Some(&start)).map_err(tag(name, sweep))?;
            if !outcome.converged {
                return Err(tag(name, sweep)(SolverError::AdmmNotConverged {
                    iterations: outcome.iterations,
                    primal: outcome.primal,
                    dual: outcome.dual,
                }));
            }
            iterations[i] = outcome.iterations;
            let angles = angles_from_pairs(outcome.solution()).map_err(tag(name, sweep))?;
            biases.set_angles(kind, &angles);
            objectives[2 + i] = problem.objective(&biases, &velocities, &weights)?;
            warm[i] = Some(outcome.state);
        }

        let change = biases.max_abs_diff(&previous);
        log::debug!("sweep {sweep}: objective {:.6e}, max change {change:.3e}", objectives[5]);
        block_objectives.push(objectives);
        admm_iterations.push(iterations);
        bias_changes.push(change);
        objective_history.push(objectives[5]);
        if change < opts.tolerance {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(SolveReport {
        biases,
        velocities,
        objective_history,
        block_objectives,
        admm_iterations,
        bias_changes,
        sweeps,
        termination,
        weights,
    })
}

/// Zero-initialized [`bcd`].
pub fn estimate(problem: &Problem, opts: &BcdOptions) -> Result<SolveReport, SolverError> {
    bcd(problem, &BiasSet::zeros(problem.num_sensors()), opts)
}
