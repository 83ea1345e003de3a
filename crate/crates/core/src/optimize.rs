//! Box-constrained sparse design optimization:
//! `min_{w ∈ [0,1]^{n_s}} −J(w) + γ P(w)`.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::oed::{DesignCriterion, Evaluation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// `P(w) = Σ w_i`.
    L1,
    /// `P_ε(w) = Σ w_i / (w_i + ε)`.
    Smoothed { eps: f64 },
}

impl Penalty {
    pub fn value(&self, w: &[f64]) -> f64 {
        match *self {
            Penalty::L1 => w.iter().sum(),
            Penalty::Smoothed { eps } => w.iter().map(|&x| x / (x + eps)).sum(),
        }
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        match *self {
            Penalty::L1 => vec![1.0; w.len()],
            Penalty::Smoothed { eps } => w.iter().map(|&x| eps / ((x + eps) * (x + eps))).collect(),
        }
    }
}

/// `ε_i = 2^{-i}`, `i = 1..=stages`.
pub fn default_schedule(stages: usize) -> Vec<f64> {
    (1..=stages).map(|i| 0.5f64.powi(i as i32)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerOptions {
    /// Stop when the projected gradient's ∞-norm falls to this level.
    pub tol: f64,
    pub max_iters: usize,
    /// Stored secant pairs.
    pub memory: usize,
    /// Relative weight for a sensor to count as active.
    pub threshold: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_iters: 200,
            memory: 10,
            threshold: 3e-2,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// Penalized objective `−J + γP`.
    pub objective: f64,
    pub criterion: f64,
    /// ∞-norm of the projected gradient.
    pub grad_norm: f64,
    /// Seconds since the solve started.
    pub wall_time: f64,
    /// Cumulative forward plus adjoint PDE solves.
    pub pde_solves: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub eps: f64,
    pub iterations: usize,
    pub objective: f64,
    /// `max_i min(w_i, 1 − w_i)`.
    pub distance_to_binary: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignResult {
    pub w_opt: Vec<f64>,
    pub binary: Vec<bool>,
    pub history: Vec<IterationRecord>,
    pub stages: Vec<StageRecord>,
    pub converged: bool,
    /// For continuation: every weight ended within the rounding band.
    pub binary_reached: bool,
}

impl DesignResult {
    pub fn active_count(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }
}

pub fn distance_to_binary(w: &[f64]) -> f64 {
    w.iter().map(|&x| x.min(1.0 - x)).fold(0.0, f64::max)
}

/// Sensor `i` is active when `w_i / Σ w ≥ tau_rel`.
pub fn threshold(w: &[f64], tau_rel: f64) -> Vec<bool> {
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        log::warn!("all design weights are zero; the thresholded design is empty");
        return vec![false; w.len()];
    }
    w.iter().map(|&x| x / total >= tau_rel).collect()
}

struct Point {
    w: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    criterion: f64,
}

fn project(w: &mut [f64]) {
    w.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
}

fn projected_gradient_norm(w: &[f64], g: &[f64]) -> f64 {
    w.iter()
        .zip(g)
        .map(|(&x, &gi)| ((x - gi).clamp(0.0, 1.0) - x).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Solver<'a> {
    criterion: &'a dyn DesignCriterion,
    penalty: Penalty,
    gamma: f64,
    opts: OptimizerOptions,
    start: Instant,
    solves: u64,
}

struct RunOutcome {
    point: Point,
    history: Vec<IterationRecord>,
    converged: bool,
}

impl Solver<'_> {
    fn eval(&mut self, w: Vec<f64>) -> Result<Point> {
        let Evaluation {
            objective,
            gradient,
            solves,
            ..
        } = self.criterion.evaluate(&w)?;
        self.solves += solves.forward + solves.adjoint;
        let pg = self.penalty.gradient(&w);
        let g = gradient.iter().zip(&pg).map(|(dj, p)| -dj + self.gamma * p).collect();
        Ok(Point {
            f: -objective + self.gamma * self.penalty.value(&w),
            criterion: objective,
            g,
            w,
        })
    }

    fn record(&self, iter: usize, p: &Point) -> IterationRecord {
        IterationRecord {
            iter,
            objective: p.f,
            criterion: p.criterion,
            grad_norm: projected_gradient_norm(&p.w, &p.g),
            wall_time: self.start.elapsed().as_secs_f64(),
            pde_solves: self.solves,
        }
    }

    /// `−H g` on the free variables from the stored secant pairs.
    fn direction(&self, p: &Point, pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
        let free: Vec<bool> = p
            .w
            .iter()
            .zip(&p.g)
            .map(|(&x, &gi)| !((x <= 0.0 && gi > 0.0) || (x >= 1.0 && gi < 0.0)))
            .collect();
        let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(&free).map(|(&a, &f)| if f { a } else { 0.0 }).collect() };
        let mut q = mask(&p.g);
        if pairs.is_empty() {
            let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            return q.iter().map(|v| -v / scale).collect();
        }
        let masked: Vec<(Vec<f64>, Vec<f64>, f64)> = pairs
            .iter()
            .filter_map(|(s, y)| {
                let (s, y) = (mask(s), mask(y));
                let sy = dot(&s, &y);
                (sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0).then_some((s, y, 1.0 / sy))
            })
            .collect();
        let mut alphas = Vec::with_capacity(masked.len());
        for (s, y, rho) in masked.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let h0 = masked
            .last()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or(1.0);
        q.iter_mut().for_each(|v| *v *= h0);
        for ((s, y, rho), a) in masked.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        mask(&q).iter().map(|v| -v).collect()
    }

    fn run(&mut self, w0: Vec<f64>) -> Result<RunOutcome> {
        let mut w0 = w0;
        project(&mut w0);
        let mut point = self.eval(w0)?;
        let mut history = vec![self.record(0, &point)];
        let mut recent = vec![point.f];
        let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let window = self.criterion.line_search_window().max(1);
        for iter in 1..=self.opts.max_iters {
            if projected_gradient_norm(&point.w, &point.g) <= self.opts.tol {
                return Ok(RunOutcome {
                    point,
                    history,
                    converged: true,
                });
            }
            let f_ref = recent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut accepted = None;
            for attempt in 0..2 {
                let mut d = self.direction(&point, if attempt == 0 { &pairs } else { &[] });
                if dot(&d, &point.g) >= 0.0 {
                    d = self.direction(&point, &[]);
                }
                let mut t = 1.0;
                for _ in 0..self.opts.max_backtracks {
                    let mut trial: Vec<f64> = point.w.iter().zip(&d).map(|(x, di)| x + t * di).collect();
                    project(&mut trial);
                    let step: Vec<f64> = trial.iter().zip(&point.w).map(|(a, b)| a - b).collect();
                    if step.iter().all(|&s| s == 0.0) {
                        break;
                    }
                    let candidate = self.eval(trial)?;
                    if candidate.f <= f_ref + self.opts.armijo * dot(&point.g, &step) {
                        accepted = Some(candidate);
                        break;
                    }
                    t *= 0.5;
                }
                if accepted.is_some() || pairs.is_empty() {
                    break;
                }
                pairs.clear();
            }
            let Some(next) = accepted else {
                log::warn!("line search failed at iteration {iter}; stopping");
                return Ok(RunOutcome {
                    point,
                    history,
                    converged: false,
                });
            };
            let s: Vec<f64> = next.w.iter().zip(&point.w).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = next.g.iter().zip(&point.g).map(|(a, b)| a - b).collect();
            if dot(&s, &y) > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                pairs.push((s, y));
                if pairs.len() > self.opts.memory {
                    pairs.remove(0);
                }
            }
            point = next;
            history.push(self.record(iter, &point));
            recent.push(point.f);
            if recent.len() > window {
                recent.remove(0);
            }
        }
        let converged = projected_gradient_norm(&point.w, &point.g) <= self.opts.tol;
        Ok(RunOutcome {
            point,
            history,
            converged,
        })
    }
}

fn check_start(criterion: &dyn DesignCriterion, gamma: f64, w0: &[f64]) -> Result<()> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("penalty parameter must be >= 0, got {gamma}")));
    }
    if w0.len() != criterion.n_sensors() {
        return Err(Error::Dimension {
            expected: criterion.n_sensors(),
            got: w0.len(),
        });
    }
    if w0.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("starting weights must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Minimizes `−J(w) + γ P(w)` for a single penalty.
pub fn minimize(
    criterion: &dyn DesignCriterion,
    penalty: Penalty,
    gamma: f64,
    w0: &[f64],
    opts: &OptimizerOptions,
) -> Result<DesignResult> {
    check_start(criterion, gamma, w0)?;
    let mut solver = Solver {
        criterion,
        penalty,
        gamma,
        opts: *opts,
        start: Instant::now(),
        solves: 0,
    };
    let out = solver.run(w0.to_vec())?;
    Ok(DesignResult {
        binary: threshold(&out.point.w, opts.threshold),
        binary_reached: distance_to_binary(&out.point.w) <= 1e-2,
        w_opt: out.point.w,
        history: out.history,
        stages: Vec::new(),
        converged: out.converged,
    })
}

/// ℓ1-penalized design followed by relative thresholding.
pub fn solve_l1(criterion: &dyn DesignCriterion, gamma: f64, w0: &[f64], opts: &OptimizerOptions) -> Result<DesignResult> {
    minimize(criterion, Penalty::L1, gamma, w0, opts)
}

/// Warm-started sequence of smoothed-ℓ0 problems, one per `ε` in the
/// schedule. Weights within `1e-2` of a bound are rounded at the end.
pub fn solve_continuation(
    criterion: &dyn DesignCriterion,
    gamma: f64,
    schedule: &[f64],
    w0: &[f64],
    opts: &OptimizerOptions,
) -> Result<DesignResult> {
    check_start(criterion, gamma, w0)?;
    if schedule.is_empty() {
        return Err(Error::InvalidArgument("continuation schedule is empty".into()));
    }
    if schedule.iter().any(|&e| !(e > 0.0)) || schedule.windows(2).any(|p| p[1] >= p[0]) {
        return Err(Error::InvalidArgument(
            "continuation schedule must be positive and strictly decreasing".into(),
        ));
    }
    let start = Instant::now();
    let mut w = w0.to_vec();
    let mut history = Vec::new();
    let mut stages = Vec::new();
    let mut solves = 0;
    let mut converged = true;
    for &eps in schedule {
        let mut solver = Solver {
            criterion,
            penalty: Penalty::Smoothed { eps },
            gamma,
            opts: *opts,
            start,
            solves,
        };
        let out = solver.run(w)?;
        solves = solver.solves;
        let offset = history.len();
        history.extend(out.history.into_iter().map(|mut r| {
            r.iter += offset;
            r
        }));
        stages.push(StageRecord {
            eps,
            iterations: history.len() - offset - 1,
            objective: out.point.f,
            distance_to_binary: distance_to_binary(&out.point.w),
            converged: out.converged,
        });
        converged &= out.converged;
        w = out.point.w;
    }
    let binary_reached = distance_to_binary(&w) <= 1e-2;
    if !binary_reached {
        log::warn!(
            "continuation ended {:.3e} away from a binary design",
            distance_to_binary(&w)
        );
    }
    for x in w.iter_mut() {
        if *x <= 1e-2 {
            *x = 0.0;
        } else if *x >= 1.0 - 1e-2 {
            *x = 1.0;
        }
    }
    Ok(DesignResult {
        binary: w.iter().map(|&x| x >= 0.5).collect(),
        w_opt: w,
        history,
        stages,
        converged,
        binary_reached,
    })
}
