//! Verification instruments: the finite-difference gradient oracle, the
//! numerical volume checker, and the layer-wise learning profiler.
//!
//! The oracle path never touches `backward()`: it re-runs the forward pass
//! and the loss under parameter perturbations, so agreement between the two
//! is meaningful evidence that the hand-derived gradients are right.

use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::model::{Activation, Model};
use crate::optim::{batch_gradients, cross_entropy, sgd_momentum_step, MomentumState};
use crate::params::ParamLocator;
use crate::rng::SeededRng;

/// Central-difference step used by the gradient suite.
pub const FD_STEP: f64 = 1e-6;

/// |a−b| / max(|a|, |b|, 1e-4). The floor keeps finite-difference roundoff
/// (~1e-10 absolute at h = 1e-6) from dominating the ratio when a gradient
/// happens to be near zero; a real sign or factor error at usable gradient
/// magnitudes still lands orders of magnitude above any sane tolerance.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn loss_at(model: &Model, x: &[f64], target: usize) -> Result<f64> {
    cross_entropy(&model.raw_output(x)?, target)
}

/// Central difference (E(p+h) − E(p−h)) / 2h of the full loss with respect
/// to the single scalar parameter `loc` addresses. Frozen parameters
/// (downsizer entries, permutations have no locator at all) are refused.
pub fn finite_diff_gradient(
    model: &Model,
    x: &[f64],
    target: usize,
    loc: &ParamLocator,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let base = model.param_get(loc)?;
    let mut probe = model.clone();
    probe.param_set(loc, base + step)?;
    let up = loss_at(&probe, x, target)?;
    probe.param_set(loc, base - step)?;
    let down = loss_at(&probe, x, target)?;
    Ok((up - down) / (2.0 * step))
}

/// Per-parameter-group error statistics from one grad-check run.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub name: &'static str,
    pub count: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst: Option<ParamLocator>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub samples: usize,
    pub groups: Vec<GroupStats>,
    pub max_rel_error: f64,
    pub worst: Option<ParamLocator>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "group={} params={} max_rel_error={:.3e} mean_rel_error={:.3e}\n",
                g.name, g.count, g.max_rel_error, g.mean_rel_error
            ));
        }
        s.push_str(&format!(
            "{} max_rel_error={:.3e} tol={:.1e} worst={}\n",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tol,
            self.worst
                .as_ref()
                .map_or("-".to_string(), |l| l.to_string()),
        ));
        s
    }
}

fn build_report(rows: &[(ParamLocator, f64, f64)], tol: f64, samples: usize) -> GradCheckReport {
    let mut groups: Vec<GroupStats> = Vec::new();
    let mut overall_max = 0.0f64;
    let mut overall_worst = None;
    for (loc, analytic, numeric) in rows {
        let err = relative_error(*analytic, *numeric);
        let name = loc.group();
        let entry = match groups.iter_mut().find(|g| g.name == name) {
            Some(e) => e,
            None => {
                groups.push(GroupStats {
                    name,
                    count: 0,
                    max_rel_error: 0.0,
                    mean_rel_error: 0.0,
                    worst: None,
                });
                groups.last_mut().unwrap()
            }
        };
        entry.count += 1;
        entry.mean_rel_error += err;
        if err > entry.max_rel_error {
            entry.max_rel_error = err;
            entry.worst = Some(loc.clone());
        }
        if err > overall_max {
            overall_max = err;
            overall_worst = Some(loc.clone());
        }
    }
    for g in &mut groups {
        if g.count > 0 {
            g.mean_rel_error /= g.count as f64;
        }
    }
    GradCheckReport {
        tol,
        samples,
        groups,
        max_rel_error: overall_max,
        worst: overall_worst,
        pass: overall_max < tol,
    }
}

/// Draws inputs whose forward pass keeps a safe margin from the activation
/// guard region, the Chebyshev branch cut on the negative x axis, and ReLU
/// kinks, so central differences stay valid at every perturbed point.
pub fn smooth_input(model: &Model, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let scale = 1.0 / (model.n_in() as f64).sqrt();
    'attempt: for _ in 0..500 {
        let x: Vec<f64> = (0..model.n_in()).map(|_| rng.uniform(0.0, scale)).collect();
        let (cache, _) = model.forward(&x)?;
        for (l, layer) in model.layers().iter().enumerate() {
            let z = cache.pre_activation(l);
            match layer.activation() {
                Activation::Chebyshev(_) => {
                    for pair in z.chunks_exact(2) {
                        let (u, v) = (pair[0], pair[1]);
                        if u.abs() + v.abs() < 1e-3 || (u < 0.0 && v.abs() < 1e-3) {
                            continue 'attempt;
                        }
                    }
                }
                Activation::Relu => {
                    if z.iter().any(|zi| zi.abs() < 1e-4) {
                        continue 'attempt;
                    }
                }
            }
        }
        return Ok(x);
    }
    Err(Error::InvalidConfig(
        "could not find a numerically safe test input for this model".into(),
    ))
}

/// Compares `backward()` against the finite-difference oracle for every
/// trainable scalar over `n_samples` random (input, target) draws.
/// Intended for small widths (n_in ≤ 16): the oracle costs two forward
/// passes per parameter per sample.
pub fn grad_check(model: &Model, n_samples: usize, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(seed);
    let locators = model.param_locators();
    let mut rows = Vec::with_capacity(locators.len() * n_samples);
    for _ in 0..n_samples {
        let x = smooth_input(model, &mut rng)?;
        let target = rng.index(model.n_out());
        let (cache, _) = model.forward(&x)?;
        let grads = model.backward(&cache, target)?;
        for loc in &locators {
            let analytic = grads.get(loc)?;
            let numeric = finite_diff_gradient(model, &x, target, loc, FD_STEP)?;
            rows.push((loc.clone(), analytic, numeric));
        }
    }
    Ok(build_report(&rows, tol, n_samples))
}

/// |det J| of a square map at `point`, with J assembled column-by-column
/// from central differences and the determinant taken by pivoted LU.
pub fn volume_check(
    map: impl Fn(&[f64]) -> Result<Vec<f64>>,
    point: &[f64],
    step: f64,
) -> Result<f64> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "volume-check step must be positive, got {step}"
        )));
    }
    let n = point.len();
    let probe = map(point)?;
    if probe.len() != n {
        return Err(Error::DimensionMismatch {
            what: "volume check map (square required)",
            expected: n,
            got: probe.len(),
        });
    }
    let mut jac = Matrix::zeros(n, n);
    let mut x = point.to_vec();
    for col in 0..n {
        x[col] = point[col] + step;
        let up = map(&x)?;
        x[col] = point[col] - step;
        let down = map(&x)?;
        x[col] = point[col];
        for row in 0..n {
            jac.row_mut(row)[col] = (up[row] - down[row]) / (2.0 * step);
        }
    }
    Ok(math::determinant(&jac)?.abs())
}

/// |det J| of the hidden map x → a⁽ᴸ⁻¹⁾. Errors with `GuardRegion` if any
/// activation pair at `point` sits within 10× the guard epsilon, where the
/// substitution would poison the finite differences.
pub fn model_volume_check(model: &Model, point: &[f64], step: f64) -> Result<f64> {
    let (cache, _) = model.forward(point)?;
    for (l, layer) in model.layers().iter().enumerate() {
        if let Activation::Chebyshev(c) = layer.activation() {
            let z = cache.pre_activation(l);
            for (pair, uv) in z.chunks_exact(2).enumerate() {
                let magnitude = uv[0].abs() + uv[1].abs();
                if magnitude < 10.0 * c.guard_epsilon() {
                    return Err(Error::GuardRegion { pair, magnitude });
                }
            }
        }
    }
    volume_check(|x| model.hidden_forward(x), point, step)
}

/// Mean per-layer ‖δ⁽ˡ⁾‖₂ over the final profiling epoch, the log₁₀ ratios
/// against the last δ-carrying layer, and their least-squares slope. A
/// positive slope means early layers learn less (vanishing gradients).
#[derive(Debug, Clone)]
pub struct LearningProfile {
    pub delta_norms: Vec<f64>,
    pub y_log10: Vec<f64>,
    pub slope: f64,
}

impl LearningProfile {
    /// `layer,delta_norm,y_log10` rows (layers 1-based) plus a trailing
    /// `slope,<m>` record.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "layer,delta_norm,y_log10")?;
        for (i, (norm, y)) in self.delta_norms.iter().zip(&self.y_log10).enumerate() {
            writeln!(w, "{},{},{}", i + 1, norm, y)?;
        }
        writeln!(w, "slope,{}", self.slope)?;
        Ok(())
    }
}

fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xs = 1..=ys.len();
    let x_mean = xs.clone().sum::<usize>() as f64 / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.zip(ys) {
        let dx = x as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    num / den
}

/// Trains `epochs` at a fixed learning rate (momentum 0.9, the §-protocol
/// the accuracy runs also use) and averages each layer's per-sample δ-norm
/// over every batch of the final epoch.
pub fn learning_profile(
    model: &mut Model,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    threads: usize,
) -> Result<LearningProfile> {
    if model.depth() < 3 {
        return Err(Error::InvalidConfig(format!(
            "learning profile needs at least 3 layers, got {}",
            model.depth()
        )));
    }
    if epochs == 0 {
        return Err(Error::InvalidConfig(
            "learning profile needs at least one epoch".into(),
        ));
    }
    let hidden = model.depth() - 1;
    let mut state = MomentumState::new(model, 0.9);
    let mut norm_sums = vec![0.0; hidden];
    let mut window_samples = 0usize;
    for epoch in 0..epochs {
        let final_epoch = epoch + 1 == epochs;
        for batch in data.batches(batch_size, seed, epoch as u64) {
            let (mut grads, _) = batch_gradients(model, data, &batch, threads)?;
            if final_epoch {
                for (sum, n) in norm_sums.iter_mut().zip(grads.delta_norms()) {
                    *sum += n;
                }
                window_samples += batch.len();
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_momentum_step(model, &grads, &mut state, lr)?;
        }
    }
    let delta_norms: Vec<f64> = norm_sums
        .iter()
        .map(|s| s / window_samples as f64)
        .collect();
    let reference = delta_norms[hidden - 1];
    let y_log10 = delta_norms
        .iter()
        .map(|&n| math::log10_ratio(n, reference))
        .collect::<Result<Vec<f64>>>()?;
    let slope = least_squares_slope(&y_log10);
    Ok(LearningProfile {
        delta_norms,
        y_log10,
        slope,
    })
}
