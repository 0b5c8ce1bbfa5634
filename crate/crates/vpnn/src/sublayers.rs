//! Forward and backward passes for every sublayer type: rotation,
//! permutation, diagonal, bias handling, the coupled Chebyshev activation
//! (fixed and trainable contraction factor), standard affine, ReLU, and the
//! fixed downsizer.
//!
//! Backward passes are hand-derived. Where the printed derivative formulas
//! admit more than one sign/indexing convention, the convention implemented
//! here is the one validated by the central-finite-difference oracle in the
//! tests below and in [`crate::diagnostics`].

use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::rng::SeededRng;

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rotation
// ---------------------------------------------------------------------------

/// A direct sum of 2×2 plane rotations: one trainable angle per coordinate
/// pair (x₂ᵢ, x₂ᵢ₊₁). cos/sin caches stay in sync with the angles so a
/// whole batch of forward/backward passes pays for the trig once.
#[derive(Debug, Clone)]
pub struct RotationParams {
    thetas: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotationParams {
    pub fn new(thetas: Vec<f64>) -> Self {
        let cos = thetas.iter().map(|t| t.cos()).collect();
        let sin = thetas.iter().map(|t| t.sin()).collect();
        Self { thetas, cos, sin }
    }

    pub fn pair_count(&self) -> usize {
        self.thetas.len()
    }

    pub fn width(&self) -> usize {
        2 * self.thetas.len()
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub(crate) fn set_theta(&mut self, i: usize, v: f64) {
        self.thetas[i] = v;
        self.cos[i] = v.cos();
        self.sin[i] = v.sin();
    }

    /// thetas += c * g, refreshing the trig caches.
    pub(crate) fn add_scaled(&mut self, g: &[f64], c: f64) {
        for (i, gi) in g.iter().enumerate() {
            self.set_theta(i, self.thetas[i] + c * gi);
        }
    }

    /// (y₂ᵢ, y₂ᵢ₊₁) = R_θᵢ (x₂ᵢ, x₂ᵢ₊₁); an exact isometry up to roundoff.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("rotation input", self.width(), x.len())?;
        let mut y = vec![0.0; x.len()];
        for i in 0..self.pair_count() {
            let (c, s) = (self.cos[i], self.sin[i]);
            let (u, v) = (x[2 * i], x[2 * i + 1]);
            y[2 * i] = c * u - s * v;
            y[2 * i + 1] = s * u + c * v;
        }
        Ok(y)
    }

    /// Returns (dx, dθ): dx = Rᵀ dy blockwise, dθᵢ = dyᵀ (dR_θᵢ/dθ) x on
    /// block i.
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("rotation input", self.width(), x.len())?;
        check_len("rotation upstream gradient", self.width(), dy.len())?;
        let mut dx = vec![0.0; x.len()];
        let mut dthetas = vec![0.0; self.pair_count()];
        for i in 0..self.pair_count() {
            let (c, s) = (self.cos[i], self.sin[i]);
            let (u, v) = (x[2 * i], x[2 * i + 1]);
            let (g1, g2) = (dy[2 * i], dy[2 * i + 1]);
            dx[2 * i] = c * g1 + s * g2;
            dx[2 * i + 1] = -s * g1 + c * g2;
            // dR/dθ = [[-s, -c], [c, -s]]
            dthetas[i] = g1 * (-s * u - c * v) + g2 * (c * u - s * v);
        }
        Ok((dx, dthetas))
    }
}

// ---------------------------------------------------------------------------
// Permutation
// ---------------------------------------------------------------------------

/// A frozen permutation of coordinates: y[map[i]] = x[i]. No trainable
/// parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationSpec {
    map: Vec<usize>,
}

impl PermutationSpec {
    /// Validates that `map` is a bijection on 0..n.
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &m in &map {
            if m >= n || seen[m] {
                return Err(Error::InvalidConfig(format!(
                    "permutation map is not a bijection on 0..{n}"
                )));
            }
            seen[m] = true;
        }
        Ok(Self { map })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
        }
    }

    pub fn random(n: usize, rng: &mut SeededRng) -> Self {
        Self {
            map: rng.permutation(n),
        }
    }

    pub fn width(&self) -> usize {
        self.map.len()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("permutation input", self.width(), x.len())?;
        let mut y = vec![0.0; x.len()];
        for (i, &target) in self.map.iter().enumerate() {
            y[target] = x[i];
        }
        Ok(y)
    }

    /// Applies the inverse permutation: dx[i] = dy[map[i]].
    pub fn backward(&self, dy: &[f64]) -> Result<Vec<f64>> {
        check_len("permutation upstream gradient", self.width(), dy.len())?;
        Ok(self.map.iter().map(|&target| dy[target]).collect())
    }
}

// ---------------------------------------------------------------------------
// Diagonal
// ---------------------------------------------------------------------------

/// Positive diagonal with determinant one: entry j is f(tⱼ)/f(tⱼ₋₁) with
/// wraparound (entry 0 divides by f(tₙ₋₁)) and f(x) = exp(sin x). The ratio
/// and cos caches are refreshed whenever the parameters move.
#[derive(Debug, Clone)]
pub struct DiagonalParams {
    t: Vec<f64>,
    ratios: Vec<f64>,
    cos_t: Vec<f64>,
}

fn diag_f(x: f64) -> f64 {
    x.sin().exp()
}

impl DiagonalParams {
    pub fn new(t: Vec<f64>) -> Self {
        let n = t.len();
        let mut p = Self {
            t,
            ratios: vec![0.0; n],
            cos_t: vec![0.0; n],
        };
        p.refresh();
        p
    }

    fn refresh(&mut self) {
        let n = self.t.len();
        let f: Vec<f64> = self.t.iter().map(|&ti| diag_f(ti)).collect();
        for j in 0..n {
            self.ratios[j] = f[j] / f[(j + n - 1) % n];
            self.cos_t[j] = self.t[j].cos();
        }
    }

    pub fn width(&self) -> usize {
        self.t.len()
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    /// The diagonal entries themselves; their product telescopes to 1.
    pub fn entries(&self) -> &[f64] {
        &self.ratios
    }

    pub fn determinant(&self) -> f64 {
        self.ratios.iter().product()
    }

    pub(crate) fn set_t(&mut self, i: usize, v: f64) {
        self.t[i] = v;
        self.refresh();
    }

    pub(crate) fn add_scaled(&mut self, g: &[f64], c: f64) {
        for (ti, gi) in self.t.iter_mut().zip(g) {
            *ti += c * gi;
        }
        self.refresh();
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("diagonal input", self.width(), x.len())?;
        Ok(x.iter().zip(&self.ratios).map(|(xi, d)| xi * d).collect())
    }

    /// Returns (dx, dt). tⱼ sits in the numerator of entry j and the
    /// denominator of entry j+1 (mod n), giving the two-term derivative
    ///   dtⱼ = cos(tⱼ)·(dyⱼ·xⱼ·Dⱼⱼ − dyⱼ₊₁·xⱼ₊₁·Dⱼ₊₁ⱼ₊₁)
    /// where f'(t) = cos(t)·f(t) has been folded into the cached ratios.
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("diagonal input", self.width(), x.len())?;
        check_len("diagonal upstream gradient", self.width(), dy.len())?;
        let n = self.width();
        let dx: Vec<f64> = dy.iter().zip(&self.ratios).map(|(g, d)| g * d).collect();
        let mut dt = vec![0.0; n];
        for j in 0..n {
            let j1 = (j + 1) % n;
            dt[j] = self.cos_t[j]
                * (dy[j] * x[j] * self.ratios[j] - dy[j1] * x[j1] * self.ratios[j1]);
        }
        Ok((dx, dt))
    }
}

// ---------------------------------------------------------------------------
// Coupled Chebyshev activation
// ---------------------------------------------------------------------------

pub const DEFAULT_GUARD_EPSILON: f64 = 1e-7;

/// Contraction factor layout: one shared fixed M, or one trainable Mᵢ per
/// coordinate pair.
#[derive(Debug, Clone)]
pub enum ChebMode {
    Fixed(f64),
    Trainable(Vec<f64>),
}

/// The coupled Chebyshev map C_M(r, θ) = (r/√M, Mθ) applied pairwise in
/// Cartesian coordinates. Any input pair with |u|+|v| below the guard is
/// replaced by (guard, 0) before the polar decomposition; the backward pass
/// differentiates at the substituted point so the two stay consistent.
#[derive(Debug, Clone)]
pub struct ChebyshevConfig {
    mode: ChebMode,
    guard_epsilon: f64,
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// θ = sgn(v)·arccos(u/r), the polar angle in (−π, π].
fn polar_angle(u: f64, v: f64) -> f64 {
    let r = (u * u + v * v).sqrt();
    sgn(v) * (u / r).clamp(-1.0, 1.0).acos()
}

impl ChebyshevConfig {
    pub fn fixed(m: f64) -> Result<Self> {
        if m <= 0.0 || !m.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "Chebyshev parameter must be positive, got {m}"
            )));
        }
        Ok(Self {
            mode: ChebMode::Fixed(m),
            guard_epsilon: DEFAULT_GUARD_EPSILON,
        })
    }

    pub fn trainable(ms: Vec<f64>) -> Result<Self> {
        if ms.iter().any(|&m| m <= 0.0 || !m.is_finite()) {
            return Err(Error::InvalidConfig(
                "all trainable Chebyshev parameters must be positive".into(),
            ));
        }
        Ok(Self {
            mode: ChebMode::Trainable(ms),
            guard_epsilon: DEFAULT_GUARD_EPSILON,
        })
    }

    pub fn with_guard(mut self, eps: f64) -> Result<Self> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "guard epsilon must be positive, got {eps}"
            )));
        }
        self.guard_epsilon = eps;
        Ok(self)
    }

    pub fn guard_epsilon(&self) -> f64 {
        self.guard_epsilon
    }

    pub fn mode(&self) -> &ChebMode {
        &self.mode
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.mode, ChebMode::Trainable(_))
    }

    pub fn m_for_pair(&self, i: usize) -> f64 {
        match &self.mode {
            ChebMode::Fixed(m) => *m,
            ChebMode::Trainable(ms) => ms[i],
        }
    }

    pub(crate) fn ms_mut(&mut self) -> Option<&mut Vec<f64>> {
        match &mut self.mode {
            ChebMode::Fixed(_) => None,
            ChebMode::Trainable(ms) => Some(ms),
        }
    }

    fn check_width(&self, what: &'static str, len: usize) -> Result<()> {
        if !len.is_multiple_of(2) {
            return Err(Error::DimensionMismatch {
                what,
                expected: len + 1,
                got: len,
            });
        }
        if let ChebMode::Trainable(ms) = &self.mode {
            check_len(what, 2 * ms.len(), len)?;
        }
        Ok(())
    }

    fn guarded(&self, u: f64, v: f64) -> (f64, f64) {
        if u.abs() + v.abs() < self.guard_epsilon {
            (self.guard_epsilon, 0.0)
        } else {
            (u, v)
        }
    }

    /// Maps each pair to C_M(u, v); the pair norm scales by exactly 1/√M.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_width("chebyshev input", x.len())?;
        let mut y = vec![0.0; x.len()];
        for i in 0..x.len() / 2 {
            let (u, v) = self.guarded(x[2 * i], x[2 * i + 1]);
            let m = self.m_for_pair(i);
            let r = (u * u + v * v).sqrt();
            let theta = polar_angle(u, v);
            let scale = r / m.sqrt();
            y[2 * i] = scale * (m * theta).cos();
            y[2 * i + 1] = scale * (m * theta).sin();
        }
        Ok(y)
    }

    /// Returns (dx, dM). The four partials are expressed through the
    /// already-computed output pair (c₁, c₂):
    ///   ∂C₁/∂x = (x·c₁ + M·y·c₂)/r²    ∂C₂/∂x = (−M·y·c₁ + x·c₂)/r²
    ///   ∂C₁/∂y = (y·c₁ − M·x·c₂)/r²    ∂C₂/∂y = (M·x·c₁ + y·c₂)/r²
    /// and in trainable mode dC/dM = [[−1/2M, −θ], [θ, −1/2M]]·(c₁, c₂).
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.check_width("chebyshev input", x.len())?;
        check_len("chebyshev upstream gradient", x.len(), dy.len())?;
        let pairs = x.len() / 2;
        let mut dx = vec![0.0; x.len()];
        let mut dm = if self.is_trainable() {
            Some(vec![0.0; pairs])
        } else {
            None
        };
        for i in 0..pairs {
            let (u, v) = self.guarded(x[2 * i], x[2 * i + 1]);
            let m = self.m_for_pair(i);
            let r2 = u * u + v * v;
            let r = r2.sqrt();
            let theta = polar_angle(u, v);
            let scale = r / m.sqrt();
            let c1 = scale * (m * theta).cos();
            let c2 = scale * (m * theta).sin();

            let d11 = (u * c1 + m * v * c2) / r2;
            let d21 = (-m * v * c1 + u * c2) / r2;
            let d12 = (v * c1 - m * u * c2) / r2;
            let d22 = (m * u * c1 + v * c2) / r2;

            let (g1, g2) = (dy[2 * i], dy[2 * i + 1]);
            dx[2 * i] = g1 * d11 + g2 * d21;
            dx[2 * i + 1] = g1 * d12 + g2 * d22;

            if let Some(dm) = dm.as_mut() {
                dm[i] = g1 * (-c1 / (2.0 * m) - theta * c2) + g2 * (theta * c1 - c2 / (2.0 * m));
            }
        }
        Ok((dx, dm))
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(x: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
    check_len("relu upstream gradient", x.len(), dy.len())?;
    Ok(x.iter()
        .zip(dy)
        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
        .collect())
}

// ---------------------------------------------------------------------------
// Standard affine (baselines)
// ---------------------------------------------------------------------------

/// Width-preserving dense affine map x → Wx + b for the baseline models.
#[derive(Debug, Clone)]
pub struct AffineParams {
    weight: Matrix,
    bias: Vec<f64>,
}

impl AffineParams {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != weight.cols() {
            return Err(Error::InvalidConfig(format!(
                "affine weight must be square, got {}x{}",
                weight.rows(),
                weight.cols()
            )));
        }
        check_len("affine bias", weight.rows(), bias.len())?;
        Ok(Self { weight, bias })
    }

    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub(crate) fn bias_mut(&mut self) -> &mut Vec<f64> {
        &mut self.bias
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        Ok(y)
    }

    /// Pure gradients: dx = Wᵀdy, dW = dy xᵀ, db = dy.
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let n = self.width();
        let mut dw = vec![0.0; n * n];
        let mut db = vec![0.0; n];
        let dx = self.backward_accumulate(x, dy, &mut dw, &mut db)?;
        Ok((dx, dw, db))
    }

    /// Accumulating form used by the trainer: adds this sample's dW/db into
    /// the running batch sums instead of allocating fresh buffers.
    pub(crate) fn backward_accumulate(
        &self,
        x: &[f64],
        dy: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Result<Vec<f64>> {
        let n = self.width();
        check_len("affine input", n, x.len())?;
        check_len("affine upstream gradient", n, dy.len())?;
        check_len("affine weight gradient buffer", n * n, dw.len())?;
        check_len("affine bias gradient buffer", n, db.len())?;
        let mut dx = vec![0.0; n];
        for (r, &g) in dy.iter().enumerate() {
            math::axpy(g, self.weight.row(r), &mut dx);
            math::axpy(g, x, &mut dw[r * n..(r + 1) * n]);
            db[r] += g;
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Downsizer
// ---------------------------------------------------------------------------

/// The frozen output map x → Zx with Z Zᵀ = I. Z never receives gradients.
#[derive(Debug, Clone)]
pub struct Downsizer {
    z: Matrix,
}

impl Downsizer {
    /// Wraps an existing matrix, verifying row orthonormality.
    pub fn from_matrix(z: Matrix) -> Result<Self> {
        let g = z.gram();
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (g.row(i)[j] - target).abs() > 1e-8 {
                    return Err(Error::InvalidConfig(
                        "downsizer rows are not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(Self { z })
    }

    /// Row-orthonormalization of a seeded random U(−1,1) matrix: dense
    /// entries of roughly equal magnitude with Z Zᵀ = I.
    pub fn random(n_out: usize, n_in: usize, rng: &mut SeededRng) -> Result<Self> {
        let a = Matrix::from_fn(n_out, n_in, |_, _| rng.uniform(-1.0, 1.0));
        Ok(Self {
            z: math::row_orthonormalize(&a)?,
        })
    }

    pub fn n_out(&self) -> usize {
        self.z.rows()
    }

    pub fn n_in(&self) -> usize {
        self.z.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.z
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.z.matvec(x)
    }

    pub fn backward(&self, dy: &[f64]) -> Result<Vec<f64>> {
        self.z.tr_matvec(dy)
    }
}
