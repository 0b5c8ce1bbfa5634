//! Model assembly, forward evaluation, and the backward pass for all six
//! network variants.
//!
//! A model is L−1 width-preserving layers followed by a frozen downsizer.
//! Volume-preserving layers factor the linear part as
//! (∏ RⱼQⱼ) · D · (∏ RⱼQⱼ) with k/2 rotation/permutation factors on each
//! side of the diagonal; baselines use a dense affine map instead. The
//! backward pass recomputes the cheap intra-layer intermediates from the
//! cached layer inputs rather than storing every sublayer output.

use crate::error::{Error, Result};
use crate::math::{self, softmax};
use crate::params::{GradientSet, LayerGrads, StandardLayerGrads, VolumeLayerGrads};
use crate::rng::SeededRng;
use crate::sublayers::{
    AffineParams, ChebyshevConfig, DiagonalParams, Downsizer, PermutationSpec, RotationParams,
    DEFAULT_GUARD_EPSILON,
};
use crate::sublayers::{relu_backward, relu_forward};
use std::f64::consts::PI;

/// The six model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Vpnn,
    Vpnn13,
    Vpnnt,
    SRelu,
    Mixed1,
    Mixed2,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Vpnn,
        Variant::Vpnn13,
        Variant::Vpnnt,
        Variant::SRelu,
        Variant::Mixed1,
        Variant::Mixed2,
    ];

    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "vpnn" => Some(Variant::Vpnn),
            "vpnn1.3" | "vpnn13" => Some(Variant::Vpnn13),
            "vpnnt" => Some(Variant::Vpnnt),
            "s-relu" | "srelu" => Some(Variant::SRelu),
            "mixed1" => Some(Variant::Mixed1),
            "mixed2" => Some(Variant::Mixed2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vpnn => "vpnn",
            Variant::Vpnn13 => "vpnn1.3",
            Variant::Vpnnt => "vpnnt",
            Variant::SRelu => "s-relu",
            Variant::Mixed1 => "mixed1",
            Variant::Mixed2 => "mixed2",
        }
    }

    /// Whether hidden layers use the rotation/permutation/diagonal factoring.
    pub fn uses_volume_layers(self) -> bool {
        matches!(
            self,
            Variant::Vpnn | Variant::Vpnn13 | Variant::Vpnnt | Variant::Mixed2
        )
    }

    /// Whether the whole hidden map is volume preserving (Mixed2's ReLU and
    /// the dense baselines are not).
    pub fn is_volume_preserving(self) -> bool {
        matches!(self, Variant::Vpnn | Variant::Vpnn13 | Variant::Vpnnt)
    }

    /// Default Chebyshev contraction factor, where the variant has one.
    pub fn default_cheb_m(self) -> Option<f64> {
        match self {
            Variant::Vpnn => Some(2.0),
            Variant::Vpnn13 | Variant::Vpnnt | Variant::Mixed1 => Some(1.3),
            Variant::SRelu | Variant::Mixed2 => None,
        }
    }

    /// Trainable parameters in one hidden layer of width `n_in` with `k`
    /// rotation/permutation factors.
    pub fn params_per_layer(self, n_in: usize, k: usize) -> usize {
        match self {
            Variant::Vpnn | Variant::Vpnn13 | Variant::Mixed2 => k * n_in / 2 + 2 * n_in,
            Variant::Vpnnt => k * n_in / 2 + 2 * n_in + n_in / 2,
            Variant::SRelu | Variant::Mixed1 => n_in * n_in + n_in,
        }
    }

    pub(crate) fn tag(self) -> u32 {
        match self {
            Variant::Vpnn => 0,
            Variant::Vpnn13 => 1,
            Variant::Vpnnt => 2,
            Variant::SRelu => 3,
            Variant::Mixed1 => 4,
            Variant::Mixed2 => 5,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

/// Smallest p with 2^p ≥ n.
pub fn ceil_log2(n: usize) -> usize {
    let mut p = 0;
    while (1usize << p) < n {
        p += 1;
    }
    p
}

/// Default factor count per layer: k = 2⌈log₂ n_in⌉.
pub fn default_k(n_in: usize) -> usize {
    2 * ceil_log2(n_in)
}

/// Pairwise activation at the end of a layer.
#[derive(Debug, Clone)]
pub enum Activation {
    Chebyshev(ChebyshevConfig),
    Relu,
}

impl Activation {
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Activation::Chebyshev(c) => c.forward(z),
            Activation::Relu => Ok(relu_forward(z)),
        }
    }

    /// Returns (dE/dz, per-pair dE/dM for trainable Chebyshev).
    pub fn backward(&self, z: &[f64], dy: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        match self {
            Activation::Chebyshev(c) => c.backward(z, dy),
            Activation::Relu => Ok((relu_backward(z, dy)?, None)),
        }
    }

    pub fn chebyshev(&self) -> Option<&ChebyshevConfig> {
        match self {
            Activation::Chebyshev(c) => Some(c),
            Activation::Relu => None,
        }
    }
}

/// One R·Q factor of the volume-preserving linear part: the permutation is
/// applied first, then the rotation.
#[derive(Debug, Clone)]
pub struct RotationPermutation {
    pub(crate) permutation: PermutationSpec,
    pub(crate) rotation: RotationParams,
}

impl RotationPermutation {
    pub fn new(permutation: PermutationSpec, rotation: RotationParams) -> Result<Self> {
        if permutation.width() != rotation.width() {
            return Err(Error::DimensionMismatch {
                what: "rotation/permutation factor widths",
                expected: permutation.width(),
                got: rotation.width(),
            });
        }
        Ok(Self {
            permutation,
            rotation,
        })
    }

    pub fn permutation(&self) -> &PermutationSpec {
        &self.permutation
    }

    pub fn rotation(&self) -> &RotationParams {
        &self.rotation
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.rotation.forward(&self.permutation.forward(x)?)
    }
}

/// One volume-preserving layer: x → A((∏RQ) D (∏RQ) x + b).
#[derive(Debug, Clone)]
pub struct VolumeLayer {
    /// Factors applied after the diagonal (the left side of the matrix product).
    pub(crate) left: Vec<RotationPermutation>,
    pub(crate) diag: DiagonalParams,
    /// Factors applied first (the right side of the matrix product).
    pub(crate) right: Vec<RotationPermutation>,
    pub(crate) bias: Vec<f64>,
    pub(crate) activation: Activation,
}

impl VolumeLayer {
    pub fn width(&self) -> usize {
        self.diag.width()
    }

    pub fn left(&self) -> &[RotationPermutation] {
        &self.left
    }

    pub fn right(&self) -> &[RotationPermutation] {
        &self.right
    }

    pub fn diagonal(&self) -> &DiagonalParams {
        &self.diag
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    /// The linear part V x (no bias, no activation).
    pub fn linear_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut v = x.to_vec();
        for rp in &self.right {
            v = rp.forward(&v)?;
        }
        v = self.diag.forward(&v)?;
        for rp in &self.left {
            v = rp.forward(&v)?;
        }
        Ok(v)
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut z = self.linear_forward(x)?;
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        let a = self.activation.forward(&z)?;
        Ok((z, a))
    }

    fn backward_accumulate(
        &self,
        a_prev: &[f64],
        z: &[f64],
        d_out: &[f64],
        grads: &mut VolumeLayerGrads,
    ) -> Result<(f64, Vec<f64>)> {
        let (delta, dm) = self.activation.backward(z, d_out)?;
        if let (Some(dm), Some(gm)) = (dm.as_ref(), grads.cheb.as_mut()) {
            math::axpy(1.0, dm, gm);
        }
        let delta_norm = math::l2_norm(&delta);
        math::axpy(1.0, &delta, &mut grads.bias);

        // Replay the linear chain to recover each rotation's input and the
        // diagonal's input; these are O(k·n) and not kept in the cache.
        let mut right_inputs = Vec::with_capacity(self.right.len());
        let mut v = a_prev.to_vec();
        for rp in &self.right {
            let permuted = rp.permutation.forward(&v)?;
            v = rp.rotation.forward(&permuted)?;
            right_inputs.push(permuted);
        }
        let diag_input = v.clone();
        v = self.diag.forward(&v)?;
        let mut left_inputs = Vec::with_capacity(self.left.len());
        for rp in &self.left {
            let permuted = rp.permutation.forward(&v)?;
            v = rp.rotation.forward(&permuted)?;
            left_inputs.push(permuted);
        }

        let mut g = delta;
        for (i, rp) in self.left.iter().enumerate().rev() {
            let (dx, dthetas) = rp.rotation.backward(&left_inputs[i], &g)?;
            math::axpy(1.0, &dthetas, &mut grads.left[i]);
            g = rp.permutation.backward(&dx)?;
        }
        let (dx, dt) = self.diag.backward(&diag_input, &g)?;
        math::axpy(1.0, &dt, &mut grads.diag);
        g = dx;
        for (i, rp) in self.right.iter().enumerate().rev() {
            let (dx, dthetas) = rp.rotation.backward(&right_inputs[i], &g)?;
            math::axpy(1.0, &dthetas, &mut grads.right[i]);
            g = rp.permutation.backward(&dx)?;
        }
        Ok((delta_norm, g))
    }
}

/// One dense baseline layer: x → A(Wx + b).
#[derive(Debug, Clone)]
pub struct StandardLayer {
    pub(crate) affine: AffineParams,
    pub(crate) activation: Activation,
}

impl StandardLayer {
    pub fn width(&self) -> usize {
        self.affine.width()
    }

    pub fn affine(&self) -> &AffineParams {
        &self.affine
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let z = self.affine.forward(x)?;
        let a = self.activation.forward(&z)?;
        Ok((z, a))
    }

    fn backward_accumulate(
        &self,
        a_prev: &[f64],
        z: &[f64],
        d_out: &[f64],
        grads: &mut StandardLayerGrads,
    ) -> Result<(f64, Vec<f64>)> {
        let (delta, dm) = self.activation.backward(z, d_out)?;
        if let (Some(dm), Some(gm)) = (dm.as_ref(), grads.cheb.as_mut()) {
            math::axpy(1.0, dm, gm);
        }
        let delta_norm = math::l2_norm(&delta);
        let dx = self
            .affine
            .backward_accumulate(a_prev, &delta, &mut grads.weight, &mut grads.bias)?;
        Ok((delta_norm, dx))
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Volume(VolumeLayer),
    Standard(StandardLayer),
}

impl Layer {
    pub fn width(&self) -> usize {
        match self {
            Layer::Volume(v) => v.width(),
            Layer::Standard(s) => s.width(),
        }
    }

    pub fn activation(&self) -> &Activation {
        match self {
            Layer::Volume(v) => v.activation(),
            Layer::Standard(s) => s.activation(),
        }
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Layer::Volume(v) => v.forward(x),
            Layer::Standard(s) => s.forward(x),
        }
    }
}

/// Per-layer pre-activations and activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) input: Vec<f64>,
    pub(crate) pre: Vec<Vec<f64>>,
    pub(crate) act: Vec<Vec<f64>>,
    pub(crate) output: Vec<f64>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    /// z⁽ˡ⁾ for l in 0..L−1.
    pub fn pre_activation(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }

    /// a⁽ˡ⁾ for l in 0..L−1.
    pub fn activation(&self, l: usize) -> &[f64] {
        &self.act[l]
    }

    /// The raw network output Z a⁽ᴸ⁻¹⁾.
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Build-time configuration; `build` draws every random structure from the
/// seed in a fixed documented order (per layer: each right factor's
/// permutation then its angles, diagonal, each left factor, then the
/// downsizer) so a seed pins the model bit-exactly.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_in: usize,
    pub n_out: usize,
    /// Total layer count L, including the downsizer layer.
    pub layers: usize,
    pub seed: u64,
    pub k: Option<usize>,
    pub cheb_m: Option<f64>,
    pub guard_epsilon: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant, n_in: usize, n_out: usize, layers: usize, seed: u64) -> Self {
        Self {
            variant,
            n_in,
            n_out,
            layers,
            seed,
            k: None,
            cheb_m: None,
            guard_epsilon: DEFAULT_GUARD_EPSILON,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_cheb_m(mut self, m: f64) -> Self {
        self.cheb_m = Some(m);
        self
    }

    pub fn build(&self) -> Result<Model> {
        if self.n_in == 0 || !self.n_in.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "n_in must be even and positive (pad odd inputs with a zero), got {}",
                self.n_in
            )));
        }
        if self.layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 layers (one hidden + downsizer), got {}",
                self.layers
            )));
        }
        if self.n_out == 0 || self.n_out > self.n_in {
            return Err(Error::InvalidConfig(format!(
                "n_out must be in 1..=n_in, got {}",
                self.n_out
            )));
        }
        let k = self.k.unwrap_or_else(|| default_k(self.n_in));
        if k < 2 || !k.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "k must be even and at least 2 (k/2 factors sit on each side), got {k}"
            )));
        }
        if let Some(m) = self.cheb_m {
            if m <= 0.0 || !m.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "Chebyshev parameter must be positive, got {m}"
                )));
            }
        }
        let n = self.n_in;
        let mut rng = SeededRng::new(self.seed);
        let mut layers = Vec::with_capacity(self.layers - 1);
        for _ in 0..self.layers - 1 {
            layers.push(self.build_layer(n, k, &mut rng)?);
        }
        let downsizer = Downsizer::random(self.n_out, n, &mut rng)?;
        Ok(Model {
            variant: self.variant,
            n_in: n,
            n_out: self.n_out,
            k,
            seed: self.seed,
            guard_epsilon: self.guard_epsilon,
            layers,
            downsizer,
        })
    }

    fn activation(&self, n: usize) -> Result<Activation> {
        let m = self.cheb_m.or(self.variant.default_cheb_m());
        Ok(match self.variant {
            Variant::SRelu | Variant::Mixed2 => Activation::Relu,
            Variant::Vpnnt => Activation::Chebyshev(
                ChebyshevConfig::trainable(vec![m.unwrap(); n / 2])?
                    .with_guard(self.guard_epsilon)?,
            ),
            _ => Activation::Chebyshev(
                ChebyshevConfig::fixed(m.unwrap())?.with_guard(self.guard_epsilon)?,
            ),
        })
    }

    fn build_layer(&self, n: usize, k: usize, rng: &mut SeededRng) -> Result<Layer> {
        if self.variant.uses_volume_layers() {
            let factor = |rng: &mut SeededRng| -> Result<RotationPermutation> {
                let permutation = PermutationSpec::random(n, rng);
                let thetas: Vec<f64> = (0..n / 2).map(|_| rng.uniform(-PI, PI)).collect();
                RotationPermutation::new(permutation, RotationParams::new(thetas))
            };
            let right: Vec<_> = (0..k / 2)
                .map(|_| factor(rng))
                .collect::<Result<_>>()?;
            // t starts at zero (D = identity), like the bias. Random t
            // makes each diagonal amplify gradient norms by ~I₀(2) ≈ 2.28
            // RMS per layer, which buries the very layer-wise equilibrium
            // the architecture exists for; cos(0) = 1 keeps the t gradients
            // maximally alive at this init.
            let diag = DiagonalParams::new(vec![0.0; n]);
            let left: Vec<_> = (0..k / 2)
                .map(|_| factor(rng))
                .collect::<Result<_>>()?;
            Ok(Layer::Volume(VolumeLayer {
                left,
                diag,
                right,
                bias: vec![0.0; n],
                activation: self.activation(n)?,
            }))
        } else {
            let bound = 1.0 / (n as f64).sqrt();
            let weight =
                math::Matrix::from_fn(n, n, |_, _| rng.uniform(-bound, bound));
            let affine = AffineParams::new(weight, vec![0.0; n])?;
            Ok(Layer::Standard(StandardLayer {
                affine,
                activation: self.activation(n)?,
            }))
        }
    }
}

/// A full network: L−1 hidden layers plus the frozen downsizer.
#[derive(Debug, Clone)]
pub struct Model {
    pub(crate) variant: Variant,
    pub(crate) n_in: usize,
    pub(crate) n_out: usize,
    pub(crate) k: usize,
    pub(crate) seed: u64,
    pub(crate) guard_epsilon: f64,
    pub(crate) layers: Vec<Layer>,
    pub(crate) downsizer: Downsizer,
}

impl Model {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn guard_epsilon(&self) -> f64 {
        self.guard_epsilon
    }

    /// Total layer count L (hidden layers + downsizer).
    pub fn depth(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn downsizer(&self) -> &Downsizer {
        &self.downsizer
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_in {
            return Err(Error::DimensionMismatch {
                what: "model input",
                expected: self.n_in,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Full forward pass retaining every z⁽ˡ⁾ and a⁽ˡ⁾ for backpropagation.
    pub fn forward(&self, x: &[f64]) -> Result<(ForwardCache, Vec<f64>)> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for layer in &self.layers {
            let (z, next) = layer.forward(&a)?;
            pre.push(z);
            a = next;
            act.push(a.clone());
        }
        let output = self.downsizer.forward(&a)?;
        Ok((
            ForwardCache {
                input: x.to_vec(),
                pre,
                act,
                output: output.clone(),
            },
            output,
        ))
    }

    /// The hidden map x → a⁽ᴸ⁻¹⁾ without cache bookkeeping.
    pub fn hidden_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for layer in &self.layers {
            let (_, next) = layer.forward(&a)?;
            a = next;
        }
        Ok(a)
    }

    /// Raw network output without cache bookkeeping.
    pub fn raw_output(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.downsizer.forward(&self.hidden_forward(x)?)
    }

    /// Argmax class; ties break toward the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(math::argmax(&self.raw_output(x)?))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.pre.len() != self.layers.len()
            || cache.act.len() != self.layers.len()
            || cache.input.len() != self.n_in
            || cache.output.len() != self.n_out
            || cache.pre.iter().any(|z| z.len() != self.n_in)
            || cache.act.iter().any(|a| a.len() != self.n_in)
        {
            return Err(Error::CacheMismatch(format!(
                "cache shaped for a different model (layers {}, width {})",
                cache.pre.len(),
                cache.input.len()
            )));
        }
        Ok(())
    }

    /// Gradients of the softmax cross-entropy loss at `target` with respect
    /// to every trainable parameter, plus the per-layer ‖δ⁽ˡ⁾‖₂.
    pub fn backward(&self, cache: &ForwardCache, target: usize) -> Result<GradientSet> {
        if target >= self.n_out {
            return Err(Error::IndexOutOfRange {
                index: target,
                len: self.n_out,
            });
        }
        let mut dy = softmax(&cache.output);
        dy[target] -= 1.0;
        self.backward_from_output_gradient(cache, &dy)
    }

    /// Backward pass seeded with an arbitrary dE/dy at the raw output.
    pub fn backward_from_output_gradient(
        &self,
        cache: &ForwardCache,
        dy: &[f64],
    ) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        self.backward_accumulate_output_gradient(cache, dy, &mut grads)?;
        Ok(grads)
    }

    /// Accumulating backward pass used by the trainer: adds this sample's
    /// gradients and δ-norms into `grads`.
    pub(crate) fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        target: usize,
        grads: &mut GradientSet,
    ) -> Result<()> {
        if target >= self.n_out {
            return Err(Error::IndexOutOfRange {
                index: target,
                len: self.n_out,
            });
        }
        let mut dy = softmax(&cache.output);
        dy[target] -= 1.0;
        self.backward_accumulate_output_gradient(cache, &dy, grads)
    }

    fn backward_accumulate_output_gradient(
        &self,
        cache: &ForwardCache,
        dy: &[f64],
        grads: &mut GradientSet,
    ) -> Result<()> {
        self.check_cache(cache)?;
        if dy.len() != self.n_out {
            return Err(Error::DimensionMismatch {
                what: "output gradient",
                expected: self.n_out,
                got: dy.len(),
            });
        }
        grads.check_congruent(self)?;
        let mut g = self.downsizer.backward(dy)?;
        for l in (0..self.layers.len()).rev() {
            let a_prev = if l == 0 {
                cache.input()
            } else {
                cache.activation(l - 1)
            };
            let z = cache.pre_activation(l);
            let (delta_norm, dx) = match (&self.layers[l], &mut grads.layers[l]) {
                (Layer::Volume(v), LayerGrads::Volume(gv)) => {
                    v.backward_accumulate(a_prev, z, &g, gv)?
                }
                (Layer::Standard(s), LayerGrads::Standard(gs)) => {
                    s.backward_accumulate(a_prev, z, &g, gs)?
                }
                _ => {
                    return Err(Error::ShapeMismatch(
                        "gradient layout does not match model layer types".into(),
                    ))
                }
            };
            grads.delta_norms[l] += delta_norm;
            g = dx;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::l2_norm;
    use crate::params::ParamLocator;

    fn rand_input(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        let scale = 1.0 / (n as f64).sqrt();
        (0..n).map(|_| rng.uniform(0.05 * scale, scale)).collect()
    }

    #[test]
    fn default_k_for_mnist_width() {
        assert_eq!(default_k(784), 20);
        let model = ModelConfig::new(Variant::Vpnn, 784, 10, 4, 1).build().unwrap();
        assert_eq!(model.k(), 20);
        match &model.layers()[0] {
            Layer::Volume(v) => {
                assert_eq!(v.left().len(), 10);
                assert_eq!(v.right().len(), 10);
            }
            _ => panic!("vpnn must use volume layers"),
        }
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = ModelConfig::new(Variant::Vpnnt, 8, 4, 3, 77).build().unwrap();
        let b = ModelConfig::new(Variant::Vpnnt, 8, 4, 3, 77).build().unwrap();
        for loc in a.param_locators() {
            assert_eq!(
                a.param_get(&loc).unwrap().to_bits(),
                b.param_get(&loc).unwrap().to_bits()
            );
        }
        assert_eq!(a.downsizer().matrix().data(), b.downsizer().matrix().data());
    }

    #[test]
    fn k_override_changes_factor_count() {
        let model = ModelConfig::new(Variant::Vpnn, 8, 4, 3, 9)
            .with_k(4)
            .build()
            .unwrap();
        assert_eq!(model.k(), 4);
        match &model.layers()[0] {
            Layer::Volume(v) => {
                assert_eq!(v.left().len(), 2);
                assert_eq!(v.right().len(), 2);
            }
            _ => unreachable!(),
        }
        // per layer: k·n/2 rotations + n diagonal + n bias.
        assert_eq!(model.param_count().per_layer, 4 * 4 + 16);
        assert_eq!(
            model.param_count().total,
            model.param_locators().len()
        );
    }

    #[test]
    fn build_rejects_bad_configs() {
        assert!(ModelConfig::new(Variant::Vpnn, 7, 4, 3, 0).build().is_err());
        assert!(ModelConfig::new(Variant::Vpnn, 8, 4, 1, 0).build().is_err());
        assert!(ModelConfig::new(Variant::Vpnn, 8, 9, 3, 0).build().is_err());
        assert!(ModelConfig::new(Variant::Vpnn, 8, 4, 3, 0)
            .with_cheb_m(-1.0)
            .build()
            .is_err());
        assert!(ModelConfig::new(Variant::Vpnn, 8, 4, 3, 0)
            .with_k(3)
            .build()
            .is_err());
    }

    #[test]
    fn neutral_parameters_reduce_to_permutation_composition() {
        // θ = 0, all t equal, b = 0, M = 1: every sublayer is a permutation
        // or the identity, so the hidden map is the permutation composition.
        let mut model = ModelConfig::new(Variant::Vpnn, 8, 4, 3, 5)
            .with_cheb_m(1.0)
            .build()
            .unwrap();
        for loc in model.param_locators() {
            match loc {
                ParamLocator::Theta { .. } | ParamLocator::DiagT { .. } => {
                    model.param_set(&loc, 0.0).unwrap()
                }
                _ => {}
            }
        }
        let mut rng = SeededRng::new(9);
        let x = rand_input(&mut rng, 8);
        let mut expected = x.clone();
        for layer in model.layers() {
            if let Layer::Volume(v) = layer {
                for rp in v.right() {
                    expected = rp.permutation().forward(&expected).unwrap();
                }
                for rp in v.left() {
                    expected = rp.permutation().forward(&expected).unwrap();
                }
            }
        }
        let hidden = model.hidden_forward(&x).unwrap();
        for (a, b) in hidden.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let y = model.raw_output(&x).unwrap();
        let want = model.downsizer().forward(&expected).unwrap();
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_norm_scaling_per_layer() {
        // With M = 2, ‖a⁽ˡ⁾‖ = ‖z⁽ˡ⁾‖ / √2 exactly (pairwise 1/√M scaling).
        let model = ModelConfig::new(Variant::Vpnn, 8, 4, 4, 31).build().unwrap();
        let mut rng = SeededRng::new(33);
        let x = rand_input(&mut rng, 8);
        let (cache, _) = model.forward(&x).unwrap();
        for l in 0..3 {
            let z = l2_norm(cache.pre_activation(l));
            let a = l2_norm(cache.activation(l));
            assert!((a - z / 2.0f64.sqrt()).abs() < 1e-12, "layer {l}: {a} vs {z}");
        }
    }

    #[test]
    fn batched_forward_is_a_pure_map() {
        let model = ModelConfig::new(Variant::Mixed1, 8, 4, 3, 41).build().unwrap();
        let mut rng = SeededRng::new(43);
        let batch: Vec<Vec<f64>> = (0..100).map(|_| rand_input(&mut rng, 8)).collect();
        let one_by_one: Vec<Vec<f64>> = batch
            .iter()
            .map(|x| model.raw_output(x).unwrap())
            .collect();
        for (x, want) in batch.iter().zip(&one_by_one) {
            assert_eq!(&model.raw_output(x).unwrap(), want);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        // If softmax(y) equals the one-hot target exactly, dE/dy = 0 and
        // every parameter gradient vanishes.
        let model = ModelConfig::new(Variant::Vpnnt, 8, 4, 3, 51).build().unwrap();
        let mut rng = SeededRng::new(53);
        let x = rand_input(&mut rng, 8);
        let (cache, _) = model.forward(&x).unwrap();
        let grads = model
            .backward_from_output_gradient(&cache, &[0.0; 4])
            .unwrap();
        for loc in model.param_locators() {
            assert_eq!(grads.get(&loc).unwrap(), 0.0);
        }
        assert!(grads.delta_norms().iter().all(|&n| n == 0.0));
    }

    #[test]
    fn delta_norms_shape_and_positivity() {
        for variant in Variant::ALL {
            let model = ModelConfig::new(variant, 8, 4, 4, 61).build().unwrap();
            let mut rng = SeededRng::new(63);
            let x = rand_input(&mut rng, 8);
            let (cache, _) = model.forward(&x).unwrap();
            let grads = model.backward(&cache, 1).unwrap();
            assert_eq!(grads.delta_norms().len(), 3);
            for &n in grads.delta_norms() {
                assert!(n.is_finite() && n > 0.0, "{variant:?}: delta norm {n}");
            }
        }
    }

    #[test]
    fn cache_from_other_model_is_rejected() {
        let a = ModelConfig::new(Variant::Vpnn, 8, 4, 3, 71).build().unwrap();
        let b = ModelConfig::new(Variant::Vpnn, 8, 4, 4, 71).build().unwrap();
        let (cache, _) = a.forward(&[0.1; 8]).unwrap();
        match b.backward(&cache, 0) {
            Err(Error::CacheMismatch(_)) => {}
            other => panic!("expected CacheMismatch, got {other:?}"),
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(Variant::parse("vpnn"), Some(Variant::Vpnn));
        assert_eq!(Variant::parse("VPNN1.3"), Some(Variant::Vpnn13));
        assert_eq!(Variant::parse("s-relu"), Some(Variant::SRelu));
        assert_eq!(Variant::parse("nope"), None);
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
    }
}
