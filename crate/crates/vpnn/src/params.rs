//! Parameter addressing, gradient containers, and parameter updates.
//!
//! A [`ParamLocator`] names one trainable scalar; the finite-difference
//! oracle perturbs parameters through it and reads the matching analytic
//! gradient out of a [`GradientSet`] with the same address.

use std::fmt;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{Layer, Model, Variant};

/// Which side of the diagonal a rotation/permutation factor sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Address of a single trainable scalar. `DownsizerEntry` exists so callers
/// can name frozen entries; every parameter operation refuses it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamLocator {
    Theta {
        layer: usize,
        side: Side,
        pair: usize,
        index: usize,
    },
    DiagT {
        layer: usize,
        index: usize,
    },
    Bias {
        layer: usize,
        index: usize,
    },
    ChebM {
        layer: usize,
        index: usize,
    },
    Weight {
        layer: usize,
        row: usize,
        col: usize,
    },
    DownsizerEntry {
        row: usize,
        col: usize,
    },
}

impl ParamLocator {
    /// Coarse parameter-group name used in grad-check reports.
    pub fn group(&self) -> &'static str {
        match self {
            ParamLocator::Theta { .. } => "rotation",
            ParamLocator::DiagT { .. } => "diagonal",
            ParamLocator::Bias { .. } => "bias",
            ParamLocator::ChebM { .. } => "chebyshev",
            ParamLocator::Weight { .. } => "weight",
            ParamLocator::DownsizerEntry { .. } => "downsizer",
        }
    }
}

impl fmt::Display for ParamLocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamLocator::Theta {
                layer,
                side,
                pair,
                index,
            } => write!(
                f,
                "theta[layer={layer},{},factor={pair},i={index}]",
                match side {
                    Side::Left => "left",
                    Side::Right => "right",
                }
            ),
            ParamLocator::DiagT { layer, index } => write!(f, "t[layer={layer},j={index}]"),
            ParamLocator::Bias { layer, index } => write!(f, "b[layer={layer},j={index}]"),
            ParamLocator::ChebM { layer, index } => write!(f, "M[layer={layer},pair={index}]"),
            ParamLocator::Weight { layer, row, col } => {
                write!(f, "W[layer={layer},{row},{col}]")
            }
            ParamLocator::DownsizerEntry { row, col } => write!(f, "Z[{row},{col}]"),
        }
    }
}

/// Gradients for one volume-preserving layer, shape-congruent with it.
#[derive(Debug, Clone)]
pub struct VolumeLayerGrads {
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
    pub diag: Vec<f64>,
    pub bias: Vec<f64>,
    pub cheb: Option<Vec<f64>>,
}

/// Gradients for one dense baseline layer.
#[derive(Debug, Clone)]
pub struct StandardLayerGrads {
    /// Row-major n×n weight gradient.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub cheb: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum LayerGrads {
    Volume(VolumeLayerGrads),
    Standard(StandardLayerGrads),
}

/// Per-parameter gradients plus the per-layer ‖δ⁽ˡ⁾‖₂ record. Accumulating
/// several samples sums both; divide by the sample count for means.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<LayerGrads>,
    pub delta_norms: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Volume(v) => LayerGrads::Volume(VolumeLayerGrads {
                    left: v.left.iter().map(|rp| vec![0.0; rp.rotation().pair_count()]).collect(),
                    right: v
                        .right
                        .iter()
                        .map(|rp| vec![0.0; rp.rotation().pair_count()])
                        .collect(),
                    diag: vec![0.0; v.width()],
                    bias: vec![0.0; v.width()],
                    cheb: v
                        .activation()
                        .chebyshev()
                        .filter(|c| c.is_trainable())
                        .map(|_| vec![0.0; v.width() / 2]),
                }),
                Layer::Standard(s) => LayerGrads::Standard(StandardLayerGrads {
                    weight: vec![0.0; s.width() * s.width()],
                    bias: vec![0.0; s.width()],
                    cheb: s
                        .activation()
                        .chebyshev()
                        .filter(|c| c.is_trainable())
                        .map(|_| vec![0.0; s.width() / 2]),
                }),
            })
            .collect();
        Self {
            layers,
            delta_norms: vec![0.0; model.layers.len()],
        }
    }

    pub fn delta_norms(&self) -> &[f64] {
        &self.delta_norms
    }

    fn for_each_buffer(&mut self, mut f: impl FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            match layer {
                LayerGrads::Volume(v) => {
                    for g in v.left.iter_mut().chain(v.right.iter_mut()) {
                        f(g);
                    }
                    f(&mut v.diag);
                    f(&mut v.bias);
                    if let Some(c) = v.cheb.as_mut() {
                        f(c);
                    }
                }
                LayerGrads::Standard(s) => {
                    f(&mut s.weight);
                    f(&mut s.bias);
                    if let Some(c) = s.cheb.as_mut() {
                        f(c);
                    }
                }
            }
        }
        f(&mut self.delta_norms);
    }

    /// Multiplies every buffer (including the δ-norm record) by `c`.
    pub fn scale(&mut self, c: f64) {
        self.for_each_buffer(|buf| {
            for v in buf {
                *v *= c;
            }
        });
    }

    /// Element-wise `self += other`; the two must be congruent.
    pub fn add(&mut self, other: &GradientSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch(
                "gradient sets have different layer counts".into(),
            ));
        }
        let add_buf = |a: &mut [f64], b: &[f64]| -> Result<()> {
            if a.len() != b.len() {
                return Err(Error::ShapeMismatch(
                    "gradient buffers have different lengths".into(),
                ));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
            Ok(())
        };
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            match (mine, theirs) {
                (LayerGrads::Volume(a), LayerGrads::Volume(b)) => {
                    for (ga, gb) in a.left.iter_mut().zip(&b.left) {
                        add_buf(ga, gb)?;
                    }
                    for (ga, gb) in a.right.iter_mut().zip(&b.right) {
                        add_buf(ga, gb)?;
                    }
                    add_buf(&mut a.diag, &b.diag)?;
                    add_buf(&mut a.bias, &b.bias)?;
                    match (a.cheb.as_mut(), b.cheb.as_ref()) {
                        (Some(ga), Some(gb)) => add_buf(ga, gb)?,
                        (None, None) => {}
                        _ => {
                            return Err(Error::ShapeMismatch(
                                "one gradient set has trainable activations, the other not".into(),
                            ))
                        }
                    }
                }
                (LayerGrads::Standard(a), LayerGrads::Standard(b)) => {
                    add_buf(&mut a.weight, &b.weight)?;
                    add_buf(&mut a.bias, &b.bias)?;
                    match (a.cheb.as_mut(), b.cheb.as_ref()) {
                        (Some(ga), Some(gb)) => add_buf(ga, gb)?,
                        (None, None) => {}
                        _ => {
                            return Err(Error::ShapeMismatch(
                                "one gradient set has trainable activations, the other not".into(),
                            ))
                        }
                    }
                }
                _ => {
                    return Err(Error::ShapeMismatch(
                        "gradient sets have different layer types".into(),
                    ))
                }
            }
        }
        add_buf(&mut self.delta_norms, &other.delta_norms)
    }

    /// The gradient scalar a locator addresses.
    pub fn get(&self, loc: &ParamLocator) -> Result<f64> {
        let invalid = |why: String| Err(Error::LocatorInvalid(why));
        match loc {
            ParamLocator::DownsizerEntry { .. } => {
                invalid("downsizer entries are frozen and carry no gradient".into())
            }
            ParamLocator::Theta {
                layer,
                side,
                pair,
                index,
            } => match self.layers.get(*layer) {
                Some(LayerGrads::Volume(v)) => {
                    let seq = match side {
                        Side::Left => &v.left,
                        Side::Right => &v.right,
                    };
                    seq.get(*pair)
                        .and_then(|g| g.get(*index))
                        .copied()
                        .ok_or_else(|| {
                            Error::LocatorInvalid(format!("{loc} out of range"))
                        })
                }
                _ => invalid(format!("{loc}: layer is not a volume layer")),
            },
            ParamLocator::DiagT { layer, index } => match self.layers.get(*layer) {
                Some(LayerGrads::Volume(v)) => v.diag.get(*index).copied().ok_or_else(|| {
                    Error::LocatorInvalid(format!("{loc} out of range"))
                }),
                _ => invalid(format!("{loc}: layer is not a volume layer")),
            },
            ParamLocator::Bias { layer, index } => match self.layers.get(*layer) {
                Some(LayerGrads::Volume(v)) => v.bias.get(*index).copied().ok_or_else(|| {
                    Error::LocatorInvalid(format!("{loc} out of range"))
                }),
                Some(LayerGrads::Standard(s)) => s.bias.get(*index).copied().ok_or_else(|| {
                    Error::LocatorInvalid(format!("{loc} out of range"))
                }),
                None => invalid(format!("{loc}: no such layer")),
            },
            ParamLocator::ChebM { layer, index } => {
                let cheb = match self.layers.get(*layer) {
                    Some(LayerGrads::Volume(v)) => v.cheb.as_ref(),
                    Some(LayerGrads::Standard(s)) => s.cheb.as_ref(),
                    None => None,
                };
                cheb.and_then(|c| c.get(*index)).copied().ok_or_else(|| {
                    Error::LocatorInvalid(format!("{loc}: no trainable activation there"))
                })
            }
            ParamLocator::Weight { layer, row, col } => match self.layers.get(*layer) {
                Some(LayerGrads::Standard(s)) => {
                    let n = s.bias.len();
                    if *row < n && *col < n {
                        Ok(s.weight[row * n + col])
                    } else {
                        invalid(format!("{loc} out of range"))
                    }
                }
                _ => invalid(format!("{loc}: layer is not a standard layer")),
            },
        }
    }

    pub(crate) fn check_congruent(&self, model: &Model) -> Result<()> {
        if self.layers.len() != model.layers.len()
            || self.delta_norms.len() != model.layers.len()
        {
            return Err(Error::ShapeMismatch(
                "gradient set has wrong layer count for model".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer and total trainable parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub per_layer: usize,
    pub hidden_layers: usize,
    /// Always zero: the downsizer is frozen.
    pub downsizer: usize,
    pub total: usize,
}

/// Counts without building a model (a 4000-wide dense model would be 128 MB
/// per layer).
pub fn param_count_for(variant: Variant, n_in: usize, k: usize, layers: usize) -> ParamCount {
    let per_layer = variant.params_per_layer(n_in, k);
    let hidden_layers = layers.saturating_sub(1);
    ParamCount {
        per_layer,
        hidden_layers,
        downsizer: 0,
        total: per_layer * hidden_layers,
    }
}

impl Model {
    pub fn param_count(&self) -> ParamCount {
        param_count_for(self.variant, self.n_in, self.k, self.depth())
    }

    /// Every trainable scalar in locator form, in a fixed order (layer by
    /// layer: right factors, diagonal, left factors, bias, activation /
    /// weight then bias for dense layers).
    pub fn param_locators(&self) -> Vec<ParamLocator> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Volume(v) => {
                    for (pair, rp) in v.right().iter().enumerate() {
                        for index in 0..rp.rotation().pair_count() {
                            out.push(ParamLocator::Theta {
                                layer: l,
                                side: Side::Right,
                                pair,
                                index,
                            });
                        }
                    }
                    for index in 0..v.width() {
                        out.push(ParamLocator::DiagT { layer: l, index });
                    }
                    for (pair, rp) in v.left().iter().enumerate() {
                        for index in 0..rp.rotation().pair_count() {
                            out.push(ParamLocator::Theta {
                                layer: l,
                                side: Side::Left,
                                pair,
                                index,
                            });
                        }
                    }
                    for index in 0..v.width() {
                        out.push(ParamLocator::Bias { layer: l, index });
                    }
                    if v.activation().chebyshev().is_some_and(|c| c.is_trainable()) {
                        for index in 0..v.width() / 2 {
                            out.push(ParamLocator::ChebM { layer: l, index });
                        }
                    }
                }
                Layer::Standard(s) => {
                    let n = s.width();
                    for row in 0..n {
                        for col in 0..n {
                            out.push(ParamLocator::Weight { layer: l, row, col });
                        }
                    }
                    for index in 0..n {
                        out.push(ParamLocator::Bias { layer: l, index });
                    }
                    if s.activation().chebyshev().is_some_and(|c| c.is_trainable()) {
                        for index in 0..n / 2 {
                            out.push(ParamLocator::ChebM { layer: l, index });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn param_get(&self, loc: &ParamLocator) -> Result<f64> {
        let invalid = |why: String| Err(Error::LocatorInvalid(why));
        match loc {
            ParamLocator::DownsizerEntry { .. } => {
                invalid("downsizer entries are frozen, not trainable parameters".into())
            }
            ParamLocator::Theta {
                layer,
                side,
                pair,
                index,
            } => match self.layers.get(*layer) {
                Some(Layer::Volume(v)) => {
                    let seq = match side {
                        Side::Left => v.left(),
                        Side::Right => v.right(),
                    };
                    seq.get(*pair)
                        .and_then(|rp| rp.rotation().thetas().get(*index))
                        .copied()
                        .ok_or_else(|| Error::LocatorInvalid(format!("{loc} out of range")))
                }
                _ => invalid(format!("{loc}: layer is not a volume layer")),
            },
            ParamLocator::DiagT { layer, index } => match self.layers.get(*layer) {
                Some(Layer::Volume(v)) => v.diagonal().t().get(*index).copied().ok_or_else(
                    || Error::LocatorInvalid(format!("{loc} out of range")),
                ),
                _ => invalid(format!("{loc}: layer is not a volume layer")),
            },
            ParamLocator::Bias { layer, index } => match self.layers.get(*layer) {
                Some(Layer::Volume(v)) => v.bias().get(*index).copied().ok_or_else(|| {
                    Error::LocatorInvalid(format!("{loc} out of range"))
                }),
                Some(Layer::Standard(s)) => {
                    s.affine().bias().get(*index).copied().ok_or_else(|| {
                        Error::LocatorInvalid(format!("{loc} out of range"))
                    })
                }
                None => invalid(format!("{loc}: no such layer")),
            },
            ParamLocator::ChebM { layer, index } => {
                let cheb = self
                    .layers
                    .get(*layer)
                    .and_then(|l| l.activation().chebyshev());
                match cheb {
                    Some(c) if c.is_trainable() && *index < self.n_in / 2 => {
                        Ok(c.m_for_pair(*index))
                    }
                    _ => invalid(format!("{loc}: no trainable activation there")),
                }
            }
            ParamLocator::Weight { layer, row, col } => match self.layers.get(*layer) {
                Some(Layer::Standard(s)) => {
                    let n = s.width();
                    if *row < n && *col < n {
                        Ok(s.affine().weight().row(*row)[*col])
                    } else {
                        invalid(format!("{loc} out of range"))
                    }
                }
                _ => invalid(format!("{loc}: layer is not a standard layer")),
            },
        }
    }

    pub fn param_set(&mut self, loc: &ParamLocator, value: f64) -> Result<()> {
        // Validate through the read path first so errors are uniform.
        self.param_get(loc)?;
        match loc {
            ParamLocator::DownsizerEntry { .. } => unreachable!("param_get refuses"),
            ParamLocator::Theta {
                layer,
                side,
                pair,
                index,
            } => {
                if let Layer::Volume(v) = &mut self.layers[*layer] {
                    let seq = match side {
                        Side::Left => &mut v.left,
                        Side::Right => &mut v.right,
                    };
                    seq[*pair].rotation.set_theta(*index, value);
                }
            }
            ParamLocator::DiagT { layer, index } => {
                if let Layer::Volume(v) = &mut self.layers[*layer] {
                    v.diag.set_t(*index, value);
                }
            }
            ParamLocator::Bias { layer, index } => match &mut self.layers[*layer] {
                Layer::Volume(v) => v.bias[*index] = value,
                Layer::Standard(s) => s.affine.bias_mut()[*index] = value,
            },
            ParamLocator::ChebM { layer, index } => {
                let activation = match &mut self.layers[*layer] {
                    Layer::Volume(v) => &mut v.activation,
                    Layer::Standard(s) => &mut s.activation,
                };
                if let crate::model::Activation::Chebyshev(c) = activation {
                    if let Some(ms) = c.ms_mut() {
                        ms[*index] = value;
                    }
                }
            }
            ParamLocator::Weight { layer, row, col } => {
                if let Layer::Standard(s) = &mut self.layers[*layer] {
                    let n = s.width();
                    s.affine.weight_mut().row_mut(*row)[*col] = value;
                    debug_assert!(*row < n && *col < n);
                }
            }
        }
        Ok(())
    }

    /// p ← p − lr·g for every trainable parameter; permutations and the
    /// downsizer are untouched. Trig caches refresh as part of the update.
    pub fn apply_update(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        grads.check_congruent(self)?;
        let c = -lr;
        for (layer, lg) in self.layers.iter_mut().zip(&grads.layers) {
            match (layer, lg) {
                (Layer::Volume(v), LayerGrads::Volume(g)) => {
                    for (rp, gr) in v.left.iter_mut().zip(&g.left) {
                        rp.rotation.add_scaled(gr, c);
                    }
                    for (rp, gr) in v.right.iter_mut().zip(&g.right) {
                        rp.rotation.add_scaled(gr, c);
                    }
                    v.diag.add_scaled(&g.diag, c);
                    for (b, gb) in v.bias.iter_mut().zip(&g.bias) {
                        *b += c * gb;
                    }
                    if let (crate::model::Activation::Chebyshev(cheb), Some(gm)) =
                        (&mut v.activation, g.cheb.as_ref())
                    {
                        if let Some(ms) = cheb.ms_mut() {
                            for (m, gmi) in ms.iter_mut().zip(gm) {
                                *m += c * gmi;
                            }
                        }
                    }
                }
                (Layer::Standard(s), LayerGrads::Standard(g)) => {
                    let n = s.width();
                    {
                        let w = s.affine.weight_mut();
                        for row in 0..n {
                            math::axpy(c, &g.weight[row * n..(row + 1) * n], w.row_mut(row));
                        }
                    }
                    for (b, gb) in s.affine.bias_mut().iter_mut().zip(&g.bias) {
                        *b += c * gb;
                    }
                    if let (crate::model::Activation::Chebyshev(cheb), Some(gm)) =
                        (&mut s.activation, g.cheb.as_ref())
                    {
                        if let Some(ms) = cheb.ms_mut() {
                            for (m, gmi) in ms.iter_mut().zip(gm) {
                                *m += c * gmi;
                            }
                        }
                    }
                }
                _ => {
                    return Err(Error::ShapeMismatch(
                        "gradient layout does not match model layer types".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_k, ModelConfig};

    fn per_layer(variant: Variant, n_in: usize) -> usize {
        param_count_for(variant, n_in, default_k(n_in), 4).per_layer
    }

    #[test]
    fn table_values_for_mnist_and_bag_of_words_widths() {
        assert_eq!(per_layer(Variant::Vpnn, 784), 9408);
        assert_eq!(per_layer(Variant::Vpnn13, 784), 9408);
        assert_eq!(per_layer(Variant::Vpnnt, 784), 9800);
        assert_eq!(per_layer(Variant::SRelu, 784), 615_440);
        assert_eq!(per_layer(Variant::Mixed1, 784), 615_440);
        assert_eq!(per_layer(Variant::Mixed2, 784), 9408);

        assert_eq!(per_layer(Variant::Vpnn, 4000), 56_000);
        assert_eq!(per_layer(Variant::Vpnnt, 4000), 58_000);
        assert_eq!(per_layer(Variant::SRelu, 4000), 16_004_000);
        assert_eq!(per_layer(Variant::Mixed1, 4000), 16_004_000);
        assert_eq!(per_layer(Variant::Mixed2, 4000), 56_000);
    }

    #[test]
    fn model_param_count_matches_locator_enumeration() {
        for variant in Variant::ALL {
            let model = ModelConfig::new(variant, 8, 4, 3, 3).build().unwrap();
            let count = model.param_count();
            assert_eq!(count.total, model.param_locators().len(), "{variant:?}");
            assert_eq!(count.hidden_layers, 2);
            assert_eq!(count.downsizer, 0);
        }
    }

    #[test]
    fn gradient_set_scale_and_add() {
        let model = ModelConfig::new(Variant::Vpnnt, 8, 4, 3, 5).build().unwrap();
        let mut rng = crate::rng::SeededRng::new(7);
        let x: Vec<f64> = (0..8).map(|_| rng.uniform(0.01, 0.3)).collect();
        let (cache, _) = model.forward(&x).unwrap();
        let g = model.backward(&cache, 1).unwrap();

        let mut doubled = g.clone();
        doubled.add(&g).unwrap();
        let mut scaled = g.clone();
        scaled.scale(2.0);
        for loc in model.param_locators() {
            assert_eq!(doubled.get(&loc).unwrap(), scaled.get(&loc).unwrap());
        }
        assert_eq!(doubled.delta_norms(), scaled.delta_norms());
    }

    #[test]
    fn gradient_set_shape_mismatch_detected() {
        let a = ModelConfig::new(Variant::Vpnn, 8, 4, 3, 5).build().unwrap();
        let b = ModelConfig::new(Variant::SRelu, 8, 4, 3, 5).build().unwrap();
        let mut ga = GradientSet::zeros_like(&a);
        let gb = GradientSet::zeros_like(&b);
        assert!(matches!(ga.add(&gb), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn locator_display_and_groups() {
        let loc = ParamLocator::Theta {
            layer: 1,
            side: Side::Left,
            pair: 2,
            index: 3,
        };
        assert_eq!(loc.group(), "rotation");
        assert_eq!(loc.to_string(), "theta[layer=1,left,factor=2,i=3]");
        assert_eq!(
            ParamLocator::DownsizerEntry { row: 0, col: 0 }.group(),
            "downsizer"
        );
    }

    #[test]
    fn param_set_round_trips_and_refreshes_caches() {
        let mut model = ModelConfig::new(Variant::Vpnn, 8, 4, 3, 11).build().unwrap();
        let x: Vec<f64> = (1..=8).map(|i| i as f64 * 0.03).collect();
        let before = model.raw_output(&x).unwrap();
        let loc = ParamLocator::Theta {
            layer: 0,
            side: Side::Right,
            pair: 0,
            index: 0,
        };
        let old = model.param_get(&loc).unwrap();
        model.param_set(&loc, old + 0.5).unwrap();
        let moved = model.raw_output(&x).unwrap();
        assert_ne!(before, moved, "trig caches must refresh on param_set");
        model.param_set(&loc, old).unwrap();
        assert_eq!(model.raw_output(&x).unwrap(), before);
    }
}
