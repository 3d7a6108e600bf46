//! The differentiable segmenter contract, a small full-resolution
//! convolutional reference network, the training objective's gradient, and
//! the momentum-SGD optimizer with exponential learning-rate decay.

mod checkpoint;
mod conv;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use conv::Tape;
pub use optim::{lr_at, sgd_step, OptimHyper, OptimState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, MaskMap};
use crate::losses::{combine, terms_with_grad, LossComponents, LossReport, LossSpec};
use crate::outlier::Substitution;
use crate::rng::rng_for;
use crate::tiling::ProbMap;

/// Raw per-pixel class scores, row-major, `k` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    k: usize,
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(Error::Shape(format!("logit maps need k >= 2, got {k}")));
        }
        if values.len() != height * width * k {
            return Err(Error::Shape(format!(
                "{height}x{width}x{k} logit map needs {} values, got {}",
                height * width * k,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("logits"));
        }
        Ok(Self {
            height,
            width,
            k,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.k..(p + 1) * self.k]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.values[p * self.k..(p + 1) * self.k]
    }

    pub fn to_probs(&self) -> ProbMap {
        ProbMap::new(
            self.height,
            self.width,
            self.k,
            crate::losses::softmax(self),
        )
        .expect("softmax rows are probability vectors")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Odd square kernel side; convolutions use zero "same" padding.
    pub kernel: usize,
    pub relu: bool,
}

impl LayerSpec {
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    /// conv3x3 C->8 + ReLU, conv3x3 8->16 + ReLU, conv1x1 16->K.
    pub fn reference(in_channels: usize, classes: usize) -> Self {
        Self {
            layers: vec![
                LayerSpec {
                    in_channels,
                    out_channels: 8,
                    kernel: 3,
                    relu: true,
                },
                LayerSpec {
                    in_channels: 8,
                    out_channels: 16,
                    kernel: 3,
                    relu: true,
                },
                LayerSpec {
                    in_channels: 16,
                    out_channels: classes,
                    kernel: 1,
                    relu: false,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Config("network has no layers".into()))?;
        if first.in_channels == 0 {
            return Err(Error::Config("zero input channels".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::Config(format!(
                    "layer outputs {} channels but next layer expects {}",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        if self.layers.iter().any(|l| l.kernel % 2 == 0) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.classes() < 2 {
            return Err(Error::Config("network must output at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Start of each layer's parameter block in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |acc, l| {
                let start = *acc;
                *acc += l.param_count();
                Some(start)
            })
            .collect()
    }
}

/// A differentiable map from images to per-pixel logits.
pub trait Segmenter {
    /// Whatever the reverse pass needs from the forward pass.
    type Tape;

    fn in_channels(&self) -> usize;
    fn classes(&self) -> usize;
    fn param_count(&self) -> usize;
    fn params(&self) -> &[f64];

    fn forward_with_tape(&self, image: &Image) -> Result<(LogitMap, Self::Tape)>;

    /// Pulls `grad_logits` (laid out like [`LogitMap::values`]) back to the
    /// parameters.
    fn backward(&self, tape: &Self::Tape, grad_logits: &[f64]) -> Vec<f64>;

    fn forward(&self, image: &Image) -> Result<LogitMap> {
        self.forward_with_tape(image).map(|(logits, _)| logits)
    }
}

/// Layer specs plus one flat parameter vector (per layer: weights laid out
/// `[out][in][ky][kx]`, then biases).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterParams {
    pub spec: NetSpec,
    pub values: Vec<f64>,
    pub version: u32,
}

impl SegmenterParams {
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.param_count();
        Ok(Self {
            spec,
            values: vec![0.0; n],
            version: CHECKPOINT_VERSION,
        })
    }

    /// Glorot-uniform weights from a seeded stream, zero biases.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        use rand::Rng;
        let mut params = Self::zeros(spec)?;
        let offsets = params.spec.offsets();
        for (l, (layer, &start)) in params.spec.layers.iter().zip(&offsets).enumerate() {
            let kk = (layer.kernel * layer.kernel) as f64;
            let fan_in = layer.in_channels as f64 * kk;
            let fan_out = layer.out_channels as f64 * kk;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            let mut rng = rng_for(seed, &[l as u64]);
            for w in &mut params.values[start..start + layer.weight_count()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn reference(in_channels: usize, classes: usize, seed: u64) -> Result<Self> {
        Self::init(NetSpec::reference(in_channels, classes), seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.values.len() != self.spec.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a spec needing {}",
                self.values.len(),
                self.spec.param_count()
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("parameters"));
        }
        Ok(())
    }

    /// Parameter slice of the last layer's weights.
    pub fn last_layer_weights_mut(&mut self) -> &mut [f64] {
        let start = *self.spec.offsets().last().expect("nonempty spec");
        let count = self.spec.layers.last().expect("nonempty spec").weight_count();
        &mut self.values[start..start + count]
    }
}

impl Segmenter for SegmenterParams {
    type Tape = Tape;

    fn in_channels(&self) -> usize {
        self.spec.in_channels()
    }

    fn classes(&self) -> usize {
        self.spec.classes()
    }

    fn param_count(&self) -> usize {
        self.values.len()
    }

    fn params(&self) -> &[f64] {
        &self.values
    }

    fn forward_with_tape(&self, image: &Image) -> Result<(LogitMap, Tape)> {
        if image.channels() != self.spec.in_channels() {
            return Err(Error::Shape(format!(
                "network expects {} channels, image has {}",
                self.spec.in_channels(),
                image.channels()
            )));
        }
        conv::forward(&self.spec, &self.values, image)
    }

    fn backward(&self, tape: &Tape, grad_logits: &[f64]) -> Vec<f64> {
        conv::backward(&self.spec, &self.values, tape, grad_logits)
    }
}

/// The objective value, its report, and the logit-space gradient for one
/// image, given the logits already computed by a forward pass.
///
/// When `outliers` is given and `spec.beta != 0`, the uncertainty terms are
/// evaluated on the substituted map. Replaced pixels are constants: no
/// gradient flows back through them.
pub fn objective_grad(
    logits: &LogitMap,
    target: &MaskMap,
    spec: &LossSpec,
    outliers: Option<&Substitution>,
) -> Result<(LossReport, Vec<f64>)> {
    let real = terms_with_grad(logits, target, spec.dice_eps)?;
    let synthetic = match outliers {
        Some(sub) if spec.beta != 0.0 => {
            let map = sub.apply(logits);
            let mut t = terms_with_grad(&map, target, spec.dice_eps)?;
            let k = logits.k();
            for (p, replaced) in sub.replaced(target.labels().len()).into_iter().enumerate() {
                if replaced {
                    t.grad_ce[p * k..(p + 1) * k].fill(0.0);
                    t.grad_dice[p * k..(p + 1) * k].fill(0.0);
                }
            }
            Some(t)
        }
        _ => None,
    };

    let components = LossComponents {
        ce: real.ce,
        dice: real.dice,
        ce_out: synthetic.as_ref().map(|t| t.ce),
        dice_out: synthetic.as_ref().map(|t| t.dice),
    };
    for (name, v) in [("ce", real.ce), ("dice", real.dice)] {
        if !v.is_finite() {
            return Err(Error::non_finite(name));
        }
    }
    let comb = combine(&components, spec)?;
    let w = comb.weights;

    let mut grad: Vec<f64> = real
        .grad_ce
        .iter()
        .zip(&real.grad_dice)
        .map(|(c, d)| w[0] * c + w[1] * d)
        .collect();
    if let Some(t) = &synthetic {
        for ((g, c), d) in grad.iter_mut().zip(&t.grad_ce).zip(&t.grad_dice) {
            *g += w[2] * c + w[3] * d;
        }
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::non_finite("logit gradient"));
    }
    Ok((LossReport::new(&components, &comb, spec), grad))
}

/// Loss report and exact parameter gradient of the combined objective for
/// one (image, target) pair.
pub fn loss_and_grad<S: Segmenter>(
    net: &S,
    image: &Image,
    target: &MaskMap,
    spec: &LossSpec,
    outliers: Option<&Substitution>,
) -> Result<(LossReport, Vec<f64>)> {
    let (logits, tape) = net.forward_with_tape(image)?;
    let (report, grad_logits) = objective_grad(&logits, target, spec, outliers)?;
    Ok((report, net.backward(&tape, &grad_logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Strategy;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut rng = rng_for(seed, &[99]);
        Image::new(h, w, 1, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn reference_param_count() {
        let spec = NetSpec::reference(1, 2);
        assert_eq!(spec.param_count(), (72 + 8) + (1152 + 16) + (32 + 2));
        assert_eq!(spec.offsets(), vec![0, 80, 1248]);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let net = SegmenterParams::zeros(NetSpec::reference(1, 2)).unwrap();
        let logits = net.forward(&random_image(7, 9, 1)).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let net = SegmenterParams::reference(3, 2, 4).unwrap();
        let img = Image::filled(224, 224, 3, 0.3).unwrap();
        let logits = net.forward(&img).unwrap();
        assert_eq!((logits.height(), logits.width(), logits.k()), (224, 224, 2));
    }

    #[test]
    fn channel_mismatch() {
        let net = SegmenterParams::reference(3, 2, 4).unwrap();
        assert!(matches!(net.forward(&random_image(4, 4, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn last_layer_is_linear() {
        let mut net = SegmenterParams::reference(1, 2, 5).unwrap();
        let img = random_image(6, 6, 2);
        let base = net.forward(&img).unwrap();
        net.last_layer_weights_mut().iter_mut().for_each(|w| *w *= 2.0);
        let doubled = net.forward(&img).unwrap();
        for (a, b) in base.values().iter().zip(doubled.values()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn interior_translation_equivariance() {
        let net = SegmenterParams::reference(1, 2, 8).unwrap();
        let img = random_image(12, 12, 3);
        let shifted = Image::new(
            12,
            12,
            1,
            (0..144)
                .map(|i| {
                    let (r, c) = (i / 12, i % 12);
                    img.get(r, if c == 0 { 0 } else { c - 1 }, 0)
                })
                .collect(),
        )
        .unwrap();
        let a = net.forward(&img).unwrap();
        let b = net.forward(&shifted).unwrap();
        // Receptive field radius 2; stay 3 px clear of the borders.
        for r in 3..9 {
            for c in 3..8 {
                let pa = a.pixel(r * 12 + c);
                let pb = b.pixel(r * 12 + c + 1);
                for (x, y) in pa.iter().zip(pb) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn saturated_correct_prediction_has_tiny_dice_gradient() {
        let target = MaskMap::from_fn(6, 6, |r, _| r < 3);
        let values: Vec<f64> = target
            .labels()
            .iter()
            .flat_map(|&l| if l == 1 { [-25.0, 25.0] } else { [25.0, -25.0] })
            .collect();
        let logits = LogitMap::new(6, 6, 2, values).unwrap();
        let t = terms_with_grad(&logits, &target, 1e-5).unwrap();
        let max = t.grad_dice.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(max < 1e-12, "{max}");
    }

    #[test]
    fn zero_beta_matches_outlier_free_gradient_bitwise() {
        let net = SegmenterParams::reference(1, 2, 3).unwrap();
        let img = random_image(8, 8, 5);
        let target = MaskMap::from_fn(8, 8, |r, c| r + c < 7);
        let sub = Substitution {
            entries: vec![(3, vec![4.0, -2.0]), (40, vec![-1.0, 3.0])],
        };
        for strategy in [Strategy::Balance, Strategy::Norm, Strategy::Pareto] {
            let spec = LossSpec {
                strategy,
                beta: 0.0,
                ..LossSpec::default()
            };
            let (ra, ga) = loss_and_grad(&net, &img, &target, &spec, Some(&sub)).unwrap();
            let (rb, gb) = loss_and_grad(&net, &img, &target, &spec, None).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(
                ga.iter().map(|g| g.to_bits()).collect::<Vec<_>>(),
                gb.iter().map(|g| g.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
