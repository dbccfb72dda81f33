//! A small fully-connected classification head trained with the combined
//! classification + anchor loss. It stands in for a detector's
//! classification branch so that the logit-space structure produced by the
//! anchor term can be studied end to end.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::anchor::{class_centres, combined_loss, CentreSet, ClassificationLoss};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyHeadConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: ClassificationLoss,
    pub seed: u64,
}

impl Default for ToyHeadConfig {
    fn default() -> Self {
        ToyHeadConfig {
            input_dim: 32,
            hidden_dims: vec![32],
            n_classes: 10,
            lambda: crate::anchor::DEFAULT_LAMBDA,
            alpha: crate::anchor::DEFAULT_ALPHA,
            learning_rate: 0.05,
            epochs: 100,
            batch_size: 64,
            loss: ClassificationLoss::CrossEntropy,
            seed: 0,
        }
    }
}

impl ToyHeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be >= 0");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be > 0");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1");
        }
        if let ClassificationLoss::Focal { gamma } = self.loss {
            if !(gamma >= 0.0) {
                return bad("focal gamma must be >= 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("valid range");
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Multi-layer perceptron with ReLU hidden layers and a linear logit layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyHead {
    layers: Vec<Dense>,
}

impl ToyHead {
    pub fn new(config: &ToyHeadConfig, rng: &mut Rng) -> Self {
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden_dims);
        widths.push(config.n_classes);
        ToyHead {
            layers: widths.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Forward pass keeping every layer's activation (post-ReLU for hidden
    /// layers, raw for the output).
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(acts.last().unwrap(), &mut out);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.forward_all(x).pop().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_combined_loss: f64,
    pub mean_anchor_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub head: ToyHead,
    pub centres: CentreSet,
    /// Entry 0 is measured before any update, entry `e` after epoch `e`.
    pub history: Vec<EpochStats>,
    /// Final logits of the probe inputs, in order.
    pub probe_logits: Vec<Vec<f64>>,
}

fn evaluate(
    head: &ToyHead,
    samples: &[(Vec<f64>, usize)],
    centres: &CentreSet,
    config: &ToyHeadConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let mut combined = 0.0;
    let mut anchor = 0.0;
    let mut correct = 0usize;
    for (x, y) in samples {
        let l = head.logits(x)?;
        let (v, _) = combined_loss(&l, *y, centres, config.lambda, config.loss)?;
        combined += v;
        anchor += crate::anchor::anchor_loss(&l, *y, centres)?;
        correct += (crate::extraction::argmax(&l) == *y) as usize;
    }
    let n = samples.len() as f64;
    Ok(EpochStats {
        epoch,
        mean_combined_loss: combined / n,
        mean_anchor_loss: anchor / n,
        accuracy: correct as f64 / n,
    })
}

/// Trains a fresh head with mini-batch gradient descent on the combined loss
/// and returns it with its loss history and the logits of `probe`.
pub fn train_toy_head(
    features: &[(Vec<f64>, usize)],
    probe: &[Vec<f64>],
    config: &ToyHeadConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let mut per_class = vec![0usize; config.n_classes];
    for (x, y) in features {
        if *y >= config.n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                config.n_classes
            )));
        }
        if x.len() != config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: config.input_dim,
                got: x.len(),
            });
        }
        per_class[*y] += 1;
    }
    if let Some(class_id) = per_class.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class_id });
    }

    let centres = class_centres(config.n_classes, config.alpha)?;
    let mut rng = Rng::seed_from_u64(config.seed);
    let mut head = ToyHead::new(config, &mut rng);
    let mut history = vec![evaluate(&head, features, &centres, config, 0)?];

    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut grads: Vec<(Vec<f64>, Vec<f64>)> = head
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
        .collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            for (gw, gb) in grads.iter_mut() {
                gw.iter_mut().for_each(|v| *v = 0.0);
                gb.iter_mut().for_each(|v| *v = 0.0);
            }
            for &i in batch {
                let (x, y) = &features[i];
                let acts = head.forward_all(x);
                let (_, mut delta) =
                    combined_loss(acts.last().unwrap(), *y, &centres, config.lambda, config.loss)?;
                for li in (0..head.layers.len()).rev() {
                    let layer = &head.layers[li];
                    let input = &acts[li];
                    let (gw, gb) = &mut grads[li];
                    for o in 0..layer.outputs {
                        let d = delta[o];
                        if d == 0.0 {
                            continue;
                        }
                        gb[o] += d;
                        let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                        for (g, v) in row.iter_mut().zip(input) {
                            *g += d * v;
                        }
                    }
                    if li > 0 {
                        let mut prev = vec![0.0; layer.inputs];
                        for o in 0..layer.outputs {
                            let d = delta[o];
                            if d == 0.0 {
                                continue;
                            }
                            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                            for (p, w) in prev.iter_mut().zip(row) {
                                *p += d * w;
                            }
                        }
                        // ReLU derivative on the hidden activation.
                        for (p, a) in prev.iter_mut().zip(input) {
                            if *a <= 0.0 {
                                *p = 0.0;
                            }
                        }
                        delta = prev;
                    }
                }
            }
            let step = config.learning_rate / batch.len() as f64;
            for (layer, (gw, gb)) in head.layers.iter_mut().zip(&grads) {
                for (w, g) in layer.weights.iter_mut().zip(gw) {
                    *w -= step * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(gb) {
                    *b -= step * g;
                }
            }
        }
        let stats = evaluate(&head, features, &centres, config, epoch)?;
        if !stats.mean_combined_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch}; lower the learning rate"
            )));
        }
        history.push(stats);
    }
    let probe_logits = probe.iter().map(|x| head.logits(x)).collect::<Result<_>>()?;
    Ok(TrainOutput {
        head,
        centres,
        history,
        probe_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_class_is_named() {
        let cfg = ToyHeadConfig {
            input_dim: 2,
            n_classes: 3,
            epochs: 1,
            ..Default::default()
        };
        let data = vec![(vec![0.0, 1.0], 0), (vec![1.0, 0.0], 2)];
        let err = train_toy_head(&data, &[], &cfg).unwrap_err();
        assert!(matches!(err, Error::EmptyClass { class_id: 1 }));
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = ToyHeadConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg = ToyHeadConfig::default();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn separable_toy_problem_is_learned() {
        let cfg = ToyHeadConfig {
            input_dim: 2,
            hidden_dims: vec![8],
            n_classes: 2,
            epochs: 50,
            batch_size: 4,
            learning_rate: 0.05,
            ..Default::default()
        };
        let data: Vec<_> = (0..40)
            .map(|i| {
                let y = i % 2;
                let s = if y == 0 { 1.0 } else { -1.0 };
                (vec![s * (1.0 + 0.01 * i as f64), s], y)
            })
            .collect();
        let out = train_toy_head(&data, &[vec![2.0, 1.0]], &cfg).unwrap();
        assert_eq!(out.history.len(), 51);
        assert_eq!(out.history.last().unwrap().accuracy, 1.0);
        assert_eq!(crate::extraction::argmax(&out.probe_logits[0]), 0);
    }
}
