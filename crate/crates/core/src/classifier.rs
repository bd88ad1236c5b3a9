//! Downstream digit classifier: dense 512-512 ReLU trunk with a 10-way
//! softmax head, trained by plain minibatch gradient descent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ParamStore};
use crate::optim::sgd_step;
use crate::tensor::Tensor;

pub const CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub epochs: usize,
    /// Epochs used when the inputs are the original binary views.
    pub original_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 50,
            original_epochs: 15,
            batch_size: 32,
            learning_rate: 0.01,
            hidden: vec![512, 512],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub store: ParamStore,
    pub net: Mlp,
}

impl ClassifierModel {
    pub fn new(input_width: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut widths = vec![input_width];
        widths.extend(hidden);
        widths.push(CLASSES);
        let net = Mlp::new(&mut store, "classifier", &widths, Activation::Identity, &mut rng);
        ClassifierModel { store, net }
    }

    pub fn input_width(&self) -> usize {
        self.net.in_width()
    }

    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_width(inputs)?;
        let mut parts = Vec::new();
        for start in (0..inputs.rows()).step_by(1000) {
            let end = (start + 1000).min(inputs.rows());
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape);
            let x = tape.constant(inputs.slice_rows(start, end));
            let out = self.net.forward(&mut tape, &bound, x)?;
            parts.push(tape.value(out).clone());
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(0, CLASSES));
        }
        Tensor::vstack(&parts)
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row_slice(r))).collect())
    }

    fn check_width(&self, inputs: &Tensor) -> Result<()> {
        if inputs.cols() != self.input_width() {
            return Err(Error::dim(format!(
                "classifier expects width {}, got {}",
                self.input_width(),
                inputs.cols()
            )));
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn check_labels(inputs: &Tensor, labels: &[usize]) -> Result<()> {
    if inputs.rows() != labels.len() {
        return Err(Error::dim(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= CLASSES) {
        return Err(Error::dim(format!("label {bad} outside 0..{CLASSES}")));
    }
    Ok(())
}

/// Minimizes mean categorical cross-entropy with SGD for `epochs` passes.
pub fn train_classifier(inputs: &Tensor, labels: &[usize], cfg: &ClassifierConfig, epochs: usize) -> Result<ClassifierModel> {
    check_labels(inputs, labels)?;
    if inputs.rows() == 0 || cfg.batch_size == 0 {
        return Err(Error::Precondition("classifier needs data and a positive batch size".into()));
    }
    let mut model = ClassifierModel::new(inputs.cols(), &cfg.hidden, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = inputs.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut tape = Tape::new();
                let bound = model.store.bind(&mut tape);
                let xv = tape.constant(x);
                let logits = model.net.forward(&mut tape, &bound, xv)?;
                let xent = tape.softmax_cross_entropy(logits, &y)?;
                let loss = tape.mean(xent)?;
                tape.backward(loss)?
            };
            sgd_step(&mut model.store, &grads, cfg.learning_rate)?;
        }
    }
    Ok(model)
}

/// Percentage of argmax predictions equal to the label.
pub fn evaluate_classifier(model: &ClassifierModel, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(inputs, labels)?;
    if labels.is_empty() {
        return Err(Error::Precondition("no examples to evaluate".into()));
    }
    let pred = model.predict(inputs)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_logits_score_one_class() {
        let mut m = ClassifierModel::new(3, &[4], 0);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            let z = m.store.get(id).map(|_| 0.0);
            m.store.set(id, z).unwrap();
        }
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let acc = evaluate_classifier(&m, &Tensor::zeros(100, 3), &labels).unwrap();
        assert!((acc - 10.0).abs() < 1e-12);
    }

    #[test]
    fn separable_data_is_learnt() {
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Tensor::from_fn(n, 6, |r, c| if c / 2 == labels[r] { 1.0 } else { 0.0 });
        let cfg = ClassifierConfig {
            hidden: vec![8],
            learning_rate: 0.1,
            batch_size: 10,
            ..ClassifierConfig::default()
        };
        let m = train_classifier(&x, &labels, &cfg, 30).unwrap();
        assert_eq!(evaluate_classifier(&m, &x, &labels).unwrap(), 100.0);
    }

    #[test]
    fn width_and_label_errors() {
        let m = ClassifierModel::new(3, &[4], 0);
        assert!(matches!(evaluate_classifier(&m, &Tensor::zeros(2, 4), &[0, 1]), Err(Error::Dimension(_))));
        assert!(matches!(evaluate_classifier(&m, &Tensor::zeros(2, 3), &[0, 10]), Err(Error::Dimension(_))));
    }
}
