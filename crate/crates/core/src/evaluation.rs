//! Metric suite: reconstruction and imputation losses, active units, latent
//! cross-correlation and downstream classification, aggregated over seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{evaluate_classifier, train_classifier, ClassifierConfig};
use crate::covparam::CrossCovKind;
use crate::data::ViewPairDataset;
use crate::error::{Error, Result};
use crate::imputation::{fit_latent_mle, impute, LatentStats};
use crate::model::{train_with, Architecture, JpvaeModel, TrainConfig, View};
use crate::tensor::Tensor;

pub const AU_THRESHOLD: f64 = 1e-2;
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean over rows of the summed per-pixel binary cross-entropy, with
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn reconstruction_loss(x: &Tensor, probs: &Tensor) -> Result<f64> {
    if x.shape() != probs.shape() {
        return Err(Error::dim(format!("targets {:?} vs probabilities {:?}", x.shape(), probs.shape())));
    }
    if x.rows() == 0 {
        return Err(Error::Precondition("no examples".into()));
    }
    let mut total = 0.0;
    for (&t, &p) in x.data().iter().zip(probs.data()) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(total / x.rows() as f64)
}

/// Population variance of each column.
pub fn column_variances(z: &Tensor) -> Vec<f64> {
    let n = z.rows().max(1) as f64;
    let means: Vec<f64> = z.col_sums().data().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        for (c, v) in var.iter_mut().enumerate() {
            let d = z.get(r, c) - means[c];
            *v += d * d;
        }
    }
    var.iter().map(|v| v / n).collect()
}

/// Percentage of columns (units) whose variance is at least `1e-2`.
pub fn active_units_from_means(means: &Tensor) -> f64 {
    if means.cols() == 0 {
        return 0.0;
    }
    let active = column_variances(means).iter().filter(|&&v| v >= AU_THRESHOLD).count();
    100.0 * active as f64 / means.cols() as f64
}

/// Active units across both latent spaces of `model` on `data`.
pub fn active_units(model: &JpvaeModel, data: &ViewPairDataset) -> Result<f64> {
    let (z1, z2) = model.posterior_means(data)?;
    Ok(active_units_from_means(&z1.hconcat(&z2)?))
}

/// Pearson correlation between every column of `z1` and every column of
/// `z2`, and its Frobenius norm. Zero-variance columns correlate as 0.
pub fn cross_correlation_from(z1: &Tensor, z2: &Tensor) -> Result<(Tensor, f64)> {
    if z1.rows() != z2.rows() {
        return Err(Error::dim("latent batches have different row counts"));
    }
    let n = z1.rows().max(1) as f64;
    let centre = |z: &Tensor| {
        let m: Vec<f64> = z.col_sums().data().iter().map(|s| s / n).collect();
        Tensor::from_fn(z.rows(), z.cols(), |r, c| z.get(r, c) - m[c])
    };
    let (c1, c2) = (centre(z1), centre(z2));
    let cov = crate::tensor::gemm(&c1, true, &c2, false)?;
    let ss = |c: &Tensor| -> Vec<f64> {
        (0..c.cols())
            .map(|k| (0..c.rows()).map(|r| c.get(r, k).powi(2)).sum::<f64>().sqrt())
            .collect()
    };
    let (s1, s2) = (ss(&c1), ss(&c2));
    let corr = Tensor::from_fn(z1.cols(), z2.cols(), |u, v| {
        let d = s1[u] * s2[v];
        if d > 0.0 {
            (cov.get(u, v) / d).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    });
    let norm = corr.frobenius_norm();
    Ok((corr, norm))
}

pub fn cross_correlation(model: &JpvaeModel, data: &ViewPairDataset) -> Result<(Tensor, f64)> {
    let (z1, z2) = model.posterior_means(data)?;
    cross_correlation_from(&z1, &z2)
}

/// One data matrix a classifier can be trained or tested on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    /// Original binary view.
    Original(View),
    /// `x̃ᵢ`, decoded from the same view's posterior mean.
    Reconstructed(View),
    /// `x̃ᵢ|ⱼ`, imputed from the other view.
    Imputed(View),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Original(v) => write!(f, "X{}", v.number()),
            Source::Reconstructed(v) => write!(f, "X~{}", v.number()),
            Source::Imputed(v) => write!(f, "X~{}|{}", v.number(), v.other().number()),
        }
    }
}

/// A single source or the column-wise concatenation `[view-1 source; view-2 source]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Input {
    Single(Source),
    Concat(Source, Source),
}

impl Input {
    fn is_original(&self) -> bool {
        match self {
            Input::Single(s) => matches!(s, Source::Original(_)),
            Input::Concat(a, b) => matches!(a, Source::Original(_)) && matches!(b, Source::Original(_)),
        }
    }

    fn sources(&self) -> Vec<Source> {
        match *self {
            Input::Single(s) => vec![s],
            Input::Concat(a, b) => vec![a, b],
        }
    }
}

impl fmt::Display for Input {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Input::Single(s) => write!(f, "{s}"),
            Input::Concat(a, b) => write!(f, "[{a};{b}]"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassifierCell {
    pub train: Input,
    pub test: Input,
}

impl ClassifierCell {
    pub fn single(train: Source, test: Source) -> Self {
        ClassifierCell {
            train: Input::Single(train),
            test: Input::Single(test),
        }
    }

    pub fn concat(train: (Source, Source), test: (Source, Source)) -> Self {
        ClassifierCell {
            train: Input::Concat(train.0, train.1),
            test: Input::Concat(test.0, test.1),
        }
    }

    pub fn label(&self) -> String {
        match (self.train, self.test) {
            (Input::Single(_), Input::Single(_)) => format!("({},{})", self.train, self.test),
            _ => format!("{}->{}", self.train, self.test),
        }
    }

    /// The six train/test pairings over reconstructed and imputed views.
    pub fn table() -> Vec<ClassifierCell> {
        use Source::*;
        let mut cells = Vec::new();
        for v in [View::One, View::Two] {
            cells.push(Self::single(Reconstructed(v), Reconstructed(v)));
            cells.push(Self::single(Reconstructed(v), Imputed(v)));
            cells.push(Self::single(Imputed(v), Imputed(v)));
        }
        cells
    }

    /// Classifier trained on `[x̃₁; x̃₂]` and tested on reconstructed or
    /// partly imputed concatenations.
    pub fn concatenation() -> Vec<ClassifierCell> {
        use Source::*;
        let train = (Reconstructed(View::One), Reconstructed(View::Two));
        vec![
            Self::concat(train, train),
            Self::concat(train, (Reconstructed(View::One), Imputed(View::Two))),
            Self::concat(train, (Imputed(View::One), Reconstructed(View::Two))),
        ]
    }

    /// Cells on the original binary views; they do not depend on the model.
    pub fn originals() -> Vec<ClassifierCell> {
        use Source::*;
        vec![
            Self::single(Original(View::One), Original(View::One)),
            Self::single(Original(View::Two), Original(View::Two)),
            Self::concat((Original(View::One), Original(View::Two)), (Original(View::One), Original(View::Two))),
        ]
    }
}

/// Train and test materials derived from one trained model.
struct Materials<'a> {
    model: &'a JpvaeModel,
    stats: &'a LatentStats,
    train: &'a ViewPairDataset,
    test: &'a ViewPairDataset,
    cache: BTreeMap<(bool, Source), Tensor>,
}

impl Materials<'_> {
    fn get(&mut self, source: Source, test: bool) -> Result<Tensor> {
        if let Some(t) = self.cache.get(&(test, source)) {
            return Ok(t.clone());
        }
        let data = if test { self.test } else { self.train };
        let t = match source {
            Source::Original(v) => data.view(v.number()).to_tensor(),
            Source::Reconstructed(v) => self.model.reconstruct(&data.view(v.number()).to_tensor(), v)?,
            Source::Imputed(v) => {
                let observed = data.view(v.other().number()).to_tensor();
                impute(&observed, self.model, self.stats, v)?
            }
        };
        self.cache.insert((test, source), t.clone());
        Ok(t)
    }

    fn input(&mut self, input: Input, test: bool) -> Result<Tensor> {
        match input {
            Input::Single(s) => self.get(s, test),
            Input::Concat(a, b) => self.get(a, test)?.hconcat(&self.get(b, test)?),
        }
    }
}

/// Metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: CrossCovKind,
    pub seed: u64,
    /// Test-split BCE of `x̃₁` and `x̃₂`.
    pub recon: [f64; 2],
    /// Test-split BCE of `x̃₁|₂` and `x̃₂|₁`.
    pub imputation: [f64; 2],
    pub active_units: f64,
    pub cross_corr: Vec<Vec<f64>>,
    pub cross_corr_norm: f64,
    pub accuracy: BTreeMap<String, f64>,
}

impl RunMetrics {
    /// Scalar metrics keyed by name, in a fixed order.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("recon.X~1".into(), self.recon[0]);
        m.insert("recon.X~2".into(), self.recon[1]);
        m.insert("impute.X~1|2".into(), self.imputation[0]);
        m.insert("impute.X~2|1".into(), self.imputation[1]);
        m.insert("active_units".into(), self.active_units);
        m.insert("cross_corr_norm".into(), self.cross_corr_norm);
        for (k, v) in &self.accuracy {
            m.insert(format!("accuracy.{k}"), *v);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub classifier: ClassifierConfig,
    pub cells: Vec<ClassifierCell>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let mut cells = ClassifierCell::table();
        cells.extend(ClassifierCell::concatenation());
        EvalConfig {
            classifier: ClassifierConfig::default(),
            cells,
        }
    }
}

/// Evaluates one model. `stats` must come from the same run; all losses,
/// active units and correlations are measured on `test`.
pub fn evaluate_model(
    model: &JpvaeModel,
    stats: &LatentStats,
    seed: u64,
    train: &ViewPairDataset,
    test: &ViewPairDataset,
    cfg: &EvalConfig,
) -> Result<RunMetrics> {
    let mut mats = Materials {
        model,
        stats,
        train,
        test,
        cache: BTreeMap::new(),
    };
    let mut recon = [0.0; 2];
    let mut imputation = [0.0; 2];
    for v in [View::One, View::Two] {
        let truth = test.view(v.number()).to_tensor();
        recon[v.index()] = reconstruction_loss(&truth, &mats.get(Source::Reconstructed(v), true)?)?;
        imputation[v.index()] = reconstruction_loss(&truth, &mats.get(Source::Imputed(v), true)?)?;
    }
    let (z1, z2) = model.posterior_means(test)?;
    let au = active_units_from_means(&z1.hconcat(&z2)?);
    let (corr, norm) = cross_correlation_from(&z1, &z2)?;

    let mut accuracy = BTreeMap::new();
    let train_labels = train.labels_usize();
    let test_labels = test.labels_usize();
    for cell in &cfg.cells {
        let x_train = mats.input(cell.train, false)?;
        let x_test = mats.input(cell.test, true)?;
        let epochs = if cell.train.is_original() {
            cfg.classifier.original_epochs
        } else {
            cfg.classifier.epochs
        };
        let ccfg = ClassifierConfig {
            seed: cfg.classifier.seed ^ seed,
            ..cfg.classifier.clone()
        };
        let clf = train_classifier(&x_train, &train_labels, &ccfg, epochs)?;
        accuracy.insert(cell.label(), evaluate_classifier(&clf, &x_test, &test_labels)?);
        // release memory held for sources no later cell needs
        let later: Vec<Source> = cfg
            .cells
            .iter()
            .skip_while(|c| *c != cell)
            .skip(1)
            .flat_map(|c| c.train.sources().into_iter().chain(c.test.sources()))
            .collect();
        mats.cache.retain(|(_, s), _| later.contains(s));
    }

    Ok(RunMetrics {
        variant: model.variant(),
        seed,
        recon,
        imputation,
        active_units: au,
        cross_corr: (0..corr.rows()).map(|r| corr.row_slice(r).to_vec()).collect(),
        cross_corr_norm: norm,
        accuracy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

pub fn mean_sd(values: &[f64]) -> Stat {
    let n = values.len();
    if n == 0 {
        return Stat {
            mean: f64::NAN,
            sd: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stat { mean, sd, n }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: CrossCovKind,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
    pub summary: Vec<VariantSummary>,
    /// Accuracy on the original views, per seed; independent of the variant.
    pub baselines: BTreeMap<String, Stat>,
}

impl MetricsReport {
    /// Groups runs by variant (in first-seen order) and aggregates each metric.
    pub fn aggregate(runs: Vec<RunMetrics>, baselines: BTreeMap<String, Vec<f64>>) -> Self {
        let mut order: Vec<CrossCovKind> = Vec::new();
        for r in &runs {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        let summary = order
            .into_iter()
            .map(|variant| {
                let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for r in runs.iter().filter(|r| r.variant == variant) {
                    for (k, v) in r.scalars() {
                        values.entry(k).or_default().push(v);
                    }
                }
                VariantSummary {
                    variant,
                    metrics: values.into_iter().map(|(k, v)| (k, mean_sd(&v))).collect(),
                }
            })
            .collect();
        MetricsReport {
            runs,
            summary,
            baselines: baselines.into_iter().map(|(k, v)| (k, mean_sd(&v))).collect(),
        }
    }

    pub fn variant(&self, kind: CrossCovKind) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == kind)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Usage(format!("cannot serialize report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.column() as u64, format!("bad report: {e}")))
    }

    /// One row per run: `variant, seed, metric...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let keys: Vec<String> = {
            let mut all: Vec<String> = self.runs.iter().flat_map(|r| r.scalars().into_keys()).collect();
            all.sort();
            all.dedup();
            all
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["variant".to_string(), "seed".to_string()];
        header.extend(keys.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.runs {
            let s = r.scalars();
            let mut row = vec![r.variant.label().to_string(), r.seed.to_string()];
            row.extend(keys.iter().map(|k| s.get(k).map_or(String::new(), |v| format!("{v}"))));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Usage(format!("csv: {other:?}")),
    }
}

/// Trains every variant for every seed, evaluates each model and aggregates.
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub variants: Vec<CrossCovKind>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub arch: Architecture,
    pub eval: EvalConfig,
    pub baselines: bool,
}

pub fn run_experiment_suite(
    train: &ViewPairDataset,
    test: &ViewPairDataset,
    cfg: &SuiteConfig,
    mut progress: impl FnMut(&str),
) -> Result<MetricsReport> {
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Usage("at least one seed and one variant are required".into()));
    }
    let mut runs = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            progress(&format!("training {} seed {seed}", variant.label()));
            let tcfg = TrainConfig {
                variant,
                seed,
                ..cfg.train.clone()
            };
            let out = train_with(train, &tcfg, cfg.arch.clone(), |_, m| {
                progress(&format!(
                    "  epoch {}: recon {:.2}/{:.2} kl {:.2} beta {:.3}",
                    m.epoch, m.recon1, m.recon2, m.kl, m.beta
                ));
                Ok(())
            })?;
            let stats = fit_latent_mle(&out.model, train)?;
            progress(&format!("evaluating {} seed {seed}", variant.label()));
            runs.push(evaluate_model(&out.model, &stats, seed, train, test, &cfg.eval)?);
        }
    }
    let mut baselines: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if cfg.baselines {
        for &seed in &cfg.seeds {
            for (label, acc) in original_baselines(train, test, &cfg.eval.classifier, seed)? {
                baselines.entry(label).or_default().push(acc);
            }
        }
    }
    Ok(MetricsReport::aggregate(runs, baselines))
}

/// Accuracy of classifiers on the original binary views.
pub fn original_baselines(
    train: &ViewPairDataset,
    test: &ViewPairDataset,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let fetch = |d: &ViewPairDataset, input: Input| -> Result<Tensor> {
        let get = |s: Source| match s {
            Source::Original(v) => Ok(d.view(v.number()).to_tensor()),
            _ => Err(Error::Usage("baselines use original views only".into())),
        };
        match input {
            Input::Single(s) => get(s),
            Input::Concat(a, b) => get(a)?.hconcat(&get(b)?),
        }
    };
    let ccfg = ClassifierConfig {
        seed: cfg.seed ^ seed,
        ..cfg.clone()
    };
    let mut out = Vec::new();
    for cell in ClassifierCell::originals() {
        let clf = train_classifier(&fetch(train, cell.train)?, &train.labels_usize(), &ccfg, cfg.original_epochs)?;
        out.push((cell.label(), evaluate_classifier(&clf, &fetch(test, cell.test)?, &test.labels_usize())?));
    }
    Ok(out)
}
