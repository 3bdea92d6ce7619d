//! Desk-scale check of joint supervision over semantic atoms.
//!
//! Synthetic features are drawn from one isotropic Gaussian blob per atom.
//! Each dataset only reveals the label whose atom group contains the true
//! atom. A linear softmax classifier over atoms is trained on all datasets
//! at once with the group-summed cross-entropy, then scored against the
//! hidden atoms.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conversion::{argmax, grad_logits, group_nll, group_sum, softmax};
use crate::error::{invalid, Error, Result};
use crate::metrics::{knowledgeability, miou_mpa, DEFAULT_THRESHOLD_COUNT};
use crate::raster_io::ConfusionMatrix;
use crate::taxonomy::{AtomTaxonomy, TaxonomyFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDraw {
    /// Dataset name in the taxonomy.
    pub name: String,
    /// Atoms whose samples this dataset contains, drawn in equal shares.
    pub atoms: Vec<usize>,
    pub samples: usize,
    /// Samples contributed to every training batch.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub decay: f64,
    /// Run a finite-difference gradient check every this many steps (0 = never).
    #[serde(default)]
    pub gradcheck_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScenario {
    pub taxonomy: TaxonomyFile,
    pub blobs: Vec<Blob>,
    pub datasets: Vec<DatasetDraw>,
    /// Held-out samples per evaluated atom.
    pub heldout_per_atom: usize,
    /// Atoms in the held-out set; defaults to every non-void atom.
    #[serde(default)]
    pub heldout_atoms: Option<Vec<usize>>,
    pub seed: u64,
    pub train: TrainConfig,
}

impl SyntheticScenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn dim(&self) -> usize {
        self.blobs.first().map_or(0, |b| b.mean.len())
    }

    pub fn taxonomy(&self) -> Result<AtomTaxonomy> {
        AtomTaxonomy::try_from(self.taxonomy.clone())
    }

    pub fn heldout_atoms(&self) -> Vec<usize> {
        self.heldout_atoms
            .clone()
            .unwrap_or_else(|| (1..self.taxonomy.atoms.len()).collect())
    }

    fn check(&self, tax: &AtomTaxonomy) -> Result<()> {
        let a = tax.atom_count();
        if a < 2 {
            return Err(invalid("scenario needs at least two atoms"));
        }
        if self.blobs.len() != a {
            return Err(invalid(format!("{} blobs for {a} atoms", self.blobs.len())));
        }
        let d = self.dim();
        if d == 0 {
            return Err(invalid("blob means must be non-empty"));
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if b.mean.len() != d || !(b.std >= 0.0) || b.mean.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("blob {i} is malformed")));
            }
            if self.blobs[..i].iter().any(|o| o.mean == b.mean) {
                return Err(invalid(format!("blob {i} repeats an earlier mean")));
            }
        }
        for ds in &self.datasets {
            tax.dataset(&ds.name)?;
            if ds.atoms.is_empty() || ds.atoms.iter().any(|&x| x >= a) {
                return Err(invalid(format!(
                    "dataset `{}` atom list is invalid",
                    ds.name
                )));
            }
        }
        if self.heldout_atoms().iter().any(|&x| x >= a) {
            return Err(invalid("held-out atom out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Label id in the owning dataset.
    pub label: usize,
    /// Hidden ground-truth atom.
    pub atom: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub datasets: Vec<(String, Vec<Sample>)>,
    /// Labels are atom ids here.
    pub heldout: Vec<Sample>,
}

fn draw(blob: &Blob, rng: &mut ChaCha8Rng) -> Vec<f64> {
    blob.mean
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + blob.std * z
        })
        .collect()
}

/// Draws every dataset and the held-out set. Deterministic in the seed.
pub fn generate(scenario: &SyntheticScenario) -> Result<GeneratedData> {
    let tax = scenario.taxonomy()?;
    scenario.check(&tax)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut datasets = Vec::with_capacity(scenario.datasets.len());
    for ds in &scenario.datasets {
        let mut samples = Vec::with_capacity(ds.samples);
        for i in 0..ds.samples {
            let atom = ds.atoms[i % ds.atoms.len()];
            samples.push(Sample {
                features: draw(&scenario.blobs[atom], &mut rng),
                label: tax.label_of_atom(&ds.name, atom)?,
                atom,
            });
        }
        samples.shuffle(&mut rng);
        datasets.push((ds.name.clone(), samples));
    }
    let mut heldout = Vec::new();
    for atom in scenario.heldout_atoms() {
        for _ in 0..scenario.heldout_per_atom {
            heldout.push(Sample {
                features: draw(&scenario.blobs[atom], &mut rng),
                label: atom,
                atom,
            });
        }
    }
    Ok(GeneratedData { datasets, heldout })
}

/// Linear map from `dim` features to `atoms` logits. `weights` is row-major
/// `dim × atoms`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearModel {
    pub dim: usize,
    pub atoms: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub decay: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize, atoms: usize, decay: f64) -> Self {
        LinearModel {
            dim,
            atoms,
            weights: vec![0.0; dim * atoms],
            bias: vec![0.0; atoms],
            decay,
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (j, &xj) in x.iter().enumerate() {
            let row = &self.weights[j * self.atoms..(j + 1) * self.atoms];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xj * w;
            }
        }
        out
    }

    pub fn predict_atom(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn parameter_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weights.len();
        if i < nw {
            &mut self.weights[i]
        } else {
            &mut self.bias[i - nw]
        }
    }
}

/// A batch entry: features plus the atom group of its label.
type BatchItem<'a> = (&'a [f64], &'a [usize]);

fn batch_loss(model: &LinearModel, batch: &[BatchItem<'_>]) -> f64 {
    let data: f64 = batch
        .iter()
        .map(|(x, group)| group_nll(&model.logits(x), group))
        .sum::<f64>()
        / batch.len() as f64;
    let l2: f64 = model.weights.iter().map(|w| w * w).sum();
    data + 0.5 * model.decay * l2
}

/// Gradient of [`batch_loss`] laid out as `weights` then `bias`.
fn batch_gradient(model: &LinearModel, batch: &[BatchItem<'_>]) -> Result<Vec<f64>> {
    let a = model.atoms;
    let mut grad = vec![0.0; model.parameter_count()];
    let scale = 1.0 / batch.len() as f64;
    for (x, group) in batch {
        let g = grad_logits(&softmax(&model.logits(x)), group)?;
        for (j, &xj) in x.iter().enumerate() {
            for (m, &gm) in g.iter().enumerate() {
                grad[j * a + m] += scale * xj * gm;
            }
        }
        for (m, &gm) in g.iter().enumerate() {
            grad[model.weights.len() + m] += scale * gm;
        }
    }
    for (gw, w) in grad.iter_mut().zip(&model.weights) {
        *gw += model.decay * w;
    }
    Ok(grad)
}

/// Max |analytic − central difference| over every parameter.
fn gradient_deviation(model: &LinearModel, batch: &[BatchItem<'_>], eps: f64) -> Result<f64> {
    let analytic = batch_gradient(model, batch)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *probe.parameter_mut(i);
        *probe.parameter_mut(i) = orig + eps;
        let up = batch_loss(&probe, batch);
        *probe.parameter_mut(i) = orig - eps;
        let down = batch_loss(&probe, batch);
        *probe.parameter_mut(i) = orig;
        worst = worst.max(((up - down) / (2.0 * eps) - a).abs());
    }
    Ok(worst)
}

pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResidual {
    pub step: usize,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub model: LinearModel,
    /// Batch loss before each update.
    pub loss_curve: Vec<f64>,
    pub gradcheck: Vec<GradcheckResidual>,
}

/// SGD with optional momentum on the group-summed cross-entropy plus
/// `decay/2·‖W‖²`. Every step draws `batch` samples from each dataset,
/// cycling through each dataset independently.
pub fn train(
    mut model: LinearModel,
    data: &GeneratedData,
    tax: &AtomTaxonomy,
    draws: &[DatasetDraw],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(config.lr >= 0.0) || !(0.0..1.0).contains(&config.momentum) || !(config.decay >= 0.0) {
        return Err(invalid(
            "lr and decay must be non-negative and momentum in [0, 1)",
        ));
    }
    let mut sources = Vec::new();
    for (name, samples) in &data.datasets {
        let per_batch = draws
            .iter()
            .find(|d| &d.name == name)
            .map_or(1, |d| d.batch);
        if per_batch == 0 || samples.is_empty() {
            continue;
        }
        let space = tax.dataset(name)?;
        let items: Vec<BatchItem<'_>> = samples
            .iter()
            .map(|s| (s.features.as_slice(), space.group(s.label)))
            .collect();
        sources.push((items, per_batch));
    }
    if sources.is_empty() {
        return Err(invalid("no dataset contributes to the training batch"));
    }
    for (items, _) in &sources {
        if items.iter().any(|(x, _)| x.len() != model.dim) {
            return Err(invalid("feature dimension differs from the model"));
        }
    }

    let mut cursors = vec![0usize; sources.len()];
    let mut velocity = vec![0.0; model.parameter_count()];
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut gradcheck = Vec::new();
    let mut batch: Vec<BatchItem<'_>> = Vec::new();
    for step in 0..config.steps {
        batch.clear();
        for ((items, per_batch), cursor) in sources.iter().zip(cursors.iter_mut()) {
            for _ in 0..*per_batch {
                batch.push(items[*cursor]);
                *cursor = (*cursor + 1) % items.len();
            }
        }
        let loss = batch_loss(&model, &batch);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step} (loss {loss})"
            )));
        }
        loss_curve.push(loss);
        if config.gradcheck_every > 0 && step % config.gradcheck_every == 0 {
            gradcheck.push(GradcheckResidual {
                step,
                max_deviation: gradient_deviation(&model, &batch, GRADCHECK_EPS)?,
            });
        }
        let grad = batch_gradient(&model, &batch)?;
        for (i, (v, g)) in velocity.iter_mut().zip(&grad).enumerate() {
            *v = config.momentum * *v + g;
            *model.parameter_mut(i) -= config.lr * *v;
        }
    }
    Ok(TrainOutcome {
        model,
        loss_curve,
        gradcheck,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub atom_accuracy: f64,
    pub label_accuracy: BTreeMap<String, f64>,
    /// Per-atom IoU on the held-out set; `None` for atoms never seen or predicted.
    pub atom_iou: Vec<Option<f64>>,
    /// Over non-void atoms with a budget of `atoms - 1`.
    pub knowledgeability: f64,
}

/// Scores a model on held-out samples whose labels are atom ids.
pub fn evaluate(model: &LinearModel, heldout: &[Sample], tax: &AtomTaxonomy) -> Result<Evaluation> {
    let a = model.atoms;
    if tax.atom_count() != a {
        return Err(invalid("model and taxonomy disagree on the atom count"));
    }
    let mut cm = ConfusionMatrix::new(a);
    let mut label_hits: BTreeMap<String, usize> =
        tax.datasets().keys().map(|k| (k.clone(), 0)).collect();
    for s in heldout {
        let sigma = softmax(&model.logits(&s.features));
        let pred = argmax(&sigma);
        cm.add(s.atom, pred, 1);
        for (name, space) in tax.datasets() {
            let label_probs = group_sum(&sigma, space)?;
            if Some(argmax(&label_probs)) == space.label_of_atom(s.atom) {
                *label_hits.get_mut(name).expect("dataset key") += 1;
            }
        }
    }
    let n = heldout.len().max(1) as f64;
    let atom_accuracy = (0..a).map(|c| cm.get(c, c)).sum::<u64>() as f64 / n;
    let scores = miou_mpa(&cm);
    let ious: Vec<f64> = scores.per_class_iou[1..]
        .iter()
        .flatten()
        .copied()
        .collect();
    let knowledgeability = knowledgeability(&ious, a - 1, DEFAULT_THRESHOLD_COUNT)?;
    Ok(Evaluation {
        atom_accuracy,
        label_accuracy: label_hits
            .into_iter()
            .map(|(k, v)| (k, v as f64 / n))
            .collect(),
        atom_iou: scores.per_class_iou,
        knowledgeability,
    })
}

/// Everything `generate → train → evaluate` produces for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub loss_curve: Vec<f64>,
    pub evaluation: Evaluation,
    pub gradcheck: Vec<GradcheckResidual>,
    pub max_gradcheck_deviation: f64,
}

pub fn run(scenario: &SyntheticScenario) -> Result<(ToyReport, LinearModel)> {
    let tax = scenario.taxonomy()?;
    let data = generate(scenario)?;
    let model = LinearModel::zeros(scenario.dim(), tax.atom_count(), scenario.train.decay);
    let outcome = train(model, &data, &tax, &scenario.datasets, &scenario.train)?;
    let evaluation = evaluate(&outcome.model, &data.heldout, &tax)?;
    let max_gradcheck_deviation = outcome
        .gradcheck
        .iter()
        .map(|g| g.max_deviation)
        .fold(0.0, f64::max);
    Ok((
        ToyReport {
            loss_curve: outcome.loss_curve,
            evaluation,
            gradcheck: outcome.gradcheck,
            max_gradcheck_deviation,
        },
        outcome.model,
    ))
}
