//! Training objectives for local training and prototype-guided cross-training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::BoundModel;
use crate::seed::{rng_for, Stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss input: {0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeFlavor {
    Local,
    Global,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeSource {
    Client(usize),
    Server,
}

/// Class-indexed feature centroids. Classes may be missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub dim: usize,
    pub flavor: PrototypeFlavor,
    pub source: PrototypeSource,
    pub entries: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeSet {
    pub fn new(dim: usize, flavor: PrototypeFlavor, source: PrototypeSource) -> Self {
        PrototypeSet {
            dim,
            flavor,
            source,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class: usize, vector: Vec<f64>) -> Result<(), LossError> {
        if vector.len() != self.dim {
            return Err(LossError::Input(format!(
                "prototype of class {class} has dim {} not {}",
                vector.len(),
                self.dim
            )));
        }
        self.entries.insert(class, vector);
        Ok(())
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.entries.get(&class).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Prototypes stacked in ascending class order, with their labels.
    pub fn to_matrix(&self) -> (Tensor, Vec<usize>) {
        let rows: Vec<&Vec<f64>> = self.entries.values().collect();
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for r in &rows {
            data.extend_from_slice(r);
        }
        (
            Tensor::new(rows.len(), self.dim, data).expect("dims checked on insert"),
            self.classes(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MfaPartner {
    /// Mix with another sample of the batch.
    #[default]
    Sample,
    /// Mix with the fused prototype of the sample's own class.
    Prototype,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kappa: f64,
    pub eta: f64,
    pub tau2: f64,
    pub lambda_hy: f64,
    pub lambda_mix: f64,
    pub lambda_fuse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kappa: 1.0,
            eta: 0.1,
            tau2: 0.5,
            lambda_hy: 0.3,
            lambda_mix: 0.3,
            lambda_fuse: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must be in [0, 1], got {v}"))
            }
        };
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(format!("kappa must be >= 0, got {}", self.kappa));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) {
            return Err(format!("tau2 must be > 0, got {}", self.tau2));
        }
        unit("lambda_hy", self.lambda_hy)?;
        unit("lambda_mix", self.lambda_mix)?;
        unit("lambda_fuse", self.lambda_fuse)
    }
}

/// Blends local and global prototypes class by class.
///
/// Shared classes get `λ·global + (1−λ)·local`; classes present in only one
/// input are copied from it.
pub fn fuse_prototypes(
    local: &PrototypeSet,
    global: &PrototypeSet,
    lambda_fuse: f64,
) -> Result<PrototypeSet, LossError> {
    if local.dim != global.dim {
        return Err(LossError::Input(format!(
            "fusing prototypes of dim {} and {}",
            local.dim, global.dim
        )));
    }
    let mut fused = PrototypeSet::new(local.dim, PrototypeFlavor::Fused, local.source);
    for (&k, g) in &global.entries {
        let v = match local.entries.get(&k) {
            Some(l) => l
                .iter()
                .zip(g)
                .map(|(l, g)| lambda_fuse * g + (1.0 - lambda_fuse) * l)
                .collect(),
            None => g.clone(),
        };
        fused.entries.insert(k, v);
    }
    for (&k, l) in &local.entries {
        fused.entries.entry(k).or_insert_with(|| l.clone());
    }
    Ok(fused)
}

#[derive(Clone, Copy, Debug)]
pub struct ApclOutput {
    pub loss: Var,
    /// Samples whose class has no prototype.
    pub skipped: usize,
}

/// Prototype contrastive loss on extrapolated features.
///
/// Each sample `f` is pushed past its positive prototype to
/// `f + λ_hy·(f − u⁺)` and scored by temperature-scaled cosine
/// similarity against every prototype; the loss is the mean cross entropy
/// of picking `u⁺`. Prototypes are constants.
pub fn apcl_loss(
    tape: &mut Tape,
    features: Var,
    labels: &[usize],
    fused: &PrototypeSet,
    lambda_hy: f64,
    tau2: f64,
) -> Result<ApclOutput, LossError> {
    if fused.is_empty() {
        return Err(LossError::Input("APCL needs at least one prototype".into()));
    }
    let (rows, dim) = tape.value(features).shape();
    if dim != fused.dim || rows != labels.len() {
        return Err(LossError::Input(format!(
            "{rows}x{dim} features with {} labels against dim-{} prototypes",
            labels.len(),
            fused.dim
        )));
    }
    let (protos, classes) = fused.to_matrix();
    let slot: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &k)| (k, i)).collect();

    let mut kept = Vec::with_capacity(rows);
    let mut targets = Vec::with_capacity(rows);
    for (i, l) in labels.iter().enumerate() {
        if let Some(&s) = slot.get(l) {
            kept.push(i);
            targets.push(s);
        }
    }
    let skipped = rows - kept.len();
    if kept.is_empty() {
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(ApclOutput { loss, skipped });
    }

    let fx = if skipped == 0 {
        features
    } else {
        tape.gather_rows(features, &kept)?
    };
    let positives = tape.constant(protos.select_rows(&targets));
    let stretched = tape.scale(fx, 1.0 + lambda_hy);
    let pulled = tape.scale(positives, lambda_hy);
    let hybrid = tape.sub(stretched, pulled)?;
    let bank = tape.constant(protos);
    let sims = tape.cosine_rows(hybrid, bank)?;
    let logits = tape.scale(sims, 1.0 / tau2);
    let loss = tape.softmax_cross_entropy(logits, &targets)?;
    Ok(ApclOutput { loss, skipped })
}

/// `λ·a + (1−λ)·b` for plain vectors.
pub fn mixup_features(a: &[f64], b: &[f64], lambda_mix: f64) -> Result<Vec<f64>, LossError> {
    if a.len() != b.len() {
        return Err(LossError::Input(format!(
            "mixing vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| lambda_mix * x + (1.0 - lambda_mix) * y)
        .collect())
}

/// Row-wise mixup on the tape.
pub fn mix_rows(tape: &mut Tape, a: Var, b: Var, lambda_mix: f64) -> Result<Var, LossError> {
    let sa = tape.scale(a, lambda_mix);
    let sb = tape.scale(b, 1.0 - lambda_mix);
    Ok(tape.add(sa, sb)?)
}

/// `λ·CE(H(f_mix), y_a) + (1−λ)·CE(H(f_mix), y_b)`, both on the same logits.
pub fn mixup_loss(
    tape: &mut Tape,
    model: &BoundModel,
    mixed: Var,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda_mix: f64,
) -> Result<Var, LossError> {
    if labels_a.len() != labels_b.len() || labels_a.len() != tape.value(mixed).rows() {
        return Err(LossError::Input(format!(
            "mixup over {} rows with {} and {} labels",
            tape.value(mixed).rows(),
            labels_a.len(),
            labels_b.len()
        )));
    }
    let logits = model.classify(tape, mixed)?;
    let ce_a = tape.softmax_cross_entropy(logits, labels_a)?;
    let ce_b = tape.softmax_cross_entropy(logits, labels_b)?;
    let wa = tape.scale(ce_a, lambda_mix);
    let wb = tape.scale(ce_b, 1.0 - lambda_mix);
    Ok(tape.add(wa, wb)?)
}

/// Local-training objective: plain cross entropy.
pub fn phase1_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    Ok(tape.softmax_cross_entropy(logits, labels)?)
}

/// Cross-training loss and its parts.
#[derive(Clone, Copy, Debug)]
pub struct Phase3Terms {
    pub total: Var,
    pub cls: f64,
    /// Zero when `kappa == 0` (the term is not evaluated).
    pub apcl: f64,
    /// Zero when `eta == 0` (the term is not evaluated).
    pub mix: f64,
    pub apcl_skipped: usize,
}

/// `L_cls + κ·L_APCL + η·L_mix` on one batch.
#[allow(clippy::too_many_arguments)]
pub fn phase3_loss(
    tape: &mut Tape,
    model: &BoundModel,
    inputs: &Tensor,
    labels: &[usize],
    fused: &PrototypeSet,
    weights: &LossWeights,
    partner: MfaPartner,
    pairing_seed: u64,
) -> Result<Phase3Terms, LossError> {
    let x = tape.constant(inputs.clone());
    let features = model.encode(tape, x)?;
    let logits = model.classify(tape, features)?;
    let cls = tape.softmax_cross_entropy(logits, labels)?;
    let mut total = cls;
    let mut terms = Phase3Terms {
        total,
        cls: tape.value(cls).item(),
        apcl: 0.0,
        mix: 0.0,
        apcl_skipped: 0,
    };

    if weights.kappa > 0.0 {
        let out = apcl_loss(
            tape,
            features,
            labels,
            fused,
            weights.lambda_hy,
            weights.tau2,
        )?;
        terms.apcl = tape.value(out.loss).item();
        terms.apcl_skipped = out.skipped;
        let scaled = tape.scale(out.loss, weights.kappa);
        total = tape.add(total, scaled)?;
    }

    if weights.eta > 0.0 {
        let (partner_rows, labels_b) = match partner {
            MfaPartner::Sample => {
                let mut perm: Vec<usize> = (0..labels.len()).collect();
                perm.shuffle(&mut rng_for(Stream::Mixup, &[pairing_seed]));
                let rows = tape.gather_rows(features, &perm)?;
                (rows, perm.iter().map(|&i| labels[i]).collect::<Vec<_>>())
            }
            MfaPartner::Prototype => {
                // Rows whose class has no prototype mix with their own feature.
                let (rows, cols) = tape.value(features).shape();
                let mut protos = vec![0.0; rows * cols];
                let mut own = vec![0.0; rows * cols];
                for (i, &l) in labels.iter().enumerate() {
                    let span = i * cols..(i + 1) * cols;
                    match fused.get(l) {
                        Some(p) => protos[span].copy_from_slice(p),
                        None => own[span].fill(1.0),
                    }
                }
                let protos = tape.constant(Tensor::new(rows, cols, protos)?);
                let mask = tape.constant(Tensor::new(rows, cols, own)?);
                let kept = tape.mul(features, mask)?;
                (tape.add(protos, kept)?, labels.to_vec())
            }
        };
        let mixed = mix_rows(tape, features, partner_rows, weights.lambda_mix)?;
        let mix = mixup_loss(tape, model, mixed, labels, &labels_b, weights.lambda_mix)?;
        terms.mix = tape.value(mix).item();
        let scaled = tape.scale(mix, weights.eta);
        total = tape.add(total, scaled)?;
    }

    terms.total = total;
    Ok(terms)
}
