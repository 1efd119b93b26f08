//! Finite-difference verification of the training objectives on small
//! randomized models.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::losses::{
    phase1_loss, phase3_loss, LossError, LossWeights, MfaPartner, PrototypeFlavor, PrototypeSet,
    PrototypeSource,
};
use crate::model::{BoundModel, Model, ModelConfig};
use crate::seed::{rng_for, Stream};
use crate::tensor::{finite_difference_check, Tensor};

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckCase {
    pub objective: String,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

struct Fixture {
    params: Vec<Tensor>,
    inputs: Tensor,
    labels: Vec<usize>,
    prototypes: PrototypeSet,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = rng_for(Stream::Probe, &[seed, 0x9c]);
    let classes = 3;
    let config = ModelConfig {
        input_dim: rng.random_range(2..=5),
        hidden: vec![rng.random_range(3..=6)],
        feature_dim: rng.random_range(2..=4),
        num_classes: classes,
    };
    let model = Model::init(&config, seed);
    let mut params: Vec<Tensor> = Vec::new();
    let flat = model.flatten();
    let mut offset = 0;
    let mut dims = vec![config.input_dim];
    dims.extend(&config.hidden);
    dims.push(config.feature_dim);
    dims.push(classes);
    for w in dims.windows(2) {
        let (r, c) = (w[0], w[1]);
        let weight = Tensor::new(r, c, flat[offset..offset + r * c].to_vec()).expect("sizes match");
        offset += r * c;
        // Nonzero biases so their gradients are exercised away from init.
        let bias = Tensor::new(
            1,
            c,
            (0..c)
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .expect("sizes match");
        offset += c;
        params.push(weight);
        params.push(bias);
    }

    let batch = 6;
    let inputs = Tensor::new(
        batch,
        config.input_dim,
        (0..batch * config.input_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
    .expect("sizes match");
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let mut prototypes = PrototypeSet::new(
        config.feature_dim,
        PrototypeFlavor::Fused,
        PrototypeSource::Server,
    );
    // Class 2 has no prototype on odd seeds, exercising skipped rows.
    let present = if seed % 2 == 1 { classes - 1 } else { classes };
    for k in 0..present {
        let v: Vec<f64> = (0..config.feature_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        prototypes.insert(k, v).expect("dims match");
    }
    Fixture {
        params,
        inputs,
        labels,
        prototypes,
    }
}

/// Every objective variant checked on `seeds` randomized fixtures.
pub fn gradient_suite(seeds: u64) -> Result<Vec<GradCheckCase>, LossError> {
    let variants: [(&str, Option<(LossWeights, MfaPartner)>); 6] = [
        ("local", None),
        (
            "cross lambda_hy=0",
            Some((weights(1.0, 0.0, 0.0), MfaPartner::Sample)),
        ),
        (
            "cross lambda_hy=0.5",
            Some((weights(1.0, 0.0, 0.5), MfaPartner::Sample)),
        ),
        (
            "cross mixup",
            Some((weights(0.0, 0.7, 0.0), MfaPartner::Sample)),
        ),
        (
            "cross full",
            Some((weights(0.8, 0.5, 0.5), MfaPartner::Sample)),
        ),
        (
            "cross full prototype-partner",
            Some((weights(0.8, 0.5, 0.5), MfaPartner::Prototype)),
        ),
    ];
    let mut out = Vec::new();
    for seed in 0..seeds {
        let fx = fixture(seed);
        for (name, variant) in &variants {
            let err = finite_difference_check(
                |tape, vars| {
                    let bound = BoundModel::from_vars(vars)
                        .map_err(|e| crate::tensor::TensorError::Input(e.to_string()))?;
                    let loss = match variant {
                        None => {
                            let x = tape.constant(fx.inputs.clone());
                            let f = bound.encode(tape, x)?;
                            let logits = bound.classify(tape, f)?;
                            phase1_loss(tape, logits, &fx.labels)
                        }
                        Some((w, partner)) => phase3_loss(
                            tape,
                            &bound,
                            &fx.inputs,
                            &fx.labels,
                            &fx.prototypes,
                            w,
                            *partner,
                            seed,
                        )
                        .map(|t| t.total),
                    };
                    loss.map_err(|e| match e {
                        LossError::Tensor(t) => t,
                        other => crate::tensor::TensorError::Input(other.to_string()),
                    })
                },
                &fx.params,
                STEP,
            )?;
            out.push(GradCheckCase {
                objective: name.to_string(),
                seed,
                max_rel_error: err,
            });
        }
    }
    Ok(out)
}

fn weights(kappa: f64, eta: f64, lambda_hy: f64) -> LossWeights {
    LossWeights {
        kappa,
        eta,
        lambda_hy,
        ..LossWeights::default()
    }
}
