//! Gradient verification against central finite differences.
//!
//! The checks here only ever evaluate forward passes, so they are an
//! independent oracle for the reverse-mode engine. Everything runs in `f64`
//! through the same generic code paths the `f32` training build uses.

use crate::tensor::{Scalar, Tensor};

/// Step size for central differences in 64-bit.
pub const FD_STEP: f64 = 1e-4;

/// Central finite-difference gradient of `loss_fn` with respect to every
/// element of `param`. The parameter is perturbed in place and restored.
pub fn central_diff<T: Scalar>(
    param: &Tensor<T>,
    loss_fn: &mut dyn FnMut() -> f64,
    step: f64,
) -> Vec<f64> {
    let original = param.to_vec();
    let mut grads = Vec::with_capacity(original.len());
    let h = T::from_f64(step);
    for i in 0..original.len() {
        let mut values = original.clone();
        values[i] = original[i] + h;
        param.set_data(&values).expect("same length");
        let plus = loss_fn();
        values[i] = original[i] - h;
        param.set_data(&values).expect("same length");
        let minus = loss_fn();
        grads.push((plus - minus) / (2.0 * step));
    }
    param.set_data(&original).expect("same length");
    grads
}

/// Relative error between an analytic and a numeric gradient element. The
/// denominator is floored so that finite-difference noise on near-zero
/// gradients does not register as error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(1e-2);
    (analytic - numeric).abs() / denom
}

/// Worst relative error across a gradient vector. `analytic` may be `None`
/// when backward never touched the parameter, which counts as all zeros.
pub fn max_relative_error(analytic: Option<&[f64]>, numeric: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (i, &n) in numeric.iter().enumerate() {
        let a = analytic.map_or(0.0, |g| g[i]);
        worst = worst.max(relative_error(a, n));
    }
    worst
}

use crate::bimodel::{BiModel, LabelFeeding, VocabDims};
use crate::config::{ModelConfig, ModelVariant};
use crate::data::Batch;
use crate::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shape of the toy model used for full-model verification.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub label_embed_dim: usize,
    pub vocab_words: usize,
    pub intents: usize,
    pub slot_rows: usize,
    pub lengths: [usize; 2],
    pub seed: u64,
    /// Perturbation injected into one analytic gradient; a negative control
    /// that must make the check fail.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            hidden_dim: 8,
            num_layers: 2,
            embed_dim: 10,
            label_embed_dim: 6,
            vocab_words: 20,
            intents: 3,
            slot_rows: 7,
            lengths: [3, 2],
            seed: 1234,
            corrupt: None,
        }
    }
}

/// Worst relative error for one (variant, loss, parameter) triple.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub variant: ModelVariant,
    pub loss: &'static str,
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> &ParamCheck {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("report is never empty")
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.worst().max_rel_err < threshold
    }
}

fn synthetic_batch(settings: &GradCheckSettings, rng: &mut ChaCha8Rng) -> Batch {
    let seq_len = *settings.lengths.iter().max().expect("two lengths");
    let b = settings.lengths.len();
    let mut word_ids = vec![vec![0usize; b]; seq_len];
    let mut tag_ids = vec![vec![0usize; b]; seq_len];
    let mut mask = vec![vec![false; b]; seq_len];
    for (elem, &len) in settings.lengths.iter().enumerate() {
        for t in 0..len {
            // Ids 2.. so the reserved rows stay out of the gold labels.
            word_ids[t][elem] = rng.gen_range(2..settings.vocab_words);
            tag_ids[t][elem] = rng.gen_range(2..settings.slot_rows);
            mask[t][elem] = true;
        }
    }
    let intent_ids = (0..b).map(|_| rng.gen_range(0..settings.intents)).collect();
    Batch {
        word_ids,
        tag_ids,
        intent_ids,
        mask,
        lengths: settings.lengths.to_vec(),
        indices: (0..b).collect(),
        unknown_gold_symbols: 0,
    }
}

/// Check every parameter gradient of both losses, through both model
/// variants, against central finite differences in `f64`. The shared states
/// are computed once and frozen, exactly as one training phase sees them.
pub fn check_bimodel(settings: &GradCheckSettings) -> GradCheckReport {
    let mut checks = Vec::new();
    for variant in [ModelVariant::WithDecoder, ModelVariant::WithoutDecoder] {
        let config = ModelConfig {
            variant,
            hidden_dim: settings.hidden_dim,
            num_layers: settings.num_layers,
            embed_dim: settings.embed_dim,
            label_embed_dim: settings.label_embed_dim,
            tie_embeddings: true,
            share_states: true,
        };
        let dims = VocabDims {
            words: settings.vocab_words,
            intents: settings.intents,
            slot_rows: settings.slot_rows,
        };
        let model: BiModel<f64> = BiModel::new(config, dims, settings.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed);
        let batch = synthetic_batch(settings, &mut rng);
        let shared = model.compute_shared_states(&batch).expect("valid batch");

        let losses: [(&'static str, Box<dyn Fn() -> f64>); 2] = [
            ("L1", {
                let (model, batch, shared) = (&model, &batch, &shared);
                Box::new(move || {
                    let mut tape = Tape::new();
                    let logits = model.predict_intent(&mut tape, batch, shared).expect("forward");
                    model
                        .intent_loss(&mut tape, &logits, &batch.intent_ids)
                        .expect("loss")
                        .item()
                })
            }),
            ("L2", {
                let (model, batch, shared) = (&model, &batch, &shared);
                Box::new(move || {
                    let mut tape = Tape::new();
                    let logits = model
                        .predict_slots(&mut tape, batch, shared, LabelFeeding::Teacher(&batch.tag_ids))
                        .expect("forward");
                    model
                        .slot_loss(&mut tape, &logits, &batch.tag_ids, &batch.mask)
                        .expect("loss")
                        .item()
                })
            }),
        ];

        for (loss_name, loss_fn) in &losses {
            // Analytic pass.
            model.zero_grads();
            {
                let mut tape = Tape::new();
                let loss = match *loss_name {
                    "L1" => {
                        let logits = model
                            .predict_intent(&mut tape, &batch, &shared)
                            .expect("forward");
                        model
                            .intent_loss(&mut tape, &logits, &batch.intent_ids)
                            .expect("loss")
                    }
                    _ => {
                        let logits = model
                            .predict_slots(
                                &mut tape,
                                &batch,
                                &shared,
                                LabelFeeding::Teacher(&batch.tag_ids),
                            )
                            .expect("forward");
                        model
                            .slot_loss(&mut tape, &logits, &batch.tag_ids, &batch.mask)
                            .expect("loss")
                    }
                };
                tape.backward(&loss).expect("backward");
            }

            let mut corrupt_budget = settings.corrupt;
            for (name, param) in model.named_parameters() {
                let mut analytic = param.grad();
                if let (Some(delta), Some(g)) = (corrupt_budget.take(), analytic.as_mut()) {
                    g[0] += delta;
                }
                let mut eval = || loss_fn();
                let numeric = central_diff(&param, &mut eval, FD_STEP);
                checks.push(ParamCheck {
                    variant,
                    loss: loss_name,
                    name: name.clone(),
                    max_rel_err: max_relative_error(analytic.as_deref(), &numeric),
                });
            }
        }
    }
    GradCheckReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_settings() -> GradCheckSettings {
        GradCheckSettings {
            hidden_dim: 4,
            num_layers: 2,
            embed_dim: 5,
            label_embed_dim: 3,
            vocab_words: 9,
            intents: 3,
            slot_rows: 5,
            lengths: [3, 2],
            seed: 99,
            corrupt: None,
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let report = check_bimodel(&fast_settings());
        let worst = report.worst();
        assert!(
            report.passed(1e-3),
            "worst gradient: {} {} {} = {}",
            worst.variant,
            worst.loss,
            worst.name,
            worst.max_rel_err
        );
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        let settings = GradCheckSettings {
            corrupt: Some(0.05),
            ..fast_settings()
        };
        let report = check_bimodel(&settings);
        assert!(!report.passed(1e-3));
        assert_eq!(report.worst().name, "word_embedding");
    }

    #[test]
    fn relative_error_floors_the_denominator() {
        assert!(relative_error(0.0, 1e-9) < 1e-6);
        assert!(relative_error(1.0, 1.1) > 0.01);
        assert_eq!(max_relative_error(None, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn probe_default_gradcheck_timing() {
        let start = std::time::Instant::now();
        let report = crate::gradcheck::check_bimodel(&crate::gradcheck::GradCheckSettings::default());
        let worst = report.worst();
        eprintln!("default gradcheck: {} checks, worst {} {} {} = {:.2e}, took {:?}",
            report.checks.len(), worst.variant, worst.loss, worst.name, worst.max_rel_err, start.elapsed());
        assert!(report.passed(1e-3));
    }
}
