//! Asynchronous training: alternating updates of the two task networks.

use serde::{Deserialize, Serialize};

use super::{BiModel, LabelFeeding, ModelError};
use crate::config::TrainConfig;
use crate::data::{batches, Batch, Utterance, Vocabulary};
use crate::metrics;
use crate::tensor::{clip_grad_norm, AdamState, Scalar, Tape};

/// One training iteration on one batch, in four phases:
///
/// 1. both encoders produce detached shared states;
/// 2. the intent network runs on `h2`, minimizes `L1`, and only its
///    parameters (plus the word embeddings) step;
/// 3. `h1` is recomputed from the just-updated intent network (when
///    `refresh_h1` is set);
/// 4. the slot network runs teacher-forced on `h1`, minimizes `L2`, and only
///    its parameters (plus the word embeddings) step.
///
/// Returns `(L1, L2)`.
pub fn train_iteration<T: Scalar>(
    model: &BiModel<T>,
    batch: &Batch,
    adam_intent: &mut AdamState<T>,
    adam_slot: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<(f64, f64), ModelError> {
    let mut shared = model.compute_shared_states(batch)?;

    let mut tape = Tape::new();
    let intent_logits = model.predict_intent(&mut tape, batch, &shared)?;
    let l1 = model.intent_loss(&mut tape, &intent_logits, &batch.intent_ids)?;
    model.zero_grads();
    tape.backward(&l1)?;
    clip_grad_norm(adam_intent.params(), T::from_f64(config.clip_norm));
    adam_intent.step()?;
    let l1_value = l1.item().to_f64();
    drop(tape);

    if config.refresh_h1 {
        model.refresh_h1(batch, &mut shared)?;
    }

    let mut tape = Tape::new();
    let slot_logits = model.predict_slots(
        &mut tape,
        batch,
        &shared,
        LabelFeeding::Teacher(&batch.tag_ids),
    )?;
    let l2 = model.slot_loss(&mut tape, &slot_logits, &batch.tag_ids, &batch.mask)?;
    model.zero_grads();
    tape.backward(&l2)?;
    clip_grad_norm(adam_slot.params(), T::from_f64(config.clip_norm));
    adam_slot.step()?;
    let l2_value = l2.item().to_f64();

    Ok((l1_value, l2_value))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_intent: f64,
    pub train_loss_slot: f64,
    pub dev_slot_f1: f64,
    pub dev_intent_accuracy: f64,
    pub grad_steps: u64,
    pub improved: bool,
}

pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub best_dev_accuracy: f64,
}

/// Epoch loop with early stopping on dev (slot F1, then intent accuracy).
/// The model is left holding the best checkpoint's parameters.
pub fn train<T: Scalar>(
    model: &BiModel<T>,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    vocab: &Vocabulary,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, ModelError> {
    if train_set.is_empty() {
        return Err(ModelError::Contract("empty training set".into()));
    }
    if dev_set.is_empty() {
        return Err(ModelError::Contract("empty dev set".into()));
    }
    let lr = T::from_f64(config.learning_rate);
    let mut adam_intent = AdamState::new(model.intent_parameters(), lr);
    let mut adam_slot = AdamState::new(model.slot_parameters(), lr);

    let mut log = Vec::new();
    let mut best: Option<(f64, f64, usize, Vec<(String, Vec<T>)>)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 1..=config.max_epochs {
        let epoch_seed = config.seed.wrapping_add(epoch as u64);
        let mut sum_l1 = 0.0;
        let mut sum_l2 = 0.0;
        let mut steps = 0usize;
        for batch in batches(train_set, vocab, config.batch_size, Some(epoch_seed)) {
            let (l1, l2) =
                train_iteration(model, &batch, &mut adam_intent, &mut adam_slot, config)?;
            sum_l1 += l1;
            sum_l2 += l2;
            steps += 1;
        }
        let report = metrics::evaluate(model, dev_set, vocab, config.batch_size)
            .map_err(|e| ModelError::Contract(e.to_string()))?;
        let score = (report.slot_f1, report.intent_accuracy);
        let improved = match &best {
            None => true,
            Some((f1, acc, _, _)) => score > (*f1, *acc),
        };
        if improved {
            best = Some((score.0, score.1, epoch, model.snapshot()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss_intent: sum_l1 / steps as f64,
            train_loss_slot: sum_l2 / steps as f64,
            dev_slot_f1: report.slot_f1,
            dev_intent_accuracy: report.intent_accuracy,
            grad_steps: adam_intent.step_count(),
            improved,
        };
        on_epoch(&record);
        log.push(record);
        if stale_epochs >= config.patience {
            break;
        }
    }

    let (best_f1, best_acc, best_epoch, snapshot) = best.expect("at least one epoch ran");
    model.restore(&snapshot)?;
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_dev_f1: best_f1,
        best_dev_accuracy: best_acc,
    })
}
