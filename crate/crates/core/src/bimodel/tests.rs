use super::*;
use crate::config::{ModelVariant, TrainConfig};
use crate::data::{batches, build_vocab, parse_conll, Batch, Utterance, BOS_TAG};
use crate::metrics;
use crate::tensor::{AdamState, Tape};

const TOY: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../data/toy/train.conll"
));

fn toy_corpus() -> Vec<Utterance> {
    parse_conll(TOY).unwrap()
}

fn tiny_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        hidden_dim: 16,
        num_layers: 2,
        embed_dim: 12,
        label_embed_dim: 8,
        tie_embeddings: true,
        share_states: true,
    }
}

fn toy_setup(variant: ModelVariant) -> (BiModel<f64>, Vec<Utterance>, crate::data::Vocabulary) {
    let utts = toy_corpus();
    let vocab = build_vocab(&utts, 1, false).unwrap();
    let model = BiModel::new(tiny_config(variant), VocabDims::of(&vocab), 7);
    (model, utts, vocab)
}

/// Capacity in the healthy-signal regime for the uniform [-0.1, 0.1] init;
/// used by the tests that must actually fit the toy corpus.
fn overfit_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        hidden_dim: 64,
        num_layers: 2,
        embed_dim: 48,
        label_embed_dim: 16,
        tie_embeddings: true,
        share_states: true,
    }
}

const OVERFIT_LR: f64 = 1.5e-2;

fn toy_batch(utts: &[Utterance], vocab: &crate::data::Vocabulary) -> Batch {
    let mut all = batches(utts, vocab, utts.len(), None);
    assert_eq!(all.len(), 1);
    all.remove(0)
}

fn train_toy<T: crate::tensor::Scalar>(
    model: &BiModel<T>,
    utts: &[Utterance],
    vocab: &crate::data::Vocabulary,
    iterations: usize,
    lr: f64,
) -> (f64, f64) {
    let config = TrainConfig {
        learning_rate: lr,
        ..TrainConfig::default()
    };
    let mut adam_intent = AdamState::new(model.intent_parameters(), T::from_f64(lr));
    let mut adam_slot = AdamState::new(model.slot_parameters(), T::from_f64(lr));
    let batch = toy_batch(utts, vocab);
    let mut last = (f64::NAN, f64::NAN);
    for _ in 0..iterations {
        last = train::train_iteration(model, &batch, &mut adam_intent, &mut adam_slot, &config)
            .unwrap();
    }
    last
}

#[test]
fn shared_states_have_contract_shapes_and_finite_values() {
    for variant in [ModelVariant::WithDecoder, ModelVariant::WithoutDecoder] {
        let (model, utts, vocab) = toy_setup(variant);
        let batch = toy_batch(&utts, &vocab);
        let shared = model.compute_shared_states(&batch).unwrap();
        assert_eq!(shared.h1.len(), batch.seq_len());
        assert_eq!(shared.h2.len(), batch.seq_len());
        for step in shared.h1.iter().chain(&shared.h2) {
            assert_eq!(step.shape(), vec![batch.batch_size(), 32]);
            assert!(step.to_vec().iter().all(|v| v.is_finite()));
            assert!(!step.requires_grad());
        }
    }
}

#[test]
fn shared_states_are_deterministic() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let batch = toy_batch(&utts, &vocab);
    let a = model.compute_shared_states(&batch).unwrap();
    let b = model.compute_shared_states(&batch).unwrap();
    for (x, y) in a.h1.iter().zip(&b.h1).chain(a.h2.iter().zip(&b.h2)) {
        assert_eq!(x.to_vec(), y.to_vec());
    }
}

#[test]
fn shared_states_carry_no_gradient_into_their_encoders() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let batch = toy_batch(&utts, &vocab);
    let shared = model.compute_shared_states(&batch).unwrap();
    // Consume the states and backpropagate; nothing may reach any encoder.
    let mut tape = Tape::new();
    let w = crate::tensor::Tensor::param(vec![0.1; 32], &[32, 1]).unwrap();
    let prod = tape.matmul(&shared.h2[0], &w).unwrap();
    let loss = tape.sum(&prod);
    model.zero_grads();
    tape.backward(&loss).unwrap();
    for (name, p) in model.named_parameters() {
        assert!(p.grad().is_none(), "{name} received gradient");
    }
    assert!(w.grad().is_some());
}

#[test]
fn empty_batch_is_contract_error() {
    let (model, _, _) = toy_setup(ModelVariant::WithDecoder);
    let empty = Batch {
        word_ids: vec![],
        tag_ids: vec![],
        intent_ids: vec![],
        mask: vec![],
        lengths: vec![],
        indices: vec![],
        unknown_gold_symbols: 0,
    };
    assert!(matches!(
        model.compute_shared_states(&empty),
        Err(ModelError::Contract(_))
    ));
}

#[test]
fn intent_logits_shape_and_single_label_argmax() {
    let utts = toy_corpus();
    let single_intent: Vec<Utterance> = utts
        .iter()
        .map(|u| Utterance {
            intent: "only".into(),
            ..u.clone()
        })
        .collect();
    let vocab = build_vocab(&single_intent, 1, false).unwrap();
    assert_eq!(vocab.num_intents(), 1);
    let model: BiModel<f64> =
        BiModel::new(tiny_config(ModelVariant::WithoutDecoder), VocabDims::of(&vocab), 3);
    let batch = toy_batch(&single_intent, &vocab);
    let shared = model.compute_shared_states(&batch).unwrap();
    let mut tape = Tape::new();
    let logits = model.predict_intent(&mut tape, &batch, &shared).unwrap();
    assert_eq!(logits.shape(), vec![batch.batch_size(), 1]);
    assert!(model.greedy_intent_ids(&logits).iter().all(|&i| i == 0));
}

#[test]
fn missing_shared_states_is_contract_error() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let batch = toy_batch(&utts, &vocab);
    let wrong = SharedStates::zeros(batch.seq_len() + 1, batch.batch_size(), 32);
    let mut tape = Tape::new();
    assert!(matches!(
        model.predict_intent(&mut tape, &batch, &wrong),
        Err(ModelError::Contract(_))
    ));
    assert!(matches!(
        model.predict_slots(&mut tape, &batch, &wrong, LabelFeeding::Greedy),
        Err(ModelError::Contract(_))
    ));
}

#[test]
fn cross_network_input_is_live_after_training() {
    // After some training the intent logits must differ between supplying
    // the slot network's states and zeroing them.
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    train_toy(&model, &utts, &vocab, 50, OVERFIT_LR);
    let batch = toy_batch(&utts, &vocab);
    let shared = model.compute_shared_states(&batch).unwrap();
    let zeroed = SharedStates::zeros(batch.seq_len(), batch.batch_size(), 32);
    let mut tape = Tape::new();
    let with = model.predict_intent(&mut tape, &batch, &shared).unwrap();
    let without = model.predict_intent(&mut tape, &batch, &zeroed).unwrap();
    assert_ne!(with.to_vec(), without.to_vec());
}

fn assert_all_zero_grads(params: &[(String, crate::tensor::Tensor<f64>)]) {
    for (name, p) in params {
        match p.grad() {
            None => {}
            Some(g) => assert!(
                g.iter().all(|&v| v == 0.0),
                "{name} has nonzero gradient"
            ),
        }
    }
}

#[test]
fn intent_loss_gradient_never_reaches_slot_network() {
    for variant in [ModelVariant::WithDecoder, ModelVariant::WithoutDecoder] {
        let (model, utts, vocab) = toy_setup(variant);
        let batch = toy_batch(&utts, &vocab);
        let shared = model.compute_shared_states(&batch).unwrap();
        let mut tape = Tape::new();
        let logits = model.predict_intent(&mut tape, &batch, &shared).unwrap();
        let loss = model
            .intent_loss(&mut tape, &logits, &batch.intent_ids)
            .unwrap();
        model.zero_grads();
        tape.backward(&loss).unwrap();
        assert_all_zero_grads(&model.slot_only_parameters());
        // And the intent network itself did learn something.
        let touched = model
            .intent_only_parameters()
            .iter()
            .any(|(_, p)| p.grad().map_or(false, |g| g.iter().any(|&v| v != 0.0)));
        assert!(touched);
    }
}

#[test]
fn slot_loss_gradient_never_reaches_intent_network() {
    for variant in [ModelVariant::WithDecoder, ModelVariant::WithoutDecoder] {
        let (model, utts, vocab) = toy_setup(variant);
        let batch = toy_batch(&utts, &vocab);
        let shared = model.compute_shared_states(&batch).unwrap();
        let mut tape = Tape::new();
        let logits = model
            .predict_slots(&mut tape, &batch, &shared, LabelFeeding::Teacher(&batch.tag_ids))
            .unwrap();
        let loss = model
            .slot_loss(&mut tape, &logits, &batch.tag_ids, &batch.mask)
            .unwrap();
        model.zero_grads();
        tape.backward(&loss).unwrap();
        assert_all_zero_grads(&model.intent_only_parameters());
        let touched = model
            .slot_only_parameters()
            .iter()
            .any(|(_, p)| p.grad().map_or(false, |g| g.iter().any(|&v| v != 0.0)));
        assert!(touched);
    }
}

#[test]
fn replacing_shared_state_values_with_copies_changes_no_gradient() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let batch = toy_batch(&utts, &vocab);
    let shared = model.compute_shared_states(&batch).unwrap();
    let copied = SharedStates {
        h1: shared.h1.iter().map(|t| t.detach()).collect(),
        h2: shared.h2.iter().map(|t| t.detach()).collect(),
    };
    let grads_for = |s: &SharedStates<f64>| {
        let mut tape = Tape::new();
        let logits = model.predict_intent(&mut tape, &batch, s).unwrap();
        let loss = model
            .intent_loss(&mut tape, &logits, &batch.intent_ids)
            .unwrap();
        model.zero_grads();
        tape.backward(&loss).unwrap();
        model
            .named_parameters()
            .into_iter()
            .map(|(n, p)| (n, p.grad()))
            .collect::<Vec<_>>()
    };
    assert_eq!(grads_for(&shared), grads_for(&copied));
}

#[test]
fn single_token_sequences_produce_one_logit_row_fed_from_bos() {
    let (model, _, vocab) = toy_setup(ModelVariant::WithDecoder);
    let one = vec![Utterance {
        tokens: vec!["boston".into()],
        slot_tags: vec!["B-from_city".into()],
        intent: "find_flight".into(),
    }];
    let batch = toy_batch(&one, &vocab);
    assert_eq!(batch.seq_len(), 1);
    let shared = model.compute_shared_states(&batch).unwrap();
    let mut tape = Tape::new();
    let logits = model
        .predict_slots(&mut tape, &batch, &shared, LabelFeeding::Greedy)
        .unwrap();
    assert_eq!(logits.len(), 1);
    assert_eq!(logits[0].shape(), vec![1, vocab.num_slot_rows()]);
    // The only label input the decoder can have seen is the BOS row: zeroing
    // every other label embedding row must not change the logits.
    let table = &model.slot_net.label_embedding;
    let dim = vocab.num_slot_rows();
    let width = model.config.label_embed_dim;
    let mut values = table.to_vec();
    for row in 0..dim {
        if row != BOS_TAG {
            for w in 0..width {
                values[row * width + w] = 0.0;
            }
        }
    }
    table.set_data(&values).unwrap();
    let mut tape2 = Tape::new();
    let logits2 = model
        .predict_slots(&mut tape2, &batch, &shared, LabelFeeding::Greedy)
        .unwrap();
    assert_eq!(logits[0].to_vec(), logits2[0].to_vec());
}

#[test]
fn teacher_forcing_equals_greedy_when_predictions_are_exact() {
    // Overfit two utterances until greedy decoding reproduces the gold tags,
    // then the teacher-forced and greedy logits must be identical.
    let utts: Vec<Utterance> = toy_corpus().into_iter().take(2).collect();
    let vocab = build_vocab(&utts, 1, false).unwrap();
    let model: BiModel<f32> =
        BiModel::new(overfit_config(ModelVariant::WithDecoder), VocabDims::of(&vocab), 11);
    train_toy(&model, &utts, &vocab, 120, OVERFIT_LR);
    let batch = toy_batch(&utts, &vocab);
    let shared = model.compute_shared_states(&batch).unwrap();

    let (_, tags) = model.predict_batch(&batch).unwrap();
    for (pos, &idx) in batch.indices.iter().enumerate() {
        let gold: Vec<usize> = utts[idx]
            .slot_tags
            .iter()
            .map(|t| vocab.slot_id(t).unwrap())
            .collect();
        assert_eq!(tags[pos], gold, "model failed to overfit utterance {idx}");
    }

    let mut tape = Tape::new();
    let teacher = model
        .predict_slots(&mut tape, &batch, &shared, LabelFeeding::Teacher(&batch.tag_ids))
        .unwrap();
    let greedy = model
        .predict_slots(&mut tape, &batch, &shared, LabelFeeding::Greedy)
        .unwrap();
    for (t, g) in teacher.iter().zip(&greedy) {
        assert_eq!(t.to_vec(), g.to_vec());
    }
}

#[test]
fn teacher_label_length_mismatch_is_contract_error() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let batch = toy_batch(&utts, &vocab);
    let shared = model.compute_shared_states(&batch).unwrap();
    let mut tape = Tape::new();
    let short = vec![vec![2usize; batch.batch_size()]; batch.seq_len() - 1];
    assert!(matches!(
        model.predict_slots(&mut tape, &batch, &shared, LabelFeeding::Teacher(&short)),
        Err(ModelError::Contract(_))
    ));
}

#[test]
fn intent_loss_on_uniform_logits_is_log_k() {
    let (model, _, _) = toy_setup(ModelVariant::WithDecoder);
    let mut tape = Tape::new();
    let logits = crate::tensor::Tensor::zeros(&[4, 18]);
    let loss = model.intent_loss(&mut tape, &logits, &[0, 5, 17, 9]).unwrap();
    assert!((loss.item() - 18.0f64.ln()).abs() < 1e-12);
}

#[test]
fn slot_loss_matches_hand_computation() {
    let (model, _, _) = toy_setup(ModelVariant::WithDecoder);
    let mut tape = Tape::new();
    // Two tokens, one utterance, three tag rows.
    let step0 = crate::tensor::Tensor::from_vec(vec![1.0, 0.0, -1.0], &[1, 3]).unwrap();
    let step1 = crate::tensor::Tensor::from_vec(vec![0.5, 2.0, 0.0], &[1, 3]).unwrap();
    let gold = vec![vec![0usize], vec![1usize]];
    let mask = vec![vec![true], vec![true]];
    let loss = model
        .slot_loss(&mut tape, &[step0.clone(), step1.clone()], &gold, &mask)
        .unwrap();
    let hand = |row: &[f64], t: usize| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        -(row[t] - m - z.ln())
    };
    let expect = hand(&[1.0, 0.0, -1.0], 0) + hand(&[0.5, 2.0, 0.0], 1);
    assert!((loss.item() - expect).abs() < 1e-12);
}

#[test]
fn slot_loss_ignores_masked_steps_and_averages_over_batch() {
    let (model, _, _) = toy_setup(ModelVariant::WithDecoder);
    let mut tape = Tape::new();
    let step0 = crate::tensor::Tensor::from_vec(vec![2.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let step1 = crate::tensor::Tensor::from_vec(vec![0.0, 1.0, 9.0, 9.0], &[2, 2]).unwrap();
    let gold = vec![vec![0usize, 1], vec![1usize, 0]];
    // Second utterance has length 1: its step-1 logits must not count.
    let mask = vec![vec![true, true], vec![true, false]];
    let loss = model
        .slot_loss(&mut tape, &[step0, step1], &gold, &mask)
        .unwrap();
    let hand = |row: &[f64], t: usize| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        -(row[t] - m - z.ln())
    };
    let expect =
        (hand(&[2.0, 0.0], 0) + hand(&[0.0, 1.0], 1) + hand(&[0.0, 1.0], 1)) / 2.0;
    assert!((loss.item() - expect).abs() < 1e-12);
}

#[test]
fn perfect_logits_drive_losses_to_zero() {
    let (model, _, _) = toy_setup(ModelVariant::WithDecoder);
    let mut tape = Tape::new();
    let logits = crate::tensor::Tensor::from_vec(vec![1e5, 0.0, 0.0, 0.0, 1e5, 0.0], &[2, 3]).unwrap();
    let loss = model.intent_loss(&mut tape, &logits, &[0, 1]).unwrap();
    assert!(loss.item().abs() < 1e-9);
}

#[test]
fn fully_masked_utterance_is_contract_error() {
    let (model, _, _) = toy_setup(ModelVariant::WithDecoder);
    let mut tape = Tape::new();
    let step0 = crate::tensor::Tensor::zeros(&[2, 3]);
    let gold = vec![vec![0usize, 0]];
    let mask = vec![vec![true, false]];
    assert!(matches!(
        model.slot_loss(&mut tape, &[step0], &gold, &mask),
        Err(ModelError::Contract(_))
    ));
}

#[test]
fn train_iteration_is_bitwise_reproducible() {
    let run = || {
        let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
        let losses = train_toy(&model, &utts, &vocab, 3, 1e-3);
        (losses, model.snapshot())
    };
    let (l_a, snap_a) = run();
    let (l_b, snap_b) = run();
    assert_eq!(l_a, l_b);
    assert_eq!(snap_a.len(), snap_b.len());
    for ((name_a, values_a), (_, values_b)) in snap_a.iter().zip(&snap_b) {
        assert_eq!(values_a, values_b, "{name_a} diverged");
    }
}

#[test]
fn asynchronous_updates_touch_only_their_own_network() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let batch = toy_batch(&utts, &vocab);
    let config = TrainConfig {
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut adam_intent = AdamState::new(model.intent_parameters(), 1e-3);
    let mut adam_slot = AdamState::new(model.slot_parameters(), 1e-3);

    // Phase (b) by hand: intent update only.
    let before = model.snapshot();
    let mut shared = model.compute_shared_states(&batch).unwrap();
    let mut tape = Tape::new();
    let logits = model.predict_intent(&mut tape, &batch, &shared).unwrap();
    let l1 = model.intent_loss(&mut tape, &logits, &batch.intent_ids).unwrap();
    model.zero_grads();
    tape.backward(&l1).unwrap();
    crate::tensor::clip_grad_norm(adam_intent.params(), 5.0);
    adam_intent.step().unwrap();
    drop(tape);

    let after_intent = model.snapshot();
    for ((name, old), (_, new)) in before.iter().zip(&after_intent) {
        if name.starts_with("slot.") {
            assert_eq!(old, new, "{name} changed during the intent update");
        }
        if name.starts_with("intent.proj") {
            assert_ne!(old, new, "{name} did not move");
        }
    }

    // Phase (c) and (d): slot update only.
    model.refresh_h1(&batch, &mut shared).unwrap();
    let mut tape = Tape::new();
    let slot_logits = model
        .predict_slots(&mut tape, &batch, &shared, LabelFeeding::Teacher(&batch.tag_ids))
        .unwrap();
    let l2 = model
        .slot_loss(&mut tape, &slot_logits, &batch.tag_ids, &batch.mask)
        .unwrap();
    model.zero_grads();
    tape.backward(&l2).unwrap();
    crate::tensor::clip_grad_norm(adam_slot.params(), config.clip_norm);
    adam_slot.step().unwrap();

    let after_slot = model.snapshot();
    for ((name, old), (_, new)) in after_intent.iter().zip(&after_slot) {
        if name.starts_with("intent.") {
            assert_eq!(old, new, "{name} changed during the slot update");
        }
        if name.starts_with("slot.proj") {
            assert_ne!(old, new, "{name} did not move");
        }
    }
}

#[test]
fn toy_corpus_overfits_within_200_iterations() {
    let utts = toy_corpus();
    let vocab = build_vocab(&utts, 1, false).unwrap();
    let model: BiModel<f32> =
        BiModel::new(overfit_config(ModelVariant::WithDecoder), VocabDims::of(&vocab), 7);
    let (l1, l2) = train_toy(&model, &utts, &vocab, 200, OVERFIT_LR);
    assert!(l1 < 0.05, "intent loss {l1} did not reach 0.05");
    assert!(l2 < 0.05, "slot loss {l2} did not reach 0.05");
    let report = metrics::evaluate(&model, &utts, &vocab, 4).unwrap();
    assert_eq!(report.slot_f1, 100.0);
    assert_eq!(report.intent_accuracy, 100.0);
}

#[test]
fn predict_aligns_one_tag_per_token_and_is_deterministic() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithoutDecoder);
    let tokens: Vec<String> = "please list flights from denver to chicago"
        .split_whitespace()
        .map(String::from)
        .collect();
    let (intent_a, tags_a) = model.predict(&tokens, &vocab).unwrap();
    assert_eq!(tags_a.len(), tokens.len());
    let (intent_b, tags_b) = model.predict(&tokens, &vocab).unwrap();
    assert_eq!((intent_a, tags_a), (intent_b, tags_b));
    drop(utts);
}

#[test]
fn predict_on_empty_input_is_contract_error() {
    let (model, _, vocab) = toy_setup(ModelVariant::WithDecoder);
    assert!(matches!(
        model.predict(&[], &vocab),
        Err(ModelError::Contract(_))
    ));
}

#[test]
fn overfit_model_predicts_gold_outputs() {
    let utts = toy_corpus();
    let vocab = build_vocab(&utts, 1, false).unwrap();
    let model: BiModel<f32> =
        BiModel::new(overfit_config(ModelVariant::WithDecoder), VocabDims::of(&vocab), 7);
    train_toy(&model, &utts, &vocab, 200, OVERFIT_LR);
    for u in &utts {
        let (intent, tags) = model.predict(&u.tokens, &vocab).unwrap();
        assert_eq!(intent, u.intent);
        assert_eq!(tags, u.slot_tags);
    }
}

#[test]
fn ablated_model_ignores_slot_network_in_intent_pass() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let ablated_cfg = ablate_sharing(model.config);
    assert!(!ablated_cfg.share_states);
    let ablated: BiModel<f64> = BiModel::new(ablated_cfg, VocabDims::of(&vocab), 7);
    assert_eq!(ablated.parameter_count(), model.parameter_count());

    let batch = toy_batch(&utts, &vocab);
    let shared = ablated.compute_shared_states(&batch).unwrap();
    let mut tape = Tape::new();
    let logits_before = ablated.predict_intent(&mut tape, &batch, &shared).unwrap();

    // Scramble every slot-network parameter; the ablated intent pass must
    // not notice.
    for (_, p) in ablated.slot_only_parameters() {
        let bumped: Vec<f64> = p.to_vec().iter().map(|v| v + 0.37).collect();
        p.set_data(&bumped).unwrap();
    }
    let shared2 = ablated.compute_shared_states(&batch).unwrap();
    let mut tape2 = Tape::new();
    let logits_after = ablated.predict_intent(&mut tape2, &batch, &shared2).unwrap();
    assert_eq!(logits_before.to_vec(), logits_after.to_vec());
}

#[test]
fn patience_zero_runs_exactly_one_epoch() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let config = TrainConfig {
        max_epochs: 50,
        patience: 0,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let outcome = train::train(&model, &utts, &utts, &vocab, &config, |_| {}).unwrap();
    assert_eq!(outcome.log.len(), 1);
}

#[test]
fn training_log_is_monotone_and_complete() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let config = TrainConfig {
        max_epochs: 3,
        patience: 10,
        batch_size: 5,
        learning_rate: 5e-3,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let outcome = train::train(&model, &utts, &utts, &vocab, &config, |r| {
        seen.push(r.epoch);
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    for (i, rec) in outcome.log.iter().enumerate() {
        assert_eq!(rec.epoch, i + 1);
        assert!(rec.train_loss_intent.is_finite() && rec.train_loss_slot.is_finite());
        assert!(rec.dev_slot_f1 >= 0.0 && rec.dev_slot_f1 <= 100.0);
        assert!(rec.dev_intent_accuracy >= 0.0 && rec.dev_intent_accuracy <= 100.0);
    }
    assert!(outcome.best_epoch >= 1 && outcome.best_epoch <= 3);
}

#[test]
fn losses_are_finite_and_nonnegative_for_random_models() {
    for seed in 0..3u64 {
        for variant in [ModelVariant::WithDecoder, ModelVariant::WithoutDecoder] {
            let utts = toy_corpus();
            let vocab = build_vocab(&utts, 1, false).unwrap();
            let model: BiModel<f64> = BiModel::new(tiny_config(variant), VocabDims::of(&vocab), seed);
            let batch = toy_batch(&utts, &vocab);
            let shared = model.compute_shared_states(&batch).unwrap();
            let mut tape = Tape::new();
            let il = model.predict_intent(&mut tape, &batch, &shared).unwrap();
            let l1 = model.intent_loss(&mut tape, &il, &batch.intent_ids).unwrap();
            let sl = model
                .predict_slots(&mut tape, &batch, &shared, LabelFeeding::Teacher(&batch.tag_ids))
                .unwrap();
            let l2 = model.slot_loss(&mut tape, &sl, &batch.tag_ids, &batch.mask).unwrap();
            assert!(l1.item().is_finite() && l1.item() >= 0.0);
            assert!(l2.item().is_finite() && l2.item() >= 0.0);
        }
    }
}


#[test]
fn predictions_do_not_depend_on_batch_composition() {
    let (model, utts, vocab) = toy_setup(ModelVariant::WithDecoder);
    let solo: Vec<(String, Vec<String>)> = utts
        .iter()
        .map(|u| model.predict(&u.tokens, &vocab).unwrap())
        .collect();
    for batch_size in [3, 7, 10] {
        let batched = model.predict_corpus(&utts, &vocab, batch_size).unwrap();
        assert_eq!(batched, solo, "batch_size {batch_size} changed predictions");
    }
}

mod checkpoint_tests {
    use super::*;
    use crate::bimodel::checkpoint::{
        load_checkpoint_from, save_checkpoint_to, CheckpointError, CHECKPOINT_VERSION,
    };

    fn trained_f32_model() -> (BiModel<f32>, Vec<Utterance>, crate::data::Vocabulary) {
        let utts = toy_corpus();
        let vocab = build_vocab(&utts, 1, false).unwrap();
        let model: BiModel<f32> = BiModel::new(
            tiny_config(ModelVariant::WithDecoder),
            VocabDims::of(&vocab),
            5,
        );
        train_toy(&model, &utts, &vocab, 5, 1e-3);
        (model, utts, vocab)
    }

    #[test]
    fn round_trip_preserves_every_parameter_and_the_eval_report() {
        let (model, utts, vocab) = trained_f32_model();
        let mut buf = Vec::new();
        save_checkpoint_to(&mut buf, &model, &vocab).unwrap();
        let (loaded, loaded_vocab) = load_checkpoint_from(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded_vocab, vocab);
        assert_eq!(loaded.config, model.config);
        for ((name_a, a), (_, b)) in model
            .named_parameters()
            .iter()
            .zip(loaded.named_parameters())
        {
            assert_eq!(a.to_vec(), b.to_vec(), "{name_a} changed across the round trip");
        }
        let before = metrics::evaluate(&model, &utts, &vocab, 4).unwrap();
        let after = metrics::evaluate(&loaded, &utts, &loaded_vocab, 4).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn tied_embeddings_stay_tied_after_loading() {
        let (model, _, vocab) = trained_f32_model();
        assert!(model.word_embedding.same_storage(&model.slot_word_embedding));
        let mut buf = Vec::new();
        save_checkpoint_to(&mut buf, &model, &vocab).unwrap();
        let (loaded, _) = load_checkpoint_from(&mut buf.as_slice()).unwrap();
        assert!(loaded.word_embedding.same_storage(&loaded.slot_word_embedding));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = load_checkpoint_from(&mut &b"NOTACKPT_____"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
        assert!(err.to_string().contains("checkpoint"));
    }

    #[test]
    fn version_mismatch_is_an_explicit_error() {
        let (model, _, vocab) = trained_f32_model();
        let mut buf = Vec::new();
        save_checkpoint_to(&mut buf, &model, &vocab).unwrap();
        buf[8] = (CHECKPOINT_VERSION + 1) as u8;
        let err = load_checkpoint_from(&mut buf.as_slice()).unwrap_err();
        match err {
            CheckpointError::VersionMismatch { found, expected } => {
                assert_eq!(found, CHECKPOINT_VERSION + 1);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected version mismatch, got {other}"),
        }
    }

    #[test]
    fn truncated_and_corrupted_files_are_rejected() {
        let (model, _, vocab) = trained_f32_model();
        let mut buf = Vec::new();
        save_checkpoint_to(&mut buf, &model, &vocab).unwrap();
        let truncated = &buf[..buf.len() / 2];
        assert!(load_checkpoint_from(&mut &truncated[..]).is_err());
        let mut extended = buf.clone();
        extended.extend_from_slice(&[0, 1, 2]);
        let err = load_checkpoint_from(&mut extended.as_slice()).unwrap_err();
        assert!(err.to_string().contains("checkpoint") || err.to_string().contains("trailing"));
    }

    #[test]
    fn untied_embeddings_round_trip_as_two_tables() {
        let utts = toy_corpus();
        let vocab = build_vocab(&utts, 1, false).unwrap();
        let config = ModelConfig {
            tie_embeddings: false,
            ..tiny_config(ModelVariant::WithoutDecoder)
        };
        let model: BiModel<f32> = BiModel::new(config, VocabDims::of(&vocab), 5);
        assert!(!model.word_embedding.same_storage(&model.slot_word_embedding));
        let mut buf = Vec::new();
        save_checkpoint_to(&mut buf, &model, &vocab).unwrap();
        let (loaded, _) = load_checkpoint_from(&mut buf.as_slice()).unwrap();
        assert!(!loaded.word_embedding.same_storage(&loaded.slot_word_embedding));
        assert_eq!(
            loaded.slot_word_embedding.to_vec(),
            model.slot_word_embedding.to_vec()
        );
    }
}
