//! Forward passes of the two task networks.
//!
//! Time indexing follows the 0-based reading of the cross-feedback rule: a
//! consumer at step `t` sees the other network's state (and the previous
//! label) from step `t-1` in its own temporal direction, with zeros at the
//! boundary and a reserved BOS label row before the first tag.

use super::{BiModel, ModelError, SharedStates};
use crate::config::ModelVariant;
use crate::data::{Batch, Vocabulary, BOS_TAG};
use crate::rnn::StepMasks;
use crate::tensor::{Scalar, Tape, Tensor};

/// Source of the previous-label input `y[t-1]` for the slot network.
pub enum LabelFeeding<'a> {
    /// Gold tags, `[step][element]`: training-time teacher forcing.
    Teacher(&'a [Vec<usize>]),
    /// The network's own greedy argmax: inference.
    Greedy,
}

impl<T: Scalar> BiModel<T> {
    fn embed_steps(
        &self,
        tape: &mut Tape<T>,
        table: &Tensor<T>,
        word_ids: &[Vec<usize>],
    ) -> Result<Vec<Tensor<T>>, ModelError> {
        word_ids
            .iter()
            .map(|step| Ok(tape.embedding_lookup(table, step)?))
            .collect()
    }

    fn step_masks(&self, batch: &Batch) -> StepMasks<T> {
        StepMasks::from_lengths(&batch.lengths, batch.seq_len(), self.config.hidden_dim)
    }

    /// `sum_t [t == len-1] * steps[t]` per element: the state at each
    /// element's last real token, independent of padding.
    fn select_last_steps(
        &self,
        tape: &mut Tape<T>,
        steps: &[Tensor<T>],
        lengths: &[usize],
    ) -> Result<Tensor<T>, ModelError> {
        let width = steps[0].shape()[1];
        let batch = lengths.len();
        let mut acc: Option<Tensor<T>> = None;
        for (t, step) in steps.iter().enumerate() {
            if !lengths.iter().any(|&len| len == t + 1) {
                continue;
            }
            let mut mask = vec![T::zero(); batch * width];
            for (b, &len) in lengths.iter().enumerate() {
                if len == t + 1 {
                    for w in 0..width {
                        mask[b * width + w] = T::one();
                    }
                }
            }
            let mask = Tensor::from_vec(mask, &[batch, width])?;
            let picked = tape.mul(&mask, step)?;
            acc = Some(match acc {
                None => picked,
                Some(prev) => tape.add(&prev, &picked)?,
            });
        }
        Ok(acc.expect("every element has a last step"))
    }

    fn zero_aux(&self, seq_len: usize, batch: usize, dim: usize) -> Vec<Tensor<T>> {
        (0..seq_len).map(|_| Tensor::zeros(&[batch, dim])).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.batch_size() == 0 || batch.seq_len() == 0 {
            return Err(ModelError::Contract("empty batch".into()));
        }
        if batch.lengths.iter().any(|&l| l == 0) {
            return Err(ModelError::Contract(
                "batch contains a fully padded utterance".into(),
            ));
        }
        Ok(())
    }

    /// Run both encoders over the batch without any cross input and detach
    /// the per-step states. These are the `h1`/`h2` the other network
    /// consumes during this iteration. For an ablated model the states are
    /// zeros of the same shape.
    pub fn compute_shared_states(&self, batch: &Batch) -> Result<SharedStates<T>, ModelError> {
        self.check_batch(batch)?;
        let (seq_len, b) = (batch.seq_len(), batch.batch_size());
        if !self.config.share_states {
            return Ok(SharedStates::zeros(seq_len, b, self.state_dim()));
        }
        let h1 = self.encode_without_cross_input(batch, true)?;
        let h2 = self.encode_without_cross_input(batch, false)?;
        Ok(SharedStates { h1, h2 })
    }

    /// Re-run only the intent encoder; used after the intent update when
    /// `refresh_h1` is set.
    pub fn refresh_h1(
        &self,
        batch: &Batch,
        shared: &mut SharedStates<T>,
    ) -> Result<(), ModelError> {
        if !self.config.share_states {
            return Ok(());
        }
        shared.h1 = self.encode_without_cross_input(batch, true)?;
        Ok(())
    }

    fn encode_without_cross_input(
        &self,
        batch: &Batch,
        intent_side: bool,
    ) -> Result<Vec<Tensor<T>>, ModelError> {
        let mut tape = Tape::new();
        let (seq_len, b) = (batch.seq_len(), batch.batch_size());
        let masks = self.step_masks(batch);
        let (table, encoder, aux_dim) = if intent_side {
            (
                &self.word_embedding,
                &self.intent_net.encoder,
                self.state_dim(),
            )
        } else {
            (
                &self.slot_word_embedding,
                &self.slot_net.encoder,
                Self::slot_aux_dim(&self.config),
            )
        };
        let emb = self.embed_steps(&mut tape, table, &batch.word_ids)?;
        let aux = self.zero_aux(seq_len, b, aux_dim);
        let states = encoder.forward(&mut tape, &emb, Some(&aux), Some(&masks))?;
        let cat = states.concat_steps(&mut tape)?;
        // Padded positions are zeroed so that a consumer reading past an
        // element's last token sees the same zero vector it would see at the
        // sequence boundary of an unpadded batch. Predictions then cannot
        // depend on how utterances were bucketed.
        let width = self.state_dim();
        Ok(cat
            .iter()
            .enumerate()
            .map(|(t, step)| {
                let detached = step.detach();
                let mut values = detached.to_vec();
                for (elem, &len) in batch.lengths.iter().enumerate() {
                    if t >= len {
                        for w in 0..width {
                            values[elem * width + w] = T::zero();
                        }
                    }
                }
                detached.set_data(&values).expect("same length");
                detached
            })
            .collect())
    }

    /// Intent logits (`batch x k`) for one batch, conditioning on the slot
    /// network's shared states.
    pub fn predict_intent(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        shared: &SharedStates<T>,
    ) -> Result<Tensor<T>, ModelError> {
        self.check_batch(batch)?;
        if shared.h2.len() != batch.seq_len() {
            return Err(ModelError::Contract(format!(
                "shared h2 has {} steps, batch has {}",
                shared.h2.len(),
                batch.seq_len()
            )));
        }
        let masks = self.step_masks(batch);
        let emb = self.embed_steps(tape, &self.word_embedding, &batch.word_ids)?;
        let states = self
            .intent_net
            .encoder
            .forward(tape, &emb, Some(&shared.h2), Some(&masks))?;

        let readout = match self.config.variant {
            ModelVariant::WithoutDecoder => {
                // Each direction's final view of the utterance: the forward
                // state at the last real token and the backward state at
                // token 0.
                let fwd_last = self.select_last_steps(tape, &states.forward, &batch.lengths)?;
                tape.concat(&[fwd_last, states.backward[0].clone()], 1)?
            }
            ModelVariant::WithDecoder => {
                let h1 = states.concat_steps(tape)?;
                let h1_last = self.select_last_steps(tape, &h1, &batch.lengths)?;
                let h2_last = self.select_last_steps(tape, &shared.h2, &batch.lengths)?;
                let decoder_in = tape.concat(&[h1_last, h2_last], 1)?;
                let decoder = self
                    .intent_net
                    .decoder
                    .as_ref()
                    .expect("decoder variant has g1");
                let mut state = decoder.zero_state(batch.batch_size());
                decoder.step(tape, &decoder_in, &mut state)?
            }
        };
        let logits = tape.matmul(&readout, &self.intent_net.proj_w)?;
        Ok(tape.add_bias(&logits, &self.intent_net.proj_b)?)
    }

    /// Per-step slot logits (`seq` tensors of `batch x m`), conditioning on
    /// the intent network's shared states and on the previous label.
    pub fn predict_slots(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        shared: &SharedStates<T>,
        feeding: LabelFeeding<'_>,
    ) -> Result<Vec<Tensor<T>>, ModelError> {
        self.check_batch(batch)?;
        let (seq_len, b) = (batch.seq_len(), batch.batch_size());
        if shared.h1.len() != seq_len {
            return Err(ModelError::Contract(format!(
                "shared h1 has {} steps, batch has {}",
                shared.h1.len(),
                seq_len
            )));
        }
        if let LabelFeeding::Teacher(labels) = &feeding {
            if labels.len() != seq_len || labels.iter().any(|step| step.len() != b) {
                return Err(ModelError::Contract(format!(
                    "teacher labels have {} steps for a {}-step batch",
                    labels.len(),
                    seq_len
                )));
            }
        }
        match self.config.variant {
            ModelVariant::WithoutDecoder => {
                self.predict_slots_plain(tape, batch, shared, feeding)
            }
            ModelVariant::WithDecoder => self.predict_slots_decoder(tape, batch, shared, feeding),
        }
    }

    /// Without a decoder the previous label embedding rides along in the
    /// encoder's auxiliary input. Greedy inference cannot feed labels
    /// stepwise through a bidirectional encoder, so it runs two passes: one
    /// with zero label input to get provisional tags, then one feeding them.
    fn predict_slots_plain(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        shared: &SharedStates<T>,
        feeding: LabelFeeding<'_>,
    ) -> Result<Vec<Tensor<T>>, ModelError> {
        match feeding {
            LabelFeeding::Teacher(labels) => {
                self.slot_encoder_pass(tape, batch, shared, Some(labels))
            }
            LabelFeeding::Greedy => {
                let provisional = self.slot_encoder_pass(tape, batch, shared, None)?;
                let fed: Vec<Vec<usize>> = provisional
                    .iter()
                    .map(|logits| self.greedy_tag_ids(logits))
                    .collect();
                self.slot_encoder_pass(tape, batch, shared, Some(&fed))
            }
        }
    }

    fn slot_encoder_pass(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        shared: &SharedStates<T>,
        labels: Option<&[Vec<usize>]>,
    ) -> Result<Vec<Tensor<T>>, ModelError> {
        let (seq_len, b) = (batch.seq_len(), batch.batch_size());
        let masks = self.step_masks(batch);
        let label_masks =
            StepMasks::from_lengths(&batch.lengths, seq_len, self.config.label_embed_dim);
        let emb = self.embed_steps(tape, &self.slot_word_embedding, &batch.word_ids)?;
        let mut aux = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            let label_part = match labels {
                Some(ids) => {
                    // Zeroed past each element's last token, matching the
                    // zero boundary an unpadded batch would present.
                    let rows = tape.embedding_lookup(&self.slot_net.label_embedding, &ids[t])?;
                    tape.mul(&label_masks.keep[t], &rows)?
                }
                None => Tensor::zeros(&[b, self.config.label_embed_dim]),
            };
            aux.push(tape.concat(&[shared.h1[t].clone(), label_part], 1)?);
        }
        let states = self
            .slot_net
            .encoder
            .forward(tape, &emb, Some(&aux), Some(&masks))?;
        let cat = states.concat_steps(tape)?;
        cat.iter()
            .map(|h| {
                let logits = tape.matmul(h, &self.slot_net.proj_w)?;
                Ok(tape.add_bias(&logits, &self.slot_net.proj_b)?)
            })
            .collect()
    }

    /// Decoder variant: the encoder sees only `h1` as auxiliary input. The
    /// decoder step that tags token `t` consumes both encoders' states at
    /// `t` together with the label emitted for `t-1` (the BOS row before the
    /// first token); decoder outputs are numbered one ahead of the 0-based
    /// state arrays.
    fn predict_slots_decoder(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        shared: &SharedStates<T>,
        feeding: LabelFeeding<'_>,
    ) -> Result<Vec<Tensor<T>>, ModelError> {
        let (seq_len, b) = (batch.seq_len(), batch.batch_size());
        let masks = self.step_masks(batch);
        let emb = self.embed_steps(tape, &self.slot_word_embedding, &batch.word_ids)?;
        let states = self
            .slot_net
            .encoder
            .forward(tape, &emb, Some(&shared.h1), Some(&masks))?;
        let h2 = states.concat_steps(tape)?;

        let decoder = self
            .slot_net
            .decoder
            .as_ref()
            .expect("decoder variant has g2");
        let mut decoder_state = decoder.zero_state(b);
        let mut logits_steps: Vec<Tensor<T>> = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            let prev_ids: Vec<usize> = if t == 0 {
                vec![BOS_TAG; b]
            } else {
                match &feeding {
                    LabelFeeding::Teacher(labels) => labels[t - 1].clone(),
                    LabelFeeding::Greedy => self.greedy_tag_ids(&logits_steps[t - 1]),
                }
            };
            let label_emb = tape.embedding_lookup(&self.slot_net.label_embedding, &prev_ids)?;
            let input =
                tape.concat(&[h2[t].clone(), shared.h1[t].clone(), label_emb], 1)?;
            let s = decoder.step(tape, &input, &mut decoder_state)?;
            let logits = tape.matmul(&s, &self.slot_net.proj_w)?;
            logits_steps.push(tape.add_bias(&logits, &self.slot_net.proj_b)?);
        }
        Ok(logits_steps)
    }

    /// Row-wise argmax over the real tag columns (the reserved PAD/BOS rows
    /// never count as predictions).
    pub(crate) fn greedy_tag_ids(&self, logits: &Tensor<T>) -> Vec<usize> {
        let shape = logits.shape();
        let (rows, cols) = (shape[0], shape[1]);
        let data = logits.to_vec();
        (0..rows)
            .map(|r| {
                let row = &data[r * cols..(r + 1) * cols];
                let mut best = 2;
                for c in 3..cols {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub(crate) fn greedy_intent_ids(&self, logits: &Tensor<T>) -> Vec<usize> {
        let shape = logits.shape();
        let (rows, cols) = (shape[0], shape[1]);
        let data = logits.to_vec();
        (0..rows)
            .map(|r| {
                let row = &data[r * cols..(r + 1) * cols];
                let mut best = 0;
                for c in 1..cols {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean over the batch of the single-intent cross entropy.
    pub fn intent_loss(
        &self,
        tape: &mut Tape<T>,
        logits: &Tensor<T>,
        gold: &[usize],
    ) -> Result<Tensor<T>, ModelError> {
        Ok(tape.softmax_cross_entropy(logits, gold)?)
    }

    /// Cross entropy summed over real (unmasked) steps, then averaged over
    /// the batch.
    pub fn slot_loss(
        &self,
        tape: &mut Tape<T>,
        logits_steps: &[Tensor<T>],
        gold: &[Vec<usize>],
        mask: &[Vec<bool>],
    ) -> Result<Tensor<T>, ModelError> {
        if logits_steps.len() != gold.len() || gold.len() != mask.len() {
            return Err(ModelError::Contract(format!(
                "slot loss arity mismatch: {} logits, {} gold, {} mask steps",
                logits_steps.len(),
                gold.len(),
                mask.len()
            )));
        }
        if logits_steps.is_empty() {
            return Err(ModelError::Contract("slot loss over zero steps".into()));
        }
        let b = mask[0].len();
        for col in 0..b {
            if !mask.iter().any(|step| step[col]) {
                return Err(ModelError::Contract(format!(
                    "utterance {col} is fully masked"
                )));
            }
        }
        let inv_b = T::one() / T::from_f64(b as f64);
        let mut total: Option<Tensor<T>> = None;
        for (t, logits) in logits_steps.iter().enumerate() {
            let weights: Vec<T> = mask[t]
                .iter()
                .map(|&m| if m { inv_b } else { T::zero() })
                .collect();
            let step_loss = tape.softmax_cross_entropy_weighted(logits, &gold[t], &weights)?;
            total = Some(match total {
                None => step_loss,
                Some(prev) => tape.add(&prev, &step_loss)?,
            });
        }
        Ok(total.expect("at least one step"))
    }

    /// Greedy decode of one encoded batch: intent ids plus per-element tag
    /// ids trimmed to each utterance's length.
    pub fn predict_batch(
        &self,
        batch: &Batch,
    ) -> Result<(Vec<usize>, Vec<Vec<usize>>), ModelError> {
        let shared = self.compute_shared_states(batch)?;
        let mut tape = Tape::new();
        let intent_logits = self.predict_intent(&mut tape, batch, &shared)?;
        let intents = self.greedy_intent_ids(&intent_logits);
        let slot_logits =
            self.predict_slots(&mut tape, batch, &shared, LabelFeeding::Greedy)?;
        let per_step: Vec<Vec<usize>> = slot_logits
            .iter()
            .map(|l| self.greedy_tag_ids(l))
            .collect();
        let tags = batch
            .lengths
            .iter()
            .enumerate()
            .map(|(elem, &len)| (0..len).map(|t| per_step[t][elem]).collect())
            .collect();
        Ok((intents, tags))
    }

    /// Decode one raw utterance: the intent label and one tag per token.
    pub fn predict(
        &self,
        tokens: &[String],
        vocab: &Vocabulary,
    ) -> Result<(String, Vec<String>), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Contract(
                "predict on an empty token sequence".into(),
            ));
        }
        let word_ids: Vec<Vec<usize>> = tokens
            .iter()
            .map(|tok| vec![vocab.word_id(tok)])
            .collect();
        let seq_len = tokens.len();
        let batch = Batch {
            word_ids,
            tag_ids: vec![vec![0]; seq_len],
            intent_ids: vec![0],
            mask: vec![vec![true]; seq_len],
            lengths: vec![seq_len],
            indices: vec![0],
            unknown_gold_symbols: 0,
        };
        let (intents, tags) = self.predict_batch(&batch)?;
        Ok((
            vocab.intent_str(intents[0]).to_string(),
            tags[0].iter().map(|&id| vocab.slot_str(id).to_string()).collect(),
        ))
    }

    /// Greedy predictions for a whole corpus, in corpus order. Batches are
    /// length-bucketed internally; results are scattered back by index.
    pub fn predict_corpus(
        &self,
        data: &[crate::data::Utterance],
        vocab: &Vocabulary,
        batch_size: usize,
    ) -> Result<Vec<(String, Vec<String>)>, ModelError> {
        let mut out: Vec<Option<(String, Vec<String>)>> = vec![None; data.len()];
        for batch in crate::data::batches(data, vocab, batch_size, None) {
            let (intents, tags) = self.predict_batch(&batch)?;
            for (pos, &corpus_idx) in batch.indices.iter().enumerate() {
                let intent = vocab.intent_str(intents[pos]).to_string();
                let tag_strs = tags[pos]
                    .iter()
                    .map(|&id| vocab.slot_str(id).to_string())
                    .collect();
                out[corpus_idx] = Some((intent, tag_strs));
            }
        }
        Ok(out.into_iter().map(|o| o.expect("all covered")).collect())
    }
}
