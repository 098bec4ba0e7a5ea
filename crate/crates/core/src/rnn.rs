//! LSTM cell, stacked unidirectional decoder, and stacked bidirectional
//! encoder.
//!
//! The encoder's per-step output is the concatenation of a forward-running
//! and a backward-running LSTM state. An optional auxiliary sequence (the
//! other task-network's hidden states, possibly extended with label
//! embeddings) is concatenated to the layer-0 input: the forward direction
//! at step `t` sees `aux[t-1]` and the backward direction sees `aux[t+1]`,
//! with zero vectors at the boundaries, so each direction conditions on the
//! auxiliary state from its own previous time step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tape, Tensor, TensorError};

/// Gate weights and biases for one LSTM layer in one direction.
pub struct LstmParams<T> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_i: Tensor<T>,
    pub w_f: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w_c: Tensor<T>,
    pub u_i: Tensor<T>,
    pub u_f: Tensor<T>,
    pub u_o: Tensor<T>,
    pub u_c: Tensor<T>,
    pub b_i: Tensor<T>,
    pub b_f: Tensor<T>,
    pub b_o: Tensor<T>,
    pub b_c: Tensor<T>,
}

pub(crate) fn uniform_param<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    bound: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::param(data, shape).expect("shape/data agree")
}

impl<T: Scalar> LstmParams<T> {
    /// Weights uniform in [-0.1, 0.1]; biases zero except the forget gate,
    /// which starts at 1.0.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = |rng: &mut ChaCha8Rng| uniform_param(rng, &[input_dim, hidden_dim], 0.1);
        let u = |rng: &mut ChaCha8Rng| uniform_param(rng, &[hidden_dim, hidden_dim], 0.1);
        let zero_bias = || {
            let t = Tensor::zeros(&[hidden_dim]);
            t.set_requires_grad(true);
            t
        };
        let forget_bias = {
            let t = Tensor::full(&[hidden_dim], T::one());
            t.set_requires_grad(true);
            t
        };
        LstmParams {
            input_dim,
            hidden_dim,
            w_i: w(rng),
            w_f: w(rng),
            w_o: w(rng),
            w_c: w(rng),
            u_i: u(rng),
            u_f: u(rng),
            u_o: u(rng),
            u_c: u(rng),
            b_i: zero_bias(),
            b_f: forget_bias,
            b_o: zero_bias(),
            b_c: zero_bias(),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        [
            ("w_i", &self.w_i),
            ("w_f", &self.w_f),
            ("w_o", &self.w_o),
            ("w_c", &self.w_c),
            ("u_i", &self.u_i),
            ("u_f", &self.u_f),
            ("u_o", &self.u_o),
            ("u_c", &self.u_c),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_c", &self.b_c),
        ]
        .into_iter()
        .map(|(name, t)| (format!("{prefix}.{name}"), t.clone()))
        .collect()
    }
}

/// One LSTM recurrence: `i,f,o = sigma(..)`, `g = tanh(..)`,
/// `c_t = f*c_prev + i*g`, `h_t = o*tanh(c_t)`.
pub fn lstm_step<T: Scalar>(
    params: &LstmParams<T>,
    tape: &mut Tape<T>,
    x_t: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let gate = |tape: &mut Tape<T>, w: &Tensor<T>, u: &Tensor<T>, b: &Tensor<T>| {
        let xw = tape.matmul(x_t, w)?;
        let hu = tape.matmul(h_prev, u)?;
        let pre = tape.add(&xw, &hu)?;
        tape.add_bias(&pre, b)
    };
    let i_pre = gate(tape, &params.w_i, &params.u_i, &params.b_i)?;
    let f_pre = gate(tape, &params.w_f, &params.u_f, &params.b_f)?;
    let o_pre = gate(tape, &params.w_o, &params.u_o, &params.b_o)?;
    let g_pre = gate(tape, &params.w_c, &params.u_c, &params.b_c)?;
    let i = tape.sigmoid(&i_pre);
    let f = tape.sigmoid(&f_pre);
    let o = tape.sigmoid(&o_pre);
    let g = tape.tanh(&g_pre);

    let fc = tape.mul(&f, c_prev)?;
    let ig = tape.mul(&i, &g)?;
    let c_t = tape.add(&fc, &ig)?;
    let c_act = tape.tanh(&c_t);
    let h_t = tape.mul(&o, &c_act)?;
    Ok((h_t, c_t))
}

/// Per-step padding masks: `keep[t]` is 1 where step `t` is a real token and
/// `carry[t]` is its complement. States update as
/// `h = keep*h_new + carry*h_prev`, so padded positions hold their state and
/// contribute nothing to gradients.
pub struct StepMasks<T> {
    pub keep: Vec<Tensor<T>>,
    pub carry: Vec<Tensor<T>>,
}

impl<T: Scalar> StepMasks<T> {
    pub fn from_lengths(lengths: &[usize], seq_len: usize, width: usize) -> Self {
        let batch = lengths.len();
        let mut keep = Vec::with_capacity(seq_len);
        let mut carry = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            let mut k = vec![T::zero(); batch * width];
            let mut c = vec![T::one(); batch * width];
            for (b, &len) in lengths.iter().enumerate() {
                if t < len {
                    for w in 0..width {
                        k[b * width + w] = T::one();
                        c[b * width + w] = T::zero();
                    }
                }
            }
            keep.push(Tensor::from_vec(k, &[batch, width]).expect("shape"));
            carry.push(Tensor::from_vec(c, &[batch, width]).expect("shape"));
        }
        StepMasks { keep, carry }
    }
}

fn masked_update<T: Scalar>(
    tape: &mut Tape<T>,
    masks: Option<&StepMasks<T>>,
    t: usize,
    new: Tensor<T>,
    prev: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    match masks {
        None => Ok(new),
        Some(m) => {
            let kept = tape.mul(&m.keep[t], &new)?;
            let carried = tape.mul(&m.carry[t], prev)?;
            tape.add(&kept, &carried)
        }
    }
}

/// Per-direction top-layer states of a bidirectional encoder run.
pub struct BlstmStates<T> {
    pub forward: Vec<Tensor<T>>,
    pub backward: Vec<Tensor<T>>,
}

impl<T: Scalar> BlstmStates<T> {
    /// Concatenated `[h_forward, h_backward]` per step; last dimension is
    /// `2 * hidden_dim`.
    pub fn concat_steps(&self, tape: &mut Tape<T>) -> Result<Vec<Tensor<T>>, TensorError> {
        self.forward
            .iter()
            .zip(&self.backward)
            .map(|(f, b)| tape.concat(&[f.clone(), b.clone()], 1))
            .collect()
    }
}

/// Stacked bidirectional LSTM. Layer 0 reads the input sequence (plus the
/// shifted auxiliary states when given); every later layer reads the
/// concatenated states of the layer below.
pub struct BlstmEncoder<T> {
    pub layers: Vec<(LstmParams<T>, LstmParams<T>)>,
    pub hidden_dim: usize,
}

impl<T: Scalar> BlstmEncoder<T> {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(num_layers >= 1, "encoder needs at least one layer");
        let mut layers = Vec::with_capacity(num_layers);
        for layer in 0..num_layers {
            let in_dim = if layer == 0 { input_dim } else { 2 * hidden_dim };
            layers.push((
                LstmParams::init(in_dim, hidden_dim, rng),
                LstmParams::init(in_dim, hidden_dim, rng),
            ));
        }
        BlstmEncoder { layers, hidden_dim }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (fwd, bwd)) in self.layers.iter().enumerate() {
            out.extend(fwd.named_params(&format!("{prefix}.l{i}.fwd")));
            out.extend(bwd.named_params(&format!("{prefix}.l{i}.bwd")));
        }
        out
    }

    /// Run the full stack over `inputs` (one `batch x dim` tensor per step).
    ///
    /// `aux`, when present, must have one entry per step; it is concatenated
    /// to the layer-0 input under the t-1/t+1 alignment described at module
    /// level. `masks` carries states through padded steps.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        inputs: &[Tensor<T>],
        aux: Option<&[Tensor<T>]>,
        masks: Option<&StepMasks<T>>,
    ) -> Result<BlstmStates<T>, TensorError> {
        let seq_len = inputs.len();
        if seq_len == 0 {
            return Err(TensorError::Contract(
                "blstm_forward on an empty sequence".into(),
            ));
        }
        if let Some(aux) = aux {
            if aux.len() != seq_len {
                return Err(TensorError::Contract(format!(
                    "aux sequence has {} steps, inputs have {}",
                    aux.len(),
                    seq_len
                )));
            }
        }
        let batch = inputs[0].shape()[0];
        let zero_aux = aux.map(|a| Tensor::<T>::zeros(&a[0].shape()));

        let mut layer_in: Vec<Tensor<T>> = inputs.to_vec();
        let mut top: Option<BlstmStates<T>> = None;
        for (layer_idx, (fwd, bwd)) in self.layers.iter().enumerate() {
            let with_aux = layer_idx == 0;
            let zeros = Tensor::<T>::zeros(&[batch, self.hidden_dim]);

            let mut forward_states = Vec::with_capacity(seq_len);
            let (mut h, mut c) = (zeros.clone(), zeros.clone());
            for t in 0..seq_len {
                let x = if with_aux {
                    match aux {
                        Some(a) => {
                            let prev = if t == 0 {
                                zero_aux.as_ref().expect("aux present")
                            } else {
                                &a[t - 1]
                            };
                            tape.concat(&[layer_in[t].clone(), prev.clone()], 1)?
                        }
                        None => layer_in[t].clone(),
                    }
                } else {
                    layer_in[t].clone()
                };
                let (h_new, c_new) = lstm_step(fwd, tape, &x, &h, &c)?;
                h = masked_update(tape, masks, t, h_new, &h)?;
                c = masked_update(tape, masks, t, c_new, &c)?;
                forward_states.push(h.clone());
            }

            let mut backward_states = vec![zeros.clone(); seq_len];
            let (mut h, mut c) = (zeros.clone(), zeros.clone());
            for t in (0..seq_len).rev() {
                let x = if with_aux {
                    match aux {
                        Some(a) => {
                            let next = if t + 1 == seq_len {
                                zero_aux.as_ref().expect("aux present")
                            } else {
                                &a[t + 1]
                            };
                            tape.concat(&[layer_in[t].clone(), next.clone()], 1)?
                        }
                        None => layer_in[t].clone(),
                    }
                } else {
                    layer_in[t].clone()
                };
                let (h_new, c_new) = lstm_step(bwd, tape, &x, &h, &c)?;
                h = masked_update(tape, masks, t, h_new, &h)?;
                c = masked_update(tape, masks, t, c_new, &c)?;
                backward_states[t] = h.clone();
            }

            let states = BlstmStates {
                forward: forward_states,
                backward: backward_states,
            };
            if layer_idx + 1 < self.layers.len() {
                layer_in = states.concat_steps(tape)?;
            }
            top = Some(states);
        }
        Ok(top.expect("at least one layer"))
    }
}

/// Stacked unidirectional LSTM used as a decoder.
pub struct LstmDecoder<T> {
    pub layers: Vec<LstmParams<T>>,
    pub hidden_dim: usize,
}

/// Per-layer `(h, c)` pairs threaded through decoder steps.
pub type DecoderState<T> = Vec<(Tensor<T>, Tensor<T>)>;

impl<T: Scalar> LstmDecoder<T> {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(num_layers >= 1, "decoder needs at least one layer");
        let mut layers = Vec::with_capacity(num_layers);
        for layer in 0..num_layers {
            let in_dim = if layer == 0 { input_dim } else { hidden_dim };
            layers.push(LstmParams::init(in_dim, hidden_dim, rng));
        }
        LstmDecoder { layers, hidden_dim }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named_params(&format!("{prefix}.l{i}")));
        }
        out
    }

    pub fn zero_state(&self, batch: usize) -> DecoderState<T> {
        self.layers
            .iter()
            .map(|_| {
                (
                    Tensor::zeros(&[batch, self.hidden_dim]),
                    Tensor::zeros(&[batch, self.hidden_dim]),
                )
            })
            .collect()
    }

    /// Advance the stack by one step; returns the top layer's new state.
    pub fn step(
        &self,
        tape: &mut Tape<T>,
        input_t: &Tensor<T>,
        state: &mut DecoderState<T>,
    ) -> Result<Tensor<T>, TensorError> {
        assert_eq!(state.len(), self.layers.len(), "decoder state arity");
        let mut x = input_t.clone();
        for (layer, (h, c)) in self.layers.iter().zip(state.iter_mut()) {
            let (h_new, c_new) = lstm_step(layer, tape, &x, h, c)?;
            *h = h_new.clone();
            *c = c_new;
            x = h_new;
        }
        Ok(x)
    }
}
