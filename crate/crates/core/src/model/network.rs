//! Attention encoder-decoder over word-piece tokens.
//!
//! Encoder: stacked bidirectional LSTMs. After each of the first `subsample`
//! layers, adjacent time steps are concatenated pairwise, halving the length
//! (an odd trailing step is paired with zeros).
//!
//! Decoder step `i`:
//!
//! ```text
//! s_i, cell_i = LSTM([embed(z_{i-1}); c_{i-1}], s_{i-1}, cell_{i-1})
//! e_ij       = v . tanh(Phi [s_i; h_j] + b_phi)
//! alpha_i    = softmax(e_i)
//! c_i        = sum_j alpha_ij h_j
//! p(. | ...) = softmax(W_out tanh(W_mlp [s_i; c_i] + b_mlp) + b_out)
//! ```
//!
//! Step 1 is conditioned on a learned start embedding (row `vocab_size` of the
//! embedding table) and a zero context. Gradients are computed by hand-written
//! backpropagation through time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{
    add_into, matvec_acc, matvec_cols_acc, matvec_cols_t_acc, matvec_t_acc, outer_acc, sigmoid, ParamSet, Tensor,
};
use crate::error::{LsdError, Result};
use crate::real::{log_softmax_in_place, Real};
use crate::token::TokenId;

/// Half-width of the uniform weight initialisation.
pub const INIT_SCALE: f64 = 0.075;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub vocab_size: usize,
    /// Hidden units per direction in each encoder layer.
    pub enc_hidden: usize,
    pub enc_layers: usize,
    /// Number of pairwise time reductions, applied after the first `subsample` layers.
    pub subsample: usize,
    pub dec_hidden: usize,
    pub att_dim: usize,
    pub emb_dim: usize,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    /// Small default dimensions: 3 encoder layers of 32 units per direction with
    /// a total time reduction of 4, decoder 64, attention 32, embedding 16.
    pub fn desk(input_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            input_dim,
            vocab_size,
            enc_hidden: 32,
            enc_layers: 3,
            subsample: 2,
            dec_hidden: 64,
            att_dim: 32,
            emb_dim: 16,
            mlp_hidden: 32,
        }
    }

    /// Total time reduction factor of the encoder.
    pub fn reduction(&self) -> usize {
        1 << self.subsample
    }

    /// Width of encoder states (and of the attention context).
    pub fn context_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    /// Encoder length for an input of `t` frames.
    pub fn encoded_len(&self, t: usize) -> usize {
        let mut len = t;
        for _ in 0..self.subsample {
            len = len.div_ceil(2);
        }
        len
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("vocab_size", self.vocab_size),
            ("enc_hidden", self.enc_hidden),
            ("enc_layers", self.enc_layers),
            ("dec_hidden", self.dec_hidden),
            ("att_dim", self.att_dim),
            ("emb_dim", self.emb_dim),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(LsdError::config(format!("model {name} must be positive")));
        }
        if self.subsample >= self.enc_layers {
            return Err(LsdError::config(format!(
                "subsample ({}) must be smaller than enc_layers ({})",
                self.subsample, self.enc_layers
            )));
        }
        Ok(())
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        match layer {
            0 => self.input_dim,
            k if k <= self.subsample => 2 * self.context_dim(),
            _ => self.context_dim(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmIds {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<[LstmIds; 2]>,
    embed: usize,
    dec: LstmIds,
    phi_w: usize,
    phi_b: usize,
    att_v: usize,
    mlp_w: usize,
    mlp_b: usize,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn build<F: Real>(cfg: &ModelConfig) -> (Layout, ParamSet<F>) {
        let mut p = ParamSet::new();
        let lstm = |p: &mut ParamSet<F>, name: &str, input: usize, hidden: usize| LstmIds {
            w: p.push(format!("{name}.weight"), Tensor::zeros(&[4 * hidden, input + hidden])),
            b: p.push(format!("{name}.bias"), Tensor::zeros(&[4 * hidden])),
        };
        let he = cfg.enc_hidden;
        let ctx = cfg.context_dim();
        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for k in 0..cfg.enc_layers {
            let input = cfg.layer_input_dim(k);
            enc.push([
                lstm(&mut p, &format!("encoder.layer{k}.fwd"), input, he),
                lstm(&mut p, &format!("encoder.layer{k}.bwd"), input, he),
            ]);
        }
        let embed = p.push("decoder.embedding", Tensor::zeros(&[cfg.vocab_size + 1, cfg.emb_dim]));
        let dec = lstm(&mut p, "decoder.lstm", cfg.emb_dim + ctx, cfg.dec_hidden);
        let phi_w = p.push(
            "attention.phi.weight",
            Tensor::zeros(&[cfg.att_dim, cfg.dec_hidden + ctx]),
        );
        let phi_b = p.push("attention.phi.bias", Tensor::zeros(&[cfg.att_dim]));
        let att_v = p.push("attention.v", Tensor::zeros(&[cfg.att_dim]));
        let mlp_w = p.push(
            "output.hidden.weight",
            Tensor::zeros(&[cfg.mlp_hidden, cfg.dec_hidden + ctx]),
        );
        let mlp_b = p.push("output.hidden.bias", Tensor::zeros(&[cfg.mlp_hidden]));
        let out_w = p.push("output.proj.weight", Tensor::zeros(&[cfg.vocab_size, cfg.mlp_hidden]));
        let out_b = p.push("output.proj.bias", Tensor::zeros(&[cfg.vocab_size]));
        let layout = Layout {
            enc,
            embed,
            dec,
            phi_w,
            phi_b,
            att_v,
            mlp_w,
            mlp_b,
            out_w,
            out_b,
        };
        (layout, p)
    }
}

/// Recovers the model configuration from parameter shapes.
fn infer_config<F: Real>(p: &ParamSet<F>) -> Result<ModelConfig> {
    let shape = |name: &str| -> Result<&[usize]> {
        p.by_name(name)
            .map(|t| t.shape.as_slice())
            .ok_or_else(|| LsdError::CorruptCheckpoint(format!("missing tensor `{name}`")))
    };
    let dim = |s: &[usize], i: usize, name: &str| -> Result<usize> {
        s.get(i)
            .copied()
            .ok_or_else(|| LsdError::CorruptCheckpoint(format!("tensor `{name}` has rank {}", s.len())))
    };
    let enc_layers = (0..)
        .take_while(|k| p.index_of(&format!("encoder.layer{k}.fwd.weight")).is_some())
        .count();
    if enc_layers == 0 {
        return Err(LsdError::CorruptCheckpoint("no encoder layers".into()));
    }
    let w0 = shape("encoder.layer0.fwd.weight")?;
    let enc_hidden = dim(w0, 0, "encoder.layer0.fwd.weight")? / 4;
    let input_dim = dim(w0, 1, "encoder.layer0.fwd.weight")?.saturating_sub(enc_hidden);
    let subsample = (1..enc_layers)
        .take_while(|k| {
            shape(&format!("encoder.layer{k}.fwd.weight"))
                .map(|s| s.get(1) == Some(&(4 * enc_hidden + enc_hidden)))
                .unwrap_or(false)
        })
        .count();
    let emb = shape("decoder.embedding")?;
    let cfg = ModelConfig {
        input_dim,
        vocab_size: dim(shape("output.proj.bias")?, 0, "output.proj.bias")?,
        enc_hidden,
        enc_layers,
        subsample,
        dec_hidden: dim(shape("decoder.lstm.bias")?, 0, "decoder.lstm.bias")? / 4,
        att_dim: dim(shape("attention.v")?, 0, "attention.v")?,
        emb_dim: dim(emb, 1, "decoder.embedding")?,
        mlp_hidden: dim(shape("output.hidden.bias")?, 0, "output.hidden.bias")?,
    };
    cfg.validate()
        .map_err(|e| LsdError::CorruptCheckpoint(format!("inconsistent tensor shapes: {e}")))?;
    Ok(cfg)
}

/// Attention encoder-decoder with its parameters.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet<F>,
}

impl<F: Real> Model<F> {
    /// Weights uniform in `[-0.075, 0.075]`, biases zero, from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Model::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.params.init_uniform(INIT_SCALE, &mut rng);
        Ok(model)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = Layout::build(&config);
        Ok(Model { config, layout, params })
    }

    /// Wraps loaded parameters, inferring dimensions from tensor shapes.
    pub fn from_params(params: ParamSet<F>) -> Result<Self> {
        let config = infer_config(&params)?;
        let mut model = Model::zeros(config)?;
        model.set_params(params)?;
        Ok(model)
    }

    /// Replaces the parameters; names and shapes must match this configuration.
    pub fn set_params(&mut self, params: ParamSet<F>) -> Result<()> {
        check_layout(&self.params, &params)?;
        self.params = params;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    /// Zeroed gradient buffer with this model's layout.
    pub fn zero_grads(&self) -> ParamSet<F> {
        self.params.zeros_like()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Id of the start marker fed to the first decoder step.
    pub fn start_token(&self) -> TokenId {
        self.config.vocab_size
    }

    fn p(&self, idx: usize) -> &[F] {
        &self.params.get(idx).data
    }

    // ---------------------------------------------------------------- encoder

    pub fn encode(&self, x: &Tensor<F>) -> Result<Encoded<F>> {
        Ok(self.encode_impl(x, false)?.0)
    }

    fn encode_impl(&self, x: &Tensor<F>, record: bool) -> Result<(Encoded<F>, EncoderTape<F>)> {
        let cfg = &self.config;
        if x.shape.len() != 2 || x.cols() != cfg.input_dim {
            return Err(LsdError::input(format!(
                "input must be [T, {}], got {:?}",
                cfg.input_dim, x.shape
            )));
        }
        let t = x.rows();
        if t < cfg.reduction() {
            return Err(LsdError::input(format!(
                "input has {t} frames, fewer than the time reduction factor {}",
                cfg.reduction()
            )));
        }
        let he = cfg.enc_hidden;
        let mut seq: Vec<Vec<F>> = (0..t).map(|r| x.row(r).to_vec()).collect();
        let mut tape = EncoderTape { layers: Vec::new() };
        for (k, ids) in self.layout.enc.iter().enumerate() {
            let len = seq.len();
            let mut out = vec![vec![F::zero(); 2 * he]; len];
            let mut caches = [Vec::new(), Vec::new()];
            for (dir, lstm) in ids.iter().enumerate() {
                let (w, b) = (self.p(lstm.w), self.p(lstm.b));
                let mut h = vec![F::zero(); he];
                let mut c = vec![F::zero(); he];
                let mut dir_caches: Vec<Option<LstmCache<F>>> =
                    (0..if record { len } else { 0 }).map(|_| None).collect();
                for step in 0..len {
                    let ti = if dir == 0 { step } else { len - 1 - step };
                    let mut input = seq[ti].clone();
                    input.extend_from_slice(&h);
                    let cache = lstm_forward(w, b, he, input, &c);
                    h.copy_from_slice(&cache.h);
                    c.copy_from_slice(&cache.c);
                    out[ti][dir * he..(dir + 1) * he].copy_from_slice(&h);
                    if record {
                        dir_caches[ti] = Some(cache);
                    }
                }
                caches[dir] = dir_caches.into_iter().map(|c| c.expect("every step cached")).collect();
            }
            if record {
                let [fwd, bwd] = caches;
                tape.layers.push(LayerTape { fwd, bwd, len });
            }
            seq = if k < cfg.subsample { pair_frames(out) } else { out };
        }
        let hd = cfg.dec_hidden;
        let (phi_w, phi_b) = (self.p(self.layout.phi_w), self.p(self.layout.phi_b));
        let proj = seq
            .iter()
            .map(|hj| {
                let mut pj = phi_b.to_vec();
                matvec_cols_acc(phi_w, hd + cfg.context_dim(), hd, hj, &mut pj);
                pj
            })
            .collect();
        Ok((Encoded { h: seq, proj }, tape))
    }

    fn encoder_backward(&self, tape: &EncoderTape<F>, mut d_out: Vec<Vec<F>>, grads: &mut ParamSet<F>) {
        let cfg = &self.config;
        let he = cfg.enc_hidden;
        for k in (0..cfg.enc_layers).rev() {
            let layer = &tape.layers[k];
            let d_layer = if k < cfg.subsample {
                unpair_grads(d_out, layer.len, 2 * he)
            } else {
                d_out
            };
            let in_dim = cfg.layer_input_dim(k);
            let mut d_in = vec![vec![F::zero(); in_dim]; layer.len];
            for (dir, lstm) in self.layout.enc[k].iter().enumerate() {
                let caches = if dir == 0 { &layer.fwd } else { &layer.bwd };
                let w = self.p(lstm.w);
                let mut dh_carry = vec![F::zero(); he];
                let mut dc_carry = vec![F::zero(); he];
                for step in (0..layer.len).rev() {
                    let ti = if dir == 0 { step } else { layer.len - 1 - step };
                    let mut dh = d_layer[ti][dir * he..(dir + 1) * he].to_vec();
                    add_into(&mut dh, &dh_carry);
                    let back = lstm_backward(w, he, &caches[ti], &dh, &dc_carry);
                    accumulate_lstm(grads, *lstm, &back.dz, &caches[ti].input);
                    add_into(&mut d_in[ti], &back.d_input[..in_dim]);
                    dh_carry.copy_from_slice(&back.d_input[in_dim..]);
                    dc_carry = back.dc_prev;
                }
            }
            d_out = d_in;
        }
    }

    // ---------------------------------------------------------------- decoder

    pub fn initial_state(&self) -> DecoderState<F> {
        DecoderState {
            s: vec![F::zero(); self.config.dec_hidden],
            cell: vec![F::zero(); self.config.dec_hidden],
            ctx: vec![F::zero(); self.config.context_dim()],
        }
    }

    /// Content-based attention of decoder state `s` over encoder states.
    pub fn attend(&self, s: &[F], enc: &Encoded<F>) -> Attention<F> {
        let cfg = &self.config;
        let hd = cfg.dec_hidden;
        let cols = hd + cfg.context_dim();
        let phi_w = self.p(self.layout.phi_w);
        let v = self.p(self.layout.att_v);
        let mut q = vec![F::zero(); cfg.att_dim];
        matvec_cols_acc(phi_w, cols, 0, s, &mut q);
        let mut act = Vec::with_capacity(enc.len());
        let mut energies: Vec<F> = Vec::with_capacity(enc.len());
        for pj in &enc.proj {
            let a: Vec<F> = q.iter().zip(pj).map(|(&qi, &pi)| (qi + pi).tanh()).collect();
            energies.push(a.iter().zip(v).map(|(&ai, &vi)| ai * vi).sum());
            act.push(a);
        }
        let mut alpha = energies.clone();
        log_softmax_in_place(&mut alpha);
        alpha.iter_mut().for_each(|a| *a = a.exp());
        let mut context = vec![F::zero(); cfg.context_dim()];
        for (&a, hj) in alpha.iter().zip(&enc.h) {
            for (c, &h) in context.iter_mut().zip(hj) {
                *c += a * h;
            }
        }
        Attention {
            energies,
            alpha,
            context,
            act,
        }
    }

    /// One decoder step from `state` after emitting `prev` (or the start marker).
    pub fn decode_step(&self, enc: &Encoded<F>, state: &DecoderState<F>, prev: TokenId) -> Result<StepOutput<F>> {
        Ok(self.step_impl(enc, state, prev)?.0)
    }

    fn step_impl(
        &self,
        enc: &Encoded<F>,
        state: &DecoderState<F>,
        prev: TokenId,
    ) -> Result<(StepOutput<F>, StepCache<F>)> {
        let cfg = &self.config;
        if prev > cfg.vocab_size {
            return Err(LsdError::input(format!(
                "token id {prev} outside vocabulary of {} (start marker is {})",
                cfg.vocab_size, cfg.vocab_size
            )));
        }
        let emb = &self.params.get(self.layout.embed).row(prev);
        let mut input = Vec::with_capacity(cfg.emb_dim + cfg.context_dim() + cfg.dec_hidden);
        input.extend_from_slice(emb);
        input.extend_from_slice(&state.ctx);
        input.extend_from_slice(&state.s);
        let lstm = lstm_forward(
            self.p(self.layout.dec.w),
            self.p(self.layout.dec.b),
            cfg.dec_hidden,
            input,
            &state.cell,
        );
        let s = lstm.h.clone();
        let att = self.attend(&s, enc);

        let mut m_in = s.clone();
        m_in.extend_from_slice(&att.context);
        let mut m = self.p(self.layout.mlp_b).to_vec();
        matvec_acc(self.p(self.layout.mlp_w), m_in.len(), &m_in, &mut m);
        m.iter_mut().for_each(|v| *v = v.tanh());
        let mut log_probs = self.p(self.layout.out_b).to_vec();
        matvec_acc(self.p(self.layout.out_w), cfg.mlp_hidden, &m, &mut log_probs);
        log_softmax_in_place(&mut log_probs);

        let next = DecoderState {
            s: s.clone(),
            cell: lstm.c.clone(),
            ctx: att.context.clone(),
        };
        let cache = StepCache {
            prev,
            lstm,
            s,
            act: att.act,
            alpha: att.alpha.clone(),
            m_in,
            m,
            probs: log_probs.iter().map(|v| v.exp()).collect(),
        };
        let out = StepOutput {
            state: next,
            alpha: att.alpha,
            energies: att.energies,
            log_probs,
        };
        Ok((out, cache))
    }

    /// Starts a recorded forward pass over `x`. Tokens are fed one at a time
    /// through the returned recorder, which yields a tape for backpropagation.
    pub fn record(&self, x: &Tensor<F>) -> Result<SequenceRecorder<'_, F>> {
        let (enc, enc_tape) = self.encode_impl(x, true)?;
        Ok(SequenceRecorder {
            model: self,
            enc,
            enc_tape,
            state: self.initial_state(),
            prev: self.start_token(),
            steps: Vec::new(),
            targets: Vec::new(),
            pending: None,
            log_prob: F::zero(),
        })
    }

    /// `log p(z | x)`: the chain-rule sum of per-step log-probabilities of every
    /// token in `z`, including a trailing end-of-sequence token if present.
    pub fn log_prob_sequence(&self, x: &Tensor<F>, z: &[TokenId]) -> Result<F> {
        let enc = self.encode(x)?;
        self.log_prob_encoded(&enc, z)
    }

    /// As [`Model::log_prob_sequence`] with a precomputed encoding.
    pub fn log_prob_encoded(&self, enc: &Encoded<F>, z: &[TokenId]) -> Result<F> {
        let mut state = self.initial_state();
        let mut prev = self.start_token();
        let mut total = F::zero();
        for &tok in z {
            if tok >= self.config.vocab_size {
                return Err(LsdError::input(format!("token id {tok} outside vocabulary")));
            }
            let out = self.decode_step(enc, &state, prev)?;
            total += out.log_probs[tok];
            state = out.state;
            prev = tok;
        }
        Ok(total)
    }

    /// Records a forward pass for the fixed sequence `z`.
    pub fn forward(&self, x: &Tensor<F>, z: &[TokenId]) -> Result<Tape<F>> {
        let mut rec = self.record(x)?;
        for &tok in z {
            rec.distribution()?;
            rec.emit(tok)?;
        }
        Ok(rec.finish())
    }

    /// `log p(z|x)` and its gradient with respect to every parameter.
    pub fn grad_log_prob(&self, x: &Tensor<F>, z: &[TokenId]) -> Result<(F, ParamSet<F>)> {
        let mut tape = self.forward(x, z)?;
        let lp = tape.log_prob().expect("fresh tape");
        let mut grads = self.zero_grads();
        tape.backward(self, F::one(), &mut grads)?;
        Ok((lp, grads))
    }

    fn decoder_backward(&self, data: &TapeData<F>, seed: F, grads: &mut ParamSet<F>) {
        let cfg = &self.config;
        let hd = cfg.dec_hidden;
        let ctx_dim = cfg.context_dim();
        let att_cols = hd + ctx_dim;
        let l = &self.layout;
        let enc = &data.enc;
        let t_enc = enc.len();

        let mut ds_next = vec![F::zero(); hd];
        let mut dcell_next = vec![F::zero(); hd];
        let mut dctx_next = vec![F::zero(); ctx_dim];
        let mut dproj = vec![vec![F::zero(); cfg.att_dim]; t_enc];
        let mut dh = vec![vec![F::zero(); ctx_dim]; t_enc];

        for (step, &target) in data.steps.iter().zip(&data.targets).rev() {
            // output layer
            let mut dlogits: Vec<F> = step.probs.iter().map(|&p| -seed * p).collect();
            dlogits[target] += seed;
            outer_acc(&mut grads.get_mut(l.out_w).data, cfg.mlp_hidden, 0, &dlogits, &step.m);
            add_into(&mut grads.get_mut(l.out_b).data, &dlogits);
            let mut dm = vec![F::zero(); cfg.mlp_hidden];
            matvec_t_acc(self.p(l.out_w), cfg.mlp_hidden, &dlogits, &mut dm);
            let dpre: Vec<F> = dm.iter().zip(&step.m).map(|(&d, &m)| d * (F::one() - m * m)).collect();
            outer_acc(&mut grads.get_mut(l.mlp_w).data, att_cols, 0, &dpre, &step.m_in);
            add_into(&mut grads.get_mut(l.mlp_b).data, &dpre);
            let mut dmin = vec![F::zero(); att_cols];
            matvec_t_acc(self.p(l.mlp_w), att_cols, &dpre, &mut dmin);
            let mut ds = dmin[..hd].to_vec();
            add_into(&mut ds, &ds_next);
            let mut dctx = dmin[hd..].to_vec();
            add_into(&mut dctx, &dctx_next);

            // attention
            let mut dalpha = Vec::with_capacity(t_enc);
            for (j, hj) in enc.h.iter().enumerate() {
                dalpha.push(dctx.iter().zip(hj).map(|(&d, &h)| d * h).sum::<F>());
                let a = step.alpha[j];
                for (g, &d) in dh[j].iter_mut().zip(&dctx) {
                    *g += a * d;
                }
            }
            let mean: F = step.alpha.iter().zip(&dalpha).map(|(&a, &d)| a * d).sum();
            let v = self.p(l.att_v);
            let mut dq = vec![F::zero(); cfg.att_dim];
            for j in 0..t_enc {
                let de = step.alpha[j] * (dalpha[j] - mean);
                if de == F::zero() {
                    continue;
                }
                let act = &step.act[j];
                let gv = &mut grads.get_mut(l.att_v).data;
                for k in 0..cfg.att_dim {
                    gv[k] += de * act[k];
                    let dp = de * v[k] * (F::one() - act[k] * act[k]);
                    dq[k] += dp;
                    dproj[j][k] += dp;
                }
            }
            outer_acc(&mut grads.get_mut(l.phi_w).data, att_cols, 0, &dq, &step.s);
            matvec_cols_t_acc(self.p(l.phi_w), att_cols, 0, &dq, &mut ds);

            // recurrent cell
            let back = lstm_backward(self.p(l.dec.w), hd, &step.lstm, &ds, &dcell_next);
            accumulate_lstm(grads, l.dec, &back.dz, &step.lstm.input);
            let e = cfg.emb_dim;
            add_into(grads.get_mut(l.embed).row_mut(step.prev), &back.d_input[..e]);
            dctx_next.copy_from_slice(&back.d_input[e..e + ctx_dim]);
            ds_next.copy_from_slice(&back.d_input[e + ctx_dim..]);
            dcell_next = back.dc_prev;
        }

        for (j, dpj) in dproj.iter().enumerate() {
            outer_acc(&mut grads.get_mut(l.phi_w).data, att_cols, hd, dpj, &enc.h[j]);
            add_into(&mut grads.get_mut(l.phi_b).data, dpj);
            matvec_cols_t_acc(self.p(l.phi_w), att_cols, hd, dpj, &mut dh[j]);
        }
        self.encoder_backward(&data.enc_tape, dh, grads);
    }
}

fn check_layout<F: Real>(expected: &ParamSet<F>, found: &ParamSet<F>) -> Result<()> {
    if expected.names().len() != found.names().len() {
        return Err(LsdError::ShapeMismatch {
            name: "<tensor count>".into(),
            expected: vec![expected.names().len()],
            found: vec![found.names().len()],
        });
    }
    for ((en, et), (fname, ft)) in expected
        .names()
        .iter()
        .zip(expected.tensors())
        .zip(found.names().iter().zip(found.tensors()))
    {
        if en != fname || et.shape != ft.shape {
            return Err(LsdError::ShapeMismatch {
                name: if en == fname {
                    en.clone()
                } else {
                    format!("{en} (found `{fname}`)")
                },
                expected: et.shape.clone(),
                found: ft.shape.clone(),
            });
        }
    }
    Ok(())
}

/// Encoder output `h` (`[T', 2 * enc_hidden]`) and its attention projection.
#[derive(Debug, Clone)]
pub struct Encoded<F> {
    pub h: Vec<Vec<F>>,
    /// `Phi_h h_j + b_phi` for every `j`, shared by all decoder steps.
    pub proj: Vec<Vec<F>>,
}

impl<F> Encoded<F> {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<F> {
    pub s: Vec<F>,
    pub cell: Vec<F>,
    pub ctx: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct Attention<F> {
    pub energies: Vec<F>,
    pub alpha: Vec<F>,
    pub context: Vec<F>,
    act: Vec<Vec<F>>,
}

/// Result of one decoder step: new state, attention, and `log p(. | x, z_<i)`.
#[derive(Debug, Clone)]
pub struct StepOutput<F> {
    pub state: DecoderState<F>,
    pub alpha: Vec<F>,
    pub energies: Vec<F>,
    pub log_probs: Vec<F>,
}

fn pair_frames<F: Real>(seq: Vec<Vec<F>>) -> Vec<Vec<F>> {
    let width = seq.first().map_or(0, Vec::len);
    seq.chunks(2)
        .map(|pair| {
            let mut v = pair[0].clone();
            match pair.get(1) {
                Some(second) => v.extend_from_slice(second),
                None => v.extend(std::iter::repeat_n(F::zero(), width)),
            }
            v
        })
        .collect()
}

fn unpair_grads<F: Real>(d_pairs: Vec<Vec<F>>, len: usize, width: usize) -> Vec<Vec<F>> {
    let mut out = Vec::with_capacity(len);
    for d in d_pairs {
        out.push(d[..width].to_vec());
        if out.len() < len {
            out.push(d[width..].to_vec());
        }
    }
    out
}

// ------------------------------------------------------------------- LSTM

#[derive(Debug, Clone)]
struct LstmCache<F> {
    /// `[x; h_prev]`
    input: Vec<F>,
    c_prev: Vec<F>,
    /// Activated gates `[i, f, g, o]`.
    gates: Vec<F>,
    c: Vec<F>,
    tanh_c: Vec<F>,
    h: Vec<F>,
}

fn lstm_forward<F: Real>(w: &[F], b: &[F], hidden: usize, input: Vec<F>, c_prev: &[F]) -> LstmCache<F> {
    let mut z = b.to_vec();
    matvec_acc(w, input.len(), &input, &mut z);
    for (k, v) in z.iter_mut().enumerate() {
        *v = if (2 * hidden..3 * hidden).contains(&k) {
            v.tanh()
        } else {
            sigmoid(*v)
        };
    }
    let (i, rest) = z.split_at(hidden);
    let (f, rest) = rest.split_at(hidden);
    let (g, o) = rest.split_at(hidden);
    let c: Vec<F> = (0..hidden).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<F> = c.iter().map(|v| v.tanh()).collect();
    let h = (0..hidden).map(|k| o[k] * tanh_c[k]).collect();
    LstmCache {
        input,
        c_prev: c_prev.to_vec(),
        gates: z,
        c,
        tanh_c,
        h,
    }
}

struct LstmBack<F> {
    dz: Vec<F>,
    d_input: Vec<F>,
    dc_prev: Vec<F>,
}

fn lstm_backward<F: Real>(w: &[F], hidden: usize, cache: &LstmCache<F>, dh: &[F], dc_next: &[F]) -> LstmBack<F> {
    let one = F::one();
    let g = &cache.gates;
    let mut dz = vec![F::zero(); 4 * hidden];
    let mut dc_prev = vec![F::zero(); hidden];
    for k in 0..hidden {
        let (i, f, gg, o) = (g[k], g[hidden + k], g[2 * hidden + k], g[3 * hidden + k]);
        let tc = cache.tanh_c[k];
        let dc = dc_next[k] + dh[k] * o * (one - tc * tc);
        dz[k] = dc * gg * i * (one - i);
        dz[hidden + k] = dc * cache.c_prev[k] * f * (one - f);
        dz[2 * hidden + k] = dc * i * (one - gg * gg);
        dz[3 * hidden + k] = dh[k] * tc * o * (one - o);
        dc_prev[k] = dc * f;
    }
    let mut d_input = vec![F::zero(); cache.input.len()];
    matvec_t_acc(w, cache.input.len(), &dz, &mut d_input);
    LstmBack { dz, d_input, dc_prev }
}

fn accumulate_lstm<F: Real>(grads: &mut ParamSet<F>, ids: LstmIds, dz: &[F], input: &[F]) {
    outer_acc(&mut grads.get_mut(ids.w).data, input.len(), 0, dz, input);
    add_into(&mut grads.get_mut(ids.b).data, dz);
}

// ------------------------------------------------------------------- tape

#[derive(Debug, Clone)]
struct LayerTape<F> {
    fwd: Vec<LstmCache<F>>,
    bwd: Vec<LstmCache<F>>,
    len: usize,
}

#[derive(Debug, Clone)]
struct EncoderTape<F> {
    layers: Vec<LayerTape<F>>,
}

#[derive(Debug, Clone)]
struct StepCache<F> {
    prev: TokenId,
    lstm: LstmCache<F>,
    s: Vec<F>,
    act: Vec<Vec<F>>,
    alpha: Vec<F>,
    m_in: Vec<F>,
    m: Vec<F>,
    probs: Vec<F>,
}

#[derive(Debug, Clone)]
struct TapeData<F> {
    enc: Encoded<F>,
    enc_tape: EncoderTape<F>,
    steps: Vec<StepCache<F>>,
    targets: Vec<TokenId>,
    log_prob: F,
}

/// Incremental recorded forward pass: ask for the next-token distribution,
/// then emit the chosen token. Used for fixed sequences and for sampling.
pub struct SequenceRecorder<'m, F: Real> {
    model: &'m Model<F>,
    enc: Encoded<F>,
    enc_tape: EncoderTape<F>,
    state: DecoderState<F>,
    prev: TokenId,
    steps: Vec<StepCache<F>>,
    targets: Vec<TokenId>,
    pending: Option<(StepOutput<F>, StepCache<F>)>,
    log_prob: F,
}

impl<F: Real> SequenceRecorder<'_, F> {
    /// `log p(. | x, z_<i)` for the next position.
    pub fn distribution(&mut self) -> Result<&[F]> {
        if self.pending.is_none() {
            self.pending = Some(self.model.step_impl(&self.enc, &self.state, self.prev)?);
        }
        Ok(&self.pending.as_ref().expect("just set").0.log_probs)
    }

    /// Commits `token` at the current position and returns its log-probability.
    pub fn emit(&mut self, token: TokenId) -> Result<F> {
        if token >= self.model.vocab_size() {
            return Err(LsdError::input(format!("token id {token} outside vocabulary")));
        }
        let (out, cache) = self
            .pending
            .take()
            .ok_or_else(|| LsdError::State("emit called before distribution".into()))?;
        let lp = out.log_probs[token];
        self.log_prob += lp;
        self.state = out.state;
        self.prev = token;
        self.steps.push(cache);
        self.targets.push(token);
        Ok(lp)
    }

    pub fn log_prob(&self) -> F {
        self.log_prob
    }

    pub fn emitted(&self) -> &[TokenId] {
        &self.targets
    }

    pub fn finish(self) -> Tape<F> {
        Tape {
            data: Some(TapeData {
                enc: self.enc,
                enc_tape: self.enc_tape,
                steps: self.steps,
                targets: self.targets,
                log_prob: self.log_prob,
            }),
            consumed: false,
        }
    }
}

/// Recorded forward pass. Backpropagation consumes it; a second call is an error.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    data: Option<TapeData<F>>,
    consumed: bool,
}

impl<F: Real> Tape<F> {
    /// A tape with nothing recorded.
    pub fn empty() -> Self {
        Tape {
            data: None,
            consumed: false,
        }
    }

    pub fn log_prob(&self) -> Option<F> {
        self.data.as_ref().map(|d| d.log_prob)
    }

    pub fn tokens(&self) -> Option<&[TokenId]> {
        self.data.as_ref().map(|d| d.targets.as_slice())
    }

    /// Accumulates `seed * d log p(z|x) / d theta` into `grads`.
    pub fn backward(&mut self, model: &Model<F>, seed: F, grads: &mut ParamSet<F>) -> Result<()> {
        if !model.params.same_layout(grads) {
            return Err(LsdError::State(
                "gradient buffer layout does not match the model".into(),
            ));
        }
        let data = match self.data.take() {
            Some(d) => d,
            None if self.consumed => return Err(LsdError::State("backward already ran on this tape".into())),
            None => return Err(LsdError::State("backward without a recorded forward pass".into())),
        };
        self.consumed = true;
        model.decoder_backward(&data, seed, grads);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            vocab_size: vocab,
            enc_hidden: 3,
            enc_layers: 3,
            subsample: 2,
            dec_hidden: 4,
            att_dim: 3,
            emb_dim: 2,
            mlp_hidden: 4,
        }
    }

    fn random_model(vocab: usize, scale: f64, seed: u64) -> Model<f64> {
        let mut m = Model::<f64>::zeros(tiny_config(vocab)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in m.params_mut().tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
        m
    }

    fn random_input(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encoded_length_follows_reduction() {
        let m = random_model(5, 0.5, 1);
        assert_eq!(m.encode(&random_input(8, 3, 2)).unwrap().len(), 2);
        assert_eq!(m.encode(&random_input(9, 3, 2)).unwrap().len(), 3);
        assert_eq!(m.config().encoded_len(9), 3);
        assert!(m.encode(&random_input(3, 3, 2)).is_err());
        assert!(m.encode(&random_input(8, 2, 2)).is_err());
    }

    #[test]
    fn zero_model_gives_zero_states_and_uniform_output() {
        let m = Model::<f64>::zeros(ModelConfig::desk(4, 7)).unwrap();
        let x = Tensor::zeros(&[8, 4]);
        let enc = m.encode(&x).unwrap();
        assert_eq!(enc.len(), 2);
        assert!(enc.h.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(enc.h[0].len(), 64);
        let out = m.decode_step(&enc, &m.initial_state(), m.start_token()).unwrap();
        for lp in &out.log_probs {
            assert!((lp - (1.0f64 / 7.0).ln()).abs() < 1e-12);
        }
        let z = [1, 2, 3];
        let lp = m.log_prob_sequence(&x, &z).unwrap();
        assert!((lp - 3.0 * (1.0f64 / 7.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_is_a_distribution() {
        let m = random_model(5, 1.0, 3);
        let enc = m.encode(&random_input(13, 3, 4)).unwrap();
        let mut state = m.initial_state();
        let mut prev = m.start_token();
        for tok in [0, 3, 1, 4] {
            let out = m.decode_step(&enc, &state, prev).unwrap();
            let sum: f64 = out.alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(out.alpha.iter().all(|&a| a >= 0.0));
            let mass: f64 = out.log_probs.iter().map(|v| v.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-12);
            state = out.state;
            prev = tok;
        }
    }

    #[test]
    fn single_encoder_state_gets_all_attention() {
        let m = random_model(5, 1.0, 5);
        let enc = m.encode(&random_input(4, 3, 6)).unwrap();
        assert_eq!(enc.len(), 1);
        let att = m.attend(&[0.3, -0.2, 0.1, 0.5], &enc);
        assert_eq!(att.alpha, vec![1.0]);
        assert_eq!(att.context, enc.h[0]);
    }

    #[test]
    fn tape_is_single_use() {
        let m = random_model(5, 0.5, 7);
        let x = random_input(8, 3, 8);
        let mut grads = m.zero_grads();
        assert!(matches!(
            Tape::empty().backward(&m, 1.0, &mut grads),
            Err(LsdError::State(_))
        ));
        let mut tape = m.forward(&x, &[1, 2, 0]).unwrap();
        tape.backward(&m, 1.0, &mut grads).unwrap();
        assert!(matches!(tape.backward(&m, 1.0, &mut grads), Err(LsdError::State(_))));
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        let m = random_model(5, 0.5, 9);
        let x = random_input(8, 3, 10);
        let z = [3, 1, 0];
        let mut g1 = m.zero_grads();
        m.forward(&x, &z).unwrap().backward(&m, 1.0, &mut g1).unwrap();
        let mut g3 = m.zero_grads();
        m.forward(&x, &z).unwrap().backward(&m, -2.5, &mut g3).unwrap();
        for (a, b) in g1.iter_flat().zip(g3.iter_flat()) {
            assert!((-2.5 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn recorder_matches_direct_log_prob() {
        let m = random_model(6, 0.8, 11);
        let x = random_input(10, 3, 12);
        let z = [2, 5, 1, 0];
        let direct = m.log_prob_sequence(&x, &z).unwrap();
        let tape = m.forward(&x, &z).unwrap();
        assert_eq!(tape.log_prob().unwrap(), direct);
        assert!(m.forward(&x, &[6]).is_err());
    }

    #[test]
    fn config_is_recovered_from_shapes() {
        let cfg = ModelConfig::desk(12, 40);
        let m = Model::<f32>::new(cfg.clone(), 1).unwrap();
        let back = Model::from_params(m.params().clone()).unwrap();
        assert_eq!(back.config(), &cfg);
        let cfg0 = ModelConfig {
            subsample: 0,
            ..tiny_config(4)
        };
        let m0 = Model::<f64>::zeros(cfg0.clone()).unwrap();
        assert_eq!(Model::from_params(m0.params().clone()).unwrap().config(), &cfg0);
    }

    #[test]
    fn set_params_names_the_mismatched_tensor() {
        let a = Model::<f64>::zeros(tiny_config(5)).unwrap();
        let b = Model::<f64>::zeros(tiny_config(6)).unwrap();
        let mut a2 = a.clone();
        match a2.set_params(b.params().clone()) {
            Err(LsdError::ShapeMismatch { name, .. }) => assert_eq!(name, "decoder.embedding"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
