//! Multimodal text style transfer: an LSTM encoder with visual and textual
//! attention over a trajectory and a masked template, and an attentive LSTM
//! decoder that regenerates the full instruction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Linear, LstmCell};
use crate::autodiff::{adam_step, AdamConfig, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::ModelError;
use crate::features::FeatureStore;
use crate::graph::Trajectory;
use crate::text::tokenize::is_sentence_end;
use crate::text::Vocab;

pub const SLICES: usize = 8;
pub const ORIENT_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerConfig {
    /// Visual slice dimension; must equal `C * H` of the feature store.
    pub d_v: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Maximum encoder steps (views); longer trajectories are subsampled.
    pub max_views: usize,
    /// Maximum template sentences; extra sentences merge into the last.
    pub max_sentences: usize,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        SpeakerConfig { d_v: 32, hidden: 64, embed: 32, max_views: 40, max_sentences: 8 }
    }
}

impl SpeakerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [self.d_v, self.hidden, self.embed, self.max_views, self.max_sentences];
        if dims.contains(&0) {
            return Err(ModelError::Config(format!("speaker dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn slice_dim(&self) -> usize {
        self.d_v + ORIENT_DIM
    }
}

/// Eight view slices of one panorama as an `[8, d_v + 64]` matrix. Slice `i`
/// covers bearings `[45i, 45(i+1))`; its visual block is the column mean of
/// the feature map over that range (flattened `C x H`), and its orientation
/// block repeats `[sin a, cos a]` 32 times with `a = 45i - heading`.
pub fn speaker_view(map: &Tensor, heading: f64) -> Tensor {
    let s = map.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let width = w / SLICES;
    let d_v = c * h;
    let src = map.data();
    let mut out = Vec::with_capacity(SLICES * (d_v + ORIENT_DIM));
    for i in 0..SLICES {
        for ch in 0..c {
            for row in 0..h {
                let base = (ch * h + row) * w + i * width;
                out.push(src[base..base + width].iter().sum::<f64>() / width as f64);
            }
        }
        let a = (i as f64 * 45.0 - heading).to_radians();
        for _ in 0..ORIENT_DIM / 2 {
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Tensor::new(vec![SLICES, d_v + ORIENT_DIM], out).expect("consistent view shape")
}

/// Evenly spaced indices keeping the first and last element.
pub(crate) fn subsample(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    if max == 1 {
        return vec![len - 1];
    }
    (0..max).map(|i| ((i * (len - 1)) as f64 / (max - 1) as f64).round() as usize).collect()
}

/// Speaker inputs for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSample {
    pub views: Vec<Tensor>,
    /// Template tokens (including `[MASK]`).
    pub template: Vec<String>,
    /// Full instruction tokens; empty at inference time.
    pub target: Vec<String>,
}

impl SpeakerSample {
    pub fn from_trajectory(
        traj: &Trajectory,
        features: &FeatureStore,
        template: Vec<String>,
        target: Vec<String>,
    ) -> Result<Self, ModelError> {
        let views = traj
            .states
            .iter()
            .map(|s| Ok(speaker_view(features.get(&s.node)?, s.heading)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(SpeakerSample { views, template, target })
    }
}

#[derive(Debug, Clone, Copy)]
struct SpeakerParams {
    emb: ParamId,
    w_v: ParamId,
    w_s: ParamId,
    enc: LstmCell,
    w_a: ParamId,
    dec: LstmCell,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct Speaker {
    pub cfg: SpeakerConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    p: SpeakerParams,
}

/// Encoder outputs for one sample.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[views, hidden]`
    pub states: Var,
    pub last: (Var, Var),
}

impl Speaker {
    pub fn new(cfg: SpeakerConfig, vocab: Vocab, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        if vocab.len() < 5 {
            return Err(ModelError::Config("speaker vocabulary has no words".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (sd, hd, ed) = (cfg.slice_dim(), cfg.hidden, cfg.embed);
        let g = ParamGroup::Main;
        let p = SpeakerParams {
            emb: store.add_uniform("speaker.emb", &[vocab.len(), ed], ed, g, &mut rng)?,
            w_v: store.add_uniform("speaker.w_v", &[hd, sd], hd, g, &mut rng)?,
            w_s: store.add_uniform("speaker.w_s", &[hd, ed], hd, g, &mut rng)?,
            enc: LstmCell::new(&mut store, "speaker.enc", sd + ed + sd, hd, &mut rng)?,
            w_a: store.add_uniform("speaker.w_a", &[hd, hd], hd, g, &mut rng)?,
            dec: LstmCell::new(&mut store, "speaker.dec", ed + hd, hd, &mut rng)?,
            out: Linear::new(&mut store, "speaker.out", hd, vocab.len() - 1, &mut rng)?,
        };
        Ok(Speaker { cfg, vocab, store, p })
    }

    /// Number of output classes; the mask symbol is not among them.
    pub fn classes(&self) -> usize {
        self.vocab.len() - 1
    }

    fn class_of(&self, id: usize) -> Result<usize, ModelError> {
        if id == Vocab::MASK_ID {
            return Err(ModelError::Input("mask symbol is not a valid target token".into()));
        }
        Ok(id - 1)
    }

    /// Softmax-weighted sum of rows of `keys` with scores `(h W) . key_i`.
    /// Returns the context `[1, d]` and the weights `[1, rows]`.
    pub fn attend(tape: &mut Tape, h: Var, w: Var, keys: Var) -> Result<(Var, Var), ModelError> {
        let q = tape.matmul(h, w)?;
        let kt = tape.transpose(keys)?;
        let scores = tape.matmul(q, kt)?;
        let a = tape.softmax(scores, 1)?;
        Ok((tape.matmul(a, keys)?, a))
    }

    /// Sentence encodings of a template: mean word embedding per sentence,
    /// stacked as `[sentences, embed]`.
    pub fn sentence_encodings(&self, tape: &mut Tape, template: &[String]) -> Result<Var, ModelError> {
        if template.is_empty() {
            return Err(ModelError::Input("empty template".into()));
        }
        let mut sents: Vec<Vec<usize>> = vec![Vec::new()];
        for t in template {
            sents.last_mut().expect("non-empty").push(self.vocab.id(t));
            if is_sentence_end(t) {
                sents.push(Vec::new());
            }
        }
        sents.retain(|s| !s.is_empty());
        while sents.len() > self.cfg.max_sentences {
            let extra = sents.pop().expect("len > max >= 1");
            sents.last_mut().expect("non-empty").extend(extra);
        }
        let emb = tape.param(&self.store, self.p.emb);
        let mut rows = Vec::with_capacity(sents.len());
        for ids in &sents {
            let e = tape.embedding(emb, ids)?;
            rows.push(tape.mean(e, 0)?);
        }
        Ok(if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? })
    }

    pub fn encode(&self, tape: &mut Tape, sample: &SpeakerSample) -> Result<Encoded, ModelError> {
        if sample.views.is_empty() {
            return Err(ModelError::Input("trajectory has no views".into()));
        }
        let sd = self.cfg.slice_dim();
        if let Some(v) = sample.views.iter().find(|v| v.shape() != [SLICES, sd]) {
            return Err(ModelError::Input(format!("view shape {:?}, expected [{SLICES}, {sd}]", v.shape())));
        }
        let sents = self.sentence_encodings(tape, &sample.template)?;
        let w_v = tape.param(&self.store, self.p.w_v);
        let w_s = tape.param(&self.store, self.p.w_s);
        let mut state = self.p.enc.zero_state(tape);
        let mut hs = Vec::new();
        for i in subsample(sample.views.len(), self.cfg.max_views) {
            let v = tape.constant(sample.views[i].clone());
            let (v_hat, _) = Speaker::attend(tape, state.0, w_v, v)?;
            let (s_hat, _) = Speaker::attend(tape, state.0, w_s, sents)?;
            let v_bar = tape.mean(v, 0)?;
            let x = tape.concat(&[v_hat, s_hat, v_bar], 1)?;
            state = self.p.enc.forward(tape, &self.store, x, state)?;
            hs.push(state.0);
        }
        let states = if hs.len() == 1 { hs[0] } else { tape.concat(&hs, 0)? };
        Ok(Encoded { states, last: state })
    }

    fn decoder_step(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        prev: usize,
        state: (Var, Var),
    ) -> Result<(Var, (Var, Var)), ModelError> {
        let emb = tape.param(&self.store, self.p.emb);
        let w_a = tape.param(&self.store, self.p.w_a);
        let e = tape.embedding(emb, &[prev])?;
        let (ctx, _) = Speaker::attend(tape, state.0, w_a, enc.states)?;
        let x = tape.concat(&[e, ctx], 1)?;
        let state = self.p.dec.forward(tape, &self.store, x, state)?;
        let logits = self.p.out.forward(tape, &self.store, state.0)?;
        Ok((logits, state))
    }

    /// Teacher-forced logits `[len + 1, classes]` for the target followed
    /// by the end marker, and the matching class indices.
    fn forced_logits(&self, tape: &mut Tape, sample: &SpeakerSample) -> Result<(Var, Vec<usize>), ModelError> {
        let enc = self.encode(tape, sample)?;
        let ids: Vec<usize> = sample.target.iter().map(|t| self.vocab.id(t)).collect();
        let targets = ids
            .iter()
            .chain(std::iter::once(&Vocab::EOS_ID))
            .map(|&id| self.class_of(id))
            .collect::<Result<Vec<_>, _>>()?;
        let mut state = enc.last;
        let mut prev = Vocab::BOS_ID;
        let mut rows = Vec::with_capacity(targets.len());
        for k in 0..targets.len() {
            let (logits, s) = self.decoder_step(tape, &enc, prev, state)?;
            rows.push(logits);
            state = s;
            if k < ids.len() {
                prev = ids[k];
            }
        }
        let logits = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        Ok((logits, targets))
    }

    /// Summed token negative log-likelihood, averaged over the batch.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &[SpeakerSample]) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for s in batch {
            let (logits, targets) = self.forced_logits(tape, s)?;
            let ce = tape.cross_entropy(logits, &targets)?;
            losses.push(tape.scale(ce, targets.len() as f64));
        }
        let all = if losses.len() == 1 { losses[0] } else { tape.concat(&losses, 0)? };
        let total = tape.sum(all);
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }

    /// One Adam update on a batch; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[SpeakerSample], adam: &AdamConfig, lr_scale: f64) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let loss = self.batch_loss(&mut tape, batch)?;
        let value = tape.value(loss).item();
        self.store.zero_grad();
        tape.backward(loss)?.accumulate(&mut self.store);
        adam_step(&mut self.store, adam, lr_scale)?;
        Ok(value)
    }

    /// Teacher-forced token accuracy counts `(correct, total)` including the
    /// end marker.
    pub fn token_accuracy(&self, samples: &[SpeakerSample]) -> Result<(usize, usize), ModelError> {
        let mut correct = 0;
        let mut total = 0;
        for s in samples {
            let mut tape = Tape::new();
            let (logits, targets) = self.forced_logits(&mut tape, s)?;
            let t = tape.value(logits);
            for (r, &gold) in targets.iter().enumerate() {
                correct += usize::from(argmax(t.row_slice(r)) == gold);
                total += 1;
            }
        }
        Ok((correct, total))
    }

    /// Greedy decoding until the end marker or `2 * |template| + 20` tokens.
    pub fn generate(&self, sample: &SpeakerSample) -> Result<Vec<String>, ModelError> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, sample)?;
        let cap = 2 * sample.template.len() + 20;
        let mut state = enc.last;
        let mut prev = Vocab::BOS_ID;
        let mut out = Vec::new();
        while out.len() < cap {
            let (logits, s) = self.decoder_step(&mut tape, &enc, prev, state)?;
            state = s;
            let id = argmax(tape.value(logits).data()) + 1;
            if id == Vocab::EOS_ID {
                break;
            }
            out.push(self.vocab.token(id).to_string());
            prev = id;
        }
        Ok(out)
    }
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
