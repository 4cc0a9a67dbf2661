//! Cross-modal transformer navigator: sentence encodings and heading-centred
//! view encodings in one sequence with segment and position embeddings, a
//! causal visibility mask over views, and a four-way action head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Dropout, Linear, TransformerLayer};
use crate::autodiff::{adam_step, AdamConfig, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::ModelError;
use crate::features::{heading_column, FeatureStore};
use crate::graph::{rollout, Action, AgentState, NavGraph, Trajectory};
use crate::speaker::argmax;
use crate::text::tokenize::is_sentence_end;
use crate::text::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavigatorConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub embed_dim: usize,
    pub crop_width: usize,
    /// Output channels of the three stride-2 convolutions.
    pub cnn_channels: [usize; 3],
    pub max_sentences: usize,
    pub max_steps: usize,
    pub split_sentences: bool,
    /// Whether instruction positions attend to the views seen so far.
    pub text_sees_views: bool,
    pub dropout: f64,
}

impl Default for NavigatorConfig {
    fn default() -> Self {
        NavigatorConfig {
            n_layers: 2,
            n_heads: 4,
            dim: 32,
            ffn_dim: 64,
            embed_dim: 32,
            crop_width: 16,
            cnn_channels: [8, 8, 8],
            max_sentences: 8,
            max_steps: 40,
            split_sentences: true,
            text_sees_views: true,
            dropout: 0.0,
        }
    }
}

impl NavigatorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [self.n_layers, self.n_heads, self.dim, self.ffn_dim, self.embed_dim, self.crop_width, self.max_steps];
        if dims.contains(&0) || self.cnn_channels.contains(&0) || self.max_sentences == 0 {
            return Err(ModelError::Config(format!("navigator dimensions must be positive: {self:?}")));
        }
        if self.dim % self.n_heads != 0 {
            return Err(ModelError::Config(format!("dim {} not divisible by {} heads", self.dim, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }

    /// Number of sentence positions actually used.
    pub fn sentence_slots(&self) -> usize {
        if self.split_sentences {
            self.max_sentences
        } else {
            1
        }
    }
}

/// Splits lowercased instruction tokens into at most `max` sentences (extra
/// sentences merge into the last), or one sentence when splitting is off.
pub fn split_instruction<S: AsRef<str>>(tokens: &[S], split: bool, max: usize) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = vec![Vec::new()];
    for t in tokens {
        out.last_mut().expect("non-empty").push(t.as_ref().to_lowercase());
        if split && is_sentence_end(t.as_ref()) {
            out.push(Vec::new());
        }
    }
    out.retain(|s| !s.is_empty());
    while out.len() > max.max(1) {
        let extra = out.pop().expect("len > 1");
        out.last_mut().expect("non-empty").extend(extra);
    }
    out
}

/// Heading-centred crop of a `[C, H, W]` map, averaged over channels:
/// `[1, H, crop]`. Column `round(heading / 360 * W) mod W` lands at index
/// `crop / 2`.
pub fn center_crop(map: &Tensor, heading: f64, crop: usize) -> Result<Tensor, ModelError> {
    let s = map.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if crop > w {
        return Err(ModelError::Config(format!("crop width {crop} exceeds feature width {w}")));
    }
    if !map.is_finite() {
        return Err(ModelError::Input("non-finite feature values".into()));
    }
    let center = heading_column(heading, w) as i64;
    let src = map.data();
    let mut out = vec![0.0; h * crop];
    for row in 0..h {
        for k in 0..crop {
            let col = (center + k as i64 - (crop / 2) as i64).rem_euclid(w as i64) as usize;
            let mut sum = 0.0;
            for ch in 0..c {
                sum += src[(ch * h + row) * w + col];
            }
            out[row * crop + k] = sum / c as f64;
        }
    }
    Ok(Tensor::new(vec![1, h, crop], out)?)
}

fn conv_len(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct NavParams {
    emb: ParamId,
    sent_fc: Linear,
    convs: [Conv; 3],
    view_fc: Linear,
    segment: ParamId,
    position: ParamId,
    layers: Vec<TransformerLayer>,
    action: Linear,
}

/// Segment ids.
pub const TEXT: usize = 0;
pub const VIEW: usize = 1;

/// One teacher-forcing episode: instruction sentences, the views along the
/// gold trajectory and the gold action at each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub route_id: String,
    pub sentences: Vec<Vec<String>>,
    /// `[1, H, crop]` per step.
    pub views: Vec<Tensor>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone)]
pub struct Navigator {
    pub cfg: NavigatorConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    /// Feature map `(C, H, W)` the view encoder was built for.
    pub feature_dims: (usize, usize, usize),
    p: NavParams,
}

impl Navigator {
    pub fn new(cfg: NavigatorConfig, vocab: Vocab, feature_dims: (usize, usize, usize), seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (_, h, w) = feature_dims;
        if cfg.crop_width > w {
            return Err(ModelError::Config(format!("crop width {} exceeds feature width {w}", cfg.crop_width)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let emb = store.add_uniform("nav.emb", &[vocab.len(), cfg.embed_dim], cfg.embed_dim, ParamGroup::Embedder, &mut rng)?;
        let sent_fc = Linear::new(&mut store, "nav.sent_fc", cfg.embed_dim, d, &mut rng)?;
        let mut cin = 1;
        let (mut oh, mut ow) = (h, cfg.crop_width);
        let mut convs = Vec::with_capacity(3);
        for (i, &cout) in cfg.cnn_channels.iter().enumerate() {
            let fan = cin * 9;
            let w = store.add_uniform(&format!("nav.conv{i}.w"), &[cout, cin, 3, 3], fan, ParamGroup::Main, &mut rng)?;
            let b = store.add_uniform(&format!("nav.conv{i}.b"), &[1, cout], fan, ParamGroup::Main, &mut rng)?;
            convs.push(Conv { w, b });
            cin = cout;
            oh = conv_len(oh);
            ow = conv_len(ow);
        }
        let flat = cin * oh * ow;
        let view_fc = Linear::new(&mut store, "nav.view_fc", flat, d, &mut rng)?;
        let segment = store.add_uniform("nav.segment", &[2, d], d, ParamGroup::Main, &mut rng)?;
        let positions = cfg.max_steps.max(cfg.max_sentences) + 1;
        let position = store.add_uniform("nav.position", &[positions, d], d, ParamGroup::Main, &mut rng)?;
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("nav.layer{i}"), d, cfg.n_heads, cfg.ffn_dim, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let action = Linear::new(&mut store, "nav.action", d, 4, &mut rng)?;
        let p = NavParams { emb, sent_fc, convs: [convs[0], convs[1], convs[2]], view_fc, segment, position, layers, action };
        Ok(Navigator { cfg, vocab, store, feature_dims, p })
    }

    /// Builds a teacher-forcing episode from a gold trajectory.
    pub fn episode(
        &self,
        graph: &NavGraph,
        traj: &Trajectory,
        instruction: &[String],
        features: &FeatureStore,
    ) -> Result<Episode, ModelError> {
        let actions = graph
            .gold_actions(traj)
            .ok_or_else(|| ModelError::Input(format!("route {} is not an action sequence", traj.route_id)))?;
        if actions.len() > self.cfg.max_steps {
            return Err(ModelError::Input(format!(
                "route {} has {} steps, more than max_steps {}",
                traj.route_id,
                actions.len(),
                self.cfg.max_steps
            )));
        }
        let views = traj
            .states
            .iter()
            .map(|s| center_crop(features.get(&s.node)?, s.heading, self.cfg.crop_width))
            .collect::<Result<Vec<_>, _>>()?;
        let sentences = split_instruction(instruction, self.cfg.split_sentences, self.cfg.max_sentences);
        if sentences.is_empty() {
            return Err(ModelError::Input(format!("route {} has an empty instruction", traj.route_id)));
        }
        Ok(Episode { route_id: traj.route_id.clone(), sentences, views, actions })
    }

    /// `[sentences, dim]`: FC of the mean word embedding of each sentence.
    pub fn encode_sentences(&self, tape: &mut Tape, sentences: &[Vec<String>]) -> Result<Var, ModelError> {
        let emb = tape.param(&self.store, self.p.emb);
        let mut rows = Vec::with_capacity(sentences.len());
        for s in sentences {
            if s.is_empty() {
                return Err(ModelError::Input("empty sentence".into()));
            }
            let e = tape.embedding(emb, &self.vocab.encode(s))?;
            rows.push(tape.mean(e, 0)?);
        }
        let m = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        Ok(self.p.sent_fc.forward(tape, &self.store, m)?)
    }

    /// `[1, dim]` encoding of one cropped view.
    pub fn encode_view(&self, tape: &mut Tape, view: &Tensor) -> Result<Var, ModelError> {
        let mut x = tape.constant(view.clone());
        for c in &self.p.convs {
            let w = tape.param(&self.store, c.w);
            let b = tape.param(&self.store, c.b);
            let y = tape.conv2d(x, w, b, 2, 1)?;
            x = tape.relu(y);
        }
        let n = tape.value(x).len();
        let flat = tape.reshape(x, &[1, n])?;
        Ok(self.p.view_fc.forward(tape, &self.store, flat)?)
    }

    /// Runs the transformer over `[text ; views 0..=t]` and returns the
    /// output row at the position of view `t`. `view_enc` holds encoded views
    /// `[T, dim]` with `T > t`; rows past `t` are never read.
    pub fn step_output(
        &self,
        tape: &mut Tape,
        text: Var,
        view_enc: &[Var],
        t: usize,
        segments: Option<&[usize]>,
        drop: &mut Dropout,
    ) -> Result<Var, ModelError> {
        let m = tape.shape(text)[0];
        if t >= view_enc.len() {
            return Err(ModelError::Input(format!("step {t} with {} views", view_enc.len())));
        }
        let views = if t == 0 { view_enc[0] } else { tape.concat(&view_enc[..=t], 0)? };
        let seq = tape.concat(&[text, views], 0)?;
        let len = m + t + 1;
        let seg_ids: Vec<usize> = match segments {
            Some(s) => s.to_vec(),
            None => (0..len).map(|i| if i < m { TEXT } else { VIEW }).collect(),
        };
        let pos_ids: Vec<usize> = (0..len).map(|i| if i < m { i } else { i - m }).collect();
        let seg_table = tape.param(&self.store, self.p.segment);
        let pos_table = tape.param(&self.store, self.p.position);
        let seg = tape.embedding(seg_table, &seg_ids)?;
        let pos = tape.embedding(pos_table, &pos_ids)?;
        let x = tape.add(seq, seg)?;
        let mut x = tape.add(x, pos)?;
        let mask = self.visibility(m, t + 1);
        for layer in &self.p.layers {
            x = layer.forward(tape, &self.store, x, mask.as_deref(), drop)?;
        }
        Ok(tape.row(x, m + t)?)
    }

    /// Row-major `[len, len]` visibility; `None` when everything is visible.
    fn visibility(&self, m: usize, views: usize) -> Option<Vec<bool>> {
        let len = m + views;
        // Within a truncated sequence every view is at or before the frontier,
        // so views see all earlier positions and text sees the views only when
        // configured to.
        let mut mask = vec![true; len * len];
        let mut full = true;
        for q in 0..len {
            for k in m..len {
                let ok = if q < m { self.cfg.text_sees_views } else { k <= q };
                mask[q * len + k] = ok;
                full &= ok;
            }
        }
        (!full).then_some(mask)
    }

    /// Action logits `[T, 4]` for every step of an episode (teacher forcing).
    pub fn episode_logits(&self, tape: &mut Tape, ep: &Episode, drop: &mut Dropout) -> Result<Var, ModelError> {
        if ep.views.is_empty() {
            return Err(ModelError::Input(format!("episode {} has no steps", ep.route_id)));
        }
        let text = self.encode_sentences(tape, &ep.sentences)?;
        let views = ep.views.iter().map(|v| self.encode_view(tape, v)).collect::<Result<Vec<_>, _>>()?;
        let mut rows = Vec::with_capacity(views.len());
        for t in 0..views.len() {
            let h = self.step_output(tape, text, &views, t, None, drop)?;
            rows.push(self.p.action.forward(tape, &self.store, h)?);
        }
        Ok(if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? })
    }

    /// Mean per-step cross-entropy of one episode.
    pub fn episode_loss(&self, tape: &mut Tape, ep: &Episode, drop: &mut Dropout) -> Result<Var, ModelError> {
        if ep.actions.len() != ep.views.len() {
            return Err(ModelError::Input(format!("episode {}: {} actions for {} views", ep.route_id, ep.actions.len(), ep.views.len())));
        }
        let logits = self.episode_logits(tape, ep, drop)?;
        let targets: Vec<usize> = ep.actions.iter().map(|a| a.index()).collect();
        Ok(tape.cross_entropy(logits, &targets)?)
    }

    /// One Adam update on the mean loss of a batch of episodes. Returns the
    /// mean loss before the update.
    pub fn train_batch(&mut self, batch: &[Episode], adam: &AdamConfig, lr_scale: f64, drop: &mut Dropout) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        self.store.zero_grad();
        let mut total = 0.0;
        for ep in batch {
            let mut tape = Tape::new();
            let loss = self.episode_loss(&mut tape, ep, drop)?;
            total += tape.value(loss).item();
            tape.backward(loss)?.accumulate(&mut self.store);
        }
        self.store.scale_grads(1.0 / batch.len() as f64);
        adam_step(&mut self.store, adam, lr_scale)?;
        Ok(total / batch.len() as f64)
    }

    /// Teacher-forced `(correct, total)` action predictions.
    pub fn tf_accuracy(&self, episodes: &[Episode]) -> Result<(usize, usize), ModelError> {
        let mut correct = 0;
        let mut total = 0;
        for ep in episodes {
            let mut tape = Tape::new();
            let logits = self.episode_logits(&mut tape, ep, &mut Dropout::off())?;
            let l = tape.value(logits);
            for (t, a) in ep.actions.iter().enumerate() {
                correct += usize::from(predict(l.row_slice(t)) == *a);
                total += 1;
            }
        }
        Ok((correct, total))
    }

    /// Greedy closed-loop rollout. Returns the trajectory and the logits of
    /// every decision.
    pub fn navigate(
        &self,
        graph: &NavGraph,
        features: &FeatureStore,
        start: &AgentState,
        instruction: &[String],
        max_steps: usize,
    ) -> Result<(Trajectory, Vec<[f64; 4]>), ModelError> {
        let start = graph.validate_state(start)?;
        let sentences = split_instruction(instruction, self.cfg.split_sentences, self.cfg.max_sentences);
        if sentences.is_empty() {
            return Err(ModelError::Input("empty instruction".into()));
        }
        let max_steps = max_steps.min(self.cfg.max_steps).max(1);
        let mut tape = Tape::new();
        let text = self.encode_sentences(&mut tape, &sentences)?;
        let mut views: Vec<Var> = Vec::new();
        let mut log: Vec<[f64; 4]> = Vec::new();
        let mut failure: Option<ModelError> = None;
        let traj = rollout(
            graph,
            &start,
            |states| {
                if failure.is_some() {
                    return Action::Stop;
                }
                let res = (|| -> Result<[f64; 4], ModelError> {
                    let s = states.last().expect("non-empty");
                    let crop = center_crop(features.get(&s.node)?, s.heading, self.cfg.crop_width)?;
                    views.push(self.encode_view(&mut tape, &crop)?);
                    let h = self.step_output(&mut tape, text, &views, views.len() - 1, None, &mut Dropout::off())?;
                    let logits = self.p.action.forward(&mut tape, &self.store, h)?;
                    let d = tape.value(logits).data();
                    Ok([d[0], d[1], d[2], d[3]])
                })();
                match res {
                    Ok(l) => {
                        log.push(l);
                        predict(&l)
                    }
                    Err(e) => {
                        failure = Some(e);
                        Action::Stop
                    }
                }
            },
            max_steps,
        );
        match failure {
            Some(e) => Err(e),
            None => Ok((traj, log)),
        }
    }
}

/// Argmax over logits in the fixed order LEFT, RIGHT, FORWARD, STOP; ties go
/// to the earlier action.
pub fn predict(logits: &[f64]) -> Action {
    Action::from_index(argmax(logits)).expect("four logits")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_params;
    use rand::Rng;

    fn toy_cfg() -> NavigatorConfig {
        NavigatorConfig {
            n_layers: 1,
            n_heads: 2,
            dim: 16,
            ffn_dim: 16,
            embed_dim: 8,
            crop_width: 8,
            cnn_channels: [2, 2, 2],
            max_sentences: 2,
            max_steps: 6,
            ..NavigatorConfig::default()
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(vec![vec!["turn", "left", "go", "straight", "stop", "."]], 1)
    }

    fn rand_view(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, h, w], (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy_episode(rng: &mut ChaCha8Rng, steps: usize) -> Episode {
        let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        Episode {
            route_id: "r".into(),
            sentences: vec![toks("turn left ."), toks("go straight stop .")],
            views: (0..steps).map(|_| rand_view(rng, 4, 8)).collect(),
            actions: (0..steps).map(|i| Action::from_index(i % 4).unwrap()).collect(),
        }
    }

    #[test]
    fn argmax_order_and_ties() {
        assert_eq!(predict(&[0.1, 2.0, -1.0, 0.0]), Action::Right);
        assert_eq!(predict(&[0.0; 4]), Action::Left);
        assert_eq!(predict(&[0.0, 1.0, 1.0, 1.0]), Action::Right);
    }

    #[test]
    fn crop_centres_heading_column() {
        let mut m = Tensor::zeros(&[2, 1, 16]);
        for c in 0..16 {
            m.data_mut()[c] = c as f64;
            m.data_mut()[16 + c] = c as f64 + 2.0;
        }
        let crop = center_crop(&m, 90.0, 4).unwrap();
        // column 4 at index 2, channel mean adds 1
        assert_eq!(crop.data(), &[3.0, 4.0, 5.0, 6.0]);
        let seam = center_crop(&m, 350.0, 4).unwrap();
        assert_eq!(seam.data(), &[15.0, 16.0, 1.0, 2.0]);
        assert!(center_crop(&m, 0.0, 17).is_err());
        // column-constant map: crop is independent of heading
        let flat = Tensor::filled(&[2, 3, 16], 0.5);
        assert_eq!(center_crop(&flat, 0.0, 8).unwrap(), center_crop(&flat, 123.0, 8).unwrap());
        // half/half map: opposite headings see different halves
        let mut hh = Tensor::zeros(&[1, 1, 16]);
        hh.data_mut()[..8].iter_mut().for_each(|v| *v = 1.0);
        assert_ne!(center_crop(&hh, 45.0, 4).unwrap(), center_crop(&hh, 225.0, 4).unwrap());
    }

    #[test]
    fn sentence_splitting_and_merging() {
        let toks: Vec<&str> = "a . b . c d .".split(' ').collect();
        assert_eq!(split_instruction(&toks, true, 8).len(), 3);
        assert_eq!(split_instruction(&toks, true, 2), vec![vec!["a", "."], vec!["b", ".", "c", "d", "."]]);
        assert_eq!(split_instruction(&toks, false, 8).len(), 1);
    }

    #[test]
    fn opposite_embeddings_give_the_bias() {
        let nav = Navigator::new(toy_cfg(), vocab(), (1, 4, 16), 1).unwrap();
        let mut store = nav.store.clone();
        let emb = store.id("nav.emb").unwrap();
        let (a, b) = (nav.vocab.id("turn"), nav.vocab.id("left"));
        let e = store.value(emb).row_slice(a).to_vec();
        let d = e.len();
        store.value_mut(emb).data_mut()[b * d..(b + 1) * d].copy_from_slice(&e.iter().map(|v| -v).collect::<Vec<_>>());
        let nav = Navigator { store, ..nav };
        let mut tape = Tape::new();
        let h = nav.encode_sentences(&mut tape, &[vec!["turn".into(), "left".into()]]).unwrap();
        let bias = nav.store.value(nav.store.id("nav.sent_fc.b").unwrap());
        for (x, y) in tape.value(h).data().iter().zip(bias.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn future_views_do_not_change_earlier_steps() {
        let nav = Navigator::new(toy_cfg(), vocab(), (1, 4, 16), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = toy_episode(&mut rng, 5);
        let mut t = Tape::new();
        let base = nav.episode_logits(&mut t, &ep, &mut Dropout::off()).unwrap();
        let base = t.value(base).clone();
        for cut in 0..4 {
            let mut other = ep.clone();
            for v in &mut other.views[cut + 1..] {
                *v = rand_view(&mut rng, 4, 8);
            }
            let mut t2 = Tape::new();
            let l = nav.episode_logits(&mut t2, &other, &mut Dropout::off()).unwrap();
            let l = t2.value(l);
            for s in 0..=cut {
                assert_eq!(l.row_slice(s), base.row_slice(s));
            }
            assert_ne!(l.row_slice(cut + 1), base.row_slice(cut + 1));
        }
    }

    #[test]
    fn positions_and_segments_are_wired() {
        let nav = Navigator::new(toy_cfg(), vocab(), (1, 4, 16), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = toy_episode(&mut rng, 2);
        let run = |ep: &Episode, segs: Option<&[usize]>| {
            let mut t = Tape::new();
            let text = nav.encode_sentences(&mut t, &ep.sentences).unwrap();
            let views: Vec<Var> = ep.views.iter().map(|v| nav.encode_view(&mut t, v).unwrap()).collect();
            let h = nav.step_output(&mut t, text, &views, 1, segs, &mut Dropout::off()).unwrap();
            t.value(h).clone()
        };
        let base = run(&ep, None);
        let mut swapped = ep.clone();
        swapped.sentences.reverse();
        assert_ne!(run(&swapped, None), base);
        assert_ne!(run(&ep, Some(&[VIEW, VIEW, TEXT, TEXT])), base);
        assert_eq!(run(&ep, Some(&[TEXT, TEXT, VIEW, VIEW])), base);
    }

    #[test]
    fn one_sentence_one_view_shape() {
        let cfg = NavigatorConfig { split_sentences: false, ..toy_cfg() };
        assert_eq!(cfg.sentence_slots(), 1);
        let nav = Navigator::new(cfg, vocab(), (1, 4, 16), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ep = toy_episode(&mut rng, 1);
        ep.sentences = vec![ep.sentences.concat()];
        let mut t = Tape::new();
        let l = nav.episode_logits(&mut t, &ep, &mut Dropout::off()).unwrap();
        assert_eq!(t.shape(l), &[1, 4]);
    }

    #[test]
    fn uniform_logits_cost_ln4_and_seeds_differ() {
        let mut nav = Navigator::new(toy_cfg(), vocab(), (1, 4, 16), 8).unwrap();
        let a = nav.store.id("nav.action.w").unwrap();
        let b = nav.store.id("nav.action.b").unwrap();
        nav.store.value_mut(a).data_mut().iter_mut().for_each(|v| *v = 0.0);
        nav.store.value_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ep = toy_episode(&mut rng, 3);
        let mut t = Tape::new();
        let l = nav.episode_loss(&mut t, &ep, &mut Dropout::off()).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let loss_for = |seed| {
            let n = Navigator::new(toy_cfg(), vocab(), (1, 4, 16), seed).unwrap();
            let mut t = Tape::new();
            let l = n.episode_loss(&mut t, &ep, &mut Dropout::off()).unwrap();
            t.value(l).item()
        };
        assert_ne!(loss_for(1), loss_for(2));
        let empty = Episode { views: vec![], actions: vec![], ..ep };
        assert!(nav.episode_loss(&mut Tape::new(), &empty, &mut Dropout::off()).is_err());
    }

    #[test]
    fn end_to_end_gradients() {
        let nav = Navigator::new(toy_cfg(), vocab(), (1, 4, 16), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ep = toy_episode(&mut rng, 3);
        let r = check_params(&nav.store, 30, &mut rng, |store| -> Result<_, ModelError> {
            let m = Navigator { store: store.clone(), ..nav.clone() };
            let mut tape = Tape::new();
            let l = m.episode_loss(&mut tape, &ep, &mut Dropout::off())?;
            Ok((tape, l))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn training_reduces_loss_on_one_episode() {
        let mut nav = Navigator::new(toy_cfg(), vocab(), (1, 4, 16), 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ep = toy_episode(&mut rng, 4);
        let adam = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        let losses: Vec<f64> = (0..60).map(|_| nav.train_batch(&[ep.clone()], &adam, 1.0, &mut Dropout::off()).unwrap()).collect();
        let smooth = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
        let windows: Vec<f64> = losses.chunks(10).map(smooth).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
        assert_eq!(nav.tf_accuracy(&[ep]).unwrap(), (4, 4));
    }
}
