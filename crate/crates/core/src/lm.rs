//! Tiny decoder-only transformer: pre-norm blocks, learned positions, tied
//! output head, greedy generation with soft prefix rows.

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, NodeId, ParamStore, Real, Rng, Segment, Tensor};
use crate::world::conversation::{
    make_composed_conversation, make_conversation, Conversation, TEMPLATE_COUNT,
};
use crate::world::scene::{render_caption, sample_scene, ConceptScene};
use crate::world::vocab::{
    attribute_of, attribute_token, object_of, object_token, TokenId, ASSISTANT, BOS, EMB_BEGIN,
    EMB_END, EOS, HUMAN, VOCAB_SIZE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for LmShape {
    fn default() -> Self {
        LmShape {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq: 64,
        }
    }
}

/// One input position: a vocabulary token or row `i` of a soft prefix matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    Soft(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
}

/// Additive term on an attention input projection, used for low-rank adapters.
pub trait AttentionAdapter<T: Real> {
    /// Returns the extra `[n×d_model]` term for projection `which` of `block`
    /// given its layer-normed input `x`, or `None` for no change.
    fn delta(
        &self,
        g: &mut Graph<T>,
        block: usize,
        which: Proj,
        x: NodeId,
    ) -> Result<Option<NodeId>>;
}

pub fn block_name(block: usize) -> String {
    format!("block{block}")
}

const BLOCK_TENSORS: [&str; 12] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
];

pub const TOK_EMB: &str = "lm/embed/tok";
pub const POS_EMB: &str = "lm/embed/pos";
pub const FINAL_G: &str = "lm/final/ln_g";
pub const FINAL_B: &str = "lm/final/ln_b";

/// Graph nodes for every LM tensor, bound once per graph.
pub struct Bound {
    tok: NodeId,
    pos: NodeId,
    blocks: Vec<[NodeId; 12]>,
    final_g: NodeId,
    final_b: NodeId,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    params: ParamStore,
    shape: LmShape,
}

impl LanguageModel {
    pub fn init(shape: LmShape, rng: &Rng) -> Result<Self> {
        if shape.d_model % shape.n_heads != 0 {
            return Err(Error::invalid("n_heads must divide d_model"));
        }
        let d = shape.d_model;
        let mut p = ParamStore::new();
        let mut r = rng.derive("lm/init", 0);
        p.insert(TOK_EMB, Tensor::randn(&[VOCAB_SIZE, d], 0.02, &mut r))?;
        p.insert(POS_EMB, Tensor::randn(&[shape.max_seq, d], 0.02, &mut r))?;
        let resid = 1.0 / ((2 * shape.n_layers) as f64).sqrt();
        for b in 0..shape.n_layers {
            let mut r = rng.derive("lm/init/block", b as u64);
            let pre = format!("lm/{}", block_name(b));
            let w = |r: &mut Rng, out: usize, inp: usize, gain: f64| {
                Tensor::randn(&[out, inp], gain / (inp as f64).sqrt(), r)
            };
            p.insert(format!("{pre}/ln1_g"), Tensor::full(&[d], 1.0))?;
            p.insert(format!("{pre}/ln1_b"), Tensor::zeros(&[d]))?;
            p.insert(format!("{pre}/wq"), w(&mut r, d, d, 1.0))?;
            p.insert(format!("{pre}/wk"), w(&mut r, d, d, 1.0))?;
            p.insert(format!("{pre}/wv"), w(&mut r, d, d, 1.0))?;
            p.insert(format!("{pre}/wo"), w(&mut r, d, d, resid))?;
            p.insert(format!("{pre}/ln2_g"), Tensor::full(&[d], 1.0))?;
            p.insert(format!("{pre}/ln2_b"), Tensor::zeros(&[d]))?;
            p.insert(format!("{pre}/ff1_w"), w(&mut r, shape.d_ff, d, 1.0))?;
            p.insert(format!("{pre}/ff1_b"), Tensor::zeros(&[shape.d_ff]))?;
            p.insert(format!("{pre}/ff2_w"), w(&mut r, d, shape.d_ff, resid))?;
            p.insert(format!("{pre}/ff2_b"), Tensor::zeros(&[d]))?;
        }
        p.insert(FINAL_G, Tensor::full(&[d], 1.0))?;
        p.insert(FINAL_B, Tensor::zeros(&[d]))?;
        Ok(LanguageModel { params: p, shape })
    }

    /// Rebuilds a model from stored tensors; the head count is not recoverable from shapes.
    pub fn from_params(params: ParamStore, n_heads: usize) -> Result<Self> {
        let tok = params.get(TOK_EMB)?;
        let pos = params.get(POS_EMB)?;
        if tok.shape().len() != 2 || tok.shape()[0] != VOCAB_SIZE {
            return Err(Error::Checkpoint(format!(
                "{TOK_EMB} has shape {:?}",
                tok.shape()
            )));
        }
        let d_model = tok.shape()[1];
        let mut n_layers = 0;
        while params.contains(&format!("lm/{}/wq", block_name(n_layers))) {
            n_layers += 1;
        }
        if n_layers == 0 {
            return Err(Error::MissingTensor(format!("lm/{}/wq", block_name(0))));
        }
        let d_ff = params.get(&format!("lm/{}/ff1_w", block_name(0)))?.shape()[0];
        let shape = LmShape {
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq: pos.shape()[0],
        };
        let expected = Self::init(shape, &Rng::new(0))?;
        for (name, t) in expected.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Checkpoint(
                "language model store has unexpected tensors".into(),
            ));
        }
        Ok(LanguageModel { params, shape })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn shape(&self) -> LmShape {
        self.shape
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn token_embedding(&self, id: TokenId) -> Result<Tensor> {
        let t = self.params.get(TOK_EMB)?;
        if id >= VOCAB_SIZE {
            return Err(Error::invalid(format!("token {id} out of range")));
        }
        Tensor::from_vec(&[self.shape.d_model], t.row(id).to_vec())
    }

    /// Logits `[T×64]` for input embedding rows `[T×d_model]` (positions are added here).
    pub fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let b = bind(&mut g, &self.params, &self.shape, false)?;
        let n = x.rows();
        if n > self.shape.max_seq {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.shape.max_seq,
            });
        }
        let xn = g.constant(x.clone());
        let seg = [Segment { start: 0, len: n }];
        let pos = add_positions(&mut g, &b, xn, &seg)?;
        let logits = decode(&mut g, &b, &self.shape, pos, &seg, None)?;
        Ok(g.value(logits).clone())
    }

    pub fn forward_tokens(&self, ids: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let b = bind(&mut g, &self.params, &self.shape, false)?;
        let slots: Vec<Slot> = ids.iter().map(|&t| Slot::Token(t)).collect();
        let (x, segs) = embed(&mut g, &b, &self.shape, &[slots], None)?;
        let logits = decode(&mut g, &b, &self.shape, x, &segs, None)?;
        Ok(g.value(logits).clone())
    }

    /// Greedy decoding for one sequence; see [`LanguageModel::generate_batch`].
    pub fn generate(
        &self,
        prefix: &[Tensor],
        prompt: &[TokenId],
        max_new: usize,
        adapter: Option<&dyn AttentionAdapter<f32>>,
    ) -> Result<Vec<TokenId>> {
        Ok(self
            .generate_batch(&[GenRequest { prefix, prompt }], max_new, adapter)?
            .remove(0))
    }

    /// Greedy argmax decoding (ties to the lowest id). Prefix rows occupy the
    /// first positions; generation stops at EOS (not returned) or `max_new`.
    pub fn generate_batch(
        &self,
        requests: &[GenRequest<'_>],
        max_new: usize,
        adapter: Option<&dyn AttentionAdapter<f32>>,
    ) -> Result<Vec<Vec<TokenId>>> {
        let d = self.shape.d_model;
        let mut soft_rows = Vec::new();
        let mut seqs: Vec<Vec<Slot>> = Vec::with_capacity(requests.len());
        for r in requests {
            let total = r.prefix.len() + r.prompt.len() + max_new;
            if total > self.shape.max_seq {
                return Err(Error::SequenceTooLong {
                    len: total,
                    max: self.shape.max_seq,
                });
            }
            if r.prefix.is_empty() && r.prompt.is_empty() {
                return Err(Error::invalid("generation needs a prefix or a prompt"));
            }
            let mut s = Vec::with_capacity(total);
            for p in r.prefix {
                if p.numel() != d {
                    return Err(Error::ShapeMismatch {
                        op: "generate",
                        left: vec![d],
                        right: p.shape().to_vec(),
                    });
                }
                s.push(Slot::Soft(soft_rows.len()));
                soft_rows.push(p);
            }
            s.extend(r.prompt.iter().map(|&t| Slot::Token(t)));
            seqs.push(s);
        }
        let soft = if soft_rows.is_empty() {
            None
        } else {
            let data = soft_rows
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            Some(Tensor::from_vec(&[soft_rows.len(), d], data)?)
        };
        let mut out = vec![Vec::new(); requests.len()];
        let mut active: Vec<usize> = (0..requests.len()).collect();
        for _ in 0..max_new {
            if active.is_empty() {
                break;
            }
            let mut g = Graph::<f32>::new();
            let b = bind(&mut g, &self.params, &self.shape, false)?;
            let soft_node = soft.clone().map(|t| g.constant(t));
            let batch: Vec<Vec<Slot>> = active.iter().map(|&i| seqs[i].clone()).collect();
            let (x, segs) = embed(&mut g, &b, &self.shape, &batch, soft_node)?;
            let logits = decode(&mut g, &b, &self.shape, x, &segs, adapter)?;
            let lv = g.value(logits);
            let mut still = Vec::with_capacity(active.len());
            for (k, &i) in active.iter().enumerate() {
                let last = segs[k].start + segs[k].len - 1;
                let next = argmax(lv.row(last));
                if next == EOS {
                    continue;
                }
                out[i].push(next);
                seqs[i].push(Slot::Token(next));
                still.push(i);
            }
            active = still;
        }
        Ok(out)
    }
}

pub struct GenRequest<'a> {
    pub prefix: &'a [Tensor],
    pub prompt: &'a [TokenId],
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn bind<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    shape: &LmShape,
    trainable: bool,
) -> Result<Bound> {
    let mut blocks = Vec::with_capacity(shape.n_layers);
    for b in 0..shape.n_layers {
        let pre = format!("lm/{}", block_name(b));
        let mut ids = [NodeId::default(); 12];
        for (slot, t) in ids.iter_mut().zip(BLOCK_TENSORS) {
            *slot = params.bind(g, &format!("{pre}/{t}"), trainable)?;
        }
        blocks.push(ids);
    }
    Ok(Bound {
        tok: params.bind(g, TOK_EMB, trainable)?,
        pos: params.bind(g, POS_EMB, trainable)?,
        blocks,
        final_g: params.bind(g, FINAL_G, trainable)?,
        final_b: params.bind(g, FINAL_B, trainable)?,
    })
}

fn segments_of(seqs: &[Vec<Slot>]) -> Vec<Segment> {
    let mut start = 0;
    seqs.iter()
        .map(|s| {
            let seg = Segment {
                start,
                len: s.len(),
            };
            start += s.len();
            seg
        })
        .collect()
}

fn add_positions<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    x: NodeId,
    segs: &[Segment],
) -> Result<NodeId> {
    let positions: Vec<usize> = segs.iter().flat_map(|s| 0..s.len).collect();
    let p = g.gather_rows(b.pos, &positions)?;
    g.add(x, p)
}

/// Packs sequences into one `[n×d_model]` input (token or soft rows, plus positions).
pub fn embed<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    shape: &LmShape,
    seqs: &[Vec<Slot>],
    soft: Option<NodeId>,
) -> Result<(NodeId, Vec<Segment>)> {
    if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
        return Err(Error::invalid("cannot embed an empty sequence"));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() > shape.max_seq) {
        return Err(Error::SequenceTooLong {
            len: s.len(),
            max: shape.max_seq,
        });
    }
    let n_soft = soft.map(|s| g.value(s).rows()).unwrap_or(0);
    let table = match soft {
        Some(s) => g.concat_rows(&[b.tok, s])?,
        None => b.tok,
    };
    let mut ids = Vec::with_capacity(seqs.iter().map(Vec::len).sum());
    for slot in seqs.iter().flatten() {
        ids.push(match *slot {
            Slot::Token(t) if t < VOCAB_SIZE => t,
            Slot::Token(t) => return Err(Error::invalid(format!("token {t} out of range"))),
            Slot::Soft(i) if i < n_soft => VOCAB_SIZE + i,
            Slot::Soft(i) => {
                return Err(Error::invalid(format!(
                    "soft row {i} but only {n_soft} supplied"
                )))
            }
        });
    }
    let x = g.gather_rows(table, &ids)?;
    let segs = segments_of(seqs);
    Ok((add_positions(g, b, x, &segs)?, segs))
}

fn linear<T: Real>(g: &mut Graph<T>, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
    let y = g.matmul_nt(x, w)?;
    match bias {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Runs the decoder stack on packed inputs and returns `[n×64]` logits.
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    shape: &LmShape,
    x: NodeId,
    segs: &[Segment],
    adapter: Option<&dyn AttentionAdapter<T>>,
) -> Result<NodeId> {
    let mut h = x;
    for (i, w) in b.blocks.iter().enumerate() {
        let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b] = *w;
        let a = g.layer_norm(h, ln1_g, ln1_b)?;
        let proj = |g: &mut Graph<T>, which: Proj, w: NodeId| -> Result<NodeId> {
            let base = g.matmul_nt(a, w)?;
            match adapter
                .map(|ad| ad.delta(g, i, which, a))
                .transpose()?
                .flatten()
            {
                Some(delta) => g.add(base, delta),
                None => Ok(base),
            }
        };
        let q = proj(g, Proj::Q, wq)?;
        let k = proj(g, Proj::K, wk)?;
        let v = proj(g, Proj::V, wv)?;
        let att = g.causal_attention(q, k, v, segs, shape.n_heads)?;
        let o = g.matmul_nt(att, wo)?;
        h = g.add(h, o)?;
        let a2 = g.layer_norm(h, ln2_g, ln2_b)?;
        let f = linear(g, a2, ff1_w, Some(ff1_b))?;
        let f = g.gelu(f)?;
        let f = linear(g, f, ff2_w, Some(ff2_b))?;
        h = g.add(h, f)?;
    }
    let hf = g.layer_norm(h, b.final_g, b.final_b)?;
    g.matmul_nt(hf, b.tok)
}

/// `[HUMAN] x [ASSISTANT] y [EOS]` for every turn.
pub fn render_turns(conv: &Conversation) -> Vec<TokenId> {
    let mut out = Vec::new();
    for t in &conv.turns {
        out.push(HUMAN);
        out.extend(&t.instruction);
        out.push(ASSISTANT);
        out.extend(&t.response);
        out.push(EOS);
    }
    out
}

/// Words standing in for a grounding: the caption, or the bare attribute and
/// object in either order.
fn grounding_words(scene: &ConceptScene, rng: &mut Rng) -> Vec<TokenId> {
    let (a, o) = (attribute_token(scene.attribute), object_token(scene.object));
    match rng.below(3) {
        0 => render_caption(scene),
        1 => vec![a, o],
        _ => vec![o, a],
    }
}

/// Synthetic pre-training text. Each sentence is one of: a caption
/// (`<bos> a red box . <eos>`), an ungrounded dialogue, or a dialogue whose
/// grounding is spelled out in words between `<emb>` and `</emb>`, in the same
/// layout the bridge later fills with a soft vector.
pub fn pretraining_corpus(n: usize, rng: &Rng) -> Result<Vec<Vec<TokenId>>> {
    if n == 0 {
        return Err(Error::invalid("pre-training corpus must not be empty"));
    }
    (0..n as u64)
        .map(|k| {
            let mut r = rng.derive("lm/sentence", k);
            let a = sample_scene(&mut r);
            let kind = r.uniform();
            let mut s = Vec::new();
            if kind < 0.2 {
                s.push(BOS);
                s.extend(render_caption(&a));
                s.push(EOS);
            } else if kind < 0.4 {
                s.push(BOS);
                let conv = make_conversation(&a, r.below(TEMPLATE_COUNT), &mut r)?;
                s.extend(render_turns(&conv));
            } else if kind < 0.85 {
                s.push(EMB_BEGIN);
                s.extend(grounding_words(&a, &mut r));
                s.push(EMB_END);
                let conv = make_conversation(&a, r.below(TEMPLATE_COUNT), &mut r)?;
                s.extend(render_turns(&conv));
            } else {
                let mut b = sample_scene(&mut r);
                while b.object == a.object {
                    b = sample_scene(&mut r);
                }
                s.push(EMB_BEGIN);
                s.extend(grounding_words(&a, &mut r));
                s.extend(grounding_words(&b, &mut r));
                s.push(EMB_END);
                s.extend(render_turns(&make_composed_conversation(&a, &b)?));
            }
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Chance that a grounded sentence has its grounding words collapsed into
    /// a single input row; see [`collapse_grounding`].
    pub collapse: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            lr: 3e-4,
            steps: 2000,
            batch: 32,
            collapse: 0.5,
        }
    }
}

/// Range of the random scale applied to a collapsed row, and the std of the
/// gaussian noise added to it.
const COLLAPSE_SCALE: (f64, f64) = (0.5, 1.5);
const COLLAPSE_NOISE: f64 = 0.05;

/// A sentence whose `<emb> ... </emb>` block was replaced by one soft row.
#[derive(Clone, Debug, PartialEq)]
pub struct Collapsed {
    pub slots: Vec<Slot>,
    /// Content words summed into the soft row (`Slot::Soft(0)`).
    pub words: Vec<TokenId>,
}

/// Replaces the attribute and object words between `EMB_BEGIN` and `EMB_END`
/// with one row holding the sum of their embeddings, so the model also learns
/// to read a grounding packed into a single position. Returns `None` for
/// sentences without such a block.
pub fn collapse_grounding(seq: &[TokenId]) -> Option<Collapsed> {
    if seq.first() != Some(&EMB_BEGIN) {
        return None;
    }
    let end = seq.iter().position(|&t| t == EMB_END)?;
    let words: Vec<TokenId> = seq[1..end]
        .iter()
        .copied()
        .filter(|&t| object_of(t).is_some() || attribute_of(t).is_some())
        .collect();
    if words.is_empty() {
        return None;
    }
    let mut slots = vec![Slot::Token(EMB_BEGIN), Slot::Soft(0)];
    slots.extend(seq[end..].iter().map(|&t| Slot::Token(t)));
    Some(Collapsed { slots, words })
}

struct PretrainBatch {
    inputs: Vec<Vec<Slot>>,
    targets: Vec<TokenId>,
    mask: Vec<bool>,
    /// `[n_soft×VOCAB_SIZE]` mixing weights over the token table.
    mix: Vec<f32>,
    noise: Vec<f32>,
}

fn pretrain_batch(
    seqs: &[&[TokenId]],
    cfg: &LmTrainConfig,
    d_model: usize,
    rng: &mut Rng,
) -> Result<PretrainBatch> {
    let mut b = PretrainBatch {
        inputs: Vec::with_capacity(seqs.len()),
        targets: Vec::new(),
        mask: Vec::new(),
        mix: Vec::new(),
        noise: Vec::new(),
    };
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::invalid("sentences need at least two tokens"));
        }
        let collapsed = if rng.bernoulli(cfg.collapse) {
            collapse_grounding(s)
        } else {
            None
        };
        let slots: Vec<Slot> = match collapsed {
            Some(c) => {
                let row = b.mix.len() / VOCAB_SIZE;
                let scale =
                    COLLAPSE_SCALE.0 + (COLLAPSE_SCALE.1 - COLLAPSE_SCALE.0) * rng.uniform();
                let mut weights = vec![0.0f32; VOCAB_SIZE];
                for &w in &c.words {
                    weights[w] += scale as f32;
                }
                b.mix.extend(weights);
                b.noise
                    .extend((0..d_model).map(|_| (COLLAPSE_NOISE * rng.gaussian()) as f32));
                c.slots
                    .into_iter()
                    .map(|slot| match slot {
                        Slot::Soft(_) => Slot::Soft(row),
                        t => t,
                    })
                    .collect()
            }
            None => s.iter().map(|&t| Slot::Token(t)).collect(),
        };
        for next in &slots[1..] {
            match *next {
                Slot::Token(t) => {
                    b.targets.push(t);
                    b.mask.push(true);
                }
                Slot::Soft(_) => {
                    b.targets.push(0);
                    b.mask.push(false);
                }
            }
        }
        b.inputs.push(slots[..slots.len() - 1].to_vec());
    }
    Ok(b)
}

#[derive(Clone, Debug)]
pub struct LmReport {
    pub losses: Vec<f64>,
    pub initial_perplexity: f64,
    pub val_perplexity: f64,
}

fn next_token_batch(seqs: &[&[TokenId]]) -> Result<(Vec<Vec<Slot>>, Vec<TokenId>)> {
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::invalid("sentences need at least two tokens"));
        }
        inputs.push(s[..s.len() - 1].iter().map(|&t| Slot::Token(t)).collect());
        targets.extend(&s[1..]);
    }
    Ok((inputs, targets))
}

/// Mean next-token NLL over `seqs` (every position after the first is predicted).
pub fn mean_nll(model: &LanguageModel, seqs: &[Vec<TokenId>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::invalid("perplexity over an empty set"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(64) {
        let refs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let (inputs, targets) = next_token_batch(&refs)?;
        let mut g = Graph::<f32>::new();
        let b = bind(&mut g, &model.params, &model.shape, false)?;
        let (x, segs) = embed(&mut g, &b, &model.shape, &inputs, None)?;
        let logits = decode(&mut g, &b, &model.shape, x, &segs, None)?;
        let mask = vec![true; targets.len()];
        let l = g.masked_cross_entropy(logits, &targets, &mask)?;
        total += g.value(l).item() as f64 * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count as f64)
}

pub fn perplexity(model: &LanguageModel, seqs: &[Vec<TokenId>]) -> Result<f64> {
    Ok(mean_nll(model, seqs)?.exp())
}

/// Next-token pre-training with Adam at a constant learning rate.
pub fn pretrain_lm(
    corpus: &[Vec<TokenId>],
    validation: &[Vec<TokenId>],
    shape: LmShape,
    cfg: &LmTrainConfig,
    rng: &Rng,
) -> Result<(LanguageModel, LmReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("pre-training corpus is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    let mut model = LanguageModel::init(shape, rng)?;
    let initial_perplexity = perplexity(&model, validation)?;
    let mut adam = AdamState::default();
    let mut pick = rng.derive("lm/batches", 0);
    let mut mixing = rng.derive("lm/collapse", 0);
    let d = model.shape.d_model;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let refs: Vec<&[TokenId]> = (0..cfg.batch)
            .map(|_| corpus[pick.below(corpus.len())].as_slice())
            .collect();
        let batch = pretrain_batch(&refs, cfg, d, &mut mixing)?;
        let mut g = Graph::<f32>::new();
        let b = bind(&mut g, &model.params, &model.shape, true)?;
        let soft = if batch.noise.is_empty() {
            None
        } else {
            let n = batch.noise.len() / d;
            let mix = g.constant(Tensor::from_vec(&[n, VOCAB_SIZE], batch.mix)?);
            let rows = g.matmul(mix, b.tok)?;
            let noise = g.constant(Tensor::from_vec(&[n, d], batch.noise)?);
            Some(g.add(rows, noise)?)
        };
        let (x, segs) = embed(&mut g, &b, &model.shape, &batch.inputs, soft)?;
        let logits = decode(&mut g, &b, &model.shape, x, &segs, None)?;
        let loss = g.masked_cross_entropy(logits, &batch.targets, &batch.mask)?;
        losses.push(g.value(loss).item() as f64);
        let grads = g.backward(loss)?;
        let named = g.named_gradients(&grads);
        drop(g);
        adam.step(&mut model.params, &named, cfg.lr)?;
    }
    let val_perplexity = perplexity(&model, validation)?;
    Ok((
        model,
        LmReport {
            losses,
            initial_perplexity,
            val_perplexity,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::vocab::{detokenize, tokenize, UNK};

    fn tiny() -> LmShape {
        LmShape {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 12,
        }
    }

    #[test]
    fn names_are_unique_and_prefixed() {
        let m = LanguageModel::init(LmShape::default(), &Rng::new(0)).unwrap();
        assert!(m.params().names().all(|n| n.starts_with("lm/")));
        assert_eq!(m.params().len(), 2 + 4 * 12 + 2);
        assert!(m.params().contains("lm/block3/wv"));
        let back = LanguageModel::from_params(m.params().clone(), 4).unwrap();
        assert_eq!(back.shape(), LmShape::default());
    }

    #[test]
    fn causality() {
        let m = LanguageModel::init(tiny(), &Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let x = Tensor::randn(&[6, 16], 1.0, &mut rng);
        let base = m.forward_embeddings(&x).unwrap();
        for t in 0..5 {
            let mut y = x.clone();
            for v in &mut y.data_mut()[(t + 1) * 16..(t + 2) * 16] {
                *v += 1.0;
            }
            let out = m.forward_embeddings(&y).unwrap();
            assert_eq!(
                out.data()[..(t + 1) * 64],
                base.data()[..(t + 1) * 64],
                "t={t}"
            );
            assert_ne!(
                out.data()[(t + 1) * 64..(t + 2) * 64],
                base.data()[(t + 1) * 64..(t + 2) * 64]
            );
        }
    }

    #[test]
    fn incremental_oracle_and_edges() {
        let m = LanguageModel::init(tiny(), &Rng::new(3)).unwrap();
        let ids = tokenize("<bos> a red box . <eos>");
        let full = m.forward_tokens(&ids).unwrap();
        for t in 1..=ids.len() {
            let part = m.forward_tokens(&ids[..t]).unwrap();
            let a = &part.data()[(t - 1) * 64..t * 64];
            let b = &full.data()[(t - 1) * 64..t * 64];
            let worst = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f32::max);
            assert!(worst < 1e-5, "t={t} {worst}");
        }
        assert_eq!(m.forward_tokens(&ids[..1]).unwrap().shape(), &[1, 64]);
        let long = vec![BOS; 13];
        assert!(matches!(
            m.forward_tokens(&long),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn packed_batch_matches_separate_runs() {
        let m = LanguageModel::init(tiny(), &Rng::new(4)).unwrap();
        let a = tokenize("<bos> a red box .");
        let b = tokenize("<human> what is shown ? <assistant>");
        let mut g = Graph::<f32>::new();
        let bd = bind(&mut g, m.params(), &m.shape(), false).unwrap();
        let seqs = vec![
            a.iter().map(|&t| Slot::Token(t)).collect(),
            b.iter().map(|&t| Slot::Token(t)).collect(),
        ];
        let (x, segs) = embed(&mut g, &bd, &m.shape(), &seqs, None).unwrap();
        let l = decode(&mut g, &bd, &m.shape(), x, &segs, None).unwrap();
        let packed = g.value(l).data().to_vec();
        let sa = m.forward_tokens(&a).unwrap();
        let sb = m.forward_tokens(&b).unwrap();
        let sep: Vec<f32> = sa.data().iter().chain(sb.data()).copied().collect();
        let worst = packed
            .iter()
            .zip(&sep)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max);
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn soft_prefix_behaves_like_token_embedding() {
        let m = LanguageModel::init(tiny(), &Rng::new(5)).unwrap();
        let prompt = tokenize("<human> what is shown ?");
        let soft = m.token_embedding(EMB_BEGIN).unwrap();
        let with_soft = m.generate(&[soft], &prompt, 4, None).unwrap();
        let mut as_tokens = vec![EMB_BEGIN];
        as_tokens.extend(&prompt);
        assert_eq!(with_soft, m.generate(&[], &as_tokens, 4, None).unwrap());
    }

    #[test]
    fn forced_argmax_and_determinism() {
        let mut m = LanguageModel::init(tiny(), &Rng::new(6)).unwrap();
        let u: Vec<f32> = (0..16)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        *m.params_mut().get_mut(FINAL_G).unwrap() = Tensor::zeros(&[16]);
        *m.params_mut().get_mut(FINAL_B).unwrap() = Tensor::from_vec(&[16], u.clone()).unwrap();
        let emb = m.params_mut().get_mut(TOK_EMB).unwrap();
        for (j, v) in emb.data_mut()[9 * 16..10 * 16].iter_mut().enumerate() {
            *v = u[j] * 1000.0 / 16.0;
        }
        let out = m.generate(&[], &[BOS], 7, None).unwrap();
        assert_eq!(out, vec![9; 7]);
        assert!(m.generate(&[], &[BOS], 12, None).is_err());

        let m = LanguageModel::init(tiny(), &Rng::new(7)).unwrap();
        let a = m.generate(&[], &[BOS, HUMAN], 6, None).unwrap();
        assert_eq!(a, m.generate(&[], &[BOS, HUMAN], 6, None).unwrap());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn corpus_is_in_vocabulary_and_fits() {
        let c = pretraining_corpus(500, &Rng::new(8)).unwrap();
        assert!(c
            .iter()
            .all(|s| !s.contains(&UNK) && s.len() <= 64 && s.len() >= 2));
        assert!(c.iter().any(|s| s[0] == EMB_BEGIN));
        assert!(c.iter().any(|s| detokenize(s).contains(" and a ")));
        assert!(pretraining_corpus(0, &Rng::new(8)).is_err());
    }

    #[test]
    fn short_pretraining_learns_and_is_deterministic() {
        let corpus = pretraining_corpus(400, &Rng::new(9)).unwrap();
        let val = pretraining_corpus(50, &Rng::new(10)).unwrap();
        let shape = LmShape {
            max_seq: 64,
            ..tiny()
        };
        let cfg = LmTrainConfig {
            lr: 3e-3,
            steps: 60,
            batch: 8,
            collapse: 0.5,
        };
        let (a, ra) = pretrain_lm(&corpus, &val, shape, &cfg, &Rng::new(11)).unwrap();
        let (b, rb) = pretrain_lm(&corpus, &val, shape, &cfg, &Rng::new(11)).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a.checksum(), b.checksum());
        assert!(ra.initial_perplexity > 30.0, "{}", ra.initial_perplexity);
        assert!(
            ra.val_perplexity < ra.initial_perplexity / 2.0,
            "{}",
            ra.val_perplexity
        );
        assert!(pretrain_lm(&[], &val, shape, &cfg, &Rng::new(11)).is_err());
    }

    #[test]
    fn collapse_packs_grounding_words() {
        let seq = tokenize(
            "<emb> a red box </emb> <human> what is shown ? <assistant> a red box . <eos>",
        );
        let c = collapse_grounding(&seq).unwrap();
        assert_eq!(c.words, vec![attribute_token(0), object_token(0)]);
        assert_eq!(c.slots[..2], [Slot::Token(EMB_BEGIN), Slot::Soft(0)]);
        assert_eq!(c.slots[2], Slot::Token(EMB_END));
        assert_eq!(c.slots.len(), seq.len() - 2);
        assert!(collapse_grounding(&tokenize("<bos> a red box .")).is_none());
        assert!(collapse_grounding(&tokenize("<emb> </emb> <human>")).is_none());
    }

    #[test]
    fn collapsed_rows_are_never_predicted() {
        let seqs = [tokenize(
            "<emb> red box </emb> <human> what is shown ? <assistant> a red box . <eos>",
        )];
        let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
        let cfg = LmTrainConfig {
            collapse: 1.0,
            ..LmTrainConfig::default()
        };
        let b = pretrain_batch(&refs, &cfg, 16, &mut Rng::new(1)).unwrap();
        assert_eq!(b.mix.len(), VOCAB_SIZE);
        assert_eq!(b.noise.len(), 16);
        assert_eq!(b.inputs[0][1], Slot::Soft(0));
        // the first target is the soft row and carries no loss
        assert!(!b.mask[0]);
        assert_eq!(b.mask.iter().filter(|m| !**m).count(), 1);
        let never = LmTrainConfig {
            collapse: 0.0,
            ..LmTrainConfig::default()
        };
        assert!(pretrain_batch(&refs, &never, 16, &mut Rng::new(1))
            .unwrap()
            .mix
            .is_empty());
    }
}
