//! The trainable graft: an affine projection from the joint space into one soft
//! token, plus low-rank adapters on the q and v projections of every block.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::binder::{Binder, JointEmbedding};
use crate::composer::compose_equal;
use crate::error::{Error, Result};
use crate::lm::{self, AttentionAdapter, GenRequest, LanguageModel, LmShape, Proj, Slot};
use crate::numerics::{AdamState, Graph, NodeId, ParamStore, Real, Rng, Tensor};
use crate::world::conversation::{Conversation, PROMPT_WHAT};
use crate::world::dataset::Record;
use crate::world::scene::Modality;
use crate::world::vocab::{tokenize, TokenId, ASSISTANT, EMB_BEGIN, EMB_END, EOS, HUMAN, PAD};

pub const PROJ_W: &str = "bridge/proj/w";
pub const PROJ_B: &str = "bridge/proj/b";

/// Projection weights start at `PROJ_INIT_GAIN / sqrt(d_embed)`. With unit gain
/// the prefix does not fit within two epochs at the fixed learning rate.
const PROJ_INIT_GAIN: f64 = 0.1;

pub fn lora_name(block: usize, which: Proj, factor: char) -> String {
    let w = match which {
        Proj::Q => "q",
        Proj::K => "k",
        Proj::V => "v",
    };
    format!("bridge/lora/{}/{w}/{factor}", lm::block_name(block))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Per-coordinate std of the gaussian jitter added to each grounding
    /// embedding (then renormalised) every time a record is visited.
    pub jitter: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            lr: 5e-4,
            epochs: 2,
            batch: 8,
            rank: 4,
            alpha: 8.0,
            jitter: 0.1,
        }
    }
}

/// θ_f and θ_l.
#[derive(Clone, Debug)]
pub struct Bridge {
    params: ParamStore,
    rank: usize,
    alpha: f64,
}

impl Bridge {
    pub fn init(
        d_embed: usize,
        shape: &LmShape,
        rank: usize,
        alpha: f64,
        rng: &Rng,
    ) -> Result<Self> {
        if rank == 0 || alpha <= 0.0 {
            return Err(Error::invalid("LoRA rank and alpha must be positive"));
        }
        let d = shape.d_model;
        let mut p = ParamStore::new();
        let mut r = rng.derive("bridge/init/proj", 0);
        p.insert(
            PROJ_W,
            Tensor::randn(
                &[d_embed, d],
                PROJ_INIT_GAIN / (d_embed as f64).sqrt(),
                &mut r,
            ),
        )?;
        p.insert(PROJ_B, Tensor::zeros(&[d]))?;
        for b in 0..shape.n_layers {
            for (k, which) in [Proj::Q, Proj::V].into_iter().enumerate() {
                let mut r = rng.derive("bridge/init/lora", (2 * b + k) as u64);
                p.insert(
                    lora_name(b, which, 'A'),
                    Tensor::randn(&[rank, d], 0.02, &mut r),
                )?;
                p.insert(lora_name(b, which, 'B'), Tensor::zeros(&[d, rank]))?;
            }
        }
        Ok(Bridge {
            params: p,
            rank,
            alpha,
        })
    }

    pub fn from_params(params: ParamStore, alpha: f64, shape: &LmShape) -> Result<Self> {
        let w = params.get(PROJ_W)?;
        let rank = params.get(&lora_name(0, Proj::Q, 'A'))?.shape()[0];
        let expect = Bridge::init(w.shape()[0], shape, rank, alpha, &Rng::new(0))?;
        for (name, t) in expect.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != expect.params.len() {
            return Err(Error::Checkpoint(
                "bridge store has unexpected tensors".into(),
            ));
        }
        Ok(Bridge {
            params,
            rank,
            alpha,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// `h·W + b`: one soft vector per embedding.
    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(h.clone().reshape(&[1, h.numel()])?);
        let out = project_node(&mut g, &self.params, x, false)?;
        let v = g.value(out);
        Tensor::from_vec(&[v.numel()], v.data().to_vec())
    }

    /// `[EMB_BEGIN][f(h)][EMB_END]` as input rows.
    pub fn prefix_rows(&self, lm: &LanguageModel, h: &JointEmbedding) -> Result<Vec<Tensor>> {
        Ok(vec![
            lm.token_embedding(EMB_BEGIN)?,
            self.project(&h.vector)?,
            lm.token_embedding(EMB_END)?,
        ])
    }

    pub fn adapter(&self) -> LoraAdapter<'_, f32> {
        LoraAdapter {
            params: &self.params,
            scale: self.scale(),
            trainable: false,
        }
    }

    /// Greedy single-turn answers. `None` means no grounding (no prefix block at all).
    pub fn answer_batch(
        &self,
        lm: &LanguageModel,
        grounding: &[Option<JointEmbedding>],
        instruction: &[TokenId],
        max_new: usize,
    ) -> Result<Vec<Vec<TokenId>>> {
        let prompt = turn_prompt(instruction);
        let prefixes: Vec<Vec<Tensor>> = grounding
            .iter()
            .map(|h| match h {
                Some(h) => self.prefix_rows(lm, h),
                None => Ok(Vec::new()),
            })
            .collect::<Result<_>>()?;
        let reqs: Vec<GenRequest> = prefixes
            .iter()
            .map(|p| GenRequest {
                prefix: p,
                prompt: &prompt,
            })
            .collect();
        let adapter = self.adapter();
        lm.generate_batch(&reqs, max_new, Some(&adapter))
    }

    pub fn answer(
        &self,
        lm: &LanguageModel,
        grounding: Option<&JointEmbedding>,
        instruction: &str,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        Ok(self
            .answer_batch(lm, &[grounding.cloned()], &tokenize(instruction), max_new)?
            .remove(0))
    }

    /// Parameter count of θ_f ∪ θ_l.
    pub fn numel(&self) -> usize {
        self.params.numel()
    }
}

/// `[HUMAN] x [ASSISTANT]`
pub fn turn_prompt(instruction: &[TokenId]) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(instruction.len() + 2);
    p.push(HUMAN);
    p.extend(instruction);
    p.push(ASSISTANT);
    p
}

/// The default question used for grounded evaluation.
pub fn what_is_shown() -> Vec<TokenId> {
    tokenize(PROMPT_WHAT)
}

pub fn project_node<T: Real>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    h: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let w = params.bind(g, PROJ_W, trainable)?;
    let b = params.bind(g, PROJ_B, trainable)?;
    let y = g.matmul(h, w)?;
    g.add_row(y, b)
}

/// Low-rank update on q and v: `scale · x·Aᵀ·Bᵀ`.
pub struct LoraAdapter<'a, T: Real> {
    pub params: &'a ParamStore<T>,
    pub scale: f64,
    pub trainable: bool,
}

impl<T: Real> AttentionAdapter<T> for LoraAdapter<'_, T> {
    fn delta(
        &self,
        g: &mut Graph<T>,
        block: usize,
        which: Proj,
        x: NodeId,
    ) -> Result<Option<NodeId>> {
        if which == Proj::K {
            return Ok(None);
        }
        let a = self
            .params
            .bind(g, &lora_name(block, which, 'A'), self.trainable)?;
        let b = self
            .params
            .bind(g, &lora_name(block, which, 'B'), self.trainable)?;
        lora_delta(g, x, a, b, self.scale).map(Some)
    }
}

pub fn lora_delta<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    a: NodeId,
    b: NodeId,
    scale: f64,
) -> Result<NodeId> {
    let xa = g.matmul_nt(x, a)?;
    let xab = g.matmul_nt(xa, b)?;
    g.scale(xab, scale)
}

/// `x·Wᵀ + scale·x·Aᵀ·Bᵀ` for a single adapted layer.
pub fn lora_forward(x: &Tensor, w: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let (xn, wn, an, bn) = (
        g.constant(x.clone()),
        g.constant(w.clone()),
        g.constant(a.clone()),
        g.constant(b.clone()),
    );
    let base = g.matmul_nt(xn, wn)?;
    let d = lora_delta(&mut g, xn, an, bn, scale)?;
    let out = g.add(base, d)?;
    Ok(g.value(out).clone())
}

/// `W + scale·B·A` materialized.
pub fn lora_merged(w: &Tensor, a: &Tensor, b: &Tensor, scale: f64) -> Result<Tensor> {
    let ba = crate::numerics::matmul(b, a)?;
    if ba.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "lora_merged",
            left: w.shape().to_vec(),
            right: ba.shape().to_vec(),
        });
    }
    let data = w
        .data()
        .iter()
        .zip(ba.data())
        .map(|(x, y)| (*x as f64 + scale * *y as f64) as f32)
        .collect();
    Tensor::from_vec(w.shape(), data)
}

/// One conversation laid out for teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltSequence {
    pub inputs: Vec<Slot>,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl BuiltSequence {
    pub fn masked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// One copy of the sequence per turn, with the loss mask restricted to
    /// that turn's response and closing EOS.
    pub fn per_turn(&self) -> Vec<BuiltSequence> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.mask.len() {
            if !self.mask[i] {
                i += 1;
                continue;
            }
            let start = i;
            while i < self.mask.len() && self.mask[i] {
                i += 1;
            }
            let mut t = self.clone();
            t.mask = (0..self.mask.len())
                .map(|k| (start..i).contains(&k))
                .collect();
            out.push(t);
        }
        out
    }
}

/// `[EMB_BEGIN][soft][EMB_END]` then `[HUMAN] x [ASSISTANT] y [EOS]` per turn.
/// Targets are the layout shifted by one; the mask selects response tokens and
/// their closing EOS.
pub fn build_sequence(conv: &Conversation, max_seq: usize) -> Result<BuiltSequence> {
    if conv.turns.is_empty() {
        return Err(Error::invalid("conversation has no turns"));
    }
    let mut layout = vec![Slot::Token(EMB_BEGIN), Slot::Soft(0), Slot::Token(EMB_END)];
    let mut in_response = vec![false; 3];
    for t in &conv.turns {
        layout.push(Slot::Token(HUMAN));
        layout.extend(t.instruction.iter().map(|&x| Slot::Token(x)));
        layout.push(Slot::Token(ASSISTANT));
        in_response.resize(layout.len(), false);
        layout.extend(t.response.iter().map(|&y| Slot::Token(y)));
        layout.push(Slot::Token(EOS));
        in_response.resize(layout.len(), true);
    }
    let n = layout.len() - 1;
    if n > max_seq {
        return Err(Error::SequenceTooLong {
            len: n,
            max: max_seq,
        });
    }
    let targets = layout[1..]
        .iter()
        .map(|s| match s {
            Slot::Token(t) => *t,
            Slot::Soft(_) => PAD,
        })
        .collect();
    Ok(BuiltSequence {
        inputs: layout[..n].to_vec(),
        targets,
        mask: in_response[1..].to_vec(),
    })
}

/// Mean over the batch of each conversation's summed response NLL.
///
/// `hs` is `[B×d_e]`, one grounding embedding per sequence.
#[allow(clippy::too_many_arguments)]
pub fn eq1_loss_node<T: Real>(
    g: &mut Graph<T>,
    lm_params: &ParamStore<T>,
    shape: &LmShape,
    bridge_params: &ParamStore<T>,
    lora_scale: f64,
    seqs: &[&BuiltSequence],
    hs: &Tensor<T>,
    train_lm: bool,
) -> Result<NodeId> {
    if seqs.is_empty() || hs.rows() != seqs.len() {
        return Err(Error::invalid(
            "one grounding embedding per sequence is required",
        ));
    }
    let bound = lm::bind(g, lm_params, shape, train_lm)?;
    let h = g.constant(hs.clone());
    let soft = project_node(g, bridge_params, h, true)?;
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        inputs.push(
            s.inputs
                .iter()
                .map(|slot| match *slot {
                    Slot::Soft(0) => Slot::Soft(i),
                    other => other,
                })
                .collect(),
        );
        targets.extend(&s.targets);
        mask.extend(&s.mask);
    }
    let count = mask.iter().filter(|m| **m).count();
    let (x, segs) = lm::embed(g, &bound, shape, &inputs, Some(soft))?;
    let adapter = LoraAdapter {
        params: bridge_params,
        scale: lora_scale,
        trainable: true,
    };
    let logits = lm::decode(g, &bound, shape, x, &segs, Some(&adapter))?;
    let ce = g.masked_cross_entropy(logits, &targets, &mask)?;
    g.scale(ce, count as f64 / seqs.len() as f64)
}

/// Summed response NLL of one conversation grounded in `h`.
pub fn eq1_loss(
    conv: &Conversation,
    h: &JointEmbedding,
    bridge: &Bridge,
    lm: &LanguageModel,
) -> Result<f64> {
    let seq = build_sequence(conv, lm.shape().max_seq)?;
    eq1_loss_built(&seq, h, bridge, lm)
}

pub fn eq1_loss_built(
    seq: &BuiltSequence,
    h: &JointEmbedding,
    bridge: &Bridge,
    lm: &LanguageModel,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let hs = h.vector.cast::<f64>().reshape(&[1, h.vector.numel()])?;
    let loss = eq1_loss_node(
        &mut g,
        &lm.params().cast(),
        &lm.shape(),
        &bridge.params.cast(),
        bridge.scale(),
        &[seq],
        &hs,
        false,
    )?;
    Ok(g.value(loss).item())
}

/// What the bridge was trained on, used to guard evaluations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingManifest {
    pub modalities: BTreeSet<Modality>,
    pub scene_seeds: BTreeSet<u64>,
}

impl TrainingManifest {
    pub fn from_records(records: &[Record]) -> Self {
        let mut m = TrainingManifest::default();
        for r in records {
            for s in &r.grounding {
                m.modalities.insert(s.modality);
                m.scene_seeds.insert(s.scene.seed);
            }
        }
        m
    }

    pub fn write_metadata(&self, meta: &mut BTreeMap<String, String>) {
        let mods: Vec<&str> = self.modalities.iter().map(|m| m.name()).collect();
        meta.insert("train_modalities".into(), mods.join(","));
        let mut seeds = String::with_capacity(self.scene_seeds.len() * 17);
        for (i, s) in self.scene_seeds.iter().enumerate() {
            if i > 0 {
                seeds.push(',');
            }
            write!(seeds, "{s:x}").unwrap();
        }
        meta.insert("train_seeds".into(), seeds);
    }

    pub fn read_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata key `{k}` missing")))
        };
        let modalities = get("train_modalities")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        let scene_seeds = get("train_seeds")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                u64::from_str_radix(s, 16).map_err(|_| Error::Checkpoint(format!("bad seed `{s}`")))
            })
            .collect::<Result<_>>()?;
        Ok(TrainingManifest {
            modalities,
            scene_seeds,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BridgeReport {
    /// `(step, lr, loss)` per optimizer step.
    pub log: Vec<(usize, f64, f64)>,
    pub steps_per_epoch: usize,
    pub trainable: usize,
    pub total_params: usize,
    pub manifest: TrainingManifest,
    pub binder_checksum: String,
    pub lm_checksum: String,
}

impl BridgeReport {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total_params as f64
    }

    pub fn epoch_mean_loss(&self, epoch: usize) -> f64 {
        let s = &self.log[epoch * self.steps_per_epoch
            ..((epoch + 1) * self.steps_per_epoch).min(self.log.len())];
        s.iter().map(|r| r.2).sum::<f64>() / s.len() as f64
    }

    /// `step<TAB>lr<TAB>loss` with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tlr\tloss\n");
        for (s, lr, l) in &self.log {
            writeln!(out, "{s}\t{lr:e}\t{l:.6}").unwrap();
        }
        out
    }
}

/// Linear decay from `peak` at step 0 to exactly 0 at the last step.
pub fn linear_decay(peak: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return peak;
    }
    peak * (total - 1 - step) as f64 / (total - 1) as f64
}

/// Grounding vector of a record: the embedding itself, or the equal-weight
/// composition for two-scene records.
pub fn record_embedding(binder: &Binder, record: &Record) -> Result<JointEmbedding> {
    let es = record
        .grounding
        .iter()
        .map(|s| binder.encode_sample(s))
        .collect::<Result<Vec<_>>>()?;
    match es.len() {
        0 => Err(Error::invalid("record has no grounding")),
        1 => Ok(es.into_iter().next().expect("one")),
        _ => compose_equal(&es),
    }
}

/// `normalize(e + σ·ε)` for each part, composed when there are two.
pub fn jittered_embedding(
    parts: &[JointEmbedding],
    sigma: f64,
    rng: &mut Rng,
) -> Result<JointEmbedding> {
    let noisy = parts
        .iter()
        .map(|e| {
            if sigma == 0.0 {
                return Ok(e.clone());
            }
            let v: Vec<f64> = e
                .vector
                .data()
                .iter()
                .map(|&x| x as f64 + sigma * rng.gaussian())
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v: Vec<f64> = v.iter().map(|x| x / n).collect();
            JointEmbedding::new(Tensor::from_f64s(&[v.len()], &v)?, e.source)
        })
        .collect::<Result<Vec<_>>>()?;
    match noisy.len() {
        0 => Err(Error::invalid("record has no grounding")),
        1 => Ok(noisy.into_iter().next().expect("one")),
        _ => compose_equal(&noisy),
    }
}

fn require_anchor_only(records: &[Record]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if let Some(s) = r.grounding.iter().find(|s| s.modality != Modality::ANCHOR) {
            return Err(Error::invariant(format!(
                "bridge training record {i} is grounded in `{}`; only `{}` is allowed",
                s.modality,
                Modality::ANCHOR
            )));
        }
    }
    Ok(())
}

/// Adam over θ_f ∪ θ_l with linear lr decay; θ₁ and θ₂ are only read.
pub fn train_bridge(
    records: &[Record],
    binder: &Binder,
    lm: &LanguageModel,
    cfg: &BridgeConfig,
    rng: &Rng,
) -> Result<(Bridge, BridgeReport)> {
    if records.is_empty() {
        return Err(Error::invalid("no bridge training records"));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch and epochs must be positive"));
    }
    require_anchor_only(records)?;
    let binder_checksum = binder.checksum();
    let lm_checksum = lm.checksum();
    let shape = lm.shape();
    let seqs = records
        .iter()
        .map(|r| build_sequence(&r.conversation, shape.max_seq))
        .collect::<Result<Vec<_>>>()?;
    let parts = records
        .iter()
        .map(|r| {
            r.grounding
                .iter()
                .map(|s| binder.encode_sample(s))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bridge = Bridge::init(binder.d_embed(), &shape, cfg.rank, cfg.alpha, rng)?;
    let mut adam = AdamState::default();
    let steps_per_epoch = records.len().div_ceil(cfg.batch);
    let total = steps_per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(total);
    let d_e = binder.d_embed();
    for epoch in 0..cfg.epochs {
        let order = rng
            .derive("bridge/epoch", epoch as u64)
            .permutation(records.len());
        for idx in order.chunks(cfg.batch) {
            let step = log.len();
            let lr = linear_decay(cfg.lr, step, total);
            let batch: Vec<&BuiltSequence> = idx.iter().map(|&i| &seqs[i]).collect();
            let mut hdata = Vec::with_capacity(idx.len() * d_e);
            for &i in idx {
                let mut r = rng.derive("bridge/jitter", (epoch * records.len() + i) as u64);
                hdata.extend_from_slice(
                    jittered_embedding(&parts[i], cfg.jitter, &mut r)?
                        .vector
                        .data(),
                );
            }
            let hs = Tensor::from_vec(&[idx.len(), d_e], hdata)?;
            let mut g = Graph::<f32>::new();
            let loss = eq1_loss_node(
                &mut g,
                lm.params(),
                &shape,
                &bridge.params,
                bridge.scale(),
                &batch,
                &hs,
                false,
            )?;
            let value = g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            let named = g.named_gradients(&grads);
            drop(g);
            if let Some(foreign) = named.keys().find(|k| !k.starts_with("bridge/")) {
                return Err(Error::invariant(format!(
                    "gradient materialized for frozen tensor `{foreign}`"
                )));
            }
            adam.step(&mut bridge.params, &named, lr)?;
            log.push((step, lr, value));
        }
    }
    if binder.checksum() != binder_checksum || lm.checksum() != lm_checksum {
        return Err(Error::invariant(
            "frozen parameters changed during bridge training",
        ));
    }
    let trainable = bridge.numel();
    let total_params = trainable + binder.params().numel() + lm.params().numel();
    Ok((
        bridge,
        BridgeReport {
            log,
            steps_per_epoch,
            trainable,
            total_params,
            manifest: TrainingManifest::from_records(records),
            binder_checksum,
            lm_checksum,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binder::{BinderConfig, Source};
    use crate::world::conversation::{make_conversation, Turn};
    use crate::world::dataset::{generate, DatasetConfig};
    use crate::world::scene::{ConceptScene, World, DEFAULT_SIGMA};
    use crate::world::vocab::detokenize;

    fn tiny() -> LmShape {
        LmShape {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 64,
        }
    }

    fn unit(d: usize, seed: u64) -> JointEmbedding {
        let t = Tensor::<f32>::randn(&[d], 1.0, &mut Rng::new(seed));
        let n = t.norm();
        let v: Vec<f64> = t.data().iter().map(|x| *x as f64 / n).collect();
        JointEmbedding::new(
            Tensor::from_f64s(&[d], &v).unwrap(),
            Source::Modality(Modality::Img),
        )
        .unwrap()
    }

    #[test]
    fn projection_is_affine() {
        let b = Bridge::init(8, &tiny(), 4, 8.0, &Rng::new(1)).unwrap();
        let zero = b.project(&Tensor::zeros(&[8])).unwrap();
        assert_eq!(zero.data(), b.params().get(PROJ_B).unwrap().data());
        let mut b2 = b.clone();
        *b2.params_mut().get_mut(PROJ_B).unwrap() = Tensor::full(&[16], 0.5);
        let mut rng = Rng::new(2);
        let x = Tensor::randn(&[8], 1.0, &mut rng);
        let y = Tensor::randn(&[8], 1.0, &mut rng);
        let xy = Tensor::from_vec(
            &[8],
            x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let (px, py, pxy) = (
            b2.project(&x).unwrap(),
            b2.project(&y).unwrap(),
            b2.project(&xy).unwrap(),
        );
        assert_eq!(px.shape(), &[16]);
        for i in 0..16 {
            assert!((px.data()[i] + py.data()[i] - 0.5 - pxy.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn lora_zero_init_and_merge() {
        let mut rng = Rng::new(3);
        let w = Tensor::randn(&[64, 64], 0.1, &mut rng);
        let a = Tensor::randn(&[4, 64], 0.02, &mut rng);
        let x = Tensor::randn(&[10, 64], 1.0, &mut rng);
        let zero_b = Tensor::zeros(&[64, 4]);
        let base =
            crate::numerics::matmul(&x, &Tensor::from_vec(&[64, 64], transpose(&w)).unwrap())
                .unwrap();
        assert_eq!(
            lora_forward(&x, &w, &a, &zero_b, 2.0)
                .unwrap()
                .to_le_bytes(),
            base.to_le_bytes()
        );
        let b = Tensor::randn(&[64, 4], 0.5, &mut rng);
        let factored = lora_forward(&x, &w, &a, &b, 2.0).unwrap();
        let merged = lora_merged(&w, &a, &b, 2.0).unwrap();
        let dense = crate::numerics::matmul(
            &x,
            &Tensor::from_vec(&[64, 64], transpose(&merged)).unwrap(),
        )
        .unwrap();
        assert!(factored.max_abs_diff(&dense) < 1e-5);
        assert_eq!(a.numel() + b.numel(), 2 * 64 * 4);
    }

    fn transpose(t: &Tensor) -> Vec<f32> {
        let (r, c) = (t.rows(), t.cols());
        (0..c * r).map(|k| t.data()[(k % r) * c + k / r]).collect()
    }

    #[test]
    fn sequence_layout_and_mask() {
        let conv = Conversation {
            turns: vec![Turn {
                instruction: tokenize("what is shown"),
                response: tokenize("a red box ."),
            }],
        };
        let s = build_sequence(&conv, 64).unwrap();
        assert_eq!(s.masked(), 5);
        // no loss lands on the soft slot or on a special marker
        for (t, m) in s.targets.iter().zip(&s.mask) {
            if matches!(*t, PAD | EMB_BEGIN | EMB_END | HUMAN | ASSISTANT) {
                assert!(!m, "{t}");
            }
        }
        assert!(!s.mask[0] && s.targets[0] == PAD);
        assert_eq!(s.inputs.len(), s.targets.len());
        assert!(matches!(
            build_sequence(&conv, 8),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn two_turn_fixture() {
        let scene = ConceptScene::new(0, 0, 0).unwrap();
        let conv = make_conversation(&scene, 1, &mut Rng::new(0)).unwrap();
        let s = build_sequence(&conv, 64).unwrap();
        let words: Vec<String> = s
            .inputs
            .iter()
            .map(|x| match x {
                Slot::Token(t) => detokenize(&[*t]),
                Slot::Soft(_) => "<soft>".into(),
            })
            .collect();
        assert_eq!(
            words.join(" "),
            "<emb> <soft> </emb> <human> what is shown ? <assistant> a red box . <eos> \
             <human> what color is it ? <assistant> it is red ."
        );
        let masked: Vec<String> = s
            .targets
            .iter()
            .zip(&s.mask)
            .filter(|(_, m)| **m)
            .map(|(t, _)| detokenize(&[*t]))
            .collect();
        assert_eq!(masked.join(" "), "a red box . <eos> it is red . <eos>");
    }

    #[test]
    fn masked_labels_do_not_matter() {
        let lm = LanguageModel::init(tiny(), &Rng::new(4)).unwrap();
        let mut bridge = Bridge::init(8, &tiny(), 4, 8.0, &Rng::new(5)).unwrap();
        let b = bridge
            .params_mut()
            .get_mut(&lora_name(0, Proj::Q, 'B'))
            .unwrap();
        *b = Tensor::full(&[16, 4], 0.1);
        let scene = ConceptScene::new(2, 3, 0).unwrap();
        let conv = make_conversation(&scene, 1, &mut Rng::new(0)).unwrap();
        let h = unit(8, 6);
        let s = build_sequence(&conv, 64).unwrap();
        let base = eq1_loss_built(&s, &h, &bridge, &lm).unwrap();
        let mut t = s.clone();
        for (i, m) in t.mask.clone().iter().enumerate() {
            if !m {
                t.targets[i] = (t.targets[i] * 7 + 5) % 64;
            }
        }
        assert_eq!(
            base.to_bits(),
            eq1_loss_built(&t, &h, &bridge, &lm).unwrap().to_bits()
        );
    }

    #[test]
    fn lr_schedule_endpoints() {
        assert_eq!(linear_decay(5e-4, 0, 1024), 5e-4);
        assert_eq!(linear_decay(5e-4, 1023, 1024), 0.0);
        let mid = linear_decay(5e-4, 511, 1024) - linear_decay(5e-4, 512, 1024);
        assert!((mid - 5e-4 / 1023.0).abs() < 1e-15);
    }

    #[test]
    fn manifest_round_trip() {
        let w = World::new(1, DEFAULT_SIGMA);
        let recs = generate(
            &w,
            &DatasetConfig {
                count: 10,
                ..DatasetConfig::default()
            },
            &Rng::new(1),
        )
        .unwrap();
        let m = TrainingManifest::from_records(&recs);
        let mut meta = BTreeMap::new();
        m.write_metadata(&mut meta);
        assert_eq!(TrainingManifest::read_metadata(&meta).unwrap(), m);
        assert_eq!(meta["train_modalities"], "img");
    }

    #[test]
    fn non_anchor_training_data_rejected() {
        let w = World::new(1, DEFAULT_SIGMA);
        let recs = generate(
            &w,
            &DatasetConfig {
                count: 4,
                modality: Modality::Aud,
                ..DatasetConfig::default()
            },
            &Rng::new(1),
        )
        .unwrap();
        let binder = Binder::init(&BinderConfig::default(), &Rng::new(0)).unwrap();
        let lm = LanguageModel::init(tiny(), &Rng::new(0)).unwrap();
        let err =
            train_bridge(&recs, &binder, &lm, &BridgeConfig::default(), &Rng::new(0)).unwrap_err();
        assert!(err.is_invariant_violation(), "{err}");
        assert!(err.to_string().contains("aud"));
    }

    #[test]
    fn short_training_touches_only_the_bridge() {
        let w = World::new(1, DEFAULT_SIGMA);
        let recs = generate(
            &w,
            &DatasetConfig {
                count: 24,
                ..DatasetConfig::default()
            },
            &Rng::new(1),
        )
        .unwrap();
        let binder = Binder::init(&BinderConfig::default(), &Rng::new(0)).unwrap();
        let lm = LanguageModel::init(tiny(), &Rng::new(0)).unwrap();
        let cfg = BridgeConfig {
            batch: 8,
            epochs: 2,
            ..BridgeConfig::default()
        };
        let (bridge, rep) = train_bridge(&recs, &binder, &lm, &cfg, &Rng::new(2)).unwrap();
        assert_eq!(rep.log.len(), 6);
        assert_eq!(rep.log[0].1, 5e-4);
        assert_eq!(rep.log[5].1, 0.0);
        assert_eq!(rep.binder_checksum, binder.checksum());
        assert_eq!(rep.lm_checksum, lm.checksum());
        let fresh = Bridge::init(32, &tiny(), 4, 8.0, &Rng::new(2)).unwrap();
        for (name, t) in bridge.params().iter() {
            assert_ne!(t, fresh.params().get(name).unwrap(), "{name}");
        }
        let (_, again) = train_bridge(&recs, &binder, &lm, &cfg, &Rng::new(2)).unwrap();
        assert_eq!(again.to_tsv(), rep.to_tsv());
        assert!(rep.to_tsv().starts_with("step\tlr\tloss\n0\t5e-4\t"));
    }

    #[test]
    fn loss_factorizes_over_turns() {
        let lm = LanguageModel::init(tiny(), &Rng::new(14)).unwrap();
        let mut bridge = Bridge::init(8, &tiny(), 4, 8.0, &Rng::new(15)).unwrap();
        *bridge
            .params_mut()
            .get_mut(&lora_name(1, Proj::V, 'B'))
            .unwrap() = Tensor::full(&[16, 4], -0.05);
        let conv =
            make_conversation(&ConceptScene::new(4, 2, 0).unwrap(), 1, &mut Rng::new(0)).unwrap();
        assert_eq!(conv.turns.len(), 2);
        let s = build_sequence(&conv, 64).unwrap();
        let h = unit(8, 16);
        let total = eq1_loss_built(&s, &h, &bridge, &lm).unwrap();
        let turns = s.per_turn();
        assert_eq!(turns.len(), 2);
        let parts: f64 = turns
            .iter()
            .map(|t| eq1_loss_built(t, &h, &bridge, &lm).unwrap())
            .sum();
        assert!((total - parts).abs() < 1e-5, "{total} vs {parts}");
    }

    #[test]
    fn uniform_head_gives_log_vocab_per_token() {
        let mut lm = LanguageModel::init(tiny(), &Rng::new(17)).unwrap();
        *lm.params_mut().get_mut(crate::lm::FINAL_G).unwrap() = Tensor::zeros(&[16]);
        *lm.params_mut().get_mut(crate::lm::FINAL_B).unwrap() = Tensor::zeros(&[16]);
        let bridge = Bridge::init(8, &tiny(), 4, 8.0, &Rng::new(18)).unwrap();
        let conv =
            make_conversation(&ConceptScene::new(1, 5, 0).unwrap(), 0, &mut Rng::new(0)).unwrap();
        let s = build_sequence(&conv, 64).unwrap();
        let nll = eq1_loss_built(&s, &unit(8, 19), &bridge, &lm).unwrap();
        let expect = s.masked() as f64 * (crate::world::vocab::VOCAB_SIZE as f64).ln();
        assert!((nll - expect).abs() < 1e-9 * expect, "{nll} vs {expect}");
    }

    #[test]
    fn jitter_keeps_unit_norm_and_is_seeded() {
        let parts = [unit(8, 20), unit(8, 21)];
        let same = jittered_embedding(&parts[..1], 0.0, &mut Rng::new(0)).unwrap();
        assert_eq!(same, parts[0]);
        let a = jittered_embedding(&parts[..1], 0.1, &mut Rng::new(1)).unwrap();
        let b = jittered_embedding(&parts[..1], 0.1, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert!((a.vector.norm() - 1.0).abs() < 1e-5);
        assert!(a.dot(&parts[0]) < 1.0 - 1e-6 && a.dot(&parts[0]) > 0.5);
        let both = jittered_embedding(&parts, 0.1, &mut Rng::new(2)).unwrap();
        assert_eq!(both.source, Source::Composed);
        assert!((both.vector.norm() - 1.0).abs() < 1e-5);
        assert!(jittered_embedding(&[], 0.1, &mut Rng::new(2)).is_err());
    }
}
