//! Joint embedding space: one encoder per modality plus a text encoder, bound
//! contrastively to the anchor modality using anchor-paired data only.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Graph, NodeId, ParamStore, Real, Rng, Tensor};
use crate::world::scene::{
    render_caption, sample_scene, ConceptScene, Modality, ModalitySample, World,
};
use crate::world::vocab::{TokenId, N_ATTRIBUTES, N_OBJECTS, VOCAB_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Modality(Modality),
    Text,
    Composed,
}

impl Source {
    /// The seven encodable sources: six modalities then text.
    pub fn encodable() -> [Source; 7] {
        let m = Modality::ALL;
        [
            Source::Modality(m[0]),
            Source::Modality(m[1]),
            Source::Modality(m[2]),
            Source::Modality(m[3]),
            Source::Modality(m[4]),
            Source::Modality(m[5]),
            Source::Text,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Source::Modality(m) => m.name(),
            Source::Text => "text",
            Source::Composed => "composed",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unit-norm vector in the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub vector: Tensor,
    pub source: Source,
}

impl JointEmbedding {
    pub fn new(vector: Tensor, source: Source) -> Result<Self> {
        let n = vector.norm();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("joint embedding norm {n} is not 1")));
        }
        Ok(JointEmbedding { vector, source })
    }

    pub fn dot(&self, other: &JointEmbedding) -> f64 {
        self.vector
            .data()
            .iter()
            .zip(other.vector.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinderConfig {
    pub d_embed: usize,
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub tau: f64,
    pub pairs_per_type: usize,
    pub heldout_scenes: usize,
}

impl Default for BinderConfig {
    fn default() -> Self {
        BinderConfig {
            d_embed: 32,
            hidden: 64,
            lr: 1e-3,
            steps: 300,
            batch: 32,
            tau: 0.07,
            pairs_per_type: 1024,
            heldout_scenes: 64,
        }
    }
}

pub const TEXT_EMBED_DIM: usize = 32;

/// Weight init is `INIT_GAIN / sqrt(fan_in)`. Small weights let 50 Adam steps per
/// pair type move each encoder far enough for non-anchor pairs to line up.
const INIT_GAIN: f64 = 0.1;

fn encoder_prefix(source: Source) -> String {
    format!("binder/{}", source.name())
}

/// Symmetric InfoNCE over a batch of matched rows.
pub fn info_nce<T: Real>(g: &mut Graph<T>, a: NodeId, b: NodeId, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let n = g.value(a).rows();
    if g.value(b).shape() != g.value(a).shape() {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            left: g.value(a).shape().to_vec(),
            right: g.value(b).shape().to_vec(),
        });
    }
    let diag: Vec<usize> = (0..n).collect();
    let all = vec![true; n];
    let ab = g.matmul_nt(a, b)?;
    let ab = g.scale(ab, 1.0 / tau)?;
    let ba = g.matmul_nt(b, a)?;
    let ba = g.scale(ba, 1.0 / tau)?;
    let l1 = g.masked_cross_entropy(ab, &diag, &all)?;
    let l2 = g.masked_cross_entropy(ba, &diag, &all)?;
    let s = g.add(l1, l2)?;
    g.scale(s, 0.5)
}

/// InfoNCE value for two lists of embeddings.
pub fn info_nce_value(a: &[JointEmbedding], b: &[JointEmbedding], tau: f64) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::invalid(format!(
            "info_nce needs equal non-empty batches, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let stack = |xs: &[JointEmbedding]| -> Result<Tensor> {
        let d = xs[0].vector.numel();
        let data = xs
            .iter()
            .flat_map(|x| x.vector.data().iter().copied())
            .collect();
        Tensor::from_vec(&[xs.len(), d], data)
    };
    let mut g = Graph::<f32>::new();
    let an = g.constant(stack(a)?);
    let bn = g.constant(stack(b)?);
    let l = info_nce(&mut g, an, bn, tau)?;
    Ok(g.value(l).item() as f64)
}

/// Fraction of queries whose best gallery match (max dot product, ties to the
/// lowest index) is `truth[i]`.
pub fn retrieval_at_1(
    queries: &[JointEmbedding],
    gallery: &[JointEmbedding],
    truth: &[usize],
) -> Result<f64> {
    if queries.is_empty() || queries.len() != gallery.len() || truth.len() != queries.len() {
        return Err(Error::invalid(format!(
            "retrieval needs equal non-empty lengths, got {} / {} / {}",
            queries.len(),
            gallery.len(),
            truth.len()
        )));
    }
    let mut hits = 0;
    for (q, &t) in queries.iter().zip(truth) {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, c) in gallery.iter().enumerate() {
            let s = q.dot(c);
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        hits += usize::from(best == t);
    }
    Ok(hits as f64 / queries.len() as f64)
}

/// Anchor-paired training data: for each partner source, matched (anchor, partner) observations.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub partner: Source,
    pub anchors: Vec<ModalitySample>,
    pub partners: Vec<PartnerItem>,
}

#[derive(Clone, Debug)]
pub enum PartnerItem {
    Sample(ModalitySample),
    Caption(Vec<TokenId>),
}

#[derive(Clone, Debug)]
pub struct BinderCorpus {
    pub sets: Vec<PairSet>,
}

/// Training order of the pair types.
pub fn partner_order() -> [Source; 6] {
    [
        Source::Text,
        Source::Modality(Modality::Vid),
        Source::Modality(Modality::Aud),
        Source::Modality(Modality::Dep),
        Source::Modality(Modality::Thm),
        Source::Modality(Modality::Imu),
    ]
}

impl BinderCorpus {
    pub fn generate(world: &World, pairs_per_type: usize, root: &Rng) -> Result<Self> {
        if pairs_per_type == 0 {
            return Err(Error::invalid(
                "binder corpus needs at least one pair per type",
            ));
        }
        let mut sets = Vec::new();
        for partner in partner_order() {
            let label = format!("binder/pairs/{partner}");
            let mut anchors = Vec::with_capacity(pairs_per_type);
            let mut partners = Vec::with_capacity(pairs_per_type);
            for i in 0..pairs_per_type as u64 {
                let scene = sample_scene(&mut root.derive(&label, i));
                anchors.push(world.render_scene(&scene, Modality::ANCHOR));
                partners.push(match partner {
                    Source::Text => PartnerItem::Caption(render_caption(&scene)),
                    Source::Modality(m) => PartnerItem::Sample(world.render_scene(&scene, m)),
                    Source::Composed => unreachable!("not a partner"),
                });
            }
            sets.push(PairSet {
                partner,
                anchors,
                partners,
            });
        }
        Ok(BinderCorpus { sets })
    }

    pub fn without(mut self, partner: Source) -> Self {
        self.sets.retain(|s| s.partner != partner);
        self
    }
}

/// Counts every contrastive pair formed during training, by source pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairAudit {
    pub counts: BTreeMap<(String, String), usize>,
}

impl PairAudit {
    fn record(&mut self, a: Source, b: Source, n: usize) {
        *self
            .counts
            .entry((a.name().into(), b.name().into()))
            .or_default() += n;
    }

    pub fn non_anchor_pairs(&self) -> usize {
        let anchor = Modality::ANCHOR.name();
        self.counts
            .iter()
            .filter(|((a, b), _)| a != anchor && b != anchor)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Clone, Debug)]
pub struct BinderReport {
    pub losses: Vec<f64>,
    pub audit: PairAudit,
    /// `(a, b, R@1)` for every unordered pair of encodable sources; the worse direction is kept.
    pub retrieval: Vec<(Source, Source, f64)>,
}

impl BinderReport {
    pub fn retrieval_for(&self, a: Source, b: Source) -> Option<f64> {
        self.retrieval
            .iter()
            .find(|(x, y, _)| (*x == a && *y == b) || (*x == b && *y == a))
            .map(|r| r.2)
    }
}

/// Frozen encoder set.
#[derive(Clone, Debug)]
pub struct Binder {
    params: ParamStore,
    d_embed: usize,
}

fn linear<T: Real>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul_nt(x, w)?;
    g.add_row(y, b)
}

impl Binder {
    pub fn init(cfg: &BinderConfig, rng: &Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        for source in Source::encodable() {
            let mut r = rng.derive("binder/init", source_index(source));
            let p = encoder_prefix(source);
            let d_in = match source {
                Source::Modality(m) => m.dim(),
                _ => {
                    params.insert(
                        format!("{p}/emb"),
                        Tensor::randn(&[VOCAB_SIZE, TEXT_EMBED_DIM], 1.0, &mut r),
                    )?;
                    TEXT_EMBED_DIM
                }
            };
            params.insert(
                format!("{p}/w1"),
                Tensor::randn(
                    &[cfg.hidden, d_in],
                    INIT_GAIN / (d_in as f64).sqrt(),
                    &mut r,
                ),
            )?;
            params.insert(format!("{p}/b1"), Tensor::zeros(&[cfg.hidden]))?;
            params.insert(
                format!("{p}/w2"),
                Tensor::randn(
                    &[cfg.d_embed, cfg.hidden],
                    INIT_GAIN / (cfg.hidden as f64).sqrt(),
                    &mut r,
                ),
            )?;
            params.insert(format!("{p}/b2"), Tensor::zeros(&[cfg.d_embed]))?;
        }
        Ok(Binder {
            params,
            d_embed: cfg.d_embed,
        })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let mut d_embed = None;
        for source in Source::encodable() {
            let p = encoder_prefix(source);
            for t in ["w1", "b1", "w2", "b2"] {
                params.get(&format!("{p}/{t}"))?;
            }
            let w2 = params.get(&format!("{p}/w2"))?;
            let d = w2.shape()[0];
            if *d_embed.get_or_insert(d) != d {
                return Err(Error::Checkpoint(format!(
                    "{p}/w2 has inconsistent embedding width"
                )));
            }
            let w1 = params.get(&format!("{p}/w1"))?;
            let expect_in = match source {
                Source::Modality(m) => m.dim(),
                _ => params.get(&format!("{p}/emb"))?.shape()[1],
            };
            if w1.ndim() != 2 || w1.shape()[1] != expect_in {
                return Err(Error::Checkpoint(format!(
                    "{p}/w1 has shape {:?}",
                    w1.shape()
                )));
            }
        }
        if params.names().any(|n| !n.starts_with("binder/")) {
            return Err(Error::Checkpoint(
                "binder store contains foreign tensors".into(),
            ));
        }
        Ok(Binder {
            params,
            d_embed: d_embed.expect("seven encoders"),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn d_embed(&self) -> usize {
        self.d_embed
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Encodes a batch of observations from one modality into `[n×d_embed]` unit rows.
    pub fn encode_observations<T: Real>(
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        modality: Modality,
        obs: &[&Tensor],
        trainable: bool,
    ) -> Result<NodeId> {
        let d = modality.dim();
        let mut data = Vec::with_capacity(obs.len() * d);
        for o in obs {
            if o.numel() != d {
                return Err(Error::ShapeMismatch {
                    op: "encode",
                    left: vec![d],
                    right: o.shape().to_vec(),
                });
            }
            data.extend(o.data().iter().map(|v| T::from_f64(*v as f64)));
        }
        let x = g.constant(Tensor::from_vec(&[obs.len(), d], data)?);
        Self::mlp(
            g,
            params,
            &encoder_prefix(Source::Modality(modality)),
            x,
            trainable,
        )
    }

    pub fn encode_captions<T: Real>(
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        captions: &[&[TokenId]],
        trainable: bool,
    ) -> Result<NodeId> {
        let p = encoder_prefix(Source::Text);
        let table = params.bind(g, &format!("{p}/emb"), trainable)?;
        let mut pooled = Vec::with_capacity(captions.len());
        for cap in captions {
            if cap.is_empty() {
                return Err(Error::invalid("cannot encode an empty caption"));
            }
            let rows = g.gather_rows(table, cap)?;
            pooled.push(g.mean_rows(rows)?);
        }
        let x = g.concat_rows(&pooled)?;
        Self::mlp(g, params, &p, x, trainable)
    }

    fn mlp<T: Real>(
        g: &mut Graph<T>,
        params: &ParamStore<T>,
        prefix: &str,
        x: NodeId,
        trainable: bool,
    ) -> Result<NodeId> {
        let w1 = params.bind(g, &format!("{prefix}/w1"), trainable)?;
        let b1 = params.bind(g, &format!("{prefix}/b1"), trainable)?;
        let w2 = params.bind(g, &format!("{prefix}/w2"), trainable)?;
        let b2 = params.bind(g, &format!("{prefix}/b2"), trainable)?;
        let h = linear(g, x, w1, b1)?;
        let h = g.tanh(h)?;
        let y = linear(g, h, w2, b2)?;
        g.normalize_rows(y)
    }

    fn rows_to_embeddings(
        g: &Graph<f32>,
        id: NodeId,
        source: Source,
    ) -> Result<Vec<JointEmbedding>> {
        let v = g.value(id);
        (0..v.rows())
            .map(|i| JointEmbedding::new(Tensor::from_vec(&[v.cols()], v.row(i).to_vec())?, source))
            .collect()
    }

    pub fn encode_sample(&self, sample: &ModalitySample) -> Result<JointEmbedding> {
        Ok(self.encode_samples(std::slice::from_ref(sample))?.remove(0))
    }

    /// Batched encode; all samples must share one modality.
    pub fn encode_samples(&self, samples: &[ModalitySample]) -> Result<Vec<JointEmbedding>> {
        let Some(first) = samples.first() else {
            return Ok(Vec::new());
        };
        let m = first.modality;
        if samples.iter().any(|s| s.modality != m) {
            return Err(Error::invalid(
                "encode_samples needs a single modality per batch",
            ));
        }
        let obs: Vec<&Tensor> = samples.iter().map(|s| &s.observation).collect();
        let mut g = Graph::<f32>::new();
        let out = Self::encode_observations(&mut g, &self.params, m, &obs, false)?;
        Self::rows_to_embeddings(&g, out, Source::Modality(m))
    }

    pub fn encode_text(&self, tokens: &[TokenId]) -> Result<JointEmbedding> {
        Ok(self.encode_texts(&[tokens])?.remove(0))
    }

    pub fn encode_texts(&self, captions: &[&[TokenId]]) -> Result<Vec<JointEmbedding>> {
        if captions.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f32>::new();
        let out = Self::encode_captions(&mut g, &self.params, captions, false)?;
        Self::rows_to_embeddings(&g, out, Source::Text)
    }

    /// Encodes `scenes` rendered in `source` (captions for text).
    pub fn encode_scenes(
        &self,
        world: &World,
        scenes: &[ConceptScene],
        source: Source,
    ) -> Result<Vec<JointEmbedding>> {
        match source {
            Source::Modality(m) => {
                let samples: Vec<_> = scenes.iter().map(|s| world.render_scene(s, m)).collect();
                self.encode_samples(&samples)
            }
            Source::Text => {
                let caps: Vec<Vec<TokenId>> = scenes.iter().map(render_caption).collect();
                let refs: Vec<&[TokenId]> = caps.iter().map(Vec::as_slice).collect();
                self.encode_texts(&refs)
            }
            Source::Composed => Err(Error::invalid("no encoder for composed inputs")),
        }
    }

    /// R@1 over all 21 unordered source pairs; each entry keeps the worse direction.
    pub fn retrieval_table(
        &self,
        world: &World,
        scenes: &[ConceptScene],
    ) -> Result<Vec<(Source, Source, f64)>> {
        let sources = Source::encodable();
        let embs: Vec<Vec<JointEmbedding>> = sources
            .iter()
            .map(|&s| self.encode_scenes(world, scenes, s))
            .collect::<Result<_>>()?;
        let truth: Vec<usize> = (0..scenes.len()).collect();
        let mut out = Vec::new();
        for i in 0..sources.len() {
            for j in i + 1..sources.len() {
                let ab = retrieval_at_1(&embs[i], &embs[j], &truth)?;
                let ba = retrieval_at_1(&embs[j], &embs[i], &truth)?;
                out.push((sources[i], sources[j], ab.min(ba)));
            }
        }
        Ok(out)
    }
}

fn source_index(s: Source) -> u64 {
    Source::encodable()
        .iter()
        .position(|&x| x == s)
        .unwrap_or(7) as u64
}

/// Held-out scenes with pairwise distinct concepts, so retrieval has a unique answer.
pub fn heldout_scenes(n: usize, rng: &Rng) -> Result<Vec<ConceptScene>> {
    let total = N_OBJECTS * N_ATTRIBUTES;
    if n == 0 || n > total {
        return Err(Error::invalid(format!(
            "held-out set size must be in 1..={total}"
        )));
    }
    let mut r = rng.derive("binder/heldout", 0);
    let order = r.permutation(total);
    order[..n]
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let seed = rng.derive("binder/heldout/seed", i as u64).seed();
            ConceptScene::new(c / N_ATTRIBUTES, c % N_ATTRIBUTES, seed)
        })
        .collect()
}

/// Picks up to `batch` pair indices whose concepts are pairwise distinct.
fn distinct_batch(set: &PairSet, batch: usize, rng: &mut Rng) -> Vec<usize> {
    let mut seen = [false; N_OBJECTS * N_ATTRIBUTES];
    let mut out = Vec::with_capacity(batch);
    for i in rng.permutation(set.anchors.len()) {
        let c = set.anchors[i].scene.concept();
        if !seen[c] {
            seen[c] = true;
            out.push(i);
            if out.len() == batch {
                break;
            }
        }
    }
    out
}

pub fn train_binder(
    corpus: &BinderCorpus,
    cfg: &BinderConfig,
    rng: &Rng,
    world: &World,
) -> Result<(Binder, BinderReport)> {
    for partner in partner_order() {
        if !corpus
            .sets
            .iter()
            .any(|s| s.partner == partner && !s.anchors.is_empty())
        {
            return Err(Error::MissingModality(partner.name().into()));
        }
    }
    if cfg.batch < 2 || cfg.steps == 0 {
        return Err(Error::invalid(
            "binder training needs batch >= 2 and steps >= 1",
        ));
    }
    let mut binder = Binder::init(cfg, rng)?;
    let mut adam = AdamState::default();
    let mut audit = PairAudit::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batch_rng = rng.derive("binder/batches", 0);
    let order = partner_order();

    for step in 0..cfg.steps {
        let partner = order[step % order.len()];
        let set = corpus
            .sets
            .iter()
            .find(|s| s.partner == partner)
            .expect("checked above");
        let idx = distinct_batch(set, cfg.batch, &mut batch_rng);

        let mut g = Graph::<f32>::new();
        let anchors: Vec<&Tensor> = idx.iter().map(|&i| &set.anchors[i].observation).collect();
        let a =
            Binder::encode_observations(&mut g, &binder.params, Modality::ANCHOR, &anchors, true)?;
        let b = match partner {
            Source::Text => {
                let caps: Vec<&[TokenId]> = idx
                    .iter()
                    .map(|&i| match &set.partners[i] {
                        PartnerItem::Caption(c) => Ok(c.as_slice()),
                        PartnerItem::Sample(_) => {
                            Err(Error::invalid("text pair set holds a sensor sample"))
                        }
                    })
                    .collect::<Result<_>>()?;
                Binder::encode_captions(&mut g, &binder.params, &caps, true)?
            }
            Source::Modality(m) => {
                let obs: Vec<&Tensor> = idx
                    .iter()
                    .map(|&i| match &set.partners[i] {
                        PartnerItem::Sample(s) if s.modality == m => Ok(&s.observation),
                        _ => Err(Error::invalid(format!("{m} pair set holds a foreign item"))),
                    })
                    .collect::<Result<_>>()?;
                Binder::encode_observations(&mut g, &binder.params, m, &obs, true)?
            }
            Source::Composed => unreachable!(),
        };
        audit.record(Source::Modality(Modality::ANCHOR), partner, idx.len());
        let loss = info_nce(&mut g, a, b, cfg.tau)?;
        losses.push(g.value(loss).item() as f64);

        let grads = g.backward(loss)?;
        let named = g.named_gradients(&grads);
        adam.step(&mut binder.params, &named, cfg.lr)?;
    }

    let scenes = heldout_scenes(cfg.heldout_scenes, rng)?;
    let retrieval = binder.retrieval_table(world, &scenes)?;
    Ok((
        binder,
        BinderReport {
            losses,
            audit,
            retrieval,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::DEFAULT_SIGMA;

    fn unit(v: &[f32]) -> JointEmbedding {
        JointEmbedding::new(
            Tensor::from_vec(&[v.len()], v.to_vec()).unwrap(),
            Source::Text,
        )
        .unwrap()
    }

    #[test]
    fn info_nce_closed_forms() {
        let e = unit(&[1.0, 0.0]);
        assert!(
            info_nce_value(&[e.clone()], &[e.clone()], 0.07)
                .unwrap()
                .abs()
                < 1e-7
        );

        let same: Vec<_> = (0..4).map(|_| e.clone()).collect();
        assert!((info_nce_value(&same, &same, 0.07).unwrap() - 4f64.ln()).abs() < 1e-6);

        let pair = [unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((info_nce_value(&pair, &pair, 1.0).unwrap() - expect).abs() < 1e-6);
        assert!((expect - 0.3133).abs() < 1e-4);

        assert!(info_nce_value(&pair, &pair, 0.0).is_err());
        assert!(info_nce_value(&[], &[], 1.0).is_err());
    }

    #[test]
    fn retrieval_definition() {
        let mut rng = Rng::new(1);
        let vecs: Vec<_> = (0..5)
            .map(|_| {
                let t = Tensor::<f32>::randn(&[8], 1.0, &mut rng);
                let n = t.norm() as f32;
                unit(&t.data().iter().map(|v| v / n).collect::<Vec<_>>())
            })
            .collect();
        let id: Vec<usize> = (0..5).collect();
        assert_eq!(retrieval_at_1(&vecs, &vecs, &id).unwrap(), 1.0);
        let shifted: Vec<usize> = (0..5).map(|i| (i + 1) % 5).collect();
        assert_eq!(retrieval_at_1(&vecs, &vecs, &shifted).unwrap(), 0.0);
        assert!(retrieval_at_1(&vecs, &vecs[..4], &id).is_err());
    }

    #[test]
    fn random_retrieval_is_near_chance() {
        let mut rng = Rng::new(2);
        let mut total = 0.0;
        for _ in 0..20 {
            let mk = |rng: &mut Rng| {
                let t = Tensor::<f32>::randn(&[32], 1.0, rng);
                let n = t.norm() as f32;
                unit(&t.data().iter().map(|v| v / n).collect::<Vec<_>>())
            };
            let q: Vec<_> = (0..64).map(|_| mk(&mut rng)).collect();
            let gl: Vec<_> = (0..64).map(|_| mk(&mut rng)).collect();
            let truth = rng.permutation(64);
            total += retrieval_at_1(&q, &gl, &truth).unwrap();
        }
        assert!(total / 20.0 < 0.1);
    }

    #[test]
    fn untrained_encoders_are_unit_norm_and_deterministic() {
        let w = World::new(1, DEFAULT_SIGMA);
        let b = Binder::init(&BinderConfig::default(), &Rng::new(3)).unwrap();
        let mut rng = Rng::new(4);
        for i in 0..100 {
            let s = sample_scene(&mut rng);
            let m = Modality::ALL[i % 6];
            let sample = w.render_scene(&s, m);
            let e = b.encode_sample(&sample).unwrap();
            assert!((e.vector.norm() - 1.0).abs() < 1e-5);
            let again = b.encode_sample(&sample).unwrap();
            assert_eq!(e.vector.to_le_bytes(), again.vector.to_le_bytes());
        }
    }

    #[test]
    fn wrong_dimension_rejected() {
        let b = Binder::init(&BinderConfig::default(), &Rng::new(3)).unwrap();
        let s = ModalitySample {
            modality: Modality::Aud,
            observation: Tensor::zeros(&[10]),
            scene: ConceptScene::new(0, 0, 0).unwrap(),
        };
        assert!(b.encode_sample(&s).is_err());
    }

    #[test]
    fn missing_modality_is_named() {
        let w = World::new(1, DEFAULT_SIGMA);
        let corpus = BinderCorpus::generate(&w, 8, &Rng::new(1))
            .unwrap()
            .without(Source::Modality(Modality::Thm));
        let err = train_binder(&corpus, &BinderConfig::default(), &Rng::new(1), &w).unwrap_err();
        assert!(err.to_string().contains("thm"), "{err}");
    }

    #[test]
    fn heldout_concepts_distinct() {
        let s = heldout_scenes(64, &Rng::new(5)).unwrap();
        let mut c: Vec<_> = s.iter().map(|x| x.concept()).collect();
        c.sort();
        c.dedup();
        assert_eq!(c.len(), 64);
    }

    #[test]
    fn short_training_only_forms_anchor_pairs() {
        let w = World::new(1, DEFAULT_SIGMA);
        let corpus = BinderCorpus::generate(&w, 64, &Rng::new(1)).unwrap();
        let cfg = BinderConfig {
            steps: 12,
            batch: 8,
            heldout_scenes: 16,
            ..BinderConfig::default()
        };
        let (a, ra) = train_binder(&corpus, &cfg, &Rng::new(2), &w).unwrap();
        let (b, rb) = train_binder(&corpus, &cfg, &Rng::new(2), &w).unwrap();
        assert_eq!(ra.audit.non_anchor_pairs(), 0);
        assert_eq!(ra.audit.total(), 12 * 8);
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ra.retrieval.len(), 21);
        // every encoder moved
        let fresh = Binder::init(&cfg, &Rng::new(2)).unwrap();
        for s in Source::encodable() {
            let n = format!("binder/{s}/w1");
            assert_ne!(
                fresh.params().get(&n).unwrap(),
                a.params().get(&n).unwrap(),
                "{n}"
            );
        }
    }
}
