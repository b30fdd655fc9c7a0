//! Grounded conversation datasets and their plain-text file format.
//!
//! ```text
//! SCENE obj=3 attr=1 seed=1234
//! MOD img 1.23456791e-1 ...
//! TURN H: what is shown ? | A: a blue car .
//!
//! ```
//! One `SCENE` and one `MOD` line per grounding sample (two for composed
//! records), then one `TURN` line per turn, then a blank line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::world::conversation::{
    make_composed_conversation, make_conversation, Conversation, Turn, TEMPLATE_COUNT,
};
use crate::world::scene::{sample_scene, ConceptScene, Modality, ModalitySample, World};
use crate::world::vocab::{detokenize, Vocab, UNK};

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub grounding: Vec<ModalitySample>,
    pub conversation: Conversation,
}

impl Record {
    pub fn scenes(&self) -> impl Iterator<Item = &ConceptScene> {
        self.grounding.iter().map(|s| &s.scene)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub modality: Modality,
    pub count: usize,
    /// Share of records grounded in two composed scenes.
    pub composition_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            modality: Modality::ANCHOR,
            count: 4096,
            composition_fraction: 0.25,
        }
    }
}

/// Record `index`, derived only from `(root, index)`.
pub fn generate_record(
    world: &World,
    cfg: &DatasetConfig,
    root: &Rng,
    index: u64,
) -> Result<Record> {
    let mut rng = root.derive("record", index);
    let first = sample_scene(&mut rng);
    if rng.bernoulli(cfg.composition_fraction) {
        let mut second = sample_scene(&mut rng);
        while second.object == first.object {
            second = sample_scene(&mut rng);
        }
        let conversation = make_composed_conversation(&first, &second)?;
        Ok(Record {
            grounding: vec![
                world.render_scene(&first, cfg.modality),
                world.render_scene(&second, cfg.modality),
            ],
            conversation,
        })
    } else {
        let template = rng.below(TEMPLATE_COUNT);
        let conversation = make_conversation(&first, template, &mut rng)?;
        Ok(Record {
            grounding: vec![world.render_scene(&first, cfg.modality)],
            conversation,
        })
    }
}

pub fn generate(world: &World, cfg: &DatasetConfig, root: &Rng) -> Result<Vec<Record>> {
    if cfg.count == 0 {
        return Err(Error::invalid("dataset record count must be positive"));
    }
    (0..cfg.count as u64)
        .map(|k| generate_record(world, cfg, root, k))
        .collect()
}

pub fn render(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        for s in &r.grounding {
            let sc = &s.scene;
            writeln!(
                out,
                "SCENE obj={} attr={} seed={}",
                sc.object, sc.attribute, sc.seed
            )
            .unwrap();
        }
        for s in &r.grounding {
            write!(out, "MOD {}", s.modality).unwrap();
            for v in s.observation.data() {
                write!(out, " {v:.8e}").unwrap();
            }
            out.push('\n');
        }
        for t in &r.conversation.turns {
            writeln!(
                out,
                "TURN H: {} | A: {}",
                detokenize(&t.instruction),
                detokenize(&t.response)
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, render(records))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    parse(&fs::read_to_string(path)?)
}

#[derive(Default)]
struct Pending {
    scenes: Vec<ConceptScene>,
    mods: Vec<(Modality, Tensor)>,
    turns: Vec<Turn>,
    first_line: usize,
}

impl Pending {
    fn is_empty(&self) -> bool {
        self.scenes.is_empty() && self.mods.is_empty() && self.turns.is_empty()
    }

    fn finish(self) -> Result<Record> {
        let line = self.first_line;
        if self.scenes.is_empty() || self.scenes.len() != self.mods.len() {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "{} SCENE lines but {} MOD lines",
                    self.scenes.len(),
                    self.mods.len()
                ),
            });
        }
        if self.turns.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "record has no TURN lines".into(),
            });
        }
        let grounding = self
            .scenes
            .into_iter()
            .zip(self.mods)
            .map(|(scene, (modality, observation))| ModalitySample {
                modality,
                observation,
                scene,
            })
            .collect();
        Ok(Record {
            grounding,
            conversation: Conversation { turns: self.turns },
        })
    }
}

fn field<'a>(line: usize, part: Option<&'a str>, key: &str) -> Result<&'a str> {
    part.and_then(|p| p.strip_prefix(key))
        .ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `{key}`"),
        })
}

fn words(line: usize, text: &str) -> Result<Vec<usize>> {
    let ids = Vocab::get().tokenize(text);
    if ids.contains(&UNK) || ids.is_empty() {
        return Err(Error::Parse {
            line,
            msg: format!("unknown or empty token sequence `{text}`"),
        });
    }
    Ok(ids)
}

pub fn parse(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    let mut cur = Pending::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur).finish()?);
            }
            continue;
        }
        if cur.is_empty() {
            cur.first_line = line;
        }
        let bad = |msg: String| Error::Parse { line, msg };
        if let Some(rest) = raw.strip_prefix("SCENE ") {
            if !cur.mods.is_empty() {
                return Err(bad("SCENE after MOD".into()));
            }
            let mut parts = rest.split(' ');
            let obj = field(line, parts.next(), "obj=")?
                .parse()
                .map_err(|_| bad("bad obj".into()))?;
            let attr = field(line, parts.next(), "attr=")?
                .parse()
                .map_err(|_| bad("bad attr".into()))?;
            let seed = field(line, parts.next(), "seed=")?
                .parse()
                .map_err(|_| bad("bad seed".into()))?;
            cur.scenes
                .push(ConceptScene::new(obj, attr, seed).map_err(|e| bad(e.to_string()))?);
        } else if let Some(rest) = raw.strip_prefix("MOD ") {
            let mut parts = rest.split(' ');
            let modality: Modality = parts.next().unwrap_or("").parse()?;
            let vals = parts
                .map(|p| {
                    p.parse::<f32>()
                        .map_err(|_| bad(format!("bad float `{p}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != modality.dim() {
                return Err(bad(format!(
                    "{modality} expects {} values, got {}",
                    modality.dim(),
                    vals.len()
                )));
            }
            let t = Tensor::from_vec(&[vals.len()], vals)?;
            t.ensure_finite("dataset parse")?;
            cur.mods.push((modality, t));
        } else if let Some(rest) = raw.strip_prefix("TURN H: ") {
            let (h, a) = rest
                .split_once(" | A: ")
                .ok_or_else(|| bad("TURN without ` | A: `".into()))?;
            cur.turns.push(Turn {
                instruction: words(line, h)?,
                response: words(line, a)?,
            });
        } else {
            return Err(bad(format!("unrecognised line `{raw}`")));
        }
    }
    if !cur.is_empty() {
        out.push(cur.finish()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::DEFAULT_SIGMA;
    use proptest::{prop_assert_eq, proptest};

    fn small(count: usize) -> DatasetConfig {
        DatasetConfig {
            count,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn zero_count_rejected() {
        let w = World::new(1, DEFAULT_SIGMA);
        assert!(generate(&w, &small(0), &Rng::new(1)).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let w = World::new(1, DEFAULT_SIGMA);
        let a = render(&generate(&w, &small(40), &Rng::new(2)).unwrap());
        let b = render(&generate(&w, &small(40), &Rng::new(2)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn records_regenerate_in_isolation() {
        let w = World::new(1, DEFAULT_SIGMA);
        let root = Rng::new(3);
        let all = generate(&w, &small(64), &root).unwrap();
        for k in [0usize, 17, 63] {
            assert_eq!(
                generate_record(&w, &small(64), &root, k as u64).unwrap(),
                all[k]
            );
        }
    }

    #[test]
    fn parse_inverts_render() {
        let w = World::new(4, DEFAULT_SIGMA);
        let recs = generate(&w, &small(50), &Rng::new(5)).unwrap();
        assert!(recs.iter().any(|r| r.grounding.len() == 2));
        let text = render(&recs);
        assert_eq!(parse(&text).unwrap(), recs);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let w = World::new(4, DEFAULT_SIGMA);
        let recs = generate(&w, &small(5), &Rng::new(5)).unwrap();
        write(&path, &recs).unwrap();
        assert_eq!(read(&path).unwrap(), recs);
        assert!(write(&dir.path().join("missing/d.txt"), &recs).is_err());
    }

    #[test]
    fn malformed_input_rejected() {
        assert!(
            parse("SCENE obj=3 attr=1 seed=1\nTURN H: what is shown ? | A: a red box .\n").is_err()
        );
        assert!(parse("SCENE obj=30 attr=1 seed=1\n").is_err());
        let mut line = String::from("SCENE obj=3 attr=1 seed=1\nMOD aud");
        for _ in 0..23 {
            line.push_str(" 0.5");
        }
        line.push_str("\nTURN H: what is shown ? | A: a red box .\n");
        assert!(parse(&line).is_err());
        let ok = line.replace("MOD aud", "MOD aud 0.5");
        assert_eq!(parse(&ok).unwrap().len(), 1);
        assert!(parse(&ok.replace("red box", "purple box")).is_err());
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(vals in proptest::collection::vec(-1e6f32..1e6f32, 12)) {
            let scene = ConceptScene::new(1, 2, 3).unwrap();
            let rec = Record {
                grounding: vec![ModalitySample {
                    modality: Modality::Imu,
                    observation: Tensor::from_vec(&[12], vals).unwrap(),
                    scene,
                }],
                conversation: make_conversation(&scene, 0, &mut Rng::new(0)).unwrap(),
            };
            let back = parse(&render(std::slice::from_ref(&rec))).unwrap();
            prop_assert_eq!(back[0].grounding[0].observation.to_le_bytes(), rec.grounding[0].observation.to_le_bytes());
        }
    }
}
