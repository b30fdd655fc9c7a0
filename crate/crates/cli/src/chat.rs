//! Line-oriented chat over the trained pipeline.

use std::io::{BufRead, Write};

use graft_core::composer::compose_with;
use graft_core::eval::MAX_ANSWER;
use graft_core::numerics::Rng;
use graft_core::pipeline::{self, LoadedBridge};
use graft_core::world::vocab::{attribute_word, detokenize, object_word, N_ATTRIBUTES, N_OBJECTS};
use graft_core::{
    Binder, Bridge, ConceptScene, Config, Error, JointEmbedding, LanguageModel, Modality, Result,
    World,
};

const USAGE: &str = "commands: /show <modality> <object> <attribute> | /add <modality> <object> <attribute> | /clear | /seed <n> | <question>";

/// Every trained component, loaded with lineage checks.
pub struct Models {
    pub world: World,
    pub binder: Binder,
    pub lm: LanguageModel,
    pub bridge: Bridge,
}

impl Models {
    pub fn load(cfg: &Config) -> Result<Self> {
        let binder = pipeline::load_binder(cfg)?;
        let lm = pipeline::load_lm(cfg)?;
        let LoadedBridge { bridge, .. } = pipeline::load_bridge(cfg, &binder, &lm)?;
        Ok(Models {
            world: pipeline::world(cfg),
            binder,
            lm,
            bridge,
        })
    }

    /// Renders and encodes one scene given as text fields.
    pub fn encode(
        &self,
        modality: &str,
        object: &str,
        attribute: &str,
        rng: &mut Rng,
    ) -> Result<JointEmbedding> {
        let m: Modality = modality.parse()?;
        let o = lookup(object, N_OBJECTS, object_word, "object")?;
        let a = lookup(attribute, N_ATTRIBUTES, attribute_word, "attribute")?;
        let scene = ConceptScene::new(o, a, rng.seed())?;
        self.binder
            .encode_sample(&self.world.render(&scene, m, rng))
    }
}

/// An id, or a word from the table.
fn lookup(field: &str, n: usize, word: fn(usize) -> &'static str, what: &str) -> Result<usize> {
    if let Ok(i) = field.parse::<usize>() {
        return if i < n {
            Ok(i)
        } else {
            Err(Error::InvalidArgument(format!(
                "{what} id {i} out of range 0..{n}"
            )))
        };
    }
    (0..n)
        .find(|&i| word(i) == field)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown {what} `{field}`")))
}

/// Conversation state: the grounding parts shown so far and the render seed.
pub struct ChatSession<'a> {
    models: &'a Models,
    renormalize: bool,
    seed: u64,
    renders: u64,
    parts: Vec<JointEmbedding>,
}

impl<'a> ChatSession<'a> {
    pub fn new(models: &'a Models, seed: u64, renormalize: bool) -> Self {
        ChatSession {
            models,
            renormalize,
            seed,
            renders: 0,
            parts: Vec::new(),
        }
    }

    /// The current grounding, if any.
    pub fn prefix(&self) -> Result<Option<JointEmbedding>> {
        match self.parts.len() {
            0 => Ok(None),
            1 => Ok(Some(self.parts[0].clone())),
            n => compose_with(&self.parts, &vec![1.0; n], self.renormalize).map(Some),
        }
    }

    fn render(&mut self, args: &[&str]) -> Result<JointEmbedding> {
        let [m, o, a] = args else {
            return Err(Error::InvalidArgument(USAGE.into()));
        };
        let mut rng = Rng::new(self.seed).derive("chat/render", self.renders);
        let h = self.models.encode(m, o, a, &mut rng)?;
        self.renders += 1;
        Ok(h)
    }

    /// Handles one input line and returns the reply. Malformed commands
    /// produce a usage reply; the session goes on.
    pub fn handle(&mut self, line: &str) -> Result<String> {
        let line = line.trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        let reply = match words.first().copied() {
            None => return Ok(String::new()),
            Some("/show") => match self.render(&words[1..]) {
                Ok(h) => {
                    self.parts = vec![h];
                    format!("showing {}", words[1..].join(" "))
                }
                Err(e) => format!("{e}\n{USAGE}"),
            },
            Some("/add") => match self.render(&words[1..]) {
                Ok(h) => {
                    self.parts.push(h);
                    format!(
                        "added {} ({} parts)",
                        words[1..].join(" "),
                        self.parts.len()
                    )
                }
                Err(e) => format!("{e}\n{USAGE}"),
            },
            Some("/clear") if words.len() == 1 => {
                self.parts.clear();
                "cleared".into()
            }
            Some("/seed") => match words.get(1).and_then(|s| s.parse::<u64>().ok()) {
                Some(n) if words.len() == 2 => {
                    self.seed = n;
                    self.renders = 0;
                    format!("seed {n}")
                }
                _ => USAGE.into(),
            },
            Some(w) if w.starts_with('/') => USAGE.into(),
            Some(_) => {
                let prefix = self.prefix()?;
                let answer = self.models.bridge.answer(
                    &self.models.lm,
                    prefix.as_ref(),
                    line,
                    MAX_ANSWER,
                )?;
                detokenize(&answer)
            }
        };
        Ok(reply)
    }

    /// Reads lines until end of input, writing one reply per non-empty line.
    pub fn run(&mut self, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
        let mut line = String::new();
        loop {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Ok(());
            }
            let reply = self.handle(&line)?;
            if !reply.is_empty() {
                writeln!(out, "{reply}")?;
            }
        }
    }
}
