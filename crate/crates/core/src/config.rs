//! Flat `key=value` configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::params::hex;
use crate::world::Modality;

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render_value(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64, usize, bool, String, Modality);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse::<f64>().ok().filter(|v| v.is_finite())
    }
    fn render_value(&self) -> String {
        format!("{self:?}")
    }
}

macro_rules! config {
    ($($key:ident: $t:ty = $default:expr, $doc:literal;)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $(#[doc = $doc] pub $key: $t,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $($key: $default,)* }
            }
        }

        impl Config {
            /// `(key, description)` for every recognised key.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[$((stringify!($key), $doc),)*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$t>::parse_value(value).ok_or_else(|| Error::Config {
                            key: key.to_string(),
                            msg: format!("cannot parse `{value}` as {}", stringify!($t)),
                        })?;
                    })*
                    _ => return Err(Error::Config { key: key.to_string(), msg: "unknown key".into() }),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => Some(self.$key.render_value()),)*
                    _ => None,
                }
            }
        }
    };
}

config! {
    seed: u64 = 0, "root seed; every random stream derives from it";
    noise_sigma: f64 = 0.05, "observation noise standard deviation";
    data_count: usize = 4096, "bridge training conversations";
    data_modality: Modality = Modality::Img, "grounding modality of the bridge training data";
    composition_fraction: f64 = 0.25, "share of training records grounded in two composed scenes";
    d_embed: usize = 32, "joint embedding width";
    binder_hidden: usize = 64, "encoder hidden width";
    binder_lr: f64 = 1e-3, "binder Adam learning rate";
    binder_steps: usize = 300, "binder optimisation steps";
    binder_batch: usize = 32, "binder batch size";
    binder_tau: f64 = 0.07, "InfoNCE temperature";
    binder_pairs: usize = 1024, "anchor pairs per pair type";
    binder_heldout: usize = 64, "held-out scenes for retrieval";
    d_model: usize = 64, "language model width";
    n_layers: usize = 4, "decoder blocks";
    n_heads: usize = 4, "attention heads";
    d_ff: usize = 256, "feed-forward width";
    max_seq: usize = 64, "maximum sequence length";
    lm_lr: f64 = 3e-4, "pre-training learning rate";
    lm_steps: usize = 2000, "pre-training steps";
    lm_batch: usize = 32, "pre-training batch size";
    lm_corpus: usize = 20000, "pre-training sentences";
    lm_val: usize = 1000, "validation sentences";
    lm_collapse: f64 = 0.5, "chance a grounded pre-training sentence has its grounding packed into one input row";
    lr: f64 = 5e-4, "bridge peak learning rate, decays linearly to 0";
    epochs: usize = 2, "bridge training epochs";
    batch: usize = 8, "bridge batch size (gradients averaged)";
    lora_rank: usize = 4, "LoRA rank";
    lora_alpha: f64 = 8.0, "LoRA scale numerator";
    embed_jitter: f64 = 0.1, "std of gaussian jitter on grounding embeddings during bridge training";
    prefix_vectors: usize = 1, "soft prefix vectors per embedding (only 1 is supported)";
    eval_scenes: usize = 200, "scenes per zero-shot evaluation";
    eval_pairs: usize = 200, "scene pairs per composition evaluation";
    compose_a: Modality = Modality::Vid, "modality of the first scene in composition evaluation";
    compose_b: Modality = Modality::Aud, "modality of the second scene in composition evaluation";
    renormalize: bool = true, "renormalise composed embeddings";
    out_dir: String = "run".to_string(), "directory for datasets, checkpoints and reports";
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(bad(k, "set twice"));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| bad(assignment, "override must look like key=value"))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key, sorted, one `key=value` per line.
    pub fn render(&self) -> String {
        let mut keys: Vec<&str> = Self::KEYS.iter().map(|k| k.0).collect();
        keys.sort_unstable();
        let mut out = String::new();
        for k in keys {
            writeln!(out, "{k}={}", self.get(k).expect("listed key")).unwrap();
        }
        out
    }

    /// SHA-256 over the sorted rendered lines, leaving out `out_dir` so the
    /// same experiment fingerprints the same wherever it is written.
    pub fn fingerprint(&self) -> String {
        let lines: String = self
            .render()
            .lines()
            .filter(|l| !l.starts_with("out_dir="))
            .map(|l| format!("{l}\n"))
            .collect();
        hex(&Sha256::digest(lines.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data_count", self.data_count),
            ("d_embed", self.d_embed),
            ("binder_hidden", self.binder_hidden),
            ("binder_steps", self.binder_steps),
            ("binder_pairs", self.binder_pairs),
            ("binder_heldout", self.binder_heldout),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
            ("lm_steps", self.lm_steps),
            ("lm_batch", self.lm_batch),
            ("lm_corpus", self.lm_corpus),
            ("lm_val", self.lm_val),
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("lora_rank", self.lora_rank),
            ("eval_scenes", self.eval_scenes),
            ("eval_pairs", self.eval_pairs),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(bad(k, "must be positive"));
            }
        }
        if self.binder_batch < 2 {
            return Err(bad("binder_batch", "must be at least 2"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(bad(
                "n_heads",
                format!("must divide d_model={}", self.d_model),
            ));
        }
        if self.prefix_vectors != 1 {
            return Err(bad(
                "prefix_vectors",
                "exactly one soft prefix vector is supported",
            ));
        }
        for (k, v) in [
            ("binder_lr", self.binder_lr),
            ("binder_tau", self.binder_tau),
            ("lm_lr", self.lm_lr),
            ("lora_alpha", self.lora_alpha),
        ] {
            if v <= 0.0 {
                return Err(bad(k, "must be positive"));
            }
        }
        if self.embed_jitter < 0.0 {
            return Err(bad("embed_jitter", "must be non-negative"));
        }
        if self.lr < 0.0 || self.noise_sigma < 0.0 {
            return Err(bad("lr", "rates and noise must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lm_collapse) {
            return Err(bad("lm_collapse", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.composition_fraction) {
            return Err(bad("composition_fraction", "must lie in [0, 1]"));
        }
        if self.out_dir.is_empty() {
            return Err(bad("out_dir", "must not be empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.render()).unwrap(), c);
        assert_eq!(c.lr, 5e-4);
        assert_eq!(c.epochs, 2);
        assert_eq!(c.prefix_vectors, 1);
    }

    #[test]
    fn comments_and_overrides() {
        let c = Config::parse("# header\nseed = 7 # trailing\n\nlr=1e-3\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lr, 1e-3);
        let mut d = c.clone();
        d.apply_override("data_modality=aud").unwrap();
        assert_eq!(d.data_modality, Modality::Aud);
        assert_ne!(c.fingerprint(), d.fingerprint());
    }

    #[test]
    fn errors_name_the_key() {
        let e = Config::parse("lr=abc\n").unwrap_err();
        assert!(e.to_string().contains("`lr`"), "{e}");
        let e = Config::parse("bogus=1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        assert!(Config::parse("seed=1\nseed=2\n").is_err());
        assert!(Config::parse("prefix_vectors=2\n").is_err());
        assert!(Config::parse("n_heads=3\n").is_err());
        assert!(Config::parse("just words\n").is_err());
        assert!(Config::parse("lr=inf\n").is_err());
    }

    #[test]
    fn fingerprint_ignores_order_and_comments() {
        let a = Config::parse("seed=3\nlr=0.001\n").unwrap();
        let b = Config::parse("# x\nlr=0.001\nseed=3\n").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = Config::parse("seed=3\nlr=0.001\nout_dir=elsewhere\n").unwrap();
        assert_eq!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn every_key_round_trips_through_set() {
        let c = Config::default();
        for (k, _) in Config::KEYS {
            let mut d = Config::default();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }
}
