//! Configuration-driven stages. Each stage reads its inputs from and writes its
//! outputs to `out_dir`, so running them one by one or through [`run_all`]
//! gives the same files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::binder::{
    heldout_scenes, train_binder, Binder, BinderConfig, BinderCorpus, BinderReport,
};
use crate::bridge::{train_bridge, Bridge, BridgeConfig, BridgeReport, TrainingManifest};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{full_report, EvalContext, EvalReport, ReportInputs};
use crate::lm::{
    perplexity, pretrain_lm, pretraining_corpus, LanguageModel, LmReport, LmShape, LmTrainConfig,
};
use crate::numerics::params::hex;
use crate::numerics::Rng;
use crate::world::dataset::{self, DatasetConfig, Record};
use crate::world::World;

pub const DATA_FILE: &str = "data.tsv";
pub const BINDER_FILE: &str = "binder.ckpt";
pub const LM_FILE: &str = "lm.ckpt";
pub const BRIDGE_FILE: &str = "bridge.ckpt";
pub const BINDER_LOG: &str = "binder_loss.tsv";
pub const LM_LOG: &str = "lm_loss.tsv";
pub const BRIDGE_LOG: &str = "bridge_log.tsv";
pub const REPORT_FILE: &str = "report.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Independent random streams, all derived from the configured seed.
pub struct Streams {
    root: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            root: Rng::new(seed),
        }
    }

    pub fn data(&self) -> Rng {
        self.root.derive("data", 0)
    }
    pub fn binder(&self) -> Rng {
        self.root.derive("binder", 0)
    }
    pub fn binder_corpus(&self) -> Rng {
        self.root.derive("binder/corpus", 0)
    }
    pub fn lm(&self) -> Rng {
        self.root.derive("lm", 0)
    }
    pub fn lm_corpus(&self) -> Rng {
        self.root.derive("lm/corpus", 0)
    }
    pub fn lm_validation(&self) -> Rng {
        self.root.derive("lm/validation", 0)
    }
    pub fn bridge(&self) -> Rng {
        self.root.derive("bridge", 0)
    }
    pub fn eval(&self) -> Rng {
        self.root.derive("eval", 0)
    }
}

pub fn world(cfg: &Config) -> World {
    World::new(cfg.seed, cfg.noise_sigma)
}

pub fn out_path(cfg: &Config, file: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(file)
}

fn ensure_dir(cfg: &Config) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

pub fn lm_shape(cfg: &Config) -> LmShape {
    LmShape {
        d_model: cfg.d_model,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_ff: cfg.d_ff,
        max_seq: cfg.max_seq,
    }
}

pub fn binder_config(cfg: &Config) -> BinderConfig {
    BinderConfig {
        d_embed: cfg.d_embed,
        hidden: cfg.binder_hidden,
        lr: cfg.binder_lr,
        steps: cfg.binder_steps,
        batch: cfg.binder_batch,
        tau: cfg.binder_tau,
        pairs_per_type: cfg.binder_pairs,
        heldout_scenes: cfg.binder_heldout,
    }
}

pub fn bridge_config(cfg: &Config) -> BridgeConfig {
    BridgeConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch: cfg.batch,
        rank: cfg.lora_rank,
        alpha: cfg.lora_alpha,
        jitter: cfg.embed_jitter,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn base_meta(cfg: &Config, kind: &str, checksum: String) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("kind".into(), kind.into());
    m.insert("checksum".into(), checksum);
    m.insert("config_fingerprint".into(), cfg.fingerprint());
    m.insert("seed".into(), cfg.seed.to_string());
    m
}

fn loss_tsv(losses: &[f64]) -> String {
    let mut out = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i}\t{l:.6}\n"));
    }
    out
}

/// Loads a checkpoint and checks its kind and that its tensors still match the
/// recorded checksum.
pub fn load_checked(path: &Path, kind: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing {kind} checkpoint {}",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    let found = ck.meta("kind")?;
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {found} checkpoint, expected {kind}",
            path.display()
        )));
    }
    let recorded = ck.meta("checksum")?;
    let actual = ck.tensors.checksum();
    if recorded != actual {
        return Err(Error::invariant(format!(
            "{} tensors changed since they were written (checksum {actual}, recorded {recorded})",
            path.display()
        )));
    }
    Ok(ck)
}

pub fn gen_data(cfg: &Config) -> Result<Vec<Record>> {
    ensure_dir(cfg)?;
    let dcfg = DatasetConfig {
        modality: cfg.data_modality,
        count: cfg.data_count,
        composition_fraction: cfg.composition_fraction,
    };
    let records = dataset::generate(&world(cfg), &dcfg, &Streams::new(cfg.seed).data())?;
    dataset::write(&out_path(cfg, DATA_FILE), &records)?;
    Ok(records)
}

pub fn binder_stage(cfg: &Config) -> Result<(Binder, BinderReport)> {
    ensure_dir(cfg)?;
    let s = Streams::new(cfg.seed);
    let w = world(cfg);
    let corpus = BinderCorpus::generate(&w, cfg.binder_pairs, &s.binder_corpus())?;
    let (binder, report) = train_binder(&corpus, &binder_config(cfg), &s.binder(), &w)?;
    let mut meta = base_meta(cfg, "binder", binder.checksum());
    meta.insert(
        "non_anchor_pairs".into(),
        report.audit.non_anchor_pairs().to_string(),
    );
    meta.insert("pairs_seen".into(), report.audit.total().to_string());
    Checkpoint::new(binder.params().clone(), meta).save(&out_path(cfg, BINDER_FILE))?;
    fs::write(out_path(cfg, BINDER_LOG), loss_tsv(&report.losses))?;
    Ok((binder, report))
}

pub fn lm_stage(cfg: &Config) -> Result<(LanguageModel, LmReport)> {
    ensure_dir(cfg)?;
    let s = Streams::new(cfg.seed);
    let corpus = pretraining_corpus(cfg.lm_corpus, &s.lm_corpus())?;
    let val = pretraining_corpus(cfg.lm_val, &s.lm_validation())?;
    let tcfg = LmTrainConfig {
        lr: cfg.lm_lr,
        steps: cfg.lm_steps,
        batch: cfg.lm_batch,
        collapse: cfg.lm_collapse,
    };
    let (lm, report) = pretrain_lm(&corpus, &val, lm_shape(cfg), &tcfg, &s.lm())?;
    let mut meta = base_meta(cfg, "lm", lm.checksum());
    meta.insert("n_heads".into(), cfg.n_heads.to_string());
    meta.insert(
        "val_perplexity".into(),
        format!("{:.6}", report.val_perplexity),
    );
    meta.insert(
        "initial_perplexity".into(),
        format!("{:.6}", report.initial_perplexity),
    );
    Checkpoint::new(lm.params().clone(), meta).save(&out_path(cfg, LM_FILE))?;
    fs::write(out_path(cfg, LM_LOG), loss_tsv(&report.losses))?;
    Ok((lm, report))
}

pub fn load_binder(cfg: &Config) -> Result<Binder> {
    Binder::from_params(load_checked(&out_path(cfg, BINDER_FILE), "binder")?.tensors)
}

pub fn load_lm(cfg: &Config) -> Result<LanguageModel> {
    let ck = load_checked(&out_path(cfg, LM_FILE), "lm")?;
    let heads = ck
        .meta("n_heads")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad n_heads".into()))?;
    LanguageModel::from_params(ck.tensors, heads)
}

pub struct LoadedBridge {
    pub bridge: Bridge,
    pub manifest: TrainingManifest,
}

/// Loads the bridge and refuses it unless it was trained on exactly these
/// binder and language model weights.
pub fn load_bridge(cfg: &Config, binder: &Binder, lm: &LanguageModel) -> Result<LoadedBridge> {
    let ck = load_checked(&out_path(cfg, BRIDGE_FILE), "bridge")?;
    for (key, actual) in [
        ("parent_binder", binder.checksum()),
        ("parent_lm", lm.checksum()),
    ] {
        let recorded = ck.meta(key)?;
        if recorded != actual {
            return Err(Error::invariant(format!(
                "bridge checkpoint was trained against {key} {recorded}, but the loaded one is {actual}"
            )));
        }
    }
    let alpha = ck
        .meta("lora_alpha")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad lora_alpha".into()))?;
    let manifest = TrainingManifest::read_metadata(&ck.metadata)?;
    let bridge = Bridge::from_params(ck.tensors, alpha, &lm.shape())?;
    Ok(LoadedBridge { bridge, manifest })
}

pub fn bridge_stage(cfg: &Config) -> Result<(Bridge, BridgeReport)> {
    let data_path = out_path(cfg, DATA_FILE);
    if !data_path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing dataset {}",
            data_path.display()
        )));
    }
    let data_bytes = fs::read(&data_path)?;
    let records = dataset::parse(std::str::from_utf8(&data_bytes).map_err(|_| Error::Parse {
        line: 0,
        msg: "dataset is not UTF-8".into(),
    })?)?;
    let binder = load_binder(cfg)?;
    let lm = load_lm(cfg)?;
    let (bridge, report) = train_bridge(
        &records,
        &binder,
        &lm,
        &bridge_config(cfg),
        &Streams::new(cfg.seed).bridge(),
    )?;
    let mut meta = base_meta(cfg, "bridge", bridge.checksum());
    meta.insert("parent_binder".into(), report.binder_checksum.clone());
    meta.insert("parent_lm".into(), report.lm_checksum.clone());
    meta.insert("data_sha256".into(), sha256_hex(&data_bytes));
    meta.insert("lora_rank".into(), cfg.lora_rank.to_string());
    meta.insert("lora_alpha".into(), format!("{:?}", cfg.lora_alpha));
    meta.insert(
        "trainable_fraction".into(),
        format!("{:.6}", report.trainable_fraction()),
    );
    report.manifest.write_metadata(&mut meta);
    Checkpoint::new(bridge.params().clone(), meta).save(&out_path(cfg, BRIDGE_FILE))?;
    fs::write(out_path(cfg, BRIDGE_LOG), report.to_tsv())?;
    Ok((bridge, report))
}

/// Hash of the configuration and every checkpoint checksum.
pub fn run_fingerprint(cfg: &Config, checksums: &[String]) -> String {
    let mut text = cfg.fingerprint();
    for c in checksums {
        text.push('\n');
        text.push_str(c);
    }
    sha256_hex(text.as_bytes())
}

pub fn eval_stage(cfg: &Config) -> Result<EvalReport> {
    let s = Streams::new(cfg.seed);
    let w = world(cfg);
    let binder = load_binder(cfg)?;
    let lm = load_lm(cfg)?;
    let LoadedBridge { bridge, manifest } = load_bridge(cfg, &binder, &lm)?;
    let untrained = Bridge::init(
        binder.d_embed(),
        &lm.shape(),
        bridge.rank(),
        bridge.alpha(),
        &s.bridge(),
    )?;

    let scenes = heldout_scenes(cfg.binder_heldout, &s.binder())?;
    let retrieval = binder.retrieval_table(&w, &scenes)?;
    let val = pretraining_corpus(cfg.lm_val, &s.lm_validation())?;
    let ppl = perplexity(&lm, &val)?;
    let ppl_untrained = perplexity(&LanguageModel::init(lm.shape(), &s.lm())?, &val)?;

    let checksums = [binder.checksum(), lm.checksum(), bridge.checksum()];
    let mods: Vec<&str> = manifest.modalities.iter().map(|m| m.name()).collect();
    let summary = vec![
        ("fingerprint".to_string(), run_fingerprint(cfg, &checksums)),
        ("config_fingerprint".to_string(), cfg.fingerprint()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("binder_checksum".to_string(), checksums[0].clone()),
        ("lm_checksum".to_string(), checksums[1].clone()),
        ("bridge_checksum".to_string(), checksums[2].clone()),
        ("train_modalities".to_string(), mods.join(",")),
        (
            "train_scenes".to_string(),
            manifest.scene_seeds.len().to_string(),
        ),
        ("eval_scenes".to_string(), cfg.eval_scenes.to_string()),
        ("eval_pairs".to_string(), cfg.eval_pairs.to_string()),
    ];

    let ctx = |b| EvalContext {
        world: &w,
        binder: &binder,
        lm: &lm,
        bridge: b,
        manifest: &manifest,
        renormalize: cfg.renormalize,
    };
    let inputs = ReportInputs {
        scenes: cfg.eval_scenes,
        pairs: cfg.eval_pairs,
        compose: (cfg.compose_a, cfg.compose_b),
        retrieval: &retrieval,
        heldout_retrieval: cfg.binder_heldout,
        perplexity: (ppl, ppl_untrained),
        summary,
    };
    let report = full_report(&ctx(&bridge), &ctx(&untrained), inputs, &s.eval())?;
    ensure_dir(cfg)?;
    fs::write(out_path(cfg, REPORT_FILE), report.to_tsv())?;
    fs::write(out_path(cfg, SUMMARY_FILE), report.summary_text())?;
    Ok(report)
}

/// Every stage in order.
pub fn run_all(cfg: &Config) -> Result<EvalReport> {
    gen_data(cfg)?;
    binder_stage(cfg)?;
    lm_stage(cfg)?;
    bridge_stage(cfg)?;
    eval_stage(cfg)
}
