use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use graft_core::checkpoint::Checkpoint;
use graft_core::pipeline::{self, BINDER_FILE, BRIDGE_FILE, LM_FILE, REPORT_FILE};
use graft_core::Config;

const SMALL: &str = "\
data_count = 48
binder_steps = 30
binder_pairs = 64
binder_heldout = 16
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
lm_steps = 20
lm_batch = 8
lm_corpus = 200
lm_val = 40
epochs = 1
batch = 8
eval_scenes = 8
eval_pairs = 8
";

fn write_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let path = dir.join("small.cfg");
    fs::write(&path, format!("{SMALL}out_dir = {}\n", out.display())).unwrap();
    path
}

fn graft(args: &[&str], stdin: &str, seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_graft"));
    cmd.args(args).env_remove("PANDAGPT_SEED");
    if let Some(s) = seed {
        cmd.env("PANDAGPT_SEED", s);
    }
    let mut child = cmd
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(stdin.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Runs the five stages through the binary.
fn train(cfg: &str) {
    for stage in [
        "gen-data",
        "train-binder",
        "pretrain-lm",
        "train-bridge",
        "eval",
    ] {
        let o = graft(&[stage, "--config", cfg], "", None);
        assert!(o.status.success(), "{stage}: {}", text(&o.stderr));
    }
}

#[test]
fn bad_override_names_the_key() {
    let o = graft(&["gen-data", "--set", "lr=abc"], "", None);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("lr"), "{}", text(&o.stderr));

    let o = graft(&["gen-data", "--set", "no_such_key=1"], "", None);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("no_such_key"));
}

#[test]
fn unknown_subcommand_and_help() {
    assert_eq!(graft(&["frobnicate"], "", None).status.code(), Some(1));
    assert_eq!(graft(&[], "", None).status.code(), Some(1));
    let help = graft(&["--help"], "", None);
    assert_eq!(help.status.code(), Some(0));
    assert!(text(&help.stdout).contains("train-bridge"));
}

#[test]
fn bad_seed_variable_is_a_usage_error() {
    let o = graft(&["gen-data"], "", Some("minus-one"));
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("PANDAGPT_SEED"));
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("run"));
    let o = graft(
        &["train-bridge", "--config", cfg.to_str().unwrap()],
        "",
        None,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("missing"));
}

#[test]
fn subcommands_match_the_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cli");
    let cfg_path = write_config(dir.path(), &out);
    let cfg_arg = cfg_path.to_str().unwrap();
    train(cfg_arg);

    let mut lib = Config::load(&cfg_path).unwrap();
    lib.out_dir = dir.path().join("lib").to_string_lossy().into_owned();
    pipeline::run_all(&lib).unwrap();
    for f in [BINDER_FILE, LM_FILE, BRIDGE_FILE, REPORT_FILE] {
        assert!(
            fs::read(out.join(f)).unwrap() == fs::read(pipeline::out_path(&lib, f)).unwrap(),
            "{f} differs"
        );
    }

    // Inspection lists tensors and a rewrite reproduces the file.
    let binder = out.join(BINDER_FILE);
    let copy = dir.path().join("copy.ckpt");
    let o = graft(
        &[
            "inspect-ckpt",
            binder.to_str().unwrap(),
            "--rewrite",
            copy.to_str().unwrap(),
        ],
        "",
        None,
    );
    assert!(o.status.success(), "{}", text(&o.stderr));
    let listing = text(&o.stdout);
    assert!(
        listing.lines().any(|l| l.starts_with("tensor\tbinder/")),
        "{listing}"
    );
    assert!(listing.contains("meta\tkind\tbinder"));
    assert_eq!(fs::read(&binder).unwrap(), fs::read(&copy).unwrap());

    // Chat: scripted replay is deterministic, malformed commands keep the session alive.
    let script = "/show img 3 1\nwhat is shown ?\n/bogus\n/show img\n/seed x\n/add aud 5 2\nwhat is shown ?\n/clear\nwhat is shown ?\n";
    let c1 = graft(&["chat", "--config", cfg_arg], script, None);
    let c2 = graft(&["chat", "--config", cfg_arg], script, None);
    assert!(c1.status.success(), "{}", text(&c1.stderr));
    assert_eq!(c1.stdout, c2.stdout);
    let lines: Vec<String> = text(&c1.stdout).lines().map(str::to_string).collect();
    assert!(
        lines.iter().filter(|l| l.starts_with("commands:")).count() >= 3,
        "{lines:?}"
    );
    assert_eq!(
        lines.last().cloned(),
        text(&graft(&["chat", "--config", cfg_arg], "what is shown ?\n", None).stdout)
            .lines()
            .last()
            .map(str::to_string)
    );

    // Composition of one or more scenes; a malformed spec is an input error.
    let one = graft(
        &["compose", "--config", cfg_arg, "--scene", "img:3:1"],
        "",
        None,
    );
    let two = graft(
        &[
            "compose", "--config", cfg_arg, "--scene", "img:3:1", "--scene", "img:3:1",
        ],
        "",
        None,
    );
    assert!(one.status.success(), "{}", text(&one.stderr));
    assert!(two.status.success());
    assert!(!text(&one.stdout).trim().is_empty());
    let bad = graft(
        &["compose", "--config", cfg_arg, "--scene", "img:3"],
        "",
        None,
    );
    assert_eq!(bad.status.code(), Some(1));

    // Tensors edited behind the checksum: exit 2.
    let mut ck = Checkpoint::load(&out.join(LM_FILE)).unwrap();
    let name = ck.tensors.names().next().unwrap().to_string();
    ck.tensors.get_mut(&name).unwrap().data_mut()[0] += 0.5;
    ck.save(&out.join(LM_FILE)).unwrap();
    let o = graft(&["eval", "--config", cfg_arg], "", None);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));

    // A flipped byte fails the CRC: an input error.
    let mut bytes = fs::read(&binder).unwrap();
    let k = bytes.len() - 8;
    bytes[k] ^= 1;
    fs::write(&binder, bytes).unwrap();
    let o = graft(&["inspect-ckpt", binder.to_str().unwrap()], "", None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_variable_sits_between_file_and_set() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: Option<&str>, set: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let cfg = write_config(dir.path(), &out);
        let mut args = vec!["gen-data", "--config", cfg.to_str().unwrap()];
        if let Some(s) = set {
            args.extend(["--set", s]);
        }
        let o = graft(&args, "", seed);
        assert!(o.status.success(), "{}", text(&o.stderr));
        fs::read(out.join(pipeline::DATA_FILE)).unwrap()
    };
    let base = run(None, None, "a");
    let env7 = run(Some("7"), None, "b");
    let set7 = run(None, Some("seed=7"), "c");
    let both = run(Some("3"), Some("seed=7"), "d");
    assert_ne!(base, env7);
    assert_eq!(env7, set7);
    assert_eq!(both, set7);
}
