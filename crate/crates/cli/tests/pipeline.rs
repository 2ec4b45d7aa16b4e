use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use semrec::indexer::IndexMode;
use semrec::prompts::{ChatRequest, ChatSummarizer, ChatTransport, SummaryCache};
use semrec_cli::config::SummaryProvider;
use semrec_cli::pipeline::{Stage, METRICS_JSON, RESULTS_FILE};
use semrec_cli::{write_mini, CliError, Pipeline, PipelineConfig};

fn mini_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mini")
}

fn config_text(extra: &str) -> String {
    let data = mini_dir();
    format!(
        "[paths]\nreviews = \"{}\"\nmetadata = \"{}\"\nworkdir = \"work\"\n{extra}",
        data.join("reviews.jsonl").display(),
        data.join("meta.jsonl").display()
    )
}

fn pipeline(dir: &Path, extra: &str) -> Pipeline {
    let config = PipelineConfig::parse(&config_text(extra), dir, &|_| None).unwrap();
    config.validate().unwrap();
    Pipeline::new(config)
}

fn manifests(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() == "manifest.json" {
                out.insert(path.clone(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn committed_mini_corpus_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    write_mini(tmp.path(), semrec::synthetic::MINI_SEED).unwrap();
    for name in ["reviews.jsonl", "meta.jsonl"] {
        let fresh = std::fs::read(tmp.path().join(name)).unwrap();
        let committed = std::fs::read(mini_dir().join(name)).unwrap();
        assert!(
            fresh == committed,
            "data/mini/{name} is stale; run `semrec gen-mini`"
        );
    }
}

#[test]
fn eval_before_rank_names_the_rank_command() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path(), "");
    p.prepare().unwrap();
    match p.eval() {
        Err(CliError::MissingArtifact { path, command }) => {
            assert!(path.ends_with(Path::new("pid/rank").join(RESULTS_FILE)));
            assert_eq!(command, "rank --mode P-ID");
        }
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
    let embedless = p.train_index().unwrap_err();
    assert!(
        embedless.to_string().contains("semrec embed"),
        "{embedless}"
    );
}

#[test]
fn same_config_gives_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path(), "[rqvae]\nepochs = 5\n");
    p.all().unwrap();
    let first = manifests(p.workdir());
    assert_eq!(first.len(), 6);
    p.all().unwrap();
    assert_eq!(first, manifests(p.workdir()));
}

#[test]
fn ablation_needs_all_three_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "[rqvae]\nepochs = 3\n";
    for mode in [IndexMode::Pid, IndexMode::Nid] {
        let mut p = pipeline(tmp.path(), extra);
        p.config.index.mode = mode;
        p.all().unwrap();
    }
    let p = pipeline(tmp.path(), extra);
    let err = p.ablate_index().unwrap_err();
    assert!(err.to_string().contains("--mode O-ID"), "{err}");

    let mut oid = pipeline(tmp.path(), extra);
    oid.config.index.mode = IndexMode::Oid;
    oid.all().unwrap();
    let table = p.ablate_index().unwrap();
    for mode in IndexMode::ALL {
        assert_eq!(table.matches(&format!("  {mode} ")).count(), 2, "{table}");
        assert!(oid
            .stage_dir_for(Stage::Eval, mode)
            .join(METRICS_JSON)
            .is_file());
    }

    // a P-ID ranking that no longer matches its assignment file is refused
    let assignment = p
        .stage_dir_for(Stage::TrainIndex, IndexMode::Pid)
        .join("assignment.tsv");
    let text = std::fs::read_to_string(&assignment).unwrap();
    std::fs::write(
        &assignment,
        text.lines().rev().collect::<Vec<_>>().join("\n"),
    )
    .unwrap();
    assert!(p
        .ablate_index()
        .unwrap_err()
        .to_string()
        .contains("different assignment"));
}

struct Unreachable;

impl ChatTransport for Unreachable {
    fn complete(&self, _: &ChatRequest) -> semrec::Result<String> {
        unreachable!("only used to compute cache keys")
    }
}

#[test]
fn warmed_chat_cache_needs_no_network() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "[index]\nmode = \"N-ID\"\n[summary]\nprovider = \"chat\"\n\
                 endpoint = \"http://127.0.0.1:9/unreachable\"\nmodel = \"m\"\n\
                 token = \"${CHAT_TOKEN}\"\ncache = \"cache.jsonl\"\n";
    let config = PipelineConfig::parse(&config_text(extra), tmp.path(), &|v| {
        (v == "CHAT_TOKEN").then(|| "t".into())
    })
    .unwrap();
    assert_eq!(config.summary.provider, SummaryProvider::Chat);
    assert_eq!(config.summary.token.as_deref(), Some("t"));
    let p = Pipeline::new(config);
    p.prepare().unwrap();
    p.train_index().unwrap();

    // without the cache the unreachable endpoint is an external error
    let err = p.gen_prompts().unwrap_err();
    assert!(
        matches!(err, CliError::Core(semrec::Error::External(_))),
        "{err}"
    );

    let prepared = p.load_prepared().unwrap();
    let keys = ChatSummarizer::new(Unreachable, "m", SummaryCache::in_memory());
    let mut lines = String::new();
    for u in &prepared.split.users {
        let texts: Vec<String> = u.train.iter().map(|i| i.review_text.clone()).collect();
        let record = serde_json::json!({
            "key": keys.request(&texts).cache_key(),
            "user_id": u.user_id,
            "text": format!("{} likes tidy things", u.user_id),
        });
        lines.push_str(&format!("{record}\n"));
    }
    std::fs::write(tmp.path().join("cache.jsonl"), lines).unwrap();
    let (corpus, _) = p.gen_prompts().unwrap();
    assert!(corpus
        .iter()
        .any(|i| i.target.ends_with("likes tidy things")));
}

fn semrec(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_semrec"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let write = |name: &str, extra: &str| {
        std::fs::write(dir.join(name), config_text(extra)).unwrap();
    };
    write("ok.toml", "");
    write("bad.toml", "[rqvae]\nlr = -1.0\n");
    write("small.toml", "[rqvae]\ncodebook_size = 2\nlevels = 2\n");
    write("wild.toml", "[rqvae]\nlr = 1e200\nepochs = 3\n");

    assert_eq!(semrec(dir, &["--bogus"]).0, 1);
    assert_eq!(semrec(dir, &["prepare"]).0, 1);
    let (code, err) = semrec(dir, &["--config", "bad.toml", "prepare"]);
    assert_eq!(code, 1);
    assert!(err.contains("rqvae.lr"), "{err}");

    let (code, err) = semrec(dir, &["--config", "ok.toml", "eval"]);
    assert_eq!(code, 2);
    assert!(err.contains("semrec rank"), "{err}");

    assert_eq!(semrec(dir, &["--config", "ok.toml", "prepare"]).0, 0);
    assert_eq!(semrec(dir, &["--config", "ok.toml", "embed"]).0, 0);
    let (code, err) = semrec(dir, &["--config", "small.toml", "train-index"]);
    assert_eq!(code, 2);
    assert!(err.contains("capacity"), "{err}");

    let (code, err) = semrec(dir, &["--config", "wild.toml", "train-index"]);
    assert_eq!(code, 3, "{err}");
    assert!(dir.join("work/pid/index/trace.jsonl").is_file());

    let (code, _) = semrec(
        dir,
        &["--config", "ok.toml", "--mode", "O-ID", "train-index"],
    );
    assert_eq!(code, 0);
}
