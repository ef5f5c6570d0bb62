use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use t2i_audit_core::assessment::AssessmentRecord;
use t2i_audit_core::filtering::RemovedPair;
use t2i_audit_core::io::{read_json, read_jsonl, write_json, write_jsonl};
use t2i_audit_core::knowledge::{BiasRecord, Caption, CaptionQuestion, KnowledgeBase};

const RULES: &str = r#"[
  {"keywords": ["person", "doctor"], "name": "person gender", "classes": ["male", "female"],
   "question": "What is the gender of the person?"},
  {"keywords": ["dog"], "name": "dog breed", "classes": ["labrador", "poodle"],
   "question": "What breed is the dog?"}
]"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(captions: &[(&str, &str)], extra_config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus: Vec<Caption> = captions
            .iter()
            .map(|(id, t)| Caption::new(*id, *t, "test"))
            .collect();
        write_jsonl(&dir.path().join("corpus.jsonl"), &corpus).unwrap();
        fs::write(dir.path().join("rules.json"), RULES).unwrap();
        let config = format!(
            r#"
corpus = "corpus.jsonl"
output_dir = "out"
parallelism = 2

[llm]
kind = "mock"
mock = {{ rules = "rules.json" }}

[generator]
kind = "mock"

[vqa]
kind = "mock"

[knowledge]
min_support = 1

[sampling]
captions_per_bias = 4
seeds_per_caption = 3
{extra_config}
"#
        );
        fs::write(dir.path().join("audit.toml"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_t2i-audit"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg("audit.toml")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn five_captions() -> Vec<(&'static str, &'static str)> {
    vec![
        ("c1", "A person reading in a park."),
        ("c2", "A doctor in a hospital corridor."),
        ("c3", "A dog running on the beach."),
        ("c4", "A person cooking dinner."),
        ("c5", "A dog sleeping on a sofa."),
    ]
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn propose_is_deterministic() {
    let a = Workspace::new(&five_captions(), "");
    let b = Workspace::new(&five_captions(), "");
    a.ok(&["propose"]);
    b.ok(&["propose"]);
    let kb_a = fs::read(a.path("out/kb.json")).unwrap();
    assert_eq!(kb_a, fs::read(b.path("out/kb.json")).unwrap());
    let kb: KnowledgeBase = read_json(&a.path("out/kb.json")).unwrap();
    assert_eq!(kb.len(), 2);
    assert_eq!(kb.get("person gender").unwrap().support(), 3);
}

#[test]
fn empty_corpus_gives_empty_kb() {
    let ws = Workspace::new(&[], "");
    ws.ok(&["propose"]);
    let kb: KnowledgeBase = read_json(&ws.path("out/kb.json")).unwrap();
    assert!(kb.is_empty());
}

#[test]
fn unreachable_endpoint_is_a_backend_error() {
    let ws = Workspace::new(&five_captions(), "");
    let config = fs::read_to_string(ws.path("audit.toml")).unwrap().replace(
        "[llm]\nkind = \"mock\"\nmock = { rules = \"rules.json\" }",
        "[llm]\nkind = \"http\"\nendpoint = \"http://127.0.0.1:9/v1/chat/completions\"\nmodel = \"m\"\nmax_attempts = 1\ntimeout_secs = 2",
    );
    fs::write(ws.path("audit.toml"), config).unwrap();
    let out = ws.run(&["propose"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    // A dry run never touches the endpoint.
    let dry = ws.ok(&["--dry-run", "propose"]);
    assert!(dry.contains("planned backend calls: 5"), "{dry}");
    assert!(!ws.path("out/kb.json").exists());
}

#[test]
fn user_and_data_errors() {
    let ws = Workspace::new(&five_captions(), "");
    let out = Command::new(env!("CARGO_BIN_EXE_t2i-audit"))
        .current_dir(ws.dir.path())
        .args(["--config", "missing.toml", "propose"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(code(&ws.run(&["bogus-command"])), 1);

    fs::create_dir_all(ws.path("out")).unwrap();
    fs::write(ws.path("out/records.jsonl"), "").unwrap();
    assert_eq!(code(&ws.run(&["quantify"])), 3);
    fs::write(ws.path("out/records.jsonl"), "not json\n").unwrap();
    assert_eq!(code(&ws.run(&["quantify"])), 3);
}

#[test]
fn filter_removes_named_classes() {
    let ws = Workspace::new(
        &[
            ("m1", "A male doctor."),
            ("m2", "A female person smiling."),
            ("d1", "A poodle dog."),
        ],
        "",
    );
    ws.ok(&["propose"]);
    let out = ws.ok(&["filter", "--skip-stage1"]);
    assert!(out.contains("filter: 0 network call(s)"), "{out}");
    let kb: KnowledgeBase = read_json(&ws.path("out/kb.filtered.json")).unwrap();
    assert!(kb.is_empty());
    let removed: Vec<RemovedPair> = read_jsonl(&ws.path("out/removed.jsonl")).unwrap();
    assert_eq!(removed.len(), 3);
}

#[test]
fn filter_keeps_class_free_captions() {
    let ws = Workspace::new(&five_captions(), "[filter]\nstage1 = false\n");
    ws.ok(&["propose"]);
    ws.ok(&["filter"]);
    let before = fs::read_to_string(ws.path("out/kb.json")).unwrap();
    let after = fs::read_to_string(ws.path("out/kb.filtered.json")).unwrap();
    assert_eq!(before, after);
}

fn kb_fixture(biases: &[(&str, &[&str])], captions: &[&str]) -> KnowledgeBase {
    let mut kb = KnowledgeBase::default();
    for (name, classes) in biases {
        kb.records.insert(
            name.to_string(),
            BiasRecord {
                name: name.to_string(),
                classes: classes.iter().map(|c| c.to_string()).collect(),
                pairs: captions
                    .iter()
                    .map(|c| CaptionQuestion {
                        caption_id: c.to_string(),
                        question: format!("Which {name}?"),
                        present_in_prompt: false,
                        unverified: false,
                    })
                    .collect(),
            },
        );
    }
    kb
}

#[test]
fn assess_counts_and_resumes() {
    let ws = Workspace::new(&five_captions(), "");
    let kb = kb_fixture(
        &[("gender", &["male", "female"]), ("age", &["young", "old"])],
        &["c1", "c2", "c3", "c4"],
    );
    write_json(&ws.path("kb.json"), &kb).unwrap();

    let dry = ws.ok(&["--dry-run", "assess", "--kb", "kb.json"]);
    assert!(dry.contains("planned backend calls: 36"), "{dry}");
    ws.ok(&["assess", "--kb", "kb.json"]);
    let records: Vec<AssessmentRecord> = read_jsonl(&ws.path("out/records.jsonl")).unwrap();
    assert_eq!(records.len(), 2 * 4 * 3);

    let again = ws.ok(&["assess", "--kb", "kb.json"]);
    assert!(again.contains("assess: 0 network call(s)"), "{again}");
    assert!(again.contains("0 new record(s), 24 total"), "{again}");
    let dry = ws.ok(&["--dry-run", "assess", "--kb", "kb.json"]);
    assert!(dry.contains("planned backend calls: 0"), "{dry}");

    // Interrupted run: drop half the records and a partial line.
    let text = fs::read_to_string(ws.path("out/records.jsonl")).unwrap();
    let mut partial: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    partial.push_str("{\"bias\":\"ge");
    fs::write(ws.path("out/records.jsonl"), partial).unwrap();
    ws.ok(&["assess", "--kb", "kb.json"]);
    assert_eq!(
        fs::read_to_string(ws.path("out/records.jsonl")).unwrap(),
        text
    );
}

#[test]
fn assess_real_images() {
    let ws = Workspace::new(&five_captions(), "");
    let kb = kb_fixture(&[("gender", &["male", "female"])], &["c1", "c2", "c3"]);
    write_json(&ws.path("kb.json"), &kb).unwrap();
    fs::create_dir_all(ws.path("images")).unwrap();
    let mut manifest = String::new();
    for id in ["c1", "c2", "zz"] {
        fs::write(
            ws.path(&format!("images/{id}.pgm")),
            t2i_audit_core::backends::mock::mock_image(id, 0),
        )
        .unwrap();
        manifest.push_str(&format!(
            "{{\"image_path\": \"images/{id}.pgm\", \"caption_id\": \"{id}\"}}\n"
        ));
    }
    fs::write(ws.path("manifest.jsonl"), manifest).unwrap();
    ws.ok(&[
        "assess",
        "--kb",
        "kb.json",
        "--real-images",
        "manifest.jsonl",
    ]);
    let records: Vec<AssessmentRecord> = read_jsonl(&ws.path("out/records.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records
        .iter()
        .all(|r| r.generator == "real-images" && r.seed == 0));
    ws.ok(&["quantify", "--scope", "context-free"]);
}

#[test]
fn quantify_scopes_and_comparison() {
    let ws = Workspace::new(&five_captions(), "");
    let kb = kb_fixture(
        &[("gender", &["male", "female"]), ("age", &["young", "old"])],
        &["c1", "c2", "c3", "c4"],
    );
    write_json(&ws.path("kb.json"), &kb).unwrap();
    ws.ok(&["assess", "--kb", "kb.json"]);

    ws.ok(&["quantify"]);
    let all = fs::read_to_string(ws.path("out/scores.csv")).unwrap();
    assert_eq!(all.lines().count(), 1 + 2 + 8);
    let again = {
        ws.ok(&["quantify"]);
        fs::read_to_string(ws.path("out/scores.csv")).unwrap()
    };
    assert_eq!(all, again);

    ws.ok(&["quantify", "--scope", "context-aware"]);
    let aware = fs::read_to_string(ws.path("out/scores.csv")).unwrap();
    assert_eq!(aware.lines().count(), 1 + 8);
    assert!(aware.lines().skip(1).all(|l| l.contains(",context-aware:")));

    // Second "model": same records relabelled.
    let other: Vec<AssessmentRecord> =
        read_jsonl::<AssessmentRecord>(&ws.path("out/records.jsonl"))
            .unwrap()
            .into_iter()
            .map(|mut r| {
                r.generator = "other-gen".into();
                r
            })
            .collect();
    write_jsonl(&ws.path("other.jsonl"), &other).unwrap();
    ws.ok(&["quantify", "--compare", "other.jsonl"]);
    let cmp = fs::read_to_string(ws.path("out/comparison.csv")).unwrap();
    assert!(cmp.starts_with("bias,mock-generator,other-gen\n"), "{cmp}");
    assert!(ws.path("out/comparison.svg").exists());

    fs::remove_file(ws.path("out/scores.csv")).unwrap();
    ws.ok(&["report"]);
    assert_eq!(fs::read_to_string(ws.path("out/scores.csv")).unwrap(), all);
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn compare_dispatch() {
    let ws = Workspace::new(&five_captions(), "");
    let kb = kb_fixture(
        &[("gender", &["male", "female"])],
        &["c1", "c2", "c3", "c4"],
    );
    write_json(&ws.path("kb.json"), &kb).unwrap();
    ws.ok(&["assess", "--kb", "kb.json"]);
    ws.ok(&["quantify"]);

    let out = ws.ok(&["compare", "--reports", "out/report.json", "out/report.json"]);
    assert!(out.contains("mean 0.0000"), "{out}");

    let table = fixture("gender_professions.csv");
    let out = ws.ok(&[
        "compare",
        "--table",
        table.to_str().unwrap(),
        "--out",
        "metrics",
    ]);
    assert!(out.contains("36 row(s): mean diff 0.20"), "{out}");
    let csv = fs::read_to_string(ws.path("metrics/metrics.csv")).unwrap();
    assert!(csv.contains("cook,0.0,0.82,0.82"));

    fs::write(
        ws.path("judgments.csv"),
        "bias,user,choice,intensity\ngender,u1,male,6\ngender,u2,female,7\ngender,u3,no bias,0\n",
    )
    .unwrap();
    let out = ws.ok(&[
        "compare",
        "--human",
        "judgments.csv",
        "--report",
        "out/report.json",
    ]);
    assert!(out.contains("AME"), "{out}");

    fs::write(
        ws.path("pred.jsonl"),
        "{\"item_id\":\"1\",\"class\":\"male\"}\n{\"item_id\":\"2\",\"class\":\"female\"}\n",
    )
    .unwrap();
    fs::write(
        ws.path("ref.jsonl"),
        "{\"item_id\":\"1\",\"class\":\"male\"}\n{\"item_id\":\"2\",\"class\":\"male\"}\n",
    )
    .unwrap();
    let out = ws.ok(&[
        "compare",
        "--labels",
        "pred.jsonl",
        "--reference",
        "ref.jsonl",
    ]);
    assert!(out.contains("accuracy 0.5000"), "{out}");

    assert_eq!(code(&ws.run(&["compare", "--labels", "pred.jsonl"])), 1);
}
