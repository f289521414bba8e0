//! End-to-end pipeline smoke: every artifact of a full chain must be
//! schema-valid, error paths must exit with the documented codes, and the
//! report command must render one row per modality mix.

use std::path::{Path, PathBuf};

use mpgn_cli::run;

fn small_args(extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    for kv in [
        "synth.n_videos=6",
        "synth.topic_vocab_size=30",
        "synth.feature_dims=32",
        "sampler.moments_per_video=4",
        "model.hidden_dim=16",
        "model.n_heads=2",
        "model.video_blocks=1",
        "model.query_blocks=1",
        "model.conv_kernel=3",
        "train.epochs=2",
        "train.batch_size=6",
        "train.learning_rate=0.001",
        "eval.ks=[1,5,10]",
        "eval.video_shortlist=6",
    ] {
        args.push("--set".into());
        args.push(kv.into());
    }
    args
}

fn mpgn(out: &Path, cmd_args: &[&str]) -> i32 {
    let mut argv = vec!["mpgn".to_string()];
    argv.extend(cmd_args.iter().map(|s| s.to_string()));
    argv.push("--out".into());
    argv.push(out.display().to_string());
    argv.push("--seed".into());
    argv.push("11".into());
    run(argv)
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.to_string())
        .collect()
}

/// Strict mirror of the documented wire schemas: unknown or missing fields
/// are errors.
mod schema {
    use serde::Deserialize;

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Cue {
        pub video_id: String,
        pub index: usize,
        pub start: f64,
        pub end: f64,
        pub speaker: Option<String>,
        pub text: String,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Moment {
        #[allow(dead_code)]
        pub video_id: String,
        pub cue_start: usize,
        pub cue_end: usize,
        pub ts: f64,
        pub te: f64,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Query {
        pub query_id: String,
        pub video_id: String,
        pub cue_start: usize,
        pub cue_end: usize,
        pub ts: f64,
        pub te: f64,
        pub modality: String,
        pub text: String,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Prediction {
        pub query_id: String,
        pub video_id: String,
        pub ts: f64,
        pub te: f64,
        pub score: f64,
    }

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Annotated {
        pub query_id: String,
        pub video_id: String,
        pub ts: f64,
        pub te: f64,
        pub text: String,
    }
}

#[test]
fn full_chain_produces_schema_valid_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");

    assert_eq!(mpgn(&out, &[&small_args(&["synth"])[..], &[]].concat().iter().map(|s| s.as_str()).collect::<Vec<_>>()), 0);
    assert_eq!(
        mpgn(&out, &small_args(&["sample"]).iter().map(|s| s.as_str()).collect::<Vec<_>>()),
        0
    );
    assert_eq!(
        mpgn(&out, &small_args(&["generate"]).iter().map(|s| s.as_str()).collect::<Vec<_>>()),
        0
    );
    assert_eq!(
        mpgn(&out, &small_args(&["train"]).iter().map(|s| s.as_str()).collect::<Vec<_>>()),
        0
    );
    assert_eq!(
        mpgn(&out, &small_args(&["eval"]).iter().map(|s| s.as_str()).collect::<Vec<_>>()),
        0
    );

    // Subtitle cues.
    for entry in std::fs::read_dir(out.join("corpus/subs")).unwrap() {
        let path = entry.unwrap().path();
        for line in read_lines(&path) {
            let cue: schema::Cue = serde_json::from_str(&line).expect("cue schema");
            assert!(cue.end > cue.start);
            assert!(!cue.text.is_empty());
            let _ = cue.index;
            let _ = cue.speaker;
            assert!(!cue.video_id.is_empty());
        }
    }
    // Moments.
    let moments = read_lines(&out.join("moments.jsonl"));
    assert!(!moments.is_empty());
    for line in &moments {
        let m: schema::Moment = serde_json::from_str(line).expect("moment schema");
        assert!(m.cue_start >= 1 && m.cue_start <= m.cue_end);
        assert!(m.te > m.ts);
    }
    // Queries.
    let queries = read_lines(&out.join("queries.jsonl"));
    assert_eq!(queries.len(), moments.len() * 2);
    for line in &queries {
        let q: schema::Query = serde_json::from_str(line).expect("query schema");
        assert!(matches!(q.modality.as_str(), "visual" | "textual" | "dialog"));
        assert!(!q.text.is_empty());
        assert!(!q.query_id.is_empty());
        assert!(q.te > q.ts);
        assert!(q.cue_start <= q.cue_end);
        assert!(!q.video_id.is_empty());
    }
    // Annotated eval queries.
    for line in read_lines(&out.join("corpus/eval_queries.jsonl")) {
        let a: schema::Annotated = serde_json::from_str(&line).expect("annotated schema");
        assert!(a.te > a.ts && !a.text.is_empty());
        let _ = (a.query_id, a.video_id);
    }
    // Predictions.
    for line in read_lines(&out.join("predictions.jsonl")) {
        let p: schema::Prediction = serde_json::from_str(&line).expect("prediction schema");
        assert!(p.te > p.ts);
        assert!(p.score.is_finite() || p.score == f64::NEG_INFINITY);
        let _ = (p.query_id, p.video_id);
    }
    // Curve CSV has the documented header and parsable rows.
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,epoch,modality,l_vr,l_vmr,l_vcl,l_fcl,total"
    );
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 8);
        cols[0].parse::<u64>().unwrap();
        for c in &cols[3..] {
            c.parse::<f64>().unwrap();
        }
    }
    // Checkpoint magic.
    let ckpt = std::fs::read(out.join("checkpoint.ckpt")).unwrap();
    assert!(ckpt.starts_with(b"MPGN-CKPT-1\n"));
    // Report JSON parses and carries provenance.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["config_hash"].as_str().unwrap().len() == 64);
    // Resolved config snapshots written per command.
    for cmd in ["synth", "sample", "generate", "train", "eval"] {
        assert!(out.join(format!("{cmd}_config.json")).is_file(), "{cmd} snapshot");
    }
    // Provenance sidecars accompany key artifacts.
    for artifact in ["moments.jsonl", "queries.jsonl", "checkpoint.ckpt", "report.json"] {
        assert!(
            out.join(format!("{artifact}.meta.json")).is_file(),
            "missing sidecar for {artifact}"
        );
    }
}

#[test]
fn invalid_sampler_bounds_exit_one_citing_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = small_args(&["synth"]);
    let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(mpgn(&out, &argv), 0);

    args = small_args(&["sample"]);
    args.push("--set".into());
    args.push("sampler.l_min=6".into());
    args.push("--set".into());
    args.push("sampler.l_max=2".into());
    let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(mpgn(&out, &argv), 1);
}

#[test]
fn missing_upstream_artifact_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let args = small_args(&["sample"]);
    let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(mpgn(&out, &argv), 1);
}

#[test]
fn dead_provider_endpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    for cmd in [vec!["synth"], vec!["sample"]] {
        let args = small_args(&cmd.iter().map(|s| &**s).collect::<Vec<_>>());
        let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        assert_eq!(mpgn(&out, &argv), 0);
    }
    // 127.0.0.1:9 is reliably refused; every moment fails, breaching the
    // 10% budget.
    let mut args = small_args(&["generate"]);
    for kv in [
        "provider.mode=\"http\"",
        "provider.base_url=\"http://127.0.0.1:9\"",
        "provider.max_retries=0",
        "provider.timeout_s=0.5",
    ] {
        args.push("--set".into());
        args.push(kv.into());
    }
    let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(mpgn(&out, &argv), 2);
}

#[test]
fn ingest_reports_corpus_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = small_args(&["synth"]);
    let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(mpgn(&out, &argv), 0);
    let manifest = out.join("corpus/manifest.json");
    let args = vec!["ingest".to_string(), "--manifest".to_string(), manifest.display().to_string()];
    let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(mpgn(&out, &argv), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("corpus_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["videos"].as_u64().unwrap(), 6);
    assert_eq!(report["videos_with_subtitle_features"].as_u64().unwrap(), 6);
}

#[test]
fn report_renders_one_row_per_mix() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let base = small_args(&["synth"]);
    let argv: Vec<&str> = base.iter().map(|s| s.as_str()).collect();
    assert_eq!(mpgn(&out, &argv), 0);
    for cmd in ["sample", "generate"] {
        let args = small_args(&[cmd]);
        let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        assert_eq!(mpgn(&out, &argv), 0);
    }
    let mut report_inputs: Vec<PathBuf> = Vec::new();
    for mix in ["visual_only", "textual_only", "alternate_uniform"] {
        let sub = dir.path().join(format!("mix_{mix}"));
        std::fs::create_dir_all(&sub).unwrap();
        let mut args = small_args(&["train"]);
        for extra in [
            format!("train.modality_mix={mix}"),
        ] {
            args.push("--set".into());
            args.push(extra);
        }
        args.push("--corpus".into());
        args.push(out.join("corpus").display().to_string());
        args.push("--queries".into());
        args.push(out.join("queries.jsonl").display().to_string());
        let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        assert_eq!(mpgn(&sub, &argv), 0, "train {mix}");

        let mut args = small_args(&["eval"]);
        args.push("--corpus".into());
        args.push(out.join("corpus").display().to_string());
        args.push("--label".into());
        args.push(mix.to_string());
        let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        assert_eq!(mpgn(&sub, &argv), 0, "eval {mix}");
        report_inputs.push(sub.join("report.json"));
    }
    let mut args = vec!["report".to_string()];
    for input in &report_inputs {
        args.push("--input".into());
        args.push(input.display().to_string());
    }
    let argv: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    assert_eq!(mpgn(&out, &argv), 0);
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    for mix in ["visual_only", "textual_only", "alternate_uniform"] {
        assert_eq!(
            md.lines().filter(|l| l.contains(mix)).count(),
            1,
            "expected one row for {mix}:\n{md}"
        );
    }
}
