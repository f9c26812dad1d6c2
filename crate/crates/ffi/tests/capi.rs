use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use demosel::config::{Profile, RunConfig};
use demosel::pipeline::{Pipeline, Stage};
use demosel::synth::{generate, SynthConfig};
use demosel_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    demosel_string_free(p);
    s
}

fn last_error() -> String {
    let p = demosel_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_pool(dir: &Path, n: usize) -> std::path::PathBuf {
    let fx = generate(&SynthConfig {
        pool_size: n,
        held_out: 2,
        ..Default::default()
    });
    let pool = dir.join("pool.jsonl");
    fx.write(&pool, &dir.join("queries.jsonl")).unwrap();
    pool
}

#[test]
fn pool_and_bm25_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(write_pool(dir.path(), 20).to_str().unwrap());
    unsafe {
        let mut pool = ptr::null_mut();
        assert_eq!(demosel_pool_load(path.as_ptr(), true, &mut pool), DemoselStatus::Ok);
        assert_eq!(demosel_pool_len(pool), 20);

        let mut bm25 = ptr::null_mut();
        assert_eq!(demosel_bm25_build(pool, &mut bm25), DemoselStatus::Ok);
        let mut out = ptr::null_mut();
        let q = c("visited the city of");
        assert_eq!(demosel_bm25_top_k(bm25, q.as_ptr(), 5, &mut out), DemoselStatus::Ok);
        let hits: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        let hits = hits.as_array().unwrap();
        assert!(hits.len() <= 5);
        for pair in hits.windows(2) {
            assert!(pair[0]["score"].as_f64() >= pair[1]["score"].as_f64());
        }

        demosel_bm25_free(bm25);
        demosel_pool_free(pool);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut pool = ptr::null_mut();
        let missing = c("/nonexistent/pool.jsonl");
        assert_eq!(demosel_pool_load(missing.as_ptr(), true, &mut pool), DemoselStatus::Io);
        assert!(pool.is_null());
        assert!(last_error().contains("pool.jsonl"));

        assert_eq!(demosel_pool_load(ptr::null(), true, &mut pool), DemoselStatus::NullPointer);
        assert!(last_error().contains("path"));

        let bad = [0xffu8, 0];
        assert_eq!(demosel_pool_load(bad.as_ptr().cast(), true, &mut pool), DemoselStatus::InvalidUtf8);

        let mut out = ptr::null_mut();
        let (text, task, schema) = (c("x"), c("POS"), c("[]"));
        assert_eq!(
            demosel_parse_output(text.as_ptr(), task.as_ptr(), schema.as_ptr(), &mut out),
            DemoselStatus::InvalidInput
        );
        assert!(out.is_null());

        assert_eq!(demosel_pool_len(ptr::null()), 0);
        demosel_pool_free(ptr::null_mut());
        demosel_string_free(ptr::null_mut());

        let v = c("1");
        let mut out = ptr::null_mut();
        assert_eq!(demosel_linearize(v.as_ptr(), true, &mut out), DemoselStatus::InvalidInput);
        let msg = c("{}");
        assert_eq!(demosel_linearize(msg.as_ptr(), true, ptr::null_mut()), DemoselStatus::InvalidInput);
    }
}

#[test]
fn success_clears_the_last_error() {
    unsafe {
        let mut pool = ptr::null_mut();
        assert_eq!(demosel_pool_load(ptr::null(), true, &mut pool), DemoselStatus::NullPointer);
        let mut out = ptr::null_mut();
        let (text, task, schema) = (c("person: John"), c("NER"), c(r#"["person"]"#));
        assert_eq!(
            demosel_parse_output(text.as_ptr(), task.as_ptr(), schema.as_ptr(), &mut out),
            DemoselStatus::Ok
        );
        take(out);
        assert!(demosel_last_error().is_null());
    }
}

#[test]
fn codec_and_evaluation_agree_with_the_library() {
    let fx = generate(&SynthConfig {
        pool_size: 8,
        held_out: 0,
        ..Default::default()
    });
    let sample = &fx.pool[0];
    let json = c(&sample.to_json_line());
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(demosel_linearize(json.as_ptr(), true, &mut out), DemoselStatus::Ok);
        let text = take(out);
        assert_eq!(text, demosel::codec::linearize(sample, true).text);

        let rendered = demosel::codec::linearize(sample, true).text;
        let generated = rendered.rsplit_once("Output:").unwrap().1.to_owned();
        let (g, task, schema) = (c(&generated), c(sample.task.code()), c(&serde_json::to_string(&sample.schema).unwrap()));
        let mut out = ptr::null_mut();
        assert_eq!(demosel_parse_output(g.as_ptr(), task.as_ptr(), schema.as_ptr(), &mut out), DemoselStatus::Ok);
        let mut pred: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        pred["id"] = sample.id.clone().into();

        let preds = c(&serde_json::Value::Array(vec![pred]).to_string());
        let golds = c(&format!("[{}]", sample.to_json_line()));
        let norm = c("exact");
        let mut out = ptr::null_mut();
        assert_eq!(demosel_evaluate(preds.as_ptr(), golds.as_ptr(), norm.as_ptr(), &mut out), DemoselStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(report["rows"][0]["f1"].as_f64(), Some(100.0), "{report}");
    }
}

#[test]
fn retriever_handle_matches_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml_str(
        r#"
[synth]
pool_size = 40
held_out = 4
[scoring]
k_init = 20
[reward]
steps = 5
batch_size = 2
[retriever]
steps = 5
batch_size = 2
"#,
        Some(Profile::Desk),
    )
    .unwrap();
    cfg.work_dir = dir.path().to_path_buf();
    let p = Pipeline::new(cfg).unwrap();
    for stage in [Stage::SynthFixtures, Stage::BuildPool, Stage::Bm25Init, Stage::LlmScore, Stage::TrainReward, Stage::TrainRetriever, Stage::Index, Stage::Retrieve] {
        p.run(stage).unwrap();
    }
    let expected = demosel::pipeline::read_retrieval(&dir.path().join("retrieval.jsonl")).unwrap();
    let queries = std::fs::read_to_string(dir.path().join("queries.jsonl")).unwrap();

    let ckpt = c(dir.path().join("retriever").to_str().unwrap());
    let index = c(dir.path().join("index.bin").to_str().unwrap());
    unsafe {
        let mut r = ptr::null_mut();
        assert_eq!(demosel_retriever_open(ckpt.as_ptr(), index.as_ptr(), &mut r), DemoselStatus::Ok, "{}", last_error());
        for (line, rec) in queries.lines().zip(&expected) {
            let q = c(line);
            let mut out = ptr::null_mut();
            assert_eq!(demosel_retriever_retrieve(r, q.as_ptr(), rec.hits.len(), &mut out), DemoselStatus::Ok);
            let got: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
            let ids: Vec<&str> = got["hits"].as_array().unwrap().iter().map(|h| h["id"].as_str().unwrap()).collect();
            let want: Vec<&str> = rec.hits.iter().map(|h| h.id.as_str()).collect();
            assert_eq!(ids, want);
        }
        demosel_retriever_free(r);

        let mut r = ptr::null_mut();
        let wrong = c(dir.path().join("reward").to_str().unwrap());
        assert_ne!(demosel_retriever_open(wrong.as_ptr(), index.as_ptr(), &mut r), DemoselStatus::Ok);
        assert!(r.is_null());
    }
}
