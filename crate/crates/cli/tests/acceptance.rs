//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The desk-scale criteria drive the real `mint` binary at default
//! settings.

#[path = "../../nnkit/tests/common/gradcheck.rs"]
mod gradcheck;

#[path = "../../core/tests/common/mod.rs"]
mod fixtures;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use mint::layout::Layout;
use mint::service::{router, ServiceConfig, API_SCHEMA};
use mint_core::aad::{vectorize_max, AadRecord, AuditableDataKind, FeatureOptions, FeatureStore};
use mint_core::audit::{AuditRegistry, MembershipReport};
use mint_core::audited::{build_toy_audited_model, TapConfig, TapName};
use mint_core::classifier::{build_cnn, build_vanilla, MintArchitecture, MintClassifier};
use mint_core::data::{decode_image, encode_png, load_dataset, Partition, Preprocess};
use mint_core::harness::{run_grid, ExperimentGrid, GridReport, ReportFormat, RunContext};
use nnkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Desk-scale pipeline, shared by several criteria
// ---------------------------------------------------------------------------

struct DeskRun {
    _dir: tempfile::TempDir,
    layout: Layout,
    summaries: BTreeMap<&'static str, Value>,
}

const VANILLA_RUN: &str = "desk-vanilla";
const CNN_RUN: &str = "desk-cnn";

const STAGES: [(&str, &[&str]); 6] = [
    ("gen-data", &["gen-data"]),
    ("train-audited", &["train-audited"]),
    ("extract", &["extract"]),
    ("train-mint", &["train-mint"]),
    ("evaluate-vanilla", &["evaluate", "--architectures", "vanilla", "--run-id", VANILLA_RUN]),
    (
        "evaluate-cnn",
        &["evaluate", "--architectures", "cnn", "--train-sizes", "1000", "--repetitions", "1", "--run-id", CNN_RUN],
    ),
];

fn run_pipeline(label: &str) -> Result<DeskRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let mut summaries = BTreeMap::new();
    for (name, args) in STAGES {
        let o = Command::new(env!("CARGO_BIN_EXE_mint"))
            .arg("--out")
            .arg(&out)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{label} {name} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        let v: Value = serde_json::from_slice(&o.stdout).map_err(|e| format!("{name}: {e}"))?;
        eprintln!("  [{label}] {name}: {:.1} s", v["seconds"].as_f64().unwrap_or(0.0));
        summaries.insert(name, v);
    }
    Ok(DeskRun {
        _dir: dir,
        layout: Layout::new(out),
        summaries,
    })
}

fn desk() -> Result<&'static DeskRun, String> {
    static RUN: OnceLock<Result<DeskRun, String>> = OnceLock::new();
    RUN.get_or_init(|| run_pipeline("run A")).as_ref().map_err(Clone::clone)
}

fn grid_report(run: &DeskRun, id: &str) -> Result<GridReport, String> {
    let path = run.layout.report(id, ReportFormat::Json);
    serde_json::from_slice(&std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?)
        .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut worst = Vec::new();
    for v in gradcheck::VARIANTS {
        let err = gradcheck::check_variant(v, 20);
        ensure(err <= gradcheck::TOLERANCE, || format!("{v}: relative error {err:.2e}"))?;
        worst.push(format!("{v} {err:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} layer kinds x 20 cases, h={:e}, worst errors [{}], {secs:.1} s",
        gradcheck::VARIANTS.len(),
        gradcheck::PERTURBATION,
        worst.join(", ")
    ))
}

fn record_with(tap: TapName, t: Tensor<f32>) -> AadRecord {
    AadRecord {
        sample_id: "x".into(),
        membership: Some(Partition::Member),
        taps: BTreeMap::from([(tap, t)]),
        outcome: None,
        source_dataset: String::new(),
        untrained_model: false,
    }
}

fn extraction_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE1);
    for case in 0..1000 {
        let (c, h, w) = (rng.random_range(1..12), rng.random_range(1..10), rng.random_range(1..10));
        let data: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        let mut brute = vec![f32::NEG_INFINITY; c];
        for (ch, slot) in brute.iter_mut().enumerate() {
            for i in 0..h * w {
                if data[ch * h * w + i] > *slot {
                    *slot = data[ch * h * w + i];
                }
            }
        }
        let t = Tensor::new(vec![c, h, w], data).map_err(|e| e.to_string())?;
        let got = vectorize_max(&record_with(TapName::ConvBlock1, t), AuditableDataKind::ConvLayer(1))
            .map_err(|e| e.to_string())?;
        let same = got.values.len() == c && got.values.iter().zip(&brute).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("case {case}: {:?} vs {brute:?}", got.values))?;
    }
    let input = Preprocess { size: 16, channels: 1 };
    for arch in 0..100u64 {
        let channels = [(); 4].map(|_| rng.random_range(1..10usize));
        let model = build_toy_audited_model(channels, rng.random_range(2..12), 3, input, arch)
            .and_then(|m| m.detach_head())
            .map_err(|e| e.to_string())?;
        let image = Tensor::new(vec![1, 16, 16], (0..256).map(|_| rng.random::<f32>()).collect()).unwrap();
        let (_, record) = model.infer_image("x", &image, &TapConfig::all()).map_err(|e| e.to_string())?;
        let v = vectorize_max(&record, AuditableDataKind::AllConvLayers).map_err(|e| e.to_string())?;
        let total: usize = channels.iter().sum();
        ensure(v.values.len() == total, || format!("{channels:?}: length {} vs {total}", v.values.len()))?;
    }
    Ok("1000 tensors bit-identical to brute-force max; 100 architectures with AllConv length = sum of channels".into())
}

fn counted(clf: &MintClassifier) -> usize {
    clf.network().params().iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
}

fn parameter_counts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    let kind = AuditableDataKind::AllConvLayers;
    for _ in 0..50 {
        let f = rng.random_range(1..600usize);
        let clf = build_vanilla(kind, f, 1).map_err(|e| e.to_string())?;
        let formula = (f * 64 + 64) + (64 + 1);
        ensure(counted(&clf) == formula && clf.parameter_count() == formula, || {
            format!("F={f}: counted {} reported {} formula {formula}", counted(&clf), clf.parameter_count())
        })?;
    }
    for _ in 0..50 {
        let (c, h, w) = (rng.random_range(1..16usize), rng.random_range(4..33usize), rng.random_range(4..33usize));
        let clf = build_cnn(AuditableDataKind::ConvLayer(1), &[c, h, w], 1).map_err(|e| e.to_string())?;
        let flatten = 128 * (h / 4) * (w / 4);
        let shape = clf.network().layer_output_shape(6).map(|s| s.to_vec());
        ensure(shape.as_deref() == Some(&[flatten][..]), || format!("{c}x{h}x{w}: flatten {shape:?} vs {flatten}"))?;
        let formula = (c * 9 * 64 + 64) + (64 * 9 * 128 + 128) + (flatten * 64 + 64) + (64 + 1);
        ensure(counted(&clf) == formula, || format!("{c}x{h}x{w}: counted {} vs {formula}", counted(&clf)))?;
    }
    Ok("50 random F and 50 random map shapes match the closed forms exactly".into())
}

fn desk_scale_experiment() -> Check {
    let run = desk()?;
    let train = &run.summaries["train-audited"];
    let audited = train["final_train_accuracy"].as_f64().unwrap_or(0.0);
    ensure(audited >= 0.90, || format!("audited train accuracy {audited}"))?;

    let metrics: Value = serde_json::from_slice(&std::fs::read(run.layout.mint_metrics()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let registry_clf = metrics
        .as_array()
        .and_then(|a| a.iter().find(|c| c["architecture"] == "vanilla" && c["auditable_data"] == "all_conv_layers"))
        .ok_or("no Vanilla AllConv classifier in the registry")?;
    let (n_train, n_test) = (registry_clf["train_size"].as_u64(), registry_clf["held_out"].as_u64());
    ensure(n_train == Some(1000) && n_test == Some(1000), || format!("sizes {n_train:?}/{n_test:?}"))?;
    let single = registry_clf["held_out_accuracy"].as_f64().unwrap_or(0.0);
    ensure(single >= 0.60, || format!("registry classifier accuracy {single}"))?;

    let report = grid_report(run, VANILLA_RUN)?;
    let table = report.table(MintArchitecture::Vanilla).ok_or("no Vanilla table")?;
    ensure(table.cell_count() == 18, || format!("{} Vanilla cells", table.cell_count()))?;
    let cell = table
        .cell(AuditableDataKind::AllConvLayers, 1000)
        .and_then(|c| c.outcome.mean())
        .ok_or("AllConv n=1000 cell failed")?;
    ensure(cell >= 0.60, || format!("grid AllConv n=1000 mean {cell}"))?;
    ensure(report.test_split.len() == 1000, || format!("test split {}", report.test_split.len()))?;

    let secs: f64 = STAGES[..5].iter().map(|(s, _)| run.summaries[s]["seconds"].as_f64().unwrap_or(0.0)).sum();
    ensure(secs <= 600.0, || format!("pipeline took {secs:.0} s"))?;
    Ok(format!(
        "audited train acc {audited:.3}; Vanilla AllConv n=1000: held-out {single:.3}, grid mean over {} reps {cell:.3}; \
         pipeline {secs:.0} s on {} core(s)",
        report.grid.repetitions,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    ))
}

fn controls() -> Check {
    let run = desk()?;
    let mut detail = Vec::new();
    for (id, arch) in [(VANILLA_RUN, MintArchitecture::Vanilla), (CNN_RUN, MintArchitecture::Cnn)] {
        let report = grid_report(run, id)?;
        let c = report.control(arch).ok_or_else(|| format!("no {arch} control"))?;
        let untrained = c.untrained_model_accuracy.ok_or("untrained control not run")?;
        for (what, acc) in [("shuffled", c.shuffled_label_accuracy), ("untrained", untrained)] {
            ensure((acc - 0.5).abs() <= 0.05, || format!("{arch} {what} control {acc}"))?;
        }
        detail.push(format!(
            "{arch} ({}, n={}): shuffled {:.3}, untrained {untrained:.3}",
            c.auditable_data, c.train_size, c.shuffled_label_accuracy
        ));
    }

    let records = fixtures::leaked_records(1000, 1);
    let store = FeatureStore::from_records(&records, FeatureOptions::default());
    let grid = ExperimentGrid {
        train_sizes: vec![250, 1000],
        repetitions: 2,
        seed: 9,
        ..ExperimentGrid::default()
    };
    let report = run_grid(&grid, &store, None, RunContext::default()).map_err(|e| e.to_string())?;
    let mut cells = 0;
    for t in &report.tables {
        for r in &t.rows {
            for c in &r.cells {
                let mean = c.outcome.mean();
                ensure(mean == Some(1.0), || format!("leaked {} {} n={}: {mean:?}", t.architecture, r.auditable_data, c.train_size))?;
                cells += 1;
            }
        }
    }
    ensure(cells == 18, || format!("{cells} leaked cells"))?;
    detail.push(format!("leaked oracle 1.0 in all {cells} cells"));
    Ok(detail.join("; "))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let a = desk()?;
    let b = run_pipeline("run B")?;
    let digest = |r: &DeskRun| r.summaries["gen-data"]["dataset_digest"].clone();
    ensure(digest(a) == digest(&b), || "dataset digests differ".into())?;
    let mut compared = 0;
    for sub in ["data", "model", "features", "mint", "reports"] {
        let root_a = a.layout.root().join(sub);
        let root_b = b.layout.root().join(sub);
        let files = files_under(&root_a);
        ensure(files == files_under(&root_b), || format!("{sub}: different file sets"))?;
        for f in files {
            let (x, y) = (std::fs::read(root_a.join(&f)), std::fs::read(root_b.join(&f)));
            ensure(x.is_ok() && x.as_ref().ok() == y.as_ref().ok(), || format!("{sub}/{} differs", f.display()))?;
            compared += 1;
        }
    }
    let cells = |r: &DeskRun| -> Result<Vec<Value>, String> {
        Ok([VANILLA_RUN, CNN_RUN]
            .iter()
            .map(|id| grid_report(r, id).map(|g| serde_json::to_value(&g.tables).unwrap()))
            .collect::<Result<_, _>>()?)
    };
    ensure(cells(a)? == cells(&b)?, || "accuracy tables differ".into())?;
    Ok(format!(
        "two default pipeline runs: dataset digest, checkpoints and {compared} artifact files bit-identical, \
         including every AccuracyTable cell"
    ))
}

const VANILLA_REFERENCE: [(&str, [&str; 3]); 6] = [
    ("Conv Layer #1", ["0.62", "0.80", "0.80"]),
    ("Conv Layer #2", ["0.56", "0.67", "0.68"]),
    ("Conv Layer #3", ["0.56", "0.58", "0.59"]),
    ("Conv Layer #4", ["0.73", "0.76", "0.76"]),
    ("Model Outcome", ["0.67", "0.78", "0.78"]),
    ("All Conv Layers", ["0.76", "0.82", "0.84"]),
];

const CNN_REFERENCE: [(&str, [&str; 3]); 4] = [
    ("Conv Layer #1", ["0.88", "0.89", "0.89"]),
    ("Conv Layer #2", ["0.85", "0.86", "0.86"]),
    ("Conv Layer #3", ["0.68", "0.71", "0.75"]),
    ("Conv Layer #4", ["0.68", "0.70", "0.74"]),
];

/// Rows of the markdown table following `heading`, as unbolded cells.
fn table_after(md: &str, heading: &str) -> Result<Vec<(Vec<String>, bool)>, String> {
    let start = md.find(heading).ok_or_else(|| format!("missing heading {heading:?}"))?;
    Ok(md[start..]
        .lines()
        .skip_while(|l| !l.starts_with('|'))
        .take_while(|l| l.starts_with('|'))
        .skip(2)
        .map(|l| {
            let cells: Vec<String> = l.trim_matches('|').split('|').map(|c| c.trim().to_string()).collect();
            let bold = cells.iter().all(|c| c.starts_with("**"));
            (cells.iter().map(|c| c.trim_matches('*').to_string()).collect(), bold)
        })
        .collect())
}

fn reporting_fidelity() -> Check {
    let run = desk()?;
    let vanilla_md = std::fs::read_to_string(run.layout.report(VANILLA_RUN, ReportFormat::Markdown)).map_err(|e| e.to_string())?;
    let cnn_md = std::fs::read_to_string(run.layout.report(CNN_RUN, ReportFormat::Markdown)).map_err(|e| e.to_string())?;

    let desk_rows = table_after(&vanilla_md, "## Vanilla MINT (desk scale)")?;
    let labels: Vec<&str> = desk_rows.iter().map(|(c, _)| c[0].as_str()).collect();
    let expected: Vec<&str> = VANILLA_REFERENCE.iter().map(|(l, _)| *l).collect();
    ensure(labels == expected, || format!("desk rows {labels:?}"))?;
    ensure(desk_rows.iter().filter(|(_, b)| *b).count() == 1, || "desk table must bold exactly one row".into())?;

    for (md, heading, reference, best) in [
        (&vanilla_md, "### Vanilla MINT: full-scale reference, not reproduced", &VANILLA_REFERENCE[..], "All Conv Layers"),
        (&cnn_md, "### CNN MINT: full-scale reference, not reproduced", &CNN_REFERENCE[..], "Conv Layer #1"),
    ] {
        let rows = table_after(md, heading)?;
        ensure(rows.len() == reference.len(), || format!("{heading}: {} rows", rows.len()))?;
        for ((cells, bold), (label, values)) in rows.iter().zip(reference) {
            let want: Vec<String> = std::iter::once(label.to_string()).chain(values.iter().map(|v| v.to_string())).collect();
            ensure(cells == &want, || format!("{heading}: {cells:?} vs {want:?}"))?;
            ensure(*bold == (*label == best), || format!("{heading}: bold mismatch on {label}"))?;
        }
    }
    Ok("desk row set and both full-scale reference blocks match cell-for-cell, best rows bolded".into())
}

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn post(content_type: Option<&str>, body: Vec<u8>) -> Request<Body> {
    let mut b = Request::post("/api/audit");
    if let Some(ct) = content_type {
        b = b.header(header::CONTENT_TYPE, ct);
    }
    b.body(Body::from(body)).unwrap()
}

fn multipart_png(png: &[u8]) -> Request<Body> {
    let mut body = b"--B0undary\r\nContent-Disposition: form-data; name=\"image\"; filename=\"f.png\"\r\nContent-Type: image/png\r\n\r\n".to_vec();
    body.extend_from_slice(png);
    body.extend_from_slice(b"\r\n--B0undary--\r\n");
    post(Some("multipart/form-data; boundary=B0undary"), body)
}

fn service_contract() -> Check {
    let run = desk()?;
    let registry = Arc::new(AuditRegistry::load(run.layout.registry()).map_err(|e| e.to_string())?);
    let (partition, _) = load_dataset(run.layout.data_dir()).map_err(|e| e.to_string())?;
    let png = encode_png(&partition.members()[17].image).map_err(|e| e.to_string())?;
    let mut schema: Value = serde_json::from_str(API_SCHEMA).map_err(|e| e.to_string())?;
    let mut validate = |def: &str, body: &Value| -> Result<(), String> {
        schema["$ref"] = json!(format!("#/$defs/{def}"));
        let v = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
        let errors: Vec<String> = v.iter_errors(body).map(|e| e.to_string()).collect();
        ensure(errors.is_empty(), || format!("{def}: {errors:?}"))
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let app = router(registry.clone(), ServiceConfig::default());

    let (status, body) = rt.block_on(call(app.clone(), multipart_png(&png)));
    ensure(status == StatusCode::OK, || format!("audit returned {status}: {body}"))?;
    validate("MembershipReport", &body)?;
    let report: MembershipReport = serde_json::from_value(body).map_err(|e| e.to_string())?;
    let entry = &registry.entries()[0];
    let image = decode_image(&png, entry.model.preprocess()).map_err(|e| e.to_string())?;
    let (_, record) = entry.model.infer_image("offline", &image, &entry.taps).map_err(|e| e.to_string())?;
    ensure(report.per_config.len() == entry.classifiers.len(), || "config count".into())?;
    for (got, clf) in report.per_config.iter().zip(&entry.classifiers) {
        let offline = clf.predict(&clf.features_for(&record).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(got.score.to_bits() == offline.score.to_bits() && got.decision == offline.decision, || {
            format!("{} {}: {} vs {}", got.architecture, got.auditable_data, got.score, offline.score)
        })?;
    }

    let b64 = |s: &str| json!({ "image_b64": s }).to_string().into_bytes();
    let cases: Vec<(Request<Body>, StatusCode, &str)> = vec![
        (post(None, Vec::new()), StatusCode::BAD_REQUEST, "empty_payload"),
        (post(Some("application/json"), b64("@@not base64@@")), StatusCode::BAD_REQUEST, "invalid_base64"),
        (post(Some("application/json"), b"{\"model_id\":\"x\"}".to_vec()), StatusCode::BAD_REQUEST, "missing_image"),
        (post(Some("application/json"), b"{".to_vec()), StatusCode::BAD_REQUEST, "invalid_json"),
        (multipart_png(b"GIF89a"), StatusCode::UNPROCESSABLE_ENTITY, "undecodable_image"),
        (post(Some("text/csv"), b"a,b".to_vec()), StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_media_type"),
        (
            Request::post("/api/audit?model_id=nope")
                .header(header::CONTENT_TYPE, "image/png")
                .body(Body::from(png.clone()))
                .unwrap(),
            StatusCode::NOT_FOUND,
            "unknown_model",
        ),
    ];
    let n_errors = cases.len();
    for (req, status, code) in cases {
        let (s, body) = rt.block_on(call(app.clone(), req));
        ensure(s == status && body["error_code"] == code, || format!("expected {status} {code}, got {s} {body}"))?;
        validate("Error", &body)?;
    }
    let (s, body) = rt.block_on(call(app.clone(), Request::get("/api/models").body(Body::empty()).unwrap()));
    ensure(s == StatusCode::OK, || format!("models {s}"))?;
    validate("Models", &body)?;
    let (_, body) = rt.block_on(call(app, Request::get("/api/health").body(Body::empty()).unwrap()));
    validate("Health", &body)?;
    Ok(format!(
        "{} configs scored bit-exactly against offline predict; {n_errors} invalid payloads mapped to documented codes; all bodies schema-valid",
        report.per_config.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("gradient suite", gradient_suite),
        ("extraction oracle", extraction_oracle),
        ("parameter-count formulas", parameter_counts),
        ("desk-scale MINT experiment", desk_scale_experiment),
        ("controls", controls),
        ("determinism", determinism),
        ("reporting fidelity", reporting_fidelity),
        ("service contract", service_contract),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
