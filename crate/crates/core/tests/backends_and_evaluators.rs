mod support;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spark_core::editor::{BackendError, HttpConfig, Role};
use spark_core::evaluator::Stage;
use spark_core::operators::OperatorSettings;
use spark_core::search::Outcome;
use spark_core::simulate::{sample_seed, SAMPLE_SEED};
use spark_core::{
    ChatBackend, CommandEvaluator, Evaluator, FailureType, Factor, HttpBackend, RunMode, Search,
    SearchSettings, SyntheticTask, TagConfig, TaggedProgram,
};
use support::stub::serve;
use support::synthetic_oracle;

const ACT_CLOSE: &str = "        # </SPARK:ACTION>\n";

fn gained_seed() -> String {
    SAMPLE_SEED.replace(ACT_CLOSE, &format!("        h = gain(h)\n{ACT_CLOSE}"))
}

fn role_of(prompt: &str) -> Role {
    if prompt.contains("Answer with exactly one token") {
        Role::Route
    } else if prompt.contains("Write one short, concrete refinement") {
        Role::Directive
    } else {
        Role::Edit
    }
}

fn fast_http(url: &str) -> HttpConfig {
    HttpConfig {
        initial_backoff_ms: 5,
        // PATH is always set, so a bearer header is always sent.
        api_key_env: "PATH".into(),
        ..HttpConfig::new(url, "stub-model")
    }
}

#[test]
fn one_spark_step_against_stub_endpoint() {
    // The first route answer is not a factor token; the retry gets a valid one.
    let edit = format!("Sure.\n```python\n{}```", gained_seed());
    let stub = serve(8, move |i, body| {
        let prompt = body["messages"].as_array().unwrap().last().unwrap()["content"]
            .as_str()
            .unwrap()
            .to_string();
        match (i, role_of(&prompt)) {
            (0, Role::Route) => (200, "Not sure yet".into()),
            (_, Role::Route) => (200, "ACTION".into()),
            (_, Role::Directive) => (200, "Apply a gain after the update.".into()),
            (_, Role::Edit) => (200, edit.clone()),
        }
    });
    let mut backend = HttpBackend::new(fast_http(&stub.url));
    let ev = SyntheticTask::default();
    let settings = SearchSettings {
        mode: RunMode::Spark,
        attempt_cap: Some(1),
        checkpoint_every: 0,
        ..Default::default()
    };
    let r = Search::start(settings, OperatorSettings::default(), vec![], &mut backend, &ev, &sample_seed())
        .unwrap()
        .run()
        .unwrap();
    let rec = &r.records[0];
    assert_eq!(rec.outcome, Outcome::Pass, "{rec:?}");
    assert_eq!(rec.factor, Some(Factor::Action));
    assert_eq!(rec.llm_calls, 4);
    assert_eq!(rec.prompt_tokens, 44);

    let seen = stub.requests();
    let retries = SearchSettings::default().route_retries as usize;
    assert!(seen.len() <= retries + 2, "{} requests", seen.len());
    let roles: Vec<Role> = seen.iter().map(|s| role_of(s.prompt())).collect();
    assert_eq!(roles, vec![Role::Route, Role::Route, Role::Directive, Role::Edit]);
    assert_eq!(seen[0].prompt(), seen[1].prompt());
    assert!(seen[2].prompt().contains("ACTION region"));
    assert!(seen[3].prompt().contains("Apply a gain after the update."));
    assert!(seen[3].prompt().contains("Modify only the ACTION region"));
    let temps: Vec<f64> = seen.iter().map(|s| s.body["temperature"].as_f64().unwrap()).collect();
    assert!(temps.iter().all(|&t| t == temps[0]));
    assert!(seen.iter().all(|s| s.body["model"] == "stub-model"));
    assert!(seen.iter().all(|s| s.body["messages"][0]["role"] == "system"));
    let path = std::env::var("PATH").unwrap();
    assert_eq!(seen[0].authorization.as_deref(), Some(format!("Bearer {path}").as_str()));
}

#[test]
fn transient_errors_are_retried_then_reported() {
    let stub = serve(3, |i, _| if i < 2 { (503, "busy".into()) } else { (200, "OPERATOR".into()) });
    let mut backend = HttpBackend::new(fast_http(&stub.url));
    let req = spark_core::editor::ChatRequest {
        role: Role::Route,
        messages: vec![spark_core::editor::Message::user("pick")],
        decoding: Default::default(),
        payload: None,
    };
    assert_eq!(backend.complete(&req).unwrap().text, "OPERATOR");
    drop(stub);

    let stub = serve(2, |_, _| (400, "bad request".into()));
    let mut backend = HttpBackend::new(fast_http(&stub.url));
    match backend.complete(&req) {
        Err(BackendError::Unavailable { attempts, .. }) => assert_eq!(attempts, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn synthetic_score_matches_reference_rule() {
    let tags = TagConfig::default();
    let task = SyntheticTask::default();
    let words = ["gain(h)", "h = x", "", "gaingain", "  ", "y = gain(gain(x))", "pass"];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..500 {
        let body = |rng: &mut ChaCha8Rng| -> Vec<&str> {
            let n = rng.random_range(0..30);
            (0..n).map(|_| words[rng.random_range(0..words.len())]).collect()
        };
        let op = body(&mut rng);
        let act = body(&mut rng);
        let text = format!(
            "import x\n# <SPARK:OPERATOR>\n{}# </SPARK:OPERATOR>\n# <SPARK:ACTION>\n{}# </SPARK:ACTION>\n",
            op.iter().map(|l| format!("{l}\n")).collect::<String>(),
            act.iter().map(|l| format!("{l}\n")).collect::<String>(),
        );
        let p = TaggedProgram::parse(&text, &tags).unwrap();
        // Parsing normalizes trailing blanks; the rule sees normalized lines.
        let op_n: Vec<&str> = op.iter().map(|l| l.trim_end()).collect();
        let act_n: Vec<&str> = act.iter().map(|l| l.trim_end()).collect();
        let (f, m) = synthetic_oracle(&op_n, &act_n);
        let d = task.score(&p);
        assert!((d.fitness - f).abs() < 1e-12, "{text}");
        assert_eq!(d.macs, m);
        assert!((0.0..=1.0).contains(&d.fitness));
    }
}

#[test]
fn one_more_target_token_adds_the_action_increment() {
    let task = SyntheticTask::default();
    let tags = TagConfig::default();
    let before = task.score(&TaggedProgram::parse(SAMPLE_SEED, &tags).unwrap());
    let after = task.score(&TaggedProgram::parse(&gained_seed(), &tags).unwrap());
    assert!((after.fitness - before.fitness - 0.05).abs() < 1e-12);
}

fn python_evaluator(dir: &std::path::Path, body: &str) -> CommandEvaluator {
    let script = dir.join("eval.py");
    let mut f = std::fs::File::create(&script).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    CommandEvaluator::new(vec!["python3".into(), script.to_string_lossy().into_owned()])
}

#[test]
fn subprocess_protocol_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ev = python_evaluator(
        dir.path(),
        r#"
import json, sys
stage = sys.argv[sys.argv.index("--stage") + 1]
src = open(sys.argv[-1]).read()
n = src.count("gain")
if stage == "prelim":
    print("warming up")
    print(json.dumps({"status": "ok", "fitness": n / 10}))
else:
    print(json.dumps({"status": "ok", "fitness": n / 10, "descriptors": {"macs": 1000 + n, "params": 7}}))
"#,
    );
    let p = TaggedProgram::parse(&gained_seed(), &TagConfig::default()).unwrap();
    let full = ev.evaluate(&p, Stage::Full).unwrap().unwrap();
    assert_eq!((full.fitness, full.macs, full.params), (0.1, Some(1001), Some(7)));
    let pre = ev.evaluate(&p, Stage::Prelim).unwrap().unwrap();
    assert_eq!((pre.fitness, pre.macs), (0.1, None));
}

#[test]
fn subprocess_failures_are_typed() {
    let dir = tempfile::tempdir().unwrap();
    let p = sample_seed();
    let cases = [
        ("print('{\"status\": \"error\", \"type\": \"OOM\"}')", FailureType::EvaluatorError),
        ("print('{\"status\": \"ok\", \"fitness\": 0.5}')", FailureType::EvaluatorError),
        ("import sys; sys.exit(3)", FailureType::EvaluatorError),
        ("print('not json')", FailureType::EvaluatorError),
    ];
    for (body, kind) in cases {
        let ev = python_evaluator(dir.path(), body);
        let f = ev.evaluate(&p, Stage::Full).unwrap().unwrap_err();
        assert_eq!(f.kind, kind, "{body}");
    }
    let mut slow = python_evaluator(dir.path(), "import time; time.sleep(5)");
    slow.full_timeout_ms = 200;
    let f = slow.evaluate(&p, Stage::Full).unwrap().unwrap_err();
    assert_eq!(f.kind, FailureType::Timeout);
}
