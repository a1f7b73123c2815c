//! Document round-trips, subcommand behaviour, and exit codes.

use causim::exec::quantum_distribution;
use causim::fixtures;
use causim::protocol::SettingVector;
use causim_cli::docs::{
    parse_json, to_json_pretty, CausalModelDocument, CertificateDocument, CircuitDocument,
    DistributionDocument, ProtocolDocument,
};
use causim_cli::runner::family_document_for;
use causim_cli::{execute, parse_command};

fn run(args: &[&str]) -> causim_cli::CommandOutput {
    let command = parse_command(args.iter().map(|s| s.to_string())).expect("parse");
    match execute(command) {
        Ok(out) => out,
        Err(e) => causim_cli::CommandOutput {
            code: match e {
                causim::Error::InvalidProtocol { .. } => 1,
                causim::Error::Indeterminate(_) => 3,
                _ => 2,
            },
            text: format!("error: {e}"),
            json: serde_json::json!({"error": e.to_string()}),
        },
    }
}

fn temp_write(dir: &tempfile::TempDir, name: &str, contents: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, contents).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn protocol_document_round_trip_is_bit_exact() {
    let spec = fixtures::switch_protocol();
    let doc = ProtocolDocument::from_spec(&spec);
    let text = to_json_pretty(&doc);
    let doc2: ProtocolDocument = parse_json(&text).unwrap();
    let spec2 = doc2.to_spec().unwrap();
    for (a, b) in spec.step_unitaries().iter().zip(spec2.step_unitaries()) {
        assert_eq!(a, b, "step operators must round-trip bit-exactly");
    }
    for (ma, mb) in spec.measurements().iter().zip(spec2.measurements()) {
        assert_eq!(ma, mb);
    }
    // and a second serialisation is byte-identical
    let text2 = to_json_pretty(&ProtocolDocument::from_spec(&spec2));
    assert_eq!(text, text2);
}

#[test]
fn documents_reject_unknown_fields_and_bad_kinds() {
    let spec = fixtures::trivial_single_party();
    let doc = ProtocolDocument::from_spec(&spec);
    let mut value = serde_json::to_value(&doc).unwrap();
    value["surprise"] = serde_json::json!(1);
    let text = serde_json::to_string(&value).unwrap();
    assert!(parse_json::<ProtocolDocument>(&text).is_err());

    let mut wrong_kind = doc.clone();
    wrong_kind.kind = "circuit".into();
    assert!(wrong_kind.to_spec().is_err());
}

#[test]
fn simulate_command_prints_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let doc = ProtocolDocument::from_spec(&fixtures::switch_protocol());
    let path = temp_write(&dir, "switch.json", &to_json_pretty(&doc));
    let out = run(&["simulate", &path, "--x", "0,1,1"]);
    assert_eq!(out.code, 0);
    assert!(out.text.contains("p([0, 0, 0]) = 0.3125"));
    let out = run(&["simulate", &path, "--x", "0,7,1"]);
    assert_eq!(out.code, 2, "setting outside the domain is an input error");
}

#[test]
fn too_few_steps_is_a_structural_input_error() {
    // two parties but a single step: structurally rejected with exit 2
    let mut doc = ProtocolDocument::from_spec(&fixtures::all_identity_protocol());
    doc.steps.truncate(1);
    doc.flag_dim = Some(2);
    let dir = tempfile::tempdir().unwrap();
    let path = temp_write(&dir, "short.json", &to_json_pretty(&doc));
    let out = run(&["simulate", &path, "--x", "0,0"]);
    assert_eq!(out.code, 2);
    assert!(out.text.contains("at least one step per party"), "{}", out.text);
}

#[test]
fn invalid_protocols_fail_simulation_with_leak_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let doc = ProtocolDocument::from_spec(&fixtures::all_identity_protocol());
    let path = temp_write(&dir, "idle.json", &to_json_pretty(&doc));
    let out = run(&["simulate", &path, "--x", "0,0"]);
    assert_eq!(out.code, 1);
    assert!(out.text.contains("flag leakage"), "{}", out.text);
}

#[test]
fn switch_demo_passes_and_reports_are_deterministic() {
    let first = run(&["switch-demo"]);
    assert_eq!(first.code, 0, "{}", first.text);
    let second = run(&["switch-demo"]);
    assert_eq!(first.text, second.text);
    assert_eq!(
        serde_json::to_string(&first.json).unwrap(),
        serde_json::to_string(&second.json).unwrap()
    );
}

#[test]
fn verify_command_passes_on_generated_protocols() {
    let dir = tempfile::tempdir().unwrap();
    let params = fixtures::RandomProtocolParams { n_parties: 2, system_dim: 2, t_steps: 3 };
    let spec = fixtures::random_protocol(&params, 12).unwrap();
    let doc = ProtocolDocument::from_spec(&spec);
    let path = temp_write(&dir, "random.json", &to_json_pretty(&doc));
    let out = run(&["verify", &path]);
    assert_eq!(out.code, 0, "{}", out.text);
    assert!(out.text.contains("PASS"));
}

#[test]
fn lemmas_command_is_seeded_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let doc = ProtocolDocument::from_spec(&fixtures::switch_protocol());
    let path = temp_write(&dir, "switch.json", &to_json_pretty(&doc));
    let a = run(&["lemmas", &path, "--seed", "7"]);
    let b = run(&["lemmas", &path, "--seed", "7"]);
    assert_eq!(a.code, 0, "{}", a.text);
    assert_eq!(a.text, b.text);
}

#[test]
fn extract_emits_a_rechainable_model_document() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fixtures::switch_protocol();
    let doc = ProtocolDocument::from_spec(&spec);
    let path = temp_write(&dir, "switch.json", &to_json_pretty(&doc));
    let out_path = dir.path().join("model.json");
    let out = run(&[
        "extract",
        &path,
        "--x",
        "0,1,1",
        "-o",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 0, "{}", out.text);
    let model_doc: CausalModelDocument =
        parse_json(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    model_doc.check_rows().unwrap();
    // re-chain the archived tables without re-simulation
    let archived = model_doc.distribution().unwrap();
    let x = SettingVector::new(&spec, vec![0, 1, 1]).unwrap();
    let quantum = quantum_distribution(&spec, &x).unwrap();
    assert!(archived.max_abs_diff(&quantum) < 1e-9);
}

#[test]
fn rewrite_command_produces_an_equivalent_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let circuit_doc = CircuitDocument::from_circuit(&fixtures::switch_circuit());
    let circuit_path = temp_write(&dir, "circuit.json", &to_json_pretty(&circuit_doc));
    let protocol_path = dir.path().join("rewritten.json");
    let out = run(&[
        "rewrite",
        &circuit_path,
        "-o",
        protocol_path.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 0, "{}", out.text);
    let out = run(&[
        "simulate",
        protocol_path.to_str().unwrap(),
        "--x",
        "0,1,1",
    ]);
    assert_eq!(out.code, 0);
    assert!(out.text.contains("p([0, 0, 0]) = 0.3125"), "{}", out.text);
}

#[test]
fn circuit_document_round_trips() {
    let circuit = fixtures::random_circuit(3);
    let doc = CircuitDocument::from_circuit(&circuit);
    let text = to_json_pretty(&doc);
    let doc2: CircuitDocument = parse_json(&text).unwrap();
    let circuit2 = doc2.to_circuit().unwrap();
    for x in circuit.all_settings() {
        let a = causim::equiv::simulate_circuit(&circuit, &x).unwrap();
        let b = causim::equiv::simulate_circuit(&circuit2, &x).unwrap();
        assert!(a.max_abs_diff(&b) == 0.0);
    }
}

#[test]
fn polytope_check_classifies_families() {
    let dir = tempfile::tempdir().unwrap();
    // a quantum family is inside
    let params = fixtures::RandomProtocolParams { n_parties: 2, system_dim: 2, t_steps: 2 };
    let spec = fixtures::random_protocol(&params, 8).unwrap();
    let family_doc = family_document_for(&spec).unwrap();
    let inside_path = temp_write(&dir, "inside.json", &to_json_pretty(&family_doc));
    let out = run(&["polytope-check", &inside_path]);
    assert_eq!(out.code, 0, "{}", out.text);
    let cert: CertificateDocument = parse_json(&out.text).unwrap();
    assert_eq!(cert.status, "inside");

    // the two-way signalling family is outside
    let signalling = fixtures::signalling_family();
    let doc = DistributionDocument::from_family(
        &signalling,
        &[vec![0, 1], vec![0, 1]],
    );
    let outside_path = temp_write(&dir, "outside.json", &to_json_pretty(&doc));
    let cert_path = dir.path().join("certificate.json");
    let out = run(&[
        "polytope-check",
        &outside_path,
        "-o",
        cert_path.to_str().unwrap(),
    ]);
    assert_eq!(out.code, 1, "{}", out.text);
    let cert: CertificateDocument =
        parse_json(&std::fs::read_to_string(&cert_path).unwrap()).unwrap();
    assert_eq!(cert.status, "outside");
    assert!(cert.margin.unwrap() > 1e-6);
}

#[test]
fn binary_smoke_test() {
    let exe = env!("CARGO_BIN_EXE_causim");
    let out = std::process::Command::new(exe)
        .arg("switch-demo")
        .output()
        .expect("binary runs");
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    // malformed input exits with code 2
    let out = std::process::Command::new(exe)
        .args(["simulate", "/nonexistent.json", "--x", "0"])
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
}
