//! Subcommand dispatch and report assembly.
//!
//! Exit codes: 0 every check passed, 1 a check failed, 2 malformed input,
//! 3 a numerical routine reported an indeterminate answer. The
//! `CAUSIM_VERBOSITY` environment variable (`quiet`, `normal`, `verbose`)
//! selects how much detail the human-readable report carries; `--json`
//! switches stdout to the machine-readable report. Reports are
//! deterministic for fixed inputs and seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use causim::dist::DistributionFamily;
use causim::exec::{identity_report, quantum_distribution};
use causim::extract::{
    causal_distribution, extract_causal_model, naive_mixture_distribution, verify_theorem1,
    verify_theorem1_unbounded,
};
use causim::fixtures;
use causim::polytope::{enumerate_deterministic, membership, PolytopeCertificate};
use causim::protocol::{validate_protocol, ProtocolSpec, SettingVector};
use causim::{Error, Result};

use crate::docs::{
    parse_json, to_json_pretty, CausalModelDocument, CertificateDocument, CircuitDocument,
    DistributionDocument, ProtocolDocument,
};

#[derive(Parser, Debug)]
#[command(
    name = "causim",
    about = "Simulate protocols with coherently controlled causal order, extract the \
             classical causal model that reproduces them, and certify causality",
    version
)]
struct Cli {
    /// Emit the machine-readable JSON report on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the outcome distribution of a protocol at one setting vector.
    Simulate {
        /// Protocol document (JSON).
        doc: PathBuf,
        /// Comma-separated per-party settings, e.g. `--x 0,1,1`.
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<usize>,
    },
    /// Extract the classical causal model at one setting vector and emit
    /// it as a causal-model document.
    Extract {
        doc: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<usize>,
        /// Write the document here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check that the extracted model reproduces the protocol statistics
    /// at every setting vector.
    Verify {
        doc: PathBuf,
        /// Allow settings domains beyond the sweep guard.
        #[arg(long)]
        allow_large: bool,
    },
    /// Run the orthogonality and telescoping identity checks.
    Lemmas {
        doc: PathBuf,
        /// Seed for subsampled checks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How many setting vectors get the expensive end-evolved
        /// orthogonality checks.
        #[arg(long, default_value_t = 2)]
        orthogonality_settings: usize,
    },
    /// Run the built-in quantum switch end to end and check its
    /// closed-form values.
    SwitchDemo {
        /// Also write the switch as a protocol document.
        #[arg(long)]
        emit_protocol: Option<PathBuf>,
        /// Also write the switch as an individual-gate circuit document.
        #[arg(long)]
        emit_circuit: Option<PathBuf>,
    },
    /// Rewrite an individual-gate circuit into a protocol document.
    Rewrite {
        doc: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Test a two-party distribution family for causal-polytope
    /// membership.
    PolytopeCheck {
        doc: PathBuf,
        /// Write the certificate document here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Verbosity {
    Quiet,
    Normal,
    Verbose,
}

fn verbosity() -> Verbosity {
    match std::env::var("CAUSIM_VERBOSITY").as_deref() {
        Ok("quiet") => Verbosity::Quiet,
        Ok("verbose") => Verbosity::Verbose,
        _ => Verbosity::Normal,
    }
}

/// A finished command: exit code, human-readable report, machine report.
pub struct CommandOutput {
    pub code: i32,
    pub text: String,
    pub json: Value,
}

fn code_for_error(e: &Error) -> i32 {
    match e {
        Error::InvalidProtocol { .. } => 1,
        Error::Indeterminate(_) => 3,
        _ => 2,
    }
}

/// Parse arguments (without the program name) and run the command,
/// printing the report to stdout and errors to stderr.
pub fn run_cli<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let mut full = vec!["causim".to_string()];
    full.extend(args);
    let cli = match Cli::try_parse_from(full) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version via special error kinds
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            if cli.json {
                println!("{}", to_json_pretty(&out.json));
            } else if !out.text.is_empty() {
                println!("{}", out.text.trim_end());
            }
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            code_for_error(&e)
        }
    }
}

/// Run a command and collect its output (used by tests and `run_cli`).
pub fn execute(command: Command) -> Result<CommandOutput> {
    match command {
        Command::Simulate { doc, x } => simulate(&doc, &x),
        Command::Extract { doc, x, output } => extract(&doc, &x, output.as_deref()),
        Command::Verify { doc, allow_large } => verify(&doc, allow_large),
        Command::Lemmas { doc, seed, orthogonality_settings } => {
            lemmas(&doc, seed, orthogonality_settings)
        }
        Command::SwitchDemo { emit_protocol, emit_circuit } => {
            switch_demo(emit_protocol.as_deref(), emit_circuit.as_deref())
        }
        Command::Rewrite { doc, output } => rewrite(&doc, output.as_deref()),
        Command::PolytopeCheck { doc, output } => polytope_check(&doc, output.as_deref()),
    }
}

/// Parse a command line (without the program name) into a command; exposed
/// for tests that drive `execute` directly.
pub fn parse_command<I>(args: I) -> std::result::Result<Command, String>
where
    I: IntoIterator<Item = String>,
{
    let mut full = vec!["causim".to_string()];
    full.extend(args);
    Cli::try_parse_from(full)
        .map(|cli| cli.command)
        .map_err(|e| e.to_string())
}

fn load_protocol(path: &Path) -> Result<ProtocolSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Structural(format!("cannot read {}: {e}", path.display())))?;
    let doc: ProtocolDocument = parse_json(&text)?;
    doc.to_spec()
}

fn settings_for(spec: &ProtocolSpec, x: &[usize]) -> Result<SettingVector> {
    SettingVector::new(spec, x.to_vec())
}

fn write_or_inline(
    output: Option<&Path>,
    document: &str,
    summary: String,
    json: Value,
) -> Result<CommandOutput> {
    match output {
        Some(path) => {
            std::fs::write(path, document).map_err(|e| {
                Error::Structural(format!("cannot write {}: {e}", path.display()))
            })?;
            Ok(CommandOutput {
                code: 0,
                text: format!("{summary}\nwrote {}", path.display()),
                json,
            })
        }
        None => Ok(CommandOutput { code: 0, text: document.to_string(), json }),
    }
}

fn simulate(path: &Path, x: &[usize]) -> Result<CommandOutput> {
    let spec = load_protocol(path)?;
    let xv = settings_for(&spec, x)?;
    let dist = quantum_distribution(&spec, &xv)?;
    let mut text = format!("outcome distribution at settings {x:?}\n");
    let mut rows = Vec::new();
    for (outcomes, p) in dist.iter() {
        writeln!(text, "  p({outcomes:?}) = {p}").unwrap();
        rows.push(json!({"a": outcomes, "p": p}));
    }
    writeln!(text, "  total = {}", dist.total()).unwrap();
    Ok(CommandOutput {
        code: 0,
        text,
        json: json!({
            "command": "simulate",
            "x": x,
            "distribution": rows,
            "total": dist.total(),
        }),
    })
}

fn extract(path: &Path, x: &[usize], output: Option<&Path>) -> Result<CommandOutput> {
    let spec = load_protocol(path)?;
    let xv = settings_for(&spec, x)?;
    let model = extract_causal_model(&spec, &xv)?;
    let doc = CausalModelDocument::from_model(&model);
    let rendered = to_json_pretty(&doc);
    let summary = format!(
        "extracted causal model at settings {x:?}: {} nodes, {} warnings",
        doc.nodes.len(),
        doc.warnings.len()
    );
    let json = json!({
        "command": "extract",
        "x": x,
        "nodes": doc.nodes.len(),
        "warnings": doc.warnings,
        "model": serde_json::to_value(&doc).expect("serializable"),
    });
    write_or_inline(output, &rendered, summary, json)
}

fn verify(path: &Path, allow_large: bool) -> Result<CommandOutput> {
    let spec = load_protocol(path)?;
    let report = if allow_large {
        verify_theorem1_unbounded(&spec)?
    } else {
        verify_theorem1(&spec)?
    };
    let mut text = String::new();
    if verbosity() >= Verbosity::Verbose {
        for d in &report.per_setting {
            writeln!(text, "  x = {:?}: max deviation {:.3e}", d.x, d.max_deviation)
                .unwrap();
        }
    }
    writeln!(
        text,
        "causal-model reproduction over {} settings: max deviation {:.3e} \
         (tolerance {:.1e}) -> {}",
        report.per_setting.len(),
        report.max_deviation,
        report.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    )
    .unwrap();
    let json = json!({
        "command": "verify",
        "settings": report.per_setting.iter().map(|d| json!({
            "x": d.x,
            "max_deviation": d.max_deviation,
        })).collect::<Vec<_>>(),
        "max_deviation": report.max_deviation,
        "tolerance": report.tolerance,
        "pass": report.pass,
    });
    Ok(CommandOutput { code: i32::from(!report.pass), text, json })
}

fn lemmas(path: &Path, seed: u64, orthogonality_settings: usize) -> Result<CommandOutput> {
    let spec = load_protocol(path)?;
    let report = identity_report(&spec, seed, orthogonality_settings)?;
    let pass = report.passes();
    let mut text = String::new();
    writeln!(text, "identity checks (seed {seed}):").unwrap();
    writeln!(
        text,
        "  end-evolved pre-measurement overlaps : {:.3e} (tolerance {:.1e})",
        report.psi_orthogonality,
        causim::tol::ORTHOGONALITY
    )
    .unwrap();
    writeln!(
        text,
        "  end-evolved post-measurement overlaps: {:.3e} (tolerance {:.1e})",
        report.phi_orthogonality,
        causim::tol::ORTHOGONALITY
    )
    .unwrap();
    writeln!(
        text,
        "  branch numerator/denominator match   : {:.3e} (tolerance {:.1e})",
        report.branch_cancellation,
        causim::tol::TABLE_ROW
    )
    .unwrap();
    writeln!(
        text,
        "  first-stage denominator vs one       : {:.3e} (tolerance {:.1e})",
        report.first_denominator,
        causim::tol::DISTRIBUTION
    )
    .unwrap();
    writeln!(
        text,
        "  final numerators vs distribution     : {:.3e} (tolerance {:.1e})",
        report.final_numerator,
        causim::tol::DISTRIBUTION
    )
    .unwrap();
    writeln!(
        text,
        "  stage handoff mass balance           : {:.3e} (tolerance {:.1e})",
        report.stage_handoff,
        causim::tol::DISTRIBUTION
    )
    .unwrap();
    if report.sampled {
        writeln!(text, "  (history set subsampled, seed {seed})").unwrap();
    }
    if verbosity() >= Verbosity::Verbose {
        writeln!(
            text,
            "  orthogonality settings: {:?}",
            report.orthogonality_settings
        )
        .unwrap();
    }
    writeln!(text, "identity checks -> {}", if pass { "PASS" } else { "FAIL" }).unwrap();
    let json = json!({
        "command": "lemmas",
        "seed": seed,
        "sampled": report.sampled,
        "orthogonality_settings": report.orthogonality_settings,
        "psi_orthogonality": report.psi_orthogonality,
        "phi_orthogonality": report.phi_orthogonality,
        "branch_cancellation": report.branch_cancellation,
        "first_denominator": report.first_denominator,
        "final_numerator": report.final_numerator,
        "stage_handoff": report.stage_handoff,
        "pass": pass,
    });
    Ok(CommandOutput { code: i32::from(!pass), text, json })
}

fn switch_demo(
    emit_protocol: Option<&Path>,
    emit_circuit: Option<&Path>,
) -> Result<CommandOutput> {
    let tol = causim::tol::REFERENCE_VALUE;
    let spec = fixtures::switch_protocol();
    let x = SettingVector::new(&spec, vec![0, 1, 1])?;
    let validity = validate_protocol(&spec)?;
    let quantum = quantum_distribution(&spec, &x)?;
    let mixture = naive_mixture_distribution(&spec, &x)?;
    let model = extract_causal_model(&spec, &x)?;
    let causal = causal_distribution(&model);
    let theorem = verify_theorem1(&spec)?;

    let p_q = quantum.prob(&[0, 0, 0])?;
    let p_nc = mixture.prob(&[0, 0, 0])?;
    let p_c = causal.prob(&[0, 0, 0])?;
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, got: f64, expected: f64| {
        if (got - expected).abs() > tol {
            failures.push(format!("{name}: got {got}, expected {expected}"));
        }
    };
    check("p_quantum(0,0,0)", p_q, 5.0 / 16.0);
    check("p_mixture(0,0,0)", p_nc, 3.0 / 16.0);
    check("p_causal(0,0,0)", p_c, 5.0 / 16.0);

    let mut table_lines = String::new();
    let mut table_rows = Vec::new();
    for r in fixtures::switch_reference_values() {
        let history = causim::exec::History::new(
            r.history
                .iter()
                .map(|&(l, a, s)| causim::exec::HistoryEntry::new(l, a, s))
                .collect(),
        )?;
        let (name, got) = match r.outcome {
            None => (
                format!("p(next={} | {:?})", r.party, r.history),
                model.next_prob(&history, r.party),
            ),
            Some(a) => (
                format!("p(a={a} for party {} | {:?})", r.party, r.history),
                model.result_prob(&history, r.party, a),
            ),
        };
        let got = got.ok_or_else(|| {
            Error::Indeterminate(format!("reference node missing for {name}"))
        })?;
        check(&name, got, r.expected);
        writeln!(table_lines, "  {name} = {got}  [expected {}]", r.expected).unwrap();
        table_rows.push(json!({
            "history": r.history,
            "party": r.party,
            "outcome": r.outcome,
            "value": got,
            "expected": r.expected,
        }));
    }
    if !theorem.pass || theorem.max_deviation > tol {
        failures.push(format!(
            "model reproduction deviation {:.3e} above {tol:.1e}",
            theorem.max_deviation
        ));
    }
    if !validity.valid {
        failures.push(format!("switch failed validation: leak {}", validity.max_leak));
    }

    let mut text = String::new();
    writeln!(text, "quantum switch demo (settings x1=0, x2=1, x3=1)").unwrap();
    writeln!(text, "  validity: max flag leakage {:.3e}", validity.max_leak).unwrap();
    writeln!(text, "  p_quantum(0,0,0) = {p_q}   [expected 5/16 = 0.3125]").unwrap();
    writeln!(text, "  p_mixture(0,0,0) = {p_nc}   [expected 3/16 = 0.1875]").unwrap();
    writeln!(text, "  p_causal (0,0,0) = {p_c}   [expected 5/16 = 0.3125]").unwrap();
    if verbosity() >= Verbosity::Normal {
        writeln!(text, "extracted tables:").unwrap();
        text.push_str(&table_lines);
    }
    writeln!(
        text,
        "model reproduction over {} settings: max deviation {:.3e}",
        theorem.per_setting.len(),
        theorem.max_deviation
    )
    .unwrap();
    let pass = failures.is_empty();
    for f in &failures {
        writeln!(text, "  FAILED {f}").unwrap();
    }
    writeln!(
        text,
        "switch demo ({} reference values at {tol:.1e}) -> {}",
        14 + 1,
        if pass { "PASS" } else { "FAIL" }
    )
    .unwrap();

    if let Some(path) = emit_protocol {
        let doc = ProtocolDocument::from_spec(&spec);
        std::fs::write(path, to_json_pretty(&doc))
            .map_err(|e| Error::Structural(format!("cannot write {}: {e}", path.display())))?;
        writeln!(text, "wrote protocol document to {}", path.display()).unwrap();
    }
    if let Some(path) = emit_circuit {
        let doc = CircuitDocument::from_circuit(&fixtures::switch_circuit());
        std::fs::write(path, to_json_pretty(&doc))
            .map_err(|e| Error::Structural(format!("cannot write {}: {e}", path.display())))?;
        writeln!(text, "wrote circuit document to {}", path.display()).unwrap();
    }

    let json = json!({
        "command": "switch_demo",
        "x": [0, 1, 1],
        "max_leak": validity.max_leak,
        "p_quantum_000": p_q,
        "p_mixture_000": p_nc,
        "p_causal_000": p_c,
        "tables": table_rows,
        "theorem_max_deviation": theorem.max_deviation,
        "tolerance": tol,
        "failures": failures,
        "pass": pass,
    });
    Ok(CommandOutput { code: i32::from(!pass), text, json })
}

fn rewrite(path: &Path, output: Option<&Path>) -> Result<CommandOutput> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Structural(format!("cannot read {}: {e}", path.display())))?;
    let doc: CircuitDocument = parse_json(&text)?;
    let circuit = doc.to_circuit()?;
    let rewritten = causim::equiv::rewrite_circuit(&circuit)?;
    let protocol_doc = ProtocolDocument::from_spec(&rewritten.spec);
    let rendered = to_json_pretty(&protocol_doc);
    let mut summary = format!(
        "rewrote {} gates into a {}-step protocol",
        circuit.gate_count(),
        rewritten.spec.t_steps()
    );
    if !rewritten.fires_once {
        summary.push_str(
            "\nwarning: some branch fires a party other than exactly once; \
             the protocol will fail validation",
        );
    }
    let json = json!({
        "command": "rewrite",
        "gates": circuit.gate_count(),
        "steps": rewritten.spec.t_steps(),
        "fires_once": rewritten.fires_once,
        "protocol": serde_json::to_value(&protocol_doc).expect("serializable"),
    });
    write_or_inline(output, &rendered, summary, json)
}

fn polytope_check(path: &Path, output: Option<&Path>) -> Result<CommandOutput> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Structural(format!("cannot read {}: {e}", path.display())))?;
    let doc: DistributionDocument = parse_json(&text)?;
    let family = doc.to_family()?;
    let vertices = enumerate_deterministic(family.alphabets(), family.settings_sizes())?;
    let certificate = membership(&family, &vertices)?;
    let cert_doc = CertificateDocument::from_certificate(&certificate);
    let rendered = to_json_pretty(&cert_doc);
    let (code, summary) = match &certificate {
        PolytopeCertificate::Inside { residual, weights } => (
            0,
            format!(
                "inside the causal polytope: {} vertices carry weight, \
                 reconstruction residual {residual:.3e}",
                weights.len()
            ),
        ),
        PolytopeCertificate::Outside { margin, .. } => (
            1,
            format!("outside the causal polytope: separation margin {margin:.3e}"),
        ),
    };
    let json = json!({
        "command": "polytope_check",
        "vertices": vertices.len(),
        "status": cert_doc.status,
        "certificate": serde_json::to_value(&cert_doc).expect("serializable"),
    });
    let mut out = write_or_inline(output, &rendered, summary, json)?;
    out.code = code;
    Ok(out)
}

/// Distribution-family document of a protocol's quantum statistics
/// (assembled per setting vector); used by tests and demos.
pub fn family_document_for(spec: &ProtocolSpec) -> Result<DistributionDocument> {
    let all = spec.all_settings();
    let mut dists = Vec::with_capacity(all.len());
    for x in &all {
        dists.push(quantum_distribution(spec, x)?);
    }
    let sizes: Vec<usize> = spec.settings_domains().iter().map(Vec::len).collect();
    let family = DistributionFamily::from_distributions(sizes, &dists);
    Ok(DistributionDocument::from_family(&family, spec.settings_domains()))
}
