//! Command implementations.
//!
//! Every command reads JSON input, runs the corresponding library routine,
//! and writes its machine output atomically (temp file, then rename), so a
//! rerun with identical inputs, flags, and seed produces byte-identical
//! files. Human-oriented report lines are returned to the caller instead of
//! printed, so `--quiet` can drop them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use seqtape_core::caps::DeskCaps;
use seqtape_core::compile::{decouple_compile, dilate_mps_naive, run_circuit, GATE_TOL};
use seqtape_core::error::CoreError;
use seqtape_core::ltm::machine::{self, GateStep, LocalOp, LtmSpec, MachineKind, MachineState};
use seqtape_core::ltm::unilateral::{
    compile_unilateral, for_each_branch, logical_state, sample_branch, Branch,
};
use seqtape_core::matrix::{basis_vec, unitarity_deviation, RVec};
use seqtape_core::smps::{
    lptm_run, nmf_kl, propagate_program, sample_sequential, LptmMode, NmfOptions,
    StochasticSeqProgram,
};

use crate::formats::*;

/// Error carrying the process exit code: 2 invalid input, 3 route refusal,
/// 4 cap exceeded, 1 internal invariant violation.
#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::RouteRefused { .. } => 3,
            CoreError::CapExceeded { .. } => 4,
            CoreError::Internal { .. } => 1,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

/// What a command produced besides its output files: report lines for the
/// human, an optional machine payload for stdout, and the exit code (a
/// failing check suite still renders its report before signalling failure).
#[derive(Debug, Default)]
pub struct CommandOutput {
    pub lines: Vec<String>,
    pub stdout_payload: Option<String>,
    pub code: i32,
}

/// Desk-scale caps, scaled by the `SEQTAPE_CAP` factor when set.
pub fn caps_from_env() -> Result<DeskCaps, CliError> {
    match std::env::var("SEQTAPE_CAP") {
        Err(_) => Ok(DeskCaps::default()),
        Ok(raw) => {
            let factor: u128 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::input(format!("SEQTAPE_CAP={raw:?} is not an integer")))?;
            if factor == 0 {
                return Err(CliError::input("SEQTAPE_CAP must be positive"));
            }
            Ok(DeskCaps::scaled(factor))
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw)
        .map_err(|e| CliError::input(format!("cannot parse {}: {e}", path.display())))
}

fn render<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| CliError { code: 1, message: format!("serialization failed: {e}") })?;
    s.push('\n');
    Ok(s)
}

/// Writes through a temp file in the same directory, so the final path never
/// holds a partial document.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut tmp: PathBuf = path.to_path_buf();
    let mut name = path
        .file_name()
        .ok_or_else(|| CliError::input(format!("{} has no file name", path.display())))?
        .to_os_string();
    name.push(".tmp");
    tmp.set_file_name(name);
    fs::write(&tmp, contents)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::input(format!("cannot rename onto {}: {e}", path.display())))?;
    Ok(())
}

fn emit<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, &render(value)?)
}

// ---------------------------------------------------------------------------
// compile

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Decouple,
    Naive,
}

/// Difficulty class of a bond dimension: 2 fits inside one site level, 1
/// fits a two-site gate, 3 needs the wide correlator register.
fn bond_case(d: usize, bond: usize) -> u8 {
    if bond <= d {
        2
    } else if bond <= d * d {
        1
    } else {
        3
    }
}

pub fn cmd_compile(
    input: &Path,
    out: &Path,
    route: Route,
    pad: Option<usize>,
) -> Result<CommandOutput, CliError> {
    let caps = caps_from_env()?;
    let doc: MpxJson = read_json(input)?;
    let mut mps = doc.into_mps().map_err(CliError::input)?;
    if let Some(chi) = pad {
        mps.pad_to_uniform(chi)?;
    }
    let bonds = mps.bond_dims();
    let d = mps.physical_dim();
    let cases: Vec<u8> = (0..mps.n_sites())
        .map(|k| bond_case(d, bonds[k].max(bonds[k + 1])))
        .collect();
    let circuit = match route {
        Route::Decouple => decouple_compile(&mps)?,
        Route::Naive => dilate_mps_naive(&mps)?,
    };
    let worst = circuit
        .gates
        .iter()
        .map(|g| unitarity_deviation(&g.matrix))
        .fold(0.0f64, f64::max);
    // The compiled artifact must actually run under the active caps.
    run_circuit(&circuit, &caps)?;
    emit(out, &CircuitJson::from_circuit(&circuit))?;
    let route_name = match route {
        Route::Decouple => "decouple",
        Route::Naive => "naive",
    };
    Ok(CommandOutput {
        lines: vec![
            format!(
                "route {route_name}: chi {}, {} gates, decoupled {}",
                circuit.chi,
                circuit.gates.len(),
                circuit.decoupled
            ),
            format!("site cases: {cases:?}"),
            format!("max unitarity deviation {worst:.3e}"),
            format!("wrote {}", out.display()),
        ],
        ..CommandOutput::default()
    })
}

// ---------------------------------------------------------------------------
// check

const CHECK_TOL: f64 = 1e-8;

pub fn cmd_check(
    artifact: &Path,
    suite: &str,
    out: Option<&Path>,
) -> Result<CommandOutput, CliError> {
    let caps = caps_from_env()?;
    let report = match suite {
        "canonical" => {
            let doc: MpxJson = read_json(artifact)?;
            let mps = doc.into_mps().map_err(CliError::input)?;
            let items: Vec<CheckItemJson> = (0..mps.n_sites())
                .map(|k| {
                    let deviation = mps.site_canonical_deviation(k);
                    CheckItemJson { index: k, deviation, pass: deviation <= CHECK_TOL }
                })
                .collect();
            CheckReportJson {
                suite: suite.into(),
                pass: items.iter().all(|i| i.pass),
                tol: CHECK_TOL,
                items,
                correlator_ground_weight: None,
            }
        }
        "decoupling" => {
            let doc: CircuitJson = read_json(artifact)?;
            let circuit = doc.into_circuit().map_err(CliError::input)?;
            let items: Vec<CheckItemJson> = circuit
                .gates
                .iter()
                .enumerate()
                .map(|(k, g)| {
                    let deviation = unitarity_deviation(&g.matrix);
                    CheckItemJson { index: k, deviation, pass: deviation <= GATE_TOL }
                })
                .collect();
            let outcome = run_circuit(&circuit, &caps)?;
            let weight = outcome.correlator_ground_weight;
            CheckReportJson {
                suite: suite.into(),
                pass: items.iter().all(|i| i.pass) && weight >= 1.0 - CHECK_TOL,
                tol: CHECK_TOL,
                items,
                correlator_ground_weight: Some(weight),
            }
        }
        other => return Err(CliError::input(format!("unknown suite {other:?}"))),
    };
    let verdict = if report.pass { "PASS" } else { "FAIL" };
    let worst =
        report.items.iter().map(|i| i.deviation).fold(0.0f64, f64::max);
    let mut line = format!("suite {suite}: {verdict} (max deviation {worst:.3e}");
    if let Some(w) = report.correlator_ground_weight {
        line.push_str(&format!(", correlator ground weight {w:.12}"));
    }
    line.push(')');
    let code = if report.pass { 0 } else { 2 };
    match out {
        Some(path) => {
            emit(path, &report)?;
            Ok(CommandOutput {
                lines: vec![line, format!("wrote {}", path.display())],
                stdout_payload: None,
                code,
            })
        }
        // Without --out, stdout is the machine output; the human line would
        // corrupt it, so it moves to stderr.
        None => {
            eprintln!("{line}");
            Ok(CommandOutput {
                lines: Vec::new(),
                stdout_payload: Some(render(&report)?),
                code,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    Enumerate,
    Sample,
}

/// Step budget for machine programs with control jumps.
const MAX_MACHINE_STEPS: usize = 65_536;

pub fn cmd_simulate(
    program: &Path,
    out: &Path,
    mode: SimMode,
    shots: usize,
    seed: u64,
) -> Result<CommandOutput, CliError> {
    let caps = caps_from_env()?;
    let doc: ProgramJson = read_json(program)?;
    match doc.kind.as_str() {
        "lctm" | "lptm" => simulate_machine(&doc, mode, shots, seed, out, &caps),
        "lqtm" => simulate_one_way(&doc, mode, shots, seed, out, &caps),
        "smps" => simulate_generation(&doc, mode, shots, seed, out, &caps),
        other => Err(CliError::input(format!("unknown program kind {other:?}"))),
    }
}

fn parse_steps(steps: &[StepJson]) -> Vec<GateStep> {
    steps
        .iter()
        .map(|s| GateStep { gate: s.gate, site: s.site, shift: s.shift, next: s.ctrl })
        .collect()
}

fn simulate_machine(
    doc: &ProgramJson,
    mode: SimMode,
    shots: usize,
    seed: u64,
    out: &Path,
    caps: &DeskCaps,
) -> Result<CommandOutput, CliError> {
    let control: MachineControlJson = serde_json::from_value(doc.control.clone())
        .map_err(|e| CliError::input(format!("bad control block: {e}")))?;
    if doc.q != control.proc_dim {
        return Err(CliError::input(format!(
            "Q = {} but control says proc_dim = {}",
            doc.q, control.proc_dim
        )));
    }
    let kind = if doc.kind == "lctm" { MachineKind::Classical } else { MachineKind::Probabilistic };
    let mut gates = Vec::with_capacity(control.gates.len());
    for op in &control.gates {
        gates.push(match op {
            LocalOpJson::Perm(image) => LocalOp::Permutation(image.clone()),
            LocalOpJson::Stochastic(rows) => {
                LocalOp::Stochastic(rmat_from_json(rows).map_err(CliError::input)?)
            }
        });
    }
    let spec = LtmSpec {
        kind,
        proc_dim: control.proc_dim,
        site_dim: control.site_dim,
        tape_len: control.tape_len,
        gates,
        head_start: control.head_start,
        start_proc: control.start_proc,
        final_proc: control.final_proc.clone(),
        input_sites: (0..control.tape_len).collect(),
        output_sites: (0..control.tape_len).collect(),
    };
    let steps = parse_steps(&doc.steps);
    let input = if control.input.is_empty() {
        vec![0usize; control.tape_len]
    } else {
        control.input.clone()
    };
    let tape_dim = control.site_dim.pow(control.tape_len as u32);
    let (weights, counts) = if doc.kind == "lctm" {
        let trace = machine::run(&spec, &steps, &input, MAX_MACHINE_STEPS, caps)?;
        let MachineState::Classical { tape, .. } = trace.config.state else {
            return Err(CliError::input("classical program produced a non-classical state"));
        };
        let mut idx = 0usize;
        for &digit in &tape {
            idx = idx * control.site_dim + digit;
        }
        let mut w = vec![0.0f64; tape_dim];
        w[idx] = 1.0;
        let mut c = vec![0u64; tape_dim];
        c[idx] = shots as u64;
        (w, c)
    } else {
        match mode {
            SimMode::Enumerate => {
                let w = lptm_run(&spec, &steps, &input, LptmMode::Exact, caps)?;
                (w, Vec::new())
            }
            SimMode::Sample => {
                let freq = lptm_run(&spec, &steps, &input, LptmMode::Sample { shots, seed }, caps)?;
                let c: Vec<u64> = freq.iter().map(|f| (f * shots as f64).round() as u64).collect();
                (freq, c)
            }
        }
    };
    let line = match mode {
        SimMode::Enumerate => {
            emit(
                out,
                &DistributionJson { d: control.site_dim, n: control.tape_len, weights },
            )?;
            format!("kind {}: exact tape distribution over {tape_dim} values", doc.kind)
        }
        SimMode::Sample => {
            emit(
                out,
                &CountsJson { d: control.site_dim, n: control.tape_len, shots, counts },
            )?;
            format!("kind {}: {shots} sampled tapes", doc.kind)
        }
    };
    Ok(CommandOutput {
        lines: vec![line, format!("wrote {}", out.display())],
        ..CommandOutput::default()
    })
}

fn simulate_one_way(
    doc: &ProgramJson,
    mode: SimMode,
    shots: usize,
    seed: u64,
    out: &Path,
    caps: &DeskCaps,
) -> Result<CommandOutput, CliError> {
    let control: QuantumControlJson = serde_json::from_value(doc.control.clone())
        .map_err(|e| CliError::input(format!("bad control block: {e}")))?;
    let circuit: Vec<_> = control.circuit.iter().map(QGateJson::to_core).collect();
    let plan = compile_unilateral(&circuit, control.n_qubits)?;
    if doc.q != plan.spec.proc_dim {
        return Err(CliError::input(format!(
            "Q = {} but the compiled machine needs {}",
            doc.q, plan.spec.proc_dim
        )));
    }
    let dim = 1usize << control.n_qubits;
    let input_index = if control.input.is_empty() {
        0
    } else {
        if control.input.len() != control.n_qubits
            || control.input.iter().any(|&b| b > 1)
        {
            return Err(CliError::input("input must list one bit per qubit"));
        }
        control.input.iter().fold(0usize, |acc, &b| (acc << 1) | b)
    };
    let input = basis_vec(dim, input_index);
    let input: Vec<_> = input.iter().copied().collect();
    match mode {
        SimMode::Enumerate => {
            let mut collected: Vec<Branch> = Vec::new();
            for_each_branch(&plan, &input, caps, |b| collected.push(b.clone()))?;
            let mut branches = Vec::with_capacity(collected.len());
            for b in &collected {
                let logical = logical_state(&plan, &b.state)?;
                branches.push(BranchJson {
                    outcomes: b.outcomes.clone(),
                    probability: b.probability,
                    state: logical.iter().map(|z| cx(*z)).collect(),
                });
            }
            let count = branches.len();
            emit(out, &BranchesJson { n_qubits: control.n_qubits, branches })?;
            Ok(CommandOutput {
                lines: vec![
                    format!("kind lqtm: {count} measurement branches"),
                    format!("wrote {}", out.display()),
                ],
                ..CommandOutput::default()
            })
        }
        SimMode::Sample => {
            let n_pairs = plan.pairs.len();
            let mut counts = vec![0u64; plan.branch_count()];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..shots {
                let branch = sample_branch(&plan, &input, caps, &mut rng)?;
                let idx = branch.outcomes.iter().fold(0usize, |acc, &m| acc * 4 + m);
                counts[idx] += 1;
            }
            emit(
                out,
                &BranchCountsJson { n_qubits: control.n_qubits, n_pairs, shots, counts },
            )?;
            Ok(CommandOutput {
                lines: vec![
                    format!("kind lqtm: {shots} sampled branches over {n_pairs} pairs"),
                    format!("wrote {}", out.display()),
                ],
                ..CommandOutput::default()
            })
        }
    }
}

fn simulate_generation(
    doc: &ProgramJson,
    mode: SimMode,
    shots: usize,
    seed: u64,
    out: &Path,
    caps: &DeskCaps,
) -> Result<CommandOutput, CliError> {
    let control: SmpsControlJson = serde_json::from_value(doc.control.clone())
        .map_err(|e| CliError::input(format!("bad control block: {e}")))?;
    if doc.q != control.chi {
        return Err(CliError::input(format!(
            "Q = {} but control says chi = {}",
            doc.q, control.chi
        )));
    }
    let n = control.maps.len();
    if !doc.steps.is_empty() {
        if doc.steps.len() != n {
            return Err(CliError::input("steps must list each generation map once"));
        }
        for (k, s) in doc.steps.iter().enumerate() {
            if s.gate != k || s.site != n - 1 - k {
                return Err(CliError::input(format!(
                    "step {k} must apply gate {k} at site {}",
                    n - 1 - k
                )));
            }
        }
    }
    let dim = control.d * control.chi;
    let mut steps = Vec::with_capacity(n);
    for (k, rows) in control.maps.iter().enumerate() {
        let m = rmat_from_json(rows).map_err(CliError::input)?;
        if m.shape() != (dim, dim) {
            return Err(CliError::input(format!(
                "map {k} is {}x{}, expected {dim}x{dim}",
                m.nrows(),
                m.ncols()
            )));
        }
        steps.push(m);
    }
    if control.init_correlator.len() != control.chi {
        return Err(CliError::input("init_correlator length must equal chi"));
    }
    let prog = StochasticSeqProgram {
        d: control.d,
        chi: control.chi,
        steps,
        init_correlator: RVec::from_iterator(
            control.init_correlator.len(),
            control.init_correlator.iter().copied(),
        ),
    };
    match mode {
        SimMode::Enumerate => {
            let (tape, correlator) = propagate_program(&prog, caps)?;
            let peak = correlator.iter().cloned().fold(0.0, f64::max);
            emit(out, &DistributionJson { d: control.d, n, weights: tape })?;
            Ok(CommandOutput {
                lines: vec![
                    format!("kind smps: exact generation, correlator peak {peak:.12}"),
                    format!("wrote {}", out.display()),
                ],
                ..CommandOutput::default()
            })
        }
        SimMode::Sample => {
            let counts = sample_sequential(&prog, shots, seed, caps)?;
            emit(out, &CountsJson { d: control.d, n, shots, counts })?;
            Ok(CommandOutput {
                lines: vec![
                    format!("kind smps: {shots} sampled tapes"),
                    format!("wrote {}", out.display()),
                ],
                ..CommandOutput::default()
            })
        }
    }
}

// ---------------------------------------------------------------------------
// nmf

pub fn cmd_nmf(
    matrix: &Path,
    out: &Path,
    k: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<CommandOutput, CliError> {
    let doc: NmfMatrixJson = read_json(matrix)?;
    let a = rmat_from_json(&doc.matrix).map_err(CliError::input)?;
    let result = nmf_kl(&a, k, NmfOptions { max_iter, tol, seed })?;
    emit(
        out,
        &NmfJson {
            k: result.k,
            p: rmat_to_json(&result.p),
            d: rvec_to_json(&result.d),
            qt: rmat_to_json(&result.qt),
            divergence: result.divergence,
            iterations: result.iterations,
            trace: result.trace.clone(),
        },
    )?;
    Ok(CommandOutput {
        lines: vec![
            format!(
                "k {}: divergence {:.6e} after {} rounds",
                result.k, result.divergence, result.iterations
            ),
            format!("wrote {}", out.display()),
        ],
        ..CommandOutput::default()
    })
}
