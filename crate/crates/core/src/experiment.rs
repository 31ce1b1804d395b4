//! End-to-end experiments: generate a workload, relay it through a 1:1
//! baseline and through the obfuscating proxies, attack both captures and
//! report overheads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::harness::{
    bandwidth_overhead, generate_flows_with, ground_truth_pairs, latency_overhead, read_traces_csv,
    roc, score_matrix, write_traces_csv, CsvError, Direction, FlowId, FlowTrace, GeneratorParams,
    OverheadError, Profile, RocCurve, RocError, DEFAULT_FEATURE_WINDOW,
};
use crate::mapping::{ObfuscationConfig, Strategy};
use crate::sim::{simulate, ScriptedFlow, SimOptions, SimReport};

pub const INGRESS_CSV: &str = "ingress.csv";
pub const EGRESS_CSV: &str = "egress.csv";
pub const INGRESS_BASELINE_CSV: &str = "ingress_baseline.csv";
pub const EGRESS_BASELINE_CSV: &str = "egress_baseline.csv";
pub const OVERHEAD_TXT: &str = "overhead.txt";
pub const ROC_BASELINE_CSV: &str = "roc_baseline.csv";
pub const ROC_MUFFLER_CSV: &str = "roc_muffler.csv";
pub const RAPTOR_SCORES_CSV: &str = "raptor_scores.csv";
pub const ROC_ATTACK_CSV: &str = "roc_attack.csv";

/// FPR operating points reported by the attack table.
pub const REPORT_FPRS: [f64; 2] = [0.1, 0.01];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Trace {
        path: PathBuf,
        #[source]
        source: CsvError,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0} contains no flows")]
    NoFlows(PathBuf),
    #[error(transparent)]
    Roc(#[from] RocError),
    #[error(transparent)]
    Overhead(#[from] OverheadError),
    #[error("simulation failed: {0}")]
    Simulation(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub profile: Profile,
    pub n_flows: usize,
    pub duration: Duration,
    pub seed: u64,
    pub obfuscation: ObfuscationConfig,
    pub base_connections: usize,
    pub generator: GeneratorParams,
    pub window: Duration,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            profile: Profile::Browsing,
            n_flows: 50,
            duration: Duration::from_secs(60),
            seed: 1,
            obfuscation: ObfuscationConfig::default(),
            base_connections: 8,
            generator: GeneratorParams::default(),
            window: DEFAULT_FEATURE_WINDOW,
        }
    }
}

/// Result of attacking one capture.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub ingress_ids: Vec<FlowId>,
    pub egress_ids: Vec<FlowId>,
    pub scores: Vec<Vec<f64>>,
    pub truth: BTreeMap<FlowId, FlowId>,
    pub curve: RocCurve,
}

impl AttackOutcome {
    pub fn tpr_at_fpr(&self, fpr: f64) -> f64 {
        self.curve.tpr_at_fpr(fpr)
    }

    /// Writes `ingress_id,egress_id,score,truth` rows.
    pub fn write_scores_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["ingress_id", "egress_id", "score", "truth"])?;
        for (i, row) in self.scores.iter().enumerate() {
            let fi = self.ingress_ids[i];
            for (j, score) in row.iter().enumerate() {
                let fe = self.egress_ids[j];
                let truth = self.truth.get(&fi) == Some(&fe);
                writer.write_record([
                    fi.to_string(),
                    fe.to_string(),
                    score.to_string(),
                    u8::from(truth).to_string(),
                ])?;
            }
        }
        writer.flush()?;
        Ok(())
    }
}

/// Scores every ingress/egress pair, labels pairs by averaged flow
/// similarity and sweeps the ROC curve.
pub fn attack(
    ingress: &[FlowTrace],
    egress: &[FlowTrace],
    window: Duration,
) -> Result<AttackOutcome, RocError> {
    let ingress: Vec<FlowTrace> = ingress.iter().filter(|t| !t.is_empty()).cloned().collect();
    let mut egress: Vec<FlowTrace> = egress.iter().filter(|t| !t.is_empty()).cloned().collect();
    egress.sort_by_key(|t| t.flow_id());
    let truth = ground_truth_pairs(&ingress, &egress, window);
    let egress_ids: Vec<FlowId> = egress.iter().map(|t| t.flow_id()).collect();
    let columns: Vec<usize> = ingress
        .iter()
        .map(|t| {
            let target = truth[&t.flow_id()];
            egress_ids
                .binary_search(&target)
                .expect("truth names an egress flow")
        })
        .collect();
    let scores = score_matrix(&ingress, &egress, window);
    let curve = roc(&scores, &columns)?;
    Ok(AttackOutcome {
        ingress_ids: ingress.iter().map(|t| t.flow_id()).collect(),
        egress_ids,
        scores,
        truth,
        curve,
    })
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub spec: ExperimentSpec,
    pub baseline: SimReport,
    pub obfuscated: SimReport,
}

impl Experiment {
    pub fn overhead(&self) -> Result<OverheadSummary, OverheadError> {
        let merged = |traces: &[FlowTrace], dir| FlowTrace::merged(0, dir, traces);
        let ingress = merged(&self.obfuscated.ingress, Direction::Ingress);
        let egress = merged(&self.obfuscated.egress, Direction::Egress);
        let baseline_ingress = merged(&self.baseline.ingress, Direction::Ingress);
        let baseline_egress = merged(&self.baseline.egress, Direction::Egress);
        let delivered = merged(&self.obfuscated.delivered, Direction::Ingress);
        let baseline_delivered = merged(&self.baseline.delivered, Direction::Ingress);

        let per_flow: Vec<f64> = self
            .baseline
            .delivered
            .iter()
            .zip(&self.obfuscated.delivered)
            .filter_map(|(b, o)| latency_overhead(b, o).ok())
            .collect();
        let stats = &self.obfuscated;
        let frames = stats.ingress_stats.total_frames() + stats.egress_stats.total_frames();
        let payload =
            stats.ingress_stats.payload_bytes_sent + stats.egress_stats.payload_bytes_sent;
        Ok(OverheadSummary {
            bandwidth: bandwidth_overhead(&ingress, &egress)?,
            bandwidth_baseline: bandwidth_overhead(&baseline_ingress, &baseline_egress)?,
            analytic_bandwidth: 8.0 * frames as f64 / payload as f64,
            frames,
            payload_bytes: payload,
            latency: latency_overhead(&baseline_delivered, &delivered)?,
            latency_per_flow_mean: if per_flow.is_empty() {
                0.0
            } else {
                per_flow.iter().sum::<f64>() / per_flow.len() as f64
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadSummary {
    /// O(D) of the obfuscated relay against the application bytes.
    pub bandwidth: f64,
    /// O(D) of the 1:1 relay.
    pub bandwidth_baseline: f64,
    /// 8 bytes of header per frame over the payload carried.
    pub analytic_bandwidth: f64,
    pub frames: u64,
    pub payload_bytes: u64,
    /// T(D) of the obfuscated relay against the 1:1 relay, all flows merged.
    pub latency: f64,
    pub latency_per_flow_mean: f64,
}

impl OverheadSummary {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "bandwidth_overhead={:.6}", self.bandwidth);
        let _ = writeln!(
            out,
            "bandwidth_overhead_baseline={:.6}",
            self.bandwidth_baseline
        );
        let _ = writeln!(
            out,
            "analytic_bandwidth_overhead={:.6}",
            self.analytic_bandwidth
        );
        let _ = writeln!(out, "frames={}", self.frames);
        let _ = writeln!(out, "payload_bytes={}", self.payload_bytes);
        let _ = writeln!(out, "latency_overhead={:.6}", self.latency);
        let _ = writeln!(
            out,
            "latency_overhead_per_flow_mean={:.6}",
            self.latency_per_flow_mean
        );
        out
    }
}

pub fn workload(spec: &ExperimentSpec) -> Vec<ScriptedFlow> {
    generate_flows_with(
        spec.profile,
        &spec.generator,
        spec.n_flows,
        spec.duration,
        spec.seed,
    )
    .iter()
    .map(ScriptedFlow::from_trace)
    .collect()
}

/// Runs the same workload through the 1:1 baseline and the obfuscating
/// relay.
pub fn run_experiment(spec: &ExperimentSpec) -> Experiment {
    let flows = workload(spec);
    let opts = SimOptions {
        base_connections: spec.base_connections,
        seed: spec.seed,
        ..SimOptions::default()
    };
    let baseline = simulate(Strategy::Direct, &flows, &opts);
    let obfuscated = simulate(Strategy::Obfuscate(spec.obfuscation.clone()), &flows, &opts);
    Experiment {
        spec: spec.clone(),
        baseline,
        obfuscated,
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_traces(path: &Path, traces: &[FlowTrace]) -> Result<(), ExperimentError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_traces_csv(traces, BufWriter::new(file)).map_err(|source| ExperimentError::Trace {
        path: path.to_path_buf(),
        source,
    })
}

fn write_with<F>(path: &Path, f: F) -> Result<(), ExperimentError>
where
    F: FnOnce(BufWriter<File>) -> csv::Result<()>,
{
    let file = File::create(path).map_err(io_err(path))?;
    f(BufWriter::new(file)).map_err(|source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_traces(path: &Path) -> Result<Vec<FlowTrace>, ExperimentError> {
    let file = File::open(path).map_err(io_err(path))?;
    let traces =
        read_traces_csv(io::BufReader::new(file)).map_err(|source| ExperimentError::Trace {
            path: path.to_path_buf(),
            source,
        })?;
    if traces.is_empty() {
        return Err(ExperimentError::NoFlows(path.to_path_buf()));
    }
    Ok(traces)
}

/// Summary of a simulate run, as printed by the CLI.
#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub overhead: OverheadSummary,
    pub baseline: AttackOutcome,
    pub obfuscated: AttackOutcome,
}

/// Runs an experiment and writes the experiment directory: both captures,
/// the overhead report and one ROC curve per run.
pub fn cmd_simulate(spec: &ExperimentSpec, dir: &Path) -> Result<SimulateSummary, ExperimentError> {
    let exp = run_experiment(spec);
    for (name, report) in [("baseline", &exp.baseline), ("obfuscated", &exp.obfuscated)] {
        if !report.errors.is_empty() {
            return Err(ExperimentError::Simulation(format!(
                "{name} run: {}",
                report.errors.join("; ")
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_traces(&dir.join(INGRESS_CSV), &exp.obfuscated.ingress)?;
    write_traces(&dir.join(EGRESS_CSV), &exp.obfuscated.egress)?;
    write_traces(&dir.join(INGRESS_BASELINE_CSV), &exp.baseline.ingress)?;
    write_traces(&dir.join(EGRESS_BASELINE_CSV), &exp.baseline.egress)?;

    let overhead = exp.overhead()?;
    let path = dir.join(OVERHEAD_TXT);
    fs::write(&path, overhead.render()).map_err(io_err(&path))?;

    let baseline = attack(&exp.baseline.ingress, &exp.baseline.egress, spec.window)?;
    let obfuscated = attack(&exp.obfuscated.ingress, &exp.obfuscated.egress, spec.window)?;
    write_with(&dir.join(ROC_BASELINE_CSV), |w| baseline.curve.write_csv(w))?;
    write_with(&dir.join(ROC_MUFFLER_CSV), |w| {
        obfuscated.curve.write_csv(w)
    })?;
    Ok(SimulateSummary {
        overhead,
        baseline,
        obfuscated,
    })
}

/// Attacks the capture in `dir` and writes the score matrix and ROC curve
/// next to it.
pub fn cmd_attack(dir: &Path, window: Duration) -> Result<AttackOutcome, ExperimentError> {
    let ingress = read_traces(&dir.join(INGRESS_CSV))?;
    let egress = read_traces(&dir.join(EGRESS_CSV))?;
    let outcome = attack(&ingress, &egress, window)?;
    write_with(&dir.join(RAPTOR_SCORES_CSV), |w| {
        outcome.write_scores_csv(w)
    })?;
    write_with(&dir.join(ROC_ATTACK_CSV), |w| outcome.curve.write_csv(w))?;
    Ok(outcome)
}

pub fn tpr_table(outcome: &AttackOutcome) -> String {
    let mut out = String::from("fpr,tpr\n");
    for fpr in REPORT_FPRS {
        let _ = writeln!(out, "{fpr},{:.4}", outcome.tpr_at_fpr(fpr));
    }
    out
}

/// Reads the reports an experiment directory already holds.
pub fn cmd_report(dir: &Path) -> Result<String, ExperimentError> {
    let path = dir.join(OVERHEAD_TXT);
    let mut out = fs::read_to_string(&path).map_err(io_err(&path))?;
    for (label, name) in [
        ("baseline", ROC_BASELINE_CSV),
        ("obfuscated", ROC_MUFFLER_CSV),
    ] {
        let path = dir.join(name);
        let curve = read_roc_csv(&path)?;
        for fpr in REPORT_FPRS {
            let _ = writeln!(out, "{label}_tpr_at_fpr_{fpr}={:.4}", curve.tpr_at_fpr(fpr));
        }
    }
    Ok(out)
}

pub fn read_roc_csv(path: &Path) -> Result<RocCurve, ExperimentError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(io::BufReader::new(file));
    let mut points = Vec::new();
    for record in reader.deserialize::<(f64, f64, f64)>() {
        let (threshold, fpr, tpr) = record.map_err(|source| ExperimentError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        points.push(crate::harness::RocPoint {
            threshold,
            fpr,
            tpr,
        });
    }
    Ok(RocCurve { points })
}
