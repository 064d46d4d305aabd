//! Running a configured experiment end to end and writing its artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::csa::prototypes_to_bytes;
use crate::encoders::Checkpoint;
use crate::error::{Error, Result};
use crate::evalkit::EvalMetrics;
use crate::fedloop::{prepare_federation, run_federation, FederationOutcome, RoundReport};
use crate::gsd::ScopeKind;
use crate::synthdata::generate_federation;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BANK_FILE: &str = "bank.bin";
pub const BANK_JSON_FILE: &str = "bank.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MARGINS_FILE: &str = "margins.csv";

/// Everything needed to reproduce and audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub dataset_digest: String,
    /// SHA-256 of every written artifact, keyed by relative path.
    pub checksums: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u128>,
    pub deviations: Vec<String>,
}

/// Final numbers of a run. Contains no timing so reruns compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub rounds: usize,
    pub map: f64,
    pub rank1: f64,
    pub evaluations: Vec<EvalMetrics>,
    pub bank_size: usize,
    pub bank_builds: usize,
    /// Mean Phase I loss of the last epoch, per client.
    pub csa_final_loss: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: RunMetrics,
    pub outcome: FederationOutcome,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Settings that differ from the full-scale reference setup.
pub fn deviations(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    let batch = cfg.fed.batch_identities * cfg.fed.batch_instances;
    if batch != 64 {
        out.push(format!(
            "fed batch size {batch} ({}x{} PK) instead of 64",
            cfg.fed.batch_identities, cfg.fed.batch_instances
        ));
    }
    if cfg.fed.lr != 1e-3 {
        out.push(format!("fed.lr {} instead of 1e-3", cfg.fed.lr));
    }
    out.push(format!(
        "step decay x{} after round {} replaces the unspecified multi-step schedule",
        cfg.fed.lr_decay_factor,
        2 * cfg.fed.rounds / 3
    ));
    out.push("frozen image tower in Phase I is the seeded initialization, not a pretrained model".into());
    out.push("text tower replaced by a frozen seeded linear surrogate".into());
    out.push("only the image encoder is aggregated; identity heads stay on their clients".into());
    if cfg.gsd.scope == ScopeKind::RandomStat && cfg.gsd.random_relative {
        out.push("random_stat draws perturb each image's own statistics instead of replacing them".into());
    }
    out
}

/// Human-readable resolved plan, printed by dry runs.
pub fn plan(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let d = &cfg.data;
    let mut s = String::new();
    let _ = writeln!(s, "seed {} -> {}", cfg.seed, cfg.out_dir.display());
    let _ = writeln!(
        s,
        "protocol {:?}: {} sources x {} ids x {} cameras x {} samples",
        cfg.protocol, d.num_sources, d.identities_per_source, d.cameras_per_domain, d.samples_per_identity_per_camera
    );
    let _ = writeln!(
        s,
        "phase I: {} (L={}, lambda_c3={}, tau={}, {} epochs)",
        if cfg.csa.enabled { "on" } else { "off" },
        cfg.csa.tokens,
        cfg.csa.lambda_c3,
        cfg.csa.temperature,
        cfg.csa.epochs
    );
    let _ = writeln!(
        s,
        "style bank: {} (scope {:?}, metadata {:?})",
        if cfg.gsd.enabled { "on" } else { "off" },
        cfg.gsd.scope,
        cfg.gsd.metadata
    );
    let _ = writeln!(
        s,
        "federation: {} rounds x {} epochs, lr {} (x{} after round {}), anchoring {:?}",
        cfg.fed.rounds,
        cfg.fed.local_epochs,
        cfg.fed.lr,
        cfg.fed.lr_decay_factor,
        2 * cfg.fed.rounds / 3,
        cfg.fed.anchoring
    );
    let _ = writeln!(s, "artifacts: {MANIFEST_FILE} {ROUNDS_FILE} {METRICS_FILE} {BANK_FILE} {BANK_JSON_FILE} {CHECKPOINT_FILE} {MARGINS_FILE}");
    Ok(s)
}

/// Long-format CSV, one row per round per metric.
pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut s = String::from("round,scope,metric,value\n");
    for r in reports {
        let mut row = |scope: &str, metric: &str, v: f64| {
            let _ = writeln!(s, "{},{scope},{metric},{v}", r.round);
        };
        row("all", "lr", r.lr);
        row("all", "map", r.map);
        row("all", "rank1", r.rank1);
        for e in &r.evaluations {
            row(&e.name, "map", e.map);
            row(&e.name, "rank1", e.rank1);
            row(&e.name, "same_id_distance", e.same_id_distance);
            row(&e.name, "diff_id_distance", e.diff_id_distance);
        }
        for c in &r.clients {
            let scope = format!("client{}", c.client);
            row(&scope, "objective", c.objective);
            row(&scope, "id", c.original.id);
            row(&scope, "tri", c.original.tri);
            row(&scope, "align", c.original.align);
            if let Some(st) = c.stylized {
                row(&scope, "id_stylized", st.id);
                row(&scope, "tri_stylized", st.tri);
                row(&scope, "align_stylized", st.align);
            }
        }
    }
    s
}

struct Out<'a> {
    dir: &'a Path,
    checksums: BTreeMap<String, String>,
}

impl Out<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.checksums.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

/// Generates data, runs both phases and writes all artifacts to
/// `cfg.out_dir`. Errors carry the phase they occurred in.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, u128>| {
        timings.insert(name.to_string(), clock.elapsed().as_millis());
        clock = Instant::now();
    };
    let ds = generate_federation(&cfg.data, cfg.protocol, seed).map_err(|e| e.in_phase("data"))?;
    lap("data", &mut timings);
    let prepared = prepare_federation(&ds, cfg, seed).map_err(|e| e.in_phase("anchoring"))?;
    lap("anchoring", &mut timings);
    let outcome = run_federation(&ds, &prepared, cfg, seed).map_err(|e| e.in_phase("federation"))?;
    lap("federation", &mut timings);

    let n = outcome.final_metrics.len().max(1) as f64;
    let metrics = RunMetrics {
        seed,
        rounds: cfg.fed.rounds,
        map: outcome.final_metrics.iter().map(|m| m.map).sum::<f64>() / n,
        rank1: outcome.final_metrics.iter().map(|m| m.rank1).sum::<f64>() / n,
        evaluations: outcome.final_metrics.clone(),
        bank_size: outcome.bank.len(),
        bank_builds: outcome.bank_builds,
        csa_final_loss: prepared
            .clients
            .iter()
            .map(|c| c.csa.as_ref().and_then(|o| o.loss_trace.last().map(|l| l.total)))
            .collect(),
    };

    let write = || -> Result<BTreeMap<String, String>> {
        std::fs::create_dir_all(&cfg.out_dir)?;
        let mut out = Out { dir: &cfg.out_dir, checksums: BTreeMap::new() };
        out.write(ROUNDS_FILE, rounds_csv(&outcome.reports).as_bytes())?;
        out.write(METRICS_FILE, serde_json::to_string_pretty(&metrics)?.as_bytes())?;
        out.write(BANK_FILE, &outcome.bank.to_bytes())?;
        out.write(BANK_JSON_FILE, outcome.bank.to_json()?.as_bytes())?;
        let heads: Vec<(usize, &crate::encoders::ClassifierHead)> = outcome.heads.iter().enumerate().collect();
        out.write(CHECKPOINT_FILE, &Checkpoint::from_model(seed, &outcome.encoder, &heads).to_bytes())?;
        let mut margins = String::from("split,kind,lower,upper,count\n");
        for (m, e) in outcome.final_margins.iter().zip(&outcome.final_metrics) {
            for line in m.histogram_csv().lines().skip(1) {
                let _ = writeln!(margins, "{},{line}", e.name);
            }
        }
        out.write(MARGINS_FILE, margins.as_bytes())?;
        for (k, p) in outcome.initial_prototypes.iter().enumerate() {
            if let Some(p) = p {
                out.write(&format!("prototypes/client{k}.bin"), &prototypes_to_bytes(p))?;
            }
        }
        Ok(out.checksums)
    };
    let mut checksums = write().map_err(|e| e.in_phase("write"))?;
    checksums.insert("dataset".into(), ds.digest());
    lap("write", &mut timings);

    let versions = BTreeMap::from([
        ("fedreid-core".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format".to_string(), "1".to_string()),
        ("bank_format".to_string(), "1".to_string()),
        ("prototype_format".to_string(), "1".to_string()),
    ]);
    let manifest = RunManifest {
        config: cfg.clone(),
        dataset_digest: ds.digest(),
        checksums,
        versions,
        timings_ms: timings,
        deviations: deviations(cfg),
    };
    std::fs::write(cfg.out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::from(e).in_phase("write"))?;
    Ok(RunSummary { out_dir: cfg.out_dir.clone(), manifest, metrics, outcome })
}

/// Re-reads a manifest written by [`run_experiment`].
pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}
