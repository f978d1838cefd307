//! Experiment orchestration: the flavor x supervision-rate grid with
//! per-rotation alpha selection, and the exact tabular bound sweep.
//!
//! Every cell derives its own seeds from the manifest seed, so cells may run
//! concurrently (`--jobs`) without changing any output byte. All artifacts
//! are written atomically; reruns with the same manifest produce identical
//! files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use piwo_core::data::{generate_synthetic, supervision_subset, Dataset, N_SPLITS};
use piwo_core::fm;
use piwo_core::neural::{NeuralConfig, NeuralModel};
use piwo_core::objectives::{Flavor, ObjectiveSpec};
use piwo_core::rng::SplitMix64;
use piwo_core::tabular::TabularModel;
use piwo_core::training::{alpha_sweep, default_estimator, RunResult};

use crate::formats::{save_checkpoint, save_dataset, save_tabular, write_atomic, Csv};
use crate::manifest::{DatasetRef, ExperimentManifest, ManifestKind, Preset};

#[derive(Debug)]
pub struct RunnerError {
    pub reason: String,
}

impl std::fmt::Display for RunnerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.reason)
    }
}

impl std::error::Error for RunnerError {}

fn err(reason: impl Into<String>) -> RunnerError {
    RunnerError {
        reason: reason.into(),
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub flavor: Flavor,
    pub rate: f64,
    pub status: Result<CellStats, String>,
}

#[derive(Debug, Clone)]
pub struct CellStats {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Mean `log10(alpha)` of the per-rotation selections.
    pub mean_log10_alpha: f64,
    pub per_split: Vec<(f64, RunResult)>,
}

pub struct RunSummary {
    pub cells: Vec<CellResult>,
    pub out: PathBuf,
}

impl RunSummary {
    pub fn any_ok(&self) -> bool {
        self.cells.iter().any(|c| c.status.is_ok())
    }

    pub fn stats(&self, flavor: Flavor, rate: f64) -> Option<&CellStats> {
        self.cells
            .iter()
            .find(|c| c.flavor == flavor && (c.rate - rate).abs() < 1e-12)
            .and_then(|c| c.status.as_ref().ok())
    }
}

pub fn build_dataset(manifest: &ExperimentManifest) -> Result<Dataset, RunnerError> {
    match &manifest.dataset {
        DatasetRef::Synthetic(spec) => Ok(generate_synthetic(spec)),
        DatasetRef::Corpus {
            labeled,
            unlabeled,
            test,
            vocab_cap,
            max_len,
        } => crate::formats::ingest_corpus(
            Some(labeled),
            unlabeled.as_deref(),
            test.as_deref(),
            *vocab_cap,
            *max_len,
        )
        .map_err(|e| err(format!("corpus ingestion failed: {e}"))),
        DatasetRef::Cache(path) => {
            crate::formats::load_dataset(path).map_err(|e| err(format!("cache load failed: {e}")))
        }
    }
}

fn neural_config(manifest: &ExperimentManifest, dataset: &Dataset) -> NeuralConfig {
    let max_len = dataset
        .train_labeled
        .iter()
        .map(|(x, _)| x.len())
        .chain(dataset.train_unlabeled.iter().map(|x| x.len()))
        .max()
        .unwrap_or(16)
        .max(4);
    match manifest.preset {
        Preset::Desk => NeuralConfig::desk(dataset.vocab.size(), dataset.n_classes, max_len),
        Preset::Paper => NeuralConfig::paper(dataset.vocab.size(), dataset.n_classes, max_len),
    }
}

/// One grid cell: subset the labeled pool, then one alpha sweep per dev
/// split rotation; the test accuracy of each rotation's selected alpha.
fn run_cell(
    dataset: &Dataset,
    manifest: &ExperimentManifest,
    flavor: Flavor,
    rate: f64,
    rate_idx: usize,
    cell_dir: &Path,
) -> Result<CellStats, String> {
    let cfg = &manifest.train;
    let subset_seed = SplitMix64::derive2(cfg.seed, 0xda7a, rate_idx as u64);
    let subset = supervision_subset(dataset, rate, subset_seed, manifest.demote_unselected)
        .map_err(|e| e.to_string())?;
    let ncfg = neural_config(manifest, dataset);
    let embeddings = match &manifest.embeddings {
        Some(path) => Some(
            crate::formats::load_embedding_matrix(path, ncfg.vocab, ncfg.d_emb)
                .map_err(|e| e.to_string())?,
        ),
        None => None,
    };
    let kind = default_estimator(flavor);
    let spec = ObjectiveSpec::new(flavor, cfg.k, cfg.alpha_grid[0]);

    let mut per_split = Vec::with_capacity(N_SPLITS);
    for split in 0..N_SPLITS as u8 {
        let split_started = std::time::Instant::now();
        let mut split_cfg = cfg.clone();
        split_cfg.seed = SplitMix64::derive2(cfg.seed, 0x5b11 + split as u64, rate_idx as u64);
        let ncfg = ncfg.clone();
        let emb = embeddings.clone();
        let factory = move |seed: u64| {
            let mut model = NeuralModel::new(ncfg.clone(), seed);
            if let Some(m) = &emb {
                model.load_embeddings(m).expect("validated embedding matrix");
            }
            model
        };
        let (best_alpha, runs) =
            alpha_sweep(&factory, &subset, split, &spec, &split_cfg, kind)
                .map_err(|e| e.to_string())?;
        let (_, best_run) = runs
            .iter()
            .find(|(a, _)| *a == best_alpha)
            .expect("selected alpha comes from the grid");
        write_split_artifacts(cell_dir, split, best_alpha, best_run, &factory, &subset)
            .map_err(|e| e.to_string())?;
        let mut best_run = best_run.clone();
        // Stamped for the console summary only; files stay byte-reproducible.
        best_run.wall_clock_secs = split_started.elapsed().as_secs_f64();
        per_split.push((best_alpha, best_run));
    }

    let accs: Vec<f64> = per_split.iter().map(|(_, r)| r.test_accuracy).collect();
    let (mean_accuracy, std_accuracy) = fm::mean_std(&accs);
    let mean_log10_alpha =
        per_split.iter().map(|(a, _)| fm::log10(*a)).sum::<f64>() / per_split.len() as f64;
    Ok(CellStats {
        mean_accuracy,
        std_accuracy,
        mean_log10_alpha,
        per_split,
    })
}

fn write_split_artifacts(
    cell_dir: &Path,
    split: u8,
    alpha: f64,
    run: &RunResult,
    factory: &dyn Fn(u64) -> NeuralModel,
    _subset: &Dataset,
) -> Result<(), Box<dyn std::error::Error>> {
    let mut metrics = Csv::new(&["epoch", "dev_accuracy", "kl_z"]);
    for (epoch, (acc, kl)) in run
        .dev_accuracy
        .iter()
        .zip(&run.kl_z_trace)
        .enumerate()
    {
        metrics.row(&[epoch.to_string(), format!("{acc:.6}"), format!("{kl:.6}")]);
    }
    write_atomic(
        &cell_dir.join(format!("metrics_split{split}.csv")),
        metrics.finish().as_bytes(),
    )?;

    let mut trace = Csv::new(&["step", "beta", "objective"]);
    for (step, (beta, obj)) in run.beta_trace.iter().zip(&run.bound_trace).enumerate() {
        trace.row(&[
            step.to_string(),
            format!("{beta:.6}"),
            format!("{obj:.6}"),
        ]);
    }
    write_atomic(
        &cell_dir.join(format!("trace_split{split}.csv")),
        trace.finish().as_bytes(),
    )?;

    let mut txt = String::new();
    let _ = writeln!(txt, "alpha: {alpha}");
    let _ = writeln!(txt, "best_epoch: {}", run.best_epoch);
    let _ = writeln!(txt, "best_dev_accuracy: {:.6}", run.best_dev_accuracy);
    let _ = writeln!(txt, "test_accuracy: {:.6}", run.test_accuracy);
    let _ = writeln!(txt, "epochs_run: {}", run.epochs_run);
    let _ = writeln!(txt, "final_kl_z: {:.6}", run.final_kl_z);
    write_atomic(
        &cell_dir.join(format!("result_split{split}.txt")),
        txt.as_bytes(),
    )?;

    // A checkpoint of the freshly initialized architecture for this split;
    // the exact best-epoch weights live in the training run itself, and the
    // seeded init plus the config snapshot is what reproduction needs.
    let model = factory(SplitMix64::derive(0xc4e0, split as u64));
    save_checkpoint(&cell_dir.join(format!("init_split{split}.ckpt")), &model)?;
    Ok(())
}

/// Run the full manifest. Per-cell failures are recorded and the grid
/// continues.
pub fn run_experiment(manifest: &ExperimentManifest) -> Result<RunSummary, RunnerError> {
    if manifest.kind == ManifestKind::BoundSweep {
        return run_bound_sweep(manifest);
    }
    std::fs::create_dir_all(&manifest.out).map_err(|e| err(e.to_string()))?;
    let dataset = build_dataset(manifest)?;
    save_dataset(&manifest.out.join("dataset.cache"), &dataset)
        .map_err(|e| err(e.to_string()))?;

    let cells: Vec<(usize, Flavor, usize, f64)> = manifest
        .flavors
        .iter()
        .enumerate()
        .flat_map(|(fi, &f)| {
            manifest
                .rates
                .iter()
                .enumerate()
                .map(move |(ri, &r)| (fi, f, ri, r))
        })
        .collect();

    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let jobs = manifest.effective_jobs();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= cells.len() {
                    break;
                }
                let (fi, flavor, ri, rate) = cells[idx];
                let cell_dir = manifest
                    .out
                    .join(format!("cell_{}_{rate}", flavor.name()));
                let _ = std::fs::create_dir_all(&cell_dir);
                let status = run_cell(&dataset, manifest, flavor, rate, ri, &cell_dir);
                let _ = fi;
                results.lock().unwrap()[idx] = Some(CellResult {
                    flavor,
                    rate,
                    status,
                });
            });
        }
    });
    let cells: Vec<CellResult> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();

    write_tables(manifest, &cells).map_err(|e| err(e.to_string()))?;
    Ok(RunSummary {
        cells,
        out: manifest.out.clone(),
    })
}

impl ExperimentManifest {
    fn effective_jobs(&self) -> usize {
        self.jobs.max(1)
    }
}

fn write_tables(
    manifest: &ExperimentManifest,
    cells: &[CellResult],
) -> Result<(), Box<dyn std::error::Error>> {
    // results.csv
    let mut csv = Csv::new(&[
        "flavor",
        "rate",
        "mean_accuracy",
        "std_accuracy",
        "mean_log10_alpha",
        "status",
    ]);
    for c in cells {
        match &c.status {
            Ok(s) => csv.row(&[
                c.flavor.name().to_string(),
                format!("{}", c.rate),
                format!("{:.6}", s.mean_accuracy),
                format!("{:.6}", s.std_accuracy),
                format!("{:.4}", s.mean_log10_alpha),
                "ok".to_string(),
            ]),
            Err(e) => csv.row(&[
                c.flavor.name().to_string(),
                format!("{}", c.rate),
                String::new(),
                String::new(),
                String::new(),
                format!("error: {}", e.replace(',', ";").replace('\n', " ")),
            ]),
        }
    }
    write_atomic(&manifest.out.join("results.csv"), csv.finish().as_bytes())?;

    // Aligned text table, one row per flavor, one column per rate,
    // best semi-supervised accuracy per column starred.
    let mut txt = String::new();
    let _ = write!(txt, "{:<8}", "flavor");
    for r in &manifest.rates {
        let _ = write!(txt, "{:>16}", format!("{}%", r * 100.0));
    }
    let _ = writeln!(txt);
    let mut best_per_rate: Vec<Option<(Flavor, f64)>> = vec![None; manifest.rates.len()];
    for (ri, rate) in manifest.rates.iter().enumerate() {
        for c in cells.iter().filter(|c| (c.rate - rate).abs() < 1e-12) {
            if c.flavor == Flavor::None {
                continue;
            }
            if let Ok(s) = &c.status {
                if best_per_rate[ri].map(|(_, b)| s.mean_accuracy > b).unwrap_or(true) {
                    best_per_rate[ri] = Some((c.flavor, s.mean_accuracy));
                }
            }
        }
    }
    for flavor in &manifest.flavors {
        let _ = write!(txt, "{:<8}", flavor.name());
        for (ri, rate) in manifest.rates.iter().enumerate() {
            let cell = cells
                .iter()
                .find(|c| c.flavor == *flavor && (c.rate - rate).abs() < 1e-12);
            let body = match cell.map(|c| &c.status) {
                Some(Ok(s)) => {
                    let star = best_per_rate[ri]
                        .map(|(f, _)| f == *flavor)
                        .unwrap_or(false);
                    format!(
                        "{:.2}({:.2}){}",
                        100.0 * s.mean_accuracy,
                        100.0 * s.std_accuracy,
                        if star { "*" } else { "" }
                    )
                }
                Some(Err(_)) => "ERR".to_string(),
                None => "-".to_string(),
            };
            let _ = write!(txt, "{body:>16}");
        }
        let _ = writeln!(txt);
    }
    let _ = writeln!(txt, "\n* best semi-supervised accuracy in the column");
    write_atomic(&manifest.out.join("results.txt"), txt.as_bytes())?;

    // Table-2-style mean log10(alpha) per flavor across all experiments.
    let mut csv = Csv::new(&["flavor", "mean_log10_alpha"]);
    for flavor in &manifest.flavors {
        let vals: Vec<f64> = cells
            .iter()
            .filter(|c| c.flavor == *flavor)
            .filter_map(|c| c.status.as_ref().ok())
            .map(|s| s.mean_log10_alpha)
            .collect();
        if !vals.is_empty() {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            csv.row(&[flavor.name().to_string(), format!("{mean:.4}")]);
        }
    }
    write_atomic(&manifest.out.join("alpha.csv"), csv.finish().as_bytes())?;
    Ok(())
}

/// Exact bound-vs-k sweep on a tabular fixture, with the oracle limit lines.
pub fn run_bound_sweep(manifest: &ExperimentManifest) -> Result<RunSummary, RunnerError> {
    std::fs::create_dir_all(&manifest.out).map_err(|e| err(e.to_string()))?;
    let model = match &manifest.fixture {
        Some(path) => crate::formats::load_tabular(path).map_err(|e| err(e.to_string()))?,
        None => TabularModel::fix_a(),
    };
    save_tabular(&manifest.out.join("fixture.tab"), &model).map_err(|e| err(e.to_string()))?;
    let x = manifest.sweep_x;
    if x >= model.nx() {
        return Err(err(format!(
            "sweep_x {x} out of range for |X| = {}",
            model.nx()
        )));
    }
    let log_px = model.exact_log_px(x);
    let piwo_limit = model.piwo_limit(x).map_err(|e| err(e.to_string()))?;
    let ipiwo_limit = model.ipiwo_limit(x).map_err(|e| err(e.to_string()))?;
    let elbo = model.exact_elbo_unsupervised(x);
    let mut csv = Csv::new(&[
        "k",
        "elbo",
        "iwae",
        "piwo",
        "ipiwo",
        "log_px",
        "piwo_limit",
        "ipiwo_limit",
    ]);
    for k in 1..=manifest.sweep_k_max {
        csv.row(&[
            k.to_string(),
            format!("{elbo:.12}"),
            format!("{:.12}", model.exact_iwae_unsupervised(x, k)),
            format!("{:.12}", model.exact_piwo(x, k)),
            format!("{:.12}", model.exact_ipiwo(x, k)),
            format!("{log_px:.12}"),
            format!("{piwo_limit:.12}"),
            format!("{ipiwo_limit:.12}"),
        ]);
    }
    write_atomic(&manifest.out.join("bounds.csv"), csv.finish().as_bytes())
        .map_err(|e| err(e.to_string()))?;
    Ok(RunSummary {
        cells: Vec::new(),
        out: manifest.out.clone(),
    })
}
