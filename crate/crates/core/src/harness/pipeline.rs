//! The experiment pipeline: partition, pretrain, pool building, gate
//! fine-tuning, bound verification, evaluation, artifacts. Every stage is a
//! pure function of the configuration; a MANIFEST records the SHA-256 of
//! every artifact and whether the run completed.

use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::datagen::{
    generate_synthetic, load_idx, partition_dirichlet, train_test_split, ClientSplit,
    LabeledDataset, Partition, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::federation::{
    pretrain, AggregationStrategy, ClientState, GlobalParams, RoundMetrics, ServerState,
};
use crate::harness::config::{DatasetKind, ExperimentConfig};
use crate::harness::log;
use crate::harness::metrics::{
    self, a_total, energy_csv, eval_csv, phase1_csv, phase2_csv, theorem_csv, EvalRow,
};
use crate::moe::{
    denoise_masks, evaluate_moe, finetune_client, init_gates, ClientGates, ExpertPool,
    FinetuneOutcome,
};
use crate::numerics::Tensor;
use crate::parallel;
use crate::rng::{self, tag};
use crate::splitmodel::SplitModel;
use crate::theory::{verify_bound, BoundCheck, TheoremParams};

const MAX_PARTITION_ATTEMPTS: u64 = 64;

/// Dataset plus an accepted partition and per-client splits.
#[derive(Debug)]
pub struct PreparedData {
    pub data: LabeledDataset,
    pub partition: Partition,
    pub splits: Vec<ClientSplit>,
    /// Seed of the accepted partition attempt.
    pub partition_seed: u64,
}

/// Build the dataset and partition it. Partition seeds are re-derived
/// deterministically until every client has at least `min_client_samples`
/// samples and non-empty train and test splits, so strongly non-IID draws
/// cannot produce untrainable clients.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let data = match cfg.dataset {
        DatasetKind::Synthetic => generate_synthetic(
            cfg.classes,
            cfg.input_dim,
            cfg.per_class,
            cfg.spread,
            cfg.seed,
        )?,
        DatasetKind::Idx => load_idx(
            cfg.idx_images.as_deref().expect("validated"),
            cfg.idx_labels.as_deref().expect("validated"),
        )?,
    };
    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let seed = if attempt == 0 {
            cfg.seed
        } else {
            rng::stream(cfg.seed, &[tag::ATTEMPT, attempt]).gen::<u64>()
        };
        let spec = PartitionSpec {
            seed,
            ..cfg.partition_spec()
        };
        let partition = partition_dirichlet(&data, &spec)?;
        let splits = train_test_split(&data, &partition, cfg.train_fraction, seed)?;
        let viable = (0..cfg.clients).all(|j| {
            partition.indices(j).len() >= cfg.min_client_samples
                && !splits[j].train.is_empty()
                && !splits[j].test.is_empty()
        });
        if viable {
            if attempt > 0 {
                log::debug(&format!("partition viable on attempt {attempt}"));
            }
            return Ok(PreparedData {
                data,
                partition,
                splits,
                partition_seed: seed,
            });
        }
    }
    Err(Error::Config {
        message: format!(
            "no viable partition in {MAX_PARTITION_ATTEMPTS} attempts; raise per_class, lower \
             clients or min_client_samples ({})",
            cfg.min_client_samples
        ),
    })
}

pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

/// Split configuration with input and label dimensions taken from the actual
/// dataset. For synthetic data these match the config; for ingested IDX files
/// the file dictates them.
pub fn effective_split_config(
    cfg: &ExperimentConfig,
    data: &LabeledDataset,
) -> Result<crate::splitmodel::SplitConfig> {
    let mut split_cfg = cfg.split_config();
    split_cfg.input_dim = data.input_dim();
    split_cfg.class_count = data.class_count();
    split_cfg.validate()?;
    Ok(split_cfg)
}

/// Initialize the server and every client. Global submodules start identical
/// on all clients (one broadcast init); personalized ones are per-client.
pub fn init_federation(cfg: &ExperimentConfig, prepared: &PreparedData) -> Result<Federation> {
    let split_cfg = effective_split_config(cfg, &prepared.data)?;
    let mut clients = Vec::with_capacity(cfg.clients);
    for j in 0..cfg.clients {
        let model = SplitModel::init(
            split_cfg,
            &mut rng::stream(cfg.seed, &[tag::INIT_GLOBAL]),
            &mut rng::stream(cfg.seed, &[tag::INIT_PERSONAL, j as u64]),
        )?;
        let train = prepared.data.subset(&prepared.splits[j].train);
        let test = prepared.data.subset(&prepared.splits[j].test);
        if train.is_empty() || test.is_empty() {
            return Err(Error::EmptyDataset { client: j });
        }
        let train_count = train.len();
        clients.push(ClientState {
            id: j,
            model,
            train,
            test,
            train_count,
            seed: cfg.seed,
        });
    }
    let server = ServerState {
        global: GlobalParams::from_model(&clients[0].model),
        round: 0,
        strategy: AggregationStrategy::FedAvg,
    };
    Ok(Federation { server, clients })
}

pub fn run_pretrain(cfg: &ExperimentConfig, fed: &mut Federation) -> Result<Vec<RoundMetrics>> {
    log::info(&format!(
        "pretraining {} clients for {} rounds",
        fed.clients.len(),
        cfg.global_rounds
    ));
    pretrain(
        &mut fed.server,
        &mut fed.clients,
        cfg.global_rounds,
        cfg.local_epochs,
        cfg.lr,
        cfg.workers,
    )
}

pub fn build_pool(fed: &Federation) -> Result<ExpertPool> {
    let refs: Vec<&SplitModel> = fed.clients.iter().map(|c| &c.model).collect();
    ExpertPool::build(&refs)
}

pub fn run_finetune(
    cfg: &ExperimentConfig,
    fed: &Federation,
    pool: &ExpertPool,
) -> Result<Vec<FinetuneOutcome>> {
    log::info(&format!(
        "fine-tuning gates for {} clients, {} epochs",
        fed.clients.len(),
        cfg.moe_epochs
    ));
    let settings = cfg.gate_settings();
    let tuning = cfg.moe_tuning();
    let split_cfg = fed.clients[0].model.config;
    let mut ids: Vec<usize> = (0..fed.clients.len()).collect();
    let results = parallel::map_mut(&mut ids, cfg.workers, |_, j| -> Result<FinetuneOutcome> {
        let client = &fed.clients[*j];
        let gates = init_gates(&split_cfg, pool, &settings, client.id, cfg.seed)?;
        finetune_client(
            &client.model,
            pool,
            client.id,
            &client.train,
            &client.test,
            &tuning,
            gates,
            cfg.seed,
        )
    });
    results.into_iter().collect()
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub phase1_a_total: f64,
    pub phase2_a_total: f64,
    pub rows: Vec<ClientEval>,
}

#[derive(Clone, Debug)]
pub struct ClientEval {
    pub client: usize,
    pub train_count: usize,
    pub phase1_accuracy: f64,
    pub phase2_accuracy: f64,
}

/// Per-client phase-1 vs phase-2 accuracies and their weighted totals.
pub fn evaluate_run(
    fed: &Federation,
    pool: &ExpertPool,
    outcomes: &[FinetuneOutcome],
) -> Result<RunSummary> {
    let mut rows = Vec::with_capacity(fed.clients.len());
    for (client, outcome) in fed.clients.iter().zip(outcomes) {
        let phase1 = client.model.evaluate(&client.test)?;
        let phase2 = evaluate_moe(
            &client.model,
            pool,
            &outcome.gates,
            &outcome.final_masks,
            &client.test,
        )?;
        rows.push(ClientEval {
            client: client.id,
            train_count: client.train_count,
            phase1_accuracy: phase1,
            phase2_accuracy: phase2,
        });
    }
    let weights1: Vec<(usize, f64)> = rows
        .iter()
        .map(|r| (r.train_count, r.phase1_accuracy))
        .collect();
    let weights2: Vec<(usize, f64)> = rows
        .iter()
        .map(|r| (r.train_count, r.phase2_accuracy))
        .collect();
    Ok(RunSummary {
        phase1_a_total: a_total(&weights1)?,
        phase2_a_total: a_total(&weights2)?,
        rows,
    })
}

/// The bound-verification grid the `theorem` stage runs by default.
pub fn default_theorem_grid() -> Vec<TheoremParams> {
    vec![
        TheoremParams::new(2, 0.5, 1.0).expect("valid"),
        TheoremParams::new(5, 0.6, 1.0).expect("valid"),
        TheoremParams::new(10, 0.6, 2.0).expect("valid"),
        TheoremParams::new(20, 0.8, 5.0).expect("valid"),
    ]
}

pub fn run_theorem(cfg: &ExperimentConfig, trials: usize) -> Result<Vec<BoundCheck>> {
    verify_bound(&default_theorem_grid(), trials, cfg.seed)
}

// ── Artifacts ───────────────────────────────────────────────────────────

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), bytes)?;
    Ok(())
}

pub fn write_client_checkpoint(dir: &Path, client: &ClientState) -> Result<()> {
    let mut entries = client.model.global_named();
    entries.extend(client.model.personal_named());
    write_file(
        dir,
        &format!("client_{}.ckpt", client.id),
        &checkpoint::encode(&entries),
    )
}

pub fn write_server_checkpoint(dir: &Path, server: &ServerState) -> Result<()> {
    write_file(dir, "server.ckpt", &checkpoint::encode(&server.global.named()))
}

pub fn write_gate_checkpoint(dir: &Path, client: usize, gates: &ClientGates) -> Result<()> {
    write_file(
        dir,
        &format!("gates_{client}.ckpt"),
        &checkpoint::encode(&gates.named()),
    )
}

/// Copy checkpointed tensors into `targets` by name. Every target must be
/// filled and every checkpoint entry consumed.
fn fill_named(targets: Vec<(String, &mut Tensor)>, mut entries: Vec<(String, Tensor)>) -> Result<()> {
    for (name, target) in targets {
        let pos = entries
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::BadCheckpoint {
                message: format!("missing tensor `{name}`"),
            })?;
        let (_, tensor) = entries.swap_remove(pos);
        if tensor.shape() != target.shape() {
            return Err(Error::BadCheckpoint {
                message: format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    target.shape()
                ),
            });
        }
        *target = tensor;
    }
    if let Some((name, _)) = entries.first() {
        return Err(Error::BadCheckpoint {
            message: format!("unexpected tensor `{name}`"),
        });
    }
    Ok(())
}

/// Overwrite an initialized client model with its checkpointed parameters.
pub fn load_client_model(model: &mut SplitModel, dir: &Path, client: usize) -> Result<()> {
    let entries = checkpoint::read(&dir.join(format!("client_{client}.ckpt")))?;
    fill_named(model.named_params_mut(), entries)
}

pub fn load_gates(
    cfg: &ExperimentConfig,
    split_cfg: &crate::splitmodel::SplitConfig,
    dir: &Path,
    client: usize,
    pool: &ExpertPool,
) -> Result<ClientGates> {
    let mut gates = init_gates(split_cfg, pool, &cfg.gate_settings(), client, cfg.seed)?;
    let entries = checkpoint::read(&dir.join(format!("gates_{client}.ckpt")))?;
    fill_named(gates.named_mut(), entries)?;
    Ok(gates)
}

/// Write the MANIFEST: a status line followed by `sha256  filename` for
/// every artifact in the output directory, sorted by name.
pub fn write_manifest(dir: &Path, status: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "MANIFEST")
        .collect();
    names.sort();
    let mut out = format!("status: {status}\n");
    for name in names {
        let bytes = std::fs::read(dir.join(&name))?;
        let mut h = Sha256::new();
        h.update(&bytes);
        let digest = h.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        out.push_str(&format!("{hex}  {name}\n"));
    }
    std::fs::write(dir.join("MANIFEST"), out)?;
    Ok(())
}

fn summary_text(summary: &RunSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "phase1_a_total {}\n",
        metrics::fmt_f64(summary.phase1_a_total)
    ));
    out.push_str(&format!(
        "phase2_a_total {}\n",
        metrics::fmt_f64(summary.phase2_a_total)
    ));
    out.push_str(&format!(
        "delta {}\n",
        metrics::fmt_f64(summary.phase2_a_total - summary.phase1_a_total)
    ));
    for r in &summary.rows {
        out.push_str(&format!(
            "client {} train_count {} phase1 {} phase2 {} delta {}\n",
            r.client,
            r.train_count,
            metrics::fmt_f64(r.phase1_accuracy),
            metrics::fmt_f64(r.phase2_accuracy),
            metrics::fmt_f64(r.phase2_accuracy - r.phase1_accuracy)
        ));
    }
    out
}

/// Full pipeline: partition, pretrain, pools, fine-tune, bound grid,
/// evaluation. Writes every artifact plus a MANIFEST; on failure the
/// MANIFEST records the failed stage over whatever artifacts exist.
pub fn run_experiment(cfg: &ExperimentConfig, theorem_trials: usize) -> Result<RunSummary> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let result = run_stages(cfg, theorem_trials);
    let status = match &result {
        Ok(_) => "complete".to_string(),
        Err(e) => format!("incomplete ({e})"),
    };
    write_manifest(&cfg.out_dir, &status)?;
    result
}

fn run_stages(cfg: &ExperimentConfig, theorem_trials: usize) -> Result<RunSummary> {
    let dir = cfg.out_dir.clone();

    let prepared = prepare_data(cfg).map_err(|e| e.in_stage("partition"))?;
    write_file(
        &dir,
        "partition.csv",
        prepared.partition.to_csv(&prepared.data).as_bytes(),
    )
    .map_err(|e| e.in_stage("partition"))?;

    let mut fed = init_federation(cfg, &prepared).map_err(|e| e.in_stage("pretrain"))?;
    let history = run_pretrain(cfg, &mut fed).map_err(|e| e.in_stage("pretrain"))?;
    write_file(&dir, "metrics_phase1.csv", phase1_csv(&history).as_bytes())
        .map_err(|e| e.in_stage("pretrain"))?;
    for client in &fed.clients {
        write_client_checkpoint(&dir, client).map_err(|e| e.in_stage("pretrain"))?;
    }
    write_server_checkpoint(&dir, &fed.server).map_err(|e| e.in_stage("pretrain"))?;

    let pool = build_pool(&fed).map_err(|e| e.in_stage("pools"))?;

    let outcomes = run_finetune(cfg, &fed, &pool).map_err(|e| e.in_stage("finetune"))?;
    let all_rows: Vec<_> = outcomes.iter().flat_map(|o| o.rows.clone()).collect();
    write_file(&dir, "metrics_phase2.csv", phase2_csv(&all_rows).as_bytes())
        .map_err(|e| e.in_stage("finetune"))?;
    for (client, outcome) in fed.clients.iter().zip(&outcomes) {
        write_gate_checkpoint(&dir, client.id, &outcome.gates)
            .map_err(|e| e.in_stage("finetune"))?;
    }
    let energy_rows: Vec<(usize, &crate::energy::EnergyReport)> = fed
        .clients
        .iter()
        .zip(&outcomes)
        .filter_map(|(c, o)| {
            o.final_reports
                .pe
                .as_ref()
                .or(o.final_reports.pp.as_ref())
                .map(|r| (c.id, r))
        })
        .collect();
    write_file(&dir, "energy.csv", energy_csv(&energy_rows).as_bytes())
        .map_err(|e| e.in_stage("finetune"))?;

    let checks = run_theorem(cfg, theorem_trials).map_err(|e| e.in_stage("theorem"))?;
    write_file(&dir, "theorem.csv", theorem_csv(&checks).as_bytes())
        .map_err(|e| e.in_stage("theorem"))?;
    if let Some(failed) = checks.iter().find(|c| !c.pass) {
        return Err(Error::InvalidParameter {
            name: "theorem",
            message: format!(
                "bound violated at M={} p={} alpha={}",
                failed.params.experts, failed.params.accuracy, failed.params.advantage
            ),
        }
        .in_stage("theorem"));
    }

    let summary = evaluate_run(&fed, &pool, &outcomes).map_err(|e| e.in_stage("eval"))?;
    let eval_rows: Vec<EvalRow> = summary
        .rows
        .iter()
        .map(|r| EvalRow {
            client: r.client,
            train_count: r.train_count,
            phase1_accuracy: r.phase1_accuracy,
            phase2_accuracy: r.phase2_accuracy,
        })
        .collect();
    write_file(&dir, "eval.csv", eval_csv(&eval_rows).as_bytes())
        .map_err(|e| e.in_stage("eval"))?;
    write_file(&dir, "summary.txt", summary_text(&summary).as_bytes())
        .map_err(|e| e.in_stage("eval"))?;
    log::info(&format!(
        "a_total: phase1 {} -> phase2 {}",
        metrics::fmt_f64(summary.phase1_a_total),
        metrics::fmt_f64(summary.phase2_a_total)
    ));
    Ok(summary)
}

/// Recompute the denoising masks for a loaded client (used by `eval`).
pub fn recompute_masks(
    cfg: &ExperimentConfig,
    model: &SplitModel,
    pool: &ExpertPool,
    client: usize,
    train: &LabeledDataset,
) -> Result<crate::moe::Masks> {
    let tuning = cfg.moe_tuning();
    let (masks, _) = denoise_masks(model, pool, client, train, &tuning.energy)?;
    Ok(masks)
}
