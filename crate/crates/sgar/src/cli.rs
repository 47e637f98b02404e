//! Operator surface behind the `sgar` binary: training runs, evaluation,
//! gradient checks, synthesis inspection and hyperparameter sweeps.
//!
//! Every run directory receives the exact resolved config that produced it,
//! and all outputs are reproducible under a fixed seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{self, BatchSampler, BatchSpec, DatasetTable};
use crate::error::{Result, SgarError};
use crate::eval::{self, EvalReport};
use crate::losses::{self, AnchorGroup, AnchorSimilarityTable, SimilarityTable};
use crate::model::{self, Checkpoint, EpochReport, ModelParams, OptimizerState};
use crate::numerics::{l2_normalize, LatentVector};
use crate::synthesis;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SGAR_OUTPUT_ROOT";

fn output_root(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var(OUTPUT_ROOT_ENV).ok())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Load the configured dataset, or generate the bundled synthetic set.
pub fn build_dataset(cfg: &RunConfig) -> Result<DatasetTable> {
    match &cfg.dataset {
        Some(path) => data::load_table(
            Path::new(path),
            cfg.split_file.as_ref().map(Path::new),
        ),
        None => Ok(data::generate_synthetic(
            cfg.synthetic.train_classes,
            cfg.synthetic.test_classes,
            cfg.synthetic.samples_per_class,
            cfg.synthetic.dim,
            cfg.synthetic.intra_scale,
            cfg.seed,
        )),
    }
}

/// Train a fresh model on `table` per `cfg`; returns the trained state and
/// the per-epoch reports.
pub fn train_model(
    cfg: &RunConfig,
    table: &DatasetTable,
) -> Result<(ModelParams, OptimizerState, Vec<EpochReport>)> {
    cfg.validate()?;
    let mut params = ModelParams::init(cfg, table.dim(), &table.train_classes, cfg.seed);
    let mut state = OptimizerState::new(&params, &cfg.hp);
    let sampler = BatchSampler::new(
        table,
        BatchSpec {
            classes_per_batch: cfg.hp.classes_per_batch,
            samples_per_class: cfg.hp.samples_per_class,
            seed: cfg.seed,
        },
    )?;
    let mut reports = Vec::with_capacity(cfg.hp.epochs);
    for epoch in 0..cfg.hp.epochs {
        reports.push(model::train_epoch(&sampler, epoch, &mut params, &mut state, &cfg.hp)?);
    }
    Ok((params, state, reports))
}

/// Encode the evaluation split (the unseen-class test split when present,
/// the whole table otherwise) and score retrieval plus rank preservation.
pub fn evaluate_model(
    params: &ModelParams,
    table: &DatasetTable,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let indices = {
        let test = table.test_indices();
        if test.is_empty() {
            (0..table.len()).collect()
        } else {
            test
        }
    };
    let rows: Vec<&[f64]> = indices.iter().map(|&i| table.features[i].as_slice()).collect();
    let labels: Vec<i64> = indices.iter().map(|&i| table.labels[i]).collect();
    let embeddings = model::embed(params, &rows)?;
    let mut report = eval::recall_at_k((&embeddings, &labels), None, &cfg.eval_ks)?;
    report.rank_preservation_rho = Some(held_out_rank_preservation(params, &embeddings, &labels, cfg)?);
    Ok(report)
}

/// Generate families from held-out latents with the trained projector and
/// measure how well the strength ordering survives projection.
fn held_out_rank_preservation(
    params: &ModelParams,
    latents: &[LatentVector],
    labels: &[i64],
    cfg: &RunConfig,
) -> Result<f64> {
    let n = cfg.hp.n_generated.max(3);
    let candidates = synthesis::select_generation_candidates(latents, labels, cfg.hp.gamma);
    let mut families = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let anchor = cand.source_pair.0;
        let mut fam = synthesis::generate_family(
            &latents[anchor],
            cand,
            cfg.hp.alpha,
            n,
            labels[anchor],
        )?;
        // families that die in the projector's ReLU corner carry no
        // ordering to measure; skip them, mirroring training
        match synthesis::project_family(&mut fam, &params.projector) {
            Ok(()) => families.push(fam),
            Err(SgarError::NormUnderflow { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    eval::rank_preservation(&families)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub reports: Vec<EpochReport>,
}

/// Run a full training job and write the run directory: resolved config,
/// per-epoch metrics CSV and the final checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let table = build_dataset(cfg)?;
    let (params, state, reports) = train_model(cfg, &table)?;

    let run_dir = output_root(cfg).join(format!(
        "train-{}-seed{}",
        model::config_hash(cfg),
        cfg.seed
    ));
    fs::create_dir_all(&run_dir)?;
    let config_path = run_dir.join("config.toml");
    fs::write(
        &config_path,
        toml::to_string_pretty(cfg).map_err(|e| SgarError::Config(e.to_string()))?,
    )?;

    let metrics_path = run_dir.join("metrics.csv");
    let mut csv = String::from("epoch,metric_loss,ranking_loss,combined,families_per_batch_mean\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.metric_loss, r.ranking_loss, r.combined, r.families_per_batch_mean
        ));
    }
    fs::write(&metrics_path, csv)?;

    let checkpoint_path = run_dir.join("checkpoint.json");
    Checkpoint::new(cfg.clone(), params, state).save(&checkpoint_path)?;

    Ok(TrainOutcome {
        run_dir,
        metrics_path,
        checkpoint_path,
        reports,
    })
}

/// Evaluate a checkpoint; writes `eval_report.json` and a per-query hits
/// CSV next to the checkpoint and returns the report.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: Option<&Path>,
    split_file: Option<&Path>,
    ks: Option<&[usize]>,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if let Some(path) = dataset {
        cfg.dataset = Some(path.display().to_string());
        cfg.split_file = split_file.map(|p| p.display().to_string());
    }
    if let Some(ks) = ks {
        cfg.eval_ks = ks.to_vec();
    }
    let table = build_dataset(&cfg)?;
    let report = evaluate_model(&ckpt.params, &table, &cfg)?;

    let out_dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    fs::write(out_dir.join("eval_report.json"), report.to_json())?;

    // per-query hits, self mode on the evaluation split
    let indices = {
        let test = table.test_indices();
        if test.is_empty() {
            (0..table.len()).collect()
        } else {
            test
        }
    };
    let rows: Vec<&[f64]> = indices.iter().map(|&i| table.features[i].as_slice()).collect();
    let labels: Vec<i64> = indices.iter().map(|&i| table.labels[i]).collect();
    let embeddings = model::embed(&ckpt.params, &rows)?;
    let ranks = eval::first_hit_ranks((&embeddings, &labels), None)?;
    let mut hits = String::from("id,first_hit_rank\n");
    for (&i, rank) in indices.iter().zip(&ranks) {
        hits.push_str(&format!(
            "{},{}\n",
            table.ids[i],
            rank.map_or(String::new(), |r| r.to_string())
        ));
    }
    fs::write(out_dir.join("eval_hits.csv"), hits)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    /// (loss family, max relative error, tolerance).
    pub checks: Vec<(String, f64, f64)>,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, err, tol)| err < tol)
    }
}

/// Finite-difference verification of every analytic gradient path.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();

    // table losses
    let mut sort_err = 0.0_f64;
    let mut anchor_err = 0.0_f64;
    let mut ranking_err = 0.0_f64;
    for _ in 0..100 {
        let m = rng.gen_range(1..=4);
        let n = rng.gen_range(2..=5);
        // keep entries clear of the |s| <= 1 bound so the probe steps of
        // the finite-difference ladder stay inside the table's domain
        let s: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.gen_range(-0.98..0.98)).collect())
            .collect();
        let table = SimilarityTable::new(s.clone()).unwrap();
        let l = losses::sort_loss(&table, cfg.hp.delta, 8.0);
        for x in 0..m {
            let f = |row: &[f64]| {
                let mut s2 = s.clone();
                s2[x] = row.to_vec();
                losses::sort_loss(&SimilarityTable::new(s2).unwrap(), cfg.hp.delta, 8.0).value
            };
            let rep = eval::grad_check(&f, &l.grad[x], &s[x], 2e-3, false);
            sort_err = sort_err.max(rep.max_rel_err);
        }

        let anchor_rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let at = AnchorSimilarityTable {
            groups: vec![AnchorGroup {
                anchor_label: 0,
                rows: anchor_rows.clone(),
            }],
            n_families: m,
        };
        let la = losses::anchor_loss(&at, cfg.hp.phi, 2.0)?;
        for x in 0..m {
            let f = |row: &[f64]| {
                let mut rows2 = anchor_rows.clone();
                rows2[x] = row.to_vec();
                losses::anchor_loss(
                    &AnchorSimilarityTable {
                        groups: vec![AnchorGroup {
                            anchor_label: 0,
                            rows: rows2,
                        }],
                        n_families: m,
                    },
                    cfg.hp.phi,
                    2.0,
                )
                .unwrap()
                .value
            };
            let rep = eval::grad_check(&f, &la.grad[0][x], &anchor_rows[x], 2e-3, false);
            anchor_err = anchor_err.max(rep.max_rel_err);
        }

        // ranking = sort + anchor, checked through the combined entry point
        let mut hp = cfg.hp.clone();
        hp.tau = 8.0;
        hp.beta = 2.0;
        let lr = losses::ranking_loss(&table, &at, &hp)?;
        for x in 0..m {
            let f = |row: &[f64]| {
                let mut s2 = s.clone();
                s2[x] = row.to_vec();
                losses::ranking_loss(&SimilarityTable::new(s2).unwrap(), &at, &hp)
                    .unwrap()
                    .value
            };
            let rep = eval::grad_check(&f, &lr.grad_table[x], &s[x], 2e-3, false);
            ranking_err = ranking_err.max(rep.max_rel_err);
        }
    }
    checks.push(("sort_loss".to_string(), sort_err, 1e-6));
    checks.push(("anchor_loss".to_string(), anchor_err, 1e-6));
    checks.push(("ranking_loss".to_string(), ranking_err, 1e-6));

    // proxy-anchor, finite differences over embedding coordinates
    let mut pa_err = 0.0_f64;
    for _ in 0..100 {
        let dim = 3;
        let nb = rng.gen_range(2..=6);
        let labels: Vec<i64> = (0..nb).map(|_| rng.gen_range(0..3)).collect();
        let coords: Vec<Vec<f64>> = (0..nb)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                l2_normalize(&v).unwrap().into_vec()
            })
            .collect();
        let bank = losses::ProxyBank {
            proxies: (0..3)
                .map(|c| {
                    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    (c, l2_normalize(&v).unwrap().into_vec())
                })
                .collect(),
        };
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        // treat coordinates as free variables; the loss is defined on raw
        // dot products so no renormalization here
        let rows: Vec<&[f64]> = flat.chunks(dim).collect();
        let l = losses::proxy_anchor_loss(&rows, &labels, &bank, 0.1, 4.0)?;
        let analytic: Vec<f64> = l.grad_embeddings.iter().flatten().copied().collect();
        let f = |x: &[f64]| {
            let rows: Vec<&[f64]> = x.chunks(dim).collect();
            losses::proxy_anchor_loss(&rows, &labels, &bank, 0.1, 4.0)
                .unwrap()
                .value
        };
        let rep = eval::grad_check(&f, &analytic, &flat, 2e-3, false);
        pa_err = pa_err.max(rep.max_rel_err);
    }
    checks.push(("proxy_anchor_loss".to_string(), pa_err, 1e-6));

    // end-to-end model gradients on a tiny net
    let mut tiny = RunConfig::default();
    tiny.encoder_hidden = vec![5];
    tiny.latent_dim = 4;
    tiny.projector_dim = 4;
    tiny.hp.n_generated = 3;
    tiny.hp.tau = 4.0;
    tiny.hp.beta = 4.0;
    tiny.hp.scale_pa = 4.0;
    tiny.hp.gamma = -1.0;
    let classes: std::collections::BTreeSet<i64> = (0..2).collect();
    let params = ModelParams::init(&tiny, 3, &classes, cfg.seed.wrapping_add(1));
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let features: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let labels = vec![0, 0, 0, 1, 1, 1];
    let (_, grads) = model::compute_batch_loss(&features, &labels, &params, &tiny.hp)?;
    let h = 1e-6;
    let mut model_err = 0.0_f64;
    for slot in 0..params.tensor_count() {
        let len = params.tensor_len(slot);
        for i in 0..len {
            let mut up = params.clone();
            up.perturb(slot, i, h);
            let mut dn = params.clone();
            dn.perturb(slot, i, -h);
            let fu = model::compute_batch_loss(&features, &labels, &up, &tiny.hp)?.0.combined;
            let fd = model::compute_batch_loss(&features, &labels, &dn, &tiny.hp)?.0.combined;
            let numeric = (fu - fd) / (2.0 * h);
            let analytic = grads.tensor_entry(slot, i);
            model_err = model_err
                .max((analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6));
        }
    }
    checks.push(("model_end_to_end".to_string(), model_err, 1e-5));

    Ok(GradCheckOutcome { checks })
}

/// Dump generated families as CSV rows: anchor_id, variant_index, strength,
/// cosine_to_anchor.
pub fn cmd_synth(
    checkpoint: Option<&Path>,
    cfg: &RunConfig,
    out: &Path,
) -> Result<usize> {
    cfg.validate()?;
    let table = build_dataset(cfg)?;
    let indices = table.train_indices();
    let rows: Vec<&[f64]> = indices.iter().map(|&i| table.features[i].as_slice()).collect();
    let labels: Vec<i64> = indices.iter().map(|&i| table.labels[i]).collect();
    let latents: Vec<LatentVector> = match checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            model::embed(&ckpt.params, &rows)?
        }
        None => rows
            .iter()
            .map(|&r| l2_normalize(r))
            .collect::<Result<_>>()?,
    };
    let candidates = synthesis::select_generation_candidates(&latents, &labels, cfg.hp.gamma);
    let mut csv = String::from("anchor_id,variant_index,strength,cosine_to_anchor\n");
    let mut n_rows = 0;
    for cand in &candidates {
        let anchor = cand.source_pair.0;
        let fam = synthesis::generate_family(
            &latents[anchor],
            cand,
            cfg.hp.alpha,
            cfg.hp.n_generated,
            labels[anchor],
        )?;
        let cosines = synthesis::latent_cosines_to_anchor(&fam);
        for (j, (&strength, &cos)) in fam.strengths.iter().zip(&cosines).enumerate() {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                table.ids[indices[anchor]],
                j + 1,
                strength,
                cos
            ));
            n_rows += 1;
        }
    }
    fs::write(out, csv)?;
    Ok(n_rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateRow {
    pub value: f64,
    pub r_at_1: Option<f64>,
    pub rho: Option<f64>,
    pub note: String,
}

/// One full train+eval per value of the swept hyperparameter, shared seed.
/// Runs are independent; `parallel` opts into one worker thread per value.
pub fn cmd_ablate(
    cfg: &RunConfig,
    param_name: &str,
    values: &[f64],
    out: &Path,
    parallel: bool,
) -> Result<Vec<AblateRow>> {
    cfg.validate()?;
    let run_one = |value: f64| -> Result<AblateRow> {
        let mut run_cfg = cfg.clone();
        match param_name {
            "lambda" => run_cfg.hp.lambda_mix = value,
            "gamma" => run_cfg.hp.gamma = value,
            "alpha" => run_cfg.hp.alpha = value,
            "delta" => run_cfg.hp.delta = value,
            "tau" => run_cfg.hp.tau = value,
            "n" => {
                if value < 3.0 {
                    // the left/right structure needs at least 3 variants
                    return Ok(AblateRow {
                        value,
                        r_at_1: None,
                        rho: None,
                        note: "skipped: n must be at least 3".to_string(),
                    });
                }
                run_cfg.hp.n_generated = value as usize;
            }
            other => return Err(SgarError::UnknownParam(other.to_string())),
        }
        run_cfg.validate()?;
        let table = build_dataset(&run_cfg)?;
        let (params, _, _) = train_model(&run_cfg, &table)?;
        let report = evaluate_model(&params, &table, &run_cfg)?;
        Ok(AblateRow {
            value,
            r_at_1: report.recall_at.get(&1).copied(),
            rho: report.rank_preservation_rho,
            note: String::new(),
        })
    };
    let rows: Vec<AblateRow> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = values
                .iter()
                .map(|&value| scope.spawn(move || run_one(value)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        values.iter().map(|&v| run_one(v)).collect::<Result<_>>()?
    };
    let mut csv = String::from("value,r_at_1,rho,note\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.value,
            r.r_at_1.map_or(String::new(), |v| v.to_string()),
            r.rho.map_or(String::new(), |v| v.to_string()),
            r.note
        ));
    }
    fs::write(out, csv)?;
    Ok(rows)
}

/// Exit code for an error per the documented table: 1 usage, 2 config,
/// 3 data, 4 numeric.
pub fn exit_code(err: &SgarError) -> i32 {
    match err {
        SgarError::UnknownParam(_) => 1,
        SgarError::Config(_) => 2,
        SgarError::Parse { .. }
        | SgarError::Validation(_)
        | SgarError::InsufficientClasses { .. }
        | SgarError::Io(_) => 3,
        SgarError::NormUnderflow { .. }
        | SgarError::DimensionMismatch { .. }
        | SgarError::EmptyAnchors
        | SgarError::MissingProxy(_)
        | SgarError::StaleCache(_)
        | SgarError::NonFinite(_)
        | SgarError::EmptyGallery => 4,
    }
}
