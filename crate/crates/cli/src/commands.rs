use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use modicl::dataset::{EvalSet, TaskVector};
use modicl::eval::{
    classify_phase, evaluate_sets, label_corruption, monotonicity_class, phase_sweep, prediction_grid,
    write_shot_metrics_csv, Corruption, Quadruple, ShotMetrics, SweepConfig,
};
use modicl::gfp::{LogTable, PrimeField};
use modicl::interp::{
    attention_maps, embedding_pca, head_feature_scan, interp_stats, mlp_activation_grid, pca_features, ratio_class,
    reindex_by_log, save_f32_dump, spectral_test, write_embedding_projection_csv, write_scan_projection_csv, Role, Scan,
};
use modicl::model::{load_checkpoint, ParameterSet};
use modicl::oracles::{audit, oracle_grid, ratio_coverage, Algorithm, CellStatus};
use modicl::plot;
use modicl::trainer::{train_with, Problem, RunRecord, RunSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{ConfigError, RunConfig, Scope};
use crate::{runtime, CliError};

type Result<T> = std::result::Result<T, CliError>;

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value).map_err(runtime)? + "\n")
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

/// The configuration of an existing run: `--config` if given, else the run's
/// snapshot, with overrides on top.
pub fn run_config(config: &Option<PathBuf>, sets: &[String], run: &Path) -> Result<RunConfig> {
    let path = config.clone().unwrap_or_else(|| run.join("run_config.json"));
    if !path.exists() {
        return Err(runtime(format!("{} not found; is {} a run directory?", path.display(), run.display())));
    }
    Ok(RunConfig::load(Some(&path), sets, Scope::Run)?)
}

/// Loads `<run>/<which>.ckpt` and checks its header against the config.
fn load_params(cfg: &RunConfig, run: &Path, which: &str) -> Result<(ParameterSet<f32>, u64)> {
    let path = run.join(format!("{which}.ckpt"));
    if !path.exists() {
        return Err(runtime(format!("missing checkpoint {}", path.display())));
    }
    let (params, info) = load_checkpoint(&path).map_err(runtime)?;
    let expected = cfg.run_spec();
    if params.config != expected.model {
        return Err(CliError::Config(ConfigError {
            field: "model".into(),
            message: format!("does not match the header of {}", path.display()),
        }));
    }
    if let Ok(spec) = serde_json::from_value::<RunSpec>(info.extra.clone()) {
        if spec.data != expected.data {
            return Err(CliError::Config(ConfigError {
                field: "data".into(),
                message: format!("does not match the header of {}", path.display()),
            }));
        }
    }
    Ok((params, info.step))
}

fn problem(cfg: &RunConfig) -> Result<Problem> {
    cfg.data_config().build().map_err(runtime)
}

/// Task and prefix shared by prediction grids and interpretability scans.
fn scan_for(cfg: &RunConfig, problem: &Problem) -> Scan {
    let i = &cfg.interp;
    let task = match i.task {
        Some((a, b)) => TaskVector::new(a, b),
        None => problem
            .tasks
            .out_of_distribution
            .first()
            .or(problem.tasks.in_distribution.first())
            .copied()
            .expect("at least one task"),
    };
    let prefix = if i.prefix.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(i.seed);
        let train = &problem.inputs.train;
        rand::seq::index::sample(&mut rng, train.len(), i.shots).into_iter().map(|j| train[j]).collect()
    } else {
        i.prefix.clone()
    };
    Scan::new(task, prefix)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    let problem = problem(cfg)?;
    let total = problem.tasks.in_distribution.len() + problem.tasks.out_of_distribution.len();
    write_json(&out.join("run_config.json"), cfg)?;
    write_json(
        &out.join("tasks.json"),
        &json!({
            "p": cfg.field.p,
            "total_tasks": total,
            "n_id": problem.tasks.in_distribution.len(),
            "n_ood": problem.tasks.out_of_distribution.len(),
            "split": problem.tasks,
        }),
    )?;
    write_json(
        &out.join("inputs.json"),
        &json!({
            "p": cfg.field.p,
            "n_train": problem.inputs.train.len(),
            "n_test": problem.inputs.test.len(),
            "split": problem.inputs,
        }),
    )?;
    let logs = LogTable::build(cfg.field.p, cfg.log_base()).map_err(runtime)?;
    logs.write_csv(create(&out.join("log_table.csv"))?).map_err(runtime)?;
    let mut written = Vec::new();
    for which in EvalSet::ALL {
        match problem.eval_sequences(which, cfg.eval.sequences, cfg.eval.seed) {
            Ok(seqs) => {
                let path = out.join(format!("samples_{}.csv", which.name()));
                modicl::dataset::write_sequences_csv(&seqs, create(&path)?).map_err(runtime)?;
                written.push(which.name());
            }
            Err(e) => eprintln!("skipping {}: {e}", which.name()),
        }
    }
    println!(
        "{} tasks ({} in-distribution), {} train / {} test inputs, samples for {:?} in {}",
        total,
        problem.tasks.in_distribution.len(),
        problem.inputs.train.len(),
        problem.inputs.test.len(),
        written,
        out.display()
    );
    Ok(())
}

fn curves_svg(record: &RunRecord) -> (String, String) {
    let series = |f: &dyn Fn(&modicl::trainer::Probe) -> Option<f64>| -> Vec<(f64, f64)> {
        record.probes.iter().filter_map(|p| f(p).map(|v| (p.step as f64, v))).collect()
    };
    let loss = plot::line_chart(
        "loss",
        "step",
        "last-shot loss",
        &[
            ("train".into(), series(&|p| Some(p.train_loss))),
            ("ood test".into(), series(&|p| p.ood_loss)),
        ],
    );
    let acc = plot::line_chart(
        "accuracy",
        "step",
        "last-shot accuracy",
        &[
            ("train".into(), series(&|p| Some(p.train_acc_last_shot))),
            ("ood test".into(), series(&|p| p.ood_acc_last_shot)),
        ],
    );
    (loss, acc)
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    write_json(&out.join("run_config.json"), cfg)?;
    let started = std::time::Instant::now();
    let outcome = train_with(&cfg.run_spec(), Some(out), |p| {
        eprintln!(
            "step {:>7}  lr {:.2e}  train loss {:.4} acc {:.3}  ood loss {} acc {}  {:.0}s",
            p.step,
            p.lr,
            p.train_loss,
            p.train_acc_last_shot,
            p.ood_loss.map_or("-".into(), |v| format!("{v:.4}")),
            p.ood_acc_last_shot.map_or("-".into(), |v| format!("{v:.3}")),
            started.elapsed().as_secs_f64()
        )
    })
    .map_err(runtime)?;
    let (loss, acc) = curves_svg(&outcome.record);
    write(&out.join("loss.svg"), loss)?;
    write(&out.join("accuracy.svg"), acc)?;
    println!(
        "trained {} steps; best probe at step {:?}; artifacts in {}",
        outcome.record.probes.last().map_or(0, |p| p.step),
        outcome.record.best_step,
        out.display()
    );
    Ok(())
}

fn shot_chart(title: &str, metrics: &BTreeMap<EvalSet, ShotMetrics>, f: fn(&ShotMetrics) -> &Vec<f64>) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = metrics
        .iter()
        .map(|(k, m)| (k.name().to_string(), f(m).iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect()))
        .collect();
    plot::line_chart(title, "shot", title, &series)
}

pub fn eval(cfg: &RunConfig, run: &Path, out: &Path) -> Result<()> {
    let (params, step) = load_params(cfg, run, &cfg.eval.checkpoint)?;
    mkdir(out)?;
    let problem = problem(cfg)?;
    let e = &cfg.eval;
    let metrics = evaluate_sets(&params, &problem, e.sequences, e.seed).map_err(runtime)?;
    let all: Vec<ShotMetrics> = metrics.values().cloned().collect();
    write_shot_metrics_csv(&all, create(&out.join("shots.csv"))?).map_err(runtime)?;
    write(&out.join("shots_acc.svg"), shot_chart("accuracy", &metrics, |m| &m.acc_per_shot))?;
    write(&out.join("shots_loss.svg"), shot_chart("loss", &metrics, |m| &m.loss_per_shot))?;

    let last = Quadruple::from_metrics(&metrics, true);
    let mean = Quadruple::from_metrics(&metrics, false);
    let mut sets = serde_json::Map::new();
    for (k, m) in &metrics {
        let mono = monotonicity_class(&m.loss_per_shot).ok().map(|c| format!("{c:?}"));
        sets.insert(
            k.name().into(),
            json!({
                "last_shot_loss": m.last_loss(), "last_shot_acc": m.last_acc(),
                "mean_loss": m.mean_loss(), "mean_acc": m.mean_acc(), "count": m.count,
                "loss_monotonicity": mono,
            }),
        );
    }

    // corruption on the o.o.d. test set, falling back to in-distribution train
    let which = if metrics.contains_key(&EvalSet::OodTest) { EvalSet::OodTest } else { EvalSet::IdTrain };
    let seqs = problem.eval_sequences(which, e.sequences, e.seed).map_err(runtime)?;
    let mut settings: Vec<Corruption> = e.corruption_fractions.iter().map(|&f| Corruption::Multi { fraction: f }).collect();
    if e.corruption_single {
        settings.extend((0..cfg.data.n_ctx).map(|position| Corruption::Single { position }));
    }
    let corruption = if settings.is_empty() {
        None
    } else {
        let surface = label_corruption(&params, cfg.field.p, &seqs, &settings, e.seed).map_err(runtime)?;
        surface.write_csv(create(&out.join("corruption.csv"))?).map_err(runtime)?;
        let rows: Vec<String> = settings
            .iter()
            .map(|s| match s {
                Corruption::Single { position } => format!("pos {}", position + 1),
                Corruption::Multi { fraction } => format!("f {fraction}"),
            })
            .collect();
        let cols: Vec<String> = (1..=cfg.data.n_ctx).map(|k| k.to_string()).collect();
        write(&out.join("corruption.svg"), plot::heatmap("accuracy under label corruption", &rows, &cols, &surface.acc, false))?;
        Some(surface)
    };

    let scan = scan_for(cfg, &problem);
    let field = problem.field;
    let mut grids = serde_json::Map::new();
    for algorithm in [Algorithm::Ratio, Algorithm::Regression] {
        let g = prediction_grid(&params, &field, scan.task, &scan.prefix, algorithm).map_err(runtime)?;
        let name = algorithm.name();
        g.write_csv(create(&out.join(format!("grid_{name}.csv")))?).map_err(runtime)?;
        let [m, o, d] = g.svgs();
        write(&out.join(format!("grid_{name}_model.svg")), m)?;
        write(&out.join(format!("grid_{name}_oracle.svg")), o)?;
        write(&out.join(format!("grid_{name}_diff.svg")), d)?;
        grids.insert(name.into(), json!({ "model_only": g.red(), "oracle_only": g.blue() }));
    }

    let summary = json!({
        "checkpoint": cfg.eval.checkpoint,
        "step": step,
        "last_shot": last,
        "mean_over_shots": mean,
        "phase": classify_phase(&last, e.threshold).0,
        "sets": sets,
        "corruption_set": which.name(),
        "corruption": corruption,
        "grid": { "task": scan.task, "prefix": scan.prefix, "counts": grids },
    });
    write_json(&out.join("eval.json"), &summary)?;
    println!(
        "step {step}: last-shot acc id_train {:.3} id_test {:.3} ood_train {:.3} ood_test {:.3} (phase {})",
        last.id_train,
        last.id_test,
        last.ood_train,
        last.ood_test,
        classify_phase(&last, e.threshold).name()
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    mkdir(out)?;
    write_json(&out.join("run_config.json"), cfg)?;
    let s = &cfg.sweep;
    let grid = s.n_ids.iter().flat_map(|&n| s.alphas.iter().map(move |&a| (n, a))).collect();
    let sweep = SweepConfig {
        base: cfg.run_spec(),
        grid,
        seeds: s.seeds.clone(),
        eval_sequences: cfg.eval.sequences,
        eval_seed: cfg.eval.seed,
        threshold: cfg.eval.threshold,
        jobs: s.jobs,
    };
    let manifest = phase_sweep(&sweep, Some(out)).map_err(runtime)?;
    let failed: Vec<String> = manifest
        .cells
        .iter()
        .filter_map(|c| c.error.as_ref().map(|e| format!("(n_id {}, alpha {}): {e}", c.n_id, c.alpha)))
        .collect();
    for c in manifest.cells.iter().filter_map(|c| c.cell.as_ref()) {
        println!(
            "n_id {:>4} alpha {:.2}: phase {} ood_test {:.3} (seed {})",
            c.n_id,
            c.alpha,
            c.phase.name(),
            c.acc.ood_test,
            c.best_seed
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!("{} cells failed: {}", failed.len(), failed.join("; "))))
    }
}

pub fn oracle(cfg: &RunConfig, out: &Path, exhaustive: bool) -> Result<()> {
    mkdir(out)?;
    let field = PrimeField::new(cfg.field.p).map_err(runtime)?;
    let o = &cfg.oracle;
    if exhaustive {
        let report = audit(&field, &o.shots, o.contexts_per_task, o.seed);
        let p = cfg.field.p;
        let bad_coverage: Vec<(u32, u32)> = (0..p)
            .flat_map(|x| (0..p).map(move |y| (x, y)))
            .filter(|&(x, y)| (x, y) != (0, 0) && ratio_coverage(&field, (x, y, 0)) != p as usize)
            .collect();
        write_json(&out.join("audit.json"), &json!({ "audit": report, "coverage_violations": bad_coverage }))?;
        println!(
            "p={p}: {} contexts, {} ratio and {} regression predictions; violations: ratio {}, regression {}, subsumption {}, agreement {}, coverage {}",
            report.contexts,
            report.ratio_predictions,
            report.regression_predictions,
            report.ratio_violations,
            report.regression_violations,
            report.subsumption_violations,
            report.agreement_violations,
            bad_coverage.len()
        );
        if report.violations() + bad_coverage.len() > 0 {
            return Err(runtime("oracle audit found violations"));
        }
        return Ok(());
    }
    let task = TaskVector::new(o.task.0, o.task.1);
    let examples: Vec<(u32, u32, u32)> = o.prefix.iter().map(|&(x, y)| (x, y, task.apply(&field, x, y))).collect();
    if examples.is_empty() {
        return Err(CliError::Config(ConfigError { field: "oracle.prefix".into(), message: "grid export needs at least one example".into() }));
    }
    let labels: Vec<String> = (0..cfg.field.p).map(|v| v.to_string()).collect();
    for algorithm in [Algorithm::Ratio, Algorithm::Regression] {
        let grid = oracle_grid(&field, &examples, task, algorithm).map_err(runtime)?;
        grid.write_csv(create(&out.join(format!("oracle_{}.csv", algorithm.name())))?).map_err(runtime)?;
        let values: Vec<Vec<f64>> = grid
            .cells
            .chunks(cfg.field.p as usize)
            .map(|r| r.iter().map(|c| (*c == CellStatus::Correct) as u8 as f64).collect())
            .collect();
        let title = format!("{} predictions (rows x, cols y)", algorithm.name());
        write(&out.join(format!("oracle_{}.svg", algorithm.name())), plot::heatmap(&title, &labels, &labels, &values, false))?;
        println!(
            "{}: {} correct, {} incorrect, {} unpredicted",
            algorithm.name(),
            grid.count(CellStatus::Correct),
            grid.count(CellStatus::Incorrect),
            grid.count(CellStatus::Unpredicted)
        );
    }
    Ok(())
}

pub fn interp(cfg: &RunConfig, run: &Path, out: &Path) -> Result<()> {
    let i = &cfg.interp;
    let (params, step) = load_params(cfg, run, &i.checkpoint)?;
    mkdir(out)?;
    let problem = problem(cfg)?;
    let field = problem.field;
    let p = cfg.field.p;
    let logs = LogTable::build(p, cfg.log_base()).map_err(runtime)?;
    let scan = scan_for(cfg, &problem);

    let which = if problem.tasks.out_of_distribution.is_empty() { EvalSet::IdTrain } else { EvalSet::OodTrain };
    let band_seqs = problem.eval_sequences(which, i.band_sequences, i.seed).map_err(runtime)?;
    let band_refs: Vec<&[u32]> = band_seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let stats = interp_stats(&params, &field, &logs, &scan, &band_refs, i.band_width, i.seed).map_err(runtime)?;

    // attention of every head on one sequence
    let maps = attention_maps(&params, band_refs[0]).map_err(runtime)?;
    let t = maps.seq_len;
    let flat: Vec<f32> = maps.maps.iter().flatten().flatten().copied().collect();
    let depth = params.config.depth;
    let heads = params.config.heads;
    save_f32_dump(&out.join("attention"), &[depth, heads, t, t], &flat, json!({ "tokens": band_refs[0] })).map_err(runtime)?;
    let pos: Vec<String> = (0..t).map(|k| ["x", "y", "z"][k % 3].to_string()).collect();
    for (l, layer) in maps.maps.iter().enumerate() {
        for (h, m) in layer.iter().enumerate() {
            let rows: Vec<Vec<f64>> = m.chunks(t).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let title = format!("attention layer {l} head {h}");
            write(&out.join(format!("attention_L{l}_H{h}.svg")), plot::heatmap(&title, &pos, &pos, &rows, false))?;
        }
    }

    // head output scans at the chosen layer
    let group = |idx: usize| ratio_class(&field, idx as u32 / p, idx as u32 % p).map_or(0, |c| c as usize);
    for h in 0..heads {
        let feats = head_feature_scan(&params, &field, i.layer, h, &scan, &[Role::X, Role::Y]).map_err(runtime)?;
        let stem = out.join(format!("head_L{}_H{h}", i.layer));
        feats.save(&stem).map_err(runtime)?;
        match pca_features(&feats, i.components.max(2)) {
            Ok(pca) => {
                write_scan_projection_csv(&pca, &logs, create(&stem.with_extension("pca.csv"))?).map_err(runtime)?;
                let pts: Vec<(f64, f64, usize, String)> = pca
                    .projections
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (v[0], v[1], group(k), format!("({},{})", k as u32 / p, k as u32 % p)))
                    .collect();
                let title = format!("layer {} head {h}: PCA of x,y outputs", i.layer);
                write(&stem.with_extension("pca.svg"), plot::scatter(&title, "pc1", "pc2", &pts))?;
            }
            Err(e) => eprintln!("head {h}: skipping PCA: {e}"),
        }
    }

    // embeddings
    let k = 3.min(params.config.d_embed).min(p as usize - 1);
    let emb = embedding_pca(&params, k).map_err(runtime)?;
    write_embedding_projection_csv(&emb, &logs, create(&out.join("embedding_pca.csv"))?).map_err(runtime)?;
    let pts: Vec<(f64, f64, usize, String)> = emb
        .projections
        .iter()
        .enumerate()
        .map(|(tok, v)| (v[0], v.get(1).copied().unwrap_or(0.0), (logs.log(tok as u32) % 2) as usize, tok.to_string()))
        .collect();
    write(&out.join("embedding_pca.svg"), plot::scatter("embedding PCA (colour: log parity)", "pc1", "pc2", &pts))?;

    // similarity at the chosen layer; the SVG only for small fields
    let sim = modicl::interp::cosine_similarity_matrix(&params, &field, i.layer, Role::Y, &scan).map_err(runtime)?;
    let n = (p * p) as usize;
    let sim32: Vec<f32> = sim.iter().map(|&v| v as f32).collect();
    save_f32_dump(&out.join(format!("similarity_L{}_y", i.layer)), &[n, n], &sim32, json!({ "layer": i.layer, "role": "y" }))
        .map_err(runtime)?;
    if p <= 13 {
        let labels: Vec<String> = (0..n).map(|k| format!("({},{})", k / p as usize, k % p as usize)).collect();
        let rows: Vec<Vec<f64>> = sim.chunks(n).map(|r| r.to_vec()).collect();
        let title = format!("cosine similarity, layer {} at y", i.layer);
        write(&out.join(format!("similarity_L{}_y.svg", i.layer)), plot::heatmap(&title, &labels, &labels, &rows, true))?;
    }

    // MLP neurons
    let hidden = params.config.hidden();
    let neurons: Vec<usize> = if i.neurons.is_empty() {
        let all: Vec<usize> = (0..hidden).collect();
        let grids = mlp_activation_grid(&params, &field, i.layer, &all, &scan, Role::Y).map_err(runtime)?;
        let var = |g: &Vec<f32>| {
            let m = g.iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64;
            g.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>()
        };
        let mut order: Vec<usize> = all;
        order.sort_by(|&a, &b| var(&grids[b]).total_cmp(&var(&grids[a])).then(a.cmp(&b)));
        order.truncate(i.top_neurons);
        order
    } else {
        i.neurons.clone()
    };
    let grids = mlp_activation_grid(&params, &field, i.layer, &neurons, &scan, Role::Y).map_err(runtime)?;
    let mut mlp = csv::Writer::from_writer(create(&out.join(format!("mlp_L{}.csv", i.layer)))?);
    mlp.write_record(["neuron", "x", "y", "activation"]).map_err(runtime)?;
    let labels: Vec<String> = (0..p).map(|v| v.to_string()).collect();
    let log_labels: Vec<String> = (1..p).map(|k| logs.exp(k).to_string()).collect();
    let mut spectra = Vec::new();
    for (&nrn, g) in neurons.iter().zip(&grids) {
        for (k, v) in g.iter().enumerate() {
            mlp.write_record([nrn.to_string(), (k as u32 / p).to_string(), (k as u32 % p).to_string(), v.to_string()])
                .map_err(runtime)?;
        }
        let rows: Vec<Vec<f64>> = g.chunks(p as usize).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let stem = format!("mlp_L{}_N{nrn}", i.layer);
        write(&out.join(format!("{stem}.svg")), plot::heatmap(&format!("neuron {nrn} (rows x, cols y)"), &labels, &labels, &rows, false))?;
        let by_log = reindex_by_log(g, &logs);
        let rows: Vec<Vec<f64>> = by_log.chunks(p as usize - 1).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        write(
            &out.join(format!("{stem}_log.svg")),
            plot::heatmap(&format!("neuron {nrn}, log order"), &log_labels, &log_labels, &rows, false),
        )?;
        let plain = spectral_test(g, p as usize, i.shuffles, i.seed);
        let log = spectral_test(&by_log, p as usize - 1, i.shuffles, i.seed);
        spectra.push(json!({ "neuron": nrn, "grid": plain, "log_grid": log }));
    }
    mlp.flush().map_err(runtime)?;

    let summary = json!({
        "checkpoint": i.checkpoint,
        "step": step,
        "scan": scan,
        "log_base": logs.base(),
        "band_set": which.name(),
        "stats": stats,
        "mlp_layer": i.layer,
        "mlp_spectra": spectra,
    });
    write_json(&out.join("interp.json"), &summary)?;
    let best_band = stats.band_mass.first().map_or(0.0, |l| l.iter().copied().fold(0.0, f64::max));
    println!(
        "ratio-class statistic layer 0: {:.3}; best first-layer band mass: {:.3}; even/odd separation p = {:.4}",
        stats.ratio_class_y.first().copied().unwrap_or(f64::NAN),
        best_band,
        stats.even_odd.p_value
    );
    Ok(())
}

pub fn report(run: &Path) -> Result<()> {
    let mut md = String::new();
    if run.join("manifest.json").exists() {
        let text = std::fs::read_to_string(run.join("manifest.json")).map_err(runtime)?;
        let manifest: modicl::eval::SweepManifest = serde_json::from_str(&text).map_err(runtime)?;
        md.push_str("# Sweep\n\n| n_id | alpha | phase | id_train | id_test | ood_train | ood_test | seed |\n|---|---|---|---|---|---|---|---|\n");
        for c in &manifest.cells {
            match &c.cell {
                Some(cell) => md.push_str(&format!(
                    "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |\n",
                    c.n_id,
                    c.alpha,
                    cell.phase.name(),
                    cell.acc.id_train,
                    cell.acc.id_test,
                    cell.acc.ood_train,
                    cell.acc.ood_test,
                    cell.best_seed
                )),
                None => md.push_str(&format!("| {} | {} | failed | | | | | |\n", c.n_id, c.alpha)),
            }
        }
        md.push_str("\n![phase diagram](phase_diagram.svg)\n");
    } else if run.join("probes.json").exists() {
        let text = std::fs::read_to_string(run.join("probes.json")).map_err(runtime)?;
        let record: RunRecord = serde_json::from_str(&text).map_err(runtime)?;
        let (loss, acc) = curves_svg(&record);
        write(&run.join("loss.svg"), loss)?;
        write(&run.join("accuracy.svg"), acc)?;
        md.push_str("# Training run\n\n");
        if let Some(last) = record.probes.last() {
            md.push_str(&format!(
                "Final probe at step {}: train loss {:.4}, train last-shot accuracy {:.3}",
                last.step, last.train_loss, last.train_acc_last_shot
            ));
            if let Some(a) = last.ood_acc_last_shot {
                md.push_str(&format!(", o.o.d. test last-shot accuracy {a:.3}"));
            }
            md.push_str(".\n\n");
        }
        md.push_str(&format!("Early-stop step: {:?}. Stopped early: {}.\n\n", record.best_step, record.stopped_early));
        md.push_str("![loss](loss.svg)\n![accuracy](accuracy.svg)\n");
        for (name, file) in [("Evaluation", "eval/eval.json"), ("Interpretability", "interp/interp.json")] {
            if let Ok(text) = std::fs::read_to_string(run.join(file)) {
                md.push_str(&format!("\n## {name}\n\n```json\n{}\n```\n", text.trim_end()));
            }
        }
    } else {
        return Err(runtime(format!("{} holds neither probes.json nor manifest.json", run.display())));
    }
    write(&run.join("report.md"), &md)?;
    println!("wrote {}", run.join("report.md").display());
    Ok(())
}
