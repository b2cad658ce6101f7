use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brainib::entropy::mutual_information;
use brainib::eval::{evaluate, holdout_split, kfold_split, loso_split, Scheme};
use brainib::graph::{generate_synthetic, load_dataset, read_matrix_csv, save_dataset, write_matrix_csv, Dataset, Graph};
use brainib::interpret::{dominant_subgraph, edges_csv, mean_mask, profile_systems, SystemMap};
use brainib::model::Model;
use brainib::selftest;
use brainib::trainer::fit;
use brainib::{Error, Result};

use crate::config::RunConfig;
use crate::{Command, Common};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn setup(common: &Common) -> Result<RunConfig> {
    if common.threads == 0 {
        return Err(Error::Invalid("--threads must be at least 1".into()));
    }
    // a second initialization (tests calling in-process) is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global();
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.with_seed(common.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, data: Option<&PathBuf>) -> Result<Dataset> {
    match data.or(cfg.data.manifest.as_ref()) {
        Some(manifest) => load_dataset(manifest, cfg.data.adjacency),
        None => {
            log::info!("no dataset given; generating synthetic data");
            generate_synthetic(&cfg.synthetic)
        }
    }
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write(&dir.join("run_config.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen { common, out } => {
            let cfg = setup(&common)?;
            prepare_out(&out)?;
            let ds = generate_synthetic(&cfg.synthetic)?;
            let manifest = save_dataset(&ds, &out)?;
            echo_config(&out, &cfg)?;
            println!("{}", manifest.display());
        }
        Command::Mi { common, a, b } => {
            let cfg = setup(&common)?;
            let za = read_matrix_csv(&a)?;
            let zb = read_matrix_csv(&b)?;
            if za.nrows() != zb.nrows() {
                return Err(Error::Shape {
                    expected: format!("{} samples", za.nrows()),
                    got: format!("{}", zb.nrows()),
                });
            }
            let mut entropy = cfg.train.entropy;
            entropy.knn_k = entropy.knn_k.min(za.nrows().saturating_sub(1)).max(1);
            println!("{}", mutual_information(&za, &zb, &entropy)?);
        }
        Command::Train { common, data, out } => {
            let cfg = setup(&common)?;
            let ds = dataset(&cfg, data.as_ref())?;
            prepare_out(&out)?;
            let (train, val) = holdout_split(&ds, cfg.eval.val_fraction, cfg.master_seed())?;
            let pick = |idx: &[usize]| -> Vec<&Graph> { idx.iter().map(|&i| &ds.graphs[i]).collect() };
            let result = fit(&pick(&train), &pick(&val), &cfg.train)?;
            result.log.write_csv(&out.join("train_log.csv"))?;
            result
                .model
                .save_checkpoint(&out.join("checkpoint.json"), serde_json::to_value(&cfg)?)?;
            echo_config(&out, &cfg)?;
            match (result.best_epoch, result.best_val_acc) {
                (Some(e), Some(acc)) => println!("best validation accuracy {acc} at epoch {e}"),
                _ => println!("no epochs run; saved the initial model"),
            }
        }
        Command::Eval { common, data, out } => {
            let cfg = setup(&common)?;
            let ds = dataset(&cfg, data.as_ref())?;
            prepare_out(&out)?;
            let plan = match cfg.eval.scheme {
                Scheme::Tenfold => kfold_split(&ds, cfg.eval.folds, cfg.master_seed())?,
                Scheme::Loso => loso_split(&ds, cfg.master_seed())?,
            };
            write(&out.join("split_plan.json"), &(serde_json::to_string_pretty(&plan)? + "\n"))?;
            let evaluation = evaluate(&plan, &ds, &cfg.train)?;
            for (f, fit) in evaluation.fits.iter().enumerate() {
                fit.log.write_csv(&out.join(format!("train_log_fold{f:02}.csv")))?;
            }
            evaluation.report.write(&out)?;
            echo_config(&out, &cfg)?;
            let s = &evaluation.report.summary;
            println!("accuracy {} ± {}", s.mean, s.std);
        }
        Command::Explain {
            common,
            checkpoint,
            data,
            system_map,
            out,
        } => {
            let cfg = setup(&common)?;
            let model = Model::load_checkpoint(&checkpoint)?;
            let ds = dataset(&cfg, data.as_ref())?;
            if ds.n_rois != model.n_rois {
                return Err(Error::Invalid(format!(
                    "checkpoint expects {} ROIs but the dataset has {}",
                    model.n_rois, ds.n_rois
                )));
            }
            let map = match system_map.or(cfg.explain.system_map.clone()) {
                Some(path) => Some(SystemMap::load(&path)?),
                None => None,
            };
            if let Some(m) = &map {
                if m.n_nodes() != ds.n_rois {
                    return Err(Error::Invalid(format!(
                        "system map covers {} nodes but the dataset has {}",
                        m.n_nodes(),
                        ds.n_rois
                    )));
                }
            }
            prepare_out(&out)?;
            explain(&cfg, &model, &ds, map.as_ref(), &out)?;
            echo_config(&out, &cfg)?;
        }
        Command::Selftest { common } => {
            let cfg = setup(&common)?;
            let results = selftest::run_all(cfg.master_seed());
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn explain(cfg: &RunConfig, model: &Model, ds: &Dataset, map: Option<&SystemMap>, out: &Path) -> Result<()> {
    let graphs: Vec<&Graph> = ds.graphs.iter().collect();
    let probs = model.edge_probabilities(&graphs)?;
    let masks_dir = out.join("masks");
    prepare_out(&masks_dir)?;
    for (i, p) in probs.iter().enumerate() {
        write_matrix_csv(&masks_dir.join(format!("sub_{i:04}.csv")), p)?;
    }
    if map.is_none() {
        log::warn!("no system map given; skipping system profiles");
    }
    for (c, class) in ds.class_names.iter().enumerate() {
        let class_probs: Vec<_> = probs
            .iter()
            .zip(&ds.graphs)
            .filter(|(_, g)| g.label == c)
            .map(|(p, _)| p.clone())
            .collect();
        write_matrix_csv(&out.join(format!("mean_mask_{class}.csv")), &mean_mask(&class_probs)?)?;
        let edges = dominant_subgraph(&class_probs, cfg.explain.top_k)?;
        write(&out.join(format!("dominant_edges_{class}.csv")), &edges_csv(&edges))?;
        if let Some(map) = map {
            let profile = profile_systems(&class_probs, map, &cfg.explain.densities)?;
            write(&out.join(format!("system_auc_{class}.csv")), &profile.to_csv())?;
            write(
                &out.join(format!("system_ranking_{class}.json")),
                &(serde_json::to_string_pretty(&profile.ranking())? + "\n"),
            )?;
        }
    }
    Ok(())
}
