use std::fs;
use std::path::{Path, PathBuf};

use m2ort_core::data::{select_genes as choose_genes, synth_corpus, Corpus, Dataset, GenePanel, Split};
use m2ort_core::gradcheck::{gradcheck as check_gradients, tiny_config};
use m2ort_core::model::profile::profile as profile_of;
use m2ort_core::model::Checkpoint;
use m2ort_core::report::render_dump;
use m2ort_core::train::{
    ablation_run, apply_overrides, evaluate, grid, train_corpus, write_evaluation, GridEntry, GridName, Splits,
};

use crate::config::{resolve, write_resolved, RunConfig};
use crate::{CliError, Common};

/// Finite-difference agreement required by `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-4;

fn setup(args: &Common) -> Result<(RunConfig, std::collections::BTreeMap<String, serde_json::Value>), CliError> {
    resolve(args.config.as_deref(), args.overrides()?)
}

fn require_out(args: &Common) -> Result<&Path, CliError> {
    args.out
        .as_deref()
        .ok_or_else(|| CliError::Validation("--out is required".into()))
}

fn corpus_root(config: &RunConfig) -> Result<&Path, CliError> {
    config
        .corpus
        .as_deref()
        .ok_or_else(|| CliError::Validation("--corpus (or config key corpus) is required".into()))
}

fn open_corpus(config: &RunConfig) -> Result<Corpus, CliError> {
    Ok(Corpus::open(corpus_root(config)?)?)
}

fn load_panel(config: &RunConfig) -> Result<GenePanel, CliError> {
    let dir: PathBuf = match &config.panel {
        Some(p) => p.clone(),
        None => corpus_root(config)?.to_path_buf(),
    };
    Ok(GenePanel::load(&dir)?)
}

/// Model config with the output width taken from the panel.
fn model_for(config: &RunConfig, panel: &GenePanel) -> m2ort_core::ModelConfig {
    let mut model = config.model.clone();
    if model.genes != panel.len() {
        log::info!("model.genes set to the panel size {}", panel.len());
        model.genes = panel.len();
    }
    model
}

pub fn synth(args: &Common) -> Result<(), CliError> {
    let (config, flat) = setup(args)?;
    let out = require_out(args)?;
    let manifest = synth_corpus(out, &config.synth)?;
    write_resolved(out, &flat)?;
    println!("wrote {} slides to {}", manifest.wsis.len(), out.display());
    Ok(())
}

pub fn select_genes(args: &Common) -> Result<(), CliError> {
    let (config, flat) = setup(args)?;
    let corpus = open_corpus(&config)?;
    let panel = choose_genes(&corpus, config.genes.n_top, config.genes.n_final, config.seed)?;
    let dir = args.out.clone().unwrap_or_else(|| corpus.root().to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    panel.save(&dir)?;
    write_resolved(&dir, &flat)?;
    println!("selected {} of {} candidate genes into {}", panel.len(), panel.union_size, dir.display());
    Ok(())
}

pub fn train(args: &Common) -> Result<(), CliError> {
    let (mut config, _) = setup(args)?;
    let out = require_out(args)?;
    let corpus = open_corpus(&config)?;
    let panel = load_panel(&config)?;
    config.model = model_for(&config, &panel);
    config.model.validate()?;
    write_resolved(out, &crate::config::resolved_flat(&config))?;
    let outcome = train_corpus(&config.model, &corpus, &panel, &config.train, Some(out))?;
    let last = outcome.log.last();
    println!(
        "trained {} steps; final train loss {}; best val pcc {}",
        outcome.step_losses.len(),
        last.map(|r| r.train_loss.to_string()).unwrap_or_default(),
        outcome.best_val_pcc.map(|p| p.to_string()).unwrap_or_default()
    );
    Ok(())
}

pub fn eval(args: &Common) -> Result<(), CliError> {
    let (config, flat) = setup(args)?;
    let out = require_out(args)?;
    let ckpt_dir = config
        .eval
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Validation("--checkpoint (or config key eval.checkpoint) is required".into()))?;
    let corpus = open_corpus(&config)?;
    let panel = load_panel(&config)?;
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let data = Dataset::load(&corpus, config.eval.split, &panel)?;
    write_resolved(out, &flat)?;
    let evaluation = evaluate(&ckpt.model, &data, config.train.batch_size)?;
    write_evaluation(out, &evaluation, &data)?;
    let r = &evaluation.report;
    println!(
        "split {} spots {} mean_pcc {} mean_rmse {} degenerate {}",
        r.split, r.spot_count, r.mean_pcc, r.mean_rmse, r.degenerate_spots
    );
    Ok(())
}

pub fn ablate(args: &Common) -> Result<(), CliError> {
    let (mut config, _) = setup(args)?;
    let out = require_out(args)?;
    let corpus = open_corpus(&config)?;
    let panel = load_panel(&config)?;
    config.model = model_for(&config, &panel);
    config.model.validate()?;
    let entries: Vec<GridEntry> = match config.ablate.grid {
        GridName::Custom => {
            if config.ablate.entries.is_empty() {
                return Err(CliError::Validation("custom grid needs ablate.entries in the config".into()));
            }
            config
                .ablate
                .entries
                .iter()
                .map(|e| {
                    Ok(GridEntry {
                        name: e.name.clone(),
                        config: apply_overrides(&config.model, &e.overrides)?,
                    })
                })
                .collect::<Result<_, CliError>>()?
        }
        g => grid(g, &config.model),
    };
    write_resolved(out, &crate::config::resolved_flat(&config))?;
    let train_set = Dataset::load(&corpus, Split::Train, &panel)?;
    let val_set = Dataset::load(&corpus, Split::Val, &panel)?;
    let test_set = Dataset::load(&corpus, Split::Test, &panel)?;
    let splits = Splits {
        train: &train_set,
        val: Some(&val_set),
        test: &test_set,
    };
    let rows = ablation_run(&entries, &splits, &config.train, Some(out))?;
    for r in rows {
        println!("{} mean_pcc {} mean_rmse {} params {} macs {}", r.name, r.mean_pcc, r.mean_rmse, r.params, r.macs);
    }
    Ok(())
}

pub fn profile(args: &Common) -> Result<(), CliError> {
    let (config, flat) = setup(args)?;
    config.model.validate()?;
    let p = profile_of(&config.model);
    println!("params {} ({:.2} M)", p.params, p.params as f64 / 1e6);
    println!("macs {} ({:.2} G)", p.macs, p.macs as f64 / 1e9);
    println!("embed_params {}", p.embed_params);
    println!("encoder_params {}", p.encoder_params);
    println!("head_params {}", p.head_params);
    println!("embed_macs {}", p.embed_macs);
    println!("encoder_macs {}", p.encoder_macs);
    println!("head_macs {}", p.head_macs);
    if let Some(out) = &args.out {
        write_resolved(out, &flat)?;
        let mut json = serde_json::to_string_pretty(&p).expect("profile serializes");
        json.push('\n');
        let path = out.join("profile.json");
        fs::write(&path, json).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn gradcheck(args: &Common) -> Result<(), CliError> {
    let (config, flat) = setup(args)?;
    let report = check_gradients(&tiny_config(), 2, config.seed)?;
    println!(
        "max relative error {:e} over {} entries (worst {}[{}]; {} below floor)",
        report.max_rel_error, report.checked, report.worst.0, report.worst.1, report.skipped_small
    );
    if let Some(out) = &args.out {
        write_resolved(out, &flat)?;
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        let path = out.join("gradcheck.json");
        fs::write(&path, json).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    if report.max_rel_error >= GRADCHECK_TOL {
        return Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {:e} >= {GRADCHECK_TOL:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

pub fn render(args: &Common) -> Result<(), CliError> {
    let (config, flat) = setup(args)?;
    let out = require_out(args)?;
    let dump = config
        .render
        .dump
        .as_deref()
        .ok_or_else(|| CliError::Validation("--dump (or config key render.dump) is required".into()))?;
    let corpus = open_corpus(&config)?;
    let files = render_dump(dump, &corpus, out, config.seed)?;
    write_resolved(out, &flat)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}
