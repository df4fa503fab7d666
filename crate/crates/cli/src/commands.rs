use std::path::Path;

use serde_json::{json, Map, Value};
use ser_core::config::RunConfig;
use ser_core::data::{read_manifest, Split};
use ser_core::features::FeatureExtractor;
use ser_core::gradcheck::{self, GradcheckOptions};
use ser_core::metrics::{argmax, evaluate, softmax_rows, write_reports};
use ser_core::model::{load_checkpoint, predict_logits, save_checkpoint, EmotionLabel};
use ser_core::synth::synth_corpus;
use ser_core::train::{log_csv, train_with, NoAugment};
use ser_core::workflow::{featurize_entries, input_for_file, load_splits, manifest_path};

use crate::error::{io_err, CliError};

pub fn synth(out: &Path, n_per_class: usize, seed: u64) -> Result<(), CliError> {
    let entries = synth_corpus(out, n_per_class, seed)?;
    println!("wrote {} utterances and {}", entries.len(), out.join("manifest.csv").display());
    Ok(())
}

fn extractor(cfg: &RunConfig) -> Result<FeatureExtractor, CliError> {
    FeatureExtractor::new(cfg.features.clone()).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn featurize(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest = manifest_path(cfg)?;
    let entries = read_manifest(&manifest)?;
    let fx = extractor(cfg)?;
    let report = featurize_entries(&entries, &cfg.paths.data_base(), &cfg.paths.cache_dir, &fx)?;
    for (path, err) in &report.failures {
        eprintln!("failed: {path}: {err}");
    }
    println!(
        "featurized {} file(s), {} up to date, {} failed; cache in {}",
        report.written.len(),
        report.up_to_date.len(),
        report.failures.len(),
        cfg.paths.cache_dir.display()
    );
    if report.ok() {
        Ok(())
    } else {
        Err(CliError::FeaturizeFailed(report.failures.len()))
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_splits(cfg)?;
    eprintln!(
        "training {} on {} train / {} val utterances",
        cfg.arch.network.name(),
        data.train.len(),
        data.val.len()
    );
    let max_epochs = cfg.train.max_epochs;
    let mut progress = |r: &ser_core::train::EpochRecord| {
        eprintln!(
            "epoch {:>3}/{max_epochs}  lr {:.3e}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    };
    let out = train_with(&data.train, &data.val, &cfg.arch, &cfg.train, &mut NoAugment, &mut progress)?;
    let dir = &cfg.paths.run_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_checkpoint(&dir.join("best.ckpt"), &out.best)?;
    save_checkpoint(&dir.join("last.ckpt"), &out.last)?;
    let log = dir.join("train_log.csv");
    std::fs::write(&log, log_csv(&out.log)).map_err(io_err(&log))?;
    let ini = dir.join("config.ini");
    std::fs::write(&ini, cfg.to_ini_string()).map_err(io_err(&ini))?;
    println!(
        "best epoch {} of {}{}; wrote best.ckpt, last.ckpt, train_log.csv and config.ini to {}",
        out.best_epoch,
        out.log.len(),
        if out.stopped_early { " (early stop)" } else { "" },
        dir.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, split: Split) -> Result<(), CliError> {
    let ckpt = cfg.paths.checkpoint_or_best();
    let params = load_checkpoint(&ckpt, &cfg.arch)?;
    let data = load_splits(cfg)?;
    let eval = evaluate(&params, &cfg.arch, data.get(split), cfg.train.batch_size)?;
    write_reports(&cfg.paths.report_dir, &eval)?;
    println!(
        "{split}: accuracy {:.4}, macro F1 {:.4} over {} utterances; reports in {}",
        eval.report.accuracy,
        eval.report.macro_avg.f1,
        eval.report.n_samples,
        cfg.paths.report_dir.display()
    );
    Ok(())
}

pub fn predict(cfg: &RunConfig, wav: &Path) -> Result<(), CliError> {
    let params = load_checkpoint(&cfg.paths.checkpoint_or_best(), &cfg.arch)?;
    let x = input_for_file(wav, &extractor(cfg)?, &cfg.arch)?;
    let logits = predict_logits(&params, &cfg.arch, &x)?;
    let probs = softmax_rows(logits.data(), cfg.arch.n_classes);
    let label = EmotionLabel::from_index(argmax(logits.data())).expect("class index in range");
    let mut p = Map::new();
    for (l, &v) in EmotionLabel::ALL.iter().zip(&probs) {
        p.insert(l.name().to_string(), json!(v));
    }
    let out = json!({"label": label.name(), "probabilities": Value::Object(p)});
    println!("{out}");
    Ok(())
}

pub fn gradcheck(trials: usize, seed: u64, include_models: bool, inject_fault: Option<String>) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    let opts = GradcheckOptions {
        trials,
        seed,
        inject_fault,
        include_models,
    };
    let report = gradcheck::run(&opts)?;
    print!("{}", report.table());
    let failed: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", report.ops.len() + report.models.len());
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}
