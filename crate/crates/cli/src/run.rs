use crate::error::{CliError, CliResult};
use crate::explain_cmd;
use crate::invocation::{EvalSource, Invocation};
use crate::manifest::{Outputs, RunManifest, PREPROCESSING};
use std::collections::BTreeMap;
use std::path::Path;
use xplain_core::dataset::{self, SplitManifest};
use xplain_core::evalbench::{
    self, resolve_split, write_reports, ConfusionMatrix, Evaluation, GridOptions, RunContext,
};
use xplain_core::nnet::{save_checkpoint, Checkpoint};

pub type Seeds = BTreeMap<String, u64>;

/// Runs `inv`, writing artifacts and a manifest under `out` when given.
pub fn execute(inv: &Invocation, out: Option<&Path>) -> CliResult<()> {
    let started_at = chrono::Utc::now();
    let mut outputs = out.map(Outputs::create).transpose()?;
    let seeds = match inv {
        Invocation::Scan { roots } => scan(roots, outputs.as_mut())?,
        Invocation::Split {
            roots,
            seed,
            balance,
        } => {
            let outputs = outputs.as_mut().expect("split has --out");
            let corpus = dataset::scan_corpora(roots)?;
            let plan = dataset::make_split(&corpus, *seed, *balance)?;
            let manifest = SplitManifest::new(&corpus, &plan);
            manifest.save(&outputs.file("split.json"))?;
            for p in &manifest.partitions {
                println!(
                    "{}: train {} val {} test {} unused {}",
                    p.class,
                    p.train.len(),
                    p.val.len(),
                    p.test.len(),
                    p.unused.len()
                );
            }
            Seeds::from([("split".to_string(), *seed)])
        }
        Invocation::Train { config } => {
            let outputs = outputs.as_mut().expect("train has --out");
            let mut ctx = RunContext::new();
            let outcome = evalbench::run_experiment(config, &mut ctx)?;
            let ckpt = Checkpoint {
                network: outcome.network,
                class_names: outcome.class_names,
                step: outcome.history.records.len() as u64,
            };
            save_checkpoint(&outputs.file("model.xck"), &ckpt)?;
            outcome.history.save_csv(&outputs.file("history.csv"))?;
            outcome.split.save(&outputs.file("split.json"))?;
            outputs.write("config.toml", config.to_toml())?;
            write_evaluation(outputs, &outcome.test)?;
            let m = &outcome.test.metrics;
            println!(
                "best epoch {}; test accuracy {:.4}, macro F1 {:.4}",
                outcome.history.best_epoch, m.accuracy, m.macro_f1
            );
            Seeds::from([
                ("train".to_string(), config.seed),
                ("split".to_string(), config.dataset.split_seed),
            ])
        }
        Invocation::Evaluate {
            model,
            source,
            partition,
        } => {
            let outputs = outputs.as_mut().expect("evaluate has --out");
            let (split, split_seed) = match source {
                EvalSource::SplitFile(path) => {
                    let m = SplitManifest::load(path)?;
                    let seed = m.seed;
                    (m, seed)
                }
                EvalSource::Dataset(d) => (resolve_split(d)?, d.split_seed),
            };
            let handle = model.open()?;
            if handle.class_names() != split.classes.as_slice() {
                log::warn!(
                    "model classes {:?} differ from dataset classes {:?}; labels are matched by index",
                    handle.class_names(),
                    split.classes
                );
            }
            let items = split.items(*partition);
            let eval = evalbench::evaluate(&handle, &items)?;
            write_evaluation(outputs, &eval)?;
            println!(
                "accuracy {:.4}, macro F1 {:.4}",
                eval.metrics.accuracy, eval.metrics.macro_f1
            );
            Seeds::from([("split".to_string(), split_seed)])
        }
        Invocation::Grid {
            config,
            grid,
            resume,
        } => {
            let outputs = outputs.as_mut().expect("grid has --out");
            resolve_split(&config.dataset)?;
            let options = GridOptions {
                cell_dir: Some(outputs.root().join("cells")),
                resume: *resume,
            };
            let cells = evalbench::grid_cells(config, *grid).len();
            let mut ctx = RunContext::new();
            let report = evalbench::run_grid(
                config,
                *grid,
                &options,
                &mut ctx,
                &mut |row, done, reused| {
                    let result = match (&row.metrics, &row.error) {
                        (Some(m), _) => {
                            format!("accuracy {:.4} macro F1 {:.4}", m.accuracy, m.macro_f1)
                        }
                        (None, e) => format!("FAILED: {}", e.as_deref().unwrap_or("unknown error")),
                    };
                    let note = if reused { " (resumed)" } else { "" };
                    eprintln!("[{done}/{cells}] {} {result}{note}", row.cell);
                },
            )?;
            for path in write_reports(&report, outputs.root())? {
                let name = path
                    .file_name()
                    .expect("report file")
                    .to_string_lossy()
                    .into_owned();
                outputs.file(&name);
            }
            for row in &report.rows {
                outputs.file(&format!("cells/{:02}_{}.json", row.index, row.cell));
            }
            if report.rows.iter().all(|r| r.metrics.is_none()) {
                return Err(CliError::runtime("every grid cell failed; see grid.csv"));
            }
            if let Some(best) = report.rows.iter().find(|r| r.best) {
                println!("best cell: {}", best.cell);
            }
            Seeds::from([
                ("train".to_string(), config.seed),
                ("split".to_string(), config.dataset.split_seed),
            ])
        }
        Invocation::Explain {
            image,
            model,
            request,
        } => explain_cmd::explain(
            image,
            model,
            request,
            outputs.as_mut().expect("explain has --out"),
        )?,
        Invocation::CompareXai {
            image,
            model,
            request,
            shap_classes,
        } => explain_cmd::compare(
            image,
            model,
            request,
            *shap_classes,
            outputs.as_mut().expect("compare-xai has --out"),
        )?,
    };
    if let Some(outputs) = outputs {
        let root = outputs.root().to_path_buf();
        let manifest = RunManifest {
            command: inv.name().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            invocation: inv.clone(),
            seeds,
            preprocessing: PREPROCESSING.to_string(),
            artifacts: outputs.into_files(),
            started_at,
            finished_at: chrono::Utc::now(),
        };
        manifest.save(&root)?;
    }
    Ok(())
}

fn scan(roots: &[std::path::PathBuf], outputs: Option<&mut Outputs>) -> CliResult<Seeds> {
    let corpus = dataset::scan_corpora(roots)?;
    for (class, count) in corpus.classes().iter().zip(corpus.counts()) {
        println!("{class}\t{count}");
    }
    println!("total\t{}", corpus.len());
    if let Some(outputs) = outputs {
        outputs.write_json("corpus.json", &corpus)?;
    }
    Ok(Seeds::new())
}

fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let mut s = String::from("true\\predicted");
    for c in cm.classes() {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (c, row) in cm.classes().iter().zip(cm.counts()) {
        s.push_str(c);
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

fn write_evaluation(outputs: &mut Outputs, eval: &Evaluation) -> CliResult<()> {
    outputs.write_json("metrics.json", eval)?;
    outputs.write("confusion.csv", confusion_csv(&eval.confusion))?;
    Ok(())
}
