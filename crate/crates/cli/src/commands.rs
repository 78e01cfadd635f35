use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::parser::ValueSource;
use clap::ArgMatches;
use coad_core::augmentation::{expand_record, AugmentConfig};
use coad_core::corpus::{
    generate_synthetic, load_corpus, write_corpus, Finding, PrefixIndex, SymptomStatus, Vocab,
};
use coad_core::dialogue::{DialogueSession, Inquiry};
use coad_core::evaluation::{
    evaluate, run_experiment, ExperimentConfig, ExperimentReport, MetricsReport,
};
use coad_core::model::CoadModel;
use coad_core::training::{train, LogEntry, TrainConfig};
use serde::Serialize;

use crate::args::{
    Command, DiagnoseArgs, EvaluateArgs, ExperimentArgs, GenDataArgs, InspectArgs, ReportArgs,
    ServeArgs, TrainArgs,
};
use crate::Failure;

type Outcome = Result<(), Failure>;

pub fn run(command: Command, m: &ArgMatches) -> Outcome {
    match command {
        Command::GenData(a) => gen_data(&a, m),
        Command::Train(a) => train_cmd(&a, m),
        Command::Evaluate(a) => evaluate_cmd(&a, m),
        Command::InspectSample(a) => inspect(&a),
        Command::Diagnose(a) => diagnose(&a),
        Command::Serve(a) => serve(&a),
        Command::Report(a) => report(&a),
        Command::Experiment(a) => experiment(&a, m),
    }
}

fn write_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("writing {}: {e}", path.display()))
}

/// Refuses to write over a file the command reads.
fn distinct(output: &Path, inputs: &[&Path]) -> Outcome {
    let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    };
    if let Some(input) = inputs.iter().find(|i| same(output, i)) {
        return Err(Failure::usage(format!(
            "{} is both an input and an output",
            input.display()
        )));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| write_failure(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| write_failure(path, e))?;
    writeln!(w)
        .and_then(|()| w.flush())
        .map_err(|e| write_failure(path, e))
}

fn gen_data(a: &GenDataArgs, m: &ArgMatches) -> Outcome {
    let cfg = a.synthetic_config(m)?;
    if let Some(c) = &a.config {
        distinct(&a.out, &[c])?;
    }
    let corpus = generate_synthetic(&cfg)?;
    write_corpus(&corpus, &a.out).map_err(|e| write_failure(&a.out, e))?;
    println!("{}", corpus.stats());
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Flags over the config file, with the training seed handled like any
/// other knob.
fn train_config(
    knobs: &crate::args::TrainKnobs,
    seed: u64,
    m: &ArgMatches,
) -> Result<TrainConfig, Failure> {
    let mut cfg = knobs.train_config(m)?;
    if knobs.config.is_none() || m.value_source("seed") == Some(ValueSource::CommandLine) {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs, m: &ArgMatches) -> Outcome {
    let mut cfg = train_config(&a.knobs, a.seed, m)?;
    if a.knobs.config.is_none() || m.value_source("variant") == Some(ValueSource::CommandLine) {
        cfg.variant = a.variant;
    }
    distinct(&a.out, &[&a.corpus])?;
    distinct(&a.log, &[&a.corpus, &a.out])?;
    let corpus = load_corpus(&a.corpus)?;
    let mut log = create(&a.log)?;
    let outcome = train(&corpus, &cfg, Some(&mut log))?;
    log.flush().map_err(|e| write_failure(&a.log, e))?;
    outcome
        .model
        .save(&a.out, &corpus.vocab)
        .map_err(|e| write_failure(&a.out, e))?;
    let last = outcome.log.last().expect("at least one step");
    println!(
        "{} steps, {} parameters, final loss {:.4} (symptom {:.4}, disease {:.4})",
        outcome.log.len(),
        outcome.model.param_count(),
        last.loss_total,
        last.loss_sym,
        last.loss_dis
    );
    println!("wrote {} and {}", a.out.display(), a.log.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct CheckpointRow {
    checkpoint: PathBuf,
    mode: coad_core::dialogue::StopMode,
    #[serde(rename = "T_max")]
    max_turns: usize,
    metrics: MetricsReport,
}

fn load_model(path: &Path) -> Result<(CoadModel<f32>, Vocab), Failure> {
    CoadModel::<f32>::load(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn evaluate_cmd(a: &EvaluateArgs, m: &ArgMatches) -> Outcome {
    let protocols = a.protocol.protocols()?;
    if let Some(out) = &a.out {
        let mut inputs: Vec<&Path> = vec![&a.corpus];
        inputs.extend(a.checkpoint.iter().map(PathBuf::as_path));
        distinct(out, &inputs)?;
    }
    let corpus = load_corpus(&a.corpus)?;
    if a.checkpoint.is_empty() {
        let cfg = ExperimentConfig {
            variants: a.variant.clone(),
            seeds: vec![a.seed],
            train: train_config(&a.knobs, a.seed, m)?,
            protocols,
            recall: a.protocol.recall,
        };
        let report = run_experiment(&corpus, &cfg)?;
        print!("{}", report.table());
        if let Some(out) = &a.out {
            write_json(out, &report)?;
        }
        return Ok(());
    }

    let mut rows = Vec::new();
    for path in &a.checkpoint {
        let (model, vocab) = load_model(path)?;
        if vocab != corpus.vocab {
            return Err(Failure::data(format!(
                "{} was trained on a different vocabulary than {}",
                path.display(),
                a.corpus.display()
            )));
        }
        for p in &protocols {
            for &t in &p.budgets {
                let dialogue = coad_core::dialogue::DialogueConfig {
                    max_turns: t,
                    mode: p.mode,
                };
                rows.push(CheckpointRow {
                    checkpoint: path.clone(),
                    mode: p.mode,
                    max_turns: t,
                    metrics: evaluate(&model, &corpus.test, dialogue, a.protocol.recall)?,
                });
            }
        }
    }
    let width = a
        .checkpoint
        .iter()
        .map(|p| p.display().to_string().len())
        .max()
        .unwrap_or(0)
        .max(10);
    for p in &protocols {
        for &t in &p.budgets {
            println!(
                "{} turns = {t}",
                serde_json::to_value(p.mode)
                    .expect("mode")
                    .as_str()
                    .unwrap_or("")
            );
            println!(
                "{:<width$} {:>7} {:>7} {:>7} {:>6}",
                "checkpoint", "Ac", "Rc", "Cs", "T"
            );
            for r in rows.iter().filter(|r| r.mode == p.mode && r.max_turns == t) {
                println!(
                    "{:<width$} {:>7.4} {:>7.4} {:>7.4} {:>6.2}",
                    r.checkpoint.display(),
                    r.metrics.accuracy,
                    r.metrics.recall,
                    r.metrics.combined,
                    r.metrics.avg_turns
                );
            }
        }
    }
    if let Some(out) = &a.out {
        write_json(out, &rows)?;
    }
    Ok(())
}

fn experiment(a: &ExperimentArgs, m: &ArgMatches) -> Outcome {
    distinct(&a.out, &[&a.corpus])?;
    let corpus = load_corpus(&a.corpus)?;
    let cfg = ExperimentConfig {
        variants: a.variant.clone(),
        seeds: a.seeds.clone(),
        train: a.knobs.train_config(m)?,
        protocols: a.protocol.protocols()?,
        recall: a.protocol.recall,
    };
    let report = run_experiment(&corpus, &cfg)?;
    print!("{}", report.table());
    write_json(&a.out, &report)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn inspect(a: &InspectArgs) -> Outcome {
    let corpus = load_corpus(&a.corpus)?;
    let split = match a.split.as_str() {
        "train" => &corpus.train,
        "test" => &corpus.test,
        other => {
            return Err(Failure::usage(format!(
                "unknown split {other:?} (train, test)"
            )))
        }
    };
    let record = split.get(a.index).ok_or_else(|| {
        Failure::usage(format!(
            "{} split has {} records; index {} is out of range",
            a.split,
            split.len(),
            a.index
        ))
    })?;
    let index = PrefixIndex::build(&corpus.train);
    let cfg = AugmentConfig {
        final_label: a.final_label,
        weights: a.weights,
    };
    print!(
        "{}",
        expand_record(record, &index, cfg).render(&corpus.vocab)
    );
    Ok(())
}

fn parse_status(s: &str) -> Option<SymptomStatus> {
    match s.trim().to_ascii_lowercase().as_str() {
        "y" | "yes" | "1" => Some(SymptomStatus::Present),
        "n" | "no" | "2" => Some(SymptomStatus::Absent),
        "u" | "unsure" | "0" => Some(SymptomStatus::Uncertain),
        _ => None,
    }
}

fn parse_reported(arg: &str, vocab: &Vocab) -> Result<Finding, Failure> {
    let (name, status) = match arg.rsplit_once('=') {
        Some((n, s)) => (
            n.trim(),
            parse_status(s).ok_or_else(|| Failure::usage(format!("bad status in {arg:?}")))?,
        ),
        None => (arg.trim(), SymptomStatus::Present),
    };
    let id = vocab
        .symptom_id(name)
        .ok_or_else(|| Failure::data(format!("unknown symptom {name:?}")))?;
    Ok(Finding::new(id, status))
}

fn diagnose(a: &DiagnoseArgs) -> Outcome {
    let dialogue = a.session.dialogue()?;
    let (model, vocab) = load_model(&a.checkpoint)?;
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    let mut next_line = |prompt: &str| -> Result<String, Failure> {
        print!("{prompt}");
        io::stdout()
            .flush()
            .map_err(|e| Failure::runtime(e.to_string()))?;
        match lines.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Failure::runtime(e.to_string())),
            None => Err(Failure::data(
                "input ended before the consultation finished",
            )),
        }
    };

    let explicit = if a.symptom.is_empty() {
        let line = next_line("Symptoms you have noticed (comma separated): ")?;
        line.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| parse_reported(s, &vocab))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        a.symptom
            .iter()
            .map(|s| parse_reported(s, &vocab))
            .collect::<Result<Vec<_>, _>>()?
    };
    if explicit.len() + dialogue.max_turns > model.config().max_len {
        return Err(Failure::usage(format!(
            "{} symptoms plus {} turns exceed the model's {} positions",
            explicit.len(),
            dialogue.max_turns,
            model.config().max_len
        )));
    }
    let mut session = DialogueSession::new(explicit, dialogue)?;
    while let Inquiry::Ask(s) = session.next_inquiry(&model)? {
        let status = loop {
            let line = next_line(&format!("Agent asks: {}? [y/n/u] ", vocab.symptom_name(s)))?;
            match parse_status(&line) {
                Some(st) => break st,
                None => println!("Please answer y (yes), n (no) or u (unsure)."),
            }
        };
        session.answer(status)?;
    }
    let d = session.diagnose(&model)?;
    println!(
        "Diagnosis after {} turns: {}",
        session.turns(),
        vocab.disease_name(d.disease)
    );
    for (i, (id, p)) in d.top(a.top).into_iter().enumerate() {
        println!("{:>2}. {:<24} {:.3}", i + 1, vocab.disease_name(id), p);
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Outcome {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let idle = Duration::from_secs(a.idle_minutes.saturating_mul(60));
    if idle.is_zero() {
        return Err(Failure::usage("idle-minutes must be positive"));
    }
    let state = Arc::new(coad_service::AppState::new(model, vocab, idle));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| Failure::runtime(format!("binding {}: {e}", a.addr)))?;
        eprintln!(
            "listening on http://{}",
            listener
                .local_addr()
                .map_err(|e| Failure::runtime(e.to_string()))?
        );
        coad_service::serve(listener, state)
            .await
            .map_err(|e| Failure::runtime(e.to_string()))
    })
}

fn report(a: &ReportArgs) -> Outcome {
    if a.every == 0 {
        return Err(Failure::usage("--every must be positive"));
    }
    let text = std::fs::read_to_string(&a.input)
        .map_err(|e| Failure::data(format!("{}: {e}", a.input.display())))?;
    if let Ok(r) = serde_json::from_str::<ExperimentReport>(&text) {
        print!("{}", r.table());
        return Ok(());
    }
    let mut log = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let e: LogEntry = serde_json::from_str(line).map_err(|e| {
            Failure::data(format!(
                "{} line {}: neither an experiment report nor a training log ({e})",
                a.input.display(),
                i + 1
            ))
        })?;
        log.push(e);
    }
    if log.is_empty() {
        return Err(Failure::data(format!("{} is empty", a.input.display())));
    }
    println!(
        "{:>13} {:>10} {:>10} {:>10}",
        "steps", "total", "symptom", "disease"
    );
    for chunk in log.chunks(a.every) {
        let n = chunk.len() as f64;
        let mean = |f: fn(&LogEntry) -> f64| chunk.iter().map(f).sum::<f64>() / n;
        println!(
            "{:>13} {:>10.4} {:>10.4} {:>10.4}",
            format!("{}-{}", chunk[0].step, chunk[chunk.len() - 1].step),
            mean(|e| e.loss_total),
            mean(|e| e.loss_sym),
            mean(|e| e.loss_dis)
        );
    }
    Ok(())
}
