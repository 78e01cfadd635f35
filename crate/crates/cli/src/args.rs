use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Parser, Subcommand};
use coad_core::augmentation::{FinalLabel, WeightFormula};
use coad_core::corpus::SyntheticConfig;
use coad_core::dialogue::{DialogueConfig, StopMode};
use coad_core::evaluation::{Protocol, RecallMode};
use coad_core::training::{TrainConfig, Variant};
use serde::de::DeserializeOwned;

use crate::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "coad",
    version,
    about = "Symptom inquiry and diagnosis with a jointly trained transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and print its statistics.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a step log.
    Train(TrainArgs),
    /// Score checkpoints, or freshly trained variants, on the test split.
    Evaluate(EvaluateArgs),
    /// Print the expanded training sample of one record.
    InspectSample(InspectArgs),
    /// Run an interactive consultation in the terminal.
    Diagnose(DiagnoseArgs),
    /// Serve the HTTP session API.
    Serve(ServeArgs),
    /// Summarise a training log or an experiment report.
    Report(ReportArgs),
    /// Train every variant under several seeds and tabulate the results.
    Experiment(ExperimentArgs),
}

/// Parses a snake_case or lowercase enum name through its serde form.
fn serde_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn stop_mode(s: &str) -> Result<StopMode, String> {
    serde_name(s)
}

fn final_label(s: &str) -> Result<FinalLabel, String> {
    serde_name(s)
}

fn weight_formula(s: &str) -> Result<WeightFormula, String> {
    serde_name(s)
}

fn recall_mode(s: &str) -> Result<RecallMode, String> {
    serde_name(s)
}

fn from_command_line(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn read_json<T: DeserializeOwned>(path: &PathBuf) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output corpus file.
    #[arg(long, default_value = "corpus.jsonl")]
    pub out: PathBuf,
    /// JSON generator settings; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub n_diseases: usize,
    #[arg(long, default_value_t = 30)]
    pub n_symptoms: usize,
    /// Symptoms in each disease's profile.
    #[arg(long, default_value_t = 7)]
    pub symptoms_per_disease: usize,
    /// Chance a profile symptom is reported present.
    #[arg(long, default_value_t = 0.85)]
    pub presence_prob: f64,
    /// Chance a profile symptom is reported absent.
    #[arg(long, default_value_t = 0.1)]
    pub negative_prob: f64,
    /// Chance of an unrelated symptom per record.
    #[arg(long, default_value_t = 0.05)]
    pub noise_prob: f64,
    /// Self-reported symptoms per record, as MIN,MAX.
    #[arg(long, num_args = 2, value_delimiter = ',', default_values_t = [1, 2])]
    pub explicit_range: Vec<usize>,
    /// Symptoms left to inquire per record, as MIN,MAX.
    #[arg(long, num_args = 2, value_delimiter = ',', default_values_t = [2, 5])]
    pub implicit_range: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_test: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

impl GenDataArgs {
    pub fn synthetic_config(&self, m: &ArgMatches) -> Result<SyntheticConfig, Failure> {
        let mut c: SyntheticConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => SyntheticConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(
                if self.config.is_none() || from_command_line(m, stringify!($f)) {
                    c.$f = self.$f;
                }
            )*};
        }
        take!(
            n_diseases,
            n_symptoms,
            symptoms_per_disease,
            presence_prob,
            negative_prob,
            noise_prob,
            n_train,
            n_test,
            seed
        );
        if self.config.is_none() || from_command_line(m, "explicit_range") {
            c.explicit_range = (self.explicit_range[0], self.explicit_range[1]);
        }
        if self.config.is_none() || from_command_line(m, "implicit_range") {
            c.implicit_range = (self.implicit_range[0], self.implicit_range[1]);
        }
        Ok(c)
    }
}

/// Model and optimiser knobs shared by every subcommand that trains.
#[derive(Debug, Args)]
pub struct TrainKnobs {
    /// JSON training settings; flags given on the command line win.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Base settings of a benchmark corpus: dxy, muzhi, muzhi2 or ped.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Feed-forward width.
    #[arg(long, default_value_t = 256)]
    pub ff: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Longest input sequence the model accepts.
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Global gradient norm cap; 0 turns clipping off.
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    /// Symptom label on the final position: end or ignore.
    #[arg(long, default_value = "end", value_parser = final_label)]
    pub final_label: FinalLabel,
    /// Loss weights: group_reciprocal, target_reciprocal or shifted_group_reciprocal.
    #[arg(long, default_value = "group_reciprocal", value_parser = weight_formula)]
    pub weights: WeightFormula,
}

impl TrainKnobs {
    /// Defaults, then the preset or config file, then explicit flags.
    pub fn train_config(&self, m: &ArgMatches) -> Result<TrainConfig, Failure> {
        let layered = self.config.is_some() || self.preset.is_some();
        let mut c = match (&self.config, &self.preset) {
            (Some(p), _) => read_json(p)?,
            (None, Some(name)) => TrainConfig::preset(name)?,
            (None, None) => TrainConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(
                if !layered || from_command_line(m, stringify!($f)) {
                    c.$f = self.$f;
                }
            )*};
        }
        take!(layers, hidden, heads, ff, dropout, max_len, batch_size, steps, lr, clip_norm);
        if !layered || from_command_line(m, "final_label") {
            c.augment.final_label = self.final_label;
        }
        if !layered || from_command_line(m, "weights") {
            c.augment.weights = self.weights;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    /// Output checkpoint.
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Output step log, one JSON object per line.
    #[arg(long, default_value = "train-log.jsonl")]
    pub log: PathBuf,
    #[arg(long, default_value_t = Variant::Full)]
    pub variant: Variant,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub knobs: TrainKnobs,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    /// Turn budgets under which the agent may stop early.
    #[arg(long, num_args = 0.., value_delimiter = ',', default_values_t = [5, 10, 20])]
    pub limited: Vec<usize>,
    /// Turn budgets the agent must use up; `--fixed` alone disables.
    #[arg(long, num_args = 0.., value_delimiter = ',', default_values_t = [10])]
    pub fixed: Vec<usize>,
    /// Which implicit symptoms count toward recall: all_implicit or positive_only.
    #[arg(long, default_value = "all_implicit", value_parser = recall_mode)]
    pub recall: RecallMode,
}

impl ProtocolArgs {
    pub fn protocols(&self) -> Result<Vec<Protocol>, Failure> {
        if self.fixed.contains(&0) {
            return Err(Failure::usage(
                "fixed mode needs a turn budget of at least 1",
            ));
        }
        let mut out = Vec::new();
        for (mode, budgets) in [
            (StopMode::Limited, &self.limited),
            (StopMode::Fixed, &self.fixed),
        ] {
            if !budgets.is_empty() {
                out.push(Protocol {
                    mode,
                    budgets: budgets.clone(),
                });
            }
        }
        if out.is_empty() {
            return Err(Failure::usage("no turn budgets to evaluate"));
        }
        Ok(out)
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    /// Checkpoints to score; without any, each `--variant` is trained first.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [Variant::Full])]
    pub variant: Vec<Variant>,
    /// Training seed for the variants.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the results as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[command(flatten)]
    pub knobs: TrainKnobs,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = Variant::ALL)]
    pub variant: Vec<Variant>,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5])]
    pub seeds: Vec<u64>,
    /// JSON report output.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[command(flatten)]
    pub knobs: TrainKnobs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, default_value = "corpus.jsonl")]
    pub corpus: PathBuf,
    /// train or test.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Record position within the split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value = "end", value_parser = final_label)]
    pub final_label: FinalLabel,
    #[arg(long, default_value = "group_reciprocal", value_parser = weight_formula)]
    pub weights: WeightFormula,
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    /// limited or fixed.
    #[arg(long, default_value = "limited", value_parser = stop_mode)]
    pub mode: StopMode,
    #[arg(long, default_value_t = 10)]
    pub max_turns: usize,
}

impl SessionArgs {
    pub fn dialogue(&self) -> Result<DialogueConfig, Failure> {
        if self.mode == StopMode::Fixed && self.max_turns == 0 {
            return Err(Failure::usage(
                "fixed mode needs a turn budget of at least 1",
            ));
        }
        Ok(DialogueConfig {
            max_turns: self.max_turns,
            mode: self.mode,
        })
    }
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    /// Self-reported symptom as NAME or NAME=STATUS (1 yes, 2 no, 0
    /// unsure); asked for on the terminal when absent.
    #[arg(long)]
    pub symptom: Vec<String>,
    /// Diseases listed with the final diagnosis.
    #[arg(long, default_value_t = 3)]
    pub top: usize,
    #[command(flatten)]
    pub session: SessionArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "model.ckpt")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Minutes of inactivity after which a session expires.
    #[arg(long, default_value_t = 30)]
    pub idle_minutes: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A training log or an experiment report.
    #[arg(long, default_value = "train-log.jsonl")]
    pub input: PathBuf,
    /// Steps averaged per row of a training log summary.
    #[arg(long, default_value_t = 100)]
    pub every: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{CommandFactory, FromArgMatches};

    fn parse(argv: &[&str]) -> (Cli, ArgMatches) {
        let m = Cli::command().try_get_matches_from(argv).unwrap();
        (Cli::from_arg_matches(&m).unwrap(), m)
    }

    #[test]
    fn flag_defaults_match_library_defaults() {
        let (cli, m) = parse(&["coad", "train"]);
        let Command::Train(t) = cli.command else {
            panic!()
        };
        let sub = m.subcommand_matches("train").unwrap();
        assert_eq!(t.knobs.train_config(sub).unwrap(), TrainConfig::default());
        assert_eq!(t.seed, TrainConfig::default().seed);

        let (cli, m) = parse(&["coad", "gen-data"]);
        let Command::GenData(g) = cli.command else {
            panic!()
        };
        let sub = m.subcommand_matches("gen-data").unwrap();
        assert_eq!(g.synthetic_config(sub).unwrap(), SyntheticConfig::default());
    }

    #[test]
    fn command_line_flags_override_a_preset() {
        let (cli, m) = parse(&["coad", "train", "--preset", "dxy", "--steps", "7"]);
        let Command::Train(t) = cli.command else {
            panic!()
        };
        let c = t
            .knobs
            .train_config(m.subcommand_matches("train").unwrap())
            .unwrap();
        assert_eq!((c.steps, c.lr, c.batch_size), (7, 5e-6, 64));
    }

    #[test]
    fn fixed_mode_without_turns_is_a_usage_error() {
        let (cli, _) = parse(&["coad", "diagnose", "--mode", "fixed", "--max-turns", "0"]);
        let Command::Diagnose(d) = cli.command else {
            panic!()
        };
        assert_eq!(d.session.dialogue().unwrap_err().code, 2);
        let (cli, _) = parse(&["coad", "evaluate", "--fixed", "0,5"]);
        let Command::Evaluate(e) = cli.command else {
            panic!()
        };
        assert_eq!(e.protocol.protocols().unwrap_err().code, 2);
    }

    #[test]
    fn bare_fixed_flag_drops_the_fixed_protocol() {
        let (cli, _) = parse(&["coad", "experiment", "--fixed", "--limited", "10"]);
        let Command::Experiment(e) = cli.command else {
            panic!()
        };
        let p = e.protocol.protocols().unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(
            (p[0].mode, p[0].budgets.as_slice()),
            (StopMode::Limited, &[10][..])
        );
    }

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
