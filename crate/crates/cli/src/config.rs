//! Run settings assembled from a key-value file and command-line flags.
//!
//! The file holds one `key = value` pair per line; blank lines and lines
//! starting with `#` are ignored. Keys are the long flag names, with either
//! `-` or `_` as separator. Flags given on the command line win over the file.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use clap::Args;
use structpos::harness::{DataConfig, Task, TrainConfig};
use structpos::nn::{AblationRow, EncoderConfig};
use structpos::posenc::{FusionMode, PositionConfig, Rule1};

use crate::CliError;

fn parse_row(s: &str) -> Result<u8, String> {
    let row: u8 = s
        .parse()
        .map_err(|_| format!("row must be an integer in 1..=9, got {s:?}"))?;
    AblationRow::new(row)
        .map(|r| r.id())
        .map_err(|e| e.to_string())
}

/// Flags shaping position annotations.
#[derive(Debug, Clone, Default, Args)]
pub struct PositionArgs {
    /// Relative positions are clipped to [-r, r] (default 16).
    #[arg(long)]
    pub r_clip: Option<usize>,
    /// Reading of rule 1: `ancestor` (same root path) or `edge` (direct arc).
    #[arg(long)]
    pub rule1: Option<Rule1>,
    /// Fusion of sequential and structural absolute encodings.
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    /// Append an end-of-sentence symbol to every annotated sentence.
    #[arg(long)]
    pub eos: bool,
}

/// Flags shaping the model, the synthetic data and training.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Ablation row 1-9 selecting the active position encodings.
    #[arg(long, value_parser = parse_row)]
    pub row: Option<u8>,
    /// Synthetic task: `depth` or `distance`.
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Tree-distance threshold of the distance task.
    #[arg(long)]
    pub threshold: Option<usize>,
}

/// Every configurable value; `None` means "use the default".
#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub position: PositionArgs,
    pub model: ModelArgs,
}

fn set<T: FromStr>(
    slot: &mut Option<T>,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), CliError>
where
    T::Err: Display,
{
    let v = value
        .parse()
        .map_err(|e| CliError::Usage(format!("config line {line}: bad value for {key}: {e}")))?;
    *slot = Some(v);
    Ok(())
}

impl Settings {
    /// Parses a key-value file; unknown keys are usage errors.
    pub fn from_file_text(text: &str) -> Result<Self, CliError> {
        let mut s = Settings::default();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {line}: expected key = value"))
            })?;
            let written = key.trim();
            let key = written.replace('-', "_");
            let value = value.trim();
            let (p, m) = (&mut s.position, &mut s.model);
            match key.as_str() {
                "r_clip" => set(&mut p.r_clip, &key, value, line)?,
                "rule1" => set(&mut p.rule1, &key, value, line)?,
                "fusion" => set(&mut p.fusion, &key, value, line)?,
                "eos" => {
                    p.eos = value.parse().map_err(|_| {
                        CliError::Usage(format!("config line {line}: eos must be true or false"))
                    })?
                }
                "row" => {
                    m.row = Some(
                        parse_row(value)
                            .map_err(|e| CliError::Usage(format!("config line {line}: {e}")))?,
                    )
                }
                "task" => set(&mut m.task, &key, value, line)?,
                "seed" => set(&mut m.seed, &key, value, line)?,
                "d_model" => set(&mut m.d_model, &key, value, line)?,
                "n_heads" => set(&mut m.n_heads, &key, value, line)?,
                "n_layers" => set(&mut m.n_layers, &key, value, line)?,
                "d_ffn" => set(&mut m.d_ffn, &key, value, line)?,
                "vocab_size" => set(&mut m.vocab_size, &key, value, line)?,
                "epochs" => set(&mut m.epochs, &key, value, line)?,
                "batch_size" => set(&mut m.batch_size, &key, value, line)?,
                "learning_rate" => set(&mut m.learning_rate, &key, value, line)?,
                "train_size" => set(&mut m.train_size, &key, value, line)?,
                "test_size" => set(&mut m.test_size, &key, value, line)?,
                "max_len" => set(&mut m.max_len, &key, value, line)?,
                "threshold" => set(&mut m.threshold, &key, value, line)?,
                _ => {
                    return Err(CliError::Usage(format!(
                        "config line {line}: unknown key {written:?}"
                    )))
                }
            }
        }
        Ok(s)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::from_file_text(&text)
            }
        }
    }

    /// Overlays explicitly given flags on top of `self`.
    pub fn with_flags(mut self, position: &PositionArgs, model: Option<&ModelArgs>) -> Self {
        fn over<T: Clone>(base: &mut Option<T>, flag: &Option<T>) {
            if flag.is_some() {
                base.clone_from(flag);
            }
        }
        let p = &mut self.position;
        over(&mut p.r_clip, &position.r_clip);
        over(&mut p.rule1, &position.rule1);
        over(&mut p.fusion, &position.fusion);
        p.eos |= position.eos;
        if let Some(f) = model {
            let m = &mut self.model;
            over(&mut m.row, &f.row);
            over(&mut m.task, &f.task);
            over(&mut m.seed, &f.seed);
            over(&mut m.d_model, &f.d_model);
            over(&mut m.n_heads, &f.n_heads);
            over(&mut m.n_layers, &f.n_layers);
            over(&mut m.d_ffn, &f.d_ffn);
            over(&mut m.vocab_size, &f.vocab_size);
            over(&mut m.epochs, &f.epochs);
            over(&mut m.batch_size, &f.batch_size);
            over(&mut m.learning_rate, &f.learning_rate);
            over(&mut m.train_size, &f.train_size);
            over(&mut m.test_size, &f.test_size);
            over(&mut m.max_len, &f.max_len);
            over(&mut m.threshold, &f.threshold);
        }
        self
    }

    pub fn seed(&self) -> u64 {
        self.model.seed.unwrap_or(0)
    }

    pub fn row(&self) -> AblationRow {
        AblationRow::new(self.model.row.unwrap_or(9)).expect("validated row")
    }

    pub fn task(&self) -> Task {
        self.model.task.unwrap_or(Task::Depth)
    }

    pub fn encoder(&self) -> EncoderConfig {
        let d = EncoderConfig::default();
        let m = &self.model;
        EncoderConfig {
            d_model: m.d_model.unwrap_or(d.d_model),
            n_heads: m.n_heads.unwrap_or(d.n_heads),
            n_layers: m.n_layers.unwrap_or(d.n_layers),
            d_ffn: m.d_ffn.unwrap_or(d.d_ffn),
            r_clip: self.position.r_clip.unwrap_or(d.r_clip),
            vocab_size: m.vocab_size.unwrap_or(d.vocab_size),
            fusion_mode: self.position.fusion.unwrap_or(d.fusion_mode),
            ..d
        }
        .with_row(self.row())
    }

    pub fn position(&self) -> PositionConfig {
        let d = PositionConfig::default();
        PositionConfig {
            d_model: self.model.d_model.unwrap_or(d.d_model),
            r_clip: self.position.r_clip.unwrap_or(d.r_clip),
            fusion_mode: self.position.fusion.unwrap_or(d.fusion_mode),
            rule1: self.position.rule1.unwrap_or(d.rule1),
        }
    }

    pub fn data(&self) -> DataConfig {
        let d = DataConfig::default();
        let m = &self.model;
        DataConfig {
            task: self.task(),
            train_size: m.train_size.unwrap_or(d.train_size),
            test_size: m.test_size.unwrap_or(d.test_size),
            max_len: m.max_len.unwrap_or(d.max_len),
            vocab_size: self.encoder().vocab_size,
            threshold: m.threshold.unwrap_or(d.threshold),
            seed: self.seed(),
        }
    }

    pub fn train(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let m = &self.model;
        TrainConfig {
            encoder: self.encoder(),
            rule1: self.position.rule1.unwrap_or(d.rule1),
            epochs: m.epochs.unwrap_or(d.epochs),
            batch_size: m.batch_size.unwrap_or(d.batch_size),
            learning_rate: m.learning_rate.unwrap_or(d.learning_rate),
            seed: self.seed(),
            ..d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_and_flag_precedence() {
        let s =
            Settings::from_file_text("# comment\nr-clip = 4\nrule1=edge\n\nseed = 3\nrow = 2\n")
                .unwrap();
        assert_eq!(s.position().r_clip, 4);
        assert_eq!(s.position().rule1, Rule1::LiteralEdge);
        assert_eq!(s.row().id(), 2);
        let flags = PositionArgs {
            r_clip: Some(8),
            ..PositionArgs::default()
        };
        let model = ModelArgs {
            seed: Some(5),
            ..ModelArgs::default()
        };
        let merged = s.with_flags(&flags, Some(&model));
        assert_eq!(merged.position().r_clip, 8);
        assert_eq!(merged.position().rule1, Rule1::LiteralEdge);
        assert_eq!(merged.seed(), 5);
        assert_eq!(merged.train().encoder.r_clip, 8);
    }

    #[test]
    fn bad_files_are_usage_errors() {
        for text in [
            "colour = red",
            "r_clip = -1",
            "row = 10",
            "just words",
            "eos = maybe",
        ] {
            assert!(
                matches!(Settings::from_file_text(text), Err(CliError::Usage(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn defaults() {
        let s = Settings::default();
        assert_eq!(s.row().id(), 9);
        assert_eq!(s.task(), Task::Depth);
        assert_eq!(s.position(), PositionConfig::default());
        assert_eq!(s.data(), DataConfig::default());
    }
}
