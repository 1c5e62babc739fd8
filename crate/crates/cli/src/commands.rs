use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use structpos::deptree::{parse_conllu_blocks, DepTree};
use structpos::harness::{
    self, evaluate, generate, read_jsonl, run_ablation, train, write_jsonl, TaskModel,
};
use structpos::nn::AblationRow;
use structpos::posenc::AnnotationRecord;
use structpos::selftest::{self, SelftestOptions};

use crate::config::{ModelArgs, PositionArgs, Settings};
use crate::{CliError, Command};

fn read_input(path: &Path) -> Result<String, CliError> {
    let mut text = String::new();
    if path == Path::new("-") {
        io::stdin().read_to_string(&mut text)?;
    } else {
        text = fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    }
    Ok(text)
}

fn open_output(path: &Path) -> Result<Box<dyn Write>, CliError> {
    if path == Path::new("-") {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        let f = File::create(path)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
        Ok(Box::new(BufWriter::new(f)))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Annotate {
            input,
            output,
            config,
            position,
        } => annotate(
            &input,
            &output,
            Settings::load(config.as_deref())?.with_flags(&position, None),
        ),
        Command::Verify { input, trees } => verify(&input, &trees),
        Command::Train {
            output,
            report,
            dump_data,
            config,
            position,
            model,
        } => cmd_train(
            &output,
            report.as_deref(),
            dump_data.as_deref(),
            settings(config, &position, &model)?,
        ),
        Command::Evaluate {
            checkpoint,
            input,
            output,
            config,
            model,
        } => cmd_evaluate(
            &checkpoint,
            input.as_deref(),
            &output,
            settings(config, &PositionArgs::default(), &model)?,
        ),
        Command::Ablation {
            rows,
            output_dir,
            config,
            position,
            model,
        } => cmd_ablation(&rows, &output_dir, settings(config, &position, &model)?),
        Command::Selftest {
            seed,
            mutate_rule2_sign,
        } => cmd_selftest(seed, mutate_rule2_sign),
    }
}

fn settings(
    config: Option<PathBuf>,
    position: &PositionArgs,
    model: &ModelArgs,
) -> Result<Settings, CliError> {
    Ok(Settings::load(config.as_deref())?.with_flags(position, Some(model)))
}

fn annotate(input: &Path, output: &Path, settings: Settings) -> Result<(), CliError> {
    let cfg = settings.position();
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let eos = settings.position.eos;
    let text = read_input(input)?;
    let blocks = parse_conllu_blocks(&text);
    // Sentences are independent; `collect` keeps input order.
    let lines: Vec<Result<String, String>> = blocks
        .par_iter()
        .map(|block| match block {
            Ok(tree) => AnnotationRecord::for_sentence(tree, eos, &cfg)
                .map_err(|e| e.to_string())
                .and_then(|r| serde_json::to_string(&r).map_err(|e| e.to_string())),
            Err(e) => Err(format!("sentence at line {}: {}", e.start_line, e.error)),
        })
        .collect();

    let mut out = open_output(output)?;
    let (mut written, mut skipped) = (0usize, 0usize);
    for line in &lines {
        match line {
            Ok(json) => {
                out.write_all(json.as_bytes())?;
                out.write_all(b"\n")?;
                written += 1;
            }
            Err(reason) => {
                warn!("skipping {reason}");
                skipped += 1;
            }
        }
    }
    out.flush()?;
    info!("annotated {written} sentences, skipped {skipped}");
    if written == 0 {
        return Err(CliError::EmptyInput(if lines.is_empty() {
            "input contains no sentences".into()
        } else {
            "no sentence could be annotated".into()
        }));
    }
    Ok(())
}

fn verify(input: &Path, trees: &Path) -> Result<(), CliError> {
    let trees: Vec<DepTree> = parse_conllu_blocks(&read_input(trees)?)
        .into_iter()
        .filter_map(Result::ok)
        .collect();
    let reader = BufReader::new(
        File::open(input)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", input.display())))?,
    );
    let mut count = 0;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Runtime(format!("line {}: {e}", k + 1)))?;
        let tree = trees.get(count).ok_or_else(|| {
            CliError::Runtime(format!("line {}: more records than valid trees", k + 1))
        })?;
        record
            .verify(tree)
            .map_err(|e| CliError::Runtime(format!("line {}: {e}", k + 1)))?;
        count += 1;
    }
    if count != trees.len() {
        return Err(CliError::Runtime(format!(
            "{count} records for {} valid trees",
            trees.len()
        )));
    }
    if count == 0 {
        return Err(CliError::EmptyInput("nothing to verify".into()));
    }
    println!("verified {count} records");
    Ok(())
}

fn check_settings(settings: &Settings) -> Result<(), CliError> {
    settings
        .encoder()
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    settings
        .position()
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_train(
    output: &Path,
    report_path: Option<&Path>,
    dump: Option<&Path>,
    settings: Settings,
) -> Result<(), CliError> {
    check_settings(&settings)?;
    let data = settings.data();
    let cfg = settings.train();
    info!(
        "training row {} on the {} task ({} train / {} test sentences)",
        settings.row(),
        data.task,
        data.train_size,
        data.test_size
    );
    let (train_set, test_set) = generate(&data)?;
    if let Some(dir) = dump {
        fs::create_dir_all(dir)?;
        write_jsonl(
            BufWriter::new(File::create(dir.join("train.jsonl"))?),
            &train_set,
        )?;
        write_jsonl(
            BufWriter::new(File::create(dir.join("test.jsonl"))?),
            &test_set,
        )?;
    }
    let (model, report) = train(&cfg, &train_set, &test_set)?;
    model.save(output)?;
    info!(
        "held-out accuracy {:.4} (label-marginal baseline {:.4} ± {:.4}), {:.1}s",
        report.final_accuracy,
        report.baseline.accuracy,
        report.baseline.standard_error,
        report.wall_clock_secs
    );
    write_json(report_path.unwrap_or(Path::new("-")), &report)
}

fn cmd_evaluate(
    checkpoint: &Path,
    input: Option<&Path>,
    output: &Path,
    settings: Settings,
) -> Result<(), CliError> {
    let model = TaskModel::load(checkpoint)?;
    let samples = match input {
        Some(p) => {
            let f = File::open(p)
                .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?;
            read_jsonl(BufReader::new(f))?
        }
        None => {
            let data = harness::DataConfig {
                task: model.spec.task,
                vocab_size: model.spec.encoder.vocab_size,
                ..settings.data()
            };
            generate(&data)?.1
        }
    };
    if samples.is_empty() {
        return Err(CliError::EmptyInput("dataset is empty".into()));
    }
    let eval = evaluate(&model, &samples)?;
    info!(
        "accuracy {:.4} ({}/{})",
        eval.accuracy, eval.correct, eval.total
    );
    write_json(output, &eval)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    row: u8,
    flags: &'a str,
    final_accuracy: f64,
    wall_clock_secs: f64,
}

fn cmd_ablation(rows: &[u8], out_dir: &Path, settings: Settings) -> Result<(), CliError> {
    check_settings(&settings)?;
    let rows: Vec<AblationRow> = if rows.is_empty() {
        AblationRow::all().collect()
    } else {
        rows.iter()
            .map(|&r| AblationRow::new(r).map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    fs::create_dir_all(out_dir)?;
    let data = settings.data();
    let cfg = settings.train();
    let reports = run_ablation(&rows, &data, &cfg, |_, report| {
        let row = report.config_row.map_or(0, |r| r.id());
        info!(
            "row {row} ({}): accuracy {:.4} in {:.1}s",
            report.flags, report.final_accuracy, report.wall_clock_secs
        );
        let path = out_dir.join(format!("report_row{row}.json"));
        let text = serde_json::to_string_pretty(report).expect("reports serialize");
        fs::write(path, text + "\n")?;
        Ok(())
    })?;

    let mut csv = csv::Writer::from_path(out_dir.join("ablation.csv"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &reports {
        csv.serialize(CsvRow {
            row: r.config_row.map_or(0, |r| r.id()),
            flags: &r.flags,
            final_accuracy: r.final_accuracy,
            wall_clock_secs: r.wall_clock_secs,
        })
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

fn cmd_selftest(seed: u64, mutate_rule2_sign: bool) -> Result<(), CliError> {
    let opts = SelftestOptions {
        seed,
        ..SelftestOptions::default()
    };
    let reports = if mutate_rule2_sign {
        vec![selftest::antisymmetry(
            &opts,
            &selftest::rel_structural_without_rule2_sign,
        )]
    } else {
        selftest::run_all(&opts)
    };
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} suites failed",
            reports.len()
        )));
    }
    Ok(())
}
