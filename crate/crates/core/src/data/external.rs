//! Line-delimited task files: `context<TAB>question<TAB>answer`, UTF-8.
//! Generated-sample dumps add a fourth field with the source token.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Metric;

use super::{Sample, TaskData, TaskSource, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport<T> {
    pub records: Vec<T>,
    /// `(1-based line number, reason)` for every rejected line.
    pub skipped: Vec<(usize, String)>,
}

fn parse_lines<T>(text: &str, fields: usize, mut build: impl FnMut(&[&str]) -> Result<T>) -> LoadReport<T> {
    let mut report = LoadReport {
        records: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != fields {
            report.skipped.push((
                i + 1,
                format!("expected {fields} tab-separated fields, found {}", parts.len()),
            ));
            continue;
        }
        match build(&parts) {
            Ok(r) => report.records.push(r),
            Err(e) => report.skipped.push((i + 1, e.to_string())),
        }
    }
    report
}

pub fn read_samples(path: &Path) -> Result<LoadReport<Sample>> {
    let text = fs::read_to_string(path)?;
    Ok(parse_lines(&text, 3, |p| Sample::new(p[0], p[1], p[2])))
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        writeln!(w, "{}\t{}\t{}", s.context, s.question, s.answer)?;
    }
    w.flush()?;
    Ok(())
}

/// One pseudo-sample together with the token that prompted it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedRecord {
    pub sample: Sample,
    pub source_token: String,
}

pub fn write_generated(path: &Path, records: &[GeneratedRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let s = &r.sample;
        writeln!(w, "{}\t{}\t{}\t{}", s.context, s.question, s.answer, r.source_token)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_generated(path: &Path) -> Result<LoadReport<GeneratedRecord>> {
    let text = fs::read_to_string(path)?;
    Ok(parse_lines(&text, 4, |p| {
        Ok(GeneratedRecord {
            sample: Sample::new(p[0], p[1], p[2])?,
            source_token: p[3].trim().to_string(),
        })
    }))
}

/// Loads an external task. With `test_path`, the test set comes from that
/// file and any train line whose prompt also appears there is dropped;
/// otherwise `test_size` distinct samples are held out under `seed`.
pub fn load_external_task(
    name: &str,
    train_path: &Path,
    test_path: Option<&Path>,
    test_size: usize,
    metric: Metric,
    seed: u64,
) -> Result<(TaskData, Vec<(PathBuf, usize, String)>)> {
    let mut problems = Vec::new();
    let mut load = |path: &Path| -> Result<Vec<Sample>> {
        let report = read_samples(path)?;
        problems.extend(
            report
                .skipped
                .into_iter()
                .map(|(line, why)| (path.to_path_buf(), line, why)),
        );
        if report.records.is_empty() {
            return Err(Error::Data(format!("{}: no valid samples", path.display())));
        }
        Ok(report.records)
    };

    let mut train = dedup(load(train_path)?);
    let test = match test_path {
        Some(p) => {
            let test = dedup(load(p)?);
            let held: HashSet<String> = test.iter().map(Sample::prompt).collect();
            train.retain(|s| !held.contains(&s.prompt()));
            test
        }
        None => {
            if test_size == 0 || test_size >= train.len() {
                return Err(Error::Data(format!(
                    "{}: cannot hold out {test_size} of {} samples",
                    train_path.display(),
                    train.len()
                )));
            }
            train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            train.split_off(train.len() - test_size)
        }
    };
    if train.is_empty() {
        return Err(Error::Data(format!("{name}: no training samples left")));
    }
    let spec = TaskSpec {
        name: name.to_string(),
        source: TaskSource::External {
            train: train_path.to_path_buf(),
            test: test_path.map(Path::to_path_buf),
        },
        metric,
        train_size: train.len(),
        test_size: test.len(),
    };
    Ok((TaskData { spec, train, test }, problems))
}

/// Drops later samples whose prompt repeats an earlier one.
fn dedup(samples: Vec<Sample>) -> Vec<Sample> {
    let mut seen = HashSet::new();
    samples.into_iter().filter(|s| seen.insert(s.prompt())).collect()
}
