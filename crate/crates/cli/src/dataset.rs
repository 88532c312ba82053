//! Dataset and vocabulary file IO.
//!
//! Datasets are JSONL (`{"text": ..., "label": int}` per line) or TSV
//! (`text<TAB>label`), chosen by extension. Vocabulary files are UTF-8, one
//! token per line; the line index plus the three reserved ids gives the
//! token id.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use noskim_core::tokenizer::{Vocab, VocabError};
use noskim_core::Sample;

use crate::error::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    text: String,
    label: usize,
}

pub fn load_dataset(path: &Path) -> CliResult<Vec<Sample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::data_msg(format!("cannot open dataset {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let tsv = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("tsv") | Some("txt")
    );
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| {
            CliError::data_msg(format!("read error in {} line {}: {e}", path.display(), lineno + 1))
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = if tsv {
            let (text, label) = line.rsplit_once('\t').ok_or_else(|| {
                CliError::data_msg(format!(
                    "{} line {}: expected text<TAB>label",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let label: usize = label.trim().parse().map_err(|_| {
                CliError::data_msg(format!(
                    "{} line {}: label {:?} is not an integer",
                    path.display(),
                    lineno + 1,
                    label
                ))
            })?;
            Sample::new(text, label)
        } else {
            let row: JsonlRow = serde_json::from_str(&line).map_err(|e| {
                CliError::data_msg(format!("{} line {}: {e}", path.display(), lineno + 1))
            })?;
            Sample::new(row.text, row.label)
        };
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(CliError::data_msg(format!("dataset {} is empty", path.display())));
    }
    Ok(samples)
}

pub fn write_dataset_jsonl(path: &Path, samples: &[Sample]) -> CliResult<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::runtime_msg(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let row = JsonlRow { text: s.text.clone(), label: s.label };
        serde_json::to_writer(&mut w, &row).map_err(CliError::runtime)?;
        w.write_all(b"\n").map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)
}

pub fn write_vocab(path: &Path, words: &[String]) -> CliResult<()> {
    let mut out = String::with_capacity(words.len() * 8);
    for w in words {
        out.push_str(w);
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::runtime_msg(format!("cannot write {}: {e}", path.display())))
}

pub fn load_vocab(path: &Path) -> CliResult<Vocab> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data_msg(format!("cannot read vocabulary {}: {e}", path.display())))?;
    Vocab::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string)).map_err(
        |e: VocabError| CliError::data_msg(format!("vocabulary {}: {e}", path.display())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let samples = vec![Sample::new("a b c", 0), Sample::new("d e", 1)];
        write_dataset_jsonl(&path, &samples).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), samples);
    }

    #[test]
    fn tsv_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        std::fs::write(&path, "good movie\t1\nbad film\t0\n").unwrap();
        let samples = load_dataset(&path).unwrap();
        assert_eq!(samples, vec![Sample::new("good movie", 1), Sample::new("bad film", 0)]);
    }

    #[test]
    fn corrupt_rows_name_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"text\": \"ok\", \"label\": 0}\nnot-json\n").unwrap();
        let err = load_dataset(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn vocab_roundtrip_preserves_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let words = vec!["alpha".to_string(), "beta".to_string(), "gamma".to_string()];
        write_vocab(&path, &words).unwrap();
        let vocab = load_vocab(&path).unwrap();
        assert_eq!(vocab.id_of("alpha"), Some(3));
        assert_eq!(vocab.id_of("gamma"), Some(5));
        assert_eq!(vocab.size(), 6);
    }

    #[test]
    fn missing_files_are_data_errors() {
        let err = load_dataset(Path::new("/nonexistent/q.jsonl")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
