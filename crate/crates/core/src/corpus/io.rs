//! Corpus serialization: `corpus.jsonl` with a header line, one record per
//! line after it, plus `personas.json`. Both carry a schema version.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PersonaConfig, Record};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const PERSONAS_FILE: &str = "personas.json";

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    schema_version: u32,
    kind: String,
    seed: u64,
    num_records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PersonasFile {
    schema_version: u32,
    seed: u64,
    personas: Vec<PersonaConfig>,
}

/// Write `corpus.jsonl` and `personas.json` into `dir`.
pub fn save(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(std::fs::File::create(dir.join(CORPUS_FILE))?);
    let header = CorpusHeader {
        schema_version: SCHEMA_VERSION,
        kind: "corpus".into(),
        seed: corpus.seed,
        num_records: corpus.records.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for record in &corpus.records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let personas = PersonasFile {
        schema_version: SCHEMA_VERSION,
        seed: corpus.seed,
        personas: corpus.personas.clone(),
    };
    let mut w = BufWriter::new(std::fs::File::create(dir.join(PERSONAS_FILE))?);
    serde_json::to_writer(&mut w, &personas)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Load and validate a corpus from `dir`.
pub fn load(dir: &Path) -> Result<Corpus> {
    let corpus_path = dir.join(CORPUS_FILE);
    let file = std::fs::File::open(&corpus_path)
        .map_err(|e| Error::Data(format!("{}: {e}", corpus_path.display())))?;
    let mut lines = BufReader::new(file).lines();

    let header_line = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", corpus_path.display())))??;
    let header: CorpusHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Data(format!("corpus header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "corpus schema version {} unsupported (expected {SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    if header.kind != "corpus" {
        return Err(Error::Data(format!("unexpected file kind {:?}", header.kind)));
    }

    let mut records: Vec<Record> = Vec::with_capacity(header.num_records);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("corpus record {}: {e}", i + 1)))?;
        records.push(record);
    }
    if records.len() != header.num_records {
        return Err(Error::Data(format!(
            "corpus record count {} does not match header {}",
            records.len(),
            header.num_records
        )));
    }

    let personas_path = dir.join(PERSONAS_FILE);
    let text = std::fs::read_to_string(&personas_path)
        .map_err(|e| Error::Data(format!("{}: {e}", personas_path.display())))?;
    let personas: PersonasFile =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("personas file: {e}")))?;
    if personas.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "personas schema version {} unsupported",
            personas.schema_version
        )));
    }

    let corpus = Corpus { seed: header.seed, personas: personas.personas, records };
    corpus.validate()?;
    Ok(corpus)
}
