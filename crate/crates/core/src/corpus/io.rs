//! JSON-lines dataset files: one [`Document`] per line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::Document;
use crate::error::{Error, Result};

pub fn write_jsonl<W: Write>(w: W, docs: &[Document]) -> Result<()> {
    let mut w = BufWriter::new(w);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Document = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        docs.push(d);
    }
    Ok(docs)
}

pub fn save(path: &Path, docs: &[Document]) -> Result<()> {
    write_jsonl(std::fs::File::create(path)?, docs)
}

pub fn load(path: &Path) -> Result<Vec<Document>> {
    read_jsonl(BufReader::new(std::fs::File::open(path)?))
}
