use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::checkpoint::read_container;
use crate::error::{Error, Result};

use super::ner::{read_ner, NerSentence};

/// Lines with surrounding `\r` removed, paired with their byte offsets.
fn lines(path: &Path) -> Result<Vec<(u64, String)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(File::open(path)?).split(b'\n') {
        let raw = line?;
        let start = offset;
        offset += raw.len() as u64 + 1;
        let text = String::from_utf8(raw).map_err(|e| Error::Parse {
            offset: start + e.utf8_error().valid_up_to() as u64,
            reason: "invalid UTF-8".into(),
        })?;
        out.push((start, text.trim_end_matches('\r').to_string()));
    }
    Ok(out)
}

/// One sentence per non-blank line.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(lines(path.as_ref())?
        .into_iter()
        .map(|(_, l)| l)
        .filter(|l| !l.trim().is_empty())
        .collect())
}

/// `first<TAB>second` per non-blank line.
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (offset, l) in lines(path.as_ref())? {
        if l.trim().is_empty() {
            continue;
        }
        let (a, b) = l.split_once('\t').ok_or_else(|| Error::Parse {
            offset,
            reason: "expected `first<TAB>second`".into(),
        })?;
        out.push((a.to_string(), b.to_string()));
    }
    Ok(out)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (a, b) in pairs {
        writeln!(w, "{a}\t{b}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ner_file(path: impl AsRef<Path>) -> Result<Vec<NerSentence>> {
    read_ner(BufReader::new(File::open(path)?))
}

/// Vectors from a named-tensor file whose tensors are named by line index
/// (`"0"`, `"1"`, ...). Returns them in line order.
pub fn read_precomputed(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let c = read_container(path)?;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; c.tensors.len()];
    for (name, t) in &c.tensors {
        let i: usize = name
            .parse()
            .map_err(|_| Error::Data(format!("embedding tensor `{name}` is not named by a line index")))?;
        let slot = rows
            .get_mut(i)
            .ok_or_else(|| Error::Data(format!("line index {i} is out of range")))?;
        if slot.is_some() {
            return Err(Error::Data(format!("line index {i} appears twice")));
        }
        *slot = Some(t.to_f64_vec());
    }
    Ok(rows.into_iter().map(|r| r.expect("every index filled")).collect())
}
