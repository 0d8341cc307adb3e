use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mtkd_core::corpus::{Corpus, GenerationSpec, Split, Utterance, Vocabulary};
use mtkd_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{check_version, create_parent};
use crate::{Error, Result};

pub const CORPUS_VERSION: &str = "mtkd-corpus-v1";

#[derive(Serialize, Deserialize)]
struct Reserved {
    blank: usize,
    bos: usize,
    eos: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: String,
    z: usize,
    d: usize,
    reserved: Reserved,
    prototypes: Vec<Vec<f64>>,
    spec: GenerationSpec,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    split: Split,
    tokens: Vec<usize>,
    repeats: Vec<usize>,
    frames: Vec<Vec<f64>>,
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

/// One JSON header line, then one line per utterance in split order.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    corpus.validate()?;
    create_parent(path)?;
    let file = File::create(path).map_err(Error::io(path))?;
    let mut out = BufWriter::new(file);
    let v = corpus.vocab;
    let header = Header {
        format_version: CORPUS_VERSION.into(),
        z: v.content_size(),
        d: corpus.dim(),
        reserved: Reserved {
            blank: v.blank(),
            bos: v.bos(),
            eos: v.eos(),
        },
        prototypes: rows(&corpus.prototypes),
        spec: corpus.spec.clone(),
        seed: corpus.spec.seed,
    };
    emit(&mut out, path, &header)?;
    for split in Split::ALL {
        for u in corpus.split(split) {
            emit(&mut out, path, &Line {
                id: u.id.clone(),
                split,
                tokens: u.tokens.clone(),
                repeats: u.repeats.clone(),
                frames: rows(&u.frames),
            })?;
        }
    }
    out.flush().map_err(Error::io(path))
}

fn emit<T: Serialize>(out: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| Error::format(path, 0, e.to_string()))?;
    out.write_all(b"\n").map_err(Error::io(path))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::Missing { what: "corpus", path: path.to_path_buf() });
    }
    let file = File::open(path).map_err(Error::io(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, 1, "empty file, expected a header line"))?
        .map_err(Error::io(path))?;
    let probe: serde_json::Value = serde_json::from_str(&first).map_err(|e| Error::format(path, 1, e.to_string()))?;
    let version = probe.get("format_version").and_then(|v| v.as_str()).unwrap_or("<none>");
    check_version(path, 1, version, CORPUS_VERSION)?;
    let header: Header = serde_json::from_value(probe).map_err(|e| Error::format(path, 1, e.to_string()))?;
    let vocab = Vocabulary::new(header.z)?;
    if (vocab.blank(), vocab.bos(), vocab.eos()) != (header.reserved.blank, header.reserved.bos, header.reserved.eos) {
        return Err(Error::format(path, 1, "reserved ids do not follow the content tokens"));
    }
    if header.d != header.spec.dim || header.z != header.spec.z || header.seed != header.spec.seed {
        return Err(Error::format(path, 1, "header fields disagree with the generation spec"));
    }
    let prototypes = Tensor::from_rows(&header.prototypes).map_err(|e| Error::format(path, 1, e.to_string()))?;
    let mut corpus = Corpus {
        vocab,
        prototypes,
        spec: header.spec,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let mut count = 1;
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        count = n;
        let line = line.map_err(Error::io(path))?;
        let rec: Line = serde_json::from_str(&line).map_err(|e| Error::format(path, n, e.to_string()))?;
        let frames = Tensor::from_rows(&rec.frames).map_err(|e| Error::format(path, n, e.to_string()))?;
        if frames.cols() != header.d || frames.rows() != rec.repeats.iter().sum::<usize>() {
            return Err(Error::format(
                path,
                n,
                format!(
                    "frames are {}x{}, expected {}x{}",
                    frames.rows(),
                    frames.cols(),
                    rec.repeats.iter().sum::<usize>(),
                    header.d
                ),
            ));
        }
        corpus.split_mut(rec.split).push(Utterance {
            id: rec.id,
            frames,
            tokens: rec.tokens,
            repeats: rec.repeats,
        });
    }
    let sizes = corpus.spec.splits;
    let expected = [sizes.train, sizes.valid, sizes.test];
    for (split, want) in Split::ALL.into_iter().zip(expected) {
        let found = corpus.split(split).len();
        if found != want {
            return Err(Error::format(
                path,
                count + 1,
                format!("expected {want} {} utterances, found {found} (truncated file?)", split.name()),
            ));
        }
    }
    corpus.validate().map_err(|e| Error::format(path, count, e.to_string()))?;
    Ok(corpus)
}
