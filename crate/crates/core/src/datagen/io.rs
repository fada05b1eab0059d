//! Line-delimited dataset files.
//!
//! ```text
//! {"kind":"causalrm-dataset","version":1,"split":"train","fingerprint":"..","embed_dim":64,"perturbed":false,"count":2}
//! {"pair_id":0,"winner":{"h":[..],"s":..,"a":..,"prefix_flag":false},"loser":{..}}
//! ```
//!
//! Floats are written with 17 significant digits so every value reads back
//! to the identical bit pattern.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{DataError, Dataset, EmbeddingRecord, GenConfig, PreferenceTriplet, Split};

const KIND: &str = "causalrm-dataset";
const VERSION: u32 = 1;

/// Formats a float with 17 significant digits.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_record(out: &mut String, r: &EmbeddingRecord) {
    out.push_str("{\"h\":[");
    for (i, x) in r.h.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*x));
    }
    let _ = write!(out, "],\"s\":{},\"a\":{},\"prefix_flag\":{}}}", fmt_f64(r.s), fmt_f64(r.a), r.prefix_flag);
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(
        w,
        "{{\"kind\":\"{KIND}\",\"version\":{VERSION},\"split\":\"{}\",\"fingerprint\":\"{}\",\"embed_dim\":{},\"perturbed\":{},\"count\":{}}}",
        ds.split,
        ds.fingerprint,
        ds.embed_dim,
        ds.perturbed,
        ds.triplets.len()
    )?;
    let mut line = String::new();
    for t in &ds.triplets {
        line.clear();
        let _ = write!(line, "{{\"pair_id\":{},\"winner\":", t.pair_id);
        write_record(&mut line, &t.winner);
        line.push_str(",\"loser\":");
        write_record(&mut line, &t.loser);
        line.push('}');
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    version: u32,
    split: String,
    fingerprint: String,
    embed_dim: usize,
    perturbed: bool,
    count: usize,
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let perr = |line: usize, msg: String| DataError::Parse { path: shown.clone(), line, msg };

    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => return Err(perr(1, "missing header".into())),
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| perr(1, format!("bad header: {e}")))?;
    if header.kind != KIND || header.version != VERSION {
        return Err(perr(1, format!("unsupported file kind {} v{}", header.kind, header.version)));
    }
    let split = Split::parse(&header.split).ok_or_else(|| perr(1, format!("unknown split `{}`", header.split)))?;

    let mut triplets = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: PreferenceTriplet = serde_json::from_str(&line).map_err(|e| perr(lineno, e.to_string()))?;
        for (side, r) in [("winner", &t.winner), ("loser", &t.loser)] {
            if r.h.len() != header.embed_dim {
                return Err(perr(lineno, format!("{side}.h has length {}, expected {}", r.h.len(), header.embed_dim)));
            }
        }
        triplets.push(t);
    }
    if triplets.len() != header.count {
        return Err(perr(
            triplets.len() + 2,
            format!("header declares {} triplets but file holds {}", header.count, triplets.len()),
        ));
    }
    Ok(Dataset {
        split,
        fingerprint: header.fingerprint,
        embed_dim: header.embed_dim,
        perturbed: header.perturbed,
        triplets,
    })
}

/// Reads a dataset and reports a fingerprint mismatch against `cfg` as a
/// warning rather than an error.
pub fn read_dataset_checked(path: impl AsRef<Path>, cfg: &GenConfig) -> Result<(Dataset, Option<String>), DataError> {
    let ds = read_dataset(path)?;
    let warning = ds.fingerprint_warning(cfg);
    Ok((ds, warning))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Generator;
    use proptest::prelude::*;

    fn small() -> GenConfig {
        GenConfig { embed_dim: 8, causal_dim: 2, spurious_dim: 2, n_train: 20, n_test: 10, ..GenConfig::default() }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let gen = Generator::new(&small()).unwrap();
        let ds = gen.generate_hacked_train();
        let p = dir.path().join("train.jsonl");
        write_dataset(&ds, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            split: Split::IdTest,
            fingerprint: "abc".into(),
            embed_dim: 4,
            perturbed: false,
            triplets: vec![],
        };
        let p = dir.path().join("empty.jsonl");
        write_dataset(&ds, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 1);
        assert_eq!(read_dataset(&p).unwrap(), ds);
    }

    #[test]
    fn truncated_file_names_first_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let gen = Generator::new(&small()).unwrap();
        let ds = gen.generate_split(Split::IdTest);
        let p = dir.path().join("t.jsonl");
        write_dataset(&ds, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        // cut the 4th line (third triplet) in half
        let lines: Vec<&str> = text.lines().collect();
        let mut cut = lines[..3].join("\n");
        cut.push('\n');
        cut.push_str(&lines[3][..lines[3].len() / 2]);
        fs::write(&p, cut).unwrap();
        match read_dataset(&p) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_trailing_lines_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Generator::new(&small()).unwrap().generate_split(Split::IdTest);
        let p = dir.path().join("t.jsonl");
        write_dataset(&ds, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let kept: Vec<&str> = text.lines().take(5).collect();
        fs::write(&p, kept.join("\n") + "\n").unwrap();
        match read_dataset(&p) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn fingerprint_mismatch_is_a_warning() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let ds = Generator::new(&cfg).unwrap().generate_split(Split::IdTest);
        let p = dir.path().join("t.jsonl");
        write_dataset(&ds, &p).unwrap();
        let (_, w) = read_dataset_checked(&p, &cfg).unwrap();
        assert!(w.is_none());
        let (_, w) = read_dataset_checked(&p, &GenConfig { seed: 99, ..cfg }).unwrap();
        assert!(w.unwrap().contains("does not match"));
    }

    proptest! {
        #[test]
        fn float_formatting_round_trips(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let back: f64 = serde_json::from_str(&fmt_f64(x)).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
