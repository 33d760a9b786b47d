//! On-disk corpus layout:
//!
//! ```text
//! <root>/inventory.txt        one symbol per line, <blk> <sos> <eos> first
//! <root>/{train,dev,test}.tsv id \t prompt \t annotation
//! <root>/segments.tsv         id \t realized phone durations
//! <root>/durations.tsv        phone \t mean frames (train only), plus `*` for the global mean
//! <root>/feats/<id>.mde       binary feature matrix
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::inventory::{PhoneInventory, Symbol};
use super::synth::{apply_annotation, CorpusSplit, DurationStats, PositionLabel, Utterance};
use crate::error::{Error, Result};
use crate::numerics::Mat;

pub const FEATURE_MAGIC: [u8; 4] = *b"MDE1";
pub const POSTERIOR_MAGIC: [u8; 4] = *b"MDE2";

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub(crate) fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .collect()
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create_file(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `magic`, `T` and `D` as little-endian u32, then `T·D` little-endian f64 row-major.
pub fn write_matrix(path: &Path, magic: [u8; 4], m: &Mat) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * m.len());
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut w = create_file(path)?;
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path, magic: [u8; 4]) -> Result<Mat> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!("expected magic {:?}", String::from_utf8_lossy(&magic)),
        ));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != t * d * 8 {
        return Err(Error::format(
            path,
            format!("payload of {} bytes does not match {t}x{d}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Mat::from_vec(t, d, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_inventory(path: &Path, inv: &PhoneInventory) -> Result<()> {
    let mut text = inv.symbols().join("\n");
    text.push('\n');
    write_text(path, &text)
}

pub fn read_inventory(path: &Path) -> Result<PhoneInventory> {
    let symbols: Vec<String> = read_lines(path)?
        .into_iter()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    PhoneInventory::from_symbols(symbols).map_err(|e| Error::format(path, e.to_string()))
}

pub fn format_annotation(inv: &PhoneInventory, labels: &[PositionLabel]) -> String {
    labels
        .iter()
        .map(|l| match l {
            PositionLabel::Correct => "C".to_string(),
            PositionLabel::Deleted => "D".to_string(),
            PositionLabel::Substituted(p) => format!("S:{}", inv.label(*p)),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_annotation(inv: &PhoneInventory, text: &str) -> Result<Vec<PositionLabel>> {
    text.split_whitespace()
        .map(|tok| match tok {
            "C" => Ok(PositionLabel::Correct),
            "D" => Ok(PositionLabel::Deleted),
            _ => match tok.strip_prefix("S:") {
                Some(p) => Ok(PositionLabel::Substituted(inv.phone_index(p)?)),
                None => Err(Error::invalid(format!("bad annotation token {tok:?}"))),
            },
        })
        .collect()
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub prompt: Vec<Symbol>,
    pub annotation: Vec<PositionLabel>,
}

pub fn write_manifest(path: &Path, inv: &PhoneInventory, utts: &[Utterance]) -> Result<()> {
    let mut text = String::new();
    for u in utts {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            u.id,
            inv.render(&u.prompt),
            format_annotation(inv, &u.annotation)
        ));
    }
    write_text(path, &text)
}

pub fn read_manifest(path: &Path, inv: &PhoneInventory) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::format(path, format!("line {}: {msg}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", fields.len())));
        }
        let prompt = inv.parse(fields[1]).map_err(|e| bad(e.to_string()))?;
        let annotation = parse_annotation(inv, fields[2]).map_err(|e| bad(e.to_string()))?;
        if prompt.is_empty() || prompt.len() != annotation.len() {
            return Err(bad("annotation length differs from prompt length".into()));
        }
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            prompt,
            annotation,
        });
    }
    Ok(out)
}

pub fn feature_path(root: &Path, id: &str) -> PathBuf {
    root.join("feats").join(format!("{id}.mde"))
}

pub fn manifest_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}.tsv"))
}

/// Writes the whole corpus under `root`.
pub fn write_corpus(root: &Path, inv: &PhoneInventory, corpus: &CorpusSplit) -> Result<()> {
    write_inventory(&root.join("inventory.txt"), inv)?;
    let mut segments = String::new();
    for (name, utts) in SPLITS.iter().zip([&corpus.train, &corpus.dev, &corpus.test]) {
        write_manifest(&manifest_path(root, name), inv, utts)?;
        for u in utts.iter() {
            write_matrix(&feature_path(root, &u.id), FEATURE_MAGIC, &u.features)?;
            let durs: Vec<String> = u.durations.iter().map(usize::to_string).collect();
            segments.push_str(&format!("{}\t{}\n", u.id, durs.join(" ")));
        }
    }
    write_text(&root.join("segments.tsv"), &segments)?;
    write_durations(&root.join("durations.tsv"), inv, &corpus.duration_stats)
}

pub fn write_durations(path: &Path, inv: &PhoneInventory, stats: &DurationStats) -> Result<()> {
    let mut text = String::new();
    for (&p, &m) in &stats.per_phone {
        text.push_str(&format!("{}\t{}\n", inv.label(p), m));
    }
    text.push_str(&format!("*\t{}\n", stats.global_mean));
    write_text(path, &text)
}

pub fn read_durations(path: &Path, inv: &PhoneInventory) -> Result<DurationStats> {
    let mut per_phone = BTreeMap::new();
    let mut global_mean = None;
    for line in read_lines(path)? {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, "expected phone<TAB>mean"))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("bad number {v:?}")))?;
        if k == "*" {
            global_mean = Some(v);
        } else {
            per_phone.insert(inv.phone_index(k).map_err(|e| Error::format(path, e.to_string()))?, v);
        }
    }
    Ok(DurationStats {
        per_phone,
        global_mean: global_mean.ok_or_else(|| Error::format(path, "missing global mean row"))?,
    })
}

/// A corpus loaded from disk. Splits whose manifest is absent are empty.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub inventory: PhoneInventory,
    pub corpus: CorpusSplit,
}

pub fn load_split(root: &Path, split: &str, inv: &PhoneInventory) -> Result<Vec<Utterance>> {
    let path = manifest_path(root, split);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let segments = read_segments(&root.join("segments.tsv"))?;
    read_manifest(&path, inv)?
        .into_iter()
        .map(|e| {
            let features = read_matrix(&feature_path(root, &e.id), FEATURE_MAGIC)?;
            let realized = apply_annotation(&e.prompt, &e.annotation)?;
            let durations = segments.get(&e.id).cloned().unwrap_or_default();
            Ok(Utterance {
                id: e.id,
                features,
                prompt: e.prompt,
                realized,
                annotation: e.annotation,
                durations,
            })
        })
        .collect()
}

fn read_segments(path: &Path) -> Result<HashMap<String, Vec<usize>>> {
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let mut out = HashMap::new();
    for line in read_lines(path)? {
        if let Some((id, durs)) = line.split_once('\t') {
            let durs = durs
                .split_whitespace()
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format(path, format!("bad durations for {id}")))?;
            out.insert(id.to_string(), durs);
        }
    }
    Ok(out)
}

pub fn load_corpus(root: &Path) -> Result<LoadedCorpus> {
    let inventory = read_inventory(&root.join("inventory.txt"))?;
    let train = load_split(root, "train", &inventory)?;
    let dev = load_split(root, "dev", &inventory)?;
    let test = load_split(root, "test", &inventory)?;
    let dur_path = root.join("durations.tsv");
    let duration_stats = if dur_path.exists() {
        read_durations(&dur_path, &inventory)?
    } else {
        super::synth::duration_stats(&train)?
    };
    Ok(LoadedCorpus {
        inventory,
        corpus: CorpusSplit {
            train,
            dev,
            test,
            duration_stats,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{build_splits, ErrorProfile, SplitSizes, SynthParams};

    #[test]
    fn matrix_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mde");
        let m = Mat::from_rows(&[vec![1.0, -2.5], vec![0.1, 3.0], vec![7.0, 8.0]]).unwrap();
        write_matrix(&path, FEATURE_MAGIC, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MDE1");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 6 * 8);
        assert_eq!(read_matrix(&path, FEATURE_MAGIC).unwrap(), m);
        assert!(matches!(read_matrix(&path, POSTERIOR_MAGIC), Err(Error::Format { .. })));
    }

    #[test]
    fn annotation_tokens() {
        let inv = PhoneInventory::new(&["b", "a", "l"]).unwrap();
        let labels = parse_annotation(&inv, "C S:l D").unwrap();
        assert_eq!(
            labels,
            vec![PositionLabel::Correct, PositionLabel::Substituted(5), PositionLabel::Deleted]
        );
        assert_eq!(format_annotation(&inv, &labels), "C S:l D");
        assert!(parse_annotation(&inv, "X").is_err());
        assert!(parse_annotation(&inv, "S:q").is_err());
    }

    #[test]
    fn inventory_file_requires_reserved_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.txt");
        write_text(&path, "a\nb\n").unwrap();
        assert!(read_inventory(&path).is_err());
        let inv = PhoneInventory::new(&["a", "b"]).unwrap();
        write_inventory(&path, &inv).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "<blk>\n<sos>\n<eos>\na\nb\n");
        assert_eq!(read_inventory(&path).unwrap(), inv);
    }

    #[test]
    fn corpus_round_trip() {
        let cfg = SynthParams::default().build(5).unwrap();
        let sizes = SplitSizes { train: 6, dev: 3, test: 3 };
        let corpus = build_splits(&cfg, sizes, (3, 4), ErrorProfile::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &cfg.inventory, &corpus).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.inventory, cfg.inventory);
        assert_eq!(loaded.corpus, corpus);
    }
}
