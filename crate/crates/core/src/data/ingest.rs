use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::Dataset;
use crate::error::{Error, Result};
use crate::types::{InteractionSequence, ItemId, MIN_SEQUENCE_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    Tsv,
    Csv,
}

impl LogFormat {
    fn delimiter(self) -> u8 {
        match self {
            LogFormat::Tsv => b'\t',
            LogFormat::Csv => b',',
        }
    }
}

impl FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(LogFormat::Tsv),
            "csv" => Ok(LogFormat::Csv),
            other => Err(Error::Config(format!("unknown log format {other:?}"))),
        }
    }
}

/// Raw item id to dense index, in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    raw: Vec<String>,
}

impl Vocabulary {
    pub fn from_raw(raw: Vec<String>) -> Self {
        Self { raw }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw_id(&self, item: ItemId) -> Option<&str> {
        self.raw.get(item.index()).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, ItemId)> {
        self.raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.as_str(), ItemId::from(i)))
    }
}

/// Two-column text file: `raw_id<TAB>dense_id`.
pub fn write_vocabulary<W: Write>(mut out: W, vocab: &Vocabulary) -> Result<()> {
    for (raw, id) in vocab.entries() {
        writeln!(out, "{raw}\t{}", id.0)?;
    }
    Ok(())
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let reader = BufReader::new(File::open(path)?);
    let mut raw = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let (r, id) = line.split_once('\t').ok_or_else(|| Error::MalformedRow {
            line: i + 1,
            reason: "expected raw_id<TAB>dense_id".into(),
        })?;
        if id.trim().parse::<usize>().ok() != Some(raw.len()) {
            return Err(Error::MalformedRow {
                line: i + 1,
                reason: format!("dense ids must be consecutive, found {id:?}"),
            });
        }
        raw.push(r.to_owned());
    }
    Ok(Vocabulary { raw })
}

struct Row {
    user: String,
    item: String,
    ts: f64,
}

/// Loads a `user, item, timestamp` log. Rows are grouped by user and
/// ordered by timestamp, keeping file order among equal timestamps.
/// Duplicate rows are kept. A first line whose timestamp is not numeric is
/// treated as a header.
pub fn ingest(path: &Path, format: LogFormat) -> Result<(Dataset, Vocabulary)> {
    ingest_reader(File::open(path)?, format)
}

pub fn ingest_reader<R: Read>(reader: R, format: LogFormat) -> Result<(Dataset, Vocabulary)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() != 3 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 3 columns, found {}", rec.len()),
            });
        }
        let (user, item, raw_ts) = (&rec[0], &rec[1], &rec[2]);
        if user.is_empty() || item.is_empty() {
            return Err(Error::MalformedRow {
                line,
                reason: "empty user or item".into(),
            });
        }
        let ts = match raw_ts.parse::<f64>() {
            Ok(t) if t.is_finite() => t,
            Ok(_) | Err(_) if line == 1 => continue,
            _ => {
                return Err(Error::UnsortableTimestamps {
                    line,
                    raw: raw_ts.to_owned(),
                })
            }
        };
        rows.push(Row {
            user: user.to_owned(),
            item: item.to_owned(),
            ts,
        });
    }

    // group by user, first-appearance order
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<&Row>> = Vec::new();
    for row in &rows {
        let idx = *user_index.entry(row.user.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[idx].push(row);
    }
    for g in &mut groups {
        g.sort_by(|a, b| a.ts.total_cmp(&b.ts));
    }

    let kept: Vec<bool> = groups.iter().map(|g| g.len() >= MIN_SEQUENCE_LEN).collect();
    let dropped = kept.iter().filter(|&&k| !k).count();

    // dense item ids in first-appearance file order over kept users
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut vocab = Vec::new();
    for row in &rows {
        if !kept[user_index[row.user.as_str()]] {
            continue;
        }
        item_index.entry(row.item.as_str()).or_insert_with(|| {
            vocab.push(row.item.clone());
            (vocab.len() - 1) as u32
        });
    }
    let groups: Vec<&Vec<&Row>> = groups.iter().zip(&kept).filter(|(_, &k)| k).map(|(g, _)| g).collect();

    let sequences: Vec<InteractionSequence> = groups
        .iter()
        .enumerate()
        .map(|(u, g)| InteractionSequence::new(u as u64, g.iter().map(|r| ItemId(item_index[r.item.as_str()]))))
        .collect();
    let dataset = Dataset::with_dropped(sequences, vocab.len(), dropped)?;
    let st = dataset.stats();
    log::info!(
        "#Users {} #Items {} #Inters {} Avg.U {:.2} Avg.I {:.2} (dropped {})",
        st.users,
        st.items,
        st.interactions,
        st.avg_per_user,
        st.avg_per_item,
        st.dropped_users
    );
    Ok((dataset, Vocabulary { raw: vocab }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_users_three_each() {
        let log = "user\titem\tts\nu1\ta\t1\nu2\tb\t5\nu1\tb\t2\nu2\tc\t6\nu1\tc\t3\nu2\ta\t7\n";
        let (d, v) = ingest_reader(log.as_bytes(), LogFormat::Tsv).unwrap();
        let st = d.stats();
        assert_eq!(st.interactions, 6);
        assert_eq!(st.users, 2);
        assert!((st.avg_per_user - 3.0).abs() < 1e-12);
        assert_eq!(v.len(), 3);
        assert_eq!(d.sequences()[0].items, vec![ItemId(0), ItemId(1), ItemId(2)]);
        assert_eq!(d.sequences()[1].items, vec![ItemId(1), ItemId(2), ItemId(0)]);
    }

    #[test]
    fn sorts_by_timestamp_stably_and_drops_short() {
        let log = "u,x,3\nu,y,1\nu,z,1\nshort,x,1\nshort,y,2\n";
        let (d, v) = ingest_reader(log.as_bytes(), LogFormat::Csv).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.dropped(), 1);
        let raw: Vec<&str> = d.sequences()[0]
            .items
            .iter()
            .map(|&i| v.raw_id(i).unwrap())
            .collect();
        assert_eq!(raw, ["y", "z", "x"]);
    }

    #[test]
    fn keeps_duplicates() {
        let log = "u\ta\t1\nu\ta\t1\nu\tb\t2\n";
        let (d, _) = ingest_reader(log.as_bytes(), LogFormat::Tsv).unwrap();
        assert_eq!(d.sequences()[0].items, vec![ItemId(0), ItemId(0), ItemId(1)]);
    }

    #[test]
    fn malformed_rows() {
        let bad_cols = "u\ta\t1\nu\tb\n";
        assert!(matches!(
            ingest_reader(bad_cols.as_bytes(), LogFormat::Tsv),
            Err(Error::MalformedRow { line: 2, .. })
        ));
        let bad_ts = "u\ta\t1\nu\tb\tyesterday\n";
        assert!(matches!(
            ingest_reader(bad_ts.as_bytes(), LogFormat::Tsv),
            Err(Error::UnsortableTimestamps { line: 2, .. })
        ));
    }

    #[test]
    fn vocabulary_round_trip() {
        let v = Vocabulary::from_raw(vec!["a".into(), "b b".into()]);
        let mut buf = Vec::new();
        write_vocabulary(&mut buf, &v).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a\t0\nb b\t1\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        std::fs::write(&p, buf).unwrap();
        assert_eq!(read_vocabulary(&p).unwrap(), v);
    }
}
