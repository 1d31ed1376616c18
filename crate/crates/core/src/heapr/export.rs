use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{AtomicExpertKey, ImportanceEntry, ImportanceTable, PruneManifest};

pub const IMPORTANCE_CSV_HEADER: &str = "layer,expert,channel,score,token_count,method";

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

impl ImportanceTable {
    /// Rows in key order. Scores use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(48 * (self.entries.len() + 1));
        out.push_str(IMPORTANCE_CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            let k = e.key;
            let _ = writeln!(
                out,
                "{},{},{},{:e},{},{}",
                k.layer, k.expert, k.channel, e.score, e.token_count, self.method
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(IMPORTANCE_CSV_HEADER) {
            return Err(Error::Parse("importance CSV header mismatch".into()));
        }
        let mut entries = Vec::new();
        let mut method: Option<String> = None;
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Parse(format!("row {}: expected 6 columns", n + 1)));
            }
            let bad = |what: &str| Error::Parse(format!("row {}: bad {what}", n + 1));
            let key = AtomicExpertKey::new(
                cols[0].parse().map_err(|_| bad("layer"))?,
                cols[1].parse().map_err(|_| bad("expert"))?,
                cols[2].parse().map_err(|_| bad("channel"))?,
            );
            let score: f64 = cols[3].parse().map_err(|_| bad("score"))?;
            let token_count = cols[4].parse().map_err(|_| bad("token_count"))?;
            match &method {
                None => method = Some(cols[5].to_string()),
                Some(m) if m != cols[5] => return Err(bad("method (mixed methods)")),
                _ => {}
            }
            entries.push(ImportanceEntry {
                key,
                score,
                token_count,
            });
        }
        let method = method.unwrap_or_default();
        let mut t = ImportanceTable::new(method.clone(), entries);
        t.layerwise_only = method == crate::baselines::CAMERA_METHOD;
        Ok(t)
    }
}

impl PruneManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heapr::{rank_global, ImportanceEntry};
    use proptest::prelude::*;

    fn sample() -> ImportanceTable {
        ImportanceTable::new(
            "heapr",
            vec![
                ImportanceEntry { key: AtomicExpertKey::new(1, 0, 2), score: 0.25, token_count: 4 },
                ImportanceEntry { key: AtomicExpertKey::new(0, 3, 1), score: 1.5e-12, token_count: 0 },
            ],
        )
    }

    #[test]
    fn csv_rows_are_key_ordered() {
        let csv = sample().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], IMPORTANCE_CSV_HEADER);
        assert_eq!(lines[1], "0,3,1,1.5e-12,0,heapr");
        assert_eq!(lines[2], "1,0,2,2.5e-1,4,heapr");
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(ImportanceTable::from_csv("nope\n").is_err());
        let bad = format!("{IMPORTANCE_CSV_HEADER}\n0,0,x,1,1,heapr\n");
        assert!(ImportanceTable::from_csv(&bad).is_err());
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = rank_global(&sample(), 0.5).unwrap();
        assert_eq!(PruneManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&("x", 1)).unwrap();
        assert_eq!(a, config_hash(&("x", 1)).unwrap());
        assert_ne!(a, config_hash(&("x", 2)).unwrap());
        assert_eq!(a.len(), 64);
    }

    proptest! {
        #[test]
        fn csv_round_trip(scores in proptest::collection::vec(0.0f64..1e6, 1..40)) {
            let entries = scores.iter().enumerate().map(|(i, &s)| ImportanceEntry {
                key: AtomicExpertKey::new(i / 10, (i / 5) % 2, i % 5),
                score: s,
                token_count: i,
            }).collect();
            let t = ImportanceTable::new("magnitude", entries);
            prop_assert_eq!(ImportanceTable::from_csv(&t.to_csv()).unwrap(), t);
        }
    }
}
