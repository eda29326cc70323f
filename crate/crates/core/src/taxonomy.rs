//! Three-level pose hierarchy: L3 poses roll up into L2 variations, which
//! roll up into L1 body positions.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The shipped Yoga-82 hierarchy.
pub const YOGA82_CSV: &str = include_str!("../data/yoga82_taxonomy.csv");

pub const TAXONOMY_HEADER: &str = "l3_name,l2_name,l1_name";

/// The six postures used for the small-subset experiments.
pub const SIX_POSE_SUBSET: [&str; 6] = [
    "Balasana",
    "Dhanurasana",
    "Marjaryasana",
    "Salamba Sarvangasana",
    "Ustrasana",
    "Utkatasana",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L1, Level::L2, Level::L3];
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::L3 => "L3",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRecord {
    pub name: String,
    pub l2: String,
    pub l1: String,
}

/// L2 groups share display names across L1 groups ("Up-facing" exists under
/// both Reclining and Wheel), so an L2 group is keyed by its `(l1, l2)` pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    classes: Vec<ClassRecord>,
    l2_groups: Vec<(String, String)>,
    l1_groups: Vec<String>,
    l3_to_l2: Vec<usize>,
    l2_to_l1: Vec<usize>,
    by_name: HashMap<String, usize>,
}

impl Taxonomy {
    pub fn from_records(records: Vec<ClassRecord>) -> Result<Self> {
        let rows = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| (i + 2, r))
            .collect();
        Self::build(rows)
    }

    fn build(rows: Vec<(usize, ClassRecord)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "taxonomy has no classes".into(),
            });
        }
        let mut classes = Vec::with_capacity(rows.len());
        let mut by_name = HashMap::new();
        let mut l2_groups: Vec<(String, String)> = Vec::new();
        let mut l1_groups: Vec<String> = Vec::new();
        let mut l3_to_l2 = Vec::new();
        let mut l2_to_l1 = Vec::new();
        for (line, rec) in rows {
            for (field, value) in [("l3_name", &rec.name), ("l2_name", &rec.l2), ("l1_name", &rec.l1)] {
                if value.is_empty() {
                    return Err(Error::Parse {
                        line,
                        message: format!("empty {field}: dangling superclass link"),
                    });
                }
            }
            if let Some(&prev) = by_name.get(&rec.name) {
                let prev: &ClassRecord = &classes[prev];
                let message = if prev.l2 != rec.l2 || prev.l1 != rec.l1 {
                    format!(
                        "class {:?} mapped to two superclasses ({}/{} and {}/{})",
                        rec.name, prev.l1, prev.l2, rec.l1, rec.l2
                    )
                } else {
                    format!("duplicate class {:?}", rec.name)
                };
                return Err(Error::Parse { line, message });
            }
            let l1 = match l1_groups.iter().position(|g| g == &rec.l1) {
                Some(i) => i,
                None => {
                    l1_groups.push(rec.l1.clone());
                    l1_groups.len() - 1
                }
            };
            let key = (rec.l1.clone(), rec.l2.clone());
            let l2 = match l2_groups.iter().position(|g| g == &key) {
                Some(i) => i,
                None => {
                    l2_groups.push(key);
                    l2_to_l1.push(l1);
                    l2_groups.len() - 1
                }
            };
            by_name.insert(rec.name.clone(), classes.len());
            l3_to_l2.push(l2);
            classes.push(rec);
        }
        Ok(Taxonomy {
            classes,
            l2_groups,
            l1_groups,
            l3_to_l2,
            l2_to_l1,
            by_name,
        })
    }

    /// Parses the `l3_name,l2_name,l1_name` CSV format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((i, l)) => break (i + 1, l.trim().trim_start_matches('\u{feff}')),
                None => {
                    return Err(Error::Parse {
                        line: 1,
                        message: "empty taxonomy file".into(),
                    })
                }
            }
        };
        if header.1 != TAXONOMY_HEADER {
            return Err(Error::Parse {
                line: header.0,
                message: format!("expected header {TAXONOMY_HEADER:?}, got {:?}", header.1),
            });
        }
        let mut rows = Vec::new();
        for (i, raw) in lines {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            rows.push((
                line,
                ClassRecord {
                    name: fields[0].to_string(),
                    l2: fields[1].to_string(),
                    l1: fields[2].to_string(),
                },
            ));
        }
        Self::build(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn yoga82() -> Self {
        Self::parse(YOGA82_CSV).expect("shipped taxonomy is valid")
    }

    /// The six-posture subset of Yoga-82, in taxonomy order of the names above.
    pub fn six_pose_subset() -> Self {
        Self::yoga82()
            .subset(&SIX_POSE_SUBSET)
            .expect("subset names exist in the shipped taxonomy")
    }

    /// Restricts to the named classes, keeping the given order.
    pub fn subset<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let records = names
            .iter()
            .map(|n| {
                let n = n.as_ref();
                self.index_of(n)
                    .map(|i| self.classes[i].clone())
                    .ok_or_else(|| Error::Config(format!("unknown class {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(records)
    }

    /// The first `n` classes in taxonomy order.
    pub fn first(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!(
                "cannot take {n} classes from a taxonomy of {}",
                self.len()
            )));
        }
        Self::from_records(self.classes[..n].to_vec())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TAXONOMY_HEADER);
        out.push('\n');
        for c in &self.classes {
            out.push_str(&format!("{},{},{}\n", c.name, c.l2, c.l1));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn level_count(&self, level: Level) -> usize {
        match level {
            Level::L1 => self.l1_groups.len(),
            Level::L2 => self.l2_groups.len(),
            Level::L3 => self.classes.len(),
        }
    }

    /// Index of the group containing L3 class `class` at `level`.
    pub fn group_of(&self, class: usize, level: Level) -> usize {
        match level {
            Level::L3 => class,
            Level::L2 => self.l3_to_l2[class],
            Level::L1 => self.l2_to_l1[self.l3_to_l2[class]],
        }
    }

    pub fn l2_parent(&self, l2: usize) -> usize {
        self.l2_to_l1[l2]
    }

    pub fn l1_names(&self) -> &[String] {
        &self.l1_groups
    }

    pub fn l2_name(&self, l2: usize) -> &str {
        &self.l2_groups[l2].1
    }

    /// L3 classes under an L1 group, in taxonomy order.
    pub fn classes_in_l1(&self, l1: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&c| self.group_of(c, Level::L1) == l1)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_file_has_82_20_6() {
        let t = Taxonomy::yoga82();
        assert_eq!(t.level_count(Level::L3), 82);
        assert_eq!(t.level_count(Level::L2), 20);
        assert_eq!(t.level_count(Level::L1), 6);
    }

    #[test]
    fn balasana_rolls_up_to_reclining() {
        let t = Taxonomy::yoga82();
        let i = t.index_of("Balasana").unwrap();
        let l2 = t.group_of(i, Level::L2);
        assert_eq!(t.l2_name(l2), "Down-facing");
        assert_eq!(t.l1_names()[t.group_of(i, Level::L1)], "Reclining");
    }

    #[test]
    fn roll_up_composes() {
        let t = Taxonomy::yoga82();
        for c in 0..t.len() {
            assert_eq!(
                t.group_of(c, Level::L1),
                t.l2_parent(t.group_of(c, Level::L2))
            );
        }
    }

    #[test]
    fn reclining_has_19_classes() {
        let t = Taxonomy::yoga82();
        let rec = t.l1_names().iter().position(|n| n == "Reclining").unwrap();
        assert_eq!(t.classes_in_l1(rec).len(), 19);
    }

    #[test]
    fn class_mapped_twice_is_a_parse_error() {
        let text = "l3_name,l2_name,l1_name\nA,X,P\nB,X,P\nA,Y,P\n";
        match Taxonomy::parse(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("two superclasses"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let err = Taxonomy::parse("l3_name,l2_name,l1_name\nA,X\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = Taxonomy::parse("l3_name,l2_name,l1_name\nA,,P\n").unwrap_err();
        assert!(err.to_string().contains("dangling"));
        assert!(Taxonomy::parse("name,l2,l1\nA,X,P\n").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = Taxonomy::yoga82();
        assert_eq!(Taxonomy::parse(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn six_subset_keeps_superclasses() {
        let t = Taxonomy::six_pose_subset();
        assert_eq!(t.len(), 6);
        let u = t.index_of("Ustrasana").unwrap();
        assert_eq!(t.l1_names()[t.group_of(u, Level::L1)], "Wheel");
    }
}
