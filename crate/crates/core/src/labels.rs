//! Structure taxonomy: label indices, names and aggregate structures.

use std::collections::BTreeMap;

/// Whole thalamus.
pub const THALAMUS: u16 = 1;
/// Whole globus pallidus.
pub const GLOBUS_PALLIDUS: u16 = 33;

/// Nuclei that make up the whole thalamus when no dedicated label is present.
pub const THALAMIC_NUCLEI: [u16; 10] = [2, 4, 5, 6, 7, 8, 9, 10, 11, 12];
/// Pallidal divisions (GPe, GPi).
pub const PALLIDAL_DIVISIONS: [u16; 2] = [29, 30];

/// Output nomenclature, in the order it is written to volume tables.
const STANDARD: [(u16, &str); 22] = [
    (1, "THALAMUS"),
    (2, "AV"),
    (4, "VA"),
    (5, "VLa"),
    (6, "VLP"),
    (7, "VPL"),
    (8, "Pul"),
    (9, "LGN"),
    (10, "MGN"),
    (11, "CM"),
    (12, "MD-Pf"),
    (13, "Hb"),
    (14, "MTT"),
    (26, "Acc"),
    (27, "Cau"),
    (28, "Cla"),
    (29, "GPe"),
    (30, "GPi"),
    (31, "Put"),
    (32, "RN"),
    (33, "GP"),
    (34, "Amy"),
];

/// Map label index → structure name. Iteration is in index order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelDictionary {
    entries: BTreeMap<u16, String>,
}

impl LabelDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// The 22-structure deep grey nuclei dictionary.
    pub fn standard() -> Self {
        let entries = STANDARD.iter().map(|(i, n)| (*i, n.to_string())).collect();
        LabelDictionary { entries }
    }

    /// Dictionary covering exactly `indices`, using standard names where known.
    pub fn for_indices(indices: impl IntoIterator<Item = u16>) -> Self {
        let std = Self::standard();
        let mut d = LabelDictionary::new();
        for i in indices {
            if i == 0 {
                continue;
            }
            let name = std
                .name(i)
                .map(str::to_string)
                .unwrap_or_else(|| format!("L{i}"));
            d.insert(i, name);
        }
        d
    }

    pub fn insert(&mut self, index: u16, name: impl Into<String>) -> Option<String> {
        self.entries.insert(index, name.into())
    }

    pub fn name(&self, index: u16) -> Option<&str> {
        self.entries.get(&index).map(String::as_str)
    }

    pub fn contains(&self, index: u16) -> bool {
        self.entries.contains_key(&index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u16, &str)> {
        self.entries.iter().map(|(i, n)| (*i, n.as_str()))
    }

    pub fn indices(&self) -> impl Iterator<Item = u16> + '_ {
        self.entries.keys().copied()
    }
}

/// Labels whose union forms the structure `index`. Whole thalamus and whole
/// GP are unions of their constituents plus any dedicated label.
pub fn structure_members(index: u16) -> Vec<u16> {
    match index {
        THALAMUS => std::iter::once(THALAMUS).chain(THALAMIC_NUCLEI).collect(),
        GLOBUS_PALLIDUS => std::iter::once(GLOBUS_PALLIDUS)
            .chain(PALLIDAL_DIVISIONS)
            .collect(),
        other => vec![other],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_dictionary_follows_output_nomenclature() {
        let d = LabelDictionary::standard();
        assert_eq!(d.len(), 22);
        assert_eq!(d.name(26), Some("Acc"));
        assert_eq!(d.name(27), Some("Cau"));
        assert_eq!(d.name(34), Some("Amy"));
        assert_eq!(d.name(3), None);
    }

    #[test]
    fn aggregates_expand_to_constituents() {
        assert!(structure_members(THALAMUS).contains(&8));
        assert!(!structure_members(THALAMUS).contains(&13));
        assert_eq!(structure_members(GLOBUS_PALLIDUS), vec![33, 29, 30]);
        assert_eq!(structure_members(31), vec![31]);
    }
}
