//! Trace-specific memory store.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub id: u64,
    pub text: String,
    pub created_step: u64,
    pub updated_step: u64,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub local_index: usize,
    pub item_id: u64,
    pub text: String,
    pub score: f64,
}

/// The ranked view handed to the controller and executor for one span.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievedSet {
    pub items: Vec<Retrieved>,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.items.iter().map(|r| r.item_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MemoryAction {
    Insert { text: String },
    Update { local_index: usize, text: String },
    Delete { local_index: usize },
    Noop,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApplyReport {
    pub inserted: Vec<u64>,
    pub updated: Vec<u64>,
    pub deleted: Vec<u64>,
    pub warnings: Vec<String>,
}

impl ApplyReport {
    pub fn mutations(&self) -> usize {
        self.inserted.len() + self.updated.len() + self.deleted.len()
    }
}

/// Ids are never reused within a bank, even after deletes.
#[derive(Debug, Clone, Default)]
pub struct MemoryBank {
    items: Vec<MemoryItem>,
    next_id: u64,
}

// Equality is over stored items; the id counter is derived state.
impl PartialEq for MemoryBank {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn get(&self, id: u64) -> Option<&MemoryItem> {
        self.items.iter().find(|m| m.id == id)
    }

    fn position(&self, id: u64) -> Option<usize> {
        self.items.iter().position(|m| m.id == id)
    }

    pub fn insert(&mut self, text: String, embedding: EmbeddingVector, step: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.items.push(MemoryItem {
            id,
            text,
            created_step: step,
            updated_step: step,
            embedding,
        });
        id
    }

    /// Top-`min(r, len)` items by cosine score. Ties go to the more recently
    /// updated item, then the larger id.
    pub fn retrieve(&self, query: &EmbeddingVector, r: usize) -> Result<RetrievedSet> {
        if r == 0 {
            return Err(Error::InvalidArgument("retrieve count must be >= 1".into()));
        }
        let mut scored = self
            .items
            .iter()
            .map(|m| cosine(query, &m.embedding).map(|s| (s, m)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|(sa, a), (sb, b)| {
            sb.partial_cmp(sa)
                .unwrap_or(Ordering::Equal)
                .then(b.updated_step.cmp(&a.updated_step))
                .then(b.id.cmp(&a.id))
        });
        Ok(RetrievedSet {
            items: scored
                .into_iter()
                .take(r)
                .enumerate()
                .map(|(local_index, (score, m))| Retrieved {
                    local_index,
                    item_id: m.id,
                    text: m.text.clone(),
                    score,
                })
                .collect(),
        })
    }

    /// Resolves every local index against `retrieved` first, then applies the
    /// actions in order. Bad references become warnings; the batch never
    /// aborts on them. Embedding failures leave the bank unchanged.
    pub fn apply_actions(
        &mut self,
        retrieved: &RetrievedSet,
        actions: &[MemoryAction],
        step: u64,
        embedder: &dyn Embedder,
    ) -> Result<ApplyReport> {
        enum Resolved<'a> {
            Insert(&'a str),
            Update(u64, &'a str),
            Delete(u64),
        }
        let mut report = ApplyReport::default();
        let mut plan = Vec::with_capacity(actions.len());
        for (n, action) in actions.iter().enumerate() {
            let resolve = |idx: usize, report: &mut ApplyReport| {
                let id = retrieved.items.get(idx).map(|r| r.item_id);
                if id.is_none() {
                    report.warnings.push(format!(
                        "action {n}: memory index {idx} out of range (retrieved {})",
                        retrieved.len()
                    ));
                }
                id
            };
            match action {
                MemoryAction::Insert { text } => plan.push(Resolved::Insert(text)),
                MemoryAction::Update { local_index, text } => {
                    if let Some(id) = resolve(*local_index, &mut report) {
                        plan.push(Resolved::Update(id, text));
                    }
                }
                MemoryAction::Delete { local_index } => {
                    if let Some(id) = resolve(*local_index, &mut report) {
                        plan.push(Resolved::Delete(id));
                    }
                }
                MemoryAction::Noop => {}
            }
        }

        let texts: Vec<&str> = plan
            .iter()
            .filter_map(|p| match p {
                Resolved::Insert(t) | Resolved::Update(_, t) => Some(*t),
                Resolved::Delete(_) => None,
            })
            .collect();
        let mut embeddings = if texts.is_empty() {
            Vec::new()
        } else {
            embedder.embed_batch(&texts)?
        }
        .into_iter();

        let mut deleted = HashSet::new();
        for p in plan {
            match p {
                Resolved::Insert(text) => {
                    let e = embeddings.next().expect("one embedding per text");
                    let id = self.insert(text.to_string(), e, step);
                    report.inserted.push(id);
                }
                Resolved::Update(id, text) => {
                    let e = embeddings.next().expect("one embedding per text");
                    match self.position(id) {
                        Some(pos) if !deleted.contains(&id) => {
                            let item = &mut self.items[pos];
                            item.text = text.to_string();
                            item.embedding = e;
                            item.updated_step = step.max(item.created_step);
                            report.updated.push(id);
                        }
                        _ => report
                            .warnings
                            .push(format!("update of memory {id} dropped: already deleted")),
                    }
                }
                Resolved::Delete(id) => match self.position(id) {
                    Some(pos) => {
                        self.items.remove(pos);
                        deleted.insert(id);
                        report.deleted.push(id);
                    }
                    None => report
                        .warnings
                        .push(format!("delete of memory {id} dropped: already deleted")),
                },
            }
        }
        Ok(report)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for item in &self.items {
            serde_json::to_writer(&mut out, item)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut bank = MemoryBank::new();
        let mut seen = HashSet::new();
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::Line {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let item: MemoryItem = serde_json::from_str(&line).map_err(|e| Error::Line {
                line: line_no,
                message: e.to_string(),
            })?;
            if !seen.insert(item.id) {
                return Err(Error::Line {
                    line: line_no,
                    message: format!("duplicate memory id {}", item.id),
                });
            }
            bank.next_id = bank.next_id.max(item.id + 1);
            bank.items.push(item);
        }
        Ok(bank)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read_jsonl(text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use proptest::prelude::*;

    fn emb() -> HashEmbedder {
        HashEmbedder::new(32).unwrap()
    }

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn retrieve_empty_and_min_rule() {
        let e = emb();
        let mut bank = MemoryBank::new();
        let q = e.embed("alice").unwrap();
        assert!(bank.retrieve(&q, 20).unwrap().is_empty());
        for t in ["a1 x", "b2 y", "c3 z", "d4 w", "e5 v"] {
            bank.insert(t.into(), e.embed(t).unwrap(), 0);
        }
        let r = bank.retrieve(&q, 20).unwrap();
        assert_eq!(r.len(), 5);
        assert_eq!(r.items.iter().map(|x| x.local_index).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
    }

    #[test]
    fn retrieve_tie_break_matches_exhaustive_sort() {
        let mut bank = MemoryBank::new();
        // scores 0.9, 0.9, 0.1 against query e1
        let a = bank.insert("a".into(), v(&[0.9, (1.0f64 - 0.81).sqrt()]), 1);
        let b = bank.insert("b".into(), v(&[0.9, -(1.0f64 - 0.81).sqrt()]), 3);
        let c = bank.insert("c".into(), v(&[0.1, (1.0f64 - 0.01).sqrt()]), 5);
        let q = v(&[1.0, 0.0]);
        let got = bank.retrieve(&q, 3).unwrap().ids();

        // oracle: enumerate all orders, keep the one that is sorted under the rule
        let items = bank.items().to_vec();
        let key = |m: &MemoryItem| (cosine(&q, &m.embedding).unwrap(), m.updated_step, m.id);
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let expected: Vec<u64> = perms
            .iter()
            .find(|p| {
                p.windows(2).all(|w| {
                    let (x, y) = (key(&items[w[0]]), key(&items[w[1]]));
                    x.0 > y.0 || (x.0 == y.0 && (x.1 > y.1 || (x.1 == y.1 && x.2 > y.2)))
                })
            })
            .unwrap()
            .iter()
            .map(|&i| items[i].id)
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got, [b, a, c]);
    }

    #[test]
    fn index_resolution_happens_before_mutation() {
        let e = emb();
        let mut bank = MemoryBank::new();
        let i0 = bank.insert("first".into(), e.embed("first").unwrap(), 0);
        let i1 = bank.insert("second".into(), e.embed("second").unwrap(), 0);
        let retrieved = RetrievedSet {
            items: vec![
                Retrieved { local_index: 0, item_id: i0, text: "first".into(), score: 1.0 },
                Retrieved { local_index: 1, item_id: i1, text: "second".into(), score: 0.5 },
            ],
        };
        let actions = [
            MemoryAction::Delete { local_index: 0 },
            MemoryAction::Update { local_index: 0, text: "y".into() },
        ];
        let report = bank.apply_actions(&retrieved, &actions, 1, &e).unwrap();
        assert_eq!(report.deleted, [i0]);
        assert!(report.updated.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert!(bank.get(i0).is_none());
        assert_eq!(bank.get(i1).unwrap().text, "second");
    }

    #[test]
    fn noop_and_out_of_range() {
        let e = emb();
        let mut bank = MemoryBank::new();
        let r = bank
            .apply_actions(&RetrievedSet::default(), &[MemoryAction::Insert { text: "x".into() }], 0, &e)
            .unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(r.inserted.len(), 1);
        let before = bank.clone();
        let r = bank.apply_actions(&RetrievedSet::default(), &[MemoryAction::Noop], 1, &e).unwrap();
        assert_eq!(r.mutations(), 0);
        assert_eq!(bank, before);
        let r = bank
            .apply_actions(&RetrievedSet::default(), &[MemoryAction::Delete { local_index: 3 }], 1, &e)
            .unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(bank, before);
    }

    #[test]
    fn update_refreshes_embedding_and_step() {
        let e = emb();
        let mut bank = MemoryBank::new();
        let id = bank.insert("old".into(), e.embed("old").unwrap(), 2);
        let retrieved = bank.retrieve(&e.embed("old").unwrap(), 5).unwrap();
        bank.apply_actions(&retrieved, &[MemoryAction::Update { local_index: 0, text: "new fact".into() }], 7, &e)
            .unwrap();
        let item = bank.get(id).unwrap();
        assert_eq!(item.embedding, e.embed("new fact").unwrap());
        assert_eq!((item.created_step, item.updated_step), (2, 7));
    }

    #[test]
    fn ids_not_reused_after_delete() {
        let e = emb();
        let mut bank = MemoryBank::new();
        bank.insert("a".into(), e.embed("a").unwrap(), 0);
        let last = bank.insert("b".into(), e.embed("b").unwrap(), 0);
        let r = bank.retrieve(&e.embed("b").unwrap(), 5).unwrap();
        let pos = r.items.iter().position(|x| x.item_id == last).unwrap();
        bank.apply_actions(&r, &[MemoryAction::Delete { local_index: pos }], 1, &e).unwrap();
        let fresh = bank.insert("c".into(), e.embed("c").unwrap(), 2);
        assert!(fresh > last);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let e = emb();
        let mut bank = MemoryBank::new();
        assert_eq!(bank.to_jsonl(), "");
        assert_eq!(MemoryBank::from_jsonl("").unwrap(), bank);
        bank.insert("Alice moved to Paris".into(), e.embed("Alice moved to Paris").unwrap(), 3);
        bank.insert("Bob likes tea".into(), e.embed("Bob likes tea").unwrap(), 4);
        let text = bank.to_jsonl();
        assert_eq!(MemoryBank::from_jsonl(&text).unwrap(), bank);
        let first_line = text.lines().next().unwrap();
        let truncated = format!("{first_line}\n{}", &first_line[..first_line.len() / 2]);
        assert!(matches!(MemoryBank::from_jsonl(&truncated), Err(Error::Line { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn inserts_grow_by_count_and_scores_exact(words in proptest::collection::vec("[a-z]{1,8}", 0..12)) {
            let e = emb();
            let mut bank = MemoryBank::new();
            let actions: Vec<_> = words.iter().map(|w| MemoryAction::Insert { text: w.clone() }).collect();
            let r = bank.apply_actions(&RetrievedSet::default(), &actions, 0, &e).unwrap();
            prop_assert_eq!(bank.len(), words.len());
            prop_assert_eq!(r.inserted.len(), words.len());
            let q = e.embed("abc def").unwrap();
            let got = bank.retrieve(&q, 20).unwrap();
            for w in got.items.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for it in &got.items {
                let m = bank.get(it.item_id).unwrap();
                prop_assert_eq!(it.score, cosine(&q, &m.embedding).unwrap());
            }
        }
    }
}
