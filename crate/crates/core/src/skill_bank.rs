//! The shared, versioned set of memory skills.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::designer::{EvolutionProposal, ProposalAction, SkillChange};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateType {
    Insert,
    Update,
    Delete,
    Noop,
}

impl UpdateType {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateType::Insert => "insert",
            UpdateType::Update => "update",
            UpdateType::Delete => "delete",
            UpdateType::Noop => "noop",
        }
    }

    /// Only insert and update skills may be created by the designer.
    pub fn evolvable(self) -> bool {
        matches!(self, UpdateType::Insert | UpdateType::Update)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Initial,
    DesignerAdded(u32),
    DesignerRefined(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skill {
    pub name: String,
    pub description: String,
    pub instruction_template: String,
    pub update_type: UpdateType,
    pub origin: Origin,
    pub created_step: u64,
}

pub fn valid_skill_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl Skill {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Error::Validation {
            target: self.name.clone(),
            reason: reason.to_string(),
        };
        if !valid_skill_name(&self.name) {
            return Err(fail("name must match [a-z0-9_]+"));
        }
        if self.description.trim().is_empty() {
            return Err(fail("empty description"));
        }
        if self.instruction_template.trim().is_empty() {
            return Err(fail("empty instruction_template"));
        }
        if matches!(self.origin, Origin::DesignerAdded(_)) && !self.update_type.evolvable() {
            return Err(fail("designer-added skills must be insert or update"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillBank {
    pub version: u64,
    pub parent_version: Option<u64>,
    pub skills: Vec<Skill>,
}

fn primitive(name: &str, text: &str, update_type: UpdateType) -> Skill {
    let text = text.trim_end();
    let description = text
        .lines()
        .find_map(|l| l.strip_prefix("Description: "))
        .expect("primitive skill text carries a Description line")
        .to_string();
    Skill {
        name: name.to_string(),
        description,
        instruction_template: text.to_string(),
        update_type,
        origin: Origin::Initial,
        created_step: 0,
    }
}

impl SkillBank {
    /// Version-0 bank holding the four canonical primitives.
    pub fn init_primitives() -> Self {
        Self {
            version: 0,
            parent_version: None,
            skills: vec![
                primitive("insert", include_str!("../assets/skills/insert.txt"), UpdateType::Insert),
                primitive("update", include_str!("../assets/skills/update.txt"), UpdateType::Update),
                primitive("delete", include_str!("../assets/skills/delete.txt"), UpdateType::Delete),
                primitive("noop", include_str!("../assets/skills/noop.txt"), UpdateType::Noop),
            ],
        }
    }

    pub fn new(version: u64, skills: Vec<Skill>) -> Result<Self> {
        let bank = Self {
            version,
            parent_version: None,
            skills,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.skills.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Skill> {
        self.skills.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.skills.is_empty() {
            return Err(Error::Validation {
                target: "<bank>".into(),
                reason: "skill bank must hold at least one skill".into(),
            });
        }
        let mut seen = HashSet::new();
        for s in &self.skills {
            s.validate()?;
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Validation {
                    target: s.name.clone(),
                    reason: "duplicate skill name".into(),
                });
            }
        }
        Ok(())
    }

    /// Checks a proposal against this bank without applying it.
    pub fn check_proposal(&self, proposal: &EvolutionProposal) -> Result<()> {
        let mut targets = HashSet::new();
        for change in &proposal.changes {
            let name = change.target();
            let fail = |reason: &str| Error::Validation {
                target: name.to_string(),
                reason: reason.to_string(),
            };
            if !targets.insert(name) {
                return Err(fail("skill targeted more than once"));
            }
            match change {
                SkillChange::Add {
                    name,
                    description,
                    instruction_template,
                    update_type,
                    ..
                } => {
                    if !valid_skill_name(name) {
                        return Err(fail("name must match [a-z0-9_]+"));
                    }
                    if self.position(name).is_some() {
                        return Err(fail("name collides with an existing skill"));
                    }
                    if !update_type.evolvable() {
                        return Err(fail("update_type must be insert or update"));
                    }
                    if description.trim().is_empty() || instruction_template.trim().is_empty() {
                        return Err(fail("empty description or instruction_template"));
                    }
                }
                SkillChange::Refine {
                    name,
                    new_description,
                    new_instruction_template,
                    ..
                } => {
                    if self.position(name).is_none() {
                        return Err(fail("refine target does not exist"));
                    }
                    if new_description.is_none() && new_instruction_template.is_none() {
                        return Err(fail("refinement changes nothing"));
                    }
                    let blank = |o: &Option<String>| o.as_deref().is_some_and(|t| t.trim().is_empty());
                    if blank(new_description) || blank(new_instruction_template) {
                        return Err(fail("empty replacement text"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies a validated proposal, producing `version + 1`.
    pub fn apply_proposal(&self, proposal: &EvolutionProposal, round: u32, step: u64) -> Result<Self> {
        self.apply_proposal_as(proposal, round, step, self.version + 1)
    }

    /// Same as [`apply_proposal`](Self::apply_proposal) with an explicit
    /// version stamp, for callers that keep versions globally unique across
    /// rollbacks.
    pub fn apply_proposal_as(
        &self,
        proposal: &EvolutionProposal,
        round: u32,
        step: u64,
        version: u64,
    ) -> Result<Self> {
        if version <= self.version {
            return Err(Error::InvalidArgument(format!(
                "new version {version} must exceed {}",
                self.version
            )));
        }
        self.check_proposal(proposal)?;
        let mut next = self.clone();
        next.version = version;
        next.parent_version = Some(self.version);
        if proposal.action == ProposalAction::NoChange {
            return Ok(next);
        }
        for change in &proposal.changes {
            match change {
                SkillChange::Add {
                    name,
                    description,
                    instruction_template,
                    update_type,
                    ..
                } => next.skills.push(Skill {
                    name: name.clone(),
                    description: description.clone(),
                    instruction_template: instruction_template.clone(),
                    update_type: *update_type,
                    origin: Origin::DesignerAdded(round),
                    created_step: step,
                }),
                SkillChange::Refine {
                    name,
                    new_description,
                    new_instruction_template,
                    ..
                } => {
                    let pos = next.position(name).expect("checked above");
                    let skill = &mut next.skills[pos];
                    if let Some(d) = new_description {
                        skill.description = d.clone();
                    }
                    if let Some(t) = new_instruction_template {
                        skill.instruction_template = t.clone();
                    }
                    skill.origin = Origin::DesignerRefined(round);
                }
            }
        }
        Ok(next)
    }

    /// Positions of skills added by the given designer round.
    pub fn added_in_round(&self, round: u32) -> Vec<usize> {
        self.skills
            .iter()
            .enumerate()
            .filter(|(_, s)| s.origin == Origin::DesignerAdded(round))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skill bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bank: SkillBank = serde_json::from_str(text)?;
        bank.validate()?;
        Ok(bank)
    }

    /// Compact human-readable listing used in designer prompts.
    pub fn describe(&self) -> String {
        self.skills
            .iter()
            .map(|s| format!("- {} ({}): {}", s.name, s.update_type.as_str(), s.description))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Full listing including instruction templates.
    pub fn describe_full(&self) -> String {
        self.skills
            .iter()
            .map(|s| {
                format!(
                    "### {}\nupdate_type: {}\ndescription: {}\ninstruction_template:\n{}",
                    s.name,
                    s.update_type.as_str(),
                    s.description,
                    s.instruction_template
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

pub type SnapshotId = u64;

/// In-memory snapshot table. Snapshots keep the bank's version stamps.
#[derive(Debug, Default, Clone)]
pub struct SnapshotStore {
    snapshots: BTreeMap<SnapshotId, SkillBank>,
    next_id: SnapshotId,
}

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&mut self, bank: &SkillBank) -> SnapshotId {
        let id = self.next_id;
        self.next_id += 1;
        self.snapshots.insert(id, bank.clone());
        id
    }

    pub fn restore(&self, id: SnapshotId) -> Result<SkillBank> {
        self.snapshots
            .get(&id)
            .cloned()
            .ok_or(Error::UnknownSnapshot(id))
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankDiff {
    pub added: Vec<String>,
    pub refined: Vec<String>,
    pub removed: Vec<String>,
}

/// Names added, changed, or missing when going from `old` to `new`.
pub fn diff(old: &SkillBank, new: &SkillBank) -> BankDiff {
    let mut added = Vec::new();
    let mut refined = Vec::new();
    for s in &new.skills {
        match old.get(&s.name) {
            None => added.push(s.name.clone()),
            Some(prev)
                if prev.description != s.description
                    || prev.instruction_template != s.instruction_template =>
            {
                refined.push(s.name.clone())
            }
            Some(_) => {}
        }
    }
    let removed = old
        .skills
        .iter()
        .filter(|s| new.get(&s.name).is_none())
        .map(|s| s.name.clone())
        .collect();
    BankDiff {
        added,
        refined,
        removed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designer::ProposalAction;
    use proptest::prelude::*;

    fn add(name: &str) -> SkillChange {
        SkillChange::Add {
            name: name.into(),
            description: format!("capture {name} details"),
            instruction_template: format!("Skill: {name}\nAction type: INSERT only."),
            update_type: UpdateType::Insert,
            reasoning: String::new(),
        }
    }

    fn refine(name: &str, desc: &str) -> SkillChange {
        SkillChange::Refine {
            name: name.into(),
            new_description: Some(desc.into()),
            new_instruction_template: None,
            reasoning: String::new(),
        }
    }

    fn proposal(changes: Vec<SkillChange>) -> EvolutionProposal {
        EvolutionProposal {
            action: ProposalAction::ApplyChanges,
            changes,
            summary: String::new(),
        }
    }

    #[test]
    fn primitives_match_canonical_set() {
        let b = SkillBank::init_primitives();
        assert_eq!(b.version, 0);
        let names: Vec<_> = b.skills.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["insert", "update", "delete", "noop"]);
        let types: Vec<_> = b.skills.iter().map(|s| s.update_type).collect();
        assert_eq!(
            types,
            [UpdateType::Insert, UpdateType::Update, UpdateType::Delete, UpdateType::Noop]
        );
        assert!(b.skills[0].instruction_template.starts_with("Skill: Insert New Memory\n\n"));
        assert!(b.skills[0].instruction_template.ends_with("Action type: INSERT only."));
        assert_eq!(
            b.skills[3].description,
            "Memory management skill for confirming that no memory changes are required."
        );
        assert_eq!(b.to_json(), SkillBank::init_primitives().to_json());
        b.validate().unwrap();
    }

    #[test]
    fn add_and_refine() {
        let b = SkillBank::init_primitives();
        let b2 = b.apply_proposal(&proposal(vec![add("capture_dates")]), 1, 10).unwrap();
        assert_eq!(b2.len(), 5);
        assert_eq!(b2.version, 1);
        assert_eq!(b2.parent_version, Some(0));
        assert_eq!(b2.skills[4].origin, Origin::DesignerAdded(1));
        assert_eq!(b2.skills[4].created_step, 10);

        let b3 = b2.apply_proposal(&proposal(vec![refine("insert", "new text")]), 2, 20).unwrap();
        assert_eq!(b3.len(), 5);
        assert_eq!(b3.skills[0].description, "new text");
        assert_eq!(b3.skills[0].name, "insert");
        assert_eq!(b3.skills[0].update_type, UpdateType::Insert);
        assert_eq!(b3.skills[0].origin, Origin::DesignerRefined(2));
        assert_eq!(b3.version, 2);
    }

    #[test]
    fn invalid_proposals_leave_bank_untouched() {
        let b = SkillBank::init_primitives();
        let before = b.clone();
        let twice = proposal(vec![refine("insert", "a"), refine("insert", "b")]);
        assert!(matches!(b.apply_proposal(&twice, 1, 0), Err(Error::Validation { target, .. }) if target == "insert"));
        assert!(b.apply_proposal(&proposal(vec![refine("missing", "a")]), 1, 0).is_err());
        assert!(b.apply_proposal(&proposal(vec![add("insert")]), 1, 0).is_err());
        let mut bad = add("drop_things");
        if let SkillChange::Add { update_type, .. } = &mut bad {
            *update_type = UpdateType::Delete;
        }
        assert!(b.apply_proposal(&proposal(vec![bad]), 1, 0).is_err());
        assert!(b.apply_proposal(&proposal(vec![add("Bad-Name")]), 1, 0).is_err());
        assert_eq!(b, before);
    }

    #[test]
    fn snapshots_restore_independently() {
        let mut store = SnapshotStore::new();
        let b0 = SkillBank::init_primitives();
        let b1 = b0.apply_proposal(&proposal(vec![add("x")]), 1, 0).unwrap();
        let s0 = store.snapshot(&b0);
        let s1 = store.snapshot(&b1);
        assert_eq!(store.restore(s0).unwrap(), b0);
        assert_eq!(store.restore(s1).unwrap(), b1);
        assert!(matches!(store.restore(99), Err(Error::UnknownSnapshot(99))));
    }

    #[test]
    fn diff_reports_added_and_refined() {
        let b0 = SkillBank::init_primitives();
        let b1 = b0
            .apply_proposal(&proposal(vec![add("capture_dates"), refine("update", "z")]), 1, 0)
            .unwrap();
        let d = diff(&b0, &b1);
        assert_eq!(d.added, ["capture_dates"]);
        assert_eq!(d.refined, ["update"]);
        assert!(d.removed.is_empty());
    }

    fn arb_change() -> impl Strategy<Value = (bool, usize, String)> {
        (any::<bool>(), 0usize..4, "[a-z]{1,6}")
    }

    proptest! {
        #[test]
        fn proposal_cardinality_and_untouched(raw in proptest::collection::vec(arb_change(), 0..4)) {
            let b = SkillBank::init_primitives();
            let mut used = HashSet::new();
            let mut changes = Vec::new();
            for (is_add, idx, word) in raw {
                if is_add {
                    let name = format!("new_{word}");
                    if used.insert(name.clone()) { changes.push(add(&name)); }
                } else {
                    let name = b.skills[idx].name.clone();
                    if used.insert(name.clone()) { changes.push(refine(&name, &word)); }
                }
            }
            let n_add = changes.iter().filter(|c| matches!(c, SkillChange::Add { .. })).count();
            let p = proposal(changes);
            let next = b.apply_proposal(&p, 1, 5).unwrap();
            prop_assert_eq!(next.len(), b.len() + n_add);
            for s in &b.skills {
                if !used.contains(&s.name) {
                    prop_assert_eq!(next.get(&s.name).unwrap(), s);
                }
            }
            prop_assert_eq!(SkillBank::from_json(&next.to_json()).unwrap(), next);
        }
    }
}
