//! Fixed inputs for the golden prompt fixtures.

#![allow(dead_code)]

use skillmem::designer::{build_analysis_prompt, build_refinement_prompt, render_feedback, FeedbackEntry, HardCase};
use skillmem::embedding::EmbeddingVector;
use skillmem::executor::build_executor_prompt;
use skillmem::memory_bank::{Retrieved, RetrievedSet};
use skillmem::skill_bank::{Origin, Skill, SkillBank, UpdateType};

pub fn fixture(name: &str) -> String {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn skill(name: &str, description: &str, template: &str, update_type: UpdateType) -> Skill {
    Skill {
        name: name.into(),
        description: description.into(),
        instruction_template: template.into(),
        update_type,
        origin: Origin::Initial,
        created_step: 0,
    }
}

fn bank() -> SkillBank {
    SkillBank::new(
        2,
        vec![
            skill(
                "merge_updates",
                "Merges new details into existing memories.",
                "Skill: Merge Updates\nPurpose: Fold new details into an existing memory.\nAction type: UPDATE only.",
                UpdateType::Update,
            ),
            skill(
                "capture_dates",
                "Records dates and times of events.",
                "Skill: Capture Dates\nPurpose: Record when events happen.\nAction type: INSERT only.",
                UpdateType::Insert,
            ),
        ],
    )
    .unwrap()
}

fn feedback() -> String {
    render_feedback(
        &[FeedbackEntry {
            round: 1,
            summary: "Added capture_dates".into(),
            changes: vec!["add capture_dates".into()],
            outcome: Some(0.5),
            kept: Some(true),
        }],
        5,
    )
}

fn case(query: &str, truth: &str, prediction: &str, memories: &[&str], reward: f64, failures: u32) -> HardCase {
    HardCase {
        query_id: query.into(),
        query: query.into(),
        query_embedding: EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
        ground_truth: truth.into(),
        prediction: prediction.into(),
        retrieved_ids: (0..memories.len() as u64).collect(),
        retrieved_memories: memories.iter().map(|m| m.to_string()).collect(),
        reward,
        failure_count: failures,
        last_seen_step: 10,
    }
}

pub fn executor_prompt() -> String {
    let b = bank();
    let retrieved = RetrievedSet {
        items: vec![
            Retrieved { local_index: 0, item_id: 7, text: "Alice lives in Porto".into(), score: 0.9 },
            Retrieved { local_index: 1, item_id: 3, text: "Bob likes jazz".into(), score: 0.1 },
        ],
    };
    let skills: Vec<&Skill> = b.skills.iter().collect();
    build_executor_prompt("Alice: I moved to Lisbon in May.\nBob: Nice!", &retrieved, &skills).unwrap()
}

pub fn analysis_prompt() -> String {
    let cases = [
        case("Where does Alice live?", "Lisbon", "Porto", &["Alice lives in Porto"], 0.0, 2),
        case("When did Alice move?", "May", "unknown", &[], 0.25, 1),
    ];
    build_analysis_prompt(&bank(), &feedback(), &cases, 3)
}

pub fn refinement_prompt() -> String {
    let analysis = r#"{"failure_patterns": [], "recommendations": [], "summary": "Relocations are not stored."}"#;
    build_refinement_prompt(analysis, &bank(), &feedback(), 3)
}

/// (fixture name, rendered prompt) for every golden file.
pub fn golden_cases() -> [(&'static str, String); 3] {
    [
        ("executor_prompt.txt", executor_prompt()),
        ("designer_analysis_prompt.txt", analysis_prompt()),
        ("designer_refinement_prompt.txt", refinement_prompt()),
    ]
}
