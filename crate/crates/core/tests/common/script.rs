//! Substrings that identify which prompt a scripted conversation answers.

use lithe_core::prompts::{PromptId, PromptLibrary};

pub fn marker(id: PromptId) -> String {
    match id {
        PromptId::B1 => "improve its performance.\n\n".into(),
        PromptId::B2 => "semantic and functional equivalence".into(),
        PromptId::B3 => "working step by step".into(),
        PromptId::B4 => "list the potential inefficiencies".into(),
        PromptId::Repair => "is not accepted by the database".into(),
        PromptId::Classify => "RULE: <id>".into(),
        rule => format!(
            "Rule: {}",
            PromptLibrary::builtin().rule(rule).unwrap().text
        ),
    }
}

/// User turns a prompt takes before its answer is read.
pub fn turns(id: PromptId) -> usize {
    if id.iterative() {
        3
    } else {
        1
    }
}
