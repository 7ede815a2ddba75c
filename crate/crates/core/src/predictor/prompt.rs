use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{ChoiceRecord, RecordKey};
use crate::delay::DelayEvent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub system_preamble: String,
    pub dataset_description: String,
    pub task_description: String,
    pub cot_questions: Vec<String>,
    pub output_format_instruction: String,
    /// Appended when re-asking for cases whose answers could not be parsed.
    pub strict_reformat_instruction: String,
    pub max_cases: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system_preamble: "You are a member of the operations staff of an urban rail transit (URT) system. \
                You study how regular metro passengers respond when a train delay disrupts their usual trip."
                .into(),
            dataset_description: "Each case is one regular passenger whose habitual metro trip overlaps a recorded \
                train delay in both space and time. Each case has five features:\n\
                - v1 delay_type: cause of the delay (Vehicle Fault, Signaling Fault, Power Fault, Improper Operation, Others).\n\
                - v2 delay_period: when the delay started (MorningPeak, EveningPeak, OffPeak).\n\
                - p1 trip_duration: average travel time in minutes over the trips of the affected travel pattern.\n\
                - p2 started_before_delay: whether the passenger had already tapped in for this trip when the delay began.\n\
                - p3 urgency: standard deviation in minutes of the passenger's entry times for the affected travel pattern. \
                A smaller standard deviation means a more fixed schedule, so the passenger is more likely to be urgent."
                .into(),
            task_description: "For every case, predict whether the passenger will WAIT (still make the trip by metro \
                once service allows) or ABANDON (give up the metro and use another mode)."
                .into(),
            cot_questions: vec![
                "How severely does this delay intersect this passenger's planned trip in space and time?".into(),
                "How urgent or inflexible is this passenger, given p3 and p1?".into(),
                "Given p2 and the delay period, is waiting cheaper than switching modes?".into(),
            ],
            output_format_instruction: "Think through the reasoning steps for each case, then give every case its \
                own answer in exactly this form:\n\
                Case <n>: CHOICE: WAIT or CHOICE: ABANDON\n\
                REASON: <one sentence>"
                .into(),
            strict_reformat_instruction: "Your previous answer for the cases below could not be used. Reply with \
                nothing except, for each case, one line `Case <n>: CHOICE: WAIT` or `Case <n>: CHOICE: ABANDON` \
                followed by one line `REASON: <one sentence>`."
                .into(),
            max_cases: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptCase {
    /// Dense numbering from 1.
    pub number: usize,
    pub key: RecordKey,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_preamble: String,
    pub dataset_description: String,
    pub task_description: String,
    pub event_summary: String,
    pub cot_questions: [String; 3],
    pub cases: Vec<PromptCase>,
    pub output_format_instruction: String,
    pub strict_reformat_instruction: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("oversized batch: {size} cases, at most {max} allowed")]
    OversizedBatch { size: usize, max: usize },
    #[error("template needs exactly 3 reasoning sub-questions, got {0}")]
    CotCount(usize),
    #[error("no delay event with id {0}")]
    UnknownEvent(u32),
    #[error("case for card {card_id} belongs to event {found}, batch is for event {expected}")]
    EventMismatch { card_id: String, found: u32, expected: u32 },
}

/// Serializes one record's features. The label is never rendered.
pub fn render_case(number: usize, r: &ChoiceRecord) -> String {
    format!(
        "Case {number}: delay_type={}; delay_period={}; trip_duration={:.2}; started_before_delay={}; urgency={:.2}",
        r.v1, r.v2, r.p1, r.p2, r.p3
    )
}

pub fn build_prompt(
    records: &[ChoiceRecord],
    event: &DelayEvent,
    template: &PromptTemplate,
) -> Result<PromptBundle, PromptError> {
    if records.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    if records.len() > template.max_cases {
        return Err(PromptError::OversizedBatch { size: records.len(), max: template.max_cases });
    }
    let cot: [String; 3] = template
        .cot_questions
        .clone()
        .try_into()
        .map_err(|v: Vec<String>| PromptError::CotCount(v.len()))?;
    if let Some(r) = records.iter().find(|r| r.event_id != event.event_id) {
        return Err(PromptError::EventMismatch {
            card_id: r.card_id.clone(),
            found: r.event_id,
            expected: event.event_id,
        });
    }
    let cases = records
        .iter()
        .enumerate()
        .map(|(i, r)| PromptCase { number: i + 1, key: r.key(), text: render_case(i + 1, r) })
        .collect();
    Ok(PromptBundle {
        system_preamble: template.system_preamble.clone(),
        dataset_description: template.dataset_description.clone(),
        task_description: template.task_description.clone(),
        event_summary: event.summary(),
        cot_questions: cot,
        cases,
        output_format_instruction: template.output_format_instruction.clone(),
        strict_reformat_instruction: template.strict_reformat_instruction.clone(),
    })
}

impl PromptBundle {
    pub fn render(&self) -> String {
        self.render_cases(self.cases.iter(), false)
    }

    /// Re-asks only the given case numbers, with the stricter instruction.
    pub fn render_retry(&self, numbers: &[usize]) -> String {
        self.render_cases(self.cases.iter().filter(|c| numbers.contains(&c.number)), true)
    }

    fn render_cases<'a>(&self, cases: impl Iterator<Item = &'a PromptCase>, strict: bool) -> String {
        let mut s = String::new();
        s.push_str(&self.system_preamble);
        s.push_str("\n\n## Dataset\n");
        s.push_str(&self.dataset_description);
        s.push_str("\n\n## Delay event\n");
        s.push_str(&self.event_summary);
        s.push_str("\n\n## Task\n");
        s.push_str(&self.task_description);
        s.push_str("\n\n## Reasoning steps\n");
        for (i, q) in self.cot_questions.iter().enumerate() {
            s.push_str(&format!("Sub-question {}: {q}\n", i + 1));
        }
        s.push_str("\n## Cases\n");
        for c in cases {
            s.push_str(&c.text);
            s.push('\n');
        }
        s.push_str("\n## Output format\n");
        s.push_str(&self.output_format_instruction);
        s.push('\n');
        if strict {
            s.push('\n');
            s.push_str(&self.strict_reformat_instruction);
            s.push('\n');
        }
        s
    }
}
