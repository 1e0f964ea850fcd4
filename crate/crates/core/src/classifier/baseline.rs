use async_trait::async_trait;

use super::{ClassifyError, Stage, TraceClassifier};
use crate::gateway::{Gateway, TemplateId};
use crate::model::{Classification, Label, TraceRecord};
use crate::responses::parse_verdict;

const CORRECTNESS: [(&str, Label); 2] = [("correct", Label::Correct), ("incorrect", Label::Incorrect)];

// Continuing to think means the reasoning so far is not yet sound.
const READINESS: [(&str, Label); 6] = [
    ("continue thinking", Label::Incorrect),
    ("continue", Label::Incorrect),
    ("keep thinking", Label::Incorrect),
    ("answer now", Label::Correct),
    ("answer", Label::Correct),
    ("provide an answer", Label::Correct),
];

/// Single-prompt judge. Strategies 0-3 ask correct-or-incorrect (2 and 3
/// frame the trace as a snippet), 4-5 ask continue-or-answer; odd strategies
/// only show the first 75% of the trace's lines.
pub struct BaselineClassifier {
    strategy: u8,
}

impl BaselineClassifier {
    pub fn new(strategy: u8) -> Result<BaselineClassifier, ClassifyError> {
        if strategy > 5 {
            return Err(ClassifyError::Config(format!(
                "baseline strategy {strategy} does not exist"
            )));
        }
        Ok(BaselineClassifier { strategy })
    }

    fn forms(&self) -> &'static [(&'static str, Label)] {
        if self.strategy >= 4 {
            &READINESS
        } else {
            &CORRECTNESS
        }
    }
}

#[async_trait]
impl TraceClassifier for BaselineClassifier {
    fn name(&self) -> String {
        format!("baseline-{}", self.strategy)
    }

    async fn classify(
        &self,
        gateway: &Gateway,
        record: &TraceRecord,
    ) -> Result<Classification, ClassifyError> {
        let mut feedback = String::new();
        let mut last = String::new();
        for _ in 0..2 {
            let request = gateway
                .request(TemplateId::Baseline(self.strategy))
                .var("question", record.question.as_str())
                .var("trace", record.trace.as_str())
                .var(
                    "final_answer",
                    record.final_answer.as_deref().unwrap_or("(see end of reasoning)"),
                )
                .var("feedback", feedback.as_str());
            let reply = gateway
                .complete(request)
                .await
                .map_err(ClassifyError::stage(Stage::Baseline))?;
            if let Some(label) = parse_verdict(&reply.text, self.forms()) {
                return Ok(Classification::verdict(record.id.clone(), label));
            }
            last = reply.text;
            feedback = "\nYour previous reply did not end with a verdict line in the requested form.\n".to_string();
        }
        Err(ClassifyError::Unparseable {
            stage: Stage::Baseline,
            detail: last.chars().take(200).collect(),
        })
    }
}
