use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

pub const DEFAULT_DEFLECTION: &str = "I'm not able to give medical advice, but I can pass your question along to your healthcare provider so they can help you further.";

/// Prescriptive medication directives. General explanations pass.
pub const DEFAULT_DENY_PATTERNS: &[&str] = &[
    r"\b(take|taking|use|give)\s+(\d+(\.\d+)?|one|two|three|four|half)\s*(mg|mcg|milligrams?|micrograms?|ml|g|grams?|tablets?|pills?|capsules?|doses?|drops?)\b",
    r"\b\d+(\.\d+)?\s*(mg|mcg|milligrams?|micrograms?)\b",
    r"\bevery\s+\d+\s*(hours?|hrs?)\b",
    r"\b(you should|i recommend|i suggest|i advise)\s+(you\s+)?(take|taking|start|stop|increase|decrease|double|skip)\b",
    r"\bstop taking\b",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuardrailVerdict {
    Pass,
    Flagged { pattern: String },
}

#[derive(Debug, Clone)]
pub struct Guardrail {
    patterns: Vec<Regex>,
    deflection: String,
}

impl Default for Guardrail {
    fn default() -> Self {
        Self::new(DEFAULT_DENY_PATTERNS.iter().copied(), DEFAULT_DEFLECTION).expect("builtin patterns compile")
    }
}

impl Guardrail {
    pub fn new<'a>(
        patterns: impl IntoIterator<Item = &'a str>,
        deflection: impl Into<String>,
    ) -> Result<Self, regex::Error> {
        let patterns = patterns
            .into_iter()
            .map(|p| RegexBuilder::new(p).case_insensitive(true).build())
            .collect::<Result<_, _>>()?;
        Ok(Self { patterns, deflection: deflection.into() })
    }

    pub fn check(&self, reply: &str) -> GuardrailVerdict {
        match self.patterns.iter().find(|p| p.is_match(reply)) {
            Some(p) => GuardrailVerdict::Flagged { pattern: p.as_str().to_owned() },
            None => GuardrailVerdict::Pass,
        }
    }

    /// Returns the text to send: the reply itself, or the deflection.
    pub fn enforce(&self, reply: &str) -> (String, GuardrailVerdict) {
        let verdict = self.check(reply);
        match &verdict {
            GuardrailVerdict::Pass => (reply.to_owned(), verdict),
            GuardrailVerdict::Flagged { pattern } => {
                tracing::warn!(pattern = %pattern, "assistant reply replaced by advice deflection");
                (self.deflection.clone(), verdict)
            }
        }
    }

    pub fn deflection(&self) -> &str {
        &self.deflection
    }
}

pub fn guardrail_check(reply: &str) -> GuardrailVerdict {
    Guardrail::default().check(reply)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dosage_instruction_flagged_and_replaced() {
        let g = Guardrail::default();
        let (text, verdict) = g.enforce("Take 400mg ibuprofen every 6 hours");
        assert!(matches!(verdict, GuardrailVerdict::Flagged { .. }));
        assert_eq!(text, DEFAULT_DEFLECTION);
    }

    #[test]
    fn handoff_and_explanations_pass() {
        for reply in [
            "I can pass this information along to the nurse",
            "Hospice care focuses on comfort and quality of life for people with a serious illness.",
            "I'm not a doctor, but it would be best to consult with your healthcare provider about which painkiller to take.",
            "I understand that you're experiencing a fever, coughing, fatigue, and a headache. It's important to consult a healthcare provider for further evaluation.",
            "On a scale of 1 to 10, how would you rate your pain?",
        ] {
            assert_eq!(guardrail_check(reply), GuardrailVerdict::Pass, "{reply}");
        }
    }

    #[test]
    fn other_directives_flagged() {
        for reply in ["You should stop taking aspirin.", "I recommend you take two tablets", "Use 5 ml twice a day"] {
            assert!(matches!(guardrail_check(reply), GuardrailVerdict::Flagged { .. }), "{reply}");
        }
    }
}
