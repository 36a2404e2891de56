//! Clinical-note parsing. Sections may come in any order; labels must be
//! exactly the ones the prompt asks for (case and surrounding whitespace
//! aside).

use crate::domain::{ClinicalSummary, SessionId, SymptomDetail};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    ChiefConcern,
    SymptomDetails,
    PatientQuestions,
    AdditionalNotes,
}

const LABELS: [(&str, Section); 4] = [
    ("chief concern:", Section::ChiefConcern),
    ("symptom details:", Section::SymptomDetails),
    ("patient questions:", Section::PatientQuestions),
    ("additional notes:", Section::AdditionalNotes),
];

fn label_of(line: &str) -> Option<(Section, &str)> {
    let trimmed = line.trim_start();
    LABELS.iter().find_map(|(label, section)| {
        let head = trimmed.get(..label.len())?;
        head.eq_ignore_ascii_case(label).then(|| (*section, trimmed[label.len()..].trim()))
    })
}

fn item(line: &str) -> Option<String> {
    let t = line.trim();
    let t = t.strip_prefix("- ").or_else(|| t.strip_prefix("* ")).or_else(|| t.strip_prefix("• ")).unwrap_or(t).trim();
    if t.is_empty() || t.eq_ignore_ascii_case("none") || t == "-" {
        None
    } else {
        Some(t.to_owned())
    }
}

fn detail(text: &str) -> SymptomDetail {
    match text.split_once(':') {
        Some((label, value)) => SymptomDetail { label: label.trim().to_owned(), value: value.trim().to_owned() },
        None => SymptomDetail { label: text.to_owned(), value: String::new() },
    }
}

/// Parses model output into a summary. Output with no recognizable
/// section yields empty fields and `parse_warning`; a partially labelled
/// note keeps what it has and also sets the flag.
pub fn parse_summary(session_id: &SessionId, raw: &str) -> ClinicalSummary {
    let mut chief = Vec::new();
    let mut details = Vec::new();
    let mut questions = Vec::new();
    let mut notes = Vec::new();
    let mut seen = Vec::new();
    let mut current = None;

    for line in raw.lines() {
        let content = match label_of(line) {
            Some((section, rest)) => {
                seen.push(section);
                current = Some(section);
                rest
            }
            None => line,
        };
        let Some(section) = current else { continue };
        match section {
            Section::ChiefConcern => {
                let t = content.trim();
                if !t.is_empty() {
                    chief.push(t.to_owned());
                }
            }
            Section::SymptomDetails => details.extend(item(content).map(|t| detail(&t))),
            Section::PatientQuestions => questions.extend(item(content)),
            Section::AdditionalNotes => notes.extend(item(content)),
        }
    }

    let complete = LABELS.iter().all(|(_, s)| seen.iter().filter(|x| *x == s).count() == 1);
    ClinicalSummary {
        session_id: session_id.clone(),
        chief_concern: chief.join(" "),
        symptom_details: details,
        patient_questions: questions,
        additional_notes: notes,
        raw_model_output: raw.to_owned(),
        parse_warning: !complete,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOTE: &str = "Chief concern: Knee pain after surgery.\nSymptom details:\n- Pain level: 2\n- Location: left knee\nPatient questions:\n- Which painkiller should he use?\nAdditional notes:\n- None";

    #[test]
    fn parses_all_sections() {
        let s = parse_summary(&SessionId::new("s"), NOTE);
        assert_eq!(s.chief_concern, "Knee pain after surgery.");
        assert_eq!(s.symptom_details[0], SymptomDetail { label: "Pain level".into(), value: "2".into() });
        assert_eq!(s.patient_questions, ["Which painkiller should he use?"]);
        assert!(s.additional_notes.is_empty());
        assert!(!s.parse_warning);
        assert_eq!(s.raw_model_output, NOTE);
    }

    #[test]
    fn section_order_does_not_matter() {
        let sections: Vec<&str> = vec![
            "Patient questions:\n- Which painkiller should he use?",
            "Additional notes:\n- None",
            "Symptom details:\n- Pain level: 2\n- Location: left knee",
            "Chief concern: Knee pain after surgery.",
        ];
        let a = parse_summary(&SessionId::new("s"), NOTE);
        let b = parse_summary(&SessionId::new("s"), &sections.join("\n"));
        assert_eq!(
            (a.chief_concern, a.symptom_details, a.patient_questions, a.additional_notes),
            (b.chief_concern, b.symptom_details, b.patient_questions, b.additional_notes)
        );
    }

    #[test]
    fn free_text_degrades() {
        let s = parse_summary(&SessionId::new("s"), "The patient seems fine overall.");
        assert!(s.parse_warning);
        assert!(s.chief_concern.is_empty() && s.symptom_details.is_empty() && s.patient_questions.is_empty());
        assert_eq!(s.raw_model_output, "The patient seems fine overall.");
    }

    #[test]
    fn labels_are_strict() {
        let s = parse_summary(&SessionId::new("s"), "Main concern: pain\nSymptoms:\n- pain: 2");
        assert!(s.parse_warning);
        assert!(s.symptom_details.is_empty());
    }

    #[test]
    fn labels_are_case_insensitive() {
        let s = parse_summary(&SessionId::new("s"), &NOTE.to_uppercase());
        assert!(!s.parse_warning);
        assert_eq!(s.symptom_details.len(), 2);
    }
}
