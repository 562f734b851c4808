use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NO_ERRORS: &str = "No translation errors detected.";
pub const TRIPLE_PATTERN: &str = "(source word → candidate word → reference word)";

/// Which worked examples precede the input block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleSet {
    /// Only the groundbreaking/einfache example.
    Single,
    /// That example plus one with no errors, which shows the sentinel.
    #[default]
    WithNoError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub source_lang: String,
    pub target_lang: String,
    pub source: String,
    pub candidate: String,
    pub reference: String,
    #[serde(default)]
    pub examples: ExampleSet,
}

impl AnnotationRequest {
    pub fn validate(&self) -> Result<()> {
        for (name, text) in [("source", &self.source), ("candidate", &self.candidate), ("reference", &self.reference)] {
            if text.trim().is_empty() {
                return Err(Error::Validation(format!("annotation request has an empty {name} sentence")));
            }
            if text.contains('\n') {
                return Err(Error::Validation(format!("annotation request {name} sentence spans several lines")));
            }
        }
        Ok(())
    }
}

const HEADER: &str = "Task:
Identify and list all single-word translation errors in a machine-translated sentence.

Instructions:
1. Identify Mistranslations: Compare each word in the candidate sentence with the source and reference sentences to find clear translation errors.
2. Focus on Single-Word Errors: Report errors at the word level. If a multi-word phrase is mistranslated, extract the most significant word.
3. Prioritize Meaningful Errors: Report only errors that significantly change meaning. Ignore acceptable variations, such as near-synonyms.
4. Ensure Contextual Accuracy: Identify words that, while potentially valid in isolation, do not fit the intended meaning in context.
5. Handle Ambiguity Carefully: Mark an error only if the candidate word is demonstrably incorrect when compared to the source and reference.

Strict Adherence Required: Always follow the output format exactly, and include detailed explanations that refer back to the instructions.

Output Format:
List each mistranslation as a triple in the following format:
(source word → candidate word → reference word)
If there are no translation errors, output:
No translation errors detected.
";

const EXAMPLE_1: &str = "Example 1:

Input:
Source Language: English
Target Language: German
Source Sentence: The scientist presented a groundbreaking discovery.
Candidate Translation: Der Wissenschaftler präsentierte eine einfache Entdeckung.
Reference Translation: Der Wissenschaftler präsentierte eine bahnbrechende Entdeckung.

Expected Output:
groundbreaking → einfache → bahnbrechende
Explanation: \"einfache\" (simple) is a mistranslation of \"groundbreaking\", which significantly changes the meaning of the sentence. This violates the Prioritize Meaningful Errors rule because it downplays the significance of the discovery.
";

const EXAMPLE_2: &str = "Example 2:

Input:
Source Language: English
Target Language: German
Source Sentence: The children played in the garden all afternoon.
Candidate Translation: Die Kinder spielten den ganzen Nachmittag im Garten.
Reference Translation: Die Kinder haben den ganzen Nachmittag im Garten gespielt.

Expected Output:
No translation errors detected.
Explanation: The candidate uses a different tense and word order than the reference, but every word keeps the meaning of the source. Under the Prioritize Meaningful Errors rule these are acceptable variations, so nothing is reported.
";

/// Renders the full detection prompt. Deterministic in the request.
pub fn build_prompt(request: &AnnotationRequest) -> String {
    let mut out = String::with_capacity(4096);
    out.push_str(HEADER);
    out.push('\n');
    out.push_str(EXAMPLE_1);
    if request.examples == ExampleSet::WithNoError {
        out.push('\n');
        out.push_str(EXAMPLE_2);
    }
    out.push('\n');
    out.push_str("Input:\n");
    out.push_str(&format!("Source Language: {}\n", request.source_lang.trim()));
    out.push_str(&format!("Target Language: {}\n", request.target_lang.trim()));
    out.push_str(&format!("Source Sentence: {}\n", request.source.trim()));
    out.push_str(&format!("Candidate Translation: {}\n", request.candidate.trim()));
    out.push_str(&format!("Reference Translation: {}\n", request.reference.trim()));
    out.push_str("\nOutput:\n");
    out
}

/// Value of the last `label: value` line in a prompt, i.e. the one from the
/// input block rather than from a worked example.
pub fn last_field<'p>(prompt: &'p str, label: &str) -> Option<&'p str> {
    prompt.lines().rev().find_map(|l| l.strip_prefix(label)?.strip_prefix(':').map(str::trim))
}
