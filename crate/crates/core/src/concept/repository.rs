use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{tokenize, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::numeric::Vector;

pub const PHRASE_TEMPLATE: &str = "a photo of a ";

pub fn concept_phrase(label: &str) -> String {
    format!("{PHRASE_TEMPLATE}{label}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Concept {
    pub label: String,
    pub phrase: String,
    pub text_feature: Vector,
}

/// Object concepts with cached text features, sorted by label.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptRepository {
    concepts: Vec<Concept>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptRecord {
    label: String,
    phrase: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RepositoryFile {
    concepts: Vec<ConceptRecord>,
}

impl ConceptRepository {
    /// Builds a repository from labels directly. Labels must be unique.
    pub fn from_labels<S: AsRef<str>>(labels: &[S], provider: &dyn EmbeddingProvider) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("concept labels"));
        }
        let mut sorted: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate concept label {:?}", w[0])));
        }
        let concepts = sorted
            .into_iter()
            .map(|label| {
                let phrase = concept_phrase(&label);
                let text_feature = provider.text_embed(&phrase)?;
                Ok(Concept { label, phrase, text_feature })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ConceptRepository { concepts })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.concepts.iter().map(|c| c.label.as_str())
    }

    pub fn get(&self, label: &str) -> Option<&Concept> {
        self.concepts
            .binary_search_by(|c| c.label.as_str().cmp(label))
            .ok()
            .map(|i| &self.concepts[i])
    }

    pub fn to_json_string(&self) -> String {
        let file = RepositoryFile {
            concepts: self
                .concepts
                .iter()
                .map(|c| ConceptRecord { label: c.label.clone(), phrase: c.phrase.clone() })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("repository serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    /// Parses an exported repository; text features are recomputed from `provider`.
    pub fn from_json_str(s: &str, origin: &Path, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let file: RepositoryFile = serde_json::from_str(s).map_err(|e| Error::parse(origin, e))?;
        for r in &file.concepts {
            if r.phrase != concept_phrase(&r.label) {
                return Err(Error::parse(
                    origin,
                    format!("concept {:?} has phrase {:?}, expected {:?}", r.label, r.phrase, concept_phrase(&r.label)),
                ));
            }
        }
        let labels: Vec<String> = file.concepts.into_iter().map(|r| r.label).collect();
        ConceptRepository::from_labels(&labels, provider).map_err(|e| match e {
            e @ Error::UnknownKey { .. } => e,
            e => Error::parse(origin, e),
        })
    }

    pub fn load(path: impl AsRef<Path>, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ConceptRepository::from_json_str(&s, path, provider)
    }
}

/// Every lexicon word that occurs in the corpus, deduplicated and sorted.
/// Multi-word lexicon entries match as contiguous token runs.
pub fn build_repository<S: AsRef<str>, L: AsRef<str>>(
    corpus: &[S],
    lexicon: &[L],
    provider: &dyn EmbeddingProvider,
) -> Result<ConceptRepository> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if lexicon.is_empty() {
        return Err(Error::Empty("lexicon"));
    }
    let entries: Vec<Vec<String>> = lexicon
        .iter()
        .map(|l| tokenize(l.as_ref()))
        .filter(|t| !t.is_empty())
        .collect();
    let mut found = BTreeSet::new();
    for line in corpus {
        let tokens = tokenize(line.as_ref());
        for entry in &entries {
            if tokens.windows(entry.len()).any(|w| w == entry.as_slice()) {
                found.insert(entry.join(" "));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::invalid("no lexicon word occurs in the corpus; concept repository would be empty"));
    }
    let labels: Vec<String> = found.into_iter().collect();
    ConceptRepository::from_labels(&labels, provider)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{SyntheticProvider, SyntheticProviderConfig};

    fn provider() -> SyntheticProvider {
        SyntheticProvider::new(SyntheticProviderConfig::default()).unwrap()
    }

    #[test]
    fn single_match() {
        let r = build_repository(&["turn left to the bathroom"], &["bathroom", "stairs"], &provider()).unwrap();
        assert_eq!(r.labels().collect::<Vec<_>>(), ["bathroom"]);
        assert_eq!(r.concepts()[0].phrase, "a photo of a bathroom");
    }

    #[test]
    fn duplicates_collapse() {
        let corpus = ["go up the stairs.", "stairs again, then stop"];
        let r = build_repository(&corpus, &["stairs"], &provider()).unwrap();
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn templated_corpus_count() {
        // objects by hand: kitchen, bedroom, stairs, office
        let corpus = [
            "turn left to the kitchen. stop.",
            "go forward to the bedroom. stop.",
            "go up to the stairs. turn right to the kitchen. stop.",
            "go back to the office. stop.",
            "turn right to the bedroom. go down to the stairs. stop.",
            "go forward to the office. turn left to the kitchen. stop.",
        ];
        let r = build_repository(&corpus, &crate::embedding::default_lexicon(), &provider()).unwrap();
        assert_eq!(r.labels().collect::<Vec<_>>(), ["bedroom", "kitchen", "office", "stairs"]);
    }

    #[test]
    fn no_match_is_error() {
        assert!(build_repository(&["walk ahead"], &["bathroom"], &provider()).is_err());
        assert!(build_repository::<&str, &str>(&[], &["bathroom"], &provider()).is_err());
    }

    #[test]
    fn multiword_entries() {
        let p = SyntheticProvider::new(SyntheticProviderConfig {
            lexicon: vec!["dining room".into(), "room".into()],
            ..Default::default()
        })
        .unwrap();
        let r = build_repository(&["enter the dining room"], &["dining room", "hall"], &p).unwrap();
        assert_eq!(r.labels().collect::<Vec<_>>(), ["dining room"]);
    }

    #[test]
    fn json_round_trip() {
        let p = provider();
        let r = ConceptRepository::from_labels(&["stairs", "gym", "attic"], &p).unwrap();
        let s = r.to_json_string();
        let back = ConceptRepository::from_json_str(&s, Path::new("r.json"), &p).unwrap();
        assert_eq!(back, r);
        assert!(s.contains("\"phrase\": \"a photo of a attic\""));
        let bad = r#"{"concepts":[{"label":"gym","phrase":"gym"}]}"#;
        assert!(ConceptRepository::from_json_str(bad, Path::new("r.json"), &p).is_err());
    }
}
