use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use super::{EmbeddingProvider, ViewImage};
use crate::error::{Error, Result};
use crate::numeric::ops::NORM_FLOOR;
use crate::numeric::Vector;

/// File-backed table of exported text and image embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    text: BTreeMap<String, Vector>,
    image: BTreeMap<String, Vector>,
}

/// Map that keeps every entry so duplicate keys can be reported.
struct RawTable(Vec<(String, Vec<f64>)>);

impl<'de> Deserialize<'de> for RawTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawTable;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping ids to float arrays")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawTable, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<f64>>()? {
                    out.push((k, v));
                }
                Ok(RawTable(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    dim: usize,
    #[serde(default = "empty_table")]
    text: RawTable,
    #[serde(default = "empty_table")]
    image: RawTable,
}

fn empty_table() -> RawTable {
    RawTable(Vec::new())
}

#[derive(Serialize)]
struct FileOut<'a> {
    dim: usize,
    text: BTreeMap<&'a str, &'a [f64]>,
    image: BTreeMap<&'a str, &'a [f64]>,
}

pub(crate) fn nfc(s: &str) -> String {
    s.nfc().collect()
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        Ok(EmbeddingStore {
            dim,
            text: BTreeMap::new(),
            image: BTreeMap::new(),
        })
    }

    pub fn text_len(&self) -> usize {
        self.text.len()
    }

    pub fn image_len(&self) -> usize {
        self.image.len()
    }

    pub fn text_keys(&self) -> impl Iterator<Item = &str> {
        self.text.keys().map(String::as_str)
    }

    pub fn image_keys(&self) -> impl Iterator<Item = &str> {
        self.image.keys().map(String::as_str)
    }

    pub fn insert_text(&mut self, phrase: &str, v: Vec<f64>) -> Result<()> {
        let (k, v) = self.validate("text", phrase, v)?;
        if self.text.insert(k.clone(), v).is_some() {
            return Err(Error::invalid(format!("duplicate text record {k:?}")));
        }
        Ok(())
    }

    pub fn insert_image(&mut self, id: &str, v: Vec<f64>) -> Result<()> {
        let (k, v) = self.validate("image", id, v)?;
        if self.image.insert(k.clone(), v).is_some() {
            return Err(Error::invalid(format!("duplicate image record {k:?}")));
        }
        Ok(())
    }

    fn validate(&self, kind: &str, key: &str, v: Vec<f64>) -> Result<(String, Vector)> {
        if v.len() != self.dim {
            return Err(Error::invalid(format!(
                "{kind} record {key:?} has {} values, header dim is {}",
                v.len(),
                self.dim
            )));
        }
        let v = Vector::new(v).map_err(|e| Error::invalid(format!("{kind} record {key:?}: {e}")))?;
        if v.norm() <= NORM_FLOOR {
            return Err(Error::invalid(format!("{kind} record {key:?} has zero norm")));
        }
        Ok((nfc(key), v))
    }

    pub fn from_json_str(s: &str, origin: &Path) -> Result<Self> {
        let raw: RawFile = serde_json::from_str(s).map_err(|e| Error::parse(origin, e))?;
        let mut store = EmbeddingStore::new(raw.dim).map_err(|e| Error::parse(origin, e))?;
        for (k, v) in raw.text.0 {
            store.insert_text(&k, v).map_err(|e| Error::parse(origin, e))?;
        }
        for (k, v) in raw.image.0 {
            store.insert_image(&k, v).map_err(|e| Error::parse(origin, e))?;
        }
        Ok(store)
    }

    pub fn to_json_string(&self) -> String {
        let out = FileOut {
            dim: self.dim,
            text: self.text.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect(),
            image: self.image.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect(),
        };
        serde_json::to_string(&out).expect("store serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    fn lookup<'a>(table: &'a BTreeMap<String, Vector>, kind: &'static str, key: &str) -> Result<&'a Vector> {
        let key = nfc(key);
        table.get(&key).ok_or_else(|| Error::UnknownKey {
            kind,
            nearest: nearest_keys(table.keys().map(String::as_str), &key, 3),
            key,
        })
    }
}

/// Parses and validates an embedding export.
pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_json_str(&s, path)
}

impl EmbeddingProvider for EmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn text_embed(&self, phrase: &str) -> Result<Vector> {
        if phrase.trim().is_empty() {
            return Err(Error::Empty("text_embed phrase"));
        }
        Self::lookup(&self.text, "phrase", phrase).cloned()
    }

    fn image_embed(&self, view: &dyn ViewImage) -> Result<Vector> {
        Self::lookup(&self.image, "image id", view.image_id()).cloned()
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

pub(crate) fn nearest_keys<'a>(keys: impl Iterator<Item = &'a str>, key: &str, n: usize) -> Vec<String> {
    let mut scored: Vec<(usize, &str)> = keys.map(|k| (levenshtein(k, key), k)).collect();
    scored.sort();
    scored.into_iter().take(n).map(|(_, k)| k.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Id(&'static str);
    impl ViewImage for Id {
        fn image_id(&self) -> &str {
            self.0
        }
        fn planted_label(&self) -> Option<&str> {
            None
        }
    }

    const SAMPLE: &str = r#"{"dim":4,
        "text":{"a photo of a kitchen":[0.1,0.2,0.3,0.4],"a photo of a stairs":[1,0,0,0]},
        "image":{"scan1/view0.jpg":[0.5,0.5,0.5,0.5],"scan1/view1.jpg":[0,0,1,0]}}"#;

    fn parse(s: &str) -> Result<EmbeddingStore> {
        EmbeddingStore::from_json_str(s, Path::new("test.json"))
    }

    #[test]
    fn loads_records() {
        let s = parse(SAMPLE).unwrap();
        assert_eq!(s.dim(), 4);
        assert_eq!(s.text_len() + s.image_len(), 4);
        let v = s.text_embed("a photo of a kitchen").unwrap();
        assert_eq!(v.as_slice(), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(s.image_embed(&Id("scan1/view1.jpg")).unwrap().as_slice(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn short_record_names_its_id() {
        let bad = r#"{"dim":4,"text":{},"image":{"img-7":[1,2,3]}}"#;
        let msg = parse(bad).unwrap_err().to_string();
        assert!(msg.contains("img-7"), "{msg}");
    }

    #[test]
    fn duplicate_id_rejected() {
        let bad = r#"{"dim":2,"text":{"x":[1,0],"x":[0,1]},"image":{}}"#;
        let msg = parse(bad).unwrap_err().to_string();
        assert!(msg.contains("duplicate"), "{msg}");
    }

    #[test]
    fn zero_norm_rejected() {
        let bad = r#"{"dim":2,"text":{"x":[0,0]},"image":{}}"#;
        assert!(parse(bad).is_err());
    }

    #[test]
    fn unknown_phrase_lists_nearest() {
        let s = parse(SAMPLE).unwrap();
        match s.text_embed("a photo of a kitchn") {
            Err(Error::UnknownKey { nearest, .. }) => assert_eq!(nearest[0], "a photo of a kitchen"),
            other => panic!("{other:?}"),
        }
        assert!(s.image_embed(&Id("missing.jpg")).is_err());
    }

    #[test]
    fn save_load_round_trip_is_stable() {
        let s = parse(SAMPLE).unwrap();
        let once = s.to_json_string();
        let again = parse(&once).unwrap().to_json_string();
        assert_eq!(once, again);
        assert_eq!(parse(&once).unwrap(), s);
    }

    #[test]
    fn keys_are_nfc_normalized() {
        // "café" with a combining acute accent
        let s = parse("{\"dim\":2,\"text\":{\"cafe\u{301}\":[1,0]},\"image\":{}}").unwrap();
        assert!(s.text_embed("caf\u{e9}").is_ok());
    }
}
