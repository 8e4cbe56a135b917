//! Frozen text and image features behind one interface: a file-backed store
//! of exported embeddings, or a deterministic synthetic generator with
//! planted structure. Nothing here is trainable.

mod store;
mod synthetic;

pub use store::{load_store, EmbeddingStore};
pub use synthetic::{default_lexicon, SyntheticProvider, SyntheticProviderConfig};
pub(crate) use synthetic::tokenize;

use crate::error::Result;
use crate::numeric::Vector;

/// Anything that can be looked up as an image.
pub trait ViewImage {
    fn image_id(&self) -> &str;
    fn planted_label(&self) -> Option<&str>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn text_embed(&self, phrase: &str) -> Result<Vector>;
    fn image_embed(&self, view: &dyn ViewImage) -> Result<Vector>;

    /// Feature the navigator itself sees for a view. Defaults to the image
    /// embedding.
    fn visual_feature(&self, view: &dyn ViewImage) -> Result<Vector> {
        self.image_embed(view)
    }
}

/// Either provider kind, chosen at runtime.
#[derive(Clone, Debug)]
pub enum Provider {
    Store(EmbeddingStore),
    Synthetic(SyntheticProvider),
}

impl EmbeddingProvider for Provider {
    fn dim(&self) -> usize {
        match self {
            Provider::Store(s) => s.dim(),
            Provider::Synthetic(s) => s.dim(),
        }
    }

    fn text_embed(&self, phrase: &str) -> Result<Vector> {
        match self {
            Provider::Store(s) => s.text_embed(phrase),
            Provider::Synthetic(s) => s.text_embed(phrase),
        }
    }

    fn image_embed(&self, view: &dyn ViewImage) -> Result<Vector> {
        match self {
            Provider::Store(s) => s.image_embed(view),
            Provider::Synthetic(s) => s.image_embed(view),
        }
    }

    fn visual_feature(&self, view: &dyn ViewImage) -> Result<Vector> {
        match self {
            Provider::Store(s) => s.visual_feature(view),
            Provider::Synthetic(s) => s.visual_feature(view),
        }
    }
}

/// Builds a synthetic provider.
pub fn make_synthetic(config: SyntheticProviderConfig) -> Result<SyntheticProvider> {
    SyntheticProvider::new(config)
}
