//! Featurization of token sequences and inference with a trained model.

use crate::autodiff::Graph;
use crate::crf::{bilou_constraints, ConstraintMask, TagLattice};
use crate::embed::{EmbeddingProvider, ProviderSpec};
use crate::error::{Error, Result};
use crate::eval::{entity_f1, EvalReport};
use crate::model::{encode, BatchInput, ModelParams};
use crate::text::{bilou_decode, featurize, tokenize, EntitySpan, LexicalFlags, Tag, Vocabulary};

/// Model inputs for one token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    /// Active sparse coordinates per token.
    pub bags: Vec<Vec<(usize, f64)>>,
    /// `len * dense_dim` dense values.
    pub dense: Vec<f64>,
}

impl TokenFeatures {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }
}

/// Turns tokens into sparse and dense model inputs.
#[derive(Clone, Debug)]
pub struct Featurizer {
    pub vocab: Vocabulary,
    pub provider_spec: ProviderSpec,
    provider: Option<EmbeddingProvider>,
    pub use_lexical: bool,
}

impl Featurizer {
    pub fn new(vocab: Vocabulary, provider_spec: ProviderSpec, use_lexical: bool) -> Result<Self> {
        let provider = provider_spec.build()?;
        Ok(Featurizer {
            vocab,
            provider_spec,
            provider,
            use_lexical,
        })
    }

    /// Width of the sparse input space `[words | ngrams | lexical]`.
    pub fn sparse_dim(&self) -> usize {
        let lexical = if self.use_lexical {
            LexicalFlags::WIDTH
        } else {
            0
        };
        self.vocab.words().len() + self.vocab.ngrams().len() + lexical
    }

    pub fn dense_dim(&self) -> usize {
        self.provider.as_ref().map_or(0, EmbeddingProvider::dim)
    }

    pub fn features<S: AsRef<str>>(&self, tokens: &[S]) -> TokenFeatures {
        let (nw, ng) = (self.vocab.words().len(), self.vocab.ngrams().len());
        let bags = featurize(tokens, &self.vocab, self.use_lexical)
            .iter()
            .map(|f| f.active(nw, ng))
            .collect();
        let dense = match &self.provider {
            Some(p) => p.embed_sequence(tokens).data,
            None => Vec::new(),
        };
        TokenFeatures { bags, dense }
    }
}

/// Pads sequences to the longest one; padding gets empty bags, zero dense
/// values and `keep = false`.
pub fn pad_batch(seqs: &[&TokenFeatures], dense_dim: usize) -> BatchInput {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let rows = seqs.len() * width;
    let mut bags = Vec::with_capacity(rows);
    let mut dense = Vec::with_capacity(rows * dense_dim);
    let mut keep = Vec::with_capacity(rows);
    for s in seqs {
        bags.extend(s.bags.iter().cloned());
        dense.extend_from_slice(&s.dense);
        keep.extend(std::iter::repeat_n(true, s.len()));
        let pad = width - s.len();
        bags.extend(std::iter::repeat_with(Vec::new).take(pad));
        dense.extend(std::iter::repeat_n(0.0, pad * dense_dim));
        keep.extend(std::iter::repeat_n(false, pad));
    }
    BatchInput {
        batch: seqs.len(),
        width,
        bags,
        dense,
        keep,
    }
}

/// Sequences scored together during inference.
pub const INFERENCE_BATCH: usize = 64;

/// A trained model together with the featurizer it was trained with.
#[derive(Clone, Debug)]
pub struct EntityTagger {
    pub featurizer: Featurizer,
    pub params: ModelParams,
    mask: ConstraintMask,
}

impl EntityTagger {
    pub fn new(featurizer: Featurizer, params: ModelParams) -> Result<Self> {
        let cfg = &params.config;
        if cfg.sparse_input_dim != featurizer.sparse_dim()
            || cfg.dense_dim != featurizer.dense_dim()
        {
            return Err(Error::Config(format!(
                "model expects sparse/dense widths {}/{}, features give {}/{}",
                cfg.sparse_input_dim,
                cfg.dense_dim,
                featurizer.sparse_dim(),
                featurizer.dense_dim()
            )));
        }
        if cfg.n_tags != Tag::COUNT {
            return Err(Error::Config(format!(
                "BILOU tagging needs {} tags, model has {}",
                Tag::COUNT,
                cfg.n_tags
            )));
        }
        Ok(EntityTagger {
            featurizer,
            params,
            mask: bilou_constraints(),
        })
    }

    /// Per-sequence emission lattices for a batch (eval mode).
    pub fn lattices(&self, seqs: &[&TokenFeatures]) -> Result<Vec<TagLattice>> {
        let live: Vec<&TokenFeatures> = seqs.iter().copied().filter(|s| !s.is_empty()).collect();
        let k = self.params.config.n_tags;
        let mut computed = Vec::with_capacity(live.len());
        if !live.is_empty() {
            let input = pad_batch(&live, self.featurizer.dense_dim());
            let mut g = Graph::eval();
            let vars = g.bind(&self.params.set)?;
            let enc = encode(&mut g, &self.params, &vars, &input)?;
            let emissions = g.value(enc.emissions).data();
            let set = &self.params.set;
            let l = &self.params.layout;
            for (b, s) in live.iter().enumerate() {
                let start = b * input.width * k;
                computed.push(TagLattice::new(
                    k,
                    emissions[start..start + s.len() * k].to_vec(),
                    set.get(l.transitions).data().to_vec(),
                    set.get(l.start).data().to_vec(),
                    set.get(l.end).data().to_vec(),
                )?);
            }
        }
        let mut computed = computed.into_iter();
        Ok(seqs
            .iter()
            .map(|s| {
                if s.is_empty() {
                    TagLattice::zeros(0, k)
                } else {
                    computed.next().expect("one lattice per non-empty sequence")
                }
            })
            .collect())
    }

    /// Constrained Viterbi tags for each sequence.
    pub fn tag_batch(&self, seqs: &[&TokenFeatures]) -> Result<Vec<Vec<Tag>>> {
        self.lattices(seqs)?
            .iter()
            .map(|lattice| {
                if lattice.is_empty() {
                    return Ok(Vec::new());
                }
                let (path, _) = lattice.viterbi(Some(&self.mask))?;
                Ok(path
                    .into_iter()
                    .map(|t| Tag::from_id(t).expect("BILOU tag id"))
                    .collect())
            })
            .collect()
    }

    /// Spans for many token sequences, batched; `strict` selects the decode
    /// mode.
    pub fn predict_many<S: AsRef<str>>(
        &self,
        sequences: &[Vec<S>],
        strict: bool,
    ) -> Result<Vec<Vec<EntitySpan>>> {
        let mut out = Vec::with_capacity(sequences.len());
        for chunk in sequences.chunks(INFERENCE_BATCH) {
            let feats: Vec<TokenFeatures> =
                chunk.iter().map(|t| self.featurizer.features(t)).collect();
            let refs: Vec<&TokenFeatures> = feats.iter().collect();
            for tags in self.tag_batch(&refs)? {
                out.push(bilou_decode(&tags, strict)?);
            }
        }
        Ok(out)
    }

    pub fn predict_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<EntitySpan>> {
        let feats = self.featurizer.features(tokens);
        let tags = self.tag_batch(&[&feats])?.pop().unwrap_or_default();
        bilou_decode(&tags, false)
    }

    /// Tokenizes raw text and returns the tokens with the predicted spans.
    pub fn predict(&self, text: &str) -> Result<(Vec<String>, Vec<EntitySpan>)> {
        let tokens = tokenize(text);
        let spans = self.predict_tokens(&tokens)?;
        Ok((tokens, spans))
    }

    /// Entity F1 against gold spans, decoding strictly.
    pub fn evaluate(
        &self,
        sequences: &[Vec<String>],
        gold: &[Vec<EntitySpan>],
    ) -> Result<EvalReport> {
        let predicted = self.predict_many(sequences, true)?;
        entity_f1(&predicted, gold)
    }
}

/// Surface strings of `spans` over `tokens`.
pub fn span_texts<S: AsRef<str>>(tokens: &[S], spans: &[EntitySpan]) -> Vec<String> {
    spans
        .iter()
        .map(|s| {
            tokens[s.start..s.end]
                .iter()
                .map(AsRef::as_ref)
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
