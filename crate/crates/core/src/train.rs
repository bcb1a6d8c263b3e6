//! Batching, the growing batch-size schedule and the training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::datagen::UtteranceRecord;
use crate::embed::{splitmix64, ProviderSpec};
use crate::error::{Error, Result};
use crate::eval::{AblationRow, AblationSetting};
use crate::model::{crf_loss, encode, BatchInput, ModelConfig, ModelParams};
use crate::optim::{AdamState, DEFAULT_LR};
use crate::tagger::{pad_batch, EntityTagger, Featurizer, TokenFeatures};
use crate::text::{bilou_encode, Vocabulary, DEFAULT_N_MAX};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_start: usize,
    pub batch_end: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs between dev evaluations; 0 evaluates only after the last one.
    pub eval_every: usize,
    /// `sparse_input_dim` and `dense_dim` are filled in from the features.
    pub model: ModelConfig,
    pub provider: ProviderSpec,
    pub use_lexical: bool,
    pub min_freq: usize,
    pub n_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            batch_start: 64,
            batch_end: 256,
            epochs: 10,
            seed: 0,
            eval_every: 1,
            model: ModelConfig::default(),
            provider: ProviderSpec::None,
            use_lexical: true,
            min_freq: 1,
            n_max: DEFAULT_N_MAX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_start == 0 || self.batch_start > self.batch_end {
            return Err(Error::Config(format!(
                "batch sizes must satisfy 1 <= batch_start <= batch_end, got {} and {}",
                self.batch_start, self.batch_end
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.min_freq == 0 || self.n_max == 0 {
            return Err(Error::Config(
                "min_freq and n_max must be at least 1".into(),
            ));
        }
        // Feature widths are not known yet; check the rest with placeholders.
        ModelConfig {
            sparse_input_dim: 1,
            ..self.model.clone()
        }
        .validate()
    }
}

/// Batch size for `epoch` of `total_epochs`.
///
/// Sizes double from `start` up to `end` (the last step is capped at
/// `end`); the epochs are split into equal segments, one per size. The last
/// epoch of a run with at least two epochs always uses `end`.
pub fn batch_schedule_between(
    epoch: usize,
    total_epochs: usize,
    start: usize,
    end: usize,
) -> usize {
    let mut sizes = vec![start];
    while *sizes.last().expect("non-empty") < end {
        let next = sizes.last().expect("non-empty").saturating_mul(2).min(end);
        sizes.push(next);
    }
    let total = total_epochs.max(1);
    if total > 1 && epoch + 1 >= total {
        return end;
    }
    let segment = (epoch.min(total - 1) * sizes.len()) / total;
    sizes[segment.min(sizes.len() - 1)]
}

/// The 64 → 128 → 256 schedule.
pub fn batch_schedule(epoch: usize, total_epochs: usize) -> usize {
    batch_schedule_between(epoch, total_epochs, 64, 256)
}

/// One training sequence: features and gold tag ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: TokenFeatures,
    pub gold: Vec<usize>,
}

pub fn prepare_examples(
    featurizer: &Featurizer,
    records: &[UtteranceRecord],
) -> Result<Vec<Example>> {
    records
        .iter()
        .filter(|r| !r.tokens.is_empty())
        .map(|r| {
            let tags = bilou_encode(&r.entities, r.tokens.len())?;
            Ok(Example {
                features: featurizer.features(&r.tokens),
                gold: tags.into_iter().map(|t| t.id()).collect(),
            })
        })
        .collect()
}

/// A padded batch with gold tags laid out like the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    /// `batch * width` tag ids, 0 at padding.
    pub gold: Vec<usize>,
    pub lengths: Vec<usize>,
}

pub fn collate(examples: &[&Example], dense_dim: usize) -> Batch {
    let feats: Vec<&TokenFeatures> = examples.iter().map(|e| &e.features).collect();
    let input = pad_batch(&feats, dense_dim);
    let mut gold = Vec::with_capacity(input.batch * input.width);
    for e in examples {
        gold.extend_from_slice(&e.gold);
        gold.extend(std::iter::repeat_n(0, input.width - e.gold.len()));
    }
    let lengths = input.lengths();
    Batch {
        input,
        gold,
        lengths,
    }
}

/// Shuffles, then chunks into groups of `size` (the last may be smaller),
/// padding each to its longest member.
pub fn make_batches(
    examples: &[Example],
    size: usize,
    rng: &mut ChaCha8Rng,
    dense_dim: usize,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order
        .chunks(size.max(1))
        .map(|chunk| {
            let group: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            collate(&group, dense_dim)
        })
        .collect()
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ splitmix64(index)))
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Mean per-sequence loss of a batch, without updating anything.
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let mut g = Graph::eval();
    let vars = g.bind(&params.set)?;
    let enc = encode(&mut g, params, &vars, &batch.input)?;
    let loss = crf_loss(
        &mut g,
        params,
        &vars,
        enc.emissions,
        &batch.gold,
        &batch.lengths,
    )?;
    Ok(g.value(loss).item())
}

/// Forward, backward and one Adam update; returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    batch: &Batch,
    dropout_seed: u64,
) -> Result<f64> {
    let mut g = Graph::train(dropout_seed);
    let vars = g.bind(&params.set)?;
    let enc = encode(&mut g, params, &vars, &batch.input)?;
    let loss = crf_loss(
        &mut g,
        params,
        &vars,
        enc.emissions,
        &batch.gold,
        &batch.lengths,
    )?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let grads = g.backward(loss, &params.set)?;
    adam.step(&mut params.set, &grads)?;
    params.round_to_f32();
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub batch_size: usize,
    /// Mean per-sequence loss over the epoch.
    pub mean_loss: f64,
    pub dev_f1: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.6}\t",
            self.epoch, self.batch_size, self.mean_loss
        )?;
        match self.dev_f1 {
            Some(v) => write!(f, "{v:.6}"),
            None => write!(f, "-"),
        }
    }
}

pub struct TrainOutcome {
    pub tagger: EntityTagger,
    pub log: Vec<EpochLog>,
    /// Entity F1 of the final model on the training records.
    pub train_f1: f64,
}

/// Builds the vocabulary from the training tokens and wires up features.
pub fn build_featurizer(config: &TrainConfig, train: &[UtteranceRecord]) -> Result<Featurizer> {
    let corpus: Vec<&[String]> = train.iter().map(|r| r.tokens.as_slice()).collect();
    let corpus: Vec<Vec<&str>> = corpus
        .iter()
        .map(|t| t.iter().map(String::as_str).collect())
        .collect();
    let vocab = Vocabulary::build(&corpus, config.min_freq, config.n_max)?;
    Featurizer::new(vocab, config.provider.clone(), config.use_lexical)
}

fn records_f1(tagger: &EntityTagger, records: &[UtteranceRecord]) -> Result<f64> {
    let tokens: Vec<Vec<String>> = records.iter().map(|r| r.tokens.clone()).collect();
    let gold: Vec<_> = records.iter().map(|r| r.entities.clone()).collect();
    Ok(tagger.evaluate(&tokens, &gold)?.f1)
}

pub fn train(
    config: &TrainConfig,
    train: &[UtteranceRecord],
    dev: &[UtteranceRecord],
) -> Result<TrainOutcome> {
    train_with(config, train, dev, |_| {})
}

/// Trains a model, calling `on_epoch` with each log line as it is produced.
pub fn train_with(
    config: &TrainConfig,
    train: &[UtteranceRecord],
    dev: &[UtteranceRecord],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let featurizer = build_featurizer(config, train)?;
    let model_config = ModelConfig {
        sparse_input_dim: featurizer.sparse_dim(),
        dense_dim: featurizer.dense_dim(),
        ..config.model.clone()
    };
    let examples = prepare_examples(&featurizer, train)?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dense_dim = featurizer.dense_dim();
    let mut params = ModelParams::init(model_config, config.seed)?;
    let mut adam = AdamState::new(&params.set, config.lr);
    let mut log = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let batch_size =
            batch_schedule_between(epoch, config.epochs, config.batch_start, config.batch_end);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM, epoch as u64));
        let batches = make_batches(&examples, batch_size, &mut rng, dense_dim);
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let dropout_seed = derive_seed(config.seed, DROPOUT_STREAM, step);
            let loss =
                train_step(&mut params, &mut adam, batch, dropout_seed).map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFiniteLoss { epoch, batch: b },
                    other => other,
                })?;
            total += loss * batch.lengths.len() as f64;
            step += 1;
        }
        let last = epoch + 1 == config.epochs;
        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        let dev_f1 = if !dev.is_empty() && (due || last) {
            let tagger = EntityTagger::new(featurizer.clone(), params.clone())?;
            Some(records_f1(&tagger, dev)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            batch_size,
            mean_loss: total / examples.len() as f64,
            dev_f1,
        };
        on_epoch(&entry);
        log.push(entry);
    }

    let tagger = EntityTagger::new(featurizer, params)?;
    let train_f1 = records_f1(&tagger, train)?;
    Ok(TrainOutcome {
        tagger,
        log,
        train_f1,
    })
}

/// Trains one model per setting and scores it on both splits.
pub fn ablation_run(
    base: &TrainConfig,
    settings: &[AblationSetting],
    train_records: &[UtteranceRecord],
    test_records: &[UtteranceRecord],
) -> Result<Vec<AblationRow>> {
    settings
        .iter()
        .map(|setting| {
            let config = TrainConfig {
                use_lexical: setting.use_lexical,
                provider: setting.provider.clone(),
                ..base.clone()
            };
            let outcome = train(&config, train_records, &[])?;
            let score = |records: &[UtteranceRecord]| {
                let tokens: Vec<Vec<String>> = records.iter().map(|r| r.tokens.clone()).collect();
                let gold: Vec<_> = records.iter().map(|r| r.entities.clone()).collect();
                Ok::<_, Error>(
                    outcome
                        .tagger
                        .evaluate(&tokens, &gold)?
                        .with_description(setting.describe()),
                )
            };
            Ok(AblationRow {
                setting: setting.clone(),
                train: score(train_records)?,
                test: score(test_records)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::render_utterance;
    use crate::text::Tag;

    fn records() -> Vec<UtteranceRecord> {
        let items: [&[(&str, &str)]; 6] = [
            &[("seven", "apples")],
            &[("", "milk"), ("two", "fresh garlic")],
            &[("one gallon of", "milk")],
            &[
                ("", "sunflower seeds"),
                ("a pack of", "disposable wipes"),
                ("", "apples"),
            ],
            &[("three", "bananas")],
            &[("", "eggs"), ("", "bread")],
        ];
        items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let mut r = render_utterance(
                    if i % 2 == 0 {
                        "add {items}"
                    } else {
                        "please buy {items} now"
                    },
                    it,
                )
                .unwrap();
                r.id = format!("r{i}");
                r
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_start: 2,
            batch_end: 4,
            seed: 5,
            provider: ProviderSpec::Hash { dim: 4, seed: 1 },
            model: ModelConfig {
                d_model: 8,
                n_heads: 2,
                ff_units: 8,
                n_layers: 1,
                sparse_proj_dim: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(batch_schedule(0, 100), 64);
        assert_eq!(batch_schedule(50, 100), 128);
        assert_eq!(batch_schedule(99, 100), 256);
        assert_eq!(batch_schedule(0, 1), 64);
        assert_eq!(batch_schedule(33, 100), 64);
        assert_eq!(batch_schedule(34, 100), 128);
        assert_eq!(batch_schedule(67, 100), 256);
        assert_eq!((batch_schedule(0, 2), batch_schedule(1, 2)), (64, 256));
        assert_eq!(batch_schedule_between(0, 10, 32, 32), 32);
        assert_eq!(batch_schedule_between(9, 10, 10, 25), 25);
        assert_eq!(batch_schedule_between(5, 10, 10, 25), 20);
        for total in 1..40 {
            let sizes: Vec<usize> = (0..total).map(|e| batch_schedule(e, total)).collect();
            assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(sizes[0], 64);
            if total > 1 {
                assert_eq!(sizes[total - 1], 256);
            }
        }
    }

    fn example(len: usize) -> Example {
        Example {
            features: TokenFeatures {
                bags: vec![vec![(0, 1.0)]; len],
                dense: vec![0.5; len * 2],
            },
            gold: vec![Tag::U.id(); len],
        }
    }

    #[test]
    fn batches_chunk_and_pad() {
        let ex: Vec<Example> = (0..10).map(|i| example(1 + i % 3)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sizes: Vec<usize> = make_batches(&ex, 4, &mut rng, 2)
            .iter()
            .map(|b| b.lengths.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let one = make_batches(&ex[..1], 4, &mut rng, 2);
        assert_eq!(one.len(), 1);
        assert!(one[0].input.keep.iter().all(|k| *k));

        let b = collate(&[&example(3), &example(7)], 2);
        assert_eq!(b.input.width, 7);
        assert_eq!(b.input.keep.iter().filter(|k| !**k).count(), 4);
        assert_eq!(b.gold.len(), 14);
        assert_eq!(&b.gold[3..7], &[0, 0, 0, 0]);
    }

    #[test]
    fn zero_scores_give_uniform_loss() {
        let cfg = tiny_config();
        let recs = records();
        let f = build_featurizer(&cfg, &recs).unwrap();
        let mc = ModelConfig {
            sparse_input_dim: f.sparse_dim(),
            dense_dim: f.dense_dim(),
            ..cfg.model.clone()
        };
        let mut params = ModelParams::init(mc, 1).unwrap();
        let w = params.layout.emission_w;
        params
            .set
            .get_mut(w)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let ex = prepare_examples(&f, &recs).unwrap();
        let refs: Vec<&Example> = ex.iter().collect();
        let batch = collate(&refs, f.dense_dim());
        let mean_len = ex.iter().map(|e| e.gold.len()).sum::<usize>() as f64 / ex.len() as f64;
        let loss = batch_loss(&params, &batch).unwrap();
        assert!((loss - mean_len * 5f64.ln()).abs() <= 1e-9, "{loss}");
    }

    #[test]
    fn padding_does_not_change_the_loss() {
        let cfg = tiny_config();
        let recs = records();
        let f = build_featurizer(&cfg, &recs).unwrap();
        let mc = ModelConfig {
            sparse_input_dim: f.sparse_dim(),
            dense_dim: f.dense_dim(),
            ..cfg.model.clone()
        };
        let params = ModelParams::init(mc, 2).unwrap();
        let ex = prepare_examples(&f, &recs).unwrap();
        let refs: Vec<&Example> = ex.iter().collect();
        let tight = collate(&refs, f.dense_dim());
        // A long all-O example widens the batch; drop it again by scoring
        // only the original sequences against the wider padding.
        let long = Example {
            features: f.features(&vec!["x"; tight.input.width + 5]),
            gold: vec![0; tight.input.width + 5],
        };
        let mut wide_refs = refs.clone();
        wide_refs.push(&long);
        let mut wide = collate(&wide_refs, f.dense_dim());
        assert_eq!(wide.input.width, tight.input.width + 5);
        let n = refs.len();
        let w = wide.input.width;
        wide.input.batch = n;
        wide.input.bags.truncate(n * w);
        wide.input.keep.truncate(n * w);
        wide.input.dense.truncate(n * w * f.dense_dim());
        wide.gold.truncate(n * w);
        wide.lengths.truncate(n);
        let a = batch_loss(&params, &tight).unwrap();
        let b = batch_loss(&params, &wide).unwrap();
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let recs = records();
        let a = train(&cfg, &recs, &recs).unwrap();
        let b = train(&cfg, &recs, &recs).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.tagger.params, b.tagger.params);
        assert_eq!(a.log.len(), 3);
        assert_eq!(
            a.log.iter().map(|l| l.batch_size).collect::<Vec<_>>(),
            vec![2, 2, 4]
        );
        assert!(a
            .log
            .iter()
            .all(|l| l.dev_f1.is_some() && l.mean_loss.is_finite()));
        let c = train(&TrainConfig { seed: 6, ..cfg }, &recs, &recs).unwrap();
        assert_ne!(a.tagger.params, c.tagger.params);
    }

    #[test]
    fn log_line_format() {
        let e = EpochLog {
            epoch: 3,
            batch_size: 64,
            mean_loss: 1.5,
            dev_f1: None,
        };
        assert_eq!(e.to_string(), "3\t64\t1.500000\t-");
        let e = EpochLog {
            dev_f1: Some(0.25),
            ..e
        };
        assert_eq!(e.to_string(), "3\t64\t1.500000\t0.250000");
    }

    #[test]
    fn divergence_aborts_naming_the_batch() {
        let cfg = TrainConfig {
            lr: 1e300,
            ..tiny_config()
        };
        let err = train(&cfg, &records(), &[]).err().expect("must fail");
        assert!(
            matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 1 }),
            "{err}"
        );
        assert!(err.to_string().contains("batch 1"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            epochs: 0,
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_start: 300,
            ..tiny_config()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..tiny_config()
        }
        .validate()
        .is_err());
        let mut c = tiny_config();
        c.model.n_layers = 7;
        assert!(c.validate().unwrap_err().to_string().contains("6"));
    }
}
