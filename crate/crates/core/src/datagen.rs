//! Synthetic ordering utterances built from seed templates, quantity phrases
//! and a synonym-augmented product catalog.
//!
//! A record is produced by choosing a template, an item count, distinct
//! products, one surface form per product (its canonical name or any
//! synonym, uniformly) and one quantity phrase per item (the empty phrase
//! included). Items are joined with single spaces and no separator words, so
//! adjacent products are only delimited by quantities, if at all. Gold spans
//! are recorded while rendering, never recovered by searching the text.
//!
//! All randomness comes from ChaCha8 generators seeded with
//! `rand::SeedableRng::seed_from_u64`. Generation runs in shards of
//! [`SHARD_SIZE`] records; shard `k` uses [`shard_seed`]`(seed, k)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::splitmix64;
use crate::error::{Error, Result};
use crate::text::{tokenize, validate_spans, EntitySpan, PUNCTUATION};

pub const ITEMS_PLACEHOLDER: &str = "{items}";
pub const MAX_ITEMS: usize = 10;
pub const SHARD_SIZE: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Product {
    pub canonical: String,
    pub department: String,
    pub synonyms: Vec<String>,
}

impl Product {
    /// Canonical name followed by the synonyms.
    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.canonical.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductCatalog {
    pub entries: Vec<Product>,
}

/// A surface form is usable when tokenizing it changes nothing.
fn is_normalized(surface: &str) -> bool {
    !surface.is_empty() && tokenize(surface).join(" ") == surface
}

impl ProductCatalog {
    /// Validates canonical-name and surface uniqueness and surface form.
    pub fn new(entries: Vec<Product>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut owners: HashMap<&str, &str> = HashMap::new();
        let mut canon = HashSet::new();
        for p in &entries {
            if !canon.insert(p.canonical.as_str()) {
                return Err(Error::Invalid(format!(
                    "duplicate product: {}",
                    p.canonical
                )));
            }
            for s in p.surfaces() {
                if !is_normalized(s) {
                    return Err(Error::Invalid(format!(
                        "bad surface form {s:?} for {}",
                        p.canonical
                    )));
                }
                if let Some(other) = owners.insert(s, &p.canonical) {
                    if other != p.canonical {
                        return Err(Error::Invalid(format!(
                            "surface {s:?} shared by {other} and {}",
                            p.canonical
                        )));
                    }
                }
            }
        }
        Ok(ProductCatalog { entries })
    }

    /// Reads `canonical<TAB>department<TAB>syn1,syn2,...` lines. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut entries: Vec<Product> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut owners: HashMap<String, String> = HashMap::new();
        for (i, line) in input.lines().enumerate() {
            let line_no = i + 1;
            let line =
                line.map_err(|e| Error::format(format!("catalog read error: {e}"), line_no))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::format(
                    "expected canonical, department, synonyms",
                    line_no,
                ));
            }
            let canonical = fields[0].trim().to_owned();
            if !is_normalized(&canonical) {
                return Err(Error::format(
                    format!("bad product name {canonical:?}"),
                    line_no,
                ));
            }
            if seen.insert(canonical.clone(), line_no).is_some() {
                return Err(Error::format(
                    format!("duplicate product: {canonical}"),
                    line_no,
                ));
            }
            let department = fields[1].trim().to_owned();
            if department.is_empty() {
                return Err(Error::format("empty department", line_no));
            }
            let mut synonyms = Vec::new();
            if let Some(raw) = fields.get(2).filter(|s| !s.trim().is_empty()) {
                for syn in raw.split(',') {
                    let syn = syn.trim();
                    if syn.is_empty() {
                        return Err(Error::format("empty synonym", line_no));
                    }
                    if !is_normalized(syn) {
                        return Err(Error::format(format!("bad synonym {syn:?}"), line_no));
                    }
                    synonyms.push(syn.to_owned());
                }
            }
            let product = Product {
                canonical,
                department,
                synonyms,
            };
            for s in product.surfaces() {
                if let Some(other) = owners.insert(s.to_owned(), product.canonical.clone()) {
                    if other != product.canonical {
                        return Err(Error::format(
                            format!("surface {s:?} already used by {other}"),
                            line_no,
                        ));
                    }
                }
            }
            entries.push(product);
        }
        if entries.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        Ok(ProductCatalog { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn surfaces(&self) -> HashSet<&str> {
        self.entries.iter().flat_map(Product::surfaces).collect()
    }
}

/// Splits products into disjoint train/test catalogs.
///
/// The test side gets `round(fraction * len)` products, allocated across
/// departments in proportion to their size (largest remainder first), with
/// every department of two or more products keeping at least one product on
/// each side. Within a department the chosen products are a seeded shuffle.
pub fn split_catalog(
    catalog: &ProductCatalog,
    fraction: f64,
    seed: u64,
) -> Result<(ProductCatalog, ProductCatalog)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction {fraction} must be in (0, 1)"
        )));
    }
    let n = catalog.len();
    if n < 2 {
        return Err(Error::Invalid(
            "catalog needs at least 2 products to split".into(),
        ));
    }
    let mut by_dept: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in catalog.entries.iter().enumerate() {
        by_dept.entry(&p.department).or_default().push(i);
    }
    let target = ((fraction * n as f64).round() as usize).clamp(1, n - 1);

    struct Quota {
        ideal: f64,
        take: usize,
        min: usize,
        max: usize,
    }
    let mut quotas: Vec<Quota> = by_dept
        .values()
        .map(|members| {
            let size = members.len();
            let ideal = fraction * size as f64;
            let (min, max) = if size >= 2 { (1, size - 1) } else { (0, size) };
            Quota {
                ideal,
                take: (ideal.floor() as usize).clamp(min, max),
                min,
                max,
            }
        })
        .collect();
    let mut total: usize = quotas.iter().map(|q| q.take).sum();
    // ties go to the earlier department name
    while total < target {
        let Some(q) = quotas
            .iter_mut()
            .filter(|q| q.take < q.max)
            .reduce(|best, q| {
                if q.ideal - q.take as f64 > best.ideal - best.take as f64 {
                    q
                } else {
                    best
                }
            })
        else {
            break;
        };
        q.take += 1;
        total += 1;
    }
    while total > target {
        let Some(q) = quotas
            .iter_mut()
            .filter(|q| q.take > q.min)
            .reduce(|best, q| {
                if q.ideal - (q.take as f64) < best.ideal - best.take as f64 {
                    q
                } else {
                    best
                }
            })
        else {
            break;
        };
        q.take -= 1;
        total -= 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; n];
    for (members, quota) in by_dept.values().zip(&quotas) {
        let mut sorted = members.clone();
        sorted.sort_by(|&a, &b| {
            catalog.entries[a]
                .canonical
                .cmp(&catalog.entries[b].canonical)
        });
        sorted.shuffle(&mut rng);
        for &i in &sorted[..quota.take] {
            is_test[i] = true;
        }
    }
    let pick = |test: bool| ProductCatalog {
        entries: catalog
            .entries
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == test)
            .map(|(p, _)| p.clone())
            .collect(),
    };
    Ok((pick(false), pick(true)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    pub templates: Vec<String>,
    /// Candidate quantity phrases; always contains the empty phrase.
    pub quantity_phrases: Vec<String>,
}

fn check_template(t: &str) -> std::result::Result<(), String> {
    if t.matches(ITEMS_PLACEHOLDER).count() != 1 {
        return Err(format!(
            "template must contain {ITEMS_PLACEHOLDER} exactly once"
        ));
    }
    if t.chars().any(|c| PUNCTUATION.contains(&c)) {
        return Err("template contains punctuation".into());
    }
    Ok(())
}

impl TemplateSet {
    /// Validates templates and normalizes quantity phrases; the empty phrase
    /// is added when missing.
    pub fn new(templates: Vec<String>, quantities: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Invalid("no templates".into()));
        }
        for (i, t) in templates.iter().enumerate() {
            check_template(t).map_err(|m| Error::format(m, i + 1))?;
        }
        let mut phrases = vec![String::new()];
        for q in quantities {
            let norm = tokenize(&q).join(" ");
            if q.chars().any(|c| PUNCTUATION.contains(&c)) {
                return Err(Error::Invalid(format!(
                    "quantity phrase {q:?} contains punctuation"
                )));
            }
            if !phrases.contains(&norm) {
                phrases.push(norm);
            }
        }
        Ok(TemplateSet {
            templates,
            quantity_phrases: phrases,
        })
    }

    /// One template per line; then one quantity phrase per line. Blank lines
    /// and `#` comments are skipped in both files.
    pub fn load(templates: &Path, quantities: &Path) -> Result<Self> {
        let read_lines = |path: &Path| -> Result<Vec<String>> {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned)
                .collect())
        };
        let t = read_lines(templates)?;
        for (i, line) in t.iter().enumerate() {
            check_template(line).map_err(|m| {
                Error::Invalid(format!("{}: {m} (entry {})", templates.display(), i + 1))
            })?;
        }
        Self::new(t, read_lines(quantities)?)
    }
}

/// One utterance with its gold product spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub entities: Vec<EntitySpan>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    text: String,
    entities: Vec<EntitySpan>,
}

impl UtteranceRecord {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Surface strings of the gold entities.
    pub fn entity_texts(&self) -> Vec<String> {
        self.entities
            .iter()
            .map(|s| self.tokens[s.start..s.end].join(" "))
            .collect()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&JsonRecord {
            id: self.id.clone(),
            text: self.text(),
            entities: self.entities.clone(),
        })?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let raw: JsonRecord = serde_json::from_str(line)?;
        let tokens = tokenize(&raw.text);
        validate_spans(&raw.entities, tokens.len())?;
        Ok(UtteranceRecord {
            id: raw.id,
            tokens,
            entities: raw.entities,
        })
    }
}

pub fn write_jsonl(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        writeln!(out, "{}", r.to_json_line()?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = UtteranceRecord::from_json_line(&line)
            .map_err(|e| Error::format(e.to_string(), i + 1))?;
        records.push(record);
    }
    Ok(records)
}

/// Fills `{items}` with `qty₁ prod₁ qty₂ prod₂ …`, recording a span over
/// each product's tokens. Empty quantity phrases contribute no tokens.
pub fn render_utterance(template: &str, items: &[(&str, &str)]) -> Result<UtteranceRecord> {
    if items.is_empty() || items.len() > MAX_ITEMS {
        return Err(Error::ItemCount(items.len()));
    }
    check_template(template).map_err(Error::Invalid)?;
    let (prefix, suffix) = template
        .split_once(ITEMS_PLACEHOLDER)
        .expect("checked above");
    let mut tokens = tokenize(prefix);
    let mut entities = Vec::with_capacity(items.len());
    for &(quantity, product) in items {
        tokens.extend(tokenize(quantity));
        let product_tokens = tokenize(product);
        if product_tokens.is_empty() {
            return Err(Error::Invalid("empty product surface".into()));
        }
        let start = tokens.len();
        tokens.extend(product_tokens);
        entities.push(EntitySpan::product(start, tokens.len()));
    }
    tokens.extend(tokenize(suffix));
    Ok(UtteranceRecord {
        id: String::new(),
        tokens,
        entities,
    })
}

/// Draws one record: uniform item count in `[min_items, max_items]`,
/// distinct products while the catalog has enough of them, uniform surface
/// form, uniform quantity phrase and template.
pub fn sample_record<R: Rng>(
    rng: &mut R,
    templates: &TemplateSet,
    catalog: &ProductCatalog,
    min_items: usize,
    max_items: usize,
) -> Result<UtteranceRecord> {
    if min_items == 0 || min_items > max_items || max_items > MAX_ITEMS {
        return Err(Error::Config(format!(
            "item bounds [{min_items}, {max_items}] must satisfy 1 <= min <= max <= {MAX_ITEMS}"
        )));
    }
    if catalog.len() < min_items {
        return Err(Error::Invalid(format!(
            "catalog has {} products, fewer than min_items {min_items}",
            catalog.len()
        )));
    }
    let template = &templates.templates[rng.gen_range(0..templates.templates.len())];
    let count = rng.gen_range(min_items..=max_items);
    let chosen: Vec<usize> = if count <= catalog.len() {
        index::sample(rng, catalog.len(), count).into_vec()
    } else {
        (0..count)
            .map(|_| rng.gen_range(0..catalog.len()))
            .collect()
    };
    let mut items = Vec::with_capacity(count);
    for i in chosen {
        let product = &catalog.entries[i];
        let n_surfaces = 1 + product.synonyms.len();
        let surface = product
            .surfaces()
            .nth(rng.gen_range(0..n_surfaces))
            .expect("in range");
        let phrases = &templates.quantity_phrases;
        let quantity = phrases[rng.gen_range(0..phrases.len())].as_str();
        items.push((quantity, surface));
    }
    render_utterance(template, &items)
}

/// Seed of shard `k`: `splitmix64(seed + k * 0x9E3779B97F4A7C15)`.
pub fn shard_seed(seed: u64, shard: u64) -> u64 {
    splitmix64(seed.wrapping_add(shard.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

#[derive(Clone, Debug)]
pub struct GenerateOptions<'a> {
    pub seed: u64,
    pub count: usize,
    pub min_items: usize,
    pub max_items: usize,
    /// Record ids are `<prefix><zero-padded index>`.
    pub id_prefix: &'a str,
}

/// Generates `count` records; shards are independent so any shard can be
/// produced on its own.
pub fn generate_records(
    templates: &TemplateSet,
    catalog: &ProductCatalog,
    opts: &GenerateOptions<'_>,
) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::with_capacity(opts.count);
    let shards = opts.count.div_ceil(SHARD_SIZE);
    for shard in 0..shards {
        let mut rng = ChaCha8Rng::seed_from_u64(shard_seed(opts.seed, shard as u64));
        let begin = shard * SHARD_SIZE;
        let end = (begin + SHARD_SIZE).min(opts.count);
        for i in begin..end {
            let mut r =
                sample_record(&mut rng, templates, catalog, opts.min_items, opts.max_items)?;
            r.id = format!("{}{i:06}", opts.id_prefix);
            records.push(r);
        }
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerationSummary {
    pub records: usize,
    /// `histogram[k]` = number of records with `k` entities.
    pub histogram: Vec<usize>,
}

pub fn entity_histogram(records: &[UtteranceRecord]) -> Vec<usize> {
    let mut histogram = vec![0; MAX_ITEMS + 1];
    for r in records {
        let k = r.entities.len();
        if k >= histogram.len() {
            histogram.resize(k + 1, 0);
        }
        histogram[k] += 1;
    }
    histogram
}

pub fn generate_dataset(
    templates: &TemplateSet,
    catalog: &ProductCatalog,
    opts: &GenerateOptions<'_>,
    out: &Path,
) -> Result<GenerationSummary> {
    if opts.count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let records = generate_records(templates, catalog, opts)?;
    write_jsonl(out, &records)?;
    Ok(GenerationSummary {
        records: records.len(),
        histogram: entity_histogram(&records),
    })
}

/// Entity surface strings shared by two datasets.
pub fn surface_overlap(a: &[UtteranceRecord], b: &[UtteranceRecord]) -> Vec<String> {
    let left: HashSet<String> = a.iter().flat_map(UtteranceRecord::entity_texts).collect();
    let right: HashSet<String> = b.iter().flat_map(UtteranceRecord::entity_texts).collect();
    let mut shared: Vec<String> = left.intersection(&right).cloned().collect();
    shared.sort();
    shared
}
