//! Multivariate heterogeneous time series organized in temporal blocks, and
//! the library of aligned (past, future) sequence pairs built from them.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Slot value stored for an invalid symbolic sample.
pub const MISSING_SYMBOL: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    /// Real vector of fixed dimension.
    Real { dim: usize },
    /// Symbol drawn from a finite alphabet; samples store the alphabet index.
    Symbol { alphabet: Vec<String> },
}

impl SourceKind {
    pub fn scalar() -> Self {
        SourceKind::Real { dim: 1 }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, SourceKind::Real { .. })
    }

    pub fn dim(&self) -> usize {
        match self {
            SourceKind::Real { dim } => *dim,
            SourceKind::Symbol { .. } => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub name: String,
    #[serde(flatten)]
    pub kind: SourceKind,
    #[serde(default)]
    pub units: String,
}

impl SourceMeta {
    pub fn real(name: impl Into<String>, dim: usize) -> Self {
        SourceMeta {
            name: name.into(),
            kind: SourceKind::Real { dim },
            units: String::new(),
        }
    }

    pub fn symbol(name: impl Into<String>, alphabet: Vec<String>) -> Self {
        SourceMeta {
            name: name.into(),
            kind: SourceKind::Symbol { alphabet },
            units: String::new(),
        }
    }
}

/// Per-source sample storage for one block.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceData<T> {
    /// Row-major `length × dim` values; invalid rows hold NaN.
    Real(Vec<T>),
    /// Alphabet indices; invalid samples hold [`MISSING_SYMBOL`].
    Symbol(Vec<u32>),
}

/// Borrowed view of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sample<'a, T> {
    Real(&'a [T]),
    Symbol(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    length: usize,
    values: Vec<SourceData<T>>,
    valid: Vec<Vec<bool>>,
    imputed: Vec<Vec<bool>>,
}

impl<T: Real> Block<T> {
    /// Builds a block from per-source data and validity flags. Invalid slots
    /// are overwritten with the missing sentinel.
    pub fn new(mut values: Vec<SourceData<T>>, valid: Vec<Vec<bool>>) -> Result<Self> {
        if values.len() != valid.len() {
            return Err(Error::Config(format!(
                "block has {} value arrays but {} validity arrays",
                values.len(),
                valid.len()
            )));
        }
        let length = valid.first().map_or(0, Vec::len);
        for (d, (data, flags)) in values.iter_mut().zip(&valid).enumerate() {
            if flags.len() != length {
                return Err(Error::Config(format!(
                    "source {d}: validity array has length {} (expected {length})",
                    flags.len()
                )));
            }
            match data {
                SourceData::Real(v) => {
                    let tiles = if length == 0 {
                        v.is_empty()
                    } else {
                        v.len() % length == 0
                    };
                    if !tiles {
                        return Err(Error::Config(format!(
                            "source {d}: {} values do not tile {length} samples",
                            v.len()
                        )));
                    }
                    let dim = v.len().checked_div(length).unwrap_or(1);
                    for (t, ok) in flags.iter().enumerate() {
                        if !ok {
                            v[t * dim..(t + 1) * dim].fill(T::lit(f64::NAN));
                        }
                    }
                }
                SourceData::Symbol(v) => {
                    if v.len() != length {
                        return Err(Error::Config(format!(
                            "source {d}: {} symbols for {length} samples",
                            v.len()
                        )));
                    }
                    for (t, ok) in flags.iter().enumerate() {
                        if !ok {
                            v[t] = MISSING_SYMBOL;
                        }
                    }
                }
            }
        }
        let imputed = valid.iter().map(|f| vec![false; f.len()]).collect();
        Ok(Block {
            length,
            values,
            valid,
            imputed,
        })
    }

    /// Scalar real sources given column-wise; NaN entries become invalid samples.
    pub fn from_scalar_columns(columns: Vec<Vec<T>>) -> Result<Self> {
        let valid = columns
            .iter()
            .map(|c| c.iter().map(|x| x.is_finite()).collect())
            .collect();
        Block::new(columns.into_iter().map(SourceData::Real).collect(), valid)
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn data(&self, source: usize) -> &SourceData<T> {
        &self.values[source]
    }

    pub fn valid(&self, source: usize) -> &[bool] {
        &self.valid[source]
    }

    pub fn imputed(&self, source: usize) -> &[bool] {
        &self.imputed[source]
    }

    pub fn is_valid(&self, source: usize, t: usize) -> bool {
        self.valid[source][t]
    }

    /// True when every source holds a valid sample at `t`.
    pub fn all_valid_at(&self, t: usize) -> bool {
        self.valid.iter().all(|v| v[t])
    }

    pub fn sample(&self, source: usize, t: usize) -> Sample<'_, T> {
        match &self.values[source] {
            SourceData::Real(v) => {
                let dim = v.len() / self.length;
                Sample::Real(&v[t * dim..(t + 1) * dim])
            }
            SourceData::Symbol(v) => Sample::Symbol(v[t]),
        }
    }

    /// Writes an imputed real value into a currently invalid slot.
    pub(crate) fn impute_real(&mut self, source: usize, t: usize, value: &[T]) {
        debug_assert!(!self.valid[source][t]);
        if let SourceData::Real(v) = &mut self.values[source] {
            let dim = v.len() / self.length;
            v[t * dim..(t + 1) * dim].copy_from_slice(value);
            self.valid[source][t] = true;
            self.imputed[source][t] = true;
        }
    }

    pub(crate) fn set_imputed_flags(&mut self, source: usize, flags: Vec<bool>) {
        self.imputed[source] = flags;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiSeries<T> {
    sources: Vec<SourceMeta>,
    blocks: Vec<Block<T>>,
    block_ids: Vec<String>,
}

impl<T: Real> MultiSeries<T> {
    pub fn new(sources: Vec<SourceMeta>, blocks: Vec<Block<T>>) -> Result<Self> {
        let ids = (0..blocks.len()).map(|k| k.to_string()).collect();
        Self::with_block_ids(sources, blocks, ids)
    }

    pub fn with_block_ids(sources: Vec<SourceMeta>, blocks: Vec<Block<T>>, block_ids: Vec<String>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("a series needs at least one source".into()));
        }
        if block_ids.len() != blocks.len() {
            return Err(Error::Config("one block id is required per block".into()));
        }
        for (k, block) in blocks.iter().enumerate() {
            if block.values.len() != sources.len() {
                return Err(Error::Config(format!(
                    "block {k} has {} sources, series declares {}",
                    block.values.len(),
                    sources.len()
                )));
            }
            for (meta, data) in sources.iter().zip(&block.values) {
                let ok = match (&meta.kind, data) {
                    (SourceKind::Real { dim }, SourceData::Real(v)) => v.len() == dim * block.length,
                    (SourceKind::Symbol { alphabet }, SourceData::Symbol(v)) => {
                        v.iter().all(|&s| s == MISSING_SYMBOL || (s as usize) < alphabet.len())
                    }
                    _ => false,
                };
                if !ok {
                    return Err(Error::SourceKind {
                        source_name: meta.name.clone(),
                        msg: format!("block {k} data does not match the declared kind"),
                    });
                }
            }
        }
        Ok(MultiSeries {
            sources,
            blocks,
            block_ids,
        })
    }

    /// Single-block series of scalar real sources; NaN marks a missing sample.
    pub fn from_scalar_columns(names: &[&str], columns: Vec<Vec<T>>) -> Result<Self> {
        let sources = names.iter().map(|n| SourceMeta::real(*n, 1)).collect();
        Self::new(sources, vec![Block::from_scalar_columns(columns)?])
    }

    pub fn sources(&self) -> &[SourceMeta] {
        &self.sources
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &Block<T> {
        &self.blocks[k]
    }

    pub(crate) fn block_mut(&mut self, k: usize) -> &mut Block<T> {
        &mut self.blocks[k]
    }

    pub fn block_ids(&self) -> &[String] {
        &self.block_ids
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }

    /// Standard deviation of a real source over its valid samples, pooled over
    /// vector components and blocks.
    pub fn source_std(&self, source: usize) -> Option<T> {
        let mut n = 0usize;
        let mut mean = T::zero();
        let mut m2 = T::zero();
        for block in &self.blocks {
            if let SourceData::Real(v) = &block.values[source] {
                let dim = self.sources[source].kind.dim();
                for t in 0..block.length {
                    if !block.valid[source][t] {
                        continue;
                    }
                    for &x in &v[t * dim..(t + 1) * dim] {
                        n += 1;
                        let delta = x - mean;
                        mean += delta / T::lit(n as f64);
                        m2 += delta * (x - mean);
                    }
                }
            } else {
                return None;
            }
        }
        (n > 1).then(|| (m2 / T::lit(n as f64)).sqrt())
    }
}

/// History length, either shared by all sources or given per source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HistoryLength {
    Uniform(usize),
    PerSource(Vec<usize>),
}

impl HistoryLength {
    fn resolve(&self, n_sources: usize, what: &str) -> Result<Vec<usize>> {
        let lens = match self {
            HistoryLength::Uniform(l) => vec![*l; n_sources],
            HistoryLength::PerSource(v) => {
                if v.len() != n_sources {
                    return Err(Error::Config(format!(
                        "{what}: {} lengths given for {n_sources} sources",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if lens.contains(&0) {
            return Err(Error::Config(format!("{what}: lengths must be at least 1")));
        }
        Ok(lens)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryConfig {
    pub past_len: HistoryLength,
    pub future_len: HistoryLength,
}

impl LibraryConfig {
    pub fn uniform(past: usize, future: usize) -> Self {
        LibraryConfig {
            past_len: HistoryLength::Uniform(past),
            future_len: HistoryLength::Uniform(future),
        }
    }

    /// Per-source (past, future) lengths after broadcasting.
    pub fn resolve(&self, n_sources: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((
            self.past_len.resolve(n_sources, "past_len")?,
            self.future_len.resolve(n_sources, "future_len")?,
        ))
    }
}

/// Library anchor: the last time index of the past window within a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Anchor {
    pub block: usize,
    pub time: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Past,
    Future,
}

/// A past or future window of every source, anchored in a series.
#[derive(Clone, Copy, Debug)]
pub struct Window<'a, T> {
    series: &'a MultiSeries<T>,
    block: usize,
    time: usize,
    side: Side,
    lens: &'a [usize],
}

impl<'a, T: Real> Window<'a, T> {
    /// Window anchored at `time`; fails if it leaves the block.
    pub fn new(series: &'a MultiSeries<T>, block: usize, time: usize, side: Side, lens: &'a [usize]) -> Result<Self> {
        if lens.len() != series.n_sources() {
            return Err(Error::Window(format!(
                "{} lengths for {} sources",
                lens.len(),
                series.n_sources()
            )));
        }
        let len = series
            .blocks
            .get(block)
            .ok_or_else(|| Error::Index(format!("block {block}")))?
            .len();
        let fits = lens.iter().all(|&l| match side {
            Side::Past => l <= time + 1 && time < len,
            Side::Future => time + l < len,
        });
        if !fits {
            return Err(Error::Window(format!(
                "{side:?} window at block {block}, time {time} leaves the block"
            )));
        }
        Ok(Window {
            series,
            block,
            time,
            side,
            lens,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn len(&self, source: usize) -> usize {
        self.lens[source]
    }

    pub fn lens(&self) -> &'a [usize] {
        self.lens
    }

    pub fn n_sources(&self) -> usize {
        self.lens.len()
    }

    pub fn source_kind(&self, source: usize) -> &'a SourceKind {
        &self.series.sources[source].kind
    }

    /// Time index of lag `tau` (1-based, `tau = 1` adjacent to the present).
    pub fn time_at(&self, tau: usize) -> usize {
        match self.side {
            Side::Past => self.time + 1 - tau,
            Side::Future => self.time + tau,
        }
    }

    /// Sample of `source` at lag `tau`, or an error if it is missing.
    pub fn sample(&self, source: usize, tau: usize) -> Result<Sample<'a, T>> {
        let t = self.time_at(tau);
        let block = &self.series.blocks[self.block];
        if !block.valid[source][t] {
            return Err(Error::MissingInWindow {
                source_index: source,
                block: self.block,
                time: t,
            });
        }
        Ok(block.sample(source, t))
    }
}

/// Aligned (past, future) pairs drawn from a series.
#[derive(Clone, Debug)]
pub struct SequenceLibrary<'a, T> {
    series: &'a MultiSeries<T>,
    config: LibraryConfig,
    past: Vec<usize>,
    future: Vec<usize>,
    anchors: Vec<Anchor>,
}

impl<'a, T: Real> SequenceLibrary<'a, T> {
    pub fn series(&self) -> &'a MultiSeries<T> {
        self.series
    }

    pub fn config(&self) -> &LibraryConfig {
        &self.config
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn past_lens(&self) -> &[usize] {
        &self.past
    }

    pub fn future_lens(&self) -> &[usize] {
        &self.future
    }

    pub fn max_past(&self) -> usize {
        self.past.iter().copied().max().unwrap_or(0)
    }

    pub fn max_future(&self) -> usize {
        self.future.iter().copied().max().unwrap_or(0)
    }

    pub fn past(&self, i: usize) -> Window<'_, T> {
        let a = self.anchors[i];
        Window {
            series: self.series,
            block: a.block,
            time: a.time,
            side: Side::Past,
            lens: &self.past,
        }
    }

    pub fn future(&self, i: usize) -> Window<'_, T> {
        let a = self.anchors[i];
        Window {
            series: self.series,
            block: a.block,
            time: a.time,
            side: Side::Future,
            lens: &self.future,
        }
    }

    pub fn window(&self, i: usize, side: Side) -> Window<'_, T> {
        match side {
            Side::Past => self.past(i),
            Side::Future => self.future(i),
        }
    }

    /// Keeps every `stride`-th anchor.
    pub fn subsample(mut self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("anchor stride must be at least 1".into()));
        }
        if stride > 1 {
            self.anchors = self.anchors.into_iter().step_by(stride).collect();
        }
        Ok(self)
    }

    /// Position of an anchor in the library, if present.
    pub fn index_of(&self, anchor: Anchor) -> Option<usize> {
        self.anchors.binary_search(&anchor).ok()
    }
}

/// Builds the library of anchors whose past and future windows are fully valid.
pub fn build_library<'a, T: Real>(
    series: &'a MultiSeries<T>,
    config: &LibraryConfig,
) -> Result<SequenceLibrary<'a, T>> {
    let (past, future) = config.resolve(series.n_sources())?;
    let max_past = *past.iter().max().unwrap_or(&1);
    let max_future = *future.iter().max().unwrap_or(&1);

    let mut anchors = Vec::new();
    for (k, block) in series.blocks.iter().enumerate() {
        let len = block.len();
        if len < max_past + max_future {
            continue;
        }
        // prefix[d][t] = number of invalid samples of source d in [0, t)
        let prefix: Vec<Vec<usize>> = block
            .valid
            .iter()
            .map(|flags| {
                let mut acc = Vec::with_capacity(len + 1);
                acc.push(0);
                for &ok in flags {
                    acc.push(acc.last().unwrap() + usize::from(!ok));
                }
                acc
            })
            .collect();
        for t in (max_past - 1)..=(len - 1 - max_future) {
            let clean = (0..series.n_sources()).all(|d| {
                let lo = t + 1 - past[d];
                let hi = t + future[d] + 1;
                prefix[d][hi] == prefix[d][lo]
            });
            if clean {
                anchors.push(Anchor { block: k, time: t });
            }
        }
    }

    if anchors.is_empty() {
        let longest = series.blocks.iter().map(Block::len).max().unwrap_or(0);
        let reason = if longest < max_past + max_future {
            format!(
                "all blocks are shorter than past + future length ({})",
                max_past + max_future
            )
        } else {
            "missing data leaves no fully valid past/future window".to_string()
        };
        return Err(Error::EmptyLibrary(reason));
    }

    Ok(SequenceLibrary {
        series,
        config: config.clone(),
        past,
        future,
        anchors,
    })
}

/// Column layout of a CSV input.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Sources to read; inferred from the header when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<SourceMeta>>,
    /// Column holding block ids; `block` is used when present and this is unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_column: Option<String>,
}

const META_COLUMNS: [&str; 3] = ["time", "label", "block"];

fn is_missing_cell(s: &str) -> bool {
    let s = s.trim();
    s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na")
}

fn infer_sources(headers: &[String], block_col: Option<&str>) -> Result<Vec<SourceMeta>> {
    let mut sources: Vec<SourceMeta> = Vec::new();
    let mut vector_dims: Vec<(String, Vec<usize>)> = Vec::new();
    for h in headers {
        if Some(h.as_str()) == block_col
            || META_COLUMNS.contains(&h.as_str())
            || h.ends_with("_qc")
            || h.ends_with("_imputed")
        {
            continue;
        }
        if let Some((base, idx)) = h.rsplit_once('.') {
            if let Ok(i) = idx.parse::<usize>() {
                match vector_dims.iter_mut().find(|(b, _)| b == base) {
                    Some((_, v)) => v.push(i),
                    None => {
                        vector_dims.push((base.to_string(), vec![i]));
                        sources.push(SourceMeta::real(base, 0));
                    }
                }
                continue;
            }
        }
        sources.push(SourceMeta::real(h.clone(), 1));
    }
    for (base, mut idx) in vector_dims {
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(k, &i)| k != i) {
            return Err(Error::Config(format!(
                "vector source `{base}` columns are not numbered 0..n"
            )));
        }
        if let Some(s) = sources.iter_mut().find(|s| s.name == base) {
            s.kind = SourceKind::Real { dim: idx.len() };
        }
    }
    Ok(sources)
}

fn value_columns(meta: &SourceMeta) -> Vec<String> {
    match &meta.kind {
        SourceKind::Real { dim: 1 } | SourceKind::Symbol { .. } => vec![meta.name.clone()],
        SourceKind::Real { dim } => (0..*dim).map(|i| format!("{}.{i}", meta.name)).collect(),
    }
}

struct BlockBuilder<T> {
    values: Vec<Vec<T>>,
    symbols: Vec<Vec<String>>,
    valid: Vec<Vec<bool>>,
    imputed: Vec<Vec<bool>>,
}

/// Reads a CSV file into a series.
///
/// Rows whose `<name>_qc` flag is 0, or with an empty/NaN cell, become invalid
/// samples of that source. Distinct values of the block column become distinct
/// blocks, in order of first appearance.
pub fn load_csv<T: Real>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<MultiSeries<T>> {
    let file = File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<T: Real, R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<MultiSeries<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);

    let block_col = match &schema.block_column {
        Some(name) => Some(col(name).ok_or_else(|| Error::UnknownColumn(name.clone()))?),
        None => col("block"),
    };
    let block_name = block_col.map(|i| headers[i].clone());

    let mut sources = match &schema.sources {
        Some(s) => s.clone(),
        None => infer_sources(&headers, block_name.as_deref())?,
    };
    if sources.is_empty() {
        return Err(Error::Config("csv input has no value columns".into()));
    }

    let mut layout = Vec::with_capacity(sources.len());
    for meta in &sources {
        let cols = value_columns(meta)
            .into_iter()
            .map(|c| col(&c).ok_or(Error::UnknownColumn(c)))
            .collect::<Result<Vec<_>>>()?;
        let qc = col(&format!("{}_qc", meta.name));
        let imputed = col(&format!("{}_imputed", meta.name));
        layout.push((cols, qc, imputed));
    }

    let mut order: Vec<String> = Vec::new();
    let mut builders: HashMap<String, BlockBuilder<T>> = HashMap::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::CsvRow {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let id = block_col.map_or_else(String::new, |i| record[i].trim().to_string());
        let builder = builders.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            BlockBuilder {
                values: vec![Vec::new(); sources.len()],
                symbols: vec![Vec::new(); sources.len()],
                valid: vec![Vec::new(); sources.len()],
                imputed: vec![Vec::new(); sources.len()],
            }
        });
        for (d, (meta, (cols, qc, imp))) in sources.iter().zip(&layout).enumerate() {
            let mut ok = true;
            if let Some(q) = qc {
                let cell = record[*q].trim();
                if is_missing_cell(cell) {
                    ok = false;
                } else {
                    let flag: f64 = cell.parse().map_err(|_| Error::CsvRow {
                        line,
                        msg: format!("non-numeric quality flag `{cell}`"),
                    })?;
                    ok &= flag != 0.0;
                }
            }
            let imputed_flag = imp.is_some_and(|i| {
                let c = record[i].trim();
                c == "1" || c.eq_ignore_ascii_case("true")
            });
            match &meta.kind {
                SourceKind::Real { .. } => {
                    let mut row = Vec::with_capacity(cols.len());
                    for &c in cols {
                        let cell = record[c].trim();
                        if is_missing_cell(cell) {
                            ok = false;
                            row.push(T::lit(f64::NAN));
                        } else {
                            let x: f64 = cell.parse().map_err(|_| Error::CsvRow {
                                line,
                                msg: format!("non-numeric value `{cell}` in column `{}`", headers[c]),
                            })?;
                            row.push(T::lit(x));
                        }
                    }
                    builder.values[d].extend(row);
                }
                SourceKind::Symbol { .. } => {
                    let cell = record[cols[0]].trim();
                    if is_missing_cell(cell) {
                        ok = false;
                    }
                    builder.symbols[d].push(cell.to_string());
                }
            }
            builder.valid[d].push(ok);
            builder.imputed[d].push(imputed_flag);
        }
    }

    // Symbol alphabets: declared ones are kept, otherwise sorted observed symbols.
    for (d, meta) in sources.iter_mut().enumerate() {
        if let SourceKind::Symbol { alphabet } = &mut meta.kind {
            if alphabet.is_empty() {
                let mut seen: Vec<String> = builders
                    .values()
                    .flat_map(|b| {
                        b.symbols[d]
                            .iter()
                            .zip(&b.valid[d])
                            .filter(|(_, ok)| **ok)
                            .map(|(s, _)| s.clone())
                    })
                    .collect();
                seen.sort();
                seen.dedup();
                *alphabet = seen;
            }
        }
    }

    let mut blocks = Vec::with_capacity(order.len());
    for id in &order {
        let b = builders.remove(id).expect("block registered");
        let mut data = Vec::with_capacity(sources.len());
        for (d, meta) in sources.iter().enumerate() {
            match &meta.kind {
                SourceKind::Real { .. } => data.push(SourceData::Real(b.values[d].clone())),
                SourceKind::Symbol { alphabet } => {
                    let mut syms = Vec::with_capacity(b.symbols[d].len());
                    for (s, ok) in b.symbols[d].iter().zip(&b.valid[d]) {
                        if !ok {
                            syms.push(MISSING_SYMBOL);
                            continue;
                        }
                        let idx = alphabet.iter().position(|a| a == s).ok_or_else(|| Error::SourceKind {
                            source_name: meta.name.clone(),
                            msg: format!("symbol `{s}` is not in the declared alphabet"),
                        })?;
                        syms.push(idx as u32);
                    }
                    data.push(SourceData::Symbol(syms));
                }
            }
        }
        let mut block = Block::new(data, b.valid)?;
        for (d, flags) in b.imputed.into_iter().enumerate() {
            block.set_imputed_flags(d, flags);
        }
        blocks.push(block);
    }
    if blocks.is_empty() {
        return Err(Error::Config("csv input has no data rows".into()));
    }
    let ids = if block_col.is_some() {
        order
    } else {
        vec!["0".to_string()]
    };
    MultiSeries::with_block_ids(sources, blocks, ids)
}

/// Formats a float with 17 significant digits.
pub fn fmt_float<T: Real>(x: T) -> String {
    format!("{:.16e}", x.as_f64())
}

/// Writes a series as CSV. Invalid samples are written as empty cells; with
/// `flags` set, an `<name>_imputed` column follows each source.
pub fn write_csv<T: Real>(series: &MultiSeries<T>, path: impl AsRef<Path>, flags: bool) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path.as_ref())?);
    write_csv_to(series, &mut out, flags)?;
    out.flush()?;
    Ok(())
}

pub fn write_csv_to<T: Real, W: Write>(series: &MultiSeries<T>, out: &mut W, flags: bool) -> Result<()> {
    let with_block = series.blocks.len() > 1;
    let mut header: Vec<String> = Vec::new();
    if with_block {
        header.push("block".into());
    }
    for meta in &series.sources {
        header.extend(value_columns(meta));
        if flags {
            header.push(format!("{}_imputed", meta.name));
        }
    }
    writeln!(out, "{}", header.join(","))?;
    for (k, block) in series.blocks.iter().enumerate() {
        for t in 0..block.len() {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            if with_block {
                row.push(series.block_ids[k].clone());
            }
            for (d, meta) in series.sources.iter().enumerate() {
                let ok = block.valid[d][t];
                match block.sample(d, t) {
                    Sample::Real(v) => row.extend(v.iter().map(|&x| if ok { fmt_float(x) } else { String::new() })),
                    Sample::Symbol(s) => match &meta.kind {
                        SourceKind::Symbol { alphabet } if ok => row.push(alphabet[s as usize].clone()),
                        _ => row.push(String::new()),
                    },
                }
                if flags {
                    row.push(if block.imputed[d][t] { "1" } else { "0" }.into());
                }
            }
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, TestCaseError};

    fn scalar_series(len: usize, gaps: &[usize]) -> MultiSeries<f64> {
        let col = (0..len)
            .map(|t| if gaps.contains(&t) { f64::NAN } else { t as f64 })
            .collect();
        MultiSeries::from_scalar_columns(&["x"], vec![col]).unwrap()
    }

    /// Scans every candidate anchor and checks each window sample directly.
    fn brute_force_anchors(series: &MultiSeries<f64>, past: &[usize], future: &[usize]) -> Vec<Anchor> {
        let mut out = Vec::new();
        for (k, block) in series.blocks().iter().enumerate() {
            let mp = *past.iter().max().unwrap();
            let mf = *future.iter().max().unwrap();
            for t in 0..block.len() {
                if t + 1 < mp || t + mf >= block.len() {
                    continue;
                }
                let mut ok = true;
                for d in 0..series.n_sources() {
                    for tau in 1..=past[d] {
                        ok &= block.is_valid(d, t + 1 - tau);
                    }
                    for tau in 1..=future[d] {
                        ok &= block.is_valid(d, t + tau);
                    }
                }
                if ok {
                    out.push(Anchor { block: k, time: t });
                }
            }
        }
        out
    }

    #[test]
    fn single_block_count() {
        let s = scalar_series(10, &[]);
        let lib = build_library(&s, &LibraryConfig::uniform(1, 1)).unwrap();
        assert_eq!(lib.len(), 9);
    }

    #[test]
    fn single_gap_removes_past_plus_future_anchors() {
        let s = scalar_series(100, &[50]);
        let lib = build_library(&s, &LibraryConfig::uniform(3, 3)).unwrap();
        let brute = brute_force_anchors(&s, &[3], &[3]);
        assert_eq!(lib.anchors(), brute.as_slice());
        // anchors 47..=52 see t=50 in their windows
        assert_eq!(lib.len(), (100 - 3 - 3 + 1) - 6);
    }

    #[test]
    fn two_blocks() {
        let mk = || Block::from_scalar_columns(vec![(0..8).map(f64::from).collect()]).unwrap();
        let s = MultiSeries::new(vec![SourceMeta::real("x", 1)], vec![mk(), mk()]).unwrap();
        let lib = build_library(&s, &LibraryConfig::uniform(2, 2)).unwrap();
        assert_eq!(lib.len(), 10);
        assert_eq!(lib.anchors(), brute_force_anchors(&s, &[2], &[2]).as_slice());
        assert_eq!(lib.anchors()[5], Anchor { block: 1, time: 1 });
    }

    #[test]
    fn empty_library_errors() {
        let s = scalar_series(4, &[]);
        let err = build_library(&s, &LibraryConfig::uniform(3, 3)).unwrap_err();
        assert!(matches!(err, Error::EmptyLibrary(ref m) if m.contains("shorter")));
        let s = scalar_series(6, &[2]);
        let err = build_library(&s, &LibraryConfig::uniform(3, 3)).unwrap_err();
        assert!(matches!(err, Error::EmptyLibrary(ref m) if m.contains("missing")));
    }

    #[test]
    fn zero_length_rejected() {
        let s = scalar_series(10, &[]);
        assert!(matches!(
            build_library(&s, &LibraryConfig::uniform(0, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_slots_hold_sentinel() {
        let block = Block::<f64>::new(
            vec![SourceData::Real(vec![1.0, 2.0, 3.0]), SourceData::Symbol(vec![0, 1, 0])],
            vec![vec![true, false, true], vec![false, true, true]],
        )
        .unwrap();
        assert!(matches!(block.sample(0, 1), Sample::Real(v) if v[0].is_nan()));
        assert_eq!(block.sample(1, 0), Sample::Symbol(MISSING_SYMBOL));
    }

    #[test]
    fn windows_read_reversed_past() {
        let s = scalar_series(10, &[]);
        let lib = build_library(&s, &LibraryConfig::uniform(3, 2)).unwrap();
        let p = lib.past(0);
        let f = lib.future(0);
        assert_eq!(lib.anchors()[0].time, 2);
        assert_eq!(p.sample(0, 1).unwrap(), Sample::Real(&[2.0]));
        assert_eq!(p.sample(0, 3).unwrap(), Sample::Real(&[0.0]));
        assert_eq!(f.sample(0, 1).unwrap(), Sample::Real(&[3.0]));
        assert_eq!(f.sample(0, 2).unwrap(), Sample::Real(&[4.0]));
    }

    #[test]
    fn per_source_lengths() {
        let s = MultiSeries::from_scalar_columns(
            &["a", "b"],
            vec![(0..12).map(f64::from).collect(), (0..12).map(f64::from).collect()],
        )
        .unwrap();
        let cfg = LibraryConfig {
            past_len: HistoryLength::PerSource(vec![1, 4]),
            future_len: HistoryLength::PerSource(vec![3, 1]),
        };
        let lib = build_library(&s, &cfg).unwrap();
        assert_eq!(lib.len(), 12 - 4 - 3 + 1);
    }

    #[test]
    fn csv_plain() {
        let s: MultiSeries<f64> = read_csv("x\n1\n2\n3\n".as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(s.blocks().len(), 1);
        assert_eq!(s.block(0).len(), 3);
        assert!(s.block(0).valid(0).iter().all(|&v| v));
    }

    #[test]
    fn csv_flag_column() {
        let s: MultiSeries<f64> = read_csv("x,x_qc\n1,1\n2,0\n3,2\n".as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(s.n_sources(), 1);
        assert_eq!(s.block(0).valid(0), &[true, false, true]);
    }

    #[test]
    fn csv_blocks() {
        let s: MultiSeries<f64> = read_csv("block,x\na,1\na,2\nb,3\n".as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(s.blocks().len(), 2);
        assert_eq!(s.block(0).len(), 2);
        assert_eq!(s.block(1).len(), 1);
        assert_eq!(s.block_ids(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn csv_vectors_symbols_and_missing() {
        let schema = CsvSchema {
            sources: Some(vec![SourceMeta::real("q", 2), SourceMeta::symbol("s", vec![])]),
            block_column: None,
        };
        let s: MultiSeries<f64> = read_csv("q.0,q.1,s\n1,2,up\n3,,down\n5,6,\n".as_bytes(), &schema).unwrap();
        assert_eq!(s.block(0).valid(0), &[true, false, true]);
        assert_eq!(s.block(0).valid(1), &[true, true, false]);
        assert_eq!(
            s.sources()[1].kind,
            SourceKind::Symbol {
                alphabet: vec!["down".into(), "up".into()]
            }
        );
        assert_eq!(s.block(0).sample(1, 0), Sample::Symbol(1));
        assert_eq!(s.block(0).sample(0, 2), Sample::Real(&[5.0, 6.0]));
    }

    #[test]
    fn csv_errors() {
        let bad = read_csv::<f64, _>("x\n1\nfoo\n".as_bytes(), &CsvSchema::default());
        assert!(matches!(bad, Err(Error::CsvRow { line: 3, .. })));
        let schema = CsvSchema {
            sources: Some(vec![SourceMeta::real("y", 1)]),
            block_column: None,
        };
        let unknown = read_csv::<f64, _>("x\n1\n".as_bytes(), &schema);
        assert!(matches!(unknown, Err(Error::UnknownColumn(c)) if c == "y"));
        let ragged = read_csv::<f64, _>("x,y\n1,2\n3\n".as_bytes(), &CsvSchema::default());
        assert!(ragged.is_err());
    }

    #[test]
    fn csv_write_then_read() {
        let s = scalar_series(5, &[2]);
        let mut buf = Vec::new();
        write_csv_to(&s, &mut buf, true).unwrap();
        let back: MultiSeries<f64> = read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back.block(0).valid(0), s.block(0).valid(0));
        assert_eq!(back.block(0).sample(0, 4), Sample::Real(&[4.0]));
    }

    proptest! {
        #[test]
        fn gap_count_matches_enumeration(
            len in 5usize..60,
            gaps in proptest::collection::vec(0usize..60, 0..6),
            past in 1usize..4,
            future in 1usize..4,
            past_b in 1usize..4,
        ) {
            let a: Vec<f64> = (0..len).map(|t| if gaps.contains(&t) { f64::NAN } else { 1.0 }).collect();
            let b: Vec<f64> = (0..len).map(|t| if gaps.contains(&(t * 7 % 60)) { f64::NAN } else { 2.0 }).collect();
            let s = MultiSeries::from_scalar_columns(&["a", "b"], vec![a, b]).unwrap();
            let cfg = LibraryConfig {
                past_len: HistoryLength::PerSource(vec![past, past_b]),
                future_len: HistoryLength::Uniform(future),
            };
            let brute = brute_force_anchors(&s, &[past, past_b], &[future, future]);
            match build_library(&s, &cfg) {
                Ok(lib) => {
                    prop_assert_eq!(lib.anchors(), brute.as_slice());
                    let again = build_library(&s, &cfg).unwrap();
                    prop_assert_eq!(lib.anchors(), again.anchors());
                    for i in 0..lib.len() {
                        for side in [Side::Past, Side::Future] {
                            let w = lib.window(i, side);
                            for d in 0..2 {
                                for tau in 1..=w.len(d) {
                                    prop_assert!(w.sample(d, tau).is_ok());
                                }
                            }
                        }
                    }
                }
                Err(Error::EmptyLibrary(_)) => prop_assert!(brute.is_empty()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
