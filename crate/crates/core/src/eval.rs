//! Scoring topic assignments against ground-truth categories.
//!
//! Everything here works on a plain `documents x dimensions` score matrix so
//! that recovered topic proportions and raw classifier scores go through the
//! same code.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};

/// Category label -> document indices. One category per document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryPartition {
    groups: BTreeMap<String, Vec<usize>>,
}

impl CategoryPartition {
    /// Groups documents by label; unlabeled documents are left out.
    pub fn from_labels(labels: &[Option<String>]) -> Self {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, label) in labels.iter().enumerate() {
            if let Some(label) = label {
                groups.entry(label.clone()).or_default().push(i);
            }
        }
        CategoryPartition { groups }
    }

    /// Builds a partition from `(doc_id, category)` pairs. Every id must be
    /// in `doc_ids`.
    pub fn from_assignments<'a, I>(doc_ids: &[String], pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let index: HashMap<&str, usize> = doc_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut labels = vec![None; doc_ids.len()];
        for (id, cat) in pairs {
            let &i =
                index.get(id).ok_or_else(|| Error::InvalidInput(format!("unknown doc_id {id:?} in categories")))?;
            if labels[i].is_some() {
                return Err(Error::InvalidInput(format!("doc_id {id:?} listed twice in categories")));
            }
            labels[i] = Some(cat.to_string());
        }
        Ok(Self::from_labels(&labels))
    }

    pub fn insert(&mut self, category: impl Into<String>, docs: Vec<usize>) {
        self.groups.insert(category.into(), docs);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.groups.iter().map(|(c, d)| (c.as_str(), d.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    fn validate(&self, n_docs: usize) -> Result<()> {
        let mut seen = vec![false; n_docs];
        for (cat, docs) in &self.groups {
            if docs.is_empty() {
                return Err(Error::EmptyCategory(cat.clone()));
            }
            for &d in docs {
                if d >= n_docs {
                    return Err(Error::InvalidInput(format!(
                        "category {cat:?} lists document {d}, matrix has {n_docs}"
                    )));
                }
                if std::mem::replace(&mut seen[d], true) {
                    return Err(Error::InvalidInput(format!("document {d} is in two categories")));
                }
            }
        }
        Ok(())
    }

    /// Document permutation grouping each category together (categories in
    /// label order), followed by unlabeled documents.
    pub fn grouped_order(&self, n_docs: usize) -> Vec<usize> {
        let mut order: Vec<usize> = self.groups.values().flatten().copied().collect();
        let mut listed = vec![false; n_docs];
        for &d in &order {
            listed[d] = true;
        }
        order.extend((0..n_docs).filter(|&d| !listed[d]));
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Scores straight from the classifier.
    Raw,
    /// Topic proportions from LDA.
    Lda,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Lda => "lda",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryConsistency {
    pub category: String,
    /// Dimension with the largest mean score over the category.
    pub modal_index: usize,
    /// k -> fraction of the category whose top-k dimensions contain
    /// `modal_index`.
    pub rate_at_k: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub method: Method,
    pub categories: Vec<CategoryConsistency>,
}

impl ConsistencyReport {
    pub fn get(&self, category: &str) -> Option<&CategoryConsistency> {
        self.categories.iter().find(|c| c.category == category)
    }

    /// Long-format CSV `method,category,modal_index,k,rate`.
    pub fn write_csv<W: Write>(&self, w: &mut W, with_header: bool) -> Result<()> {
        if with_header {
            writeln!(w, "method,category,modal_index,k,rate")?;
        }
        for c in &self.categories {
            for (k, rate) in &c.rate_at_k {
                writeln!(w, "{},{},{},{},{:.6}", self.method.as_str(), c.category, c.modal_index, k, rate)?;
            }
        }
        Ok(())
    }
}

/// One row per method, one column per category and k.
impl fmt::Display for ConsistencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ks: Vec<usize> = self.categories.first().map(|c| c.rate_at_k.keys().copied().collect()).unwrap_or_default();
        write!(f, "{:<8}", "method")?;
        for k in &ks {
            for c in &self.categories {
                write!(f, " {:>12}", format!("{}[{}]", c.category, k))?;
            }
        }
        writeln!(f)?;
        write!(f, "{:<8}", self.method.as_str())?;
        for k in &ks {
            for c in &self.categories {
                write!(f, " {:>12.4}", c.rate_at_k[k])?;
            }
        }
        writeln!(f)
    }
}

/// Argmax with ties going to the lowest index.
fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Position of `target` when the row is sorted by descending score with
/// ties broken by lower index.
fn rank_of(row: ArrayView1<'_, f64>, target: usize) -> usize {
    let t = row[target];
    row.iter().enumerate().filter(|&(j, &v)| v > t || (v == t && j < target)).count()
}

pub fn consistent_rate(
    probs: ArrayView2<'_, f64>,
    part: &CategoryPartition,
    ks: &[usize],
    method: Method,
) -> Result<ConsistencyReport> {
    let (n_docs, n_dims) = probs.dim();
    part.validate(n_docs)?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n_dims) {
        return Err(Error::InvalidInput(format!("k = {k} outside 1..={n_dims}")));
    }
    let mut categories = Vec::with_capacity(part.len());
    for (cat, docs) in part.iter() {
        let rows = probs.select(Axis(0), docs);
        let mean = rows.mean_axis(Axis(0)).expect("category is non-empty");
        let modal_index = argmax(mean.view());
        let ranks: Vec<usize> = rows.rows().into_iter().map(|r| rank_of(r, modal_index)).collect();
        let rate_at_k =
            ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / docs.len() as f64)).collect();
        categories.push(CategoryConsistency { category: cat.to_string(), modal_index, rate_at_k });
    }
    Ok(ConsistencyReport { method, categories })
}

/// Raw classifier scores as a `documents x dimensions` matrix, optionally
/// softmax-normalized per row.
pub fn raw_baseline_probs(m: &FeatureMatrix, softmax: bool) -> Array2<f64> {
    let mut out = Array2::from_shape_fn((m.n_docs(), m.n_dims()), |(i, j)| m.row(i)[j] as f64);
    if softmax {
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
    }
    out
}

/// For each topic, the `n` documents with the largest proportion of it,
/// descending, ties broken by lower document index. `n` larger than the
/// number of documents returns all of them.
pub fn top_documents_per_topic(theta: ArrayView2<'_, f64>, n: usize) -> Vec<Vec<usize>> {
    let n = n.min(theta.nrows());
    theta
        .columns()
        .into_iter()
        .map(|col| {
            let mut idx: Vec<usize> = (0..col.len()).collect();
            idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
            idx.truncate(n);
            idx
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outlier {
    pub doc_index: usize,
    pub doc_id: String,
    pub category: String,
    pub assigned_topic: usize,
    pub category_modal_topic: usize,
}

/// Documents whose most probable topic differs from the most common one in
/// their category (ties to the lowest topic).
pub fn flag_outliers(theta: ArrayView2<'_, f64>, part: &CategoryPartition, doc_ids: &[String]) -> Result<Vec<Outlier>> {
    part.validate(theta.nrows())?;
    if doc_ids.len() != theta.nrows() {
        return Err(Error::InvalidInput(format!("{} doc ids for {} rows", doc_ids.len(), theta.nrows())));
    }
    let assigned: Vec<usize> = theta.rows().into_iter().map(argmax).collect();
    let mut flagged = Vec::new();
    for (cat, docs) in part.iter() {
        let mut votes = vec![0usize; theta.ncols()];
        for &d in docs {
            votes[assigned[d]] += 1;
        }
        // first maximum wins
        let modal = votes.iter().enumerate().fold(0, |best, (k, &v)| if v > votes[best] { k } else { best });
        for &d in docs {
            if assigned[d] != modal {
                flagged.push(Outlier {
                    doc_index: d,
                    doc_id: doc_ids[d].clone(),
                    category: cat.to_string(),
                    assigned_topic: assigned[d],
                    category_modal_topic: modal,
                });
            }
        }
    }
    Ok(flagged)
}

/// CSV `doc_id,category,assigned_topic,category_modal_topic`.
pub fn write_outliers_csv<W: Write>(outliers: &[Outlier], w: &mut W) -> Result<()> {
    writeln!(w, "doc_id,category,assigned_topic,category_modal_topic")?;
    for o in outliers {
        writeln!(w, "{},{},{},{}", o.doc_id, o.category, o.assigned_topic, o.category_modal_topic)?;
    }
    Ok(())
}

/// Six significant digits.
fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

fn check_order(order: &[usize], n_docs: usize) -> Result<()> {
    let mut seen = vec![false; n_docs];
    if order.len() != n_docs {
        return Err(Error::InvalidInput(format!("ordering has {} entries for {n_docs} documents", order.len())));
    }
    for &d in order {
        if d >= n_docs || std::mem::replace(&mut seen[d], true) {
            return Err(Error::InvalidInput("ordering is not a permutation of the documents".into()));
        }
    }
    Ok(())
}

/// CSV of the reordered matrix: `doc_id,topic_0,...` with six significant
/// digits.
pub fn write_spectrogram_csv<W: Write>(
    matrix: ArrayView2<'_, f64>,
    doc_ids: &[String],
    order: &[usize],
    w: &mut W,
) -> Result<()> {
    check_order(order, matrix.nrows())?;
    write!(w, "doc_id")?;
    for k in 0..matrix.ncols() {
        write!(w, ",topic_{k}")?;
    }
    writeln!(w)?;
    for &d in order {
        write!(w, "{}", doc_ids[d])?;
        for &v in matrix.row(d) {
            write!(w, ",{}", sig6(v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Binary PGM (P5, maxval 255): one pixel row per document in `order`, each
/// column of the matrix drawn `cell_width` pixels wide. The largest value
/// maps to white; negative values clamp to black.
pub fn render_pgm(matrix: ArrayView2<'_, f64>, order: &[usize], cell_width: usize) -> Result<Vec<u8>> {
    check_order(order, matrix.nrows())?;
    let cell_width = cell_width.max(1);
    let max = matrix.fold(0.0f64, |a, &b| a.max(b));
    let width = matrix.ncols() * cell_width;
    let mut out = format!("P5\n{} {}\n255\n", width, order.len()).into_bytes();
    out.reserve(width * order.len());
    for &d in order {
        for &v in matrix.row(d) {
            let level = if max > 0.0 { (255.0 * v.max(0.0) / max).round() as u8 } else { 0 };
            out.extend(std::iter::repeat_n(level, cell_width));
        }
    }
    Ok(out)
}

/// Parsed P5 image: `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::InvalidInput(format!("PGM: {msg}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if pixels.len() != width * height {
        return Err(bad("raster size does not match header"));
    }
    Ok((width, height, pixels.to_vec()))
}

/// Writes `<prefix>.csv` and `<prefix>.pgm`; returns both paths.
pub fn spectrogram_export(
    matrix: ArrayView2<'_, f64>,
    doc_ids: &[String],
    order: &[usize],
    prefix: &Path,
    cell_width: usize,
) -> Result<(PathBuf, PathBuf)> {
    let csv_path = prefix.with_extension("csv");
    let pgm_path = prefix.with_extension("pgm");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    write_spectrogram_csv(matrix, doc_ids, order, &mut w)?;
    w.flush()?;
    std::fs::write(&pgm_path, render_pgm(matrix, order, cell_width)?)?;
    Ok((csv_path, pgm_path))
}

/// A score matrix with document ids, as stored in `doc_id,<col>,...` CSVs
/// (theta exports, spectrogram CSVs and raw score exports).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub doc_ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Array2<f64>,
}

impl ScoreTable {
    pub fn new(doc_ids: Vec<String>, column_prefix: &str, values: Array2<f64>) -> Self {
        let columns = (0..values.ncols()).map(|k| format!("{column_prefix}{k}")).collect();
        ScoreTable { doc_ids, columns, values }
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "doc_id")?;
        for c in &self.columns {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
        for (id, row) in self.doc_ids.iter().zip(self.values.rows()) {
            write!(w, "{id}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads a CSV whose first line is `doc_id,<col>,...`.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| Error::MalformedHeader("empty score file".into()))??;
        let mut cols = header.trim_end().split(',');
        if cols.next() != Some("doc_id") {
            return Err(Error::MalformedHeader(format!("expected `doc_id,...`, got {header:?}")));
        }
        let columns: Vec<String> = cols.map(str::to_string).collect();
        if columns.is_empty() {
            return Err(Error::MalformedHeader("no score columns".into()));
        }
        let mut doc_ids = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let row = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != columns.len() + 1 {
                return Err(Error::DimensionMismatch { row, expected: columns.len(), found: fields.len() - 1 });
            }
            for (col, f) in fields[1..].iter().enumerate() {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| Error::MalformedRow { row, msg: format!("column {}: cannot parse {f:?}", col + 1) })?;
                if !v.is_finite() {
                    return Err(Error::NonFinite { row, col: col + 1 });
                }
                values.push(v);
            }
            doc_ids.push(fields[0].to_string());
        }
        let values = Array2::from_shape_vec((doc_ids.len(), columns.len()), values)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(ScoreTable { doc_ids, columns, values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn one_category(n: usize) -> CategoryPartition {
        let mut p = CategoryPartition::default();
        p.insert("all", (0..n).collect());
        p
    }

    #[test]
    fn worked_consistency_example() {
        let probs = array![[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.6, 0.4]];
        let r = consistent_rate(probs.view(), &one_category(4), &[1, 2], Method::Lda).unwrap();
        let c = &r.categories[0];
        assert_eq!(c.modal_index, 0);
        assert_eq!(c.rate_at_k[&1], 0.75);
        assert_eq!(c.rate_at_k[&2], 1.0);
    }

    #[test]
    fn identical_rows_are_fully_consistent() {
        let probs = array![[0.2, 0.5, 0.3], [0.2, 0.5, 0.3], [0.2, 0.5, 0.3]];
        let r = consistent_rate(probs.view(), &one_category(3), &[1], Method::Raw).unwrap();
        assert_eq!(r.categories[0].rate_at_k[&1], 1.0);
    }

    #[test]
    fn modal_index_ties_go_low() {
        let probs = array![[0.5, 0.5], [0.5, 0.5]];
        let r = consistent_rate(probs.view(), &one_category(2), &[1], Method::Raw).unwrap();
        assert_eq!(r.categories[0].modal_index, 0);
        assert_eq!(r.categories[0].rate_at_k[&1], 1.0);
    }

    #[test]
    fn consistency_errors() {
        let probs = array![[0.9, 0.1]];
        let mut p = CategoryPartition::default();
        p.insert("empty", vec![]);
        assert!(matches!(consistent_rate(probs.view(), &p, &[1], Method::Lda), Err(Error::EmptyCategory(_))));
        assert!(consistent_rate(probs.view(), &one_category(1), &[3], Method::Lda).is_err());
        assert!(consistent_rate(probs.view(), &one_category(2), &[1], Method::Lda).is_err());
    }

    #[test]
    fn report_csv_is_long_format() {
        let probs = array![[0.9, 0.1], [0.8, 0.2]];
        let r = consistent_rate(probs.view(), &one_category(2), &[1, 2], Method::Raw).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf, true).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "method,category,modal_index,k,rate\nraw,all,0,1,1.000000\nraw,all,0,2,1.000000\n"
        );
    }

    #[test]
    fn raw_baseline_identity_and_softmax() {
        let m =
            FeatureMatrix::new(2, vec![0.0, 0.0, 1.0, -2.0], vec!["a".into(), "b".into()], vec![None, None]).unwrap();
        assert_eq!(raw_baseline_probs(&m, false), array![[0.0, 0.0], [1.0, -2.0]]);
        let s = raw_baseline_probs(&m, true);
        assert_eq!(s.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((s.row(1).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_documents_example() {
        let theta = array![[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]];
        assert_eq!(top_documents_per_topic(theta.view(), 1), vec![vec![0], vec![1]]);
        assert_eq!(top_documents_per_topic(theta.view(), 3), vec![vec![0, 2, 1], vec![1, 2, 0]]);
        assert_eq!(top_documents_per_topic(theta.view(), 10)[0].len(), 3);
    }

    #[test]
    fn outlier_examples() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let theta = array![[0.9, 0.1], [0.7, 0.3], [0.2, 0.8]];
        let flagged = flag_outliers(theta.view(), &one_category(3), &ids).unwrap();
        assert_eq!(
            flagged,
            vec![Outlier {
                doc_index: 2,
                doc_id: "c".into(),
                category: "all".into(),
                assigned_topic: 1,
                category_modal_topic: 0
            }]
        );
        let pure = array![[0.9, 0.1], [0.7, 0.3], [0.6, 0.4]];
        assert!(flag_outliers(pure.view(), &one_category(3), &ids).unwrap().is_empty());
    }

    #[test]
    fn pgm_identity_pattern() {
        let theta = array![[1.0, 0.0], [0.0, 1.0]];
        let bytes = render_pgm(theta.view(), &[0, 1], 2).unwrap();
        let (w, h, px) = parse_pgm(&bytes).unwrap();
        assert_eq!((w, h), (4, 2));
        assert_eq!(px, vec![255, 255, 0, 0, 0, 0, 255, 255]);
        assert!(bytes.starts_with(b"P5\n4 2\n255\n"));
    }

    #[test]
    fn spectrogram_csv_round_trip() {
        let theta = array![[0.123456789, 0.876543211], [1.0 / 3.0, 2.0 / 3.0], [1e-7, 1.0 - 1e-7]];
        let ids: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let mut buf = Vec::new();
        write_spectrogram_csv(theta.view(), &ids, &[2, 0, 1], &mut buf).unwrap();
        let back = ScoreTable::read_csv(&buf[..]).unwrap();
        assert_eq!(back.doc_ids, vec!["z", "x", "y"]);
        for (r, &d) in [2usize, 0, 1].iter().enumerate() {
            for k in 0..2 {
                let (orig, parsed) = (theta[[d, k]], back.values[[r, k]]);
                assert!(((orig - parsed) / orig).abs() < 5e-6, "{orig} vs {parsed}");
            }
        }
    }

    #[test]
    fn ordering_must_be_permutation() {
        let theta = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(render_pgm(theta.view(), &[0, 0], 1).is_err());
        assert!(render_pgm(theta.view(), &[0], 1).is_err());
    }

    #[test]
    fn partition_from_assignments() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let p = CategoryPartition::from_assignments(&ids, [("c", "cow"), ("a", "cow"), ("b", "fridge")]).unwrap();
        assert_eq!(p.iter().collect::<Vec<_>>(), vec![("cow", &[0, 2][..]), ("fridge", &[1][..])]);
        assert_eq!(p.grouped_order(4), vec![0, 2, 1, 3]);
        assert!(CategoryPartition::from_assignments(&ids, [("q", "cow")]).is_err());
    }

    fn arb_scores() -> impl Strategy<Value = Array2<f64>> {
        (1usize..12, 1usize..7).prop_flat_map(|(m, d)| {
            proptest::collection::vec(-5.0f64..5.0, m * d).prop_map(move |v| Array2::from_shape_vec((m, d), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn rates_monotone_in_k_and_reach_one(probs in arb_scores(), split in 0usize..12) {
            let n = probs.nrows();
            let split = split.min(n - 1);
            let mut part = CategoryPartition::default();
            part.insert("a", (0..=split).collect());
            if split + 1 < n {
                part.insert("b", (split + 1..n).collect());
            }
            let ks: Vec<usize> = (1..=probs.ncols()).collect();
            let r = consistent_rate(probs.view(), &part, &ks, Method::Raw).unwrap();
            for c in &r.categories {
                let rates: Vec<f64> = c.rate_at_k.values().copied().collect();
                prop_assert!(rates.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(rates.iter().all(|&x| (0.0..=1.0).contains(&x)));
                prop_assert_eq!(*rates.last().unwrap(), 1.0);
            }
        }

        #[test]
        fn top_k_membership_survives_monotone_transform(probs in arb_scores(), target in 0usize..7) {
            let target = target % probs.ncols();
            let transformed = probs.mapv(|v| v.exp() * 3.0 + 1.0);
            for (a, b) in probs.rows().into_iter().zip(transformed.rows()) {
                prop_assert_eq!(rank_of(a, target), rank_of(b, target));
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(probs in arb_scores()) {
            let (m, d) = probs.dim();
            let values = probs.iter().map(|&v| v as f32).collect();
            let ids = (0..m).map(|i| i.to_string()).collect();
            let fm = FeatureMatrix::new(d, values, ids, vec![None; m]).unwrap();
            for row in raw_baseline_probs(&fm, true).rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn top_lists_sorted_descending(probs in arb_scores(), n in 1usize..15) {
            for (k, list) in top_documents_per_topic(probs.view(), n).iter().enumerate() {
                prop_assert_eq!(list.len(), n.min(probs.nrows()));
                for w in list.windows(2) {
                    prop_assert!(probs[[w[0], k]] >= probs[[w[1], k]]);
                }
            }
        }

        #[test]
        fn flagged_set_is_complement_of_modal_matches(probs in arb_scores()) {
            let n = probs.nrows();
            let labels: Vec<Option<String>> = (0..n).map(|i| Some(format!("c{}", i % 3))).collect();
            let part = CategoryPartition::from_labels(&labels);
            let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            let flagged = flag_outliers(probs.view(), &part, &ids).unwrap();
            prop_assert!(flagged.len() <= n);
            let flagged_idx: std::collections::HashSet<usize> = flagged.iter().map(|o| o.doc_index).collect();
            for o in &flagged {
                prop_assert_ne!(o.assigned_topic, o.category_modal_topic);
            }
            // every unflagged document matches its category's modal topic
            for (_, docs) in part.iter() {
                let modal = flagged.iter().find(|o| docs.contains(&o.doc_index)).map(|o| o.category_modal_topic);
                for &d in docs {
                    if !flagged_idx.contains(&d) {
                        if let Some(modal) = modal {
                            prop_assert_eq!(argmax(probs.row(d)), modal);
                        }
                    }
                }
            }
        }
    }
}
