//! Metrics, prediction, PCA embedding export and CSV formatting.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::augment::ImageTensor;
use crate::error::{Error, Result};
use crate::model::{encode, heads, images_to_tensor, Extractor, Model};
use crate::tensor::{Graph, Tensor};

/// Formats like C's `%g` with 6 significant digits.
pub fn fmt_g(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        strip_zeros(&format!("{v:.*}", (5 - exp) as usize)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("metrics of an empty prediction set"));
    }
    if preds.len() != labels.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    Ok(())
}

/// Percentage of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Mean per-class recall over the classes present in `labels`, in percent.
pub fn macro_recall(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mut tp = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= n_classes {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        support[l] += 1;
        if p == l {
            tp[l] += 1;
        }
    }
    let recalls: Vec<f64> = (0..n_classes)
        .filter(|&c| support[c] > 0)
        .map(|c| tp[c] as f64 / support[c] as f64)
        .collect();
    Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Midranks (1-based) of `values`; ties share the average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest AUROC from the Mann–Whitney statistic with midranks,
/// macro-averaged over classes that have both positives and negatives.
pub fn auroc_macro(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, n_c) = scores.dims2()?;
    if n != labels.len() {
        return Err(Error::Shape {
            op: "auroc_macro",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    let mut aucs = Vec::new();
    for c in 0..n_c {
        let pos = labels.iter().filter(|&&l| l == c).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|i| scores.get2(i, c)).collect();
        let ranks = midranks(&col);
        let rank_sum: f64 = (0..n).filter(|&i| labels[i] == c).map(|i| ranks[i]).sum();
        let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
        aucs.push(u / (pos * neg) as f64);
    }
    if aucs.is_empty() {
        return Err(Error::invalid(
            "AUROC undefined: no class has both positives and negatives",
        ));
    }
    Ok(100.0 * aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Principal components kept before the final 2-D cut.
pub const PCA_COMPONENTS: usize = 50;

/// Projects mean-centered rows onto the leading principal directions of
/// their covariance. Each direction is signed so that its largest-magnitude
/// loading is positive.
pub fn pca_project(features: &Tensor, out_dim: usize) -> Result<Tensor> {
    let (n, d) = features.dims2()?;
    if n < 3 || d < 2 {
        return Err(Error::invalid(format!("PCA needs n >= 3 and d >= 2, got {n}x{d}")));
    }
    let keep = PCA_COMPONENTS.min(d);
    if out_dim == 0 || out_dim > keep {
        return Err(Error::invalid(format!("out_dim must be in 1..={keep}")));
    }
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    if !(top > 1e-12) {
        return Err(Error::invalid("PCA of rank-0 input"));
    }
    let mut out = vec![0.0; n * out_dim];
    for (k, &col) in order.iter().take(keep).take(out_dim).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, x)| *x)
            .unwrap_or(1.0);
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..n {
            out[i * out_dim + k] = (0..d).map(|j| centered[(i, j)] * v[j]).sum();
        }
    }
    Tensor::new(vec![n, out_dim], out)
}

/// Class probabilities, hard predictions and labels on a set of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub probs: Tensor,
    pub preds: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Predictions {
    pub fn accuracy(&self) -> Result<f64> {
        accuracy(&self.preds, &self.labels)
    }

    pub fn csv(&self) -> String {
        let (_, n_c) = self.probs.dims2().expect("probabilities are rank 2");
        let mut s = String::from("index,label,pred");
        for c in 0..n_c {
            let _ = write!(s, ",p{c}");
        }
        s.push('\n');
        for (i, (l, p)) in self.labels.iter().zip(&self.preds).enumerate() {
            let _ = write!(s, "{i},{l},{p}");
            for &v in self.probs.row_slice(i) {
                let _ = write!(s, ",{}", fmt_g(v));
            }
            s.push('\n');
        }
        s
    }
}

const EVAL_CHUNK: usize = 256;

/// Classifier probabilities of `model` on `images`.
pub fn predict(model: &Model, images: &[&ImageTensor], labels: &[usize]) -> Result<Predictions> {
    let mut probs = Vec::with_capacity(images.len() * model.config.n_classes);
    for chunk in images.chunks(EVAL_CHUNK) {
        let g = Graph::new();
        let p = model.params.bind(&g, |_| false);
        let x = g.constant(images_to_tensor(chunk)?);
        let t = encode(&model.config, &p, x)?;
        let out = heads(&model.config, &p, &t, model.config.mask)?;
        probs.extend(out.c.softmax()?.value().into_data());
    }
    let probs = Tensor::new(vec![images.len(), model.config.n_classes], probs)?;
    let preds = (0..images.len())
        .map(|i| {
            let row = probs.row_slice(i);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();
    Ok(Predictions {
        probs,
        preds,
        labels: labels.to_vec(),
    })
}

/// Raw embeddings of one extractor, or of the layer-normalized
/// concatenation when `which` is `None`.
pub fn embed(model: &Model, images: &[&ImageTensor], which: Option<Extractor>) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in images.chunks(EVAL_CHUNK) {
        let g = Graph::new();
        let p = model.params.bind(&g, |_| false);
        let x = g.constant(images_to_tensor(chunk)?);
        let t = encode(&model.config, &p, x)?;
        let z = match which {
            Some(e) => t.require(e)?,
            None => crate::model::concat_features(&model.config, &p, &t, model.config.mask)?,
        };
        width = z.shape()[1];
        rows.extend(z.value().into_data());
    }
    Tensor::new(vec![images.len(), width], rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub target: String,
    pub seed: u64,
    pub mask: String,
    pub phase2: bool,
    pub accuracy: f64,
    pub auroc: f64,
    pub recall: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "target,seed,mask,phase2,accuracy,auroc,recall";

    pub fn from_predictions(target: &str, seed: u64, mask: &str, phase2: bool, p: &Predictions) -> Result<Self> {
        let n_c = p.probs.dims2()?.1;
        Ok(Self {
            target: target.to_string(),
            seed,
            mask: mask.to_string(),
            phase2,
            accuracy: accuracy(&p.preds, &p.labels)?,
            auroc: auroc_macro(&p.probs, &p.labels)?,
            recall: macro_recall(&p.preds, &p.labels, n_c)?,
        })
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.target,
            self.seed,
            self.mask,
            u8::from(self.phase2),
            fmt_g(self.accuracy),
            fmt_g(self.auroc),
            fmt_g(self.recall)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(Error::Data(format!("metrics row needs 7 fields: `{line}`")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad number `{s}` in `{line}`")))
        };
        Ok(Self {
            target: f[0].into(),
            seed: f[1].parse().map_err(|_| Error::Data(format!("bad seed in `{line}`")))?,
            mask: f[2].into(),
            phase2: f[3] == "1",
            accuracy: num(f[4])?,
            auroc: num(f[5])?,
            recall: num(f[6])?,
        })
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// `mean` and `std` summary rows over `rows`; the target column holds the
/// row kind and the seed/mask/phase2 columns are copied from the first row.
pub fn summarize(rows: &[MetricsRow]) -> Result<[MetricsRow; 2]> {
    let first = rows.first().ok_or_else(|| Error::invalid("nothing to summarize"))?;
    let col = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (acc, auc, rec) = (col(|r| r.accuracy), col(|r| r.auroc), col(|r| r.recall));
    let make = |target: &str, agg: fn(&[f64]) -> f64| MetricsRow {
        target: target.into(),
        seed: first.seed,
        mask: first.mask.clone(),
        phase2: first.phase2,
        accuracy: agg(&acc),
        auroc: agg(&auc),
        recall: agg(&rec),
    };
    Ok([make("mean", mean), make("std", population_std)])
}

/// Which embedding a dump was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Extractor(Extractor),
    All,
}

impl EmbeddingSource {
    pub fn tag(self) -> &'static str {
        match self {
            EmbeddingSource::Extractor(e) => e.name(),
            EmbeddingSource::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" | "a" => Ok(Self::Extractor(Extractor::Alpha)),
            "beta" | "b" => Ok(Self::Extractor(Extractor::Beta)),
            "gamma" | "g" => Ok(Self::Extractor(Extractor::Gamma)),
            "all" => Ok(Self::All),
            _ => Err(Error::invalid(format!(
                "unknown extractor `{s}` (alpha|beta|gamma|all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    pub coords: Vec<[f64; 2]>,
    pub classes: Vec<usize>,
    pub domains: Vec<String>,
    pub source: EmbeddingSource,
}

impl EmbeddingDump {
    pub fn new(features: &Tensor, classes: Vec<usize>, domains: Vec<String>, source: EmbeddingSource) -> Result<Self> {
        let n = features.dims2()?.0;
        if classes.len() != n || domains.len() != n {
            return Err(Error::invalid("one class and domain label per sample required"));
        }
        let xy = pca_project(features, 2)?;
        let coords = (0..n).map(|i| [xy.get2(i, 0), xy.get2(i, 1)]).collect();
        Ok(Self {
            coords,
            classes,
            domains,
            source,
        })
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("x,y,class,domain,extractor\n");
        for (i, [x, y]) in self.coords.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                fmt_g(*x),
                fmt_g(*y),
                self.classes[i],
                self.domains[i],
                self.source.tag()
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn g_format() {
        assert_eq!(fmt_g(0.0), "0");
        assert_eq!(fmt_g(1.0), "1");
        assert_eq!(fmt_g(75.0), "75");
        assert_eq!(fmt_g(0.123456789), "0.123457");
        assert_eq!(fmt_g(123456.7), "123457");
        assert_eq!(fmt_g(1234567.0), "1.23457e+06");
        assert_eq!(fmt_g(0.0001), "0.0001");
        assert_eq!(fmt_g(0.00001234), "1.234e-05");
        assert_eq!(fmt_g(-2.5), "-2.5");
        assert_eq!(fmt_g(999999.6), "1e+06");
        assert_eq!(fmt_g(f64::NAN), "nan");
    }

    #[test]
    fn accuracy_and_recall_examples() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 75.0);
        assert_eq!(accuracy(&[2, 1], &[2, 1]).unwrap(), 100.0);
        assert!(accuracy(&[], &[]).is_err());
        assert_eq!(macro_recall(&[1, 0, 1], &[0, 0, 1], 2).unwrap(), 75.0);
        assert_eq!(macro_recall(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 50.0);
        assert_eq!(macro_recall(&[0, 1], &[0, 1], 3).unwrap(), 100.0);
    }

    #[test]
    fn auroc_examples() {
        let s = |v: &[f64]| Tensor::from_rows(&v.iter().map(|&x| vec![1.0 - x, x]).collect::<Vec<_>>()).unwrap();
        assert_eq!(auroc_macro(&s(&[0.9, 0.4, 0.6, 0.1]), &[1, 1, 0, 0]).unwrap(), 75.0);
        assert_eq!(auroc_macro(&s(&[0.9, 0.8, 0.2, 0.1]), &[1, 1, 0, 0]).unwrap(), 100.0);
        assert_eq!(auroc_macro(&s(&[0.5; 4]), &[1, 0, 1, 0]).unwrap(), 50.0);
        assert!(auroc_macro(&s(&[0.5; 2]), &[1, 1]).is_err());
    }

    fn pair_count_auroc(scores: &Tensor, labels: &[usize]) -> f64 {
        let (n, n_c) = scores.dims2().unwrap();
        let mut aucs = Vec::new();
        for c in 0..n_c {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in (0..n).filter(|&i| labels[i] == c) {
                for j in (0..n).filter(|&j| labels[j] != c) {
                    den += 1.0;
                    num += match scores.get2(i, c).partial_cmp(&scores.get2(j, c)).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
            if den > 0.0 {
                aucs.push(num / den);
            }
        }
        100.0 * aucs.iter().sum::<f64>() / aucs.len() as f64
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..300 {
            let n = rng.gen_range(2..=12);
            let n_c = rng.gen_range(2..=3);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_c)).collect();
            // coarse scores to force ties
            let data = (0..n * n_c).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
            let scores = Tensor::new(vec![n, n_c], data).unwrap();
            match auroc_macro(&scores, &labels) {
                Ok(v) => assert_eq!(v, pair_count_auroc(&scores, &labels)),
                Err(_) => assert!(labels.iter().all(|&l| l == labels[0])),
            }
        }
    }

    #[test]
    fn pca_line_isometry_and_order() {
        let line = Tensor::from_rows(
            &(0..6)
                .map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let p = pca_project(&line, 2).unwrap();
        assert!((0..6).all(|i| p.get2(i, 1).abs() < 1e-8));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let p = pca_project(&Tensor::from_rows(&pts).unwrap(), 2).unwrap();
        let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        for i in 0..10 {
            for j in 0..10 {
                assert!((dist(&pts[i], &pts[j]) - dist(p.row_slice(i), p.row_slice(j))).abs() < 1e-8);
            }
        }
        let var = |k: usize| (0..10).map(|i| p.get2(i, k).powi(2)).sum::<f64>();
        assert!(var(0) >= var(1));
        assert!(pca_project(&Tensor::full(&[5, 3], 1.0), 2).is_err());
    }

    #[test]
    fn summary_rows_are_recomputable() {
        let row = |t: &str, a: f64| MetricsRow {
            target: t.into(),
            seed: 1,
            mask: "abg".into(),
            phase2: true,
            accuracy: a,
            auroc: a + 1.0,
            recall: a - 1.0,
        };
        let rows = [row("x", 70.0), row("y", 80.0)];
        let [m, s] = summarize(&rows).unwrap();
        assert_eq!((m.accuracy, s.accuracy), (75.0, 5.0));
        assert_eq!(MetricsRow::parse(&rows[0].csv()).unwrap(), rows[0]);
    }
}
