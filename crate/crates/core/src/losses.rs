//! The seven training objectives and their weighted sum.
//!
//! | component | reads | role |
//! |-----------|-------|------|
//! | `l_ssl` | α | triplet loss over augmented views |
//! | `l_i`   | β, Δ_β | soft class-domain alignment |
//! | `l_s`   | γ, Δ_γ | domain classification |
//! | `l_ab`, `l_ag`, `l_bg` | pairs | cross-covariance penalties |
//! | `l_c`   | Δ_c | class cross-entropy on the concatenation |

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::FeatureMask;
use crate::tensor::{BoundParams, Graph, Tensor, Var, LOG_FLOOR};

pub const COMPONENTS: [&str; 7] = ["l_ssl", "l_i", "l_s", "l_ab", "l_ag", "l_bg", "l_c"];

pub const SSL: usize = 0;
pub const ALIGN: usize = 1;
pub const SPECIFIC: usize = 2;
pub const COV_AB: usize = 3;
pub const COV_AG: usize = 4;
pub const COV_BG: usize = 5;
pub const CLASS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// `a1..a7`, in [`COMPONENTS`] order.
    pub a: [f64; 7],
    /// Triplet margin `M`.
    pub margin: f64,
    /// Width of the semi-hard band above `d(a, p)`.
    pub mining_margin: f64,
    /// Temperature of the soft confusion rows.
    pub tau: f64,
    /// Off-target mass generator of the soft class labels.
    pub zeta: f64,
    /// Divide soft class labels by `1 + ζ` so they sum to one.
    pub normalize_pc: bool,
    /// Negate the covariance penalties (maximizes cross-covariance).
    pub negate_cov: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            a: [1.0; 7],
            margin: 1.5,
            mining_margin: 0.7,
            tau: 2.0,
            zeta: 0.9,
            normalize_pc: true,
            negate_cov: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 1.0) {
            return Err(Error::invalid(format!("tau must be > 1, got {}", self.tau)));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::invalid(format!("zeta must lie in (0, 1), got {}", self.zeta)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.mining_margin >= 0.0) {
            return Err(Error::invalid("mining_margin must be >= 0"));
        }
        if self.a.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("loss weights must be finite"));
        }
        Ok(())
    }

    pub fn cov_sign(&self) -> f64 {
        if self.negate_cov {
            -1.0
        } else {
            1.0
        }
    }
}

/// Which components can be computed under a feature mask.
pub fn active_components(mask: FeatureMask) -> [bool; 7] {
    let (a, b, g) = (mask.alpha, mask.beta, mask.gamma);
    [a, b, g, a && b, a && g, b && g, true]
}

/// `Σ p_r log(p_r / q_r)` with `0·log 0 = 0` and `q` floored at [`LOG_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pr, _)| **pr > 0.0)
        .map(|(pr, qr)| pr * (pr.ln() - qr.max(LOG_FLOOR).ln()))
        .sum())
}

/// Differentiable KL between two `1 × n` distributions.
pub fn kl_var<'g>(p: Var<'g>, q: Var<'g>) -> Result<Var<'g>> {
    if p.shape() != q.shape() {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: p.shape(),
            rhs: q.shape(),
        });
    }
    p.mul(p.log()?.sub(q.log()?)?)?.sum()
}

/// Mean over rows of `max(‖a−p‖ − ‖a−n‖ + M, 0)`.
pub fn ssl_triplet_loss<'g>(za: Var<'g>, zp: Var<'g>, zn: Var<'g>, margin: f64) -> Result<Var<'g>> {
    let dp = za.sub(zp)?.row_norm()?;
    let dn = za.sub(zn)?.row_norm()?;
    dp.sub(dn)?.add_scalar(margin)?.relu()?.mean()
}

/// `(anchor, positive, negative)` row indices.
pub type Triple = (usize, usize, usize);

fn pairwise_distances(z: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, _) = z.dims2()?;
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = z
                .row_slice(i)
                .iter()
                .zip(z.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// For every ordered anchor–positive pair sharing a pseudo id, picks the
/// nearest negative in the band `d(a,p) < d(a,n) < d(a,p) + margin`, or the
/// closest negative when the band is empty.
pub fn mine_semi_hard(z: &Tensor, pseudo_ids: &[usize], mining_margin: f64) -> Result<Vec<Triple>> {
    let (n, _) = z.dims2()?;
    if pseudo_ids.len() != n {
        return Err(Error::Shape {
            op: "mine_semi_hard",
            lhs: vec![n],
            rhs: vec![pseudo_ids.len()],
        });
    }
    if pseudo_ids.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::invalid("semi-hard mining needs at least 2 pseudo-classes"));
    }
    let d = pairwise_distances(z)?;
    let mut out = Vec::new();
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && pseudo_ids[p] == pseudo_ids[a]) {
            let dap = d[a][p];
            let negatives = (0..n).filter(|&k| pseudo_ids[k] != pseudo_ids[a]);
            let closest =
                |it: &mut dyn Iterator<Item = usize>| it.min_by(|&x, &y| d[a][x].total_cmp(&d[a][y]).then(x.cmp(&y)));
            let in_band = closest(
                &mut negatives
                    .clone()
                    .filter(|&k| d[a][k] > dap && d[a][k] < dap + mining_margin),
            );
            let chosen = match in_band {
                Some(k) => k,
                None => closest(&mut negatives.clone()).expect("two pseudo-classes present"),
            };
            out.push((a, p, chosen));
        }
    }
    Ok(out)
}

/// Triplet loss over mined triples of a single embedding matrix.
pub fn mined_triplet_loss<'g>(z: Var<'g>, triples: &[Triple], margin: f64) -> Result<Var<'g>> {
    if triples.is_empty() {
        return Err(Error::invalid("no triplets to score"));
    }
    let pick = |f: fn(&Triple) -> usize| triples.iter().map(f).collect::<Vec<_>>();
    ssl_triplet_loss(
        z.select_rows(&pick(|t| t.0))?,
        z.select_rows(&pick(|t| t.1))?,
        z.select_rows(&pick(|t| t.2))?,
        margin,
    )
}

/// Soft target distribution for class `c`: `1` at `c`, `ζ/(n_c−1)` elsewhere,
/// optionally divided by `1 + ζ`.
pub fn soft_class_label(c: usize, n_c: usize, zeta: f64, normalize: bool) -> Result<Vec<f64>> {
    if n_c < 2 {
        return Err(Error::invalid("soft class labels need n_c >= 2"));
    }
    if c >= n_c {
        return Err(Error::invalid(format!("class {c} out of range ({n_c} classes)")));
    }
    let off = zeta / (n_c - 1) as f64;
    let norm = if normalize { 1.0 + zeta } else { 1.0 };
    Ok((0..n_c).map(|r| if r == c { 1.0 } else { off } / norm).collect())
}

/// `softmax(Δ_β(z̄)/τ)` where `z̄` is the mean of the class-`c` rows of domain `k`;
/// `None` when the slice holds no such row.
pub fn soft_confusion_row<'g>(
    p: &BoundParams<'g>,
    z_beta: Var<'g>,
    y: &[usize],
    domains: &[usize],
    k: usize,
    c: usize,
    tau: f64,
) -> Result<Option<Var<'g>>> {
    let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c && domains[i] == k).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let mean = z_beta.select_rows(&rows)?.mean_axis(0)?;
    let logits = crate::model::head_beta(p, mean)?;
    Ok(Some(logits.scale(1.0 / tau)?.softmax()?))
}

/// Every present `(domain, class)` soft confusion row of a batch.
pub fn soft_confusion_rows<'g>(
    p: &BoundParams<'g>,
    z_beta: Var<'g>,
    y: &[usize],
    domains: &[usize],
    tau: f64,
) -> Result<BTreeMap<(usize, usize), Var<'g>>> {
    if y.len() != domains.len() || y.len() != z_beta.shape()[0] {
        return Err(Error::invalid("labels, domains and embeddings disagree in length"));
    }
    let keys: BTreeSet<(usize, usize)> = domains.iter().copied().zip(y.iter().copied()).collect();
    let mut out = BTreeMap::new();
    for (k, c) in keys {
        if let Some(row) = soft_confusion_row(p, z_beta, y, domains, k, c, tau)? {
            out.insert((k, c), row);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct Alignment<'g> {
    pub loss: Var<'g>,
    /// Number of `(domain pair, class)` terms averaged.
    pub terms: usize,
    /// Set when no term could be formed and the loss is a constant 0.
    pub empty: bool,
}

/// Symmetric six-KL agreement between the confusion rows of every pair of
/// domains and the soft class label, averaged over the `(pair, class)`
/// terms present in both domains.
pub fn alignment_loss<'g>(
    graph: &'g Graph,
    rows: &BTreeMap<(usize, usize), Var<'g>>,
    n_classes: usize,
    weights: &LossWeights,
) -> Result<Alignment<'g>> {
    let domains: Vec<usize> = rows
        .keys()
        .map(|&(k, _)| k)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut acc: Option<Var<'g>> = None;
    let mut terms = 0;
    for (i, &h1) in domains.iter().enumerate() {
        for &h2 in &domains[i + 1..] {
            for c in 0..n_classes {
                let (Some(&s1), Some(&s2)) = (rows.get(&(h1, c)), rows.get(&(h2, c))) else {
                    continue;
                };
                let pc = graph.constant(Tensor::row(&soft_class_label(
                    c,
                    n_classes,
                    weights.zeta,
                    weights.normalize_pc,
                )?));
                let six = [
                    kl_var(s1, s2)?,
                    kl_var(s2, s1)?,
                    kl_var(pc, s2)?,
                    kl_var(s2, pc)?,
                    kl_var(s1, pc)?,
                    kl_var(pc, s1)?,
                ];
                let mut term = six[0];
                for t in &six[1..] {
                    term = term.add(*t)?;
                }
                let term = term.scale(1.0 / 6.0)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(term)?,
                });
                terms += 1;
            }
        }
    }
    Ok(match acc {
        Some(sum) => Alignment {
            loss: sum.scale(1.0 / terms as f64)?,
            terms,
            empty: false,
        },
        None => Alignment {
            loss: graph.constant(Tensor::scalar(0.0)),
            terms: 0,
            empty: true,
        },
    })
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let width = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
        return Err(Error::invalid(format!("label {bad} out of range for {width} logits")));
    }
    logits.log_softmax()?.pick(labels)?.mean()?.scale(-1.0)
}

/// Domain cross-entropy of Δ_γ.
pub fn specific_loss<'g>(logits: Var<'g>, domains: &[usize]) -> Result<Var<'g>> {
    cross_entropy(logits, domains)
}

/// Class cross-entropy of Δ_c.
pub fn classification_loss<'g>(logits: Var<'g>, y: &[usize]) -> Result<Var<'g>> {
    cross_entropy(logits, y)
}

/// Frobenius norm of the cross-covariance `(za − μa)ᵀ(zb − μb)/(n − 1)`.
pub fn cov_loss<'g>(za: Var<'g>, zb: Var<'g>) -> Result<Var<'g>> {
    let n = za.shape()[0];
    if n < 2 {
        return Err(Error::invalid("cov_loss needs a batch of at least 2"));
    }
    if zb.shape()[0] != n {
        return Err(Error::Shape {
            op: "cov_loss",
            lhs: za.shape(),
            rhs: zb.shape(),
        });
    }
    za.center_batch()?
        .transpose()?
        .matmul(zb.center_batch()?)?
        .scale(1.0 / (n - 1) as f64)?
        .frobenius_norm()
}

/// Normalized cross-covariance `‖Cov(a, b)‖_F / (‖σ_a‖ · ‖σ_b‖)`, where `σ`
/// are the per-dimension standard deviations.
pub fn normalized_cross_cov(za: &Tensor, zb: &Tensor) -> Result<f64> {
    let (n, da) = za.dims2()?;
    let (nb, db) = zb.dims2()?;
    if n != nb || n < 2 {
        return Err(Error::invalid("normalized_cross_cov needs equal batches of >= 2"));
    }
    let centered = |z: &Tensor, d: usize| -> Vec<Vec<f64>> {
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| z.get2(i, j)).sum::<f64>() / n as f64)
            .collect();
        (0..n)
            .map(|i| (0..d).map(|j| z.get2(i, j) - mean[j]).collect())
            .collect()
    };
    let (ca, cb) = (centered(za, da), centered(zb, db));
    let mut fro = 0.0;
    for j in 0..da {
        for k in 0..db {
            let c = (0..n).map(|i| ca[i][j] * cb[i][k]).sum::<f64>() / (n - 1) as f64;
            fro += c * c;
        }
    }
    let sd_norm = |c: &[Vec<f64>], d: usize| -> f64 {
        (0..d)
            .map(|j| c.iter().map(|r| r[j] * r[j]).sum::<f64>() / (n - 1) as f64)
            .sum::<f64>()
            .sqrt()
    };
    let denom = sd_norm(&ca, da) * sd_norm(&cb, db);
    if denom == 0.0 {
        return Err(Error::invalid("normalized_cross_cov of a constant embedding"));
    }
    Ok(fro.sqrt() / denom)
}

/// Per-component values and their weighted sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Component values; 0 for inactive components.
    pub components: [f64; 7],
    pub active: [bool; 7],
    pub total: f64,
}

impl LossReport {
    /// Recomputes the weighted sum in the same order as [`total_loss`].
    pub fn weighted_sum(&self, a: &[f64; 7]) -> f64 {
        let mut acc: Option<f64> = None;
        for i in 0..7 {
            if self.active[i] {
                let term = self.components[i] * a[i];
                acc = Some(acc.map_or(term, |s| s + term));
            }
        }
        acc.unwrap_or(0.0)
    }

    pub fn csv_header() -> String {
        format!("step,{},total", COMPONENTS.join(","))
    }

    pub fn csv_row(&self, step: usize) -> String {
        let mut fields = vec![step.to_string()];
        fields.extend(self.components.iter().map(|&v| crate::eval::fmt_g(v)));
        fields.push(crate::eval::fmt_g(self.total));
        fields.join(",")
    }
}

/// `Σ a_i · L_i` over the present components, plus the matching report.
pub fn total_loss<'g>(
    graph: &'g Graph,
    components: &[Option<Var<'g>>; 7],
    a: &[f64; 7],
) -> Result<(Var<'g>, LossReport)> {
    let mut acc: Option<Var<'g>> = None;
    let mut values = [0.0; 7];
    let mut active = [false; 7];
    for (i, c) in components.iter().enumerate() {
        if let Some(v) = c {
            values[i] = v.item();
            active[i] = true;
            let term = v.scale(a[i])?;
            acc = Some(match acc {
                None => term,
                Some(s) => s.add(term)?,
            });
        }
    }
    let total = acc.unwrap_or_else(|| graph.constant(Tensor::scalar(0.0)));
    let report = LossReport {
        components: values,
        active,
        total: total.item(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, Model, ModelConfig};
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    fn random_dist(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn kl_examples_and_gibbs() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        close(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-12);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let n = rng.gen_range(2..6);
            let p = random_dist(&mut rng, n);
            let q = random_dist(&mut rng, n);
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_var_matches_scalar_version() {
        let g = Graph::new();
        let p = [0.2, 0.5, 0.3];
        let q = [0.6, 0.1, 0.3];
        let v = kl_var(g.constant(Tensor::row(&p)), g.constant(Tensor::row(&q))).unwrap();
        close(v.item(), kl_divergence(&p, &q).unwrap(), 1e-15);
    }

    #[test]
    fn triplet_examples() {
        let g = Graph::new();
        let r = |v: &[f64]| g.constant(Tensor::row(v));
        let l = ssl_triplet_loss(r(&[0.0, 0.0]), r(&[0.0, 0.0]), r(&[2.0, 0.0]), 1.5).unwrap();
        assert_eq!(l.item(), 0.0);
        let l = ssl_triplet_loss(r(&[0.3, 0.1]), r(&[0.3, 0.1]), r(&[0.3, 0.1]), 1.5).unwrap();
        assert_eq!(l.item(), 1.5);
        let l = ssl_triplet_loss(r(&[0.0, 0.0]), r(&[1.0, 0.0]), r(&[1.2, 0.0]), 1.5).unwrap();
        close(l.item(), 1.3, 1e-12);
    }

    #[test]
    fn semi_hard_choices() {
        // anchor at 0, positive at 0.4, negatives at 0.5, 0.9, 3.0 on a line
        let z = Tensor::from_rows(&[vec![0.0], vec![0.4], vec![0.5], vec![0.9], vec![3.0]]).unwrap();
        let ids = [0, 0, 1, 2, 3];
        let t = mine_semi_hard(&z, &ids, 0.7).unwrap();
        assert!(t.contains(&(0, 1, 2)));

        // band (0.4, 0.45) is empty → hardest negative
        let t = mine_semi_hard(&z, &ids, 0.05).unwrap();
        assert!(t.contains(&(0, 1, 2)));
        let z = Tensor::from_rows(&[vec![0.0], vec![2.0], vec![0.5], vec![3.0]]).unwrap();
        let t = mine_semi_hard(&z, &[0, 0, 1, 2], 0.7).unwrap();
        assert!(t.contains(&(0, 1, 2)), "{t:?}");

        let forced = mine_semi_hard(
            &Tensor::from_rows(&[vec![0.0], vec![1.0], vec![5.0]]).unwrap(),
            &[0, 0, 1],
            0.7,
        )
        .unwrap();
        assert!(forced.iter().all(|t| t.2 == 2));
        assert!(mine_semi_hard(&z, &[0, 0, 0, 0], 0.7).is_err());
    }

    #[test]
    fn soft_labels() {
        let raw = soft_class_label(0, 3, 0.9, false).unwrap();
        assert_eq!(raw, vec![1.0, 0.45, 0.45]);
        let n = soft_class_label(0, 3, 0.9, true).unwrap();
        close(n[0], 1.0 / 1.9, 1e-15);
        close(n[1], 0.45 / 1.9, 1e-15);
        close(n.iter().sum::<f64>(), 1.0, 1e-15);
        let one_hot = soft_class_label(1, 3, 1e-12, true).unwrap();
        close(one_hot[1], 1.0, 1e-11);
        assert!(soft_class_label(0, 1, 0.9, true).is_err());
    }

    fn beta_model(seed: u64) -> Model {
        let cfg = ModelConfig::new(
            EncoderConfig {
                input: 3,
                hidden: vec![4],
                embed: 3,
            },
            3,
            2,
            FeatureMask::ALL,
        );
        Model::init(cfg, seed).unwrap()
    }

    #[test]
    fn confusion_row_basics() {
        let m = beta_model(1);
        let g = Graph::new();
        let p = m.params.bind(&g, |_| false);
        let z = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap());
        let row = soft_confusion_row(&p, z, &[0, 1], &[0, 0], 0, 0, 2.0).unwrap().unwrap();
        let direct = crate::model::head_beta(&p, z.select_rows(&[0]).unwrap())
            .unwrap()
            .scale(0.5)
            .unwrap()
            .softmax()
            .unwrap();
        assert_eq!(row.value(), direct.value());
        assert!(soft_confusion_row(&p, z, &[0, 1], &[0, 0], 1, 0, 2.0)
            .unwrap()
            .is_none());

        let hot = soft_confusion_row(&p, z, &[0, 1], &[0, 0], 0, 1, 1e6).unwrap().unwrap();
        assert!(hot.value().data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
    }

    #[test]
    fn alignment_zero_when_rows_match_labels() {
        let g = Graph::new();
        let w = LossWeights::default();
        let mut rows = BTreeMap::new();
        for k in 0..3 {
            for c in 0..2 {
                let pc = soft_class_label(c, 2, w.zeta, true).unwrap();
                rows.insert((k, c), g.constant(Tensor::row(&pc)));
            }
        }
        let a = alignment_loss(&g, &rows, 2, &w).unwrap();
        assert_eq!(a.terms, 6);
        assert!(a.loss.item().abs() < 1e-15);
    }

    #[test]
    fn alignment_scalar_oracle_and_symmetry() {
        let g = Graph::new();
        let w = LossWeights::default();
        // two domains, one shared class (0) among two
        let pc = soft_class_label(0, 2, 0.9, true).unwrap();
        let s1 = [1.0, 0.0];
        let mut rows = BTreeMap::new();
        rows.insert((0, 0), g.constant(Tensor::row(&s1)));
        rows.insert((1, 0), g.constant(Tensor::row(&pc)));
        let a = alignment_loss(&g, &rows, 2, &w).unwrap();

        let floor = 1e-12f64;
        let kl = |p: [f64; 2], q: [f64; 2]| -> f64 {
            (0..2)
                .filter(|&i| p[i] > 0.0)
                .map(|i| p[i] * (p[i].ln() - q[i].max(floor).ln()))
                .sum()
        };
        let pc2 = [pc[0], pc[1]];
        let expect = (kl(s1, pc2) + kl(pc2, s1) + kl(pc2, pc2) + kl(pc2, pc2) + kl(s1, pc2) + kl(pc2, s1)) / 6.0;
        close(a.loss.item(), expect, 1e-9);
        assert_eq!(a.terms, 1);

        let mut swapped = BTreeMap::new();
        swapped.insert((0, 0), rows[&(1, 0)]);
        swapped.insert((1, 0), rows[&(0, 0)]);
        let b = alignment_loss(&g, &swapped, 2, &w).unwrap();
        close(a.loss.item(), b.loss.item(), 1e-15);

        let mut lonely = BTreeMap::new();
        lonely.insert((0, 0), rows[&(0, 0)]);
        lonely.insert((1, 1), rows[&(1, 0)]);
        let e = alignment_loss(&g, &lonely, 2, &w).unwrap();
        assert!(e.empty);
        assert_eq!(e.loss.item(), 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::new();
        let u = g.constant(Tensor::zeros(&[3, 4]));
        close(specific_loss(u, &[0, 1, 3]).unwrap().item(), 4f64.ln(), 1e-12);
        let u2 = g.constant(Tensor::zeros(&[2, 2]));
        close(classification_loss(u2, &[0, 1]).unwrap().item(), 2f64.ln(), 1e-12);
        assert!(specific_loss(u, &[0, 1, 4]).is_err());
        let sharp = g.constant(Tensor::from_rows(&[vec![60.0, 0.0], vec![0.0, 60.0]]).unwrap());
        assert!(classification_loss(sharp, &[0, 1]).unwrap().item() < 1e-20);

        let logits = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.1], vec![-0.5, 0.5]]).unwrap();
        let a = classification_loss(g.constant(logits.clone()), &[1, 0, 1])
            .unwrap()
            .item();
        let perm = Tensor::from_rows(&[
            logits.row_slice(2).to_vec(),
            logits.row_slice(0).to_vec(),
            logits.row_slice(1).to_vec(),
        ])
        .unwrap();
        let b = classification_loss(g.constant(perm), &[1, 1, 0]).unwrap().item();
        close(a, b, 1e-15);
    }

    #[test]
    fn cov_examples() {
        let g = Graph::new();
        let c = |rows: &[Vec<f64>]| g.constant(Tensor::from_rows(rows).unwrap());
        let x = c(&[vec![1.0], vec![-1.0]]);
        close(cov_loss(x, x).unwrap().item(), 2.0, 1e-15);
        let constant = c(&[vec![3.0, 1.0], vec![3.0, 1.0], vec![3.0, 1.0]]);
        let other = c(&[vec![0.1, 2.0], vec![1.5, -1.0], vec![0.7, 0.0]]);
        assert_eq!(cov_loss(constant, other).unwrap().item(), 0.0);
        let shifted = c(&[vec![10.1, 2.0], vec![11.5, -1.0], vec![10.7, 0.0]]);
        let z = c(&[vec![1.0, 0.0], vec![0.5, 2.0], vec![-1.0, 1.0]]);
        close(
            cov_loss(z, other).unwrap().item(),
            cov_loss(z, shifted).unwrap().item(),
            1e-12,
        );
        close(
            cov_loss(z, other).unwrap().item(),
            cov_loss(other, z).unwrap().item(),
            1e-15,
        );
        assert!(cov_loss(c(&[vec![1.0]]), c(&[vec![1.0]])).is_err());
    }

    #[test]
    fn total_is_weighted_sum_bitwise() {
        let g = Graph::new();
        let s = |v: f64| Some(g.constant(Tensor::scalar(v)));
        let zero: [Option<Var>; 7] = [s(0.0), s(0.0), s(0.0), s(0.0), s(0.0), s(0.0), s(0.0)];
        assert_eq!(total_loss(&g, &zero, &[1.0; 7]).unwrap().1.total, 0.0);
        let ones: [Option<Var>; 7] = [s(1.0), s(1.0), s(1.0), s(1.0), s(1.0), s(1.0), s(1.0)];
        assert_eq!(total_loss(&g, &ones, &[1.0; 7]).unwrap().1.total, 7.0);
        let first: [Option<Var>; 7] = [s(1.3), None, None, None, None, None, s(0.0)];
        let (_, r) = total_loss(&g, &first, &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        close(r.total, 2.6, 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let comps: [Option<Var>; 7] = std::array::from_fn(|_| {
                rng.gen_bool(0.7)
                    .then(|| g.constant(Tensor::scalar(rng.gen_range(0.0..5.0))))
            });
            let a: [f64; 7] = std::array::from_fn(|_| rng.gen_range(0.0..2.0));
            let (_, r) = total_loss(&g, &comps, &a).unwrap();
            assert_eq!(r.total.to_bits(), r.weighted_sum(&a).to_bits());
        }
    }

    #[test]
    fn losses_pass_grad_check() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let err = grad_check(
                |g, z| {
                    let other = g.constant(Tensor::new(
                        vec![6, 2],
                        (0..12).map(|i| (i as f64 * 0.7).sin()).collect(),
                    )?);
                    cov_loss(z, other)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "cov {err}");
            let err = grad_check(|_, z| cross_entropy(z, &[0, 1, 2, 0, 1, 2]), &x, 1e-6).unwrap();
            assert!(err < 1e-5, "ce {err}");
            let err = grad_check(
                |_, z| mined_triplet_loss(z, &[(0, 1, 2), (3, 4, 5), (1, 0, 5)], 1.5),
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "triplet {err}");
        }
    }

    #[test]
    fn normalized_cross_cov_is_scale_free() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let b = a.map(|v| 3.0 * v + 1.0);
        let s1 = normalized_cross_cov(&a, &a).unwrap();
        let s2 = normalized_cross_cov(&a, &b).unwrap();
        close(s1, s2, 1e-12);
        assert!(s1 > 0.0 && s1 <= 1.0 + 1e-12);
    }
}
