//! Multi-domain datasets, the synthetic stain-shift generator, and the
//! leave-one-domain-out / meta-train-meta-test split machinery.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_hed_affine, hed_jitter, hed_to_rgb, ImageTensor};
use crate::error::{Error, Result};
use crate::tensor::{io, Tensor};

/// File extension of image tensors on disk.
pub const IMAGE_EXT: &str = "alfa";

/// Mixes a base seed with a stream tag into an independent seed (splitmix64).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: ImageTensor,
    /// Class label.
    pub y: usize,
    /// Domain (hospital) label.
    pub h: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    domains: Vec<Vec<Example>>,
    domain_names: Vec<String>,
    class_names: Vec<String>,
}

impl DomainDataset {
    pub fn new(domains: Vec<Vec<Example>>, domain_names: Vec<String>, class_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            domains,
            domain_names,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Data("dataset has no domains".into()));
        }
        if self.domain_names.len() != self.domains.len() {
            return Err(Error::Data("one name per domain required".into()));
        }
        let n_c = self.class_names.len();
        if n_c < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {n_c}")));
        }
        let mut reference: Option<Vec<usize>> = None;
        for (k, d) in self.domains.iter().enumerate() {
            for e in d {
                if e.y >= n_c || e.h != k {
                    return Err(Error::Data(format!(
                        "domain `{}`: example labels (y={}, h={}) out of range",
                        self.domain_names[k], e.y, e.h
                    )));
                }
            }
            let mut present: Vec<usize> = d.iter().map(|e| e.y).collect();
            present.sort_unstable();
            present.dedup();
            if present.len() < 2 {
                return Err(Error::Data(format!(
                    "domain `{}` must contain at least 2 classes",
                    self.domain_names[k]
                )));
            }
            match &reference {
                None => reference = Some(present),
                Some(r) if *r != present => {
                    return Err(Error::Data(format!(
                        "domain `{}` has class set {present:?}, expected {r:?}",
                        self.domain_names[k]
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn domain(&self, k: usize) -> &[Example] {
        &self.domains[k]
    }

    pub fn domain_name(&self, k: usize) -> &str {
        &self.domain_names[k]
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn example(&self, r: ExampleRef) -> &Example {
        &self.domains[r.domain][r.index]
    }

    /// `(channels·height·width)` of the images; all images share one size.
    pub fn input_size(&self) -> usize {
        self.domains[0][0].image.len()
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let img = &self.domains[0][0].image;
        (img.height(), img.width())
    }

    /// References to every example of domain `k`.
    pub fn refs(&self, k: usize) -> Vec<ExampleRef> {
        (0..self.domains[k].len())
            .map(|index| ExampleRef { domain: k, index })
            .collect()
    }

    /// Relabels domain indices of every example through `perm`.
    /// Only meant for probing code paths that must ignore `h`.
    pub fn with_permuted_domain_labels(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for d in &mut out.domains {
            for e in d {
                e.h = perm[e.h];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExampleRef {
    pub domain: usize,
    pub index: usize,
}

/// Generator settings for the synthetic stain-shift benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_per_domain: usize,
    /// HED jitter magnitude per domain.
    pub thetas: Vec<f64>,
    pub n_classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_per_domain: 400,
            thetas: vec![0.0, 0.01, 0.05, 0.5],
            n_classes: 2,
            image_size: 16,
            seed: 0,
        }
    }
}

pub fn theta_domain_name(theta: f64) -> String {
    format!("theta_{theta}")
}

/// Generates one domain per entry of `thetas`.
///
/// Base images are drawn in stain-concentration space: an eosin-dominated
/// textured background with hematoxylin blobs whose count and elongation
/// depend on the class. Blob area is independent of elongation. Each image
/// of domain `k` then receives its own HED jitter draw of magnitude
/// `thetas[k]`, so the domain is visible only through stain variation.
pub fn synth_generate(spec: &SynthSpec) -> Result<DomainDataset> {
    if spec.image_size < 8 {
        return Err(Error::invalid(format!(
            "image_size must be >= 8, got {}",
            spec.image_size
        )));
    }
    if spec.n_classes < 2 {
        return Err(Error::invalid("n_classes must be >= 2"));
    }
    if spec.thetas.is_empty() {
        return Err(Error::invalid("at least one domain theta required"));
    }
    for (i, a) in spec.thetas.iter().enumerate() {
        if !(*a >= 0.0) {
            return Err(Error::invalid("thetas must be >= 0"));
        }
        if spec.thetas[..i].contains(a) {
            return Err(Error::invalid(format!("duplicate domain theta {a}")));
        }
    }
    if spec.n_per_domain < 2 * spec.n_classes {
        return Err(Error::invalid("n_per_domain must cover every class twice"));
    }

    let mut domains = Vec::with_capacity(spec.thetas.len());
    for (k, &theta) in spec.thetas.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, k as u64 + 1));
        let mut examples = Vec::with_capacity(spec.n_per_domain);
        for i in 0..spec.n_per_domain {
            let y = i % spec.n_classes;
            let base = base_image(y, spec.image_size, &mut rng);
            let image = hed_jitter(&base, theta, &mut rng)?;
            examples.push(Example { image, y, h: k });
        }
        examples.shuffle(&mut rng);
        domains.push(examples);
    }
    DomainDataset::new(
        domains,
        spec.thetas.iter().map(|&t| theta_domain_name(t)).collect(),
        (0..spec.n_classes).map(|c| format!("class{c}")).collect(),
    )
}

/// Class-dependent base image, see [`synth_generate`].
pub fn base_image<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> ImageTensor {
    let s = size as f64;
    let mut hed = vec![[0.0f64; 3]; size * size];

    // Low-frequency background texture.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.0) * std::f64::consts::TAU / s,
                rng.gen_range(0.5..2.0) * std::f64::consts::TAU / s,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.04),
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let t: f64 = waves
                .iter()
                .map(|(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            hed[y * size + x] = [0.06 + 0.5 * t, 0.30 + t, 0.0];
        }
    }

    let count = 1 + class;
    let elongation = if class % 2 == 1 { 3.0 } else { 1.0 };
    let radius = 0.11 * s;
    let margin = 0.2 * s;
    for _ in 0..count {
        let cx = rng.gen_range(margin..s - 1.0 - margin);
        let cy = rng.gen_range(margin..s - 1.0 - margin);
        let r = radius * rng.gen_range(0.85..1.15);
        let (a, b) = (r * f64::sqrt(elongation), r / f64::sqrt(elongation));
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let (sn, cs) = angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = cs * dx + sn * dy;
                let v = -sn * dx + cs * dy;
                let q = (u / a).powi(2) + (v / b).powi(2);
                hed[y * size + x][0] += 0.7 * (-0.5 * q).exp();
            }
        }
    }

    let mut data = vec![0.0; 3 * size * size];
    for (p, px) in hed.iter().enumerate() {
        let rgb = hed_to_rgb(*px);
        for c in 0..3 {
            data[c * size * size + p] = rgb[c].clamp(0.0, 1.0);
        }
    }
    ImageTensor::new(size, size, data).expect("sized above")
}

/// Re-applies a fixed stain transform to every image of a dataset.
pub fn restain(ds: &DomainDataset, scale: [f64; 3], shift: [f64; 3]) -> DomainDataset {
    let mut out = ds.clone();
    for d in &mut out.domains {
        for e in d {
            e.image = apply_hed_affine(&e.image, scale, shift);
        }
    }
    out
}

/// One source domain's partition into training and validation examples.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcePartition {
    pub domain: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LodoSplit {
    pub target: usize,
    pub sources: Vec<SourcePartition>,
    pub val_frac: f64,
    n_domains: usize,
}

impl LodoSplit {
    pub fn source_domains(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.domain).collect()
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn train_refs(&self) -> Vec<Vec<ExampleRef>> {
        self.sources
            .iter()
            .map(|s| {
                s.train
                    .iter()
                    .map(|&index| ExampleRef {
                        domain: s.domain,
                        index,
                    })
                    .collect()
            })
            .collect()
    }

    pub fn val_refs(&self) -> Vec<ExampleRef> {
        self.sources
            .iter()
            .flat_map(|s| {
                s.val.iter().map(move |&index| ExampleRef {
                    domain: s.domain,
                    index,
                })
            })
            .collect()
    }

    /// Position of domain `k` among the sources.
    pub fn source_position(&self, k: usize) -> Option<usize> {
        self.sources.iter().position(|s| s.domain == k)
    }
}

fn by_class(ds: &DomainDataset, domain: usize, indices: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        groups.entry(ds.domain(domain)[i].y).or_default().push(i);
    }
    groups
}

/// Holds out `target`; every other domain is split into train/validation,
/// stratified by class.
pub fn lodo_split(ds: &DomainDataset, target: usize, val_frac: f64, seed: u64) -> Result<LodoSplit> {
    let n_h = ds.n_domains();
    if target >= n_h {
        return Err(Error::invalid(format!(
            "target domain {target} out of range (N_h = {n_h})"
        )));
    }
    if n_h < 2 {
        return Err(Error::invalid("leave-one-domain-out needs at least 2 domains"));
    }
    if !(val_frac > 0.0 && val_frac < 0.5) {
        return Err(Error::invalid(format!("val_frac {val_frac} outside (0, 0.5)")));
    }
    let mut sources = Vec::with_capacity(n_h - 1);
    for k in (0..n_h).filter(|&k| k != target) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + k as u64));
        let all: Vec<usize> = (0..ds.domain(k).len()).collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (_, mut idx) in by_class(ds, k, &all) {
            idx.shuffle(&mut rng);
            let n_val = (val_frac * idx.len() as f64).round() as usize;
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        sources.push(SourcePartition { domain: k, train, val });
    }
    Ok(LodoSplit {
        target,
        sources,
        val_frac,
        n_domains: n_h,
    })
}

/// Disjoint meta-train / meta-test indices of one source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPartition {
    pub domain: usize,
    pub meta_train: Vec<usize>,
    pub meta_test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaSplit {
    pub parts: Vec<MetaPartition>,
}

/// Stratified per-domain meta-train/meta-test split of the training
/// indices. The overall meta-train size is `round(frac_tr · n)`, shared
/// among classes by largest remainder, with every class on both sides.
pub fn meta_split(ds: &DomainDataset, split: &LodoSplit, frac_tr: f64, seed: u64) -> Result<MetaSplit> {
    if !(frac_tr > 0.0 && frac_tr < 1.0) {
        return Err(Error::invalid(format!("frac_tr {frac_tr} outside (0, 1)")));
    }
    let mut parts = Vec::with_capacity(split.sources.len());
    for src in &split.sources {
        let groups = by_class(ds, src.domain, &src.train);
        if let Some((c, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
            return Err(Error::Data(format!(
                "domain `{}` has {} training example(s) of class {c}; meta split needs 2",
                ds.domain_name(src.domain),
                g.len()
            )));
        }
        let quotas = allocate(&groups, frac_tr, src.train.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2000 + src.domain as u64));
        let mut meta_train = Vec::new();
        let mut meta_test = Vec::new();
        for ((_, idx), q) in groups.into_iter().zip(quotas) {
            let mut idx = idx;
            idx.shuffle(&mut rng);
            meta_train.extend_from_slice(&idx[..q]);
            meta_test.extend_from_slice(&idx[q..]);
        }
        meta_train.sort_unstable();
        meta_test.sort_unstable();
        parts.push(MetaPartition {
            domain: src.domain,
            meta_train,
            meta_test,
        });
    }
    Ok(MetaSplit { parts })
}

fn allocate(groups: &BTreeMap<usize, Vec<usize>>, frac: f64, total: usize) -> Vec<usize> {
    let target = ((frac * total as f64).round() as usize).clamp(groups.len(), total - groups.len());
    let exact: Vec<f64> = groups.values().map(|g| frac * g.len() as f64).collect();
    let mut q: Vec<usize> = groups
        .values()
        .zip(&exact)
        .map(|(g, e)| (e.floor() as usize).clamp(1, g.len() - 1))
        .collect();
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let mut assigned: usize = q.iter().sum();
    while assigned < target {
        let Some(&i) = order.iter().find(|&&i| q[i] + 1 < sizes[i]) else {
            break;
        };
        q[i] += 1;
        assigned += 1;
        order.retain(|&j| j != i);
        order.push(i);
    }
    while assigned > target {
        let Some(i) = (0..q.len()).rev().find(|&i| q[i] > 1) else {
            break;
        };
        q[i] -= 1;
        assigned -= 1;
    }
    q
}

/// Endless mini-batch stream over groups of item ids.
///
/// Stratified: every batch takes `batch / K` items from each of the `K`
/// groups, with the remainder handed to groups in rotation. Unstratified:
/// all groups are pooled, shuffled per epoch and chunked; a pool smaller
/// than `batch` yields itself as one truncated batch.
#[derive(Clone, Debug)]
pub struct BatchIter<T: Clone> {
    groups: Vec<Vec<T>>,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    epochs: Vec<u64>,
    batch: usize,
    seed: u64,
    stratified: bool,
    emitted: usize,
}

impl<T: Clone> BatchIter<T> {
    pub fn new(groups: Vec<Vec<T>>, batch: usize, seed: u64, stratified: bool) -> Result<Self> {
        if batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        let groups: Vec<Vec<T>> = if stratified {
            groups
        } else {
            vec![groups.into_iter().flatten().collect()]
        };
        if groups.iter().any(Vec::is_empty) || groups.is_empty() {
            return Err(Error::invalid("batch_iter: empty group"));
        }
        if stratified && (batch < 2 || groups.len() < 2) {
            return Err(Error::invalid(
                "stratified batches need batch >= 2 and at least 2 groups",
            ));
        }
        let k = groups.len();
        let mut it = Self {
            groups,
            orders: vec![Vec::new(); k],
            cursors: vec![0; k],
            epochs: vec![0; k],
            batch,
            seed,
            stratified,
            emitted: 0,
        };
        for g in 0..k {
            it.reshuffle(g);
        }
        Ok(it)
    }

    fn reshuffle(&mut self, g: usize) {
        let mut order: Vec<usize> = (0..self.groups[g].len()).collect();
        let tag = ((g as u64) << 32) | self.epochs[g];
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, tag)));
        self.orders[g] = order;
        self.cursors[g] = 0;
        self.epochs[g] += 1;
    }

    fn take_from(&mut self, g: usize, n: usize, out: &mut Vec<T>) {
        for _ in 0..n {
            if self.cursors[g] == self.orders[g].len() {
                self.reshuffle(g);
            }
            let i = self.orders[g][self.cursors[g]];
            self.cursors[g] += 1;
            out.push(self.groups[g][i].clone());
        }
    }
}

impl<T: Clone> Iterator for BatchIter<T> {
    type Item = Vec<T>;

    fn next(&mut self) -> Option<Vec<T>> {
        let mut out = Vec::with_capacity(self.batch);
        if self.stratified {
            let k = self.groups.len();
            let base = self.batch / k;
            let extra = self.batch % k;
            for j in 0..k {
                let bonus = usize::from((j + k - self.emitted % k) % k < extra);
                self.take_from(j, base + bonus, &mut out);
            }
        } else {
            let n = self.groups[0].len();
            if n < self.batch {
                self.take_from(0, n, &mut out);
            } else {
                if self.orders[0].len() - self.cursors[0] < self.batch {
                    self.reshuffle(0);
                }
                self.take_from(0, self.batch, &mut out);
            }
        }
        self.emitted += 1;
        Some(out)
    }
}

/// Reads `root/<domain>/<class>/<file>.alfa`. Domains and classes are indexed
/// by sorted directory name, files are read in lexicographic order.
pub fn load_image_dir(root: &Path) -> Result<DomainDataset> {
    let domain_dirs = sorted_subdirs(root)?;
    if domain_dirs.is_empty() {
        return Err(Error::Data(format!("{}: no domain directories", root.display())));
    }
    let mut class_names: Option<Vec<String>> = None;
    let mut domains = Vec::new();
    let mut names = Vec::new();
    for (k, (dname, dpath)) in domain_dirs.iter().enumerate() {
        let classes = sorted_subdirs(dpath)?;
        let cnames: Vec<String> = classes.iter().map(|(n, _)| n.clone()).collect();
        match &class_names {
            None => class_names = Some(cnames.clone()),
            Some(expected) if *expected != cnames => {
                return Err(Error::Data(format!(
                    "domain `{dname}` has classes {cnames:?}, expected {expected:?}"
                )))
            }
            Some(_) => {}
        }
        let mut examples = Vec::new();
        for (y, (_, cpath)) in classes.iter().enumerate() {
            for file in sorted_files(cpath)? {
                let t = io::read(&file)?;
                let image = tensor_to_image(&t).map_err(|msg| Error::Format {
                    path: file.clone(),
                    msg,
                })?;
                examples.push(Example { image, y, h: k });
            }
        }
        domains.push(examples);
        names.push(dname.clone());
    }
    let ds = DomainDataset::new(domains, names, class_names.unwrap_or_default())?;
    let dims = ds.image_dims();
    for k in 0..ds.n_domains() {
        if ds.domain(k).iter().any(|e| (e.image.height(), e.image.width()) != dims) {
            return Err(Error::Data(format!("domain `{}` mixes image sizes", ds.domain_name(k))));
        }
    }
    Ok(ds)
}

/// Writes the layout read by [`load_image_dir`].
pub fn write_image_dir(ds: &DomainDataset, root: &Path) -> Result<()> {
    for k in 0..ds.n_domains() {
        let mut counters = vec![0usize; ds.n_classes()];
        for e in ds.domain(k) {
            let dir = root.join(ds.domain_name(k)).join(&ds.class_names()[e.y]);
            fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
            let path = dir.join(format!("{:06}.{IMAGE_EXT}", counters[e.y]));
            counters[e.y] += 1;
            io::write(&path, &image_to_tensor(&e.image))?;
        }
    }
    Ok(())
}

pub fn image_to_tensor(img: &ImageTensor) -> Tensor {
    Tensor::new(vec![3, img.height(), img.width()], img.data().to_vec()).expect("image sizes are consistent")
}

fn tensor_to_image(t: &Tensor) -> std::result::Result<ImageTensor, String> {
    match t.shape() {
        [3, h, w] => ImageTensor::new(*h, *w, t.data().to_vec()).map_err(|e| e.to_string()),
        other => Err(format!("expected image tensor of shape [3, H, W], got {other:?}")),
    }
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == IMAGE_EXT) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DomainDataset {
        synth_generate(&SynthSpec {
            n_per_domain: 20,
            thetas: vec![0.0, 0.01, 0.05, 0.5],
            n_classes: 2,
            image_size: 8,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn synth_has_one_domain_per_theta_and_balanced_classes() {
        let ds = small(1);
        assert_eq!(ds.n_domains(), 4);
        assert_eq!(ds.domain_names()[3], "theta_0.5");
        for k in 0..4 {
            let ones = ds.domain(k).iter().filter(|e| e.y == 1).count();
            let zeros = ds.domain(k).len() - ones;
            assert!(ones.abs_diff(zeros) <= 1);
        }
    }

    #[test]
    fn synth_theta_zero_keeps_base_images() {
        let spec = SynthSpec {
            n_per_domain: 6,
            thetas: vec![0.0],
            n_classes: 2,
            image_size: 8,
            seed: 3,
        };
        let ds = synth_generate(&spec).unwrap();
        // Replay the generator's stream for domain 0.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(3, 1));
        let mut bases: Vec<Example> = (0..6)
            .map(|i| Example {
                image: base_image(i % 2, 8, &mut rng),
                y: i % 2,
                h: 0,
            })
            .collect();
        bases.shuffle(&mut rng);
        assert_eq!(ds.domain(0), bases.as_slice());
    }

    #[test]
    fn synth_is_seeded() {
        assert_eq!(small(5), small(5));
        assert_ne!(small(5), small(6));
    }

    #[test]
    fn synth_rejects_tiny_images() {
        let spec = SynthSpec {
            image_size: 7,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&spec).is_err());
    }

    #[test]
    fn lodo_sources_and_stratification() {
        let ds = small(2);
        let split = lodo_split(&ds, 0, 0.2, 9).unwrap();
        assert_eq!(split.source_domains(), vec![1, 2, 3]);
        for s in &split.sources {
            for c in 0..2 {
                let total = ds.domain(s.domain).iter().filter(|e| e.y == c).count();
                let val = s.val.iter().filter(|&&i| ds.domain(s.domain)[i].y == c).count();
                assert!((val as f64 - 0.2 * total as f64).abs() <= 1.0);
            }
            let mut all = s.train.clone();
            all.extend(&s.val);
            all.sort_unstable();
            assert_eq!(all, (0..ds.domain(s.domain).len()).collect::<Vec<_>>());
        }
        assert!(lodo_split(&ds, 4, 0.2, 0).is_err());
        assert!(lodo_split(&ds, 0, 0.5, 0).is_err());
    }

    #[test]
    fn lodo_needs_two_domains() {
        let spec = SynthSpec {
            n_per_domain: 8,
            thetas: vec![0.0],
            n_classes: 2,
            image_size: 8,
            seed: 0,
        };
        let ds = synth_generate(&spec).unwrap();
        assert!(lodo_split(&ds, 0, 0.2, 0).is_err());
    }

    #[test]
    fn meta_split_halves_ten_examples() {
        let spec = SynthSpec {
            n_per_domain: 10,
            thetas: vec![0.0, 0.5],
            n_classes: 2,
            image_size: 8,
            seed: 4,
        };
        let ds = synth_generate(&spec).unwrap();
        let mut split = lodo_split(&ds, 0, 0.2, 0).unwrap();
        split.sources[0].train = (0..10).collect();
        split.sources[0].val.clear();
        let m = meta_split(&ds, &split, 0.5, 1).unwrap();
        let p = &m.parts[0];
        assert_eq!((p.meta_train.len(), p.meta_test.len()), (5, 5));
        assert!(p.meta_train.iter().all(|i| !p.meta_test.contains(i)));
        let mut union = p.meta_train.clone();
        union.extend(&p.meta_test);
        union.sort_unstable();
        assert_eq!(union, split.sources[0].train);
    }

    #[test]
    fn meta_split_changes_with_derived_seed() {
        let ds = small(7);
        let split = lodo_split(&ds, 3, 0.2, 0).unwrap();
        let a = meta_split(&ds, &split, 0.5, derive_seed(11, 0)).unwrap();
        let b = meta_split(&ds, &split, 0.5, derive_seed(11, 1)).unwrap();
        let a2 = meta_split(&ds, &split, 0.5, derive_seed(11, 0)).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn meta_split_rejects_singleton_classes() {
        let ds = small(7);
        let mut split = lodo_split(&ds, 3, 0.2, 0).unwrap();
        let d = split.sources[0].domain;
        let first_of_class_1 = (0..20).find(|&i| ds.domain(d)[i].y == 1).unwrap();
        split.sources[0].train = (0..20)
            .filter(|&i| ds.domain(d)[i].y == 0 || i == first_of_class_1)
            .collect();
        assert!(meta_split(&ds, &split, 0.5, 0).is_err());
    }

    #[test]
    fn stratified_batches_balance_domains() {
        let groups: Vec<Vec<usize>> = (0..3).map(|g| (g * 100..g * 100 + 50).collect()).collect();
        let it = BatchIter::new(groups, 32, 1, true).unwrap();
        for b in it.take(20) {
            assert_eq!(b.len(), 32);
            for g in 0..3 {
                let n = b.iter().filter(|&&i| i / 100 == g).count();
                assert!(n == 10 || n == 11, "{n}");
            }
        }
    }

    #[test]
    fn batches_are_seeded_and_truncate() {
        let groups = vec![(0..40).collect::<Vec<usize>>(), (40..90).collect()];
        let a: Vec<_> = BatchIter::new(groups.clone(), 32, 5, false).unwrap().take(6).collect();
        let b: Vec<_> = BatchIter::new(groups.clone(), 32, 5, false).unwrap().take(6).collect();
        assert_eq!(a, b);
        let small: Vec<_> = BatchIter::new(vec![vec![1, 2, 3]], 32, 5, false)
            .unwrap()
            .take(2)
            .collect();
        assert!(small.iter().all(|b| b.len() == 3));
        assert!(BatchIter::new(groups, 1, 0, true).is_err());
    }

    #[test]
    fn image_dir_roundtrip_and_errors() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(load_image_dir(tmp.path()).is_err());

        // 2 domains × 2 classes × 1 file
        let img = ImageTensor::filled(8, 8, [0.25, 0.5, 0.75]);
        for d in ["a", "b"] {
            for c in ["x", "y"] {
                let dir = tmp.path().join(d).join(c);
                fs::create_dir_all(&dir).unwrap();
                io::write(&dir.join("0.alfa"), &image_to_tensor(&img)).unwrap();
            }
        }
        let ds = load_image_dir(tmp.path()).unwrap();
        assert_eq!((ds.n_domains(), ds.n_classes()), (2, 2));
        assert_eq!(ds.domain(0).len() + ds.domain(1).len(), 4);
        assert_eq!(ds.domain(1)[1].y, 1);
        assert_eq!(ds, load_image_dir(tmp.path()).unwrap());

        fs::create_dir_all(tmp.path().join("b").join("z")).unwrap();
        let err = load_image_dir(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
        fs::remove_dir_all(tmp.path().join("b").join("z")).unwrap();

        let bad = tmp.path().join("a").join("x").join("1.alfa");
        fs::write(&bad, b"ALFA junk").unwrap();
        let err = load_image_dir(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("1.alfa"), "{err}");
    }

    #[test]
    fn synth_dir_roundtrip_preserves_f32_images() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = small(8);
        write_image_dir(&ds, tmp.path()).unwrap();
        let back = load_image_dir(tmp.path()).unwrap();
        assert_eq!(back.n_domains(), 4);
        assert_eq!(back.domain_names(), ds.domain_names());
        let total: usize = (0..4).map(|k| back.domain(k).len()).sum();
        assert_eq!(total, 80);
    }
}
