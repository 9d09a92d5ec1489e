//! Hand-computed and enumeration oracles, and the meta-step oracle.

use std::collections::BTreeMap;
use std::path::Path;

use alfa_core::augment::{
    hed_jitter, hed_to_rgb, make_triplet_batch, pixelate, random_affine, rgb_to_hed, warp_affine, AffineParams,
    AugmentSpec, ImageTensor,
};
use alfa_core::datasets::{
    derive_seed, load_image_dir, lodo_split, meta_split, synth_generate, write_image_dir, BatchIter, DomainDataset,
    Example, SynthSpec,
};
use alfa_core::eval::{accuracy, auroc_macro, macro_recall, pca_project, predict};
use alfa_core::losses::{
    active_components, alignment_loss, classification_loss, cov_loss, kl_divergence, mine_semi_hard, soft_class_label,
    soft_confusion_row, specific_loss, ssl_triplet_loss, total_loss, LossWeights,
};
use alfa_core::model::{
    concat_features, encode, head_beta, heads, images_to_tensor, layer_norm, EncoderConfig, FeatureMask, FeatureTriple,
    Model, ModelConfig,
};
use alfa_core::tensor::{grad_check, io, Adam, AdamConfig, ParamSet};
use alfa_core::train::{averaged_meta_gradient, erm_baseline_run, phase1_step, train_run, Batch, TrainConfig};
use alfa_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const TOL: f64 = 1e-9;

struct Checks {
    results: Vec<(String, bool)>,
}

impl Checks {
    fn new() -> Self {
        Self { results: Vec::new() }
    }

    fn check(&mut self, name: &str, ok: bool) {
        self.results.push((name.to_string(), ok));
    }

    fn close(&mut self, name: &str, got: f64, want: f64) {
        self.check(name, (got - want).abs() <= TOL);
    }

    /// Runs a fallible block; an error counts as a failed check.
    fn run(&mut self, name: &str, f: impl FnOnce(&mut Self) -> anyhow::Result<()>) {
        if let Err(e) = f(self) {
            self.results.push((format!("{name} ({e})"), false));
        }
    }

    fn verdict(self) -> Verdict {
        let failed: Vec<&str> = self.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
        let mut detail = format!(
            "{}/{} oracle checks hold",
            self.results.len() - failed.len(),
            self.results.len()
        );
        if !failed.is_empty() {
            detail.push_str(&format!("; failing: {}", failed.join(", ")));
        }
        Verdict {
            pass: failed.is_empty(),
            detail,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// `Σ p log(p/q)` with `0 log 0 = 0` and `q` floored at 1e-12, written out
/// independently of the library.
fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(1e-12).ln()))
        .sum()
}

fn layer_norm_oracle(row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    row.iter().map(|v| (v - mu) / (var + eps).sqrt()).collect()
}

fn channel(img: &ImageTensor, c: usize) -> Vec<Vec<f64>> {
    (0..img.height())
        .map(|y| (0..img.width()).map(|x| img.get(c, y, x)).collect())
        .collect()
}

fn tiny_synth(seed: u64) -> SynthSpec {
    SynthSpec {
        n_per_domain: 40,
        image_size: 8,
        seed,
        ..SynthSpec::default()
    }
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 20,
        batch: 12,
        lr: 1e-3,
        hidden: vec![16],
        embed: 6,
        val_every: 5,
        seed,
        ..TrainConfig::default()
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn engine(c: &mut Checks) {
    let g = Graph::new();
    let t = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).expect("2x2");
    c.close(
        "frobenius [[3,4],[0,0]] = 5",
        g.constant(t).frobenius_norm().map(|v| v.item()).unwrap_or(f64::NAN),
        5.0,
    );

    c.run("backward of frobenius", |c| {
        let g = Graph::new();
        let x = g.param(Tensor::row(&[3.0, 4.0]));
        let grads = g.backward(x.frobenius_norm()?)?;
        let gx = grads.get(&x).expect("tracked").data().to_vec();
        c.check(
            "d frobenius = x/|x|",
            (gx[0] - 3.0 / 5.0).abs() <= TOL && (gx[1] - 4.0 / 5.0).abs() <= TOL,
        );
        Ok(())
    });
    c.run("backward of mean relu", |c| {
        let g = Graph::new();
        let x = g.param(Tensor::row(&[-1.0, 2.0]));
        let grads = g.backward(x.relu()?.mean()?)?;
        c.check(
            "d mean relu [-1,2] = [0,0.5]",
            grads.get(&x).expect("tracked").data() == [0.0, 0.5],
        );
        Ok(())
    });
    c.run("grad_check sum of squares", |c| {
        let x = random(&[3, 3], &mut ChaCha8Rng::seed_from_u64(1));
        let err = grad_check(|_, v| v.mul(v)?.sum(), &x, 1e-5)?;
        c.check("grad_check sum of squares < 1e-6", err < 1e-6);
        Ok(())
    });
    c.run("grad_check alignment", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[6, 3], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let b = random(&[1, 2], &mut rng);
        let err = grad_check(
            |g, z| {
                let mut p = ParamSet::new();
                p.insert("head_beta.w", w.clone());
                p.insert("head_beta.b", b.clone());
                let p = p.bind(g, |_| false);
                let rows =
                    alfa_core::losses::soft_confusion_rows(&p, z, &[0, 1, 0, 1, 1, 0], &[0, 0, 1, 1, 2, 2], 2.0)?;
                Ok(alignment_loss(g, &rows, 2, &LossWeights::default())?.loss)
            },
            &x,
            1e-6,
        )?;
        c.check("grad_check alignment loss < 1e-5", err < 1e-5);
        Ok(())
    });
    c.run("adam", |c| {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut params = ParamSet::new();
        params.insert("p", Tensor::scalar(1.0));
        let names = vec!["p".to_string()];
        let mut adam = Adam::new(cfg);
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]);
        adam.step(&mut params, &names, &grads)?;
        // First step t = 1 from zero moments with gradient g.
        let (g, t) = (1.0f64, 1);
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1.powi(t));
        let v_hat = v / (1.0 - cfg.beta2.powi(t));
        let want = 1.0 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        let got = params.get("p").expect("inserted").item();
        c.close("adam first step recurrence", got, want);
        c.check("adam first step moves by ~lr", (got - 0.9).abs() < 1e-6);

        let mut adam = Adam::new(cfg);
        let mut q = ParamSet::new();
        q.insert("p", Tensor::scalar(1.0));
        let f0 = 1.0f64;
        for _ in 0..2 {
            let p = q.get("p").expect("inserted").item();
            let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(2.0 * p))]);
            adam.step(&mut q, &names, &grads)?;
        }
        let p = q.get("p").expect("inserted").item();
        c.check("two adam steps reduce p^2", p * p < f0);
        Ok(())
    });
}

fn augmentations(c: &mut Checks) {
    c.run("hed jitter determinism", |c| {
        let gray = ImageTensor::filled(6, 6, [0.5, 0.5, 0.5]);
        let a = hed_jitter(&gray, 0.5, &mut ChaCha8Rng::seed_from_u64(9))?;
        let b = hed_jitter(&gray, 0.5, &mut ChaCha8Rng::seed_from_u64(9))?;
        let moved = (0..3).any(|ch| (a.channel_mean(ch) - 0.5).abs() > 1e-6);
        c.check(
            "hed jitter reproducible under a seed and moves the means",
            a == b && moved,
        );
        Ok(())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let worst = (0..100)
        .map(|_| {
            let rgb = [
                rng.gen_range(0.05..1.0),
                rng.gen_range(0.05..1.0),
                rng.gen_range(0.05..1.0),
            ];
            let back = hed_to_rgb(rgb_to_hed(rgb));
            (0..3).map(|i| (back[i] - rgb[i]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    c.check("rgb -> hed -> rgb round trip < 1e-6", worst < 1e-6);

    c.run("rotation", |c| {
        let (a, b, cc, d) = (0.1, 0.2, 0.3, 0.4);
        let mut data = vec![a, b, cc, d];
        data.extend([0.0; 8]);
        let img = ImageTensor::new(2, 2, data)?;
        let out = warp_affine(
            &img,
            &AffineParams {
                rotation_deg: 90.0,
                translate: (0.0, 0.0),
                shear_deg: (0.0, 0.0),
            },
        );
        let want = [[b, d], [a, cc]];
        let got = channel(&out, 0);
        let ok = (0..2).all(|y| (0..2).all(|x| (got[y][x] - want[y][x]).abs() <= TOL));
        c.check("90 degree rotation of [[a,b],[c,d]] = [[b,d],[a,c]]", ok);
        Ok(())
    });
    c.run("translation", |c| {
        let w = 8;
        let mut data = Vec::new();
        for _ in 0..3 * w {
            data.extend((0..w).map(|x| x as f64 / w as f64));
        }
        let img = ImageTensor::new(w, w, data)?;
        let spec = AugmentSpec {
            translate: (0.5, 0.5),
            ..AugmentSpec::identity()
        };
        let ok = (0..8).all(|seed| {
            let out = channel(&random_affine(&img, &spec, &mut ChaCha8Rng::seed_from_u64(seed)), 0);
            let edge = |v: f64| v.abs() < 1e-12 || (v - (w - 1) as f64 / w as f64).abs() < 1e-12;
            (0..w).filter(|&x| edge(out[0][x])).count() >= w / 2
        });
        c.check("translation 0.5 border-fills at least half the columns", ok);
        Ok(())
    });
    c.run("pixelate", |c| {
        let mut data = vec![0.0, 1.0, 0.0, 1.0];
        data.extend([0.0; 8]);
        let out = pixelate(&ImageTensor::new(2, 2, data)?, 2)?;
        c.check(
            "pixelate 2 of [[0,1],[0,1]] = 0.5",
            channel(&out, 0).iter().flatten().all(|&v| (v - 0.5).abs() <= TOL),
        );
        Ok(())
    });
    c.run("triplet batch determinism", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool: Vec<ImageTensor> = (0..5)
            .map(|_| ImageTensor::new(6, 6, (0..108).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("6x6"))
            .collect();
        let refs: Vec<&ImageTensor> = pool.iter().collect();
        let a = make_triplet_batch(&refs, &AugmentSpec::default(), 8, 17)?;
        let b = make_triplet_batch(&refs, &AugmentSpec::default(), 8, 17)?;
        c.check("triplet batch identical under a seed", a == b);
        Ok(())
    });
}

fn image_bytes(ds: &DomainDataset) -> Vec<u8> {
    (0..ds.n_domains())
        .flat_map(|k| ds.domain(k).iter())
        .flat_map(|e| io::encode(&alfa_core::datasets::image_to_tensor(&e.image)))
        .collect()
}

fn files_equal(a: &Path, b: &Path) -> anyhow::Result<bool> {
    let mut fa: Vec<_> = walk(a)?;
    let mut fb: Vec<_> = walk(b)?;
    fa.sort();
    fb.sort();
    if fa
        .iter()
        .map(|p| p.strip_prefix(a).ok())
        .ne(fb.iter().map(|p| p.strip_prefix(b).ok()))
    {
        return Ok(false);
    }
    for (x, y) in fa.iter().zip(&fb) {
        if std::fs::read(x)? != std::fs::read(y)? {
            return Ok(false);
        }
    }
    Ok(!fa.is_empty())
}

pub fn walk(root: &Path) -> anyhow::Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let p = entry?.path();
        if p.is_dir() {
            out.extend(walk(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

fn data(c: &mut Checks, work: &Path) {
    c.run("synth determinism", |c| {
        let a = synth_generate(&tiny_synth(5))?;
        let b = synth_generate(&tiny_synth(5))?;
        c.check(
            "synthetic dataset bytes identical under a seed",
            image_bytes(&a) == image_bytes(&b),
        );
        Ok(())
    });
    c.run("val stratification", |c| {
        let ds = synth_generate(&SynthSpec {
            image_size: 8,
            seed: 6,
            ..SynthSpec::default()
        })?;
        let split = lodo_split(&ds, 0, 0.2, 1)?;
        let mut ok = true;
        for part in &split.sources {
            for y in 0..ds.n_classes() {
                let count = ds.domain(part.domain).iter().filter(|e| e.y == y).count() as f64;
                let val = part.val.iter().filter(|&&i| ds.domain(part.domain)[i].y == y).count() as f64;
                ok &= (val - 0.2 * count).abs() <= 1.0;
            }
        }
        c.check("val split per class within 1 of val_frac x count", ok);
        Ok(())
    });
    c.run("meta split derivation", |c| {
        let ds = synth_generate(&tiny_synth(7))?;
        let split = lodo_split(&ds, 0, 0.2, 1)?;
        let e1 = meta_split(&ds, &split, 0.5, derive_seed(3, 1))?;
        let e1b = meta_split(&ds, &split, 0.5, derive_seed(3, 1))?;
        let e2 = meta_split(&ds, &split, 0.5, derive_seed(3, 2))?;
        c.check(
            "meta splits repeat per derived seed and differ across epochs",
            e1 == e1b && e1 != e2,
        );
        Ok(())
    });
    c.run("image dir fixture", |c| {
        let root = work.join("fixture");
        // Dyadic intensities survive the f32 payload exactly.
        let img = |v: f64| ImageTensor::filled(4, 4, [v, v, v]);
        let domains = (0..2)
            .map(|h| {
                (0..2)
                    .map(|y| Example {
                        image: img(0.125 + 0.25 * (2 * h + y) as f64),
                        y,
                        h,
                    })
                    .collect()
            })
            .collect();
        let ds = DomainDataset::new(domains, vec!["d0".into(), "d1".into()], vec!["c0".into(), "c1".into()])?;
        write_image_dir(&ds, &root)?;
        let a = load_image_dir(&root)?;
        let b = load_image_dir(&root)?;
        let total: usize = (0..a.n_domains()).map(|k| a.domain(k).len()).sum();
        c.check(
            "2 domains x 2 classes x 1 file -> 2, 2, 4",
            a.n_domains() == 2 && a.n_classes() == 2 && total == 4,
        );
        c.check("re-load yields identical indices and pixels", a == b && a == ds);
        Ok(())
    });
    c.run("stratified batches", |c| {
        let groups: Vec<Vec<(usize, usize)>> = (0..3).map(|g| (0..50 + 7 * g).map(|i| (g, i)).collect()).collect();
        let it = BatchIter::new(groups, 32, 8, true)?;
        let ok = it.take(40).all(|batch| {
            (0..3).all(|g| {
                let n = batch.iter().filter(|e| e.0 == g).count();
                n == 10 || n == 11
            })
        });
        c.check("stratified 3 domains x batch 32 -> counts in {10,11}", ok);
        Ok(())
    });
}

fn small_model(mask: FeatureMask, seed: u64) -> alfa_core::Result<Model> {
    let enc = EncoderConfig {
        input: 3 * 4 * 4,
        hidden: vec![5],
        embed: 3,
    };
    Model::init(ModelConfig::new(enc, 2, 3, mask), seed)
}

fn model(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let images: Vec<ImageTensor> = (0..4)
        .map(|_| ImageTensor::new(4, 4, (0..48).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("4x4"))
        .collect();
    let refs: Vec<&ImageTensor> = images.iter().collect();

    c.run("encoder isolation", |c| {
        let m = small_model(FeatureMask::ALL, 1)?;
        let mut perturbed = m.params.clone();
        for v in perturbed.get_mut("alpha.w0").expect("exists").data_mut() {
            *v += 0.25;
        }
        let features = |p: &ParamSet| -> alfa_core::Result<(Vec<u64>, Vec<u64>, Vec<u64>)> {
            let g = Graph::new();
            let b = p.bind(&g, |_| false);
            let t = encode(&m.config, &b, g.constant(images_to_tensor(&refs)?))?;
            Ok((
                bits(&t.require(alfa_core::model::Extractor::Alpha)?.value()),
                bits(&t.require(alfa_core::model::Extractor::Beta)?.value()),
                bits(&t.require(alfa_core::model::Extractor::Gamma)?.value()),
            ))
        };
        let before = features(&m.params)?;
        let after = features(&perturbed)?;
        c.check(
            "perturbing alpha leaves z_beta, z_gamma bitwise unchanged",
            before.1 == after.1 && before.2 == after.2 && before.0 != after.0,
        );

        let mut pb = m.params.clone();
        for v in pb.get_mut("beta.w0").expect("exists").data_mut() {
            *v -= 0.3;
        }
        let gamma_logits = |p: &ParamSet| -> alfa_core::Result<Vec<u64>> {
            let g = Graph::new();
            let b = p.bind(&g, |_| false);
            let t = encode(&m.config, &b, g.constant(images_to_tensor(&refs)?))?;
            Ok(bits(
                &heads(&m.config, &b, &t, m.config.mask)?
                    .gamma
                    .expect("domain head")
                    .value(),
            ))
        };
        c.check(
            "domain head invariant to beta perturbation",
            gamma_logits(&m.params)? == gamma_logits(&pb)?,
        );

        // A loss reading only z_beta leaves the other encoders without gradient.
        let g = Graph::new();
        let b = m.params.bind(&g, |_| true);
        let t = encode(&m.config, &b, g.constant(images_to_tensor(&refs)?))?;
        let loss = classification_loss(
            head_beta(&b, t.require(alfa_core::model::Extractor::Beta)?)?,
            &[0, 1, 1, 0],
        )?;
        let grads = b.gradients(&g.backward(loss)?);
        let isolated = grads
            .iter()
            .filter(|(n, _)| n.starts_with("alpha.") || n.starts_with("gamma."))
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0));
        c.check("z_beta-only loss has zero gradient on alpha and gamma", isolated);
        Ok(())
    });
    c.run("layer norm", |c| {
        let g = Graph::new();
        let ln = |x: Tensor| -> alfa_core::Result<Tensor> {
            let d = x.shape()[1];
            Ok(layer_norm(
                g.constant(x),
                g.constant(Tensor::full(&[1, d], 1.0)),
                g.constant(Tensor::zeros(&[1, d])),
                1e-5,
            )?
            .value())
        };
        let out = ln(Tensor::row(&[1.0, 3.0]))?;
        let want = layer_norm_oracle(&[1.0, 3.0], 1e-5);
        c.check(
            "layer norm [1,3] = [-1,1] within eps",
            out.data().iter().zip(&want).all(|(a, b)| (a - b).abs() <= TOL) && (out.data()[1] - 1.0).abs() < 1e-5,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[20, 16], &mut rng).map(|v| 3.0 * v + 1.0);
        let y = ln(x)?;
        let ok = (0..20).all(|r| {
            let row = y.row_slice(r);
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            mu.abs() < 1e-10 && (var - 1.0).abs() < 1e-4
        });
        c.check("layer norm rows have mean < 1e-10 and variance within 1e-4 of 1", ok);
        Ok(())
    });
    c.run("concat placement", |c| {
        let cfg = small_model(FeatureMask::ALL, 1)?.config;
        let mut p = ParamSet::new();
        for e in ["alpha", "beta", "gamma"] {
            p.insert(format!("ln.{e}.gain"), Tensor::full(&[1, 3], 1.0));
            p.insert(format!("ln.{e}.bias"), Tensor::zeros(&[1, 3]));
        }
        let g = Graph::new();
        let b = p.bind(&g, |_| false);
        let marker = |row: [f64; 3]| g.constant(Tensor::from_rows(&[row.to_vec(), row.to_vec()]).expect("2x3"));
        let t = FeatureTriple {
            alpha: Some(marker([1.0, 2.0, 4.0])),
            beta: Some(marker([7.0, 7.0, 9.0])),
            gamma: Some(marker([10.0, 0.0, -30.0])),
        };
        let mask: FeatureMask = "ag".parse()?;
        let out = concat_features(&cfg, &b, &t, mask)?.value();
        let mut want = layer_norm_oracle(&[1.0, 2.0, 4.0], 1e-5);
        want.extend(layer_norm_oracle(&[10.0, 0.0, -30.0], 1e-5));
        let ok = out.shape() == [2, 6]
            && (0..2).all(|r| out.row_slice(r).iter().zip(&want).all(|(a, b)| (a - b).abs() <= TOL));
        c.check("mask (1,0,1) concatenates [alpha | gamma]", ok);
        Ok(())
    });
}

fn losses(c: &mut Checks) {
    c.run("kl", |c| {
        c.close(
            "KL([1,0] || [.5,.5]) = log 2",
            kl_divergence(&[1.0, 0.0], &[0.5, 0.5])?,
            2f64.ln(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ok = true;
        for _ in 0..1000 {
            let n = rng.gen_range(2..6);
            let mut draw = || {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (p, q) = (draw(), draw());
            ok &= kl_divergence(&p, &q)? >= 0.0;
        }
        c.check("KL >= 0 on 1000 random pairs", ok);
        Ok(())
    });
    c.run("triplet", |c| {
        let g = Graph::new();
        let r = |v: [f64; 2]| g.constant(Tensor::row(&v));
        let l1 = ssl_triplet_loss(r([0.0, 0.0]), r([0.0, 0.0]), r([2.0, 0.0]), 1.5)?.item();
        c.close(
            "triplet far negative = max(0 - 2 + 1.5, 0) = 0",
            l1,
            (0.0f64 - 2.0 + 1.5).max(0.0),
        );
        let l2 = ssl_triplet_loss(r([0.0, 0.0]), r([1.0, 0.0]), r([1.2, 0.0]), 1.5)?.item();
        c.close("triplet near negative = 1 - 1.2 + 1.5 = 1.3", l2, 1.0 - 1.2 + 1.5);
        Ok(())
    });
    c.run("mining", |c| {
        // Anchor 0 at the origin, positive at 0.4, negatives at 0.5, 0.9, 3.0.
        let z = Tensor::from_rows(&[vec![0.0], vec![0.4], vec![0.5], vec![0.9], vec![3.0]])?;
        let triples = mine_semi_hard(&z, &[0, 0, 1, 2, 3], 0.7)?;
        let chosen = triples.iter().find(|t| t.0 == 0 && t.1 == 1).map(|t| t.2);
        let band: Vec<usize> = (2..5)
            .filter(|&k| z.get2(k, 0) > 0.4 && z.get2(k, 0) < 0.4 + 0.7)
            .collect();
        let nearest = band
            .iter()
            .copied()
            .min_by(|&a, &b| z.get2(a, 0).total_cmp(&z.get2(b, 0)));
        c.check(
            "semi-hard picks the nearest negative in (0.4, 1.1)",
            chosen.is_some() && chosen == nearest && chosen == Some(2),
        );

        let z = Tensor::from_rows(&[vec![0.0], vec![0.4], vec![2.0], vec![3.0]])?;
        let triples = mine_semi_hard(&z, &[0, 0, 1, 2], 0.7)?;
        let chosen = triples.iter().find(|t| t.0 == 0 && t.1 == 1).map(|t| t.2);
        c.check("empty band falls back to the closest negative", chosen == Some(2));
        Ok(())
    });
    c.run("soft class label", |c| {
        let p = soft_class_label(0, 3, 0.9, true)?;
        let want = [1.0 / 1.9, 0.45 / 1.9, 0.45 / 1.9];
        c.check(
            "normalized soft label = (1, .45, .45)/1.9",
            p.iter().zip(want).all(|(a, b)| (a - b).abs() <= TOL),
        );
        c.check(
            "normalized soft label to 6 digits",
            (p[0] - 0.526316).abs() < 5e-7 && (p[1] - 0.236842).abs() < 5e-7,
        );
        Ok(())
    });
    c.run("tempered confusion row", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = ParamSet::new();
        p.insert("head_beta.w", random(&[4, 3], &mut rng));
        p.insert("head_beta.b", random(&[1, 3], &mut rng));
        let g = Graph::new();
        let b = p.bind(&g, |_| false);
        let z = g.constant(random(&[5, 4], &mut rng).map(|v| 10.0 * v));
        let row = soft_confusion_row(&b, z, &[0, 1, 0, 1, 0], &[0, 0, 0, 1, 1], 0, 0, 1e6)?.expect("class present");
        let dev = row
            .value()
            .data()
            .iter()
            .map(|v| (v - 1.0 / 3.0).abs())
            .fold(0.0, f64::max);
        c.check("tau = 1e6 gives a uniform row within 1e-5", dev < 1e-5);
        Ok(())
    });
    c.run("alignment scalar", |c| {
        let g = Graph::new();
        let s1 = [1.0, 0.0];
        let pc = soft_class_label(0, 2, 0.9, true)?;
        let rows = BTreeMap::from([
            ((0, 0), g.constant(Tensor::row(&s1))),
            ((1, 0), g.constant(Tensor::row(&pc))),
        ]);
        let got = alignment_loss(&g, &rows, 2, &LossWeights::default())?.loss.item();
        let s2 = [1.0 / 1.9, 0.9 / 1.9];
        let want = (kl_oracle(&s1, &s2)
            + kl_oracle(&s2, &s1)
            + kl_oracle(&s2, &s2)
            + kl_oracle(&s2, &s2)
            + kl_oracle(&s1, &s2)
            + kl_oracle(&s2, &s1))
            / 6.0;
        c.check(
            "alignment two domains one class = (1/6) x six KLs",
            (got - want).abs() <= TOL * want.abs().max(1.0),
        );
        Ok(())
    });
    c.run("cross entropies", |c| {
        let g = Graph::new();
        let l = specific_loss(g.constant(Tensor::zeros(&[3, 4])), &[0, 3, 2])?.item();
        c.close("uniform domain logits, 4 domains = log 4", l, 4f64.ln());
        let l = classification_loss(g.constant(Tensor::zeros(&[2, 2])), &[0, 1])?.item();
        c.close("uniform class logits, 2 classes = log 2", l, 2f64.ln());
        let z = g.constant(Tensor::from_rows(&[vec![1.0], vec![-1.0]])?);
        // C = (1*1 + (-1)(-1)) / (2 - 1)
        c.close(
            "cov of [1,-1] with itself = 2",
            cov_loss(z, z)?.item(),
            (1.0 + 1.0) / 1.0,
        );
        let comps = [
            Some(g.constant(Tensor::scalar(1.3))),
            None,
            None,
            None,
            None,
            None,
            None,
        ];
        let (_, report) = total_loss(&g, &comps, &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])?;
        c.close(
            "total with weights (2,0,...) and L_ssl 1.3 = 2.6",
            report.total,
            2.0 * 1.3,
        );
        Ok(())
    });
}

fn training(c: &mut Checks, work: &Path) {
    c.run("beta-only step", |c| {
        let ds = synth_generate(&tiny_synth(14))?;
        let split = lodo_split(&ds, 0, 0.2, 1)?;
        let mask: FeatureMask = "b".parse()?;
        let cfg = TrainConfig { mask, ..tiny_train(1) };
        let mut m = Model::init(ModelConfig::new(cfg.encoder(ds.input_size()), 2, 3, mask), 2)?;
        let untouched = ["alpha.", "gamma.", "ln.alpha.", "ln.gamma.", "head_gamma."];
        let absent = m.params.names().all(|n| !untouched.iter().any(|p| n.starts_with(p)));
        let refs: Vec<_> = split
            .train_refs()
            .into_iter()
            .flat_map(|v| v.into_iter().take(4))
            .collect();
        let batch = Batch::gather(&ds, &split, &refs)?;
        let mut adam = cfg.adam();
        let out = phase1_step(&mut m, &mut adam, &batch, &cfg, 3)?;
        let still_absent = m.params.names().all(|n| !untouched.iter().any(|p| n.starts_with(p)));
        c.check(
            "mask (0,1,0) has no alpha/gamma parameters before or after a step",
            absent && still_absent && out.report.total.is_finite(),
        );
        c.check(
            "mask (a) keeps only L_ssl and L_c",
            active_components("a".parse()?) == [true, false, false, false, false, false, true],
        );
        Ok(())
    });
    c.run("smoke trend", |c| {
        let mut deltas = Vec::new();
        for seed in 0..5 {
            let ds = synth_generate(&tiny_synth(20 + seed))?;
            let split = lodo_split(&ds, 3, 0.2, seed)?;
            let cfg = TrainConfig {
                iterations: 200,
                phase2: false,
                val_every: 200,
                ..tiny_train(seed)
            };
            let run = train_run(&ds, &split, &cfg)?;
            let mean = |r: &[(usize, alfa_core::losses::LossReport)]| {
                r.iter().map(|x| x.1.total).sum::<f64>() / r.len() as f64
            };
            deltas.push(mean(&run.losses[180..]) - mean(&run.losses[..20]));
        }
        deltas.sort_by(f64::total_cmp);
        c.check(
            "total loss decreases over 200 steps (median of 5 seeds)",
            deltas[2] < 0.0,
        );
        Ok(())
    });
    c.run("meta hand example", |c| {
        let mut omega = ParamSet::new();
        omega.insert("w", Tensor::scalar(1.0));
        let f = |p: &ParamSet| -> alfa_core::Result<(f64, BTreeMap<String, Tensor>)> {
            let w = p.get("w").expect("present").item();
            Ok((0.5 * w * w, BTreeMap::from([("w".to_string(), Tensor::scalar(w))])))
        };
        let out = alfa_core::train::first_order_meta(&omega, 0.1, &f, &f)?;
        c.close(
            "inner step 1 - 0.1 x 1 = 0.9",
            out.adapted.get("w").expect("present").item(),
            0.9,
        );
        c.close("meta loss 0.5 x 0.81 = 0.405", out.meta_loss, 0.5 * 0.81);
        c.close("first-order meta gradient 0.9", out.gradient["w"].item(), 0.9);
        Ok(())
    });
    c.run("run determinism", |c| {
        let ds = synth_generate(&tiny_synth(15))?;
        let split = lodo_split(&ds, 1, 0.2, 2)?;
        let a = train_run(&ds, &split, &tiny_train(4))?;
        let b = train_run(&ds, &split, &tiny_train(4))?;
        let same = a.losses == b.losses
            && a.validation == b.validation
            && a.meta_losses == b.meta_losses
            && a.best.params == b.best.params;
        c.check("same config and seed give bitwise-identical history", same);
        Ok(())
    });
    c.run("erm separable", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut domain = |h: usize| -> Vec<Example> {
            (0..40)
                .map(|i| {
                    let y = i % 2;
                    let base = if y == 0 { 0.25 } else { 0.75 };
                    let data = (0..48).map(|_| base + rng.gen_range(-0.1..0.1)).collect();
                    Example {
                        image: ImageTensor::new(4, 4, data).expect("4x4"),
                        y,
                        h,
                    }
                })
                .collect()
        };
        let ds = DomainDataset::new(
            vec![domain(0), domain(1)],
            vec!["src".into(), "tgt".into()],
            vec!["dark".into(), "light".into()],
        )?;
        let split = lodo_split(&ds, 1, 0.2, 3)?;
        let cfg = TrainConfig {
            iterations: 500,
            ..tiny_train(5)
        };
        let run = erm_baseline_run(&ds, &split, &cfg)?;
        let refs: Vec<_> = split.train_refs().concat();
        let images: Vec<&ImageTensor> = refs.iter().map(|&r| &ds.example(r).image).collect();
        let labels: Vec<usize> = refs.iter().map(|&r| ds.example(r).y).collect();
        let acc = predict(&run.last, &images, &labels)?.accuracy()?;
        c.check(
            "ERM reaches 100% train accuracy on a separable toy set in 500 steps",
            acc == 100.0,
        );

        let ds3 = synth_generate(&tiny_synth(17))?;
        let split3 = lodo_split(&ds3, 0, 0.2, 4)?;
        let permuted = ds3.with_permuted_domain_labels(&[2, 0, 3, 1]);
        let a = erm_baseline_run(&ds3, &split3, &tiny_train(6))?;
        let b = erm_baseline_run(&permuted, &split3, &tiny_train(6))?;
        c.check(
            "ERM ignores domain labels (permuted run bitwise identical)",
            a.losses == b.losses && a.best.params == b.best.params,
        );
        Ok(())
    });
    c.run("cli determinism", |c| {
        let cfg = work.join("tiny.cfg");
        std::fs::write(
            &cfg,
            "synth_n_per_domain=40\nimage_size=8\nbatch=12\nhidden=16\nembed=6\nval_every=5\nlr=0.001\n",
        )?;
        let run = |out: &Path| {
            crate::run_alfa(&[
                "train",
                "--config",
                cfg.to_str().expect("utf-8 path"),
                "--iterations",
                "10",
                "--seed",
                "7",
                "--target",
                "theta_0.5",
                "--out",
                out.to_str().expect("utf-8 path"),
            ])
        };
        let (a, b) = (work.join("train7a"), work.join("train7b"));
        let codes = (run(&a)?, run(&b)?);
        c.check(
            "`train --seed 7` twice writes identical files",
            codes == (0, 0) && files_equal(&a, &b)?,
        );
        Ok(())
    });
}

fn metrics(c: &mut Checks) {
    c.run("metrics", |c| {
        let preds = [0, 1, 1, 0];
        let labels = [0, 1, 0, 0];
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        c.close(
            "accuracy [0,1,1,0] vs [0,1,0,0] = 75",
            accuracy(&preds, &labels)?,
            100.0 * correct as f64 / 4.0,
        );
        c.close(
            "macro recall (1/2 + 2/2)/2 = 75",
            macro_recall(&[0, 1, 1, 1], &[0, 0, 1, 1], 2)?,
            100.0 * (0.5 + 1.0) / 2.0,
        );
        c.close(
            "constant predictor on balanced labels = 50",
            macro_recall(&[0, 0, 0, 0], &[0, 0, 1, 1], 2)?,
            50.0,
        );

        let s = [0.9, 0.4, 0.6, 0.1];
        let y = [1, 1, 0, 0];
        let scores = Tensor::new(vec![4, 2], s.iter().flat_map(|&v| [1.0 - v, v]).collect())?;
        let pos: Vec<f64> = (0..4).filter(|&i| y[i] == 1).map(|i| s[i]).collect();
        let neg: Vec<f64> = (0..4).filter(|&i| y[i] == 0).map(|i| s[i]).collect();
        let ordered = pos
            .iter()
            .flat_map(|p| {
                neg.iter().map(move |n| {
                    if p > n {
                        1.0
                    } else if p == n {
                        0.5
                    } else {
                        0.0
                    }
                })
            })
            .sum::<f64>();
        let want = 100.0 * ordered / (pos.len() * neg.len()) as f64;
        c.close("AUROC by pair enumeration = 75", auroc_macro(&scores, &y)?, want);
        c.check("AUROC hand case is 75", want == 75.0);

        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let pts: Vec<[f64; 2]> = (0..12)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let (sn, cs) = 0.7f64.sin_cos();
        let rows: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| vec![cs * p[0] - sn * p[1] + 5.0, sn * p[0] + cs * p[1] - 2.0])
            .collect();
        let proj = pca_project(&Tensor::from_rows(&rows)?, 2)?;
        let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let ok = (0..12).all(|i| {
            (0..12).all(|j| (dist(proj.row_slice(i), proj.row_slice(j)) - dist(&pts[i], &pts[j])).abs() < 1e-8)
        });
        c.check("PCA of 2-D data preserves pairwise distances", ok);
        Ok(())
    });
}

pub fn criterion2(work: &Path) -> anyhow::Result<Verdict> {
    let mut c = Checks::new();
    engine(&mut c);
    augmentations(&mut c);
    data(&mut c, work);
    model(&mut c);
    losses(&mut c);
    training(&mut c, work);
    metrics(&mut c);
    Ok(c.verdict())
}

type Objective = Box<dyn Fn(&ParamSet) -> alfa_core::Result<(f64, BTreeMap<String, Tensor>)>>;

/// `½ Σ_i a_i (ω_i − b_i)²` over scalar parameters `w0, w1, ...`.
fn quadratic(a: Vec<f64>, b: Vec<f64>) -> Objective {
    Box::new(move |p: &ParamSet| {
        let mut loss = 0.0;
        let mut grad = BTreeMap::new();
        for i in 0..a.len() {
            let w = p.get(&format!("w{i}")).expect("present").item();
            loss += 0.5 * a[i] * (w - b[i]) * (w - b[i]);
            grad.insert(format!("w{i}"), Tensor::scalar(a[i] * (w - b[i])));
        }
        Ok((loss, grad))
    })
}

/// The domain-averaged meta update on random scalar quadratics against the
/// explicit inner-step / outer-gradient / Adam computation.
pub fn criterion3() -> anyhow::Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7a);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let lr_inner = rng.gen_range(0.0..1.0);
        let lr_outer = rng.gen_range(1e-4..0.1);
        let omega0: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut draw = |lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        let coeffs: Vec<[Vec<f64>; 4]> = (0..k)
            .map(|_| [draw(0.1, 2.0), draw(-2.0, 2.0), draw(0.1, 2.0), draw(-2.0, 2.0)])
            .collect();

        let mut omega = ParamSet::new();
        for (i, w) in omega0.iter().enumerate() {
            omega.insert(format!("w{i}"), Tensor::scalar(*w));
        }
        let tasks: Vec<(Objective, Objective)> = coeffs
            .iter()
            .map(|[a, b, c, d]| (quadratic(a.clone(), b.clone()), quadratic(c.clone(), d.clone())))
            .collect();
        let (loss, grad) = averaged_meta_gradient(&omega, lr_inner, &tasks)?.expect("tasks present");

        // Explicit: ω̃ = ω − lr ∇f_tr(ω); loss f_te(ω̃); gradient ∇f_te(ω̃); averaged over tasks.
        let mut want_loss = 0.0;
        let mut want_grad = vec![0.0; n];
        for [a, b, c, d] in &coeffs {
            for i in 0..n {
                let adapted = omega0[i] - lr_inner * a[i] * (omega0[i] - b[i]);
                want_loss += 0.5 * c[i] * (adapted - d[i]).powi(2);
                want_grad[i] += c[i] * (adapted - d[i]);
            }
        }
        want_loss /= k as f64;
        want_grad.iter_mut().for_each(|g| *g /= k as f64);
        worst = worst.max((loss - want_loss).abs());
        for i in 0..n {
            worst = worst.max((grad[&format!("w{i}")].item() - want_grad[i]).abs());
        }

        let cfg = AdamConfig {
            lr: lr_outer,
            ..AdamConfig::default()
        };
        let names: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        Adam::new(cfg).step(&mut omega, &names, &grad)?;
        for i in 0..n {
            // First Adam step: bias-corrected moments are g and g².
            let g = want_grad[i];
            let want = omega0[i] - lr_outer * g / ((g * g).sqrt() + cfg.eps);
            worst = worst.max((omega.get(&names[i]).expect("present").item() - want).abs());
        }
    }
    Ok(Verdict {
        pass: worst <= 1e-10,
        detail: format!("100 random (omega, lr) draws; max abs deviation {worst:.2e} (tolerance 1e-10)"),
    })
}
