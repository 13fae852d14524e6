//! Synthetic multiple-instance dataset, vocabulary and their files.
//!
//! Every class has a unit prototype. An image is a bag of `N_p` patches:
//! for each positive class, 1–3 patches are the prototype plus Gaussian
//! noise; the rest are background noise. Classes come in co-occurring
//! pairs, which also drive the stand-in language-model responses.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::text_embed;
use crate::crg::{render_response, QueryLog, RelationType, Strength};
use crate::error::{Error, Result};
use crate::files;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchBag {
    pub id: usize,
    pub split: Split,
    /// `N_p × d_in` raw patches.
    pub patches: Tensor,
    pub labels: Vec<bool>,
    /// Planted patch indices per positive class.
    pub planted: BTreeMap<usize, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub names: Vec<String>,
    pub seen_mask: Vec<bool>,
    pub embeddings: Vec<Vec<f64>>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.names.len();
        if self.seen_mask.len() != c || self.embeddings.len() != c {
            return Err(Error::Config(format!(
                "vocabulary has {c} names, {} mask entries, {} embeddings",
                self.seen_mask.len(),
                self.embeddings.len()
            )));
        }
        let d = self.embeddings.first().map_or(0, Vec::len);
        if self.embeddings.iter().any(|e| e.len() != d) {
            return Err(Error::Config("embeddings have different widths".into()));
        }
        Ok(())
    }

    /// `C × d` matrix of text embeddings.
    pub fn text(&self) -> Tensor {
        Tensor::from_rows(&self.embeddings)
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&c| self.seen_mask[c]).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Vocabulary = files::read_json(path)?;
        v.validate().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        files::write_json(path, self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bags: Vec<PatchBag>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&PatchBag> {
        self.bags.iter().filter(|b| b.split == split).collect()
    }

    pub fn get(&self, id: usize) -> Option<&PatchBag> {
        self.bags.iter().find(|b| b.id == id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Dataset {
            bags: files::read_jsonl(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        files::write_jsonl(path, &self.bags)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub classes: usize,
    pub unseen: usize,
    pub images: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_in: usize,
    /// Per-coordinate standard deviation added to planted prototypes.
    pub noise: f64,
    pub seed: u64,
    pub test_fraction: f64,
    pub min_pos: usize,
    pub max_pos: usize,
    pub min_planted: usize,
    pub max_planted: usize,
    /// Probability that a sampled class brings its pair partner along.
    pub cooccurrence: f64,
    /// Noise on the anchored text embeddings.
    pub text_noise: f64,
    /// Norm scale of background patches.
    pub background: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 10,
            unseen: 2,
            images: 600,
            grid_h: 4,
            grid_w: 4,
            d_in: 32,
            noise: 0.05,
            seed: 0,
            test_fraction: 0.3,
            min_pos: 1,
            max_pos: 4,
            min_planted: 1,
            max_planted: 3,
            cooccurrence: 0.7,
            text_noise: 0.1,
            background: 1.0,
        }
    }
}

impl GenConfig {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.unseen >= self.classes {
            return Err(Error::Config(format!(
                "need 0 ≤ unseen < classes, got {} of {}",
                self.unseen, self.classes
            )));
        }
        if self.min_pos == 0 || self.min_pos > self.max_pos || self.min_planted == 0 || self.min_planted > self.max_planted {
            return Err(Error::Config("positive/planted ranges must be non-empty and start at ≥ 1".into()));
        }
        if self.max_pos * self.max_planted > self.num_patches() {
            return Err(Error::Config(format!(
                "{} positives × {} planted patches do not fit in {} patches",
                self.max_pos,
                self.max_planted,
                self.num_patches()
            )));
        }
        if self.max_pos > self.classes - self.unseen {
            return Err(Error::Config(format!(
                "{} positives per image exceed {} seen classes",
                self.max_pos,
                self.classes - self.unseen
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.cooccurrence) {
            return Err(Error::Config("test_fraction, noise or cooccurrence out of range".into()));
        }
        Ok(())
    }
}

const NAME_PAIRS: [(&str, &str); 20] = [
    ("dog", "leash"),
    ("boat", "harbor"),
    ("bird", "tree"),
    ("car", "road"),
    ("fish", "reef"),
    ("cup", "table"),
    ("horse", "field"),
    ("plane", "sky"),
    ("ski", "snow"),
    ("surfboard", "wave"),
    ("book", "shelf"),
    ("train", "rail"),
    ("cat", "sofa"),
    ("flower", "garden"),
    ("cow", "barn"),
    ("bicycle", "helmet"),
    ("kite", "park"),
    ("tent", "forest"),
    ("pizza", "plate"),
    ("clock", "tower"),
];

pub fn class_name(c: usize) -> String {
    let (a, b) = NAME_PAIRS[(c / 2) % NAME_PAIRS.len()];
    let base = if c % 2 == 0 { a } else { b };
    let round = c / (2 * NAME_PAIRS.len());
    if round == 0 {
        base.to_string()
    } else {
        format!("{base}_{round}")
    }
}

/// Pair partner of a class, if any.
pub fn partner(c: usize, classes: usize) -> Option<usize> {
    let p = c ^ 1;
    (p < classes).then_some(p)
}

pub struct Synthetic {
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    pub prototypes: Vec<Vec<f64>>,
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = Tensor::randn(&[d], 1.0, rng).into_data();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn gen_synthetic_dataset(cfg: &GenConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.classes;
    let d = cfg.d_in;
    let n_p = cfg.num_patches();
    let prototypes: Vec<Vec<f64>> = (0..c).map(|_| unit(&mut rng, d)).collect();

    // One unseen member in each of the first shuffled pairs, then any class.
    let mut pairs: Vec<usize> = (0..c.div_ceil(2)).collect();
    pairs.shuffle(&mut rng);
    let mut seen_mask = vec![true; c];
    let mut marked = 0;
    for &p in &pairs {
        if marked == cfg.unseen {
            break;
        }
        let members: Vec<usize> = [2 * p, 2 * p + 1].into_iter().filter(|&m| m < c).collect();
        if members.len() == 2 {
            seen_mask[members[rng.gen_range(0..2)]] = false;
            marked += 1;
        }
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);
    for &m in &order {
        if marked == cfg.unseen {
            break;
        }
        if seen_mask[m] {
            seen_mask[m] = false;
            marked += 1;
        }
    }

    let embeddings = (0..c)
        .map(|k| {
            text_embed(k, c, d, cfg.seed, Some((&prototypes[k], cfg.text_noise))).map(Tensor::into_data)
        })
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary {
        names: (0..c).map(class_name).collect(),
        seen_mask: seen_mask.clone(),
        embeddings,
    };

    let n_test = (cfg.images as f64 * cfg.test_fraction).round() as usize;
    let n_train = cfg.images - n_test;
    let mut bags = Vec::with_capacity(cfg.images);
    for id in 0..cfg.images {
        let split = if id < n_train { Split::Train } else { Split::Test };
        let eligible: Vec<usize> = (0..c)
            .filter(|&k| split == Split::Test || seen_mask[k])
            .collect();
        let want = rng.gen_range(cfg.min_pos..=cfg.max_pos).min(eligible.len());
        let mut positives: Vec<usize> = Vec::new();
        while positives.len() < want {
            let k = eligible[rng.gen_range(0..eligible.len())];
            if positives.contains(&k) {
                continue;
            }
            positives.push(k);
            if let Some(p) = partner(k, c) {
                let bring = rng.gen::<f64>() < cfg.cooccurrence;
                if bring && positives.len() < want && eligible.contains(&p) && !positives.contains(&p) {
                    positives.push(p);
                }
            }
        }
        positives.sort_unstable();
        let mut slots: Vec<usize> = (0..n_p).collect();
        slots.shuffle(&mut rng);
        let mut next = 0;
        let mut patches = Tensor::zeros(&[n_p, d]);
        let mut planted = BTreeMap::new();
        for &k in &positives {
            let count = rng.gen_range(cfg.min_planted..=cfg.max_planted);
            let mut idx: Vec<usize> = slots[next..next + count].to_vec();
            next += count;
            idx.sort_unstable();
            for &i in &idx {
                for (j, x) in patches.row_mut(i).iter_mut().enumerate() {
                    let e: f64 = rng.sample(rand_distr::StandardNormal);
                    *x = prototypes[k][j] + cfg.noise * e;
                }
            }
            planted.insert(k, idx);
        }
        let bg_std = cfg.background / (d as f64).sqrt();
        for &i in &slots[next..] {
            for x in patches.row_mut(i) {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                *x = bg_std * e;
            }
        }
        let mut labels = vec![false; c];
        for &k in &positives {
            labels[k] = true;
        }
        bags.push(PatchBag {
            id,
            split,
            patches,
            labels,
            planted,
        });
    }
    Ok(Synthetic {
        dataset: Dataset { bags },
        vocab,
        prototypes,
    })
}

/// Stand-in language-model responses: every query names the pair partner
/// as a high-strength co-occurrence, plus two weak distractors that vary
/// from query to query.
pub fn synthetic_crg_fixtures(names: &[String], queries: usize, seed: u64) -> Vec<QueryLog> {
    let c = names.len();
    let mut logs = Vec::with_capacity(c * queries);
    for k in 0..c {
        for q in 0..queries {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k * 1000 + q) as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            let mut items: Vec<(String, RelationType, Strength, String)> = Vec::new();
            let p = partner(k, c);
            if let Some(p) = p {
                items.push((
                    names[p].clone(),
                    RelationType::Cooccurrence,
                    Strength::High,
                    format!("A {} is usually seen together with a {}.", names[p], names[k]),
                ));
            }
            let mut others: Vec<usize> = (0..c).filter(|&j| j != k && Some(j) != p).collect();
            others.shuffle(&mut rng);
            for &j in others.iter().take(2) {
                let strength = if rng.gen::<f64>() < 0.5 { Strength::Low } else { Strength::Medium };
                items.push((
                    names[j].clone(),
                    RelationType::Functional,
                    strength,
                    format!("A {} is occasionally relevant to a {}.", names[j], names[k]),
                ));
            }
            let refs: Vec<(&str, RelationType, Strength, &str)> = items
                .iter()
                .map(|(n, r, s, e)| (n.as_str(), *r, *s, e.as_str()))
                .collect();
            logs.push(QueryLog {
                class: names[k].clone(),
                query_index: q,
                raw: render_response(&refs),
                parse_status: String::new(),
            });
        }
    }
    logs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    #[test]
    fn contracts_hold() {
        let cfg = GenConfig::default();
        let s = gen_synthetic_dataset(&cfg).unwrap();
        assert_eq!(s.vocab.seen_mask.iter().filter(|&&x| !x).count(), 2);
        for bag in &s.dataset.bags {
            let pos: Vec<usize> = (0..cfg.classes).filter(|&k| bag.labels[k]).collect();
            assert!((1..=4).contains(&pos.len()));
            assert_eq!(pos, bag.planted.keys().copied().collect::<Vec<_>>());
            assert!(bag.planted.values().all(|v| (1..=3).contains(&v.len())));
            if bag.split == Split::Train {
                assert!(pos.iter().all(|&k| s.vocab.seen_mask[k]));
            }
        }
        let test_unseen = s
            .dataset
            .split(Split::Test)
            .iter()
            .filter(|b| (0..cfg.classes).any(|k| b.labels[k] && !s.vocab.seen_mask[k]))
            .count();
        assert!(test_unseen > 0);
    }

    #[test]
    fn anchored_text_prefers_own_prototype() {
        let s = gen_synthetic_dataset(&GenConfig::default()).unwrap();
        for (c, t) in s.vocab.embeddings.iter().enumerate() {
            let own = dot(t, &s.prototypes[c]);
            for (k, p) in s.prototypes.iter().enumerate() {
                if k != c {
                    assert!(own > dot(t, p));
                }
            }
        }
    }

    #[test]
    fn noiseless_plants_prototypes() {
        let cfg = GenConfig {
            noise: 0.0,
            images: 20,
            ..GenConfig::default()
        };
        let s = gen_synthetic_dataset(&cfg).unwrap();
        for bag in &s.dataset.bags {
            for (&k, idx) in &bag.planted {
                for &i in idx {
                    assert_eq!(bag.patches.row(i), s.prototypes[k].as_slice());
                }
            }
        }
    }

    #[test]
    fn infeasible_and_deterministic() {
        let bad = GenConfig {
            grid_h: 2,
            grid_w: 2,
            ..GenConfig::default()
        };
        assert!(matches!(gen_synthetic_dataset(&bad), Err(Error::Config(_))));
        let a = gen_synthetic_dataset(&GenConfig::default()).unwrap();
        let b = gen_synthetic_dataset(&GenConfig::default()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.vocab, b.vocab);
    }

    #[test]
    fn fixtures_name_partner_every_query() {
        let names: Vec<String> = (0..6).map(class_name).collect();
        let logs = synthetic_crg_fixtures(&names, 3, 1);
        assert_eq!(logs.len(), 18);
        for log in &logs {
            let k = names.iter().position(|n| *n == log.class).unwrap();
            let parsed = crate::crg::parse_response(&log.raw, &log.class, log.query_index);
            assert_eq!(parsed.skipped, 0);
            assert_eq!(parsed.records[0].related, names[k ^ 1]);
            assert_eq!(parsed.records.len(), 3);
        }
    }
}
