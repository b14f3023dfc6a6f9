//! Seeded synthetic scenes: identity vectors in the complement of the code
//! bank's span, smooth in-span motion trajectories (sums of sinusoids per
//! code coordinate plus in-span noise), and token/duration content tracks.
//! Every training experiment runs against this generator, so everything here
//! is bitwise-deterministic per seed.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio_mapper::ContentFeatures;
use crate::error::{Error, Result};
use crate::latent::CodeBank;
use crate::tensor::Tensor;

/// Token vocabulary size for the content track.
pub const VOCAB: usize = 16;

/// Knobs for one scene draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Frames per scene, T ≥ 2.
    pub frames: usize,
    /// Sinusoids summed per code coordinate, K ≥ 1.
    pub sinusoids: usize,
    /// Scale of the in-span white noise added to the code coefficients.
    pub noise_level: f64,
    /// Angular frequency range in radians per frame.
    pub freq_range: (f64, f64),
    /// Amplitude range per sinusoid.
    pub amp_range: (f64, f64),
    /// Token embedding width k.
    pub embed_dim: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 32,
            sinusoids: 3,
            // Noise outside the bank span is unrecoverable by a compressed
            // autoencoder, so the default keeps it a small fraction of the
            // signal; heavier noise is exercised explicitly where needed.
            noise_level: 0.02,
            freq_range: (0.05, 0.4),
            amp_range: (0.2, 1.0),
            embed_dim: 12,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid(format!(
                "scenes need at least 2 frames, got {}",
                self.frames
            )));
        }
        if self.sinusoids == 0 {
            return Err(Error::invalid("scenes need at least 1 sinusoid"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::invalid(format!(
                "noise_level must be finite and ≥ 0, got {}",
                self.noise_level
            )));
        }
        for (label, (lo, hi)) in [("freq", self.freq_range), ("amp", self.amp_range)] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return Err(Error::invalid(format!(
                    "{label}_range must satisfy 0 ≤ lo ≤ hi, got ({lo}, {hi})"
                )));
            }
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be ≥ 1"));
        }
        Ok(())
    }
}

/// One ground-truth scene. The motion rows always lie in the generating
/// bank's span; the identity lives in its orthogonal complement.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub identity: Tensor,
    pub motion_seq: Tensor,
    pub content_tokens: Vec<usize>,
    pub durations: Vec<usize>,
    pub noise_level: f64,
}

impl SyntheticScene {
    pub fn frames(&self) -> usize {
        self.motion_seq.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.motion_seq.shape()[1]
    }

    /// Per-frame visual features `f_j = identity + motion_seq[j]`.
    pub fn visual_features(&self) -> Result<Tensor> {
        let (t, d) = (self.frames(), self.dim());
        let mut data = Vec::with_capacity(t * d);
        for j in 0..t {
            for (i, &m) in self.motion_seq.row(j).iter().enumerate() {
                data.push(self.identity.data()[i] + m);
            }
        }
        Tensor::new(&[t, d], data)
    }

    /// Content conditioning: token embeddings looked up from `table` and
    /// repeated along each token's duration.
    pub fn content_features(&self, table: &Tensor) -> Result<ContentFeatures> {
        if table.rank() != 2 || table.shape()[0] != VOCAB {
            return Err(Error::shape(format!(
                "embedding table must be [{VOCAB}, k], got {:?}",
                table.shape()
            )));
        }
        let k = table.shape()[1];
        let mut e_t = Vec::with_capacity(self.content_tokens.len() * k);
        let mut f_t_up = Vec::with_capacity(self.frames() * k);
        for (&tok, &dur) in self.content_tokens.iter().zip(&self.durations) {
            let row = table.row(tok);
            e_t.extend_from_slice(row);
            for _ in 0..dur {
                f_t_up.extend_from_slice(row);
            }
        }
        ContentFeatures::new(
            Tensor::new(&[self.content_tokens.len(), k], e_t)?,
            Tensor::new(&[self.frames(), k], f_t_up)?,
        )
    }
}

/// Orthonormal bank over `dim` features built from `codes` Gaussian rows.
pub fn random_bank(codes: usize, dim: usize, seed: u64) -> Result<CodeBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..codes * dim).map(|_| rng.sample(StandardNormal)).collect();
    CodeBank::new(Tensor::new(&[codes, dim], data)?)?.orthonormalize()
}

/// Seeded `[16, embed_dim]` Gaussian token-embedding table.
pub fn token_embedding_table(embed_dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..VOCAB * embed_dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(&[VOCAB, embed_dim], data).expect("vocab table shape")
}

/// Draws one scene. The sinusoid parameters, identity, and content track are
/// drawn before any noise, so two scenes with the same seed and different
/// noise levels share everything except the noise term.
pub fn gen_scene(seed: u64, cfg: &SceneConfig, bank: &CodeBank) -> Result<SyntheticScene> {
    cfg.validate()?;
    let (m, d) = (bank.codes(), bank.dim());
    if m >= d {
        return Err(Error::invalid(format!(
            "bank with {m} codes spans all of {d} dims; identities need a complement"
        )));
    }
    let t = cfg.frames;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // K sinusoids per code coordinate: (ω, a, ψ) triples
    let mut waves = Vec::with_capacity(m * cfg.sinusoids);
    for _ in 0..m * cfg.sinusoids {
        let w = rng.random_range(cfg.freq_range.0..=cfg.freq_range.1);
        let a = rng.random_range(cfg.amp_range.0..=cfg.amp_range.1);
        let psi = rng.random_range(0.0..TAU);
        waves.push((w, a, psi));
    }

    // identity: Gaussian pushed into the orthogonal complement of the span
    let g = Tensor::new(
        &[d],
        (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;
    let identity = g.sub(&bank.reconstruct(&bank.coeffs(&g)?)?)?;

    // content: a random composition of T into L positive durations
    let lo = (t / 8).max(1);
    let hi = (t / 4).max(lo);
    let l = rng.random_range(lo..=hi);
    let mut cuts = rand::seq::index::sample(&mut rng, t - 1, l - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect::<Vec<_>>();
    cuts.sort_unstable();
    cuts.push(t);
    let mut durations = Vec::with_capacity(l);
    let mut prev = 0;
    for c in cuts {
        durations.push(c - prev);
        prev = c;
    }
    let content_tokens: Vec<usize> = (0..l).map(|_| rng.random_range(0..VOCAB)).collect();

    // coefficients per frame: sinusoid sum plus scaled white noise (noise is
    // drawn regardless of level to keep the stream aligned across levels)
    let mut coeffs = Vec::with_capacity(t * m);
    for j in 0..t {
        for cm in 0..m {
            let mut v = 0.0;
            for k in 0..cfg.sinusoids {
                let (w, a, psi) = waves[cm * cfg.sinusoids + k];
                v += a * (w * j as f64 + psi).sin();
            }
            let eps: f64 = rng.sample(StandardNormal);
            coeffs.push(v + cfg.noise_level * eps);
        }
    }
    let motion_seq = bank.reconstruct(&Tensor::new(&[t, m], coeffs)?)?;

    Ok(SyntheticScene {
        identity,
        motion_seq,
        content_tokens,
        durations,
        noise_level: cfg.noise_level,
    })
}

/// A generated corpus with its split and provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub bank: CodeBank,
    pub scenes: Vec<SyntheticScene>,
    pub train_idx: Vec<usize>,
    pub held_out_idx: Vec<usize>,
    pub cfg: SceneConfig,
    pub seed: u64,
}

impl Dataset {
    pub fn train_scenes(&self) -> impl Iterator<Item = &SyntheticScene> {
        self.train_idx.iter().map(|&i| &self.scenes[i])
    }

    pub fn held_out_scenes(&self) -> impl Iterator<Item = &SyntheticScene> {
        self.held_out_idx.iter().map(|&i| &self.scenes[i])
    }
}

/// Generates `n_scenes` scenes and a deterministic 90/10 split (at least one
/// scene held out).
pub fn gen_dataset(
    seed: u64,
    n_scenes: usize,
    cfg: &SceneConfig,
    bank: &CodeBank,
) -> Result<Dataset> {
    if n_scenes < 2 {
        return Err(Error::invalid(format!(
            "a dataset needs at least 2 scenes to split, got {n_scenes}"
        )));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_seeds: Vec<u64> = (0..n_scenes).map(|_| rng.random()).collect();
    let scenes = scene_seeds
        .iter()
        .map(|&s| gen_scene(s, cfg, bank))
        .collect::<Result<Vec<_>>>()?;

    let mut idx: Vec<usize> = (0..n_scenes).collect();
    idx.shuffle(&mut rng);
    let held = (n_scenes / 10).max(1);
    let mut held_out_idx = idx.split_off(n_scenes - held);
    let mut train_idx = idx;
    train_idx.sort_unstable();
    held_out_idx.sort_unstable();

    Ok(Dataset {
        bank: bank.clone(),
        scenes,
        train_idx,
        held_out_idx,
        cfg: cfg.clone(),
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    n_scenes: usize,
    cfg: SceneConfig,
    train_idx: Vec<usize>,
    held_out_idx: Vec<usize>,
}

impl Dataset {
    /// Writes the corpus as a CSV bundle plus a JSON manifest. Values use
    /// Rust's shortest round-trip float formatting, so `load` is bitwise.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            seed: self.seed,
            n_scenes: self.scenes.len(),
            cfg: self.cfg.clone(),
            train_idx: self.train_idx.clone(),
            held_out_idx: self.held_out_idx.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest encoding: {e}")))?;
        fs::write(dir.join("manifest.json"), json)?;
        fs::write(dir.join("bank.csv"), self.bank.to_csv())?;

        let d = self.bank.dim();
        let mut identities = String::from("scene");
        for i in 0..d {
            let _ = write!(identities, ",i{i}");
        }
        identities.push('\n');
        let mut motion = String::from("scene,frame");
        for i in 0..d {
            let _ = write!(motion, ",m{i}");
        }
        motion.push('\n');
        let mut content = String::from("scene,position,token,duration\n");

        for (s, scene) in self.scenes.iter().enumerate() {
            let _ = write!(identities, "{s}");
            for v in scene.identity.data() {
                let _ = write!(identities, ",{v}");
            }
            identities.push('\n');
            for j in 0..scene.frames() {
                let _ = write!(motion, "{s},{j}");
                for v in scene.motion_seq.row(j) {
                    let _ = write!(motion, ",{v}");
                }
                motion.push('\n');
            }
            for (p, (&tok, &dur)) in
                scene.content_tokens.iter().zip(&scene.durations).enumerate()
            {
                let _ = writeln!(content, "{s},{p},{tok},{dur}");
            }
        }
        fs::write(dir.join("identities.csv"), identities)?;
        fs::write(dir.join("motion.csv"), motion)?;
        fs::write(dir.join("content.csv"), content)?;
        Ok(())
    }

    /// Reads a bundle produced by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
                .map_err(|e| Error::Format(format!("manifest decoding: {e}")))?;

        let bank_rows = parse_csv(&fs::read_to_string(dir.join("bank.csv"))?, 0)?;
        let m = bank_rows.len();
        let d = bank_rows.first().map_or(0, Vec::len);
        let bank = CodeBank::new(Tensor::new(&[m, d], bank_rows.concat())?)?;

        let id_rows = parse_csv(&fs::read_to_string(dir.join("identities.csv"))?, 1)?;
        let motion_rows = parse_csv(&fs::read_to_string(dir.join("motion.csv"))?, 1)?;
        let content_rows = parse_csv(&fs::read_to_string(dir.join("content.csv"))?, 1)?;

        let mut motion_by_scene: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for row in motion_rows {
            let scene = row[0] as usize;
            motion_by_scene.entry(scene).or_default().push(row[2..].to_vec());
        }
        let mut content_by_scene: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for row in content_rows {
            content_by_scene
                .entry(row[0] as usize)
                .or_default()
                .push((row[2] as usize, row[3] as usize));
        }

        let mut scenes = Vec::with_capacity(manifest.n_scenes);
        for s in 0..manifest.n_scenes {
            let id = id_rows
                .get(s)
                .filter(|r| r[0] as usize == s)
                .ok_or_else(|| Error::Format(format!("identity row for scene {s} missing")))?;
            let frames = motion_by_scene
                .remove(&s)
                .ok_or_else(|| Error::Format(format!("motion rows for scene {s} missing")))?;
            let pairs = content_by_scene
                .remove(&s)
                .ok_or_else(|| Error::Format(format!("content rows for scene {s} missing")))?;
            let t = frames.len();
            scenes.push(SyntheticScene {
                identity: Tensor::new(&[d], id[1..].to_vec())?,
                motion_seq: Tensor::new(&[t, d], frames.concat())?,
                content_tokens: pairs.iter().map(|&(tok, _)| tok).collect(),
                durations: pairs.iter().map(|&(_, dur)| dur).collect(),
                noise_level: manifest.cfg.noise_level,
            });
        }

        Ok(Dataset {
            bank,
            scenes,
            train_idx: manifest.train_idx,
            held_out_idx: manifest.held_out_idx,
            cfg: manifest.cfg,
            seed: manifest.seed,
        })
    }
}

/// Parses numeric CSV, skipping `header_lines` lines.
fn parse_csv(text: &str, header_lines: usize) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .skip(header_lines)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad CSV cell '{cell}': {e}")))
                })
                .collect()
        })
        .collect()
}
