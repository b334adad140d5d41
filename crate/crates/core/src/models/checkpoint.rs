//! Checkpoints: parameters in a `GFE1` container (kind 2 tensors, f32) plus a
//! JSON sidecar `<checkpoint>.json` describing the architecture.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FcnConfig, FcnHeadParams, GradeLogits, Mode, Parameters, PromptBank, RankingHead, ScoreMode};
use crate::error::{Error, Result};
use crate::io::{Container, EntryData, EntryKind};
use crate::tensor::Tensor;

const SIDECAR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadArchitecture {
    Ranking {
        dim: usize,
        temperature: f64,
        score_mode: ScoreMode,
        learnable: bool,
        texts: Option<Vec<String>>,
    },
    Fcn {
        config: FcnConfig,
    },
}

impl HeadArchitecture {
    /// The kind of container entry this head consumes.
    pub fn input_kind(&self) -> EntryKind {
        match self {
            HeadArchitecture::Ranking { .. } => EntryKind::Global,
            HeadArchitecture::Fcn { .. } => EntryKind::FeatureMap,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    version: u32,
    architecture: HeadArchitecture,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Ranking(RankingHead),
    Fcn(FcnHeadParams),
}

impl Model {
    pub fn architecture(&self) -> HeadArchitecture {
        match self {
            Model::Ranking(h) => HeadArchitecture::Ranking {
                dim: h.prompts.dim(),
                temperature: h.prompts.temperature,
                score_mode: h.score_mode,
                learnable: h.prompts.learnable,
                texts: h.prompts.texts.clone(),
            },
            Model::Fcn(p) => HeadArchitecture::Fcn {
                config: p.config.clone(),
            },
        }
    }

    /// Inference logits; the FCN head runs in eval mode.
    pub fn logits(&self, inputs: &Tensor) -> Result<GradeLogits> {
        match self {
            Model::Ranking(h) => h.logits(inputs),
            Model::Fcn(p) => Ok(p.forward(inputs, Mode::Eval)?.logits),
        }
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        match self {
            Model::Ranking(_) => Vec::new(),
            Model::Fcn(p) => p.buffers(),
        }
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Model::Ranking(h) => h.visit(f),
            Model::Fcn(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Model::Ranking(h) => h.visit_mut(f),
            Model::Fcn(p) => p.visit_mut(f),
        }
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn to_entry(t: &Tensor) -> EntryData {
    EntryData::Tensor {
        shape: t.shape().to_vec(),
        values: t.data().iter().map(|&v| v as f32).collect(),
    }
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let sidecar = Sidecar {
        version: SIDECAR_VERSION,
        architecture: model.architecture(),
    };
    let mut c = Container::new(serde_json::to_string(&sidecar)?);
    let mut err = None;
    model.visit(&mut |name, t| {
        if err.is_none() {
            err = c.push(name, to_entry(t)).err();
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    for (name, t) in model.buffers() {
        c.push(name, to_entry(&t))?;
    }
    c.write(path)?;
    crate::io::write_json(&sidecar_path(path), &sidecar)
}

fn tensor_entry(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor> {
    let data = c
        .get(name)
        .ok_or_else(|| Error::invalid(format!("checkpoint is missing {name}")))?;
    if data.shape() != shape {
        return Err(Error::shape(
            "load_checkpoint",
            format!("{name} stored as {:?}, architecture expects {shape:?}", data.shape()),
        ));
    }
    Tensor::new(shape.to_vec(), data.values().iter().map(|&v| v as f64).collect())
}

/// Rebuild a model from its container and sidecar. Every stored tensor must
/// be consumed and every expected tensor present.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let side_path = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(&crate::io::read_to_string(&side_path)?)?;
    if sidecar.version != SIDECAR_VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported checkpoint sidecar version {}",
            side_path.display(),
            sidecar.version
        )));
    }
    let c = Container::read(path)?;
    let mut used = BTreeSet::new();
    let model = match sidecar.architecture {
        HeadArchitecture::Ranking {
            dim,
            temperature,
            score_mode,
            learnable,
            texts,
        } => {
            let mut prompts = PromptBank::new(tensor_entry(&c, "prompts", &[5, dim])?, temperature)?;
            prompts.learnable = learnable;
            prompts.texts = texts;
            used.insert("prompts".to_string());
            Model::Ranking(RankingHead {
                prompts,
                score_mode,
            })
        }
        HeadArchitecture::Fcn { config } => {
            // Initial values are overwritten below; the seed is irrelevant.
            let mut p = FcnHeadParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
            let mut err = None;
            p.visit_mut(&mut |name, t| {
                if err.is_some() {
                    return;
                }
                match tensor_entry(&c, name, t.shape()) {
                    Ok(v) => {
                        *t = v;
                        used.insert(name.to_string());
                    }
                    Err(e) => err = Some(e),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            for (name, t) in p.buffers() {
                let v = tensor_entry(&c, &name, t.shape())?;
                p.set_buffer(&name, &v)?;
                used.insert(name);
            }
            Model::Fcn(p)
        }
    };
    if let Some(extra) = c.entries().iter().find(|e| !used.contains(&e.id)) {
        return Err(Error::invalid(format!(
            "checkpoint entry {} does not belong to the declared architecture",
            extra.id
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close_f32(a: &Tensor, b: &Tensor) -> bool {
        a.data().iter().zip(b.data()).all(|(&x, &y)| (x as f32) == (y as f32))
    }

    #[test]
    fn ranking_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = RankingHead {
            prompts: PromptBank::random(6, 0.1, 0.2, &mut rng).unwrap(),
            score_mode: ScoreMode::Cosine,
        };
        let path = dir.path().join("ranking.gfe");
        save_checkpoint(&path, &Model::Ranking(head.clone())).unwrap();
        let Model::Ranking(back) = load_checkpoint(&path).unwrap() else {
            panic!("wrong head")
        };
        assert!(back.prompts.learnable);
        assert_eq!(back.prompts.temperature, 0.2);
        assert!(close_f32(&back.prompts.embeddings, &head.prompts.embeddings));
    }

    #[test]
    fn fcn_round_trip_with_buffers() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FcnConfig {
            reduction: 4,
            ..FcnConfig::for_channels(16)
        };
        let mut p = FcnHeadParams::init(cfg, &mut rng).unwrap();
        p.blocks[1].running.mean[2] = 0.75;
        let path = dir.path().join("fcn.gfe");
        save_checkpoint(&path, &Model::Fcn(p.clone())).unwrap();
        let Model::Fcn(q) = load_checkpoint(&path).unwrap() else {
            panic!("wrong head")
        };
        assert_eq!(q.blocks[1].running.mean[2], 0.75);
        let mut pairs = Vec::new();
        p.visit(&mut |n, t| pairs.push((n.to_string(), t.clone())));
        let mut i = 0;
        q.visit(&mut |n, t| {
            assert_eq!(n, pairs[i].0);
            assert!(close_f32(t, &pairs[i].1));
            i += 1;
        });
        assert_eq!(i, pairs.len());
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = RankingHead {
            prompts: PromptBank::random(6, 0.1, 0.2, &mut rng).unwrap(),
            score_mode: ScoreMode::Cosine,
        };
        let path = dir.path().join("r.gfe");
        save_checkpoint(&path, &Model::Ranking(head)).unwrap();
        let side = sidecar_path(&path);
        let text = std::fs::read_to_string(&side).unwrap().replace("\"dim\": 6", "\"dim\": 7");
        std::fs::write(&side, text).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
