//! Prompt-embedding classifiers: the zero-shot cosine classifier and the
//! ranking-aware head with learnable per-grade prompts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GradeLogits, Parameters};
use crate::error::{Error, Result};
use crate::grade::{argmax_high, Grade, NUM_GRADES};
use crate::tensor::Tensor;

/// One embedding per grade, rows ordered No DR -> Proliferative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub embeddings: Tensor,
    pub learnable: bool,
    pub temperature: f64,
    /// Prompt texts the rows were encoded from, when known.
    pub texts: Option<Vec<String>>,
}

impl PromptBank {
    pub fn new(embeddings: Tensor, temperature: f64) -> Result<Self> {
        let [rows, _] = embeddings.dims2("PromptBank")?;
        if rows != NUM_GRADES {
            return Err(Error::shape(
                "PromptBank",
                format!("expected {NUM_GRADES} prompt rows, got {rows}"),
            ));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(PromptBank {
            embeddings,
            learnable: false,
            temperature,
            texts: None,
        })
    }

    /// Learnable prompts drawn i.i.d. from N(0, std^2).
    pub fn random<R: Rng + ?Sized>(dim: usize, std: f64, temperature: f64, rng: &mut R) -> Result<Self> {
        let mut bank = PromptBank::new(Tensor::randn(&[NUM_GRADES, dim], std, rng), temperature)?;
        bank.learnable = true;
        Ok(bank)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, g: usize) -> &[f64] {
        self.embeddings.row(g)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nonzero_norm(v: &[f64], what: &str) -> Result<f64> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::invalid(format!("{what} has zero or non-finite norm")));
    }
    Ok(n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotPrediction {
    pub grade: Grade,
    pub similarities: [f64; NUM_GRADES],
}

/// Grade whose prompt has the highest cosine similarity with the image
/// embedding; ties go to the more severe grade.
pub fn zero_shot_classify(image_emb: &[f64], prompts: &PromptBank) -> Result<ZeroShotPrediction> {
    if image_emb.len() != prompts.dim() {
        return Err(Error::shape(
            "zero_shot_classify",
            format!(
                "image embedding has dim {}, prompts have dim {}",
                image_emb.len(),
                prompts.dim()
            ),
        ));
    }
    let xn = nonzero_norm(image_emb, "image embedding")?;
    let mut similarities = [0.0; NUM_GRADES];
    for (g, s) in similarities.iter_mut().enumerate() {
        let row = prompts.row(g);
        let pn = nonzero_norm(row, "prompt row")?;
        *s = (dot(image_emb, row) / (xn * pn)).clamp(-1.0, 1.0);
    }
    Ok(ZeroShotPrediction {
        grade: Grade::from_index(argmax_high(&similarities))?,
        similarities,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Normalized inner product.
    #[default]
    Cosine,
    InnerProduct,
}

#[derive(Clone, Debug)]
pub struct RankingCache {
    inputs: Tensor,
    input_norms: Vec<f64>,
    prompt_norms: Vec<f64>,
    /// Unscaled similarities, `N x 5`.
    similarities: Tensor,
}

impl RankingCache {
    pub fn similarities(&self) -> &Tensor {
        &self.similarities
    }
}

/// `logits[n, g] = similarity(x_n, prompt_g) / temperature`.
pub fn ranking_head_forward(
    image_embs: &Tensor,
    prompts: &PromptBank,
    mode: ScoreMode,
) -> Result<(GradeLogits, RankingCache)> {
    let [n, d] = image_embs.dims2("ranking_head_forward")?;
    if d != prompts.dim() {
        return Err(Error::shape(
            "ranking_head_forward",
            format!("embedding dim {d} != prompt dim {}", prompts.dim()),
        ));
    }
    if !(prompts.temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let (input_norms, prompt_norms) = match mode {
        ScoreMode::Cosine => (
            (0..n)
                .map(|i| nonzero_norm(image_embs.row(i), "image embedding"))
                .collect::<Result<Vec<_>>>()?,
            (0..NUM_GRADES)
                .map(|g| nonzero_norm(prompts.row(g), "prompt row"))
                .collect::<Result<Vec<_>>>()?,
        ),
        ScoreMode::InnerProduct => (vec![1.0; n], vec![1.0; NUM_GRADES]),
    };
    let mut sims = Vec::with_capacity(n * NUM_GRADES);
    for i in 0..n {
        for g in 0..NUM_GRADES {
            sims.push(dot(image_embs.row(i), prompts.row(g)) / (input_norms[i] * prompt_norms[g]));
        }
    }
    let similarities = Tensor::new(vec![n, NUM_GRADES], sims)?;
    let logits = similarities.clone().scaled(1.0 / prompts.temperature);
    Ok((
        GradeLogits::new(logits)?,
        RankingCache {
            inputs: image_embs.clone(),
            input_norms,
            prompt_norms,
            similarities,
        },
    ))
}

/// Gradient of the loss w.r.t. the prompt embeddings (`5 x D`) given the
/// gradient w.r.t. the logits.
pub fn ranking_head_backward(
    prompts: &PromptBank,
    cache: &RankingCache,
    d_logits: &Tensor,
    mode: ScoreMode,
) -> Result<Tensor> {
    let n = cache.inputs.rows();
    if d_logits.shape() != [n, NUM_GRADES] {
        return Err(Error::shape(
            "ranking_head_backward",
            format!("upstream gradient {:?} != [{n}, 5]", d_logits.shape()),
        ));
    }
    let d = prompts.dim();
    let inv_t = 1.0 / prompts.temperature;
    let mut grad = vec![0.0; NUM_GRADES * d];
    for g in 0..NUM_GRADES {
        let p = prompts.row(g);
        let pn = cache.prompt_norms[g];
        let dst = &mut grad[g * d..(g + 1) * d];
        for i in 0..n {
            let up = d_logits.row(i)[g] * inv_t;
            if up == 0.0 {
                continue;
            }
            let x = cache.inputs.row(i);
            match mode {
                ScoreMode::Cosine => {
                    let xn = cache.input_norms[i];
                    let s = cache.similarities.row(i)[g];
                    for k in 0..d {
                        dst[k] += up * (x[k] / xn - s * p[k] / pn) / pn;
                    }
                }
                ScoreMode::InnerProduct => {
                    for k in 0..d {
                        dst[k] += up * x[k];
                    }
                }
            }
        }
    }
    Tensor::new(vec![NUM_GRADES, d], grad)
}

/// Ranking-aware prompt head: learnable prompt bank plus scoring mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingHead {
    pub prompts: PromptBank,
    pub score_mode: ScoreMode,
}

impl RankingHead {
    pub fn logits(&self, image_embs: &Tensor) -> Result<GradeLogits> {
        Ok(ranking_head_forward(image_embs, &self.prompts, self.score_mode)?.0)
    }
}

impl Parameters for RankingHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("prompts", &self.prompts.embeddings);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if self.prompts.learnable {
            f("prompts", &mut self.prompts.embeddings);
        }
    }
}
