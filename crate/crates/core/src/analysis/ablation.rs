//! Embedding-space PCA, gain/drop step importance and step transfer.

use std::collections::HashMap;

use crate::analysis::pca::{pca, PcaResult};
use crate::autodiff::Tensor;
use crate::denoiser::Denoiser;
use crate::error::{invalid, Result};
use crate::mteo::{sample_with_bank, BankModel, EmbeddingBank, Variant};
use crate::schedule::Schedule;
use crate::solvers::{sample, SolverKind};

/// PCA of conditioning vectors, vanilla against a trained bank.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPca {
    /// `e(t)` over the grid.
    pub vanilla: PcaResult,
    /// `(alpha, beta)` of every block over the grid.
    pub vanilla_film: PcaResult,
    /// Bank embeddings; absent for banks that store FiLM parameters directly.
    pub mte: Option<PcaResult>,
    pub mte_film: Option<PcaResult>,
}

fn film_row(net: &Denoiser, layer: usize, e: &Tensor) -> Result<Vec<f64>> {
    let p = net.film_params(layer, e)?;
    let mut row = p.alpha.into_data();
    row.extend_from_slice(p.beta.data());
    Ok(row)
}

/// Embedding and FiLM-parameter PCA for the vanilla conditioning over
/// `grid` and, if given, for a bank.
pub fn embedding_pca(net: &Denoiser, grid: &[f64], bank: Option<&EmbeddingBank>) -> Result<EmbeddingPca> {
    let n_layers = net.n_layers();
    let embeddings = grid.iter().map(|&t| net.embed_time(t)).collect::<Result<Vec<_>>>()?;
    let rows = |e: &[Tensor]| Tensor::from_rows(&e.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>());
    let vanilla = pca(&rows(&embeddings)?)?;
    let mut film_rows = Vec::new();
    for e in &embeddings {
        for l in 0..n_layers {
            film_rows.push(film_row(net, l, e)?);
        }
    }
    let vanilla_film = pca(&Tensor::from_rows(&film_rows)?)?;

    let (mte, mte_film) = match bank {
        None => (None, None),
        Some(b) => {
            if b.n_layers != n_layers {
                return Err(invalid("bank layer count does not match the backbone"));
            }
            let mut film_rows = Vec::new();
            let mut emb = Vec::new();
            for step in &b.steps {
                match b.variant {
                    Variant::Multi => {
                        for (l, e) in step.0.iter().enumerate() {
                            film_rows.push(film_row(net, l, e)?);
                            emb.push(e.clone());
                        }
                    }
                    Variant::Single => {
                        for l in 0..n_layers {
                            film_rows.push(film_row(net, l, &step.0[0])?);
                        }
                        emb.push(step.0[0].clone());
                    }
                    Variant::Deep => {
                        for ab in step.0.chunks(2) {
                            let mut row = ab[0].data().to_vec();
                            row.extend_from_slice(ab[1].data());
                            film_rows.push(row);
                        }
                    }
                }
            }
            let mte = if emb.is_empty() { None } else { Some(pca(&rows(&emb)?)?) };
            (mte, Some(pca(&Tensor::from_rows(&film_rows)?)?))
        }
    };
    Ok(EmbeddingPca {
        vanilla,
        vanilla_film,
        mte,
        mte_film,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainDropResult {
    pub subset: Vec<usize>,
    /// Metric with no step conditioned by the bank.
    pub m_empty: f64,
    /// Bank active only on the subset.
    pub m_subset: f64,
    /// Bank active everywhere except the subset.
    pub m_complement: f64,
    /// Bank active on every step.
    pub m_all: f64,
    /// `m_empty - m_subset`.
    pub gain: f64,
    /// `m_complement - m_all`.
    pub drop: f64,
}

/// Gain and drop views of step importance.
///
/// `metric` scores the endpoint samples of one rollout (lower is better).
/// Each distinct mask is sampled and scored once.
pub fn gain_drop(
    net: &Denoiser,
    bank: &EmbeddingBank,
    kind: SolverKind,
    schedule: &Schedule,
    x_t: &Tensor,
    subsets: &[Vec<usize>],
    metric: &mut dyn FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<GainDropResult>> {
    bank.check(schedule, net)?;
    let n = bank.n_steps();
    let mut cache: HashMap<Vec<bool>, f64> = HashMap::new();
    let mut eval = |mask: Vec<bool>| -> Result<f64> {
        if let Some(&m) = cache.get(&mask) {
            return Ok(m);
        }
        let tr = sample_with_bank(net, kind, schedule, x_t, Some(bank), Some(&mask))?;
        let m = metric(tr.last())?;
        cache.insert(mask, m);
        Ok(m)
    };
    let m_empty = eval(vec![false; n])?;
    let m_all = eval(vec![true; n])?;
    subsets
        .iter()
        .map(|subset| {
            let mut mask = vec![false; n];
            for &i in subset {
                if i >= n {
                    return Err(invalid(format!("subset step {i} out of range for {n} steps")));
                }
                if mask[i] {
                    return Err(invalid(format!("step {i} repeated in subset")));
                }
                mask[i] = true;
            }
            let m_subset = eval(mask.clone())?;
            let m_complement = eval(mask.iter().map(|m| !m).collect())?;
            Ok(GainDropResult {
                subset: subset.clone(),
                m_empty,
                m_subset,
                m_complement,
                m_all,
                gain: m_empty - m_subset,
                drop: m_complement - m_all,
            })
        })
        .collect()
}

/// Sample standard deviation, the seed-to-seed spread of a metric.
pub fn noise_floor(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(invalid("noise floor needs at least two repeats"));
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Ok(v.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferResult {
    pub k: usize,
    pub with_bank: f64,
    pub vanilla: f64,
}

/// Applies a bank trained on `student` to the `k`-times refined schedule,
/// at the steps starting on student times, and scores both rollouts.
pub fn step_transfer(
    net: &Denoiser,
    bank: &EmbeddingBank,
    student: &Schedule,
    k: usize,
    kind: SolverKind,
    x_t: &Tensor,
    metric: &mut dyn FnMut(&Tensor) -> Result<f64>,
) -> Result<TransferResult> {
    bank.check(student, net)?;
    let refined = student.refine(k)?;
    for (j, &t) in student.times().iter().enumerate() {
        let r = refined.times()[j * k];
        if r.to_bits() != t.to_bits() {
            return Err(invalid(format!(
                "refined time {r} at index {} does not match student time {t}",
                j * k
            )));
        }
    }
    let model = BankModel::refined(net, bank, k)?;
    let with_bank = metric(sample(&model, kind, &refined, x_t)?.last())?;
    let vanilla = metric(sample(net, kind, &refined, x_t)?.last())?;
    Ok(TransferResult { k, with_bank, vanilla })
}
