//! Batched inference with fixed binary masks.

use ndarray::Array2;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::{
    graph_forward, Batch, ForwardMasks, GraphTopology, ModelParams, TapeParams, WeightMasking,
};
use crate::taskgen::TaskExample;

pub const EVAL_BATCH: usize = 64;

/// A model with its weight masks already applied, plus fixed edge gates.
#[derive(Clone, Debug)]
pub struct MaskedModel {
    pub params: ModelParams,
    pub edges: Option<Vec<f64>>,
}

impl MaskedModel {
    pub fn dense(params: &ModelParams) -> Self {
        MaskedModel {
            params: params.clone(),
            edges: None,
        }
    }

    pub fn new(params: &ModelParams, weights: Option<&[f64]>, edges: Option<&[f64]>) -> Result<Self> {
        let params = match weights {
            Some(w) => params.with_weight_mask(w)?,
            None => params.clone(),
        };
        Ok(MaskedModel {
            params,
            edges: edges.map(<[f64]>::to_vec),
        })
    }

    /// Final-position logits for each prompt.
    pub fn logits<P: AsRef<[usize]>>(&self, topology: &GraphTopology, prompts: &[P]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(EVAL_BATCH) {
            let mut tape = Tape::new();
            let tp = TapeParams::constants(&mut tape, &self.params);
            let batch = Batch::new(chunk, &self.params.config)?;
            let edges = self.edges.as_ref().map(|e| {
                tape.constant(Array2::from_shape_vec((1, e.len()), e.clone()).expect("row"))
            });
            let masks = ForwardMasks {
                weights: WeightMasking::Open,
                edges,
            };
            let res = graph_forward(&mut tape, topology, &tp, &batch, &masks)?;
            out.extend(tape.value(res.logits).rows().into_iter().map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Logits restricted to each example's candidates.
    pub fn candidate_logits(&self, topology: &GraphTopology, examples: &[TaskExample]) -> Result<Vec<Vec<f64>>> {
        let prompts: Vec<&[usize]> = examples.iter().map(|e| e.prompt.as_slice()).collect();
        let logits = self.logits(topology, &prompts)?;
        Ok(examples
            .iter()
            .zip(logits)
            .map(|(e, l)| e.candidates.iter().map(|&c| l[c]).collect())
            .collect())
    }

    /// Predicted candidate index per example.
    pub fn predict(&self, topology: &GraphTopology, examples: &[TaskExample]) -> Result<Vec<usize>> {
        let scores = self.candidate_logits(topology, examples)?;
        Ok(examples
            .iter()
            .zip(scores)
            .map(|(e, s)| argmax_candidate(&s, &e.candidates))
            .collect())
    }

    pub fn accuracy(&self, topology: &GraphTopology, examples: &[TaskExample]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(topology, examples)?;
        let hits = pred.iter().zip(examples).filter(|(p, e)| **p == e.gold).count();
        Ok(hits as f64 / examples.len() as f64)
    }
}

/// Index of the highest score; ties go to the lowest candidate token id.
pub fn argmax_candidate(scores: &[f64], candidates: &[usize]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && candidates[i] < candidates[best]) {
            best = i;
        }
    }
    best
}
