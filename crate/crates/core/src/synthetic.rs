//! Seeded synthetic data: Gaussian probe-training sets and reasoning traces
//! that fall into a verbatim loop, with matching hidden states and chunk
//! embeddings. Used by the demo corpus, benches and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::chunker::DelimiterSet;
use crate::error::Result;
use crate::probe::{LabeledDataset, ProbeModel};
use crate::trace::{ChunkRecord, TraceRecord, VectorRef};
use crate::vectors::VectorTable;

/// Token id closing each synthetic chunk.
pub const DELIMITER_ID: u32 = 271;

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `n` points split evenly between two unit-variance isotropic Gaussians
/// whose means lie `separation` standard deviations apart along a random
/// direction. Positives come first.
pub fn two_gaussians(n: usize, dim: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = random_unit(&mut rng, dim);
    let mut table = VectorTable::new(dim)?;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i < n / 2;
        let offset = if positive { separation / 2.0 } else { -separation / 2.0 };
        let row: Vec<f32> = direction
            .iter()
            .map(|d| (d * offset + rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        table.push_row(&row)?;
        labels.push(positive);
    }
    LabeledDataset::new(table, labels)
}

#[derive(Debug, Clone)]
pub struct SaladCorpusSpec {
    pub traces: usize,
    pub benign_chunks: (usize, usize),
    pub salad_chunks: (usize, usize),
    pub chunk_tokens: (usize, usize),
    /// Every `n`-th trace stays benign throughout; 0 disables.
    pub benign_every: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Signed offset of hidden states along the probe direction.
    pub hidden_margin: f64,
    pub hidden_noise: f64,
    pub embed_noise: f64,
    pub seed: u64,
    pub model_id: String,
    pub task: String,
    pub hidden_path: String,
    pub embed_path: String,
}

impl Default for SaladCorpusSpec {
    fn default() -> Self {
        Self {
            traces: 24,
            benign_chunks: (14, 18),
            salad_chunks: (30, 40),
            chunk_tokens: (12, 60),
            benign_every: 4,
            hidden_dim: 64,
            embed_dim: 32,
            hidden_margin: 3.0,
            hidden_noise: 0.5,
            embed_noise: 0.005,
            seed: 41,
            model_id: "synthetic-lrm".into(),
            task: "synthetic".into(),
            hidden_path: "hidden.wscv".into(),
            embed_path: "embed.wscv".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SaladCorpus {
    pub traces: Vec<TraceRecord>,
    pub hidden: VectorTable,
    pub embed: VectorTable,
    /// Probe that separates the planted hidden states.
    pub probe: ProbeModel,
    /// 1-based index of the first looping chunk per trace.
    pub loop_starts: Vec<Option<usize>>,
    pub delimiters: DelimiterSet,
}

/// Traces that reason for a while and then repeat their last few chunks
/// verbatim until the end. Looping chunks get near-duplicate embeddings and
/// hidden states on the positive side of the probe.
pub fn salad_corpus(spec: &SaladCorpusSpec) -> Result<SaladCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let direction = random_unit(&mut rng, spec.hidden_dim);
    let probe = ProbeModel::new(direction.clone(), 0.0)?;
    let mut hidden = VectorTable::new(spec.hidden_dim)?;
    let mut embed = VectorTable::new(spec.embed_dim)?;
    let mut traces = Vec::with_capacity(spec.traces);
    let mut loop_starts = Vec::with_capacity(spec.traces);
    let delimiters = DelimiterSet::single([DELIMITER_ID])?;

    let hidden_row = |rng: &mut ChaCha8Rng, table: &mut VectorTable, salad: bool| {
        let sign = if salad { 1.0 } else { -1.0 };
        let row: Vec<f32> = direction
            .iter()
            .map(|d| {
                let noise: f64 = rng.sample(StandardNormal);
                (sign * spec.hidden_margin * d + spec.hidden_noise * noise) as f32
            })
            .collect();
        table.push_row(&row)
    };

    for t in 0..spec.traces {
        let n_benign = rng.random_range(spec.benign_chunks.0..=spec.benign_chunks.1);
        let loops = spec.benign_every == 0 || (t + 1) % spec.benign_every != 0;
        let n_salad = if loops {
            rng.random_range(spec.salad_chunks.0..=spec.salad_chunks.1)
        } else {
            0
        };
        let period = rng.random_range(1..=3usize).min(n_benign);

        let mut chunk_tokens: Vec<Vec<u32>> = Vec::new();
        let mut chunk_embeds: Vec<Vec<f64>> = Vec::new();
        let mut texts = Vec::new();
        for c in 0..n_benign {
            let len = rng.random_range(spec.chunk_tokens.0..=spec.chunk_tokens.1);
            chunk_tokens.push((0..len).map(|_| rng.random_range(1000..30000)).collect());
            chunk_embeds.push(random_unit(&mut rng, spec.embed_dim));
            texts.push(format!("step {} of trace {t}", c + 1));
        }
        let base = n_benign - period;
        for s in 0..n_salad {
            let src = base + s % period;
            chunk_tokens.push(chunk_tokens[src].clone());
            let noisy: Vec<f64> = chunk_embeds[src]
                .iter()
                .map(|x| x + spec.embed_noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            chunk_embeds.push(noisy);
            texts.push(texts[src].clone());
        }

        let mut ids = Vec::new();
        for toks in &chunk_tokens {
            ids.extend_from_slice(toks);
            ids.push(DELIMITER_ID);
        }
        // an unfinished chunk trails most traces
        let tail = rng.random_range(0..8);
        ids.extend((0..tail).map(|_| rng.random_range(1000..30000u32)));

        let mut record = TraceRecord::from_tokens(
            format!("syn-{t:04}"),
            spec.model_id.clone(),
            spec.task.clone(),
            0.6,
            ids,
            &delimiters,
        );
        record.hidden_ref = Some(VectorRef {
            path: spec.hidden_path.clone(),
            first_row: hidden.count() as u64,
        });
        record.embed_ref = Some(VectorRef {
            path: spec.embed_path.clone(),
            first_row: embed.count() as u64,
        });
        for (i, (chunk, text)) in record.chunks.iter_mut().zip(texts).enumerate() {
            chunk.text = Some(text);
            let salad = i >= n_benign;
            hidden_row(&mut rng, &mut hidden, salad)?;
            let e: Vec<f32> = chunk_embeds[i].iter().map(|&x| x as f32).collect();
            embed.push_row(&e)?;
        }
        loop_starts.push((n_salad > 0).then_some(n_benign + 1));
        traces.push(record);
    }

    Ok(SaladCorpus {
        traces,
        hidden,
        embed,
        probe,
        loop_starts,
        delimiters,
    })
}

/// A single record built directly from chunk lengths with no token ids.
pub fn trace_from_lengths(trace_id: &str, lengths: &[usize], tail: usize) -> TraceRecord {
    let mut positions = Vec::with_capacity(lengths.len());
    let mut at = 0;
    for &n in lengths {
        at += n;
        positions.push(at);
        at += 1;
    }
    TraceRecord {
        trace_id: trace_id.to_owned(),
        model_id: "synthetic-lrm".into(),
        task: "synthetic".into(),
        temperature: 0.0,
        token_ids: None,
        token_count: Some(at + tail),
        delimiter_positions: positions,
        chunks: lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| ChunkRecord::new(i + 1, n))
            .collect(),
        hidden_ref: None,
        embed_ref: None,
    }
}
