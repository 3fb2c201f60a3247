//! Mutation-only evolutionary search over training hyperparameters.
//!
//! Every generation after the first mutates a parent built by mixing the
//! best genomes found so far. Fitness evaluation is supplied by the caller;
//! [`fold_fitness`] trains on one designated fold.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, FoldSplit};
use crate::model::{Mode, ModelConfig};
use crate::training::{run_fold, Sample, TrainConfig, TrainingError};

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("gene {gene:?} = {value} outside [{lo}, {hi}]")]
    OutOfBounds { gene: Gene, value: f64, lo: f64, hi: f64 },
    #[error("genome is missing {0:?}")]
    MissingGene(Gene),
    #[error("genes {0:?} do not apply to {1:?} mode")]
    InapplicableGene(Gene, Mode),
    #[error("fitness {0} is not in [0, 1]")]
    InvalidFitness(f64),
    #[error("history line {line}: {message}")]
    History { line: usize, message: String },
    #[error("fitness evaluation failed")]
    Fitness(#[from] TrainingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gene {
    LearningRate,
    SgdMomentum,
    Dropout,
    Alpha,
    Beta,
    Gamma,
    Delta,
}

impl Gene {
    pub const ALL: [Gene; 7] = [
        Gene::LearningRate,
        Gene::SgdMomentum,
        Gene::Dropout,
        Gene::Alpha,
        Gene::Beta,
        Gene::Gamma,
        Gene::Delta,
    ];

    pub fn applies_to(self, mode: Mode) -> bool {
        match self {
            Gene::Gamma => mode == Mode::DetectionTwoClass,
            Gene::Dropout | Gene::Delta => mode == Mode::MultiTask,
            _ => true,
        }
    }
}

/// Inclusive `[lo, hi]` range of every gene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds(pub BTreeMap<Gene, (f64, f64)>);

impl Default for Bounds {
    fn default() -> Self {
        Self(
            Gene::ALL
                .iter()
                .map(|&g| {
                    let range = match g {
                        Gene::LearningRate => (1e-5, 1e-1),
                        Gene::SgdMomentum => (0.6, 0.98),
                        Gene::Dropout => (0.0, 0.5),
                        _ => (0.02, 1.0),
                    };
                    (g, range)
                })
                .collect(),
        )
    }
}

impl Bounds {
    pub fn get(&self, gene: Gene) -> (f64, f64) {
        self.0.get(&gene).copied().unwrap_or((f64::NEG_INFINITY, f64::INFINITY))
    }

    pub fn clip(&self, gene: Gene, value: f64) -> f64 {
        let (lo, hi) = self.get(gene);
        value.clamp(lo, hi)
    }
}

/// A genome: the subset of genes that applies to a search.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgd_momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

impl HyperParams {
    pub fn get(&self, gene: Gene) -> Option<f64> {
        match gene {
            Gene::LearningRate => self.learning_rate,
            Gene::SgdMomentum => self.sgd_momentum,
            Gene::Dropout => self.dropout,
            Gene::Alpha => self.alpha,
            Gene::Beta => self.beta,
            Gene::Gamma => self.gamma,
            Gene::Delta => self.delta,
        }
    }

    fn slot(&mut self, gene: Gene) -> &mut Option<f64> {
        match gene {
            Gene::LearningRate => &mut self.learning_rate,
            Gene::SgdMomentum => &mut self.sgd_momentum,
            Gene::Dropout => &mut self.dropout,
            Gene::Alpha => &mut self.alpha,
            Gene::Beta => &mut self.beta,
            Gene::Gamma => &mut self.gamma,
            Gene::Delta => &mut self.delta,
        }
    }

    pub fn set(&mut self, gene: Gene, value: f64) {
        *self.slot(gene) = Some(value);
    }

    /// Present genes in canonical order.
    pub fn genes(&self) -> Vec<(Gene, f64)> {
        Gene::ALL.iter().filter_map(|&g| self.get(g).map(|v| (g, v))).collect()
    }

    /// Genome of a mode, read from the training and model configurations.
    pub fn from_configs(train: &TrainConfig, model: &ModelConfig) -> Self {
        let mode = model.mode;
        let w = &train.loss_weights;
        let mut h = Self {
            learning_rate: Some(train.learning_rate),
            sgd_momentum: Some(train.momentum),
            alpha: Some(w.alpha),
            beta: Some(w.beta),
            ..Self::default()
        };
        if Gene::Gamma.applies_to(mode) {
            h.gamma = Some(w.gamma);
        }
        if Gene::Delta.applies_to(mode) {
            h.delta = Some(w.delta);
            h.dropout = Some(model.dropout_rate);
        }
        h
    }

    /// Best genomes reported for the clinical data.
    pub fn published(mode: Mode) -> Self {
        match mode {
            Mode::DetectionTwoClass => Self {
                learning_rate: Some(0.00369),
                sgd_momentum: Some(0.77628),
                alpha: Some(0.06868),
                beta: Some(0.49062),
                gamma: Some(0.2343),
                ..Self::default()
            },
            Mode::MultiTask => Self {
                learning_rate: Some(0.0018),
                sgd_momentum: Some(0.62403),
                dropout: Some(0.11008),
                alpha: Some(0.05427),
                beta: Some(0.67598),
                delta: Some(0.41855),
                ..Self::default()
            },
        }
    }

    /// Copy with every gene clipped into `bounds`.
    pub fn clipped(&self, bounds: &Bounds) -> Self {
        let mut out = self.clone();
        for (g, v) in self.genes() {
            out.set(g, bounds.clip(g, v));
        }
        out
    }

    pub fn validate(&self, bounds: &Bounds) -> Result<(), EvolveError> {
        for (gene, value) in self.genes() {
            let (lo, hi) = bounds.get(gene);
            if !(value >= lo && value <= hi) {
                return Err(EvolveError::OutOfBounds { gene, value, lo, hi });
            }
        }
        Ok(())
    }

    /// Checks that exactly the genes of `mode` are present.
    pub fn validate_for(&self, mode: Mode) -> Result<(), EvolveError> {
        for g in Gene::ALL {
            match (self.get(g).is_some(), g.applies_to(mode)) {
                (false, true) => return Err(EvolveError::MissingGene(g)),
                (true, false) => return Err(EvolveError::InapplicableGene(g, mode)),
                _ => {}
            }
        }
        Ok(())
    }

    /// Writes the genome into the configurations it controls.
    pub fn apply(&self, train: &mut TrainConfig, model: &mut ModelConfig) {
        let w = &mut train.loss_weights;
        let fields: [(Gene, &mut f64); 6] = [
            (Gene::LearningRate, &mut train.learning_rate),
            (Gene::SgdMomentum, &mut train.momentum),
            (Gene::Alpha, &mut w.alpha),
            (Gene::Beta, &mut w.beta),
            (Gene::Gamma, &mut w.gamma),
            (Gene::Delta, &mut w.delta),
        ];
        for (g, field) in fields {
            if let Some(v) = self.get(g) {
                *field = v;
            }
        }
        if let Some(d) = self.dropout {
            model.dropout_rate = d;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub genome: HyperParams,
    pub fitness: f64,
}

/// Mutation probability, variance of the Gaussian draw and its scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MutationParams {
    pub probability: f64,
    pub variance: f64,
    pub scale: f64,
}

impl Default for MutationParams {
    fn default() -> Self {
        Self {
            probability: 0.9,
            variance: 0.04,
            scale: 1.0,
        }
    }
}

/// Multiplies each gene, with probability `params.probability`, by
/// `1 + g * scale` with `g ~ N(0, variance)`; the factor is redrawn until it
/// differs from 1 and is positive. Results are clipped to `bounds`.
pub fn mutate<R: RngCore + ?Sized>(parent: &HyperParams, bounds: &Bounds, params: &MutationParams, rng: &mut R) -> HyperParams {
    let normal = Normal::new(0.0, params.variance.sqrt()).expect("non-negative variance");
    let mut child = parent.clone();
    for (gene, value) in parent.genes() {
        if rng.gen::<f64>() >= params.probability {
            continue;
        }
        let factor = loop {
            let f = 1.0 + normal.sample(rng) * params.scale;
            if f != 1.0 && f > 0.0 {
                break f;
            }
        };
        child.set(gene, bounds.clip(gene, value * factor));
    }
    child
}

/// Random convex combination of the `n_keep` fittest genomes in `history`,
/// each weighted by `u * (fitness - min_fitness + eps)` with `u ~ U(0, 1)`
/// and `min_fitness` taken over the kept records.
pub fn select_parent<R: RngCore + ?Sized>(
    history: &[GenerationRecord],
    n_keep: usize,
    eps: f64,
    rng: &mut R,
) -> Result<HyperParams, EvolveError> {
    if history.is_empty() {
        return Err(EvolveError::EmptyHistory);
    }
    let mut ranked: Vec<&GenerationRecord> = history.iter().collect();
    ranked.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.generation.cmp(&b.generation)));
    ranked.truncate(n_keep.max(1));
    if ranked.len() == 1 {
        return Ok(ranked[0].genome.clone());
    }
    let min = ranked.iter().map(|r| r.fitness).fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> = ranked.iter().map(|r| rng.gen::<f64>() * (r.fitness - min + eps)).collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    } else {
        weights.fill(1.0 / ranked.len() as f64);
    }
    let mut parent = ranked[0].genome.clone();
    for (gene, _) in ranked[0].genome.genes() {
        let mixed = ranked
            .iter()
            .zip(&weights)
            .map(|(r, w)| w * r.genome.get(gene).unwrap_or(0.0))
            .sum();
        parent.set(gene, mixed);
    }
    Ok(parent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    /// Number of mutated generations after the initial one.
    pub generations: usize,
    pub n_keep: usize,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(default)]
    pub mutation: MutationParams,
    #[serde(default)]
    pub bounds: Bounds,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            generations: 300,
            n_keep: 5,
            epsilon: 1e-6,
            seed: 0,
            mutation: MutationParams::default(),
            bounds: Bounds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveOutcome {
    pub best: GenerationRecord,
    pub history: Vec<GenerationRecord>,
}

impl EvolveOutcome {
    /// Best fitness after each generation.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.history
            .iter()
            .scan(f64::NEG_INFINITY, |best, r| {
                *best = best.max(r.fitness);
                Some(*best)
            })
            .collect()
    }
}

fn best_record(history: &[GenerationRecord]) -> Option<&GenerationRecord> {
    history.iter().fold(None, |best: Option<&GenerationRecord>, r| match best {
        Some(b) if b.fitness >= r.fitness => Some(b),
        _ => Some(r),
    })
}

/// Runs the search. Records in `resume` are kept and the search continues
/// after the last one; a generation's random draws depend only on the seed
/// and its index, so resumed and uninterrupted runs agree.
pub fn evolve(
    initial: &HyperParams,
    mut fitness_fn: impl FnMut(&HyperParams) -> Result<f64, EvolveError>,
    config: &EvolveConfig,
    resume: Vec<GenerationRecord>,
    mut on_record: impl FnMut(&GenerationRecord) -> Result<(), EvolveError>,
) -> Result<EvolveOutcome, EvolveError> {
    initial.validate(&config.bounds)?;
    let mut history = resume;
    for (i, r) in history.iter().enumerate() {
        if r.generation != i {
            return Err(EvolveError::History {
                line: i + 1,
                message: format!("expected generation {i}, found {}", r.generation),
            });
        }
    }
    let mut evaluate = |genome: &HyperParams| -> Result<f64, EvolveError> {
        let f = fitness_fn(genome)?;
        if !(0.0..=1.0).contains(&f) {
            return Err(EvolveError::InvalidFitness(f));
        }
        Ok(f)
    };
    while history.len() <= config.generations {
        let generation = history.len();
        let genome = if generation == 0 {
            initial.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (generation as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let parent = select_parent(&history, config.n_keep, config.epsilon, &mut rng)?;
            mutate(&parent, &config.bounds, &config.mutation, &mut rng)
        };
        let fitness = evaluate(&genome)?;
        let record = GenerationRecord {
            generation,
            genome,
            fitness,
        };
        on_record(&record)?;
        history.push(record);
    }
    let best = best_record(&history).cloned().ok_or(EvolveError::EmptyHistory)?;
    Ok(EvolveOutcome { best, history })
}

/// Reads a JSON-lines history; blank lines are skipped.
pub fn read_history(reader: impl BufRead) -> Result<Vec<GenerationRecord>, EvolveError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EvolveError::History {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_record(mut writer: impl Write, record: &GenerationRecord) -> Result<(), EvolveError> {
    let line = serde_json::to_string(record).map_err(|e| EvolveError::History {
        line: record.generation + 1,
        message: e.to_string(),
    })?;
    writeln!(writer, "{line}")?;
    Ok(())
}

/// Fitness of a genome: the best validation fitness of a model trained on
/// `split` with the genome applied. `budget_epochs` caps `max_epochs`.
pub fn fold_fitness<'a>(
    manifest: &'a DatasetManifest,
    samples: &'a [Sample],
    split: &'a FoldSplit,
    model_config: &'a ModelConfig,
    train_config: &'a TrainConfig,
    model_seed: u64,
    budget_epochs: Option<usize>,
) -> impl FnMut(&HyperParams) -> Result<f64, EvolveError> + 'a {
    move |genome| {
        let mut tc = train_config.clone();
        let mut mc = model_config.clone();
        genome.apply(&mut tc, &mut mc);
        if let Some(b) = budget_epochs {
            tc.max_epochs = tc.max_epochs.min(b);
            tc.patience = tc.patience.min(tc.max_epochs);
        }
        let (_, result) = run_fold(manifest, samples, split, &mc, &tc, model_seed, |_| {})?;
        Ok(result.val_fitness.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Always returns the largest value, so `gen::<f64>()` is just below 1.
    struct NoMutation;

    impl RngCore for NoMutation {
        fn next_u32(&mut self) -> u32 {
            u32::MAX
        }
        fn next_u64(&mut self) -> u64 {
            u64::MAX
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0xff)
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
            dest.fill(0xff);
            Ok(())
        }
    }

    fn record(generation: usize, alpha: f64, fitness: f64) -> GenerationRecord {
        GenerationRecord {
            generation,
            genome: HyperParams {
                alpha: Some(alpha),
                beta: Some(1.0 - alpha),
                ..Default::default()
            },
            fitness,
        }
    }

    #[test]
    fn forced_no_mutation_keeps_parent() {
        let parent = HyperParams::published(Mode::MultiTask);
        let child = mutate(&parent, &Bounds::default(), &MutationParams::default(), &mut NoMutation);
        assert_eq!(child, parent);
    }

    #[test]
    fn mutation_is_deterministic() {
        let parent = HyperParams::published(Mode::DetectionTwoClass);
        let run = || mutate(&parent, &Bounds::default(), &MutationParams::default(), &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(run(), run());
        assert_ne!(run(), parent);
    }

    #[test]
    fn published_genomes_are_valid() {
        for mode in [Mode::DetectionTwoClass, Mode::MultiTask] {
            let h = HyperParams::published(mode);
            h.validate(&Bounds::default()).unwrap();
            h.validate_for(mode).unwrap();
        }
    }

    #[test]
    fn single_record_parent() {
        let h = [record(0, 0.3, 0.5)];
        let p = select_parent(&h, 5, 1e-6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p, h[0].genome);
        assert!(matches!(
            select_parent(&[], 5, 1e-6, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(EvolveError::EmptyHistory)
        ));
    }

    #[test]
    fn equal_fitness_mixes_on_segment() {
        let h = [record(0, 0.2, 0.5), record(1, 0.6, 0.5)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4000;
        let mut sum = 0.0;
        for _ in 0..n {
            let p = select_parent(&h, 5, 1e-6, &mut rng).unwrap();
            let a = p.alpha.unwrap();
            assert!((0.2..=0.6).contains(&a));
            assert!((p.beta.unwrap() - (1.0 - a)).abs() < 1e-12);
            sum += a;
        }
        // E[u1 / (u1 + u2)] = 1/2; sd of one draw is below 0.3 * 0.4
        assert!((sum / n as f64 - 0.4).abs() < 0.01);
    }

    #[test]
    fn dominant_fitness_takes_all_weight() {
        let h = [record(0, 0.2, 0.9), record(1, 0.6, 0.1)];
        let p = select_parent(&h, 5, 1e-12, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // weights u1 * 0.8 and u2 * 1e-12
        assert!((p.alpha.unwrap() - 0.2).abs() < 1e-9);
    }

    #[test]
    fn one_generation_gives_two_records() {
        let cfg = EvolveConfig {
            generations: 1,
            ..Default::default()
        };
        let init = HyperParams::published(Mode::MultiTask);
        let out = evolve(&init, |_| Ok(0.5), &cfg, Vec::new(), |_| Ok(())).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.history[0].genome, init);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let init = HyperParams::published(Mode::DetectionTwoClass);
        let f = |h: &HyperParams| Ok((-(h.alpha.unwrap() - 0.5).powi(2)).exp());
        let full = evolve(
            &init,
            f,
            &EvolveConfig {
                generations: 12,
                seed: 9,
                ..Default::default()
            },
            Vec::new(),
            |_| Ok(()),
        )
        .unwrap();
        let part = evolve(
            &init,
            f,
            &EvolveConfig {
                generations: 5,
                seed: 9,
                ..Default::default()
            },
            Vec::new(),
            |_| Ok(()),
        )
        .unwrap();
        let resumed = evolve(
            &init,
            f,
            &EvolveConfig {
                generations: 12,
                seed: 9,
                ..Default::default()
            },
            part.history,
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(full, resumed);
    }

    #[test]
    fn apply_round_trips_through_configs() {
        let mode = Mode::MultiTask;
        let mut tc = TrainConfig::for_mode(mode);
        let mut mc = ModelConfig::tiny(mode);
        let h = HyperParams::published(mode);
        h.apply(&mut tc, &mut mc);
        assert_eq!(HyperParams::from_configs(&tc, &mc), h);
    }

    #[test]
    fn history_jsonl_round_trip() {
        let recs = vec![record(0, 0.3, 0.4), record(1, 0.5, 0.6)];
        let mut buf = Vec::new();
        for r in &recs {
            write_record(&mut buf, r).unwrap();
        }
        assert_eq!(read_history(buf.as_slice()).unwrap(), recs);
    }
}
