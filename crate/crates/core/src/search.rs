//! Greedy budgeted layer selection.
//!
//! Shrink mode walks a full-precision network toward a FLOPs budget by
//! binarizing one layer per step; grow mode walks a fully binary network
//! back toward full precision. Both score every candidate layer per step by
//! training it from scratch under a short proxy protocol and take the
//! argmin, which makes each step exactly a brute-force search. A random
//! order-until-budget baseline and cross-dataset assignment transfer round
//! out the toolkit.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    budget_satisfied, flops, FlopsReport, NetworkError, NetworkSpec, PrecisionAssignment,
};
use crate::seed::derive;
use crate::train::{
    evaluate, train_model, DataBundle, EvalResult, TrainConfig, TrainError,
};

/// Finite stand-in for an infinite score: a diverged candidate loses every
/// comparison but still serializes cleanly.
pub const DIVERGED_SCORE: f64 = f64::MAX;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid search config: {field}: {detail}")]
    BadConfig { field: String, detail: String },
    #[error("search mode {actual:?} but this operation needs {expected:?}")]
    WrongMode {
        expected: SearchMode,
        actual: SearchMode,
    },
    #[error(
        "budget {budget} unreachable: even with all hidden layers binarized \
         the remaining fraction is {floor}"
    )]
    BudgetUnreachable { budget: f64, floor: f64 },
    #[error("steps {steps} exceeds the {layers} hidden layers")]
    StepsExceedLayers { steps: usize, layers: usize },
    #[error("target input shape {actual:?} does not match network input {expected:?}")]
    IncompatibleInput {
        expected: [usize; 3],
        actual: Vec<usize>,
    },
    #[error("no candidates to score")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Shrink,
    Grow,
    Random,
}

/// Search settings: the budget, the short proxy protocol that scores each
/// candidate, and the longer protocol that retrains the selected assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub mode: SearchMode,
    pub budget_fraction: f64,
    /// Alternative stop rule: run exactly this many steps instead of
    /// stopping at the budget.
    #[serde(default)]
    pub steps: Option<usize>,
    pub proxy: TrainConfig,
    #[serde(rename = "final")]
    pub final_cfg: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |field: &str, detail: String| SearchError::BadConfig {
            field: field.into(),
            detail,
        };
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(bad(
                "budget_fraction",
                format!("must be in (0, 1], got {}", self.budget_fraction),
            ));
        }
        self.proxy
            .validate()
            .map_err(|e| bad("proxy", e.to_string()))?;
        self.final_cfg
            .validate()
            .map_err(|e| bad("final", e.to_string()))?;
        if self.proxy.epochs > self.final_cfg.epochs {
            return Err(bad(
                "proxy.epochs",
                format!(
                    "proxy epochs {} exceed final epochs {}",
                    self.proxy.epochs, self.final_cfg.epochs
                ),
            ));
        }
        Ok(())
    }
}

/// Proxy-training outcome for one candidate layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    /// Validation loss under the proxy protocol; the selection key.
    pub loss: f64,
    pub accuracy: f64,
}

/// One greedy step: every candidate's score and the argmin choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub step: usize,
    pub candidate_scores: BTreeMap<usize, CandidateScore>,
    pub chosen: usize,
    pub flops_after: FlopsReport,
}

/// Full record of a search run: every step's scores, the selected
/// assignment, and its retrained evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub network: NetworkSpec,
    pub mode: SearchMode,
    pub budget_fraction: f64,
    pub seed: u64,
    pub steps: Vec<SearchStep>,
    pub final_assignment: PrecisionAssignment,
    pub final_eval: EvalResult,
}

impl SearchTrace {
    /// Flat per-candidate rows: step, layer, score, and the remaining
    /// fraction the candidate assignment would have.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,score,remaining_fraction\n");
        for step in &self.steps {
            for (&layer, score) in &step.candidate_scores {
                let mut probe = assignment_before(self, step.step);
                apply_candidate(self.mode, &mut probe, layer);
                let fraction = flops(&self.network, &probe).remaining_fraction;
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    step.step, layer, score.loss, fraction
                ));
            }
        }
        out
    }

    /// Plot-ready (remaining_fraction, accuracy) rows: the chosen
    /// candidate's proxy accuracy per step, then the final retrained point.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("remaining_fraction,accuracy,stage\n");
        for step in &self.steps {
            let score = step.candidate_scores[&step.chosen];
            out.push_str(&format!(
                "{},{},proxy\n",
                step.flops_after.remaining_fraction, score.accuracy
            ));
        }
        let final_fraction = flops(&self.network, &self.final_assignment).remaining_fraction;
        out.push_str(&format!(
            "{},{},final\n",
            final_fraction, self.final_eval.accuracy
        ));
        out
    }
}

/// Reconstructs the assignment in force before `step` (1-based).
fn assignment_before(trace: &SearchTrace, step: usize) -> PrecisionAssignment {
    let mut assignment = match trace.mode {
        SearchMode::Shrink => PrecisionAssignment::empty(),
        SearchMode::Grow => PrecisionAssignment::all_hidden(&trace.network),
        SearchMode::Random => PrecisionAssignment::empty(),
    };
    for s in &trace.steps {
        if s.step >= step {
            break;
        }
        apply_candidate(trace.mode, &mut assignment, s.chosen);
    }
    assignment
}

fn apply_candidate(mode: SearchMode, assignment: &mut PrecisionAssignment, layer: usize) {
    match mode {
        SearchMode::Shrink | SearchMode::Random => assignment.insert(layer),
        SearchMode::Grow => assignment.remove(layer),
    }
}

/// Trains one candidate assignment from scratch under the proxy protocol
/// with a seed derived from (search seed, step, layer), scoring divergence
/// as [`DIVERGED_SCORE`].
fn score_candidate(
    net: &NetworkSpec,
    data: &DataBundle,
    assignment: &PrecisionAssignment,
    cfg: &SearchConfig,
    tag: &str,
) -> Result<CandidateScore, SearchError> {
    let proxy = TrainConfig {
        seed: derive(cfg.seed, tag),
        ..cfg.proxy.clone()
    };
    match train_model(net, assignment, data, &proxy) {
        Ok(outcome) => Ok(CandidateScore {
            loss: outcome.val_result.loss,
            accuracy: outcome.val_result.accuracy,
        }),
        Err(TrainError::Diverged { .. }) => Ok(CandidateScore {
            loss: DIVERGED_SCORE,
            accuracy: 0.0,
        }),
        Err(other) => Err(other.into()),
    }
}

fn score_candidates(
    net: &NetworkSpec,
    data: &DataBundle,
    current: &PrecisionAssignment,
    cfg: &SearchConfig,
    step: usize,
    direction: SearchMode,
    candidates: &[usize],
) -> Result<BTreeMap<usize, CandidateScore>, SearchError> {
    let prefix = match direction {
        SearchMode::Shrink => "shrink",
        SearchMode::Grow => "grow",
        SearchMode::Random => unreachable!("random mode has no candidate scoring"),
    };
    // Candidates are independent tasks over read-only inputs; the map is
    // rebuilt in index order afterwards, so the schedule cannot leak into
    // the result.
    let scored: Vec<(usize, CandidateScore)> = candidates
        .par_iter()
        .map(|&layer| {
            let mut probe = current.clone();
            apply_candidate(direction, &mut probe, layer);
            let tag = format!("{prefix}.step{step}.layer{layer}");
            score_candidate(net, data, &probe, cfg, &tag).map(|score| (layer, score))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scored.into_iter().collect())
}

/// Argmin by score with ties broken toward the lowest layer index.
fn argmin(scores: &BTreeMap<usize, CandidateScore>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&layer, score) in scores {
        match best {
            Some((_, loss)) if score.loss >= loss => {}
            _ => best = Some((layer, score.loss)),
        }
    }
    best.map(|(layer, _)| layer)
}

/// Scores every single-layer extension of `current` under the shared proxy
/// protocol. This is the per-step brute force that the shrink search takes
/// its argmin from; the step number is `current.len() + 1`.
pub fn brute_force_step(
    net: &NetworkSpec,
    data: &DataBundle,
    current: &PrecisionAssignment,
    cfg: &SearchConfig,
) -> Result<BTreeMap<usize, CandidateScore>, SearchError> {
    let candidates: Vec<usize> = net
        .hidden_indices()
        .filter(|&i| !current.contains(i))
        .collect();
    if candidates.is_empty() {
        return Err(SearchError::NoCandidates);
    }
    score_candidates(
        net,
        data,
        current,
        cfg,
        current.len() + 1,
        SearchMode::Shrink,
        &candidates,
    )
}

fn check_budget_reachable(net: &NetworkSpec, cfg: &SearchConfig) -> Result<(), SearchError> {
    let floor = flops(net, &PrecisionAssignment::all_hidden(net)).remaining_fraction;
    if cfg.steps.is_none() && floor > cfg.budget_fraction {
        return Err(SearchError::BudgetUnreachable {
            budget: cfg.budget_fraction,
            floor,
        });
    }
    if let Some(steps) = cfg.steps {
        if steps > net.hidden_count() {
            return Err(SearchError::StepsExceedLayers {
                steps,
                layers: net.hidden_count(),
            });
        }
    }
    Ok(())
}

fn finalize_trace(
    net: &NetworkSpec,
    data: &DataBundle,
    cfg: &SearchConfig,
    steps: Vec<SearchStep>,
    assignment: PrecisionAssignment,
) -> Result<SearchTrace, SearchError> {
    let outcome = train_model(net, &assignment, data, &cfg.final_cfg)?;
    let final_eval = evaluate(net, &assignment, &outcome.weights, data.report_split())?;
    Ok(SearchTrace {
        network: net.clone(),
        mode: cfg.mode,
        budget_fraction: cfg.budget_fraction,
        seed: cfg.seed,
        steps,
        final_assignment: assignment,
        final_eval,
    })
}

/// Iterative greedy binarization from a full-precision start: per step,
/// train-and-score every not-yet-binarized hidden layer, binarize the
/// argmin, stop at the first step whose FLOPs satisfy the budget (or after
/// `cfg.steps` steps), then retrain the selected assignment.
pub fn mixbin_shrink(
    net: &NetworkSpec,
    data: &DataBundle,
    cfg: &SearchConfig,
) -> Result<SearchTrace, SearchError> {
    if cfg.mode != SearchMode::Shrink {
        return Err(SearchError::WrongMode {
            expected: SearchMode::Shrink,
            actual: cfg.mode,
        });
    }
    cfg.validate()?;
    check_budget_reachable(net, cfg)?;

    let mut assignment = PrecisionAssignment::empty();
    let mut steps = Vec::new();
    loop {
        let done = match cfg.steps {
            Some(k) => steps.len() >= k,
            None => budget_satisfied(&flops(net, &assignment), cfg.budget_fraction),
        };
        if done || assignment.len() == net.hidden_count() {
            break;
        }
        let scores = brute_force_step(net, data, &assignment, cfg)?;
        let chosen = argmin(&scores).expect("nonempty candidates");
        assignment.insert(chosen);
        steps.push(SearchStep {
            step: steps.len() + 1,
            candidate_scores: scores,
            chosen,
            flops_after: flops(net, &assignment),
        });
    }
    finalize_trace(net, data, cfg, steps, assignment)
}

/// The reverse construction: start from all hidden layers binary and
/// un-binarize the argmin-score layer per step, considering only layers
/// whose conversion stays within the budget; stops when none remains.
pub fn mixbin_grow(
    net: &NetworkSpec,
    data: &DataBundle,
    cfg: &SearchConfig,
) -> Result<SearchTrace, SearchError> {
    if cfg.mode != SearchMode::Grow {
        return Err(SearchError::WrongMode {
            expected: SearchMode::Grow,
            actual: cfg.mode,
        });
    }
    cfg.validate()?;
    check_budget_reachable(net, cfg)?;

    let mut assignment = PrecisionAssignment::all_hidden(net);
    let mut steps = Vec::new();
    loop {
        if let Some(k) = cfg.steps {
            if steps.len() >= k {
                break;
            }
        }
        // feasible candidates: removing the layer keeps the budget satisfied
        let candidates: Vec<usize> = assignment
            .indices()
            .filter(|&layer| {
                let mut probe = assignment.clone();
                probe.remove(layer);
                budget_satisfied(&flops(net, &probe), cfg.budget_fraction)
            })
            .collect();
        if candidates.is_empty() {
            break;
        }
        let scores = score_candidates(
            net,
            data,
            &assignment,
            cfg,
            steps.len() + 1,
            SearchMode::Grow,
            &candidates,
        )?;
        let chosen = argmin(&scores).expect("nonempty candidates");
        assignment.remove(chosen);
        steps.push(SearchStep {
            step: steps.len() + 1,
            candidate_scores: scores,
            chosen,
            flops_after: flops(net, &assignment),
        });
    }
    finalize_trace(net, data, cfg, steps, assignment)
}

/// Random baseline: binarize hidden layers in a uniformly random order until
/// the budget is satisfied. Deterministic given the seed.
pub fn random_assignment(
    net: &NetworkSpec,
    budget_fraction: f64,
    seed: u64,
) -> Result<PrecisionAssignment, SearchError> {
    let floor = flops(net, &PrecisionAssignment::all_hidden(net)).remaining_fraction;
    if floor > budget_fraction {
        return Err(SearchError::BudgetUnreachable {
            budget: budget_fraction,
            floor,
        });
    }
    let mut order: Vec<usize> = net.hidden_indices().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "random.order"));
    order.shuffle(&mut rng);
    let mut assignment = PrecisionAssignment::empty();
    for layer in order {
        if budget_satisfied(&flops(net, &assignment), budget_fraction) {
            break;
        }
        assignment.insert(layer);
    }
    Ok(assignment)
}

/// Runs the configured mode and returns a trace. Random mode samples an
/// assignment (no greedy steps) and retrains it.
pub fn run_search(
    net: &NetworkSpec,
    data: &DataBundle,
    cfg: &SearchConfig,
) -> Result<SearchTrace, SearchError> {
    match cfg.mode {
        SearchMode::Shrink => mixbin_shrink(net, data, cfg),
        SearchMode::Grow => mixbin_grow(net, data, cfg),
        SearchMode::Random => {
            cfg.validate()?;
            let assignment = random_assignment(net, cfg.budget_fraction, cfg.seed)?;
            finalize_trace(net, data, cfg, Vec::new(), assignment)
        }
    }
}

/// Reuses a searched assignment (not the weights) on another dataset:
/// retrain from scratch under `final_cfg` and evaluate. The head is resized
/// when the class counts differ; the input shape must match.
pub fn transfer_assignment(
    trace: &SearchTrace,
    target: &DataBundle,
    final_cfg: &TrainConfig,
) -> Result<EvalResult, SearchError> {
    let first = target
        .train
        .images
        .first()
        .ok_or(TrainError::EmptySplit {
            split: crate::train::Split::Train,
        })?;
    if first.shape() != trace.network.input_shape {
        return Err(SearchError::IncompatibleInput {
            expected: trace.network.input_shape,
            actual: first.shape().to_vec(),
        });
    }
    let net = if target.train.num_classes != trace.network.num_classes {
        trace.network.with_num_classes(target.train.num_classes)
    } else {
        trace.network.clone()
    };
    let assignment =
        PrecisionAssignment::from_indices(trace.final_assignment.indices(), &net)?;
    let outcome = train_model(&net, &assignment, target, final_cfg)?;
    Ok(evaluate(
        &net,
        &assignment,
        &outcome.weights,
        target.report_split(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::ActivationKind;
    use crate::network::LayerSpec;
    use crate::train::{synth_bundle, SynthStyle};

    fn tiny_net() -> NetworkSpec {
        let stem = LayerSpec::conv(0, 1, 4, (3, 3), 1, 1, true, ActivationKind::BinReLU);
        let hidden = vec![
            LayerSpec::conv(1, 4, 6, (3, 3), 1, 0, true, ActivationKind::BinReLU),
            LayerSpec::conv(2, 6, 4, (3, 3), 1, 0, true, ActivationKind::BinReLU),
            LayerSpec::conv(3, 4, 6, (1, 1), 1, 0, true, ActivationKind::BinReLU),
        ];
        NetworkSpec::build([1, 8, 8], 2, stem, hidden).unwrap()
    }

    fn tiny_bundle(seed: u64) -> DataBundle {
        synth_bundle(2, [12, 6, 6], [1, 8, 8], seed, &SynthStyle::default()).unwrap()
    }

    fn quick_search_cfg(mode: SearchMode, budget: f64, seed: u64) -> SearchConfig {
        let proxy = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.05,
            augmentations: vec![],
            ..TrainConfig::default()
        };
        let final_cfg = TrainConfig {
            epochs: 2,
            ..proxy.clone()
        };
        SearchConfig {
            mode,
            budget_fraction: budget,
            steps: None,
            proxy,
            final_cfg,
            seed,
        }
    }

    #[test]
    fn shrink_vacuous_budget_takes_zero_steps() {
        let net = tiny_net();
        let data = tiny_bundle(1);
        let cfg = quick_search_cfg(SearchMode::Shrink, 1.0, 7);
        let trace = mixbin_shrink(&net, &data, &cfg).unwrap();
        assert!(trace.steps.is_empty());
        assert!(trace.final_assignment.is_empty());
    }

    #[test]
    fn shrink_floor_budget_binarizes_everything() {
        let net = tiny_net();
        let data = tiny_bundle(2);
        let floor = flops(&net, &PrecisionAssignment::all_hidden(&net)).remaining_fraction;
        let cfg = quick_search_cfg(SearchMode::Shrink, floor + 1e-9, 7);
        let trace = mixbin_shrink(&net, &data, &cfg).unwrap();
        assert_eq!(trace.steps.len(), net.hidden_count());
        assert_eq!(trace.final_assignment, PrecisionAssignment::all_hidden(&net));
    }

    #[test]
    fn shrink_trace_invariants() {
        let net = tiny_net();
        let data = tiny_bundle(3);
        let floor = flops(&net, &PrecisionAssignment::all_hidden(&net)).remaining_fraction;
        let cfg = quick_search_cfg(SearchMode::Shrink, floor + 1e-9, 5);
        let trace = mixbin_shrink(&net, &data, &cfg).unwrap();

        let mut prev_fraction = 1.0;
        for step in &trace.steps {
            // chosen is the argmin with ties to the lowest index
            let best = step
                .candidate_scores
                .iter()
                .fold(None::<(usize, f64)>, |acc, (&l, s)| match acc {
                    Some((_, loss)) if s.loss >= loss => acc,
                    _ => Some((l, s.loss)),
                })
                .unwrap()
                .0;
            assert_eq!(step.chosen, best);
            assert!(step.flops_after.remaining_fraction < prev_fraction);
            prev_fraction = step.flops_after.remaining_fraction;
        }
        // candidate cardinality shrinks by one per step
        let counts: Vec<usize> = trace.steps.iter().map(|s| s.candidate_scores.len()).collect();
        assert_eq!(counts, vec![3, 2, 1]);
    }

    #[test]
    fn shrink_is_deterministic() {
        let net = tiny_net();
        let data = tiny_bundle(4);
        let cfg = quick_search_cfg(SearchMode::Shrink, 0.35, 9);
        let a = mixbin_shrink(&net, &data, &cfg).unwrap();
        let b = mixbin_shrink(&net, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shrink_steps_rule() {
        let net = tiny_net();
        let data = tiny_bundle(5);
        let mut cfg = quick_search_cfg(SearchMode::Shrink, 1.0, 3);
        cfg.steps = Some(2);
        let trace = mixbin_shrink(&net, &data, &cfg).unwrap();
        assert_eq!(trace.steps.len(), 2);
        assert_eq!(trace.final_assignment.len(), 2);

        cfg.steps = Some(4);
        assert!(matches!(
            mixbin_shrink(&net, &data, &cfg),
            Err(SearchError::StepsExceedLayers { steps: 4, layers: 3 })
        ));
    }

    #[test]
    fn shrink_rejects_unreachable_budget() {
        let net = tiny_net();
        let data = tiny_bundle(6);
        let cfg = quick_search_cfg(SearchMode::Shrink, 0.01, 3);
        match mixbin_shrink(&net, &data, &cfg) {
            Err(SearchError::BudgetUnreachable { floor, budget }) => {
                assert_eq!(budget, 0.01);
                let expect =
                    flops(&net, &PrecisionAssignment::all_hidden(&net)).remaining_fraction;
                assert_eq!(floor, expect);
            }
            other => panic!("expected unreachable budget, got {other:?}"),
        }
    }

    #[test]
    fn shrink_chosen_equals_brute_force_argmin() {
        let net = tiny_net();
        let data = tiny_bundle(7);
        let mut cfg = quick_search_cfg(SearchMode::Shrink, 1.0, 11);
        cfg.steps = Some(2);
        let trace = mixbin_shrink(&net, &data, &cfg).unwrap();

        // re-run the brute force at each intermediate state independently
        let empty = PrecisionAssignment::empty();
        let step1 = brute_force_step(&net, &data, &empty, &cfg).unwrap();
        assert_eq!(step1, trace.steps[0].candidate_scores);

        let mut after1 = PrecisionAssignment::empty();
        after1.insert(trace.steps[0].chosen);
        let step2 = brute_force_step(&net, &data, &after1, &cfg).unwrap();
        assert_eq!(step2, trace.steps[1].candidate_scores);
    }

    #[test]
    fn brute_force_cardinality() {
        let net = tiny_net();
        let data = tiny_bundle(8);
        let cfg = quick_search_cfg(SearchMode::Shrink, 0.5, 2);
        let empty = PrecisionAssignment::empty();
        let scores = brute_force_step(&net, &data, &empty, &cfg).unwrap();
        assert_eq!(scores.len(), 3);

        let two = PrecisionAssignment::from_indices([1, 3], &net).unwrap();
        let scores = brute_force_step(&net, &data, &two, &cfg).unwrap();
        assert_eq!(scores.len(), 1);
        assert!(scores.contains_key(&2));

        let all = PrecisionAssignment::all_hidden(&net);
        assert!(matches!(
            brute_force_step(&net, &data, &all, &cfg),
            Err(SearchError::NoCandidates)
        ));
    }

    #[test]
    fn grow_floor_budget_takes_zero_steps() {
        let net = tiny_net();
        let data = tiny_bundle(9);
        let floor = flops(&net, &PrecisionAssignment::all_hidden(&net)).remaining_fraction;
        let cfg = quick_search_cfg(SearchMode::Grow, floor + 1e-9, 7);
        let trace = mixbin_grow(&net, &data, &cfg).unwrap();
        assert!(trace.steps.is_empty());
        assert_eq!(trace.final_assignment, PrecisionAssignment::all_hidden(&net));
    }

    #[test]
    fn grow_vacuous_budget_reaches_full_precision() {
        let net = tiny_net();
        let data = tiny_bundle(10);
        let cfg = quick_search_cfg(SearchMode::Grow, 1.0, 7);
        let trace = mixbin_grow(&net, &data, &cfg).unwrap();
        assert_eq!(trace.steps.len(), net.hidden_count());
        assert!(trace.final_assignment.is_empty());
        // remaining fraction strictly increases along a grow trace
        let mut prev = flops(&net, &PrecisionAssignment::all_hidden(&net)).remaining_fraction;
        for step in &trace.steps {
            assert!(step.flops_after.remaining_fraction > prev);
            prev = step.flops_after.remaining_fraction;
        }
    }

    #[test]
    fn grow_stops_before_exceeding_budget() {
        let net = tiny_net();
        let data = tiny_bundle(11);
        let floor = flops(&net, &PrecisionAssignment::all_hidden(&net)).remaining_fraction;
        let budget = (floor + 1.0) / 2.0;
        let cfg = quick_search_cfg(SearchMode::Grow, budget, 4);
        let trace = mixbin_grow(&net, &data, &cfg).unwrap();
        let final_fraction = flops(&net, &trace.final_assignment).remaining_fraction;
        assert!(final_fraction <= budget);
        // and growing any further would exceed it
        for layer in trace.final_assignment.indices() {
            let mut probe = trace.final_assignment.clone();
            probe.remove(layer);
            assert!(flops(&net, &probe).remaining_fraction > budget);
        }
    }

    #[test]
    fn random_assignment_edges() {
        let net = tiny_net();
        assert!(random_assignment(&net, 1.0, 5).unwrap().is_empty());

        let floor = flops(&net, &PrecisionAssignment::all_hidden(&net)).remaining_fraction;
        let all = random_assignment(&net, floor + 1e-9, 5).unwrap();
        assert_eq!(all, PrecisionAssignment::all_hidden(&net));

        assert!(matches!(
            random_assignment(&net, floor / 2.0, 5),
            Err(SearchError::BudgetUnreachable { .. })
        ));

        assert_eq!(
            random_assignment(&net, 0.5, 42).unwrap(),
            random_assignment(&net, 0.5, 42).unwrap()
        );
    }

    #[test]
    fn random_sampler_covers_all_layers() {
        let net = tiny_net();
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..1000 {
            let a = random_assignment(&net, 0.6, seed).unwrap();
            seen.extend(a.indices());
        }
        let all: std::collections::BTreeSet<usize> = net.hidden_indices().collect();
        assert_eq!(seen, all);
    }

    #[test]
    fn transfer_identity_on_source() {
        let net = tiny_net();
        let data = tiny_bundle(12);
        let mut cfg = quick_search_cfg(SearchMode::Shrink, 1.0, 6);
        cfg.steps = Some(1);
        let trace = mixbin_shrink(&net, &data, &cfg).unwrap();
        let transferred = transfer_assignment(&trace, &data, &cfg.final_cfg).unwrap();
        assert_eq!(transferred, trace.final_eval);
    }

    #[test]
    fn transfer_rejects_incompatible_shape() {
        let net = tiny_net();
        let data = tiny_bundle(13);
        let mut cfg = quick_search_cfg(SearchMode::Shrink, 1.0, 6);
        cfg.steps = Some(1);
        let trace = mixbin_shrink(&net, &data, &cfg).unwrap();
        let other = synth_bundle(2, [6, 4, 4], [1, 10, 10], 1, &SynthStyle::default()).unwrap();
        assert!(matches!(
            transfer_assignment(&trace, &other, &cfg.final_cfg),
            Err(SearchError::IncompatibleInput { .. })
        ));
    }

    #[test]
    fn trace_csv_shapes() {
        let net = tiny_net();
        let data = tiny_bundle(14);
        let mut cfg = quick_search_cfg(SearchMode::Shrink, 1.0, 8);
        cfg.steps = Some(2);
        let trace = mixbin_shrink(&net, &data, &cfg).unwrap();

        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,layer,score,remaining_fraction");
        assert_eq!(lines.len(), 1 + 3 + 2);

        let curve = trace.curve_csv();
        let lines: Vec<&str> = curve.lines().collect();
        assert_eq!(lines[0], "remaining_fraction,accuracy,stage");
        assert_eq!(lines.len(), 1 + 2 + 1);
        assert!(lines.last().unwrap().ends_with(",final"));
    }

    #[test]
    fn run_search_random_mode() {
        let net = tiny_net();
        let data = tiny_bundle(15);
        let cfg = quick_search_cfg(SearchMode::Random, 0.5, 21);
        let trace = run_search(&net, &data, &cfg).unwrap();
        assert!(trace.steps.is_empty());
        assert_eq!(
            trace.final_assignment,
            random_assignment(&net, 0.5, 21).unwrap()
        );
        assert!(flops(&net, &trace.final_assignment).remaining_fraction <= 0.5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = quick_search_cfg(SearchMode::Shrink, 0.0, 1);
        assert!(matches!(
            cfg.validate(),
            Err(SearchError::BadConfig { field, .. }) if field == "budget_fraction"
        ));
        cfg.budget_fraction = 0.5;
        cfg.proxy.epochs = 10;
        cfg.final_cfg.epochs = 5;
        assert!(matches!(
            cfg.validate(),
            Err(SearchError::BadConfig { field, .. }) if field == "proxy.epochs"
        ));
    }
}
