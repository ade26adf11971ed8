//! Ask/tell engine that carries one optimizer across a sequence of users.
//!
//! A user session runs `begin_user`, then `iterations` rounds of
//! `propose`/`tell`, then `finalize_user`. Between users the engine keeps
//! whatever its [`EngineKind`] transfers: a library of per-user GPs, a
//! population network, or a pooled GP.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    argmax_lowest, candidate_grid, expected_improvements, mixed_argmax, population_weight, random_exploration_count,
    AcquisitionParams,
};
use crate::baselines::EngineKind;
use crate::bnn::{BnnArchitecture, MetaSample, PopulationModel, PopulationRecord, TrainSettings};
use crate::error::{Error, Result};
use crate::gp::{fit_gp, GpFitSettings, GpModel, GpRecord};
use crate::rng::{self, StreamRng};
use crate::{DesignPoint, Observation, Prediction};

pub const STATE_SCHEMA: &str = "conbo-engine/v1";

/// Every tunable of an engine. Defaults are the user-study settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub dim: usize,
    /// Iterations per user.
    pub iterations: usize,
    pub acquisition: AcquisitionParams,
    /// Replayed predictions need a variance below this value.
    pub variance_threshold: f64,
    pub variance_filter: bool,
    pub meta_grid_resolution: usize,
    pub meta_random_points: usize,
    pub meta_epochs: usize,
    /// Online epochs after each observation.
    pub online_epochs: usize,
    /// Retrain the population model after every `meta_every` users.
    pub meta_every: usize,
    /// Dropout passes per population prediction.
    pub n_mc: usize,
    pub architecture: BnnArchitecture,
    pub training: TrainSettings,
    pub gp: GpFitSettings,
    /// Iterations of full prior weight for the transfer-acquisition baseline.
    pub taf_d1: usize,
    /// Per-iteration decay of the prior weight for the transfer-acquisition baseline.
    pub taf_d2: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            iterations: 10,
            acquisition: AcquisitionParams::default(),
            variance_threshold: 5.0,
            variance_filter: true,
            meta_grid_resolution: 20,
            meta_random_points: 100,
            meta_epochs: 800,
            online_epochs: 20,
            meta_every: 1,
            n_mc: 32,
            architecture: BnnArchitecture::default(),
            training: TrainSettings::default(),
            gp: GpFitSettings::default(),
            taf_d1: 0,
            taf_d2: 0.05,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.architecture.input_dim != self.dim {
            return bad("architecture.input_dim must equal dim");
        }
        if self.variance_threshold.is_nan() || self.variance_threshold <= 0.0 {
            return bad("variance_threshold must be positive");
        }
        if self.meta_every == 0 || self.n_mc == 0 {
            return bad("meta_every and n_mc must be positive");
        }
        if self.meta_epochs == 0 {
            return bad("meta_epochs must be positive");
        }
        if !(self.taf_d2 > 0.0 && self.taf_d2.is_finite()) {
            return bad("taf_d2 must be positive");
        }
        self.acquisition.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sample_plan(&self, filter: bool) -> SamplePlan {
        SamplePlan {
            grid_resolution: self.meta_grid_resolution,
            n_random: self.meta_random_points,
            lambda: if filter { self.variance_threshold } else { f64::INFINITY },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Random,
    Guided,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Random => "random",
            Phase::Guided => "guided",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub x: DesignPoint,
    pub phase: Phase,
    /// Weight of the population (or prior-user) term; zero for random picks.
    pub weight: f64,
}

/// Where replay samples come from: a regular grid plus random extras, and the
/// variance threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub grid_resolution: usize,
    pub n_random: usize,
    pub lambda: f64,
}

/// Replay locations: `res^d` grid points at `i / (res − 1)` then `n_random`
/// uniform points.
pub fn meta_locations(plan: &SamplePlan, dim: usize, rng: &mut StreamRng) -> Vec<DesignPoint> {
    let mut points = if plan.grid_resolution == 0 {
        Vec::new()
    } else {
        candidate_grid(plan.grid_resolution.pow(dim as u32), dim)
    };
    for _ in 0..plan.n_random {
        points.push((0..dim).map(|_| rng.gen::<f64>()).collect());
    }
    points
}

/// Predictions of every stored GP at every replay location, keeping those
/// with variance strictly below `lambda`. A GP with nothing below the
/// threshold contributes nothing.
pub fn generate_meta_dataset(library: &[LibraryEntry], plan: &SamplePlan, rng: &mut StreamRng) -> Result<Vec<MetaSample>> {
    let first = library.first().ok_or(Error::Empty("model library"))?;
    let locations = meta_locations(plan, first.gp.dim(), rng);
    let mut samples = Vec::new();
    for entry in library {
        let preds = entry.gp.predict_many(&locations)?;
        for (x, p) in locations.iter().zip(preds) {
            if p.variance < plan.lambda {
                samples.push(MetaSample {
                    x: x.clone(),
                    target_mean: p.mean,
                    target_variance: p.variance,
                    source_user: entry.user,
                });
            }
        }
    }
    Ok(samples)
}

/// A finished user's GP.
#[derive(Clone, Debug)]
pub struct LibraryEntry {
    pub user: usize,
    pub gp: GpModel,
}

/// The active user's state.
#[derive(Clone, Debug)]
pub struct UserSession {
    user: usize,
    r_u: usize,
    observations: Vec<Observation>,
    user_gp: Option<GpModel>,
    pending: Option<Proposal>,
    rng: StreamRng,
}

impl UserSession {
    /// 1-based position of this user in the sequence.
    pub fn user(&self) -> usize {
        self.user
    }

    pub fn random_explorations(&self) -> usize {
        self.r_u
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.observations.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn user_gp(&self) -> Option<&GpModel> {
        self.user_gp.as_ref()
    }

    fn best_y(&self) -> Option<f64> {
        self.observations.iter().map(|o| o.y).reduce(f64::max)
    }
}

/// What happened when a user was closed.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalizeReport {
    pub user: usize,
    /// Replay samples produced, zero when no replay ran.
    pub meta_samples: usize,
    /// Stored GPs with at least one retained sample.
    pub contributing_users: usize,
    /// Final training loss if the population model was retrained.
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Engine {
    kind: EngineKind,
    config: EngineConfig,
    seed: u64,
    candidates: Vec<DesignPoint>,
    library: Vec<LibraryEntry>,
    population: Option<PopulationModel>,
    pooled: Vec<Observation>,
    pooled_gp: Option<GpModel>,
    users_started: usize,
    users_finalized: usize,
    meta_rounds: usize,
    session: Option<UserSession>,
}

impl Engine {
    pub fn new(kind: EngineKind, config: EngineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let population = if kind.uses_population() {
            Some(PopulationModel::new(
                config.architecture.clone(),
                rng::derive_seed(seed, "population", 0),
            )?)
        } else {
            None
        };
        Ok(Self {
            candidates: candidate_grid(config.acquisition.n_candidates, config.dim),
            kind,
            config,
            seed,
            library: Vec::new(),
            population,
            pooled: Vec::new(),
            pooled_gp: None,
            users_started: 0,
            users_finalized: 0,
            meta_rounds: 0,
            session: None,
        })
    }

    pub fn kind(&self) -> EngineKind {
        self.kind
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn candidates(&self) -> &[DesignPoint] {
        &self.candidates
    }

    pub fn library(&self) -> &[LibraryEntry] {
        &self.library
    }

    pub fn population(&self) -> Option<&PopulationModel> {
        self.population.as_ref()
    }

    pub fn session(&self) -> Option<&UserSession> {
        self.session.as_ref()
    }

    pub fn users_started(&self) -> usize {
        self.users_started
    }

    pub fn users_finalized(&self) -> usize {
        self.users_finalized
    }

    /// Observations from finished users kept for pooled training.
    pub fn pooled_observations(&self) -> &[Observation] {
        &self.pooled
    }

    /// Observations behind the pooled GP, including the active user's.
    pub fn pooled_gp_len(&self) -> usize {
        self.pooled_gp.as_ref().map_or(0, GpModel::len)
    }

    /// Random explorations the next user would receive.
    pub fn next_random_explorations(&self) -> usize {
        self.random_explorations_for(self.users_started + 1)
    }

    fn random_explorations_for(&self, user: usize) -> usize {
        let a = &self.config.acquisition;
        if self.kind.decays_exploration() {
            random_exploration_count(user, a.r0, a.d_r)
        } else {
            a.r0
        }
    }

    pub fn begin_user(&mut self) -> Result<&UserSession> {
        if self.session.is_some() {
            return Err(Error::Protocol("a user session is already active".into()));
        }
        let user = self.users_started + 1;
        let user_gp = if self.kind.fits_user_gp() {
            Some(fit_gp(self.config.dim, &[], &self.config.gp)?)
        } else {
            None
        };
        self.users_started = user;
        self.session = Some(UserSession {
            user,
            r_u: self.random_explorations_for(user),
            observations: Vec::new(),
            user_gp,
            pending: None,
            rng: rng::stream(rng::derive_seed(self.seed, "session", user as u64)),
        });
        Ok(self.session.as_ref().expect("just set"))
    }

    pub fn propose(&mut self) -> Result<Proposal> {
        let session = self.session.as_ref().ok_or_else(|| Error::Protocol("no active user session".into()))?;
        if session.pending.is_some() {
            return Err(Error::Protocol("propose called twice without tell".into()));
        }
        let t = session.observations.len() + 1;
        if t > self.config.iterations {
            return Err(Error::Protocol("the user session has used all its iterations".into()));
        }
        let proposal = if t <= session.r_u {
            let s = self.session.as_mut().expect("checked");
            Proposal {
                x: (0..self.config.dim).map(|_| s.rng.gen::<f64>()).collect(),
                phase: Phase::Random,
                weight: 0.0,
            }
        } else {
            let (index, weight) = self.guided_choice(t)?;
            Proposal {
                x: self.candidates[index].clone(),
                phase: Phase::Guided,
                weight,
            }
        };
        self.session.as_mut().expect("checked").pending = Some(proposal.clone());
        Ok(proposal)
    }

    /// Candidate index and population/prior weight for iteration `t`.
    fn guided_choice(&mut self, t: usize) -> Result<(usize, f64)> {
        let acq = &self.config.acquisition;
        let session = self.session.as_mut().expect("caller checked");
        let best = session.best_y();
        let gp_term = |gp: &GpModel| -> Result<Vec<f64>> {
            let preds = gp.predict_many(&self.candidates)?;
            Ok(expected_improvements(&preds, best.unwrap_or_else(|| max_mean(&preds))))
        };
        match self.kind {
            EngineKind::Conbo
            | EngineKind::ConboNoFilter
            | EngineKind::ConboNoGp
            | EngineKind::BnnNoReplay
            | EngineKind::BnnDirectReplay => {
                let w = match self.kind {
                    EngineKind::Conbo | EngineKind::ConboNoFilter => population_weight(t, acq.alpha1, acq.alpha2),
                    EngineKind::ConboNoGp => population_weight(t, self.config.iterations, acq.alpha2),
                    _ => 1.0,
                };
                let pop_preds = if w > 0.0 {
                    let pop = self.population.as_ref().ok_or(Error::MissingPopulationModel(w))?;
                    Some(pop.predict_many(&self.candidates, self.config.n_mc, &mut session.rng)?)
                } else {
                    None
                };
                let incumbent = match (best, &pop_preds) {
                    (Some(b), _) => Some(b),
                    (None, Some(p)) => Some(max_mean(p)),
                    (None, None) => None,
                };
                let pop_ei = pop_preds.map(|p| expected_improvements(&p, incumbent.expect("set with predictions")));
                let user_ei = if w < 1.0 {
                    let gp = session.user_gp.as_ref().ok_or(Error::State("user GP missing".into()))?;
                    let preds = gp.predict_many(&self.candidates)?;
                    let inc = incumbent.unwrap_or_else(|| max_mean(&preds));
                    Some(expected_improvements(&preds, inc))
                } else {
                    None
                };
                Ok((mixed_argmax(w, pop_ei.as_deref(), user_ei.as_deref())?, w))
            }
            EngineKind::StandardBo => {
                let gp = session.user_gp.as_ref().ok_or(Error::State("user GP missing".into()))?;
                let ei = gp_term(gp)?;
                Ok((argmax_lowest(&ei).ok_or(Error::Empty("candidate set"))?, 0.0))
            }
            EngineKind::SingleGp => {
                let ei = match &self.pooled_gp {
                    Some(gp) => gp_term(gp)?,
                    None => gp_term(&fit_gp(self.config.dim, &[], &self.config.gp)?)?,
                };
                Ok((argmax_lowest(&ei).ok_or(Error::Empty("candidate set"))?, 0.0))
            }
            EngineKind::Taf => {
                let w = if self.library.is_empty() {
                    0.0
                } else {
                    population_weight(t, self.config.taf_d1, self.config.taf_d2)
                };
                let prior_ei = if w > 0.0 {
                    let mut sum = vec![0.0; self.candidates.len()];
                    for entry in &self.library {
                        let preds = entry.gp.predict_many(&self.candidates)?;
                        let own_best = max_mean(&preds);
                        for (s, e) in sum.iter_mut().zip(expected_improvements(&preds, own_best)) {
                            *s += e;
                        }
                    }
                    let n = self.library.len() as f64;
                    Some(sum.into_iter().map(|s| s / n).collect::<Vec<_>>())
                } else {
                    None
                };
                let user_ei = if w < 1.0 {
                    let gp = session.user_gp.as_ref().ok_or(Error::State("user GP missing".into()))?;
                    Some(gp_term(gp)?)
                } else {
                    None
                };
                Ok((mixed_argmax(w, prior_ei.as_deref(), user_ei.as_deref())?, w))
            }
        }
    }

    pub fn tell(&mut self, x: &[f64], y: f64) -> Result<()> {
        let session = self.session.as_mut().ok_or_else(|| Error::Protocol("no active user session".into()))?;
        let pending = session
            .pending
            .as_ref()
            .ok_or_else(|| Error::Protocol("tell called without a pending proposal".into()))?;
        if pending.x.as_slice() != x {
            return Err(Error::Protocol("told point differs from the last proposal".into()));
        }
        if !y.is_finite() {
            return Err(Error::NonFinite("objective values"));
        }
        let mut observations = session.observations.clone();
        observations.push(Observation::new(x.to_vec(), y));

        let user_gp = if self.kind.fits_user_gp() {
            Some(fit_gp(self.config.dim, &observations, &self.config.gp)?)
        } else {
            None
        };
        let pooled_gp = if self.kind == EngineKind::SingleGp {
            let mut all = self.pooled.clone();
            all.extend(observations.iter().cloned());
            Some(fit_gp(self.config.dim, &all, &self.config.gp)?)
        } else {
            None
        };
        if let Some(pop) = self.population.as_mut() {
            pop.online_update(&observations, self.config.online_epochs, &self.config.training)?;
        }

        let session = self.session.as_mut().expect("checked");
        session.observations = observations;
        session.pending = None;
        if user_gp.is_some() {
            session.user_gp = user_gp;
        }
        if pooled_gp.is_some() {
            self.pooled_gp = pooled_gp;
        }
        Ok(())
    }

    pub fn finalize_user(&mut self) -> Result<FinalizeReport> {
        let session = self.session.as_ref().ok_or_else(|| Error::Protocol("no active user session".into()))?;
        if session.pending.is_some() || session.observations.len() != self.config.iterations {
            return Err(Error::Protocol(format!(
                "user session finished {} of {} iterations",
                session.observations.len(),
                self.config.iterations
            )));
        }
        let session = self.session.take().expect("checked");
        self.users_finalized += 1;
        let mut report = FinalizeReport {
            user: session.user,
            meta_samples: 0,
            contributing_users: 0,
            train_loss: None,
        };
        if self.kind.keeps_library() {
            let gp = session.user_gp.clone().ok_or(Error::State("user GP missing".into()))?;
            self.library.push(LibraryEntry { user: session.user, gp });
        }
        if matches!(self.kind, EngineKind::SingleGp | EngineKind::BnnDirectReplay) {
            self.pooled.extend(session.observations.iter().cloned());
        }
        let due = self.users_finalized.is_multiple_of(self.config.meta_every);
        if self.kind.uses_replay() && due {
            let filter = self.config.variance_filter && self.kind != EngineKind::ConboNoFilter;
            let plan = self.config.sample_plan(filter);
            let mut meta_rng = rng::stream(rng::derive_seed(self.seed, "meta", self.meta_rounds as u64));
            self.meta_rounds += 1;
            let samples = generate_meta_dataset(&self.library, &plan, &mut meta_rng)?;
            report.meta_samples = samples.len();
            let mut sources: Vec<usize> = samples.iter().map(|s| s.source_user).collect();
            sources.dedup();
            report.contributing_users = sources.len();
            if samples.is_empty() {
                log::warn!("user {}: every replayed prediction exceeded the variance threshold; population model kept", session.user);
            } else {
                let pop = self.population.as_mut().ok_or(Error::State("population model missing".into()))?;
                let trained = pop.meta_train(&samples, self.config.meta_epochs, &self.config.training)?;
                log::info!(
                    "user {}: replayed {} samples from {} users, loss {:.4}",
                    session.user,
                    samples.len(),
                    sources.len(),
                    trained.final_loss
                );
                report.train_loss = Some(trained.final_loss);
            }
        } else if self.kind == EngineKind::BnnDirectReplay && due {
            let pop = self.population.as_mut().ok_or(Error::State("population model missing".into()))?;
            let trained = pop.fit_observations(&self.pooled, self.config.meta_epochs, &self.config.training)?;
            report.train_loss = Some(trained.final_loss);
        }
        Ok(report)
    }

    /// Serializes the engine between users.
    pub fn to_state_json(&self) -> Result<String> {
        if self.session.is_some() {
            return Err(Error::Protocol("state can only be saved between users".into()));
        }
        let state = EngineState {
            schema: STATE_SCHEMA.to_string(),
            kind: self.kind,
            seed: self.seed,
            config: self.config.clone(),
            users_started: self.users_started,
            users_finalized: self.users_finalized,
            meta_rounds: self.meta_rounds,
            library: self
                .library
                .iter()
                .map(|e| LibraryRecord {
                    user: e.user,
                    gp: e.gp.to_record(),
                })
                .collect(),
            population: self.population.as_ref().map(PopulationModel::to_record),
            pooled: self.pooled.clone(),
            pooled_gp: self.pooled_gp.as_ref().map(GpModel::to_record),
        };
        let mut text = serde_json::to_string_pretty(&state)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_state_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::State(format!("not valid JSON: {e}")))?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(STATE_SCHEMA) => {}
            Some(other) => return Err(Error::State(format!("schema `{other}` is not `{STATE_SCHEMA}`"))),
            None => return Err(Error::State("missing schema tag".into())),
        }
        let state: EngineState = serde_json::from_str(text).map_err(|e| Error::State(e.to_string()))?;
        state.config.validate()?;
        let mut engine = Engine::new(state.kind, state.config, state.seed)?;
        engine.library = state
            .library
            .iter()
            .map(|r| Ok(LibraryEntry { user: r.user, gp: GpModel::from_record(&r.gp)? }))
            .collect::<Result<_>>()?;
        engine.population = match (&state.population, state.kind.uses_population()) {
            (Some(p), true) => Some(PopulationModel::from_record(p)?),
            (None, false) => None,
            _ => return Err(Error::State("population model presence does not match engine kind".into())),
        };
        engine.pooled = state.pooled;
        engine.pooled_gp = state.pooled_gp.as_ref().map(GpModel::from_record).transpose()?;
        engine.users_started = state.users_started;
        engine.users_finalized = state.users_finalized;
        engine.meta_rounds = state.meta_rounds;
        Ok(engine)
    }

    /// Writes the state file atomically (temporary file, then rename).
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let text = self.to_state_json()?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load_state(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_state_json(&text)
    }
}

fn max_mean(preds: &[Prediction]) -> f64 {
    preds.iter().map(|p| p.mean).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryRecord {
    user: usize,
    gp: GpRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EngineState {
    schema: String,
    kind: EngineKind,
    seed: u64,
    config: EngineConfig,
    users_started: usize,
    users_finalized: usize,
    meta_rounds: usize,
    library: Vec<LibraryRecord>,
    population: Option<PopulationRecord>,
    pooled: Vec<Observation>,
    pooled_gp: Option<GpRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{BaseFunction, SyntheticUser};

    /// Small and fast settings for protocol tests.
    fn tiny(iterations: usize) -> EngineConfig {
        EngineConfig {
            iterations,
            acquisition: AcquisitionParams {
                alpha1: 3,
                alpha2: 0.25,
                n_candidates: 100,
                r0: 2,
                d_r: 1,
            },
            variance_threshold: 0.5,
            meta_grid_resolution: 5,
            meta_random_points: 5,
            meta_epochs: 5,
            online_epochs: 2,
            n_mc: 4,
            architecture: BnnArchitecture {
                hidden_width: 16,
                ..Default::default()
            },
            gp: GpFitSettings {
                restarts: 2,
                max_iters: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn run_user(engine: &mut Engine, user: &SyntheticUser) -> Vec<Proposal> {
        engine.begin_user().unwrap();
        let mut out = Vec::new();
        for _ in 0..engine.config().iterations {
            let p = engine.propose().unwrap();
            engine.tell(&p.x, user.eval(&p.x)).unwrap();
            out.push(p);
        }
        engine.finalize_user().unwrap();
        out
    }

    fn branin() -> SyntheticUser {
        SyntheticUser::identity(BaseFunction::Branin)
    }

    #[test]
    fn exploration_budget_decays_per_user() {
        let mut e = Engine::new(EngineKind::Conbo, tiny(4), 0).unwrap();
        let mut seen = Vec::new();
        for _ in 0..4 {
            seen.push(e.next_random_explorations());
            let phases: Vec<Phase> = run_user(&mut e, &branin()).into_iter().map(|p| p.phase).collect();
            let r = *seen.last().unwrap();
            assert!(phases.iter().take(r).all(|p| *p == Phase::Random));
            assert!(phases.iter().skip(r).all(|p| *p == Phase::Guided));
        }
        assert_eq!(seen, vec![2, 1, 0, 0]);
        assert_eq!(e.library().len(), 4);
    }

    #[test]
    fn standard_bo_never_decays() {
        let mut e = Engine::new(EngineKind::StandardBo, tiny(3), 0).unwrap();
        for _ in 0..3 {
            assert_eq!(e.next_random_explorations(), 2);
            run_user(&mut e, &branin());
        }
        assert!(e.library().is_empty());
    }

    #[test]
    fn protocol_errors() {
        let mut e = Engine::new(EngineKind::Conbo, tiny(2), 0).unwrap();
        assert!(matches!(e.propose(), Err(Error::Protocol(_))));
        e.begin_user().unwrap();
        assert!(matches!(e.begin_user(), Err(Error::Protocol(_))));
        let p = e.propose().unwrap();
        assert!(matches!(e.propose(), Err(Error::Protocol(_))));
        assert!(matches!(e.tell(&[9.0, 9.0], 1.0), Err(Error::Protocol(_))));
        assert!(matches!(e.tell(&p.x, f64::NAN), Err(Error::NonFinite(_))));
        assert!(matches!(e.finalize_user(), Err(Error::Protocol(_))));
        e.tell(&p.x, 1.0).unwrap();
        assert_eq!(e.session().unwrap().iteration(), 1);
        assert!(matches!(e.to_state_json(), Err(Error::Protocol(_))));
    }

    #[test]
    fn tell_moves_the_user_gp_toward_the_observation() {
        let mut e = Engine::new(EngineKind::StandardBo, tiny(2), 0).unwrap();
        e.begin_user().unwrap();
        let p = e.propose().unwrap();
        let before = e.session().unwrap().user_gp().unwrap().predict(&p.x).unwrap().mean;
        e.tell(&p.x, 7.0).unwrap();
        let after = e.session().unwrap().user_gp().unwrap().predict(&p.x).unwrap().mean;
        assert!((after - 7.0).abs() < (before - 7.0).abs());
    }

    #[test]
    fn zero_online_epochs_leave_the_population_alone() {
        let cfg = EngineConfig {
            online_epochs: 0,
            ..tiny(2)
        };
        let mut e = Engine::new(EngineKind::Conbo, cfg, 3).unwrap();
        let before = e.population().unwrap().parameters();
        e.begin_user().unwrap();
        let p = e.propose().unwrap();
        e.tell(&p.x, 1.0).unwrap();
        assert_eq!(before, e.population().unwrap().parameters());
    }

    #[test]
    fn single_gp_pools_every_observation() {
        let mut e = Engine::new(EngineKind::SingleGp, tiny(3), 0).unwrap();
        for _ in 0..3 {
            run_user(&mut e, &branin());
        }
        assert_eq!(e.pooled_gp_len(), 9);
        assert_eq!(e.pooled_observations().len(), 9);
    }

    #[test]
    fn taf_without_priors_matches_standard_bo() {
        let mut taf = Engine::new(EngineKind::Taf, tiny(5), 11).unwrap();
        let mut bo = Engine::new(EngineKind::StandardBo, tiny(5), 11).unwrap();
        assert_eq!(run_user(&mut taf, &branin()), run_user(&mut bo, &branin()));
    }

    #[test]
    fn proposals_are_reproducible() {
        let go = || {
            let mut e = Engine::new(EngineKind::Conbo, tiny(4), 5).unwrap();
            (0..3).flat_map(|_| run_user(&mut e, &branin())).map(|p| p.x).collect::<Vec<_>>()
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn state_round_trip_is_byte_identical_and_resumes() {
        let mut e = Engine::new(EngineKind::Conbo, tiny(4), 9).unwrap();
        run_user(&mut e, &branin());
        run_user(&mut e, &branin());
        let text = e.to_state_json().unwrap();
        let mut loaded = Engine::from_state_json(&text).unwrap();
        assert_eq!(loaded.to_state_json().unwrap(), text);
        assert_eq!(run_user(&mut loaded, &branin()), run_user(&mut e, &branin()));
    }

    #[test]
    fn corrupt_or_foreign_state_is_rejected() {
        assert!(matches!(Engine::from_state_json("{"), Err(Error::State(_))));
        assert!(matches!(Engine::from_state_json(r#"{"schema":"other/v9"}"#), Err(Error::State(_))));
        let e = Engine::new(EngineKind::StandardBo, tiny(2), 0).unwrap();
        let text = e.to_state_json().unwrap().replace("\"users_started\": 0", "\"users_started\": \"x\"");
        assert!(matches!(Engine::from_state_json(&text), Err(Error::State(_))));
    }

    #[test]
    fn empty_library_dataset_is_an_error() {
        let plan = tiny(1).sample_plan(true);
        assert!(generate_meta_dataset(&[], &plan, &mut rng::stream(0)).is_err());
    }

    #[test]
    fn unfiltered_replay_keeps_every_pair() {
        let cfg = tiny(3);
        let mut e = Engine::new(EngineKind::ConboNoFilter, cfg.clone(), 1).unwrap();
        let r1 = run_user(&mut e, &branin());
        assert_eq!(r1.len(), 3);
        let r = {
            let mut e2 = e.clone();
            e2.begin_user().unwrap();
            for _ in 0..3 {
                let p = e2.propose().unwrap();
                e2.tell(&p.x, branin().eval(&p.x)).unwrap();
            }
            e2.finalize_user().unwrap()
        };
        let locations = cfg.meta_grid_resolution.pow(2) + cfg.meta_random_points;
        assert_eq!(r.meta_samples, 2 * locations);
        assert_eq!(r.contributing_users, 2);
    }
}
