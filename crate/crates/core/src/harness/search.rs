use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState, VERSION};
use super::config::{ClockMode, EvaluatorConfig, SearchConfig};
use super::records::{append_jsonl, read_jsonl, truncate_lines, DbRow, LogRecord, SearchLog};
use super::HarnessError;
use crate::arch::{build_with, BuildOptions};
use crate::catalog::{catalog, BlockCode, Catalog};
use crate::qlearning::{greedy_trajectory, replay_update, sample_trajectory, QTable, ReplayEntry, ReplayMemory, Stage};
use crate::reward::{
    EvalRequest, EvalResponse, EvalStatus, Evaluator, ExternalEvaluator, SimulatedEvaluator, TrainerClient,
};
use crate::space::{decode_net, encode_net, SearchSpace, Trajectory};

pub const DB_FILE: &str = "replay.jsonl";
pub const LOG_FILE: &str = "search_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Iteration(LogRecord),
    Finished,
}

/// State of one search run. [`Search::step`] performs one iteration and,
/// with a run directory, leaves a checkpoint from which
/// [`Search::resume`] continues.
pub struct Search {
    cfg: SearchConfig,
    space: SearchSpace,
    catalog: Catalog,
    q: QTable,
    memory: ReplayMemory,
    rng: ChaCha8Rng,
    evaluator: Box<dyn Evaluator + Send>,
    iteration: u64,
    next_request_id: u64,
    stage: usize,
    /// Models trained (evaluation finished) in the current stage.
    stage_unique: u32,
    stage_attempts: u64,
    db_rows: u64,
    log: SearchLog,
    finished: bool,
}

fn catalog_for(cfg: &SearchConfig) -> Result<Catalog, HarnessError> {
    match &cfg.catalog {
        Some(path) => Catalog::load(path).map_err(|e| HarnessError::Config(e.to_string())),
        None => Ok(catalog().clone()),
    }
}

fn evaluator_for(cfg: &SearchConfig) -> Box<dyn Evaluator + Send> {
    match &cfg.evaluator {
        EvaluatorConfig::Simulated(o) => Box::new(SimulatedEvaluator::new(o.clone())),
        EvaluatorConfig::External { endpoint, timeout } => Box::new(ExternalEvaluator::new(endpoint.clone(), *timeout)),
    }
}

impl Search {
    pub fn new(cfg: SearchConfig) -> Result<Self, HarnessError> {
        let evaluator = evaluator_for(&cfg);
        Self::with_evaluator(cfg, evaluator)
    }

    /// Starts a fresh run scored by `evaluator` instead of the configured one.
    pub fn with_evaluator(cfg: SearchConfig, evaluator: Box<dyn Evaluator + Send>) -> Result<Self, HarnessError> {
        cfg.validate()?;
        if let Some(dir) = &cfg.run_dir {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
            for name in [CHECKPOINT_FILE, DB_FILE, LOG_FILE] {
                if dir.join(name).exists() {
                    return Err(HarnessError::AlreadyExists(dir.join(name).display().to_string()));
                }
            }
        }
        let search = Search {
            space: SearchSpace::new(cfg.max_depth)?,
            catalog: catalog_for(&cfg)?,
            q: QTable::new(cfg.q0),
            memory: ReplayMemory::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            evaluator,
            iteration: 0,
            next_request_id: 1,
            stage: 0,
            stage_unique: 0,
            stage_attempts: 0,
            db_rows: 0,
            log: Vec::new(),
            finished: false,
            cfg,
        };
        search.save_checkpoint()?;
        Ok(search)
    }

    /// Reopens a run from its checkpoint file or run directory.
    pub fn resume(path: &Path) -> Result<Self, HarnessError> {
        Self::resume_inner(path, None)
    }

    pub fn resume_with_evaluator(path: &Path, evaluator: Box<dyn Evaluator + Send>) -> Result<Self, HarnessError> {
        Self::resume_inner(path, Some(evaluator))
    }

    fn resume_inner(path: &Path, evaluator: Option<Box<dyn Evaluator + Send>>) -> Result<Self, HarnessError> {
        let (dir, cp_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(CHECKPOINT_FILE))
        } else {
            (path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf), path.to_path_buf())
        };
        let cp = Checkpoint::load(&cp_path)?;
        let mut cfg = SearchConfig::from_file(&cp.config)?;
        cfg.run_dir = Some(dir.clone());

        let (db_path, log_path) = (dir.join(DB_FILE), dir.join(LOG_FILE));
        truncate_lines(&db_path, cp.db_rows)?;
        truncate_lines(&log_path, cp.log_rows)?;
        let rows: Vec<DbRow> = if cp.db_rows == 0 { Vec::new() } else { read_jsonl(&db_path)? };
        let log: SearchLog = if cp.log_rows == 0 { Vec::new() } else { read_jsonl(&log_path)? };

        let mut memory = ReplayMemory::new();
        for row in rows.iter().filter(|r| !r.cached) {
            let blocks = decode_net(&row.net, cfg.max_depth)
                .map_err(|e| HarnessError::Corrupt(format!("replay DB row {}: {e}", row.iteration)))?
                .trajectory
                .codes();
            if memory.contains(&blocks) {
                continue;
            }
            memory.insert(entry_from_row(row, blocks))?;
        }

        Ok(Search {
            space: SearchSpace::new(cfg.max_depth)?,
            catalog: catalog_for(&cfg)?,
            q: cp.q_table()?,
            memory,
            rng: cp.rng.restore()?,
            evaluator: evaluator.unwrap_or_else(|| evaluator_for(&cfg)),
            iteration: cp.iteration,
            next_request_id: cp.next_request_id,
            stage: cp.stage,
            stage_unique: cp.stage_unique,
            stage_attempts: cp.stage_attempts,
            db_rows: cp.db_rows,
            log,
            finished: cp.finished,
            cfg,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn q_table(&self) -> &QTable {
        &self.q
    }

    pub fn memory(&self) -> &ReplayMemory {
        &self.memory
    }

    pub fn log(&self) -> &SearchLog {
        &self.log
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    /// The greedy trajectory under the current Q-table.
    pub fn greedy(&self) -> Trajectory {
        greedy_trajectory(&self.q, &self.space)
    }

    /// Runs to the end of the schedule and returns the search log.
    pub fn run(&mut self) -> Result<SearchLog, HarnessError> {
        if self.cfg.parallel > 1 {
            self.run_parallel()?;
        } else {
            while let StepOutcome::Iteration(_) = self.step()? {}
        }
        Ok(self.log.clone())
    }

    /// One sequential iteration: sample, evaluate or reuse, update, persist.
    pub fn step(&mut self) -> Result<StepOutcome, HarnessError> {
        let Some((stage_idx, stage)) = self.current_stage(0)? else {
            return Ok(StepOutcome::Finished);
        };
        let (t, forced) = self.draw(stage);
        let codes = t.codes();
        if self.cfg.dedupe {
            if let Some(entry) = self.memory.get(&codes).cloned() {
                return self.record_cached(stage_idx, stage, forced, &t, &entry).map(StepOutcome::Iteration);
            }
        }
        let (request, params) = self.request_for(&t);
        let response = match params {
            Some(_) => self.evaluate_with_retries(request),
            None => EvalResponse::failed(request.id, "network could not be built"),
        };
        self.stage_unique += 1;
        self.record_new(stage_idx, stage, forced, &t, params.unwrap_or(0), &response).map(StepOutcome::Iteration)
    }

    /// Moves past completed or exhausted stages. `in_flight` counts models
    /// submitted but not yet finished. Returns `None` once the schedule is
    /// done.
    fn current_stage(&mut self, in_flight: usize) -> Result<Option<(usize, Stage)>, HarnessError> {
        if self.finished {
            return Ok(None);
        }
        loop {
            let Some(&stage) = self.cfg.schedule.stages().get(self.stage) else {
                self.finished = true;
                self.save_checkpoint()?;
                return Ok(None);
            };
            let done = self.stage_unique >= stage.unique_models;
            let stuck = in_flight == 0 && self.stage_attempts >= self.attempt_cap(stage) && self.exhausted(0);
            if done || stuck {
                if stuck && !done {
                    log::warn!(
                        "stage {} (epsilon {}) ends with {} of {} models: every network has been trained",
                        self.stage,
                        stage.epsilon,
                        self.stage_unique,
                        stage.unique_models
                    );
                }
                self.stage += 1;
                self.stage_unique = 0;
                self.stage_attempts = 0;
                continue;
            }
            return Ok(Some((self.stage, stage)));
        }
    }

    fn attempt_cap(&self, stage: Stage) -> u64 {
        u64::from(self.cfg.attempt_cap_factor) * u64::from(stage.unique_models)
    }

    fn exhausted(&self, in_flight: usize) -> bool {
        self.cfg.dedupe && (self.memory.len() + in_flight) as u128 >= self.space.size()
    }

    /// Samples one trajectory. Every time the stage's attempt count reaches
    /// another multiple of the cap, that one sample is fully random.
    fn draw(&mut self, stage: Stage) -> (Trajectory, bool) {
        let cap = self.attempt_cap(stage);
        let forced = cap > 0 && self.stage_attempts >= cap && self.stage_attempts % cap == 0;
        let epsilon = if forced { 1.0 } else { stage.epsilon };
        self.stage_attempts += 1;
        (sample_trajectory(&self.q, epsilon, &mut self.rng, &self.space), forced)
    }

    fn request_for(&mut self, t: &Trajectory) -> (EvalRequest, Option<u64>) {
        let built = build_with(&self.catalog, t, self.cfg.input_shape, self.cfg.class_count, BuildOptions::default());
        let params = match built {
            Ok(g) => Some(g.param_count),
            Err(e) => {
                log::warn!("{}: {e}", encode_net(t, self.cfg.class_count));
                None
            }
        };
        let request = EvalRequest {
            id: self.take_request_id(),
            blocks: t.codes(),
            net_string: encode_net(t, self.cfg.class_count),
            dataset: self.cfg.dataset,
            budget: self.cfg.budget,
        };
        (request, params)
    }

    fn take_request_id(&mut self) -> u64 {
        let id = self.next_request_id;
        self.next_request_id += 1;
        id
    }

    fn evaluate_with_retries(&mut self, mut request: EvalRequest) -> EvalResponse {
        let mut response = self.evaluator.evaluate(&request);
        for _ in 0..self.cfg.eval_retries {
            if response.is_ok() {
                break;
            }
            log::warn!("evaluation of {} failed ({}); retrying", request.net_string, response.detail);
            request.id = self.take_request_id();
            response = self.evaluator.evaluate(&request);
        }
        response
    }

    fn record_cached(
        &mut self,
        stage_idx: usize,
        stage: Stage,
        forced: bool,
        t: &Trajectory,
        entry: &ReplayEntry,
    ) -> Result<LogRecord, HarnessError> {
        self.q.update(t, entry.accuracy, self.cfg.params)?;
        self.iteration += 1;
        let row = DbRow {
            iteration: self.iteration,
            epsilon: stage.epsilon,
            net: entry.net_string.clone(),
            accuracy: entry.accuracy,
            params: entry.param_count,
            cached: true,
            status: entry.status,
            timestamp: self.timestamp(),
            stage: stage_idx,
            detail: String::new(),
        };
        self.commit(row, forced)
    }

    fn record_new(
        &mut self,
        stage_idx: usize,
        stage: Stage,
        forced: bool,
        t: &Trajectory,
        params: u64,
        response: &EvalResponse,
    ) -> Result<LogRecord, HarnessError> {
        self.iteration += 1;
        let accuracy = response.reward();
        let codes = t.codes();
        let net = encode_net(t, self.cfg.class_count);
        let timestamp = self.timestamp();
        if !self.memory.contains(&codes) {
            self.memory.insert(ReplayEntry {
                blocks: codes,
                net_string: net.clone(),
                accuracy,
                iteration: self.iteration,
                epsilon: stage.epsilon,
                param_count: params,
                wall_time: timestamp,
                status: response.status,
            })?;
        }
        self.q.update(t, accuracy, self.cfg.params)?;
        replay_update(&mut self.q, &self.memory, self.cfg.replay_batch, &mut self.rng, self.cfg.params, &self.space)?;
        let row = DbRow {
            iteration: self.iteration,
            epsilon: stage.epsilon,
            net,
            accuracy,
            params,
            cached: false,
            status: response.status,
            timestamp,
            stage: stage_idx,
            detail: response.detail.clone(),
        };
        self.commit(row, forced)
    }

    fn timestamp(&self) -> u64 {
        match self.cfg.clock {
            ClockMode::Logical => self.iteration,
            ClockMode::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| u64::try_from(d.as_millis()).unwrap_or(u64::MAX)),
        }
    }

    fn commit(&mut self, row: DbRow, forced: bool) -> Result<LogRecord, HarnessError> {
        let record = LogRecord {
            iteration: row.iteration,
            stage: row.stage,
            epsilon: row.epsilon,
            net: row.net.clone(),
            accuracy: row.accuracy,
            cached: row.cached,
            forced_explore: forced,
            q_hash: self.q.digest(),
        };
        if let Some(dir) = &self.cfg.run_dir {
            append_jsonl(&dir.join(DB_FILE), &row)?;
            append_jsonl(&dir.join(LOG_FILE), &record)?;
        }
        self.db_rows += 1;
        self.log.push(record.clone());
        self.save_checkpoint()?;
        Ok(record)
    }

    fn save_checkpoint(&self) -> Result<(), HarnessError> {
        let Some(dir) = &self.cfg.run_dir else { return Ok(()) };
        let cp = Checkpoint {
            version: VERSION,
            config: self.cfg.to_file(),
            iteration: self.iteration,
            next_request_id: self.next_request_id,
            stage: self.stage,
            stage_unique: self.stage_unique,
            stage_attempts: self.stage_attempts,
            rng: RngState::capture(&self.rng),
            db_rows: self.db_rows,
            log_rows: self.log.len() as u64,
            finished: self.finished,
            q0: self.q.q0(),
            q_records: Checkpoint::records_of(&self.q),
        };
        cp.save(&dir.join(CHECKPOINT_FILE))
    }

    /// Keeps up to `parallel` external evaluations in flight and applies
    /// completions in arrival order. A stage's quota counts submitted
    /// models, and the next stage starts only once all of them are back.
    /// Requests in flight at a crash are lost and re-sampled after resume.
    fn run_parallel(&mut self) -> Result<(), HarnessError> {
        struct Pending {
            stage_idx: usize,
            stage: Stage,
            forced: bool,
            trajectory: Trajectory,
            params: u64,
        }
        let EvaluatorConfig::External { endpoint, timeout } = self.cfg.evaluator.clone() else {
            return Err(HarnessError::Config("parallel evaluation needs the external evaluator".into()));
        };
        let mut client = TrainerClient::connect(&endpoint, timeout).map_err(|e| HarnessError::Evaluator(e.to_string()))?;
        let mut pending: HashMap<u64, Pending> = HashMap::new();
        let mut in_flight_nets: HashSet<Vec<BlockCode>> = HashSet::new();

        loop {
            let Some((stage_idx, stage)) = self.current_stage(pending.len())? else { break };
            let submitted = self.stage_unique as usize + pending.len();
            let room = pending.len() < self.cfg.parallel && submitted < stage.unique_models as usize;
            let blocked = self.stage_attempts >= self.attempt_cap(stage) && self.exhausted(pending.len());
            if room && !blocked {
                let (t, forced) = self.draw(stage);
                let codes = t.codes();
                if in_flight_nets.contains(&codes) {
                    continue;
                }
                if self.cfg.dedupe {
                    if let Some(entry) = self.memory.get(&codes).cloned() {
                        self.record_cached(stage_idx, stage, forced, &t, &entry)?;
                        continue;
                    }
                }
                let (request, params) = self.request_for(&t);
                let Some(params) = params else {
                    let response = EvalResponse::failed(request.id, "network could not be built");
                    self.stage_unique += 1;
                    self.record_new(stage_idx, stage, forced, &t, 0, &response)?;
                    continue;
                };
                if let Err(e) = client.submit(&request, timeout) {
                    return Err(HarnessError::Evaluator(e.to_string()));
                }
                in_flight_nets.insert(codes);
                pending.insert(request.id, Pending { stage_idx, stage, forced, trajectory: t, params });
                continue;
            }
            let Some(response) = client.next_completion() else { break };
            for stray in client.take_unmatched() {
                log::warn!("ignoring response for unknown request {}", stray.id);
            }
            let Some(p) = pending.remove(&response.id) else { continue };
            in_flight_nets.remove(&p.trajectory.codes());
            if response.status == EvalStatus::Failed {
                log::warn!("evaluation {} failed: {}", response.id, response.detail);
            }
            self.stage_unique += 1;
            self.record_new(p.stage_idx, p.stage, p.forced, &p.trajectory, p.params, &response)?;
        }
        Ok(())
    }
}

fn entry_from_row(row: &DbRow, blocks: Vec<BlockCode>) -> ReplayEntry {
    ReplayEntry {
        blocks,
        net_string: row.net.clone(),
        accuracy: row.accuracy,
        iteration: row.iteration,
        epsilon: row.epsilon,
        param_count: row.params,
        wall_time: row.timestamp,
        status: row.status,
    }
}

/// Runs a fresh search to completion.
pub fn run_search(cfg: SearchConfig) -> Result<SearchLog, HarnessError> {
    Search::new(cfg)?.run()
}

/// Continues an interrupted run; a finished run returns its log unchanged.
pub fn resume(path: &Path) -> Result<SearchLog, HarnessError> {
    Search::resume(path)?.run()
}
