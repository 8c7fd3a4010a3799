//! One LES episode driven by externally supplied actions.
//!
//! Per step `t = 0..=n` the worker publishes the state at
//! `{run_id}.env{id}.state.{t}` followed by a U8 flag at
//! `{run_id}.env{id}.done.{t}` (0 running, 1 final state). For `t < n` it
//! then waits for `{run_id}.env{id}.action.{t}`, applies it for one agent
//! interval and continues. If the solution blows up while advancing from
//! step `t`, only `done.{t+1}` is written, with the value 2.

use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::broker::{Client, ClientError};
use crate::sim::dataset::DatasetError;
use crate::sim::{FlowField, SimError, Solver, SolverConfig};
use crate::wire::{Tensor, WireError};

pub const DONE_RUNNING: u8 = 0;
pub const DONE_FINAL: u8 = 1;
pub const DONE_BLOW_UP: u8 = 2;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SETUP: i32 = 1;
pub const EXIT_TIMEOUT: i32 = 2;
pub const EXIT_BLOW_UP: i32 = 3;
/// Exit status of a deliberately crashed worker.
pub const EXIT_INJECTED_FAULT: i32 = 101;

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("broker: {0}")]
    Broker(#[from] ClientError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("bad action tensor: {0}")]
    BadAction(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("injected fault at step {0}")]
    InjectedFault(usize),
}

impl WorkerError {
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkerError::Broker(_) => EXIT_TIMEOUT,
            WorkerError::Sim(SimError::BlowUp { .. }) => EXIT_BLOW_UP,
            WorkerError::InjectedFault(_) => EXIT_INJECTED_FAULT,
            _ => EXIT_SETUP,
        }
    }
}

pub fn state_key(run_id: &str, env_id: usize, t: usize) -> String {
    format!("{run_id}.env{env_id}.state.{t}")
}

pub fn done_key(run_id: &str, env_id: usize, t: usize) -> String {
    format!("{run_id}.env{env_id}.done.{t}")
}

pub fn action_key(run_id: &str, env_id: usize, t: usize) -> String {
    format!("{run_id}.env{env_id}.action.{t}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerConfig {
    pub broker_address: String,
    pub run_id: String,
    pub env_id: usize,
    pub dataset_path: PathBuf,
    pub initial_state_index: usize,
    pub test_mode: bool,
    pub t_end: f64,
    pub dt_rl: f64,
    pub dealias: bool,
    pub poll_interval: Duration,
    pub poll_timeout: Duration,
    pub fault_exit_at: Option<usize>,
}

impl WorkerConfig {
    pub fn n_actions(&self) -> Result<usize, WorkerError> {
        let n = self.t_end / self.dt_rl;
        if !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
            return Err(WorkerError::Config(format!("t_end / dt_rl = {n} is not a positive integer")));
        }
        Ok(n.round() as usize)
    }
}

/// LES stepped one agent interval at a time. The solver time step is chosen
/// per interval as the largest step that divides the interval and satisfies
/// the stability bound.
pub struct LesEpisode {
    solver: Solver,
    field: FlowField,
    dt_rl: f64,
    step: usize,
}

impl LesEpisode {
    pub fn new(initial: FlowField, viscosity: f64, forcing: f64, dt_rl: f64, dealias: bool) -> Result<Self, SimError> {
        let cfg = SolverConfig { viscosity, forcing, dt: dt_rl, dealias };
        let solver = Solver::new(initial.grid, cfg)?;
        Ok(Self { solver, field: initial, dt_rl, step: 0 })
    }

    pub fn state(&self) -> &FlowField {
        &self.field
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Holds `cs` for one agent interval.
    pub fn apply(&mut self, cs: &[f64]) -> Result<&FlowField, SimError> {
        let bound = self.solver.stable_dt(&self.field, cs)?;
        let substeps = (self.dt_rl / bound).ceil().max(1.0);
        self.solver.set_dt(self.dt_rl / substeps)?;
        let start = self.step as f64 * self.dt_rl;
        let mut next = self.solver.advance(&self.field, cs, self.dt_rl)?;
        next.time = start + self.dt_rl;
        self.field = next;
        self.step += 1;
        Ok(&self.field)
    }
}

/// Transport between the worker and the agent.
pub trait Exchange {
    fn put_state(&mut self, t: usize, state: &FlowField) -> Result<(), WorkerError>;
    fn put_done(&mut self, t: usize, flag: u8) -> Result<(), WorkerError>;
    fn get_action(&mut self, t: usize) -> Result<Vec<f64>, WorkerError>;
}

pub struct BrokerExchange {
    client: Client,
    run_id: String,
    env_id: usize,
    poll_interval: Duration,
    poll_timeout: Duration,
}

impl BrokerExchange {
    pub fn connect(cfg: &WorkerConfig) -> Result<Self, WorkerError> {
        let addr = cfg
            .broker_address
            .parse()
            .map_err(|e| WorkerError::Config(format!("broker address {:?}: {e}", cfg.broker_address)))?;
        let client = Client::connect_timeout(&addr, cfg.poll_timeout)?;
        Ok(Self {
            client,
            run_id: cfg.run_id.clone(),
            env_id: cfg.env_id,
            poll_interval: cfg.poll_interval,
            poll_timeout: cfg.poll_timeout,
        })
    }
}

impl Exchange for BrokerExchange {
    fn put_state(&mut self, t: usize, state: &FlowField) -> Result<(), WorkerError> {
        let key = state_key(&self.run_id, self.env_id, t);
        Ok(self.client.put(&key, Tensor::vector_f64(&state.u))?)
    }

    fn put_done(&mut self, t: usize, flag: u8) -> Result<(), WorkerError> {
        let key = done_key(&self.run_id, self.env_id, t);
        Ok(self.client.put(&key, Tensor::scalar_u8(flag))?)
    }

    fn get_action(&mut self, t: usize) -> Result<Vec<f64>, WorkerError> {
        let key = action_key(&self.run_id, self.env_id, t);
        let tensor = self.client.poll(&key, self.poll_interval, self.poll_timeout)?;
        Ok(tensor.to_f64()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeEnd {
    Completed,
    BlownUp { step: usize },
}

/// Runs the exchange protocol over `n_actions` intervals.
pub fn drive_episode<E: Exchange>(
    episode: &mut LesEpisode,
    n_actions: usize,
    exchange: &mut E,
    fault_exit_at: Option<usize>,
) -> Result<EpisodeEnd, WorkerError> {
    let n_elements = episode.state().grid.n_elements;
    for t in 0..=n_actions {
        if fault_exit_at == Some(t) {
            return Err(WorkerError::InjectedFault(t));
        }
        exchange.put_state(t, episode.state())?;
        if t == n_actions {
            exchange.put_done(t, DONE_FINAL)?;
            break;
        }
        exchange.put_done(t, DONE_RUNNING)?;
        let cs = exchange.get_action(t)?;
        if cs.len() != n_elements {
            return Err(WorkerError::BadAction(format!("{} values for {n_elements} elements", cs.len())));
        }
        match episode.apply(&cs) {
            Ok(_) => {}
            Err(SimError::BlowUp { .. }) => {
                exchange.put_done(t + 1, DONE_BLOW_UP)?;
                return Ok(EpisodeEnd::BlownUp { step: t + 1 });
            }
            Err(SimError::OutOfRangeCs(c)) => return Err(WorkerError::BadAction(format!("Cs {c} out of range"))),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(EpisodeEnd::Completed)
}

/// Loads the initial state and runs one episode against the broker. Returns
/// the process exit code.
pub fn run_episode(cfg: &WorkerConfig) -> i32 {
    match run_episode_inner(cfg) {
        Ok(EpisodeEnd::Completed) => EXIT_OK,
        Ok(EpisodeEnd::BlownUp { step }) => {
            log::warn!("env {}: blow-up before step {step}", cfg.env_id);
            EXIT_BLOW_UP
        }
        Err(e) => {
            log::error!("env {}: {e}", cfg.env_id);
            e.exit_code()
        }
    }
}

fn run_episode_inner(cfg: &WorkerConfig) -> Result<EpisodeEnd, WorkerError> {
    let n = cfg.n_actions()?;
    let dataset = crate::sim::dataset::Dataset::load(&cfg.dataset_path)?;
    let initial = dataset.initial_state(cfg.initial_state_index, cfg.test_mode)?;
    let mut episode = LesEpisode::new(initial, dataset.viscosity, dataset.forcing, cfg.dt_rl, cfg.dealias)?;
    let mut exchange = BrokerExchange::connect(cfg)?;
    drive_episode(&mut episode, n, &mut exchange, cfg.fault_exit_at)
}
