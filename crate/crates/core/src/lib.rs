//! Reinforcement-learning control of a subgrid closure, with simulation
//! workers exchanging tensors through an in-memory broker.

pub mod bandit;
pub mod broker;
pub mod policy;
pub mod orchestrator;
pub mod ppo;
pub mod rl;
pub mod sim;
pub mod spectra;
pub mod wire;
pub mod worker;
