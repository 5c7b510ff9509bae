//! Rule-driven decision channels for elastic facility provisioning.
//!
//! Sources gather data into a versioned [`datablock`], transforms derive new
//! products, the [`logic`] engine evaluates facts and forward-chains rules,
//! and publishers act on fired rules. The [`provisioning`] module holds the
//! reference channel and [`sim`] the simulated facilities it runs against.

pub mod channel;
pub mod config;
pub mod datablock;
pub mod decision_log;
pub mod logic;
pub mod money;
pub mod provisioning;
pub mod service;
pub mod sim;
