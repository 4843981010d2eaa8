//! Peer-to-peer voltage control for radial low-voltage feeders.
//!
//! The library models a distribution feeder as a tree with a slack node,
//! solves its load flow by backward/forward sweeps, and closes a distributed
//! control loop in which per-node agents exchange Lagrangian multipliers over
//! a gossip protocol and local DER inverters adjust their active/reactive
//! power to keep every node voltage inside limits. A deterministic
//! discrete-event engine ties the pieces together for reproducible
//! simulations; a synchronous centralized solver on the linearized model
//! serves as the reference the distributed loop is checked against.

pub mod control;
pub mod gossip;
pub mod grid_model;
pub mod powerflow;
pub mod sensitivity;
pub mod sim;
