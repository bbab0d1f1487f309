//! Visual servoing of a bend-and-twist soft continuum arm.
//!
//! Constant-strain kinematics ([`rodkin`]), simulated pinhole cameras
//! ([`vision`]), the reinforcement-learning environment ([`envmdp`]), a
//! from-scratch Soft Actor-Critic ([`sac`]), the local actuation controller
//! ([`localctl`]) and the evaluation harness ([`evalharness`]).

pub mod commands;
pub mod config;
pub mod envmdp;
pub mod evalharness;
pub mod localctl;
pub mod rodkin;
pub mod sac;
pub mod vision;
