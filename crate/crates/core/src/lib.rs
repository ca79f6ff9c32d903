pub mod diffcore;
pub mod par;
pub mod datamodel;
pub mod simulator;
pub mod baselines;
pub mod hypergraph;
pub mod masac;
pub mod selfcheck;
