pub mod aasm;
pub mod cli;
pub mod abstape;
pub mod lp;
pub mod problems;
pub mod solver;
pub mod plmodel;
