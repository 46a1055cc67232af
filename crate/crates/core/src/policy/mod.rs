pub mod bc;
pub mod planner;
pub mod rollout;
